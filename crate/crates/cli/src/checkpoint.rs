//! Weights on disk: tensors in an HSCW file, model geometry and training
//! provenance in its `.meta` sidecar.

use std::path::Path;

use sst_core::io::{meta_path, read_hscw, write_hscw, Meta};
use sst_core::model::{ParamStore, SstConfig, SstModel, TrainedModel};

use crate::Failure;

pub fn config_meta(cfg: &SstConfig, backbone: bool) -> Meta {
    let mut m = Meta::new();
    m.set("height", cfg.height)
        .set("width", cfg.width)
        .set("channels", cfg.channels)
        .set("step", cfg.step)
        .set("n_stages", cfg.n_stages)
        .set("base_channels", cfg.base_channels)
        .set("window", cfg.window)
        .set("heads", cfg.heads)
        .set("depth", cfg.depth)
        .set("levels", cfg.levels)
        .set("ffn_mult", cfg.ffn_mult)
        .set("inner_reversible", cfg.inner_reversible)
        .set("zero_init_mapping", cfg.zero_init_mapping)
        .set("backbone", backbone);
    m
}

fn field<V: std::str::FromStr>(m: &Meta, key: &str, path: &Path) -> Result<V, Failure> {
    m.get_parsed(key)
        .ok_or_else(|| Failure::Other(anyhow::anyhow!("{}: missing or invalid `{key}`", path.display())))
}

/// Rebuilds the model described by a weights sidecar.
pub fn model_from_meta(m: &Meta, path: &Path) -> Result<SstModel, Failure> {
    let cfg = SstConfig {
        height: field(m, "height", path)?,
        width: field(m, "width", path)?,
        channels: field(m, "channels", path)?,
        step: field(m, "step", path)?,
        n_stages: field(m, "n_stages", path)?,
        base_channels: field(m, "base_channels", path)?,
        window: field(m, "window", path)?,
        heads: field(m, "heads", path)?,
        depth: field(m, "depth", path)?,
        levels: field(m, "levels", path)?,
        ffn_mult: field(m, "ffn_mult", path)?,
        inner_reversible: field(m, "inner_reversible", path)?,
        zero_init_mapping: field(m, "zero_init_mapping", path)?,
    };
    let backbone: bool = field(m, "backbone", path)?;
    Ok(if backbone { SstModel::new(cfg)? } else { SstModel::unmix_only(cfg)? })
}

pub fn save(path: &Path, model: &SstModel, params: &ParamStore<f32>, extra: &Meta) -> Result<(), Failure> {
    write_hscw(params, path)?;
    let mut m = config_meta(model.config(), model.has_backbone());
    for (k, v) in extra.iter() {
        m.set(k, v);
    }
    m.write(&meta_path(path))?;
    Ok(())
}

/// Loads weights and checks that they fit the model in the sidecar.
pub fn load(path: &Path) -> Result<TrainedModel<f32>, Failure> {
    let mp = meta_path(path);
    if !mp.is_file() {
        return Err(Failure::Other(anyhow::anyhow!("{}: missing sidecar {}", path.display(), mp.display())));
    }
    let model = model_from_meta(&Meta::read(&mp)?, &mp)?;
    let params = read_hscw(path)?;
    let expected = model.init_params::<f32>(0)?;
    let fits = expected.len() == params.len()
        && expected.iter().all(|(name, t)| params.get(name).is_some_and(|p| p.shape() == t.shape()));
    if !fits {
        return Err(Failure::Other(anyhow::anyhow!(
            "{}: tensors do not match the model described in {}",
            path.display(),
            mp.display()
        )));
    }
    // Store order must follow the declarations.
    let mut ordered = ParamStore::new();
    for (name, _) in expected.iter() {
        ordered.insert(name.to_string(), params.get(name).expect("checked above").clone())?;
    }
    Ok(TrainedModel { model, params: ordered })
}
