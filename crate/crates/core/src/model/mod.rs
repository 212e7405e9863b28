//! The reversible-prior reconstructor.
//!
//! Stage `n+1` receives the measurement residual `y − 𝒢(x_n)` (just `y` for
//! the first stage), shifts it back into a cube, unmixes it with the mask,
//! refines it with the W-shaped backbone and adds the result to `x_n`.

mod backbone;
pub mod blocks;
mod config;
mod params;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optics::{CodedMask, Measurement, SpectralCube};
use crate::tensor::{lit, Real, Tensor};

pub use backbone::BlockKind;
pub use config::{Family, SstConfig};
pub use params::{BoundParams, Declarations, Init, ParamSpec, ParamStore};

/// Per-stage snapshots recorded during reconstruction.
#[derive(Clone, Debug, Default)]
pub struct StageTrace<T> {
    /// Stage outputs `x_1 … x_N`.
    pub outputs: Vec<SpectralCube<T>>,
    /// Re-projections `z_n = 𝒢(x_n)`.
    pub projections: Vec<Measurement<T>>,
    /// Inputs `y_1 … y_N` fed to each stage.
    pub inputs: Vec<Measurement<T>>,
    /// `‖y − z_n‖²` for every stage.
    pub residual_energy: Vec<f64>,
}

/// Anything that maps a measurement and mask back to a cube.
pub trait Reconstructor<T: Real>: Sync {
    fn reconstruct(&self, y: &Measurement<T>, mask: &CodedMask<T>) -> Result<(SpectralCube<T>, StageTrace<T>)>;
}

/// Graph handles for the fixed inputs of one scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneVars {
    /// Measurement `H × W'`.
    pub y: Var,
    /// Mask broadcast over channels, `C×H×W`.
    pub mask: Var,
}

/// Graph output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Var,
    pub stage_outputs: Vec<Var>,
    pub stage_inputs: Vec<Var>,
}

/// Model definition; the weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct SstModel {
    cfg: SstConfig,
    backbone: bool,
}

impl SstModel {
    pub fn new(cfg: SstConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SstModel { cfg, backbone: true })
    }

    /// Shift-back and unmixing only, without the transformer backbone.
    pub fn unmix_only(cfg: SstConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SstModel { cfg, backbone: false })
    }

    pub fn config(&self) -> &SstConfig {
        &self.cfg
    }

    pub fn has_backbone(&self) -> bool {
        self.backbone
    }

    pub fn declarations(&self) -> Declarations {
        let mut d = Declarations::default();
        let cfg = &self.cfg;
        let (c, b) = (cfg.channels, cfg.base_channels);
        for s in 0..cfg.n_stages {
            let st = format!("stage{s}");
            blocks::declare_unmix(&mut d, &format!("{st}.unmix"), c);
            if !self.backbone {
                continue;
            }
            blocks::declare_conv(&mut d, &format!("{st}.embed"), b, c, 3, true);
            backbone::declare_unet(&mut d, cfg, BlockKind::Spectral, &st);
            if cfg.inner_reversible {
                self.declare_mapping(&mut d, &format!("{st}.map_mid"));
                blocks::declare_conv(&mut d, &format!("{st}.reembed"), b, c, 3, true);
            }
            backbone::declare_unet(&mut d, cfg, BlockKind::Spatial, &st);
            self.declare_mapping(&mut d, &format!("{st}.map"));
        }
        d
    }

    fn declare_mapping(&self, d: &mut Declarations, name: &str) {
        let (c, b) = (self.cfg.channels, self.cfg.base_channels);
        if self.cfg.zero_init_mapping {
            d.declare(format!("{name}.w"), &[c, b, 1, 1], Init::Zeros);
        } else {
            d.declare(format!("{name}.w"), &[c, b, 1, 1], Init::Uniform(1.0 / (b as f64).sqrt()));
        }
        d.declare(format!("{name}.b"), &[c], Init::Zeros);
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.declarations().instantiate(seed)
    }

    pub fn param_count(&self) -> usize {
        self.declarations()
            .specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Scale applied to shifted-back measurements so that a half-open mask
    /// maps the channel sum back to cube magnitude.
    fn input_scale<T: Real>(&self) -> T {
        lit(2.0 / self.cfg.channels as f64)
    }

    /// Adds the fixed scene inputs to `g`.
    pub fn scene_vars<T: Real>(&self, g: &mut Graph<T>, y: &Measurement<T>, mask: &CodedMask<T>) -> Result<SceneVars> {
        let cfg = &self.cfg;
        if (mask.height(), mask.width()) != (cfg.height, cfg.width) {
            return Err(Error::shape("reconstruct", &[cfg.height, cfg.width], &[mask.height(), mask.width()]));
        }
        if (y.height(), y.width()) != (cfg.height, cfg.measurement_width()) {
            return Err(Error::shape(
                "reconstruct",
                &[cfg.height, cfg.measurement_width()],
                &[y.height(), y.width()],
            ));
        }
        let y = g.constant(y.to_tensor());
        let m = g.constant(mask.to_tensor().reshaped(&[1, cfg.height, cfg.width])?);
        let mask = g.broadcast_to(m, &[cfg.channels, cfg.height, cfg.width])?;
        Ok(SceneVars { y, mask })
    }

    /// 𝒢 on the graph: modulate by the mask, disperse and integrate.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: Var) -> Result<Var> {
        let xm = g.mul(x, mask)?;
        g.disperse_integrate(xm, self.cfg.step)
    }

    fn shifted_input<T: Real>(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let sb = g.shift_back(y, self.cfg.channels, self.cfg.step)?;
        Ok(g.scale(sb, self.input_scale()))
    }

    fn mapping<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, f: Var) -> Result<Var> {
        let y = g.conv2d(f, p.get(&format!("{name}.w"))?)?;
        blocks::channel_bias(g, y, p.get(&format!("{name}.b"))?)
    }

    /// One reconstruction subnet `ℱ_s` applied to the stage input `y_in`.
    pub fn stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams<'_, T>,
        s: usize,
        y_in: Var,
        mask: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let st = format!("stage{s}");
        let shifted = self.shifted_input(g, y_in)?;
        let u = blocks::unmix(g, p, &format!("{st}.unmix"), shifted, mask)?;
        if !self.backbone {
            return Ok(u);
        }
        let f = blocks::conv(g, p, &format!("{st}.embed"), u, true)?;
        let mut f = backbone::unet(g, p, cfg, BlockKind::Spectral, &st, f)?;
        let mut base = u;
        if cfg.inner_reversible {
            let mid = self.mapping(g, p, &format!("{st}.map_mid"), f)?;
            base = g.add(u, mid)?;
            let z = self.project(g, base, mask)?;
            let r = g.sub(y_in, z)?;
            let r = self.shifted_input(g, r)?;
            let e = blocks::conv(g, p, &format!("{st}.reembed"), r, true)?;
            f = g.add(f, e)?;
        }
        let f = backbone::unet(g, p, cfg, BlockKind::Spatial, &st, f)?;
        let out = self.mapping(g, p, &format!("{st}.map"), f)?;
        g.add(base, out)
    }

    /// All stages: `x_{n+1} = ℱ_{n+1}(y − 𝒢(x_n)) + x_n`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams<'_, T>, scene: SceneVars) -> Result<ForwardOutput> {
        let mut x: Option<Var> = None;
        let mut stage_outputs = Vec::with_capacity(self.cfg.n_stages);
        let mut stage_inputs = Vec::with_capacity(self.cfg.n_stages);
        for s in 0..self.cfg.n_stages {
            let y_in = match x {
                None => scene.y,
                Some(xn) => {
                    let z = self.project(g, xn, scene.mask)?;
                    g.sub(scene.y, z)?
                }
            };
            stage_inputs.push(y_in);
            let delta = self.stage(g, p, s, y_in, scene.mask)?;
            let next = match x {
                None => delta,
                Some(xn) => g.add(xn, delta)?,
            };
            stage_outputs.push(next);
            x = Some(next);
        }
        Ok(ForwardOutput {
            output: x.expect("at least one stage"),
            stage_outputs,
            stage_inputs,
        })
    }

    /// Inference without gradient tracking.
    pub fn reconstruct<T: Real>(
        &self,
        params: &ParamStore<T>,
        y: &Measurement<T>,
        mask: &CodedMask<T>,
    ) -> Result<(SpectralCube<T>, StageTrace<T>)> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let scene = self.scene_vars(&mut g, y, mask)?;
        let out = self.forward(&mut g, &p, scene)?;
        let mut trace = StageTrace::default();
        for (&xv, &yv) in out.stage_outputs.iter().zip(&out.stage_inputs) {
            let z = self.project(&mut g, xv, scene.mask)?;
            let zm = Measurement::from_tensor(g.value(z))?;
            let energy = y
                .data()
                .iter()
                .zip(zm.data())
                .map(|(&a, &b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            trace.outputs.push(SpectralCube::from_tensor(g.value(xv))?);
            trace.inputs.push(Measurement::from_tensor(g.value(yv))?);
            trace.projections.push(zm);
            trace.residual_energy.push(energy);
        }
        let cube = SpectralCube::from_tensor(g.value(out.output))?;
        Ok((cube, trace))
    }
}

/// A model paired with its weights.
pub struct TrainedModel<T> {
    pub model: SstModel,
    pub params: ParamStore<T>,
}

impl<T: Real> Reconstructor<T> for TrainedModel<T> {
    fn reconstruct(&self, y: &Measurement<T>, mask: &CodedMask<T>) -> Result<(SpectralCube<T>, StageTrace<T>)> {
        self.model.reconstruct(&self.params, y, mask)
    }
}

/// The mask repeated over `channels` as a `C×H×W` tensor.
pub fn mask_tensor<T: Real>(mask: &CodedMask<T>, channels: usize) -> Tensor<T> {
    let (h, w) = (mask.height(), mask.width());
    Tensor::from_fn(&[channels, h, w], |i| mask.data()[i % (h * w)])
}

#[cfg(test)]
mod tests;
