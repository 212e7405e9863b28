//! The W-shaped backbone: a spectral-attention U followed by a
//! spatial-attention U, each with nested dense skips between same-level
//! nodes.
//!
//! Node `(i, j)` sits at level `i` (resolution `H/2^i`) and column `j`.
//! Column 0 is the encoder. For `j ≥ 1` a node fuses every earlier node on
//! its level with the up-sampled node `(i+1, j−1)`, then runs its attention
//! blocks. The U's output is node `(0, levels)`.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Real;

use super::blocks::{self, declare_conv};
use super::config::SstConfig;
use super::params::{BoundParams, Declarations};

/// Which attention block populates a U.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Spectral,
    Spatial,
}

impl BlockKind {
    fn tag(self) -> &'static str {
        match self {
            BlockKind::Spectral => "spec",
            BlockKind::Spatial => "spat",
        }
    }
}

fn node_name(prefix: &str, i: usize, j: usize) -> String {
    format!("{prefix}.n{i}{j}")
}

fn declare_node(d: &mut Declarations, cfg: &SstConfig, kind: BlockKind, name: &str, level: usize) {
    let c = cfg.channels_at(level);
    let heads = cfg.heads_at(level);
    for b in 0..cfg.depth {
        let bn = format!("{name}.b{b}");
        match kind {
            BlockKind::Spectral => blocks::declare_spectral_ab(d, &bn, c, heads, cfg.ffn_mult),
            BlockKind::Spatial => blocks::declare_spatial_ab(d, &bn, c, heads, cfg.window, cfg.ffn_mult),
        }
    }
}

fn run_node<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    cfg: &SstConfig,
    kind: BlockKind,
    name: &str,
    level: usize,
    mut x: Var,
) -> Result<Var> {
    let heads = cfg.heads_at(level);
    for b in 0..cfg.depth {
        let bn = format!("{name}.b{b}");
        x = match kind {
            BlockKind::Spectral => blocks::spectral_ab(g, p, &bn, x)?,
            BlockKind::Spatial => blocks::spatial_ab(g, p, &bn, x, heads, cfg.window)?,
        };
    }
    Ok(x)
}

pub fn declare_unet(d: &mut Declarations, cfg: &SstConfig, kind: BlockKind, prefix: &str) {
    let prefix = format!("{prefix}.{}", kind.tag());
    let levels = cfg.levels;
    for i in 0..=levels {
        declare_node(d, cfg, kind, &node_name(&prefix, i, 0), i);
        if i < levels {
            // 4×4 stride-2 down-sampling
            declare_conv(d, &format!("{prefix}.down{i}"), cfg.channels_at(i + 1), cfg.channels_at(i), 4, true);
        }
    }
    for j in 1..=levels {
        for i in 0..=(levels - j) {
            let name = node_name(&prefix, i, j);
            let (c, c_up) = (cfg.channels_at(i), cfg.channels_at(i + 1));
            // 2×2 stride-2 transposed convolution, kernel [c_in, c_out, 2, 2]
            d.declare(
                format!("{name}.up.w"),
                &[c_up, c, 2, 2],
                super::params::Init::Uniform(1.0 / ((c_up * 4) as f64).sqrt()),
            );
            d.declare(format!("{name}.up.b"), &[c], super::params::Init::Zeros);
            declare_conv(d, &format!("{name}.fuse"), c, (j + 1) * c, 1, true);
            declare_node(d, cfg, kind, &name, i);
        }
    }
}

pub fn unet<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    cfg: &SstConfig,
    kind: BlockKind,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let prefix = format!("{prefix}.{}", kind.tag());
    let levels = cfg.levels;
    // nodes[i][j]
    let mut nodes: Vec<Vec<Var>> = vec![Vec::new(); levels + 1];
    let mut h = x;
    for i in 0..=levels {
        if i > 0 {
            let w = p.get(&format!("{prefix}.down{}.w", i - 1))?;
            let b = p.get(&format!("{prefix}.down{}.b", i - 1))?;
            h = g.conv2d_general(h, w, 2, 1, 1)?;
            h = blocks::channel_bias(g, h, b)?;
        }
        h = run_node(g, p, cfg, kind, &node_name(&prefix, i, 0), i, h)?;
        nodes[i].push(h);
    }
    for j in 1..=levels {
        for i in 0..=(levels - j) {
            let name = node_name(&prefix, i, j);
            let below = nodes[i + 1][j - 1];
            let up = g.conv_transpose2d(below, p.get(&format!("{name}.up.w"))?, 2)?;
            let up = blocks::channel_bias(g, up, p.get(&format!("{name}.up.b"))?)?;
            let mut parts = nodes[i].clone();
            parts.push(up);
            let fused = g.concat(&parts, 0)?;
            let fused = blocks::conv(g, p, &format!("{name}.fuse"), fused, true)?;
            let out = run_node(g, p, cfg, kind, &name, i, fused)?;
            nodes[i].push(out);
        }
    }
    Ok(nodes[0][levels])
}
