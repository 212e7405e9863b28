use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optics::{forward_project, CodedMask, DispersionConfig, Measurement, NoiseModel, SpectralCube};
use crate::tensor::{lit, Real};

/// How the squared-error sums are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Divide each term by its element count.
    #[default]
    Mean,
    /// Raw sums of squares.
    Sum,
}

/// Weighting of the reconstruction and measurement-consistency terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight `ξ` of the measurement-space term.
    pub xi: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { xi: 0.2, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi >= 0.0) || !xi.is_finite() {
            return Err(Error::invalid("loss", format!("xi must be finite and >= 0, got {xi}")));
        }
        Ok(LossConfig { xi, reduction: Reduction::Mean })
    }
}

/// The two loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    /// `‖x_out − x_truth‖²`
    pub output: f64,
    /// `‖𝒢(x_out) − y‖²`
    pub reversible: f64,
}

fn reduce(sum: f64, n: usize, r: Reduction) -> f64 {
    match r {
        Reduction::Mean => sum / n as f64,
        Reduction::Sum => sum,
    }
}

/// `‖x_out − x_truth‖² + ξ·‖𝒢(x_out) − y‖²` with the noiseless sensing operator.
pub fn loss<T: Real>(
    x_out: &SpectralCube<T>,
    x_truth: &SpectralCube<T>,
    y: &Measurement<T>,
    mask: &CodedMask<T>,
    disp: &DispersionConfig,
    lc: &LossConfig,
) -> Result<LossTerms> {
    if x_out.dims() != x_truth.dims() {
        let (a, b) = (x_out.dims(), x_truth.dims());
        return Err(Error::shape("loss", &[a.0, a.1, a.2], &[b.0, b.1, b.2]));
    }
    let z = forward_project(x_out, mask, disp, &NoiseModel::None)?;
    if (z.height(), z.width()) != (y.height(), y.width()) {
        return Err(Error::shape("loss", &[z.height(), z.width()], &[y.height(), y.width()]));
    }
    let sq = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&p, &q)| {
                let d = p.as_f64() - q.as_f64();
                d * d
            })
            .sum()
    };
    let output = reduce(sq(x_out.data(), x_truth.data()), x_out.data().len(), lc.reduction);
    let reversible = reduce(sq(z.data(), y.data()), y.data().len(), lc.reduction);
    Ok(LossTerms { total: output + lc.xi * reversible, output, reversible })
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub output: Var,
    pub reversible: Var,
}

fn squared_error<T: Real>(g: &mut Graph<T>, a: Var, b: Var, r: Reduction) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(match r {
        Reduction::Mean => g.mean(sq),
        Reduction::Sum => g.sum(sq),
    })
}

/// Differentiable loss. `projection` is `𝒢(x_out)` already built on `g`.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    x_out: Var,
    x_truth: Var,
    projection: Var,
    y: Var,
    lc: &LossConfig,
) -> Result<LossVars> {
    let output = squared_error(g, x_out, x_truth, lc.reduction)?;
    let reversible = squared_error(g, projection, y, lc.reduction)?;
    let weighted = g.scale(reversible, lit(lc.xi));
    let total = g.add(output, weighted)?;
    Ok(LossVars { total, output, reversible })
}
