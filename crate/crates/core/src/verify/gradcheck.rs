use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::Result;
use crate::io::{generate_mask, generate_scene, SceneKind, SyntheticSceneSpec};
use crate::model::{blocks, BoundParams, Declarations, ParamStore, SceneVars, SstConfig, SstModel};
use crate::optics::{forward_project, DispersionConfig, NoiseModel};
use crate::tensor::{lit, Real, Tensor};
use crate::train::{loss_graph, LossConfig};

use super::{CheckResult, Report, Subject};

type Build<T> = Box<dyn Fn(&mut Graph<T>, &BoundParams<'_, T>) -> Result<Var> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per primitive.
    pub primitive_seeds: usize,
    pub precisions: Vec<Precision>,
    /// Replaces every default tolerance when set.
    pub tol: Option<f64>,
    pub blocks: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            primitive_seeds: 20,
            precisions: vec![Precision::F64, Precision::F32],
            tol: None,
            blocks: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdOutcome {
    /// Largest per-tensor `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked entries.
    pub worst: f64,
    pub tensor: String,
    pub entries: usize,
}

/// Compares the reverse-mode gradient of `Σ w ⊙ build(inputs)` for a random
/// `w` against central differences, perturbing up to `max_entries` entries of
/// every input tensor with step `ε^{1/3}·max(1, |x|)`.
pub fn finite_difference_check<T: Real, F>(inputs: &ParamStore<T>, build: F, seed: u64, max_entries: usize) -> Result<FdOutcome>
where
    F: Fn(&mut Graph<T>, &BoundParams<'_, T>) -> Result<Var>,
{
    fd_core(inputs, &build, &build, seed, max_entries)
}

/// Reverse-mode gradient in `T`, central differences evaluated by
/// `reference` in `U` at the same point (`inputs` cast to `U`).
fn fd_core<T: Real, U: Real>(
    inputs: &ParamStore<T>,
    build: &dyn Fn(&mut Graph<T>, &BoundParams<'_, T>) -> Result<Var>,
    reference: &dyn Fn(&mut Graph<U>, &BoundParams<'_, U>) -> Result<Var>,
    seed: u64,
    max_entries: usize,
) -> Result<FdOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let p = inputs.bind(&mut g);
    let out = build(&mut g, &p)?;
    let shape = g.shape(out).to_vec();
    let w = if shape.iter().product::<usize>() == 1 {
        Tensor::<T>::ones(&shape)
    } else {
        Tensor::<T>::uniform(&shape, -1.0, 1.0, &mut rng)
    };
    g.backward_with(out, &w)?;
    let analytic = p.grads(&g);
    drop(g);

    let objective = |store: &ParamStore<U>| -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let out = reference(&mut g, &p)?;
        Ok(g.value(out).data().iter().zip(w.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    };
    let step = U::epsilon().as_f64().cbrt();
    let base = inputs.cast::<U>();
    let mut work = base.clone();
    let mut outcome = FdOutcome { worst: 0.0, tensor: String::new(), entries: 0 };
    for (i, (name, t)) in base.iter().enumerate() {
        let n = t.len();
        let mut idx: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_entries).into_vec()
        };
        idx.sort_unstable();
        let (mut da, mut sa, mut sn) = (0.0, 0.0, 0.0);
        for &j in &idx {
            let x = t.data()[j];
            let h: U = lit(step * x.as_f64().abs().max(1.0));
            let (xp, xm) = (x + h, x - h);
            let slot = |s: &mut ParamStore<U>, v: U| s.get_mut(name).expect("name from the same store").data_mut()[j] = v;
            slot(&mut work, xp);
            let fp = objective(&work)?;
            slot(&mut work, xm);
            let fm = objective(&work)?;
            slot(&mut work, x);
            let num = (fp - fm) / (xp.as_f64() - xm.as_f64());
            let a = analytic[i].data()[j].as_f64();
            da += (a - num) * (a - num);
            sa += a * a;
            sn += num * num;
        }
        let denom = sa.sqrt().max(sn.sqrt()).max(f64::MIN_POSITIVE);
        let rel = if sa == 0.0 && sn == 0.0 { 0.0 } else { da.sqrt() / denom };
        outcome.entries += idx.len();
        if !(rel <= outcome.worst) {
            outcome.worst = rel;
            outcome.tensor = name.to_string();
        }
    }
    Ok(outcome)
}

pub struct PrimitiveCase<T> {
    pub name: &'static str,
    pub kind: OpKind,
    pub inputs: ParamStore<T>,
    pub build: Build<T>,
}

fn store<T: Real>(entries: Vec<(&str, Tensor<T>)>) -> ParamStore<T> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n.to_string(), t).expect("unique case input names");
    }
    s
}

fn case<T: Real>(
    name: &'static str,
    kind: OpKind,
    inputs: Vec<(&str, Tensor<T>)>,
    build: impl Fn(&mut Graph<T>, &BoundParams<'_, T>) -> Result<Var> + Send + Sync + 'static,
) -> PrimitiveCase<T> {
    PrimitiveCase { name, kind, inputs: store(inputs), build: Box::new(build) }
}

/// One random instance of every primitive, each graph containing exactly one
/// non-leaf operation.
pub fn primitive_cases<T: Real>(rng: &mut ChaCha8Rng) -> Vec<PrimitiveCase<T>> {
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::<T>::uniform(shape, lo, hi, rng);
    let away_from_zero = |t: Tensor<T>| t.map(|v| if v < T::zero() { v - lit(0.5) } else { v + lit(0.5) });
    let gather_index: Vec<usize> = (0..10).map(|i| (i * 7 + 3) % 6).collect();
    vec![
        case("add", OpKind::Add, vec![("a", u(&[3, 3], -1.0, 1.0)), ("b", u(&[3, 3], -1.0, 1.0))], |g, p| g.add(p.get("a")?, p.get("b")?)),
        case("sub", OpKind::Sub, vec![("a", u(&[3, 3], -1.0, 1.0)), ("b", u(&[3, 3], -1.0, 1.0))], |g, p| g.sub(p.get("a")?, p.get("b")?)),
        case("mul", OpKind::Mul, vec![("a", u(&[3, 3], -1.0, 1.0)), ("b", u(&[3, 3], -1.0, 1.0))], |g, p| g.mul(p.get("a")?, p.get("b")?)),
        case("mul_self", OpKind::Mul, vec![("a", u(&[2, 3], -1.0, 1.0))], |g, p| g.mul(p.get("a")?, p.get("a")?)),
        case("div", OpKind::Div, vec![("a", u(&[3, 3], -1.0, 1.0)), ("b", away_from_zero(u(&[3, 3], -1.5, 1.5)))], |g, p| {
            g.div(p.get("a")?, p.get("b")?)
        }),
        case("scale", OpKind::Scale, vec![("x", u(&[2, 4], -1.0, 1.0))], |g, p| Ok(g.scale(p.get("x")?, lit(-1.7)))),
        case("add_scalar", OpKind::AddScalar, vec![("x", u(&[2, 4], -1.0, 1.0))], |g, p| Ok(g.add_scalar(p.get("x")?, lit(0.3)))),
        case("sqrt", OpKind::Sqrt, vec![("x", u(&[2, 4], 0.5, 2.0))], |g, p| g.sqrt(p.get("x")?)),
        case("gelu", OpKind::Gelu, vec![("x", u(&[3, 4], -3.0, 3.0))], |g, p| Ok(g.gelu(p.get("x")?))),
        case("matmul", OpKind::MatMul, vec![("a", u(&[4, 5], -1.0, 1.0)), ("b", u(&[5, 3], -1.0, 1.0))], |g, p| {
            g.matmul(p.get("a")?, p.get("b")?)
        }),
        case(
            "batch_matmul",
            OpKind::BatchMatMul,
            vec![("a", u(&[2, 3, 4], -1.0, 1.0)), ("b", u(&[2, 4, 5], -1.0, 1.0))],
            |g, p| g.batch_matmul(p.get("a")?, p.get("b")?),
        ),
        case("softmax_rows", OpKind::Softmax, vec![("x", u(&[2, 4], -2.0, 2.0))], |g, p| g.softmax(p.get("x")?, 1)),
        case("softmax_mid_axis", OpKind::Softmax, vec![("x", u(&[3, 4, 5], -2.0, 2.0))], |g, p| g.softmax(p.get("x")?, 1)),
        case("conv2d", OpKind::Conv2d, vec![("x", u(&[2, 5, 5], -1.0, 1.0)), ("k", u(&[3, 2, 3, 3], -1.0, 1.0))], |g, p| {
            g.conv2d(p.get("x")?, p.get("k")?)
        }),
        case(
            "conv2d_depthwise",
            OpKind::Conv2d,
            vec![("x", u(&[3, 5, 5], -1.0, 1.0)), ("k", u(&[3, 1, 3, 3], -1.0, 1.0))],
            |g, p| g.depthwise_conv2d(p.get("x")?, p.get("k")?),
        ),
        case(
            "conv2d_strided",
            OpKind::Conv2d,
            vec![("x", u(&[2, 6, 6], -1.0, 1.0)), ("k", u(&[3, 2, 4, 4], -1.0, 1.0))],
            |g, p| g.conv2d_general(p.get("x")?, p.get("k")?, 2, 1, 1),
        ),
        case(
            "conv2d_grouped",
            OpKind::Conv2d,
            vec![("x", u(&[4, 5, 5], -1.0, 1.0)), ("k", u(&[4, 2, 3, 3], -1.0, 1.0))],
            |g, p| g.conv2d_general(p.get("x")?, p.get("k")?, 1, 1, 2),
        ),
        case(
            "conv_transpose2d",
            OpKind::ConvTranspose2d,
            vec![("x", u(&[3, 3, 3], -1.0, 1.0)), ("k", u(&[3, 2, 2, 2], -1.0, 1.0))],
            |g, p| g.conv_transpose2d(p.get("x")?, p.get("k")?, 2),
        ),
        case(
            "layernorm",
            OpKind::LayerNorm,
            vec![("x", u(&[4, 3, 3], -2.0, 2.0)), ("g", u(&[4], 0.5, 1.5)), ("b", u(&[4], -0.5, 0.5))],
            |g, p| g.layernorm(p.get("x")?, 0, p.get("g")?, p.get("b")?),
        ),
        case(
            "layernorm_last_axis",
            OpKind::LayerNorm,
            vec![("x", u(&[3, 5], -2.0, 2.0)), ("g", u(&[5], 0.5, 1.5)), ("b", u(&[5], -0.5, 0.5))],
            |g, p| g.layernorm(p.get("x")?, 1, p.get("g")?, p.get("b")?),
        ),
        case("reshape", OpKind::Reshape, vec![("x", u(&[2, 6], -1.0, 1.0))], |g, p| g.reshape(p.get("x")?, &[3, 4])),
        case("permute", OpKind::Permute, vec![("x", u(&[2, 3, 4], -1.0, 1.0))], |g, p| g.permute(p.get("x")?, &[2, 0, 1])),
        case("slice", OpKind::Slice, vec![("x", u(&[3, 4, 5], -1.0, 1.0))], |g, p| g.slice(p.get("x")?, &[1, 0, 2], &[2, 3, 2])),
        case("pad", OpKind::Pad, vec![("x", u(&[2, 3, 3], -1.0, 1.0))], |g, p| g.pad(p.get("x")?, &[(0, 1), (2, 0), (1, 1)])),
        case(
            "concat",
            OpKind::Concat,
            vec![("a", u(&[2, 3, 2], -1.0, 1.0)), ("b", u(&[2, 1, 2], -1.0, 1.0))],
            |g, p| g.concat(&[p.get("a")?, p.get("b")?], 1),
        ),
        case("roll", OpKind::Roll, vec![("x", u(&[2, 4, 5], -1.0, 1.0))], |g, p| g.roll(p.get("x")?, &[1, -2, 3])),
        case("broadcast_to", OpKind::BroadcastTo, vec![("x", u(&[3, 1, 4], -1.0, 1.0))], |g, p| {
            g.broadcast_to(p.get("x")?, &[2, 3, 5, 4])
        }),
        case("sum_axis", OpKind::SumAxis, vec![("x", u(&[3, 4, 5], -1.0, 1.0))], |g, p| g.sum_axis(p.get("x")?, 1)),
        case("sum", OpKind::SumAll, vec![("x", u(&[3, 4], -1.0, 1.0))], |g, p| Ok(g.sum(p.get("x")?))),
        case("gather", OpKind::Gather, vec![("x", u(&[6], -1.0, 1.0))], move |g, p| g.gather(p.get("x")?, &gather_index, &[2, 5])),
        case("disperse_integrate", OpKind::DisperseIntegrate, vec![("x", u(&[3, 4, 5], -1.0, 1.0))], |g, p| {
            g.disperse_integrate(p.get("x")?, 2)
        }),
        case("shift_back", OpKind::ShiftBack, vec![("y", u(&[4, 9], -1.0, 1.0))], |g, p| g.shift_back(p.get("y")?, 3, 2)),
    ]
}

/// Random block parameters: declared initialisation plus a perturbation so
/// that zero-initialised tensors carry generic values.
fn perturbed<T: Real>(d: &Declarations, seed: u64) -> Result<ParamStore<T>> {
    let mut s = d.instantiate::<T>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in s.tensors_mut() {
        for v in t.data_mut() {
            *v += lit(rng.random_range(-0.1..0.1));
        }
    }
    Ok(s)
}

struct BlockCase<T> {
    name: &'static str,
    inputs: ParamStore<T>,
    build: Build<T>,
    max_entries: usize,
}

fn with_input<T: Real>(mut s: ParamStore<T>, name: &str, t: Tensor<T>) -> ParamStore<T> {
    s.insert(name.to_string(), t).expect("input name does not collide with block parameters");
    s
}

fn block_cases<T: Real>(seed: u64) -> Result<Vec<BlockCase<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::<T>::uniform(shape, -1.0, 1.0, &mut rng);
    let mut out = Vec::new();

    let mut d = Declarations::default();
    blocks::declare_ffn(&mut d, "b", 4, 2);
    out.push(BlockCase {
        name: "ffn",
        inputs: with_input(perturbed(&d, seed)?, "x", u(&[4, 6, 6])),
        build: Box::new(|g, p| blocks::ffn(g, p, "b", p.get("x")?)),
        max_entries: 12,
    });

    let mut d = Declarations::default();
    blocks::declare_unmix(&mut d, "b", 4);
    let inputs = with_input(perturbed(&d, seed)?, "x", u(&[4, 6, 6]));
    let mask = Tensor::<T>::uniform(&[4, 6, 6], 0.0, 1.0, &mut rng);
    out.push(BlockCase {
        name: "unmix",
        inputs: with_input(inputs, "mask", mask),
        build: Box::new(|g, p| blocks::unmix(g, p, "b", p.get("x")?, p.get("mask")?)),
        max_entries: 12,
    });

    let mut d = Declarations::default();
    blocks::declare_spectral_ab(&mut d, "b", 4, 2, 2);
    out.push(BlockCase {
        name: "spectral_ab",
        inputs: with_input(perturbed(&d, seed)?, "x", Tensor::uniform(&[4, 6, 6], -1.0, 1.0, &mut rng)),
        build: Box::new(|g, p| blocks::spectral_ab(g, p, "b", p.get("x")?)),
        max_entries: 12,
    });

    for (name, hw) in [("spatial_ab", 8), ("spatial_ab_padded", 6)] {
        let mut d = Declarations::default();
        blocks::declare_spatial_ab(&mut d, "b", 4, 2, 4, 2);
        out.push(BlockCase {
            name,
            inputs: with_input(perturbed(&d, seed)?, "x", Tensor::uniform(&[4, hw, hw], -1.0, 1.0, &mut rng)),
            build: Box::new(|g, p| blocks::spatial_ab(g, p, "b", p.get("x")?, 2, 4)),
            max_entries: 12,
        });
    }

    for (name, cfg) in [
        ("loss_two_stages", SstConfig::tiny(2)),
        ("loss_inner_reversible", SstConfig { inner_reversible: true, ..SstConfig::tiny(1) }),
    ] {
        out.push(model_loss_case(name, cfg, seed)?);
    }
    Ok(out)
}

/// Training loss of a full model with every parameter as a check input.
fn model_loss_case<T: Real>(name: &'static str, cfg: SstConfig, seed: u64) -> Result<BlockCase<T>> {
    let model = SstModel::new(cfg.clone())?;
    let inputs = perturbed::<T>(&model.declarations(), seed)?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let truth = generate_scene(&SyntheticSceneSpec::new(SceneKind::GaussianBlobs, h, w, c, seed))?.cast::<T>();
    let mask = generate_mask(h, w, 0.5, seed)?.cast::<T>();
    let y = forward_project(&truth, &mask, &DispersionConfig::new(cfg.step), &NoiseModel::None)?;
    let lc = LossConfig::default();
    let build = move |g: &mut Graph<T>, p: &BoundParams<'_, T>| -> Result<Var> {
        let scene: SceneVars = model.scene_vars(g, &y, &mask)?;
        let out = model.forward(g, p, scene)?;
        let proj = model.project(g, out.output, scene.mask)?;
        let xt = g.constant(truth.to_tensor());
        Ok(loss_graph(g, out.output, xt, proj, scene.y, &lc)?.total)
    };
    Ok(BlockCase { name, inputs, build: Box::new(build), max_entries: 3 })
}

fn default_tol(p: Precision, subject: Subject) -> f64 {
    match (p, subject) {
        (Precision::F32, _) => 1e-3,
        (Precision::F64, Subject::Primitive(OpKind::LayerNorm)) => 1e-5,
        (Precision::F64, Subject::Primitive(_)) => 1e-6,
        (Precision::F64, _) => 1e-4,
    }
}

/// Gradients are computed in `T`; the differences always in f64 so that
/// single-precision checks measure the gradient rather than forward rounding.
fn run_precision<T: Real>(opts: &GradcheckOptions, p: Precision) -> Result<Report> {
    let mut report = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows: Vec<CheckResult> = Vec::new();
    for s in 0..opts.primitive_seeds.max(1) {
        let fd_seed = rng.random::<u64>();
        let mut twin = rng.clone();
        let cases = primitive_cases::<T>(&mut rng);
        let references = primitive_cases::<f64>(&mut twin);
        for (i, (c, r)) in cases.into_iter().zip(references).enumerate() {
            let subject = Subject::Primitive(c.kind);
            let o = fd_core(&c.inputs, &c.build, &r.build, fd_seed, usize::MAX)?;
            if s == 0 {
                rows.push(CheckResult {
                    name: c.name.to_string(),
                    subject,
                    precision: p.name(),
                    worst: 0.0,
                    detail: String::new(),
                    tol: opts.tol.unwrap_or_else(|| default_tol(p, subject)),
                });
            }
            let row = &mut rows[i];
            if !(o.worst <= row.worst) {
                row.worst = o.worst;
                row.detail = format!("input {} at instance {s}", o.tensor);
            }
        }
    }
    report.results.extend(rows);
    if opts.blocks {
        let references = block_cases::<f64>(opts.seed)?;
        for (c, r) in block_cases::<T>(opts.seed)?.into_iter().zip(references) {
            let o = fd_core(&c.inputs, &c.build, &r.build, opts.seed, c.max_entries)?;
            report.results.push(CheckResult {
                name: c.name.to_string(),
                subject: Subject::Block,
                precision: p.name(),
                worst: o.worst,
                detail: format!("{} entries, worst at {}", o.entries, o.tensor),
                tol: opts.tol.unwrap_or_else(|| default_tol(p, Subject::Block)),
            });
        }
    }
    Ok(report)
}

/// Finite-difference checks of every primitive (over several random
/// instances) and of every model block, in the requested precisions.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Result<Report> {
    let mut report = Report::default();
    for &p in &opts.precisions {
        report.extend(match p {
            Precision::F64 => run_precision::<f64>(opts, p)?,
            Precision::F32 => run_precision::<f32>(opts, p)?,
        });
    }
    Ok(report)
}
