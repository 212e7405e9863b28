use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind};
use crate::error::Result;
use crate::metrics::{gaussian_taps, psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::optics::{disperse, integrate, modulate, shift_back, CodedMask, DispersionConfig, Measurement, NoiseModel, SpectralCube};
use crate::tensor::Tensor;

use super::{CheckResult, Report, Subject};

const INSTANCES: usize = 20;

struct Acc {
    worst: f64,
    detail: String,
}

impl Acc {
    fn new() -> Self {
        Acc { worst: 0.0, detail: "exact".into() }
    }

    fn see(&mut self, err: f64, detail: impl FnOnce() -> String) {
        if !(err <= self.worst) {
            self.worst = err;
            self.detail = detail();
        }
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> SpectralCube<f64> {
    SpectralCube::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CodedMask<f64> {
    CodedMask::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).expect("values in [0, 1]")
}

/// Sensing operator against index-by-index loops.
fn optics_checks(rng: &mut ChaCha8Rng, out: &mut Vec<(String, Subject, Acc, f64)>) -> Result<()> {
    let mut accs: Vec<Acc> = (0..5).map(|_| Acc::new()).collect();
    for inst in 0..INSTANCES {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let d = rng.random_range(0..=2);
        let cfg = DispersionConfig::new(d);
        let x = random_cube(rng, h, w, c);
        let mask = random_mask(rng, h, w);
        let tag = || format!("instance {inst}: {h}x{w}x{c}, d={d}");

        let xm = modulate(&x, &mask)?;
        let mut oracle = vec![0.0; h * w * c];
        for m in 0..c {
            for i in 0..h {
                for j in 0..w {
                    oracle[(m * h + i) * w + j] = x.at(i, j, m) * mask.at(i, j);
                }
            }
        }
        accs[0].see(max_abs(xm.data(), &oracle), tag);

        let wide = w + d * (c - 1);
        let disp = disperse(&xm, &cfg);
        let mut oracle = vec![0.0; h * wide * c];
        for m in 0..c {
            for i in 0..h {
                for j in 0..w {
                    oracle[(m * h + i) * wide + j + d * m] = xm.at(i, j, m);
                }
            }
        }
        accs[1].see(max_abs(&disp.data, &oracle), tag);

        let y = integrate(&disp, &NoiseModel::None);
        let mut oracle = vec![0.0; h * wide];
        for i in 0..h {
            for col in 0..wide {
                for m in 0..c {
                    if col >= d * m && col - d * m < w {
                        oracle[i * wide + col] += xm.at(i, col - d * m, m);
                    }
                }
            }
        }
        accs[2].see(max_abs(y.data(), &oracle), tag);

        let r = Measurement::new(h, wide, (0..h * wide).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let sb = shift_back(&r, c, &cfg)?;
        let mut oracle = vec![0.0; h * w * c];
        for m in 0..c {
            for i in 0..h {
                for j in 0..w {
                    oracle[(m * h + i) * w + j] = r.at(i, j + d * m);
                }
            }
        }
        accs[3].see(max_abs(sb.data(), &oracle), tag);

        // <D x, r> == <x, Dᵀ r> for the shear-and-sum and the shift-back
        let lhs: f64 = integrate(&disperse(&x, &cfg), &NoiseModel::None).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(sb.data()).map(|(a, b)| a * b).sum();
        accs[4].see((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0), tag);
    }
    let names = ["modulate", "disperse", "integrate", "shift_back", "shift_back_adjoint"];
    for (n, a) in names.iter().zip(accs) {
        out.push((n.to_string(), Subject::Oracle, a, 1e-12));
    }
    Ok(())
}

fn conv_oracle(x: &[f64], k: &[f64], c_in: usize, h: usize, w: usize, c_out: usize, kk: usize, stride: usize, pad: usize, groups: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let (gi, go) = (c_in / groups, c_out / groups);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let grp = co / go;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..gi {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[((grp * gi + ci) * h + iy as usize) * w + ix as usize];
                            s += xv * k[((co * gi + ci) * kk + ky) * kk + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

fn kernel_checks(rng: &mut ChaCha8Rng, out: &mut Vec<(String, Subject, Acc, f64)>) -> Result<()> {
    let mut conv = Acc::new();
    let mut conv_t = Acc::new();
    let mut mm = Acc::new();
    let mut ln = Acc::new();
    let mut sm = Acc::new();
    for inst in 0..INSTANCES {
        // (c_in, c_out, k, stride, pad, groups)
        let geoms = [(2, 3, 3, 1, 1, 1), (4, 4, 3, 1, 1, 4), (2, 3, 4, 2, 1, 1), (4, 6, 5, 1, 2, 2), (3, 2, 1, 1, 0, 1)];
        let (c_in, c_out, kk, stride, pad, groups) = geoms[inst % geoms.len()];
        let (h, w) = (rng.random_range(kk.max(2)..=7), rng.random_range(kk.max(2)..=7));
        let x = Tensor::<f64>::uniform(&[c_in, h, w], -1.0, 1.0, rng);
        let k = Tensor::<f64>::uniform(&[c_out, c_in / groups, kk, kk], -1.0, 1.0, rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d_general(xv, kv, stride, pad, groups)?;
        let (oracle, oh, ow) = conv_oracle(x.data(), k.data(), c_in, h, w, c_out, kk, stride, pad, groups);
        let err = if g.shape(y) == [c_out, oh, ow] { max_abs(g.value(y).data(), &oracle) } else { f64::INFINITY };
        conv.see(err, || format!("instance {inst}: k={kk} stride={stride} groups={groups}"));

        let (ci, co, kt, st) = (rng.random_range(1..=3), rng.random_range(1..=3), 2, 2);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = Tensor::<f64>::uniform(&[ci, h, w], -1.0, 1.0, rng);
        let k = Tensor::<f64>::uniform(&[ci, co, kt, kt], -1.0, 1.0, rng);
        let (oh, ow) = ((h - 1) * st + kt, (w - 1) * st + kt);
        let mut oracle = vec![0.0; co * oh * ow];
        for a in 0..ci {
            for b in 0..co {
                for i in 0..h {
                    for j in 0..w {
                        for ky in 0..kt {
                            for kx in 0..kt {
                                oracle[(b * oh + i * st + ky) * ow + j * st + kx] +=
                                    x.data()[(a * h + i) * w + j] * k.data()[((a * co + b) * kt + ky) * kt + kx];
                            }
                        }
                    }
                }
            }
        }
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(k));
        let y = g.conv_transpose2d(xv, kv, st)?;
        conv_t.see(max_abs(g.value(y).data(), &oracle), || format!("instance {inst}"));

        let (n, kd, m) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
        let a = Tensor::<f64>::uniform(&[n, kd], -1.0, 1.0, rng);
        let b = Tensor::<f64>::uniform(&[kd, m], -1.0, 1.0, rng);
        let mut oracle = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for l in 0..kd {
                    oracle[i * m + j] += a.data()[i * kd + l] * b.data()[l * m + j];
                }
            }
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let y = g.matmul(av, bv)?;
        mm.see(max_abs(g.value(y).data(), &oracle), || format!("instance {inst}: {n}x{kd}x{m}"));

        let (c, hw) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = Tensor::<f64>::uniform(&[c, hw], -2.0, 2.0, rng);
        let gain = Tensor::<f64>::uniform(&[c], 0.5, 1.5, rng);
        let bias = Tensor::<f64>::uniform(&[c], -0.5, 0.5, rng);
        let mut oracle = vec![0.0; c * hw];
        for p in 0..hw {
            let col: Vec<f64> = (0..c).map(|i| x.data()[i * hw + p]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            for i in 0..c {
                oracle[i * hw + p] = (col[i] - mean) / (var + 1e-5).sqrt() * gain.data()[i] + bias.data()[i];
            }
        }
        let mut g = Graph::new();
        let (xv, gv, bv) = (g.constant(x), g.constant(gain), g.constant(bias));
        let y = g.layernorm(xv, 0, gv, bv)?;
        ln.see(max_abs(g.value(y).data(), &oracle), || format!("instance {inst}: {c}x{hw}"));

        // rows sum to one in single precision
        let (rows, len) = (rng.random_range(1..=6), rng.random_range(1..=40));
        let x = Tensor::<f32>::uniform(&[rows, len], -30.0, 30.0, rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv, 1)?;
        let vals = g.value(y).data();
        for r in 0..rows {
            let row = &vals[r * len..(r + 1) * len];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let mut err = (sum - 1.0).abs();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                err = f64::INFINITY;
            }
            sm.see(err, || format!("instance {inst}, row {r} of length {len}"));
        }
    }
    out.push((OpKind::Conv2d.name().into(), Subject::Primitive(OpKind::Conv2d), conv, 1e-12));
    out.push((OpKind::ConvTranspose2d.name().into(), Subject::Primitive(OpKind::ConvTranspose2d), conv_t, 1e-12));
    out.push((OpKind::MatMul.name().into(), Subject::Primitive(OpKind::MatMul), mm, 1e-12));
    out.push((OpKind::LayerNorm.name().into(), Subject::Primitive(OpKind::LayerNorm), ln, 1e-12));
    out.push(("softmax_row_sum_f32".into(), Subject::Primitive(OpKind::Softmax), sm, 1e-6));
    Ok(())
}

/// Windowed SSIM evaluated window by window with a 2-D Gaussian.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, l: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
    let n = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let wt = taps[u] * taps[v];
                    let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn metric_checks(rng: &mut ChaCha8Rng, out: &mut Vec<(String, Subject, Acc, f64)>) -> Result<()> {
    let mut closed = Acc::new();
    let n = 64;
    let zero_db = psnr(&vec![1.0f64; n], &vec![0.0f64; n], 1.0)?;
    closed.see((zero_db - 0.0).abs(), || format!("peak 1, mse 1 gave {zero_db}"));
    let truth: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let shifted: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
    let twenty = psnr(&truth, &shifted, 1.0)?;
    closed.see((twenty - 20.0).abs(), || format!("uniform error 0.1 gave {twenty}"));
    let inf = psnr(&truth, &truth, 1.0)?;
    closed.see(if inf == f64::INFINITY { 0.0 } else { f64::INFINITY }, || format!("identical inputs gave {inf}"));
    out.push(("psnr_closed_form".into(), Subject::Oracle, closed, 1e-9));

    let mut ident = Acc::new();
    let mut vs = Acc::new();
    for inst in 0..INSTANCES {
        let (h, w) = (rng.random_range(11..=18), rng.random_range(11..=18));
        let a: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
        let s = ssim(&a, &a, h, w, 1.0)?;
        ident.see((s - 1.0).abs(), || format!("instance {inst}: {s}"));
        let got = ssim(&a, &b, h, w, 1.0)?;
        let want = ssim_oracle(&a, &b, h, w, 1.0);
        vs.see((got - want).abs() / want.abs().max(1e-12), || format!("instance {inst}: {h}x{w}"));
    }
    out.push(("ssim_identical".into(), Subject::Oracle, ident, 0.0));
    out.push(("ssim_window_oracle".into(), Subject::Oracle, vs, 1e-6));
    Ok(())
}

/// Scalar-loop oracles for the sensing operator, the dense kernels and the
/// metrics. `tol` replaces every default tolerance when set.
pub fn oracle_suite(seed: u64, tol: Option<f64>) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    optics_checks(&mut rng, &mut rows)?;
    kernel_checks(&mut rng, &mut rows)?;
    metric_checks(&mut rng, &mut rows)?;
    Ok(Report {
        results: rows
            .into_iter()
            .map(|(name, subject, acc, default)| CheckResult {
                name,
                subject,
                precision: "f64",
                worst: acc.worst,
                detail: acc.detail,
                tol: tol.unwrap_or(default),
            })
            .collect(),
    })
}
