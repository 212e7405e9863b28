use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::*;
use super::*;
use crate::autodiff::OpKind;
use crate::io::{generate_mask, generate_scene, SceneKind, SyntheticSceneSpec};
use crate::optics::{forward_project, residual_input, DispersionConfig, NoiseModel};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn store_from(d: &Declarations, seed: u64) -> ParamStore<f64> {
    d.instantiate(seed).unwrap()
}

#[test]
fn unmix_shape_and_zero_input() {
    let mut d = Declarations::default();
    declare_unmix(&mut d, "u", 3);
    let s = store_from(&d, 1);
    let mut g = Graph::new();
    let p = s.bind_frozen(&mut g);
    let zero = g.constant(Tensor::zeros(&[3, 5, 6]));
    let out = unmix(&mut g, &p, "u", zero, zero).unwrap();
    assert_eq!(g.shape(out), &[3, 5, 6]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[3, 5, 5]));
    assert!(unmix(&mut g, &p, "u", zero, bad).is_err());
}

#[test]
fn unmix_is_the_documented_conv_composition() {
    let mut d = Declarations::default();
    declare_unmix(&mut d, "u", 2);
    let mut s = store_from(&d, 2);
    for (i, t) in s.tensors_mut().enumerate() {
        *t = t.map(|v| v + 0.01 * i as f64);
    }
    let mut g = Graph::new();
    let p = s.bind_frozen(&mut g);
    let x = g.constant(rand_t(&[2, 6, 5], 3));
    let m = g.constant(rand_t(&[2, 6, 5], 4).map(f64::abs));
    let got = unmix(&mut g, &p, "u", x, m).unwrap();

    let cat = g.concat(&[x, m], 0).unwrap();
    let conv_b = |g: &mut Graph<f64>, name: &str, x: Var| {
        let y = g.conv2d(x, p.get(&format!("{name}.w")).unwrap()).unwrap();
        let b = g.reshape(p.get(&format!("{name}.b")).unwrap(), &[2, 1, 1]).unwrap();
        let b = g.broadcast_to(b, &[2, 6, 5]).unwrap();
        g.add(y, b).unwrap()
    };
    let f = conv_b(&mut g, "u.fuse", cat);
    let a = conv_b(&mut g, "u.k3", f);
    let b = conv_b(&mut g, "u.k5", f);
    let c = conv_b(&mut g, "u.k7", f);
    let ab = g.add(a, b).unwrap();
    let want = g.add(ab, c).unwrap();
    assert_eq!(g.value(got), g.value(want));
}

#[test]
fn spectral_attention_with_zero_sigma_averages_each_head() {
    let (c, h, w, heads) = (4, 3, 2, 2);
    let mut g = Graph::new();
    let q = g.constant(rand_t(&[c, h, w], 5));
    let k = g.constant(rand_t(&[c, h, w], 6));
    let v = g.constant(rand_t(&[c, h, w], 7));
    let sigma = g.constant(Tensor::zeros(&[heads]));
    let out = spectral_attention_core(&mut g, q, k, v, sigma).unwrap();
    let vv = g.value(v).data().to_vec();
    let plane = h * w;
    let mut want = vec![0.0; c * plane];
    for ch in 0..c {
        let head = ch / 2;
        for px in 0..plane {
            want[ch * plane + px] = (vv[(2 * head) * plane + px] + vv[(2 * head + 1) * plane + px]) / 2.0;
        }
    }
    close(g.value(out).data(), &want, 1e-15);
}

#[test]
fn spectral_attention_single_token_passes_values_through() {
    let mut g = Graph::new();
    let q = g.constant(rand_t(&[1, 2, 2], 8));
    let k = g.constant(rand_t(&[1, 2, 2], 9));
    let v = g.constant(rand_t(&[1, 2, 2], 10));
    let sigma = g.constant(Tensor::full(&[1], 3.0));
    let out = spectral_attention_core(&mut g, q, k, v, sigma).unwrap();
    close(g.value(out).data(), g.value(v).data(), 1e-15);
}

#[test]
fn spectral_attention_hand_oracle() {
    // two channel tokens over a 2×2 grid, one head
    let q = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0]];
    let k = [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 2.0]];
    let v = [[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, 0.0]];
    let sigma = 2.0;
    // normalised: q0 = e0, q1 = (e1+e2)/√2, k0 = (e0+e1)/√2, k1 = e3
    let r2 = 2f64.sqrt();
    let logits = [[sigma / r2, 0.0], [sigma * 0.5, 0.0]];
    let mut want = vec![0.0; 8];
    for i in 0..2 {
        let e = [logits[i][0].exp(), logits[i][1].exp()];
        let z = e[0] + e[1];
        for px in 0..4 {
            want[i * 4 + px] = (e[0] * v[0][px] + e[1] * v[1][px]) / z;
        }
    }
    let flat = |a: [[f64; 4]; 2]| Tensor::new(vec![2, 2, 2], a.concat()).unwrap();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(flat(q)), g.constant(flat(k)), g.constant(flat(v)));
    let s = g.constant(Tensor::full(&[1], sigma));
    let out = spectral_attention_core(&mut g, qv, kv, vv, s).unwrap();
    close(g.value(out).data(), &want, 1e-12);
}

#[test]
fn spectral_attention_is_channel_permutation_equivariant() {
    let (c, h, w) = (5, 3, 3);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor<f64>| {
        let plane = h * w;
        Tensor::from_fn(&[c, h, w], |i| t.data()[perm[i / plane] * plane + i % plane])
    };
    let (q, k, v) = (rand_t(&[c, h, w], 11), rand_t(&[c, h, w], 12), rand_t(&[c, h, w], 13));
    let mut g = Graph::new();
    let sigma = g.constant(Tensor::full(&[1], 1.7));
    let (qa, ka, va) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let plain = spectral_attention_core(&mut g, qa, ka, va, sigma).unwrap();
    let (qb, kb, vb) = (g.constant(permute(&q)), g.constant(permute(&k)), g.constant(permute(&v)));
    let permuted = spectral_attention_core(&mut g, qb, kb, vb, sigma).unwrap();
    close(g.value(permuted).data(), permute(g.value(plain)).data(), 1e-12);
}

#[test]
fn spectral_block_with_single_channel_reduces_to_value_path() {
    // one channel, one head: attention is exactly 1, so msa = proj(v) + pos(v)
    let mut d = Declarations::default();
    declare_spectral_msa(&mut d, "m", 1, 1);
    let mut s = store_from(&d, 14);
    *s.get_mut("m.proj.w").unwrap() = Tensor::ones(&[1, 1, 1, 1]);
    *s.get_mut("m.pos.w").unwrap() = Tensor::zeros(&[1, 1, 3, 3]);
    let mut g = Graph::new();
    let p = s.bind_frozen(&mut g);
    let x = g.constant(rand_t(&[1, 4, 4], 15));
    let out = spectral_msa(&mut g, &p, "m", x).unwrap();
    let vw = s.get("m.v.w").unwrap().data()[0];
    let want: Vec<f64> = g.value(x).data().iter().map(|a| a * vw).collect();
    close(g.value(out).data(), &want, 1e-15);
}

#[test]
fn window_attention_with_zero_query_averages_each_window() {
    let (c, s) = (2, 2);
    let geom = WindowGeom::new(c, 1, s, 4, 4).unwrap();
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[c, 4, 4], 16));
    let zero = g.constant(Tensor::zeros(&[c, 4, 4]));
    let q = window_partition(&mut g, zero, &geom).unwrap();
    let k = window_partition(&mut g, x, &geom).unwrap();
    let v = window_partition(&mut g, x, &geom).unwrap();
    let bias = g.constant(Tensor::zeros(&[1, 4, 4]));
    let out = window_attention_core(&mut g, q, k, v, bias, None, &geom).unwrap();
    let out = window_merge(&mut g, out, &geom).unwrap();
    let xv = g.value(x).data().to_vec();
    for ch in 0..c {
        for r in 0..4 {
            for col in 0..4 {
                let (r0, c0) = (r / s * s, col / s * s);
                let mean = (0..s).flat_map(|a| (0..s).map(move |b| (a, b))).map(|(a, b)| xv[ch * 16 + (r0 + a) * 4 + c0 + b]).sum::<f64>()
                    / (s * s) as f64;
                assert!((g.value(out).data()[ch * 16 + r * 4 + col] - mean).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn window_attention_hand_oracle() {
    // one 2×2 window, one channel (d = 1), bias from the relative-offset table
    let geom = WindowGeom::new(1, 1, 2, 2, 2).unwrap();
    let qd = [0.5, -1.0, 2.0, 0.0];
    let kd = [1.0, 0.5, -0.5, 2.0];
    let vd = [1.0, 2.0, 3.0, 4.0];
    let table: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.3).collect();
    let mut want = [0.0; 4];
    for i in 0..4 {
        let (ri, ci) = (i / 2, i % 2);
        let logits: Vec<f64> = (0..4)
            .map(|j| {
                let (rj, cj) = (j / 2, j % 2);
                let b = table[(ri + 1 - rj) * 3 + (ci + 1 - cj)];
                qd[i] * kd[j] + b
            })
            .collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = e.iter().sum();
        want[i] = (0..4).map(|j| e[j] * vd[j]).sum::<f64>() / z;
    }
    let mut g = Graph::new();
    let t = |d: [f64; 4]| Tensor::new(vec![1, 2, 2], d.to_vec()).unwrap();
    let (q, k, v) = (g.constant(t(qd)), g.constant(t(kd)), g.constant(t(vd)));
    let q = window_partition(&mut g, q, &geom).unwrap();
    let k = window_partition(&mut g, k, &geom).unwrap();
    let v = window_partition(&mut g, v, &geom).unwrap();
    let tab = g.constant(Tensor::new(vec![1, 9], table).unwrap());
    let bias = g.gather(tab, &relative_position_index(1, 2), &[1, 4, 4]).unwrap();
    let out = window_attention_core(&mut g, q, k, v, bias, None, &geom).unwrap();
    close(g.value(out).data(), &want, 1e-14);
}

#[test]
fn relative_position_table_size_and_symmetry() {
    let s = 3;
    let idx = relative_position_index(2, s);
    assert_eq!(idx.len(), 2 * 81);
    assert!(idx[..81].iter().all(|&i| i < 25));
    assert!(idx[81..].iter().all(|&i| (25..50).contains(&i)));
    // the diagonal is the zero offset, the table centre
    for i in 0..9 {
        assert_eq!(idx[i * 9 + i], 12);
    }
}

#[test]
fn shifted_mask_separates_wrapped_regions() {
    let geom = WindowGeom::new(1, 1, 2, 4, 4).unwrap();
    assert_eq!(geom.shift(), 1);
    let m = shifted_window_mask::<f64>(&geom);
    assert_eq!(m.shape(), &[4, 4, 4]);
    // window (0,0) holds rows 0-1, cols 0-1: one region, no masking
    assert!(m.data()[..16].iter().all(|&v| v == 0.0));
    // window (1,1): rows 2-3 and cols 2-3 each split into {2} and {3}
    let last = &m.data()[48..];
    for i in 0..4 {
        for j in 0..4 {
            let expect = if i == j { 0.0 } else { -100.0 };
            assert_eq!(last[i * 4 + j], expect, "{i},{j}");
        }
    }
    // a single window per axis disables the shift
    assert_eq!(WindowGeom::new(1, 1, 8, 8, 8).unwrap().shift(), 0);
    assert_eq!(WindowGeom::new(1, 1, 8, 6, 5).unwrap().shift(), 0);
}

#[test]
fn attention_rows_are_distributions_in_both_blocks() {
    let mut d = Declarations::default();
    declare_spectral_ab(&mut d, "a", 4, 2, 2);
    declare_spatial_ab(&mut d, "b", 4, 2, 4, 2);
    let mut s = store_from(&d, 17);
    for t in s.tensors_mut() {
        *t = t.map(|v| v + 0.3);
    }
    let s = s.cast::<f32>();
    let mut g = Graph::<f32>::new();
    let p = s.bind_frozen(&mut g);
    let x = g.constant(Tensor::uniform(&[4, 8, 8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(18)));
    let y = spectral_ab(&mut g, &p, "a", x).unwrap();
    spatial_ab(&mut g, &p, "b", y, 2, 4).unwrap();
    let softmaxes = g.vars_of_kind(OpKind::Softmax);
    assert_eq!(softmaxes.len(), 3);
    for v in softmaxes {
        let len = *g.shape(v).last().unwrap();
        for row in g.value(v).data().chunks(len) {
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "{sum}");
        }
    }
}

#[test]
fn blocks_preserve_shape() {
    let mut d = Declarations::default();
    declare_spectral_ab(&mut d, "a", 4, 2, 2);
    declare_spatial_ab(&mut d, "b", 4, 2, 4, 2);
    declare_ffn(&mut d, "f", 4, 2);
    let s = store_from(&d, 19);
    for (h, w) in [(8, 8), (5, 7), (4, 12)] {
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(rand_t(&[4, h, w], 20));
        for out in [
            spectral_ab(&mut g, &p, "a", x).unwrap(),
            spatial_ab(&mut g, &p, "b", x, 2, 4).unwrap(),
            ffn(&mut g, &p, "f", x).unwrap(),
        ] {
            assert_eq!(g.shape(out), &[4, h, w]);
        }
    }
    let mut g = Graph::new();
    let p = s.bind_frozen(&mut g);
    let x = g.constant(rand_t(&[4, 4, 4], 21));
    assert!(spatial_ab(&mut g, &p, "b", x, 3, 4).is_err(), "heads must divide channels");
}

fn scene(cfg: &SstConfig, seed: u64) -> (SpectralCube<f64>, CodedMask<f64>, Measurement<f64>) {
    let x = generate_scene(&SyntheticSceneSpec::new(SceneKind::GaussianBlobs, cfg.height, cfg.width, cfg.channels, seed))
        .unwrap()
        .cast::<f64>();
    let mask = generate_mask(cfg.height, cfg.width, 0.5, seed + 100).unwrap().cast::<f64>();
    let y = forward_project(&x, &mask, &DispersionConfig::new(cfg.step), &NoiseModel::None).unwrap();
    (x, mask, y)
}

#[test]
fn zero_init_mapping_makes_a_stage_the_unmixing_estimate() {
    let cfg = SstConfig { zero_init_mapping: true, ..SstConfig::tiny(1) };
    let model = SstModel::new(cfg.clone()).unwrap();
    let baseline = SstModel::unmix_only(cfg.clone()).unwrap();
    let mut params = model.init_params::<f64>(3).unwrap();
    // arbitrary values everywhere except the mapping conv
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        if !n.starts_with("stage0.map.") {
            let shape = params.get(n).unwrap().shape().to_vec();
            *params.get_mut(n).unwrap() = Tensor::uniform(&shape, -0.5, 0.5, &mut rng);
        }
    }
    let mut base_params = ParamStore::new();
    for (n, _) in baseline.init_params::<f64>(0).unwrap().iter() {
        base_params.insert(n.to_string(), params.get(n).unwrap().clone()).unwrap();
    }
    let (_, mask, y) = scene(&cfg, 5);
    let (full, trace) = model.reconstruct(&params, &y, &mask).unwrap();
    let (x0, _) = baseline.reconstruct(&base_params, &y, &mask).unwrap();
    assert_eq!(full.data(), x0.data());
    assert_eq!(trace.outputs.len(), 1);
}

#[test]
fn stage_trace_has_one_entry_per_stage() {
    for n in [1, 2, 3] {
        let cfg = SstConfig::tiny(n);
        let model = SstModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f64>(n as u64).unwrap();
        let (_, mask, y) = scene(&cfg, 6);
        let (out, trace) = model.reconstruct(&params, &y, &mask).unwrap();
        assert_eq!(out.dims(), (8, 8, 4));
        assert_eq!(trace.outputs.len(), n);
        assert_eq!(trace.inputs.len(), n);
        assert_eq!(trace.projections.len(), n);
        assert_eq!(trace.residual_energy.len(), n);
        assert!(trace.residual_energy.iter().all(|e| e.is_finite()));
        assert_eq!(trace.inputs[0].data(), y.data(), "first stage consumes y");
        if n > 1 {
            let r = residual_input(&y, Some(&trace.projections[0])).unwrap();
            assert_eq!(trace.inputs[1].data(), r.data());
        }
    }
}

#[test]
fn residual_vanishes_when_the_estimate_is_the_truth() {
    let cfg = SstConfig::tiny(2);
    let (x, mask, y) = scene(&cfg, 7);
    let z = forward_project(&x, &mask, &DispersionConfig::new(cfg.step), &NoiseModel::None).unwrap();
    let r = residual_input(&y, Some(&z)).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stages_have_independent_weights() {
    let model = SstModel::new(SstConfig::tiny(2)).unwrap();
    let d = model.declarations();
    let s0 = d.specs().iter().filter(|s| s.name.starts_with("stage0.")).count();
    let s1 = d.specs().iter().filter(|s| s.name.starts_with("stage1.")).count();
    assert_eq!(s0, s1);
    assert_eq!(s0 + s1, d.specs().len());
}

#[test]
fn family_parameter_counts_increase() {
    let counts: Vec<usize> = [Family::Small, Family::Medium, Family::Large, Family::LargePlus]
        .into_iter()
        .map(|f| SstModel::new(SstConfig::family(f)).unwrap().param_count())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn mismatched_inputs_are_rejected() {
    let cfg = SstConfig::tiny(1);
    let model = SstModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(0).unwrap();
    let (_, mask, y) = scene(&cfg, 8);
    let wrong_mask = CodedMask::filled(8, 9, 1.0);
    assert!(model.reconstruct(&params, &y, &wrong_mask).is_err());
    let wrong_y = Measurement::zeros(8, 8);
    assert!(model.reconstruct(&params, &wrong_y, &mask).is_err());
    let other = SstModel::new(SstConfig::tiny(2)).unwrap();
    assert!(matches!(other.reconstruct(&params, &y, &mask), Err(Error::UnknownParameter(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_merge_is_bitwise_identity(heads in 1usize..3, dh in 1usize..3, s in 1usize..4, nh in 1usize..3, nw in 1usize..3, seed: u64) {
        let c = heads * dh;
        let geom = WindowGeom::new(c, heads, s, nh * s, nw * s).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f32>::uniform(&[c, nh * s, nw * s], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let p = window_partition(&mut g, x, &geom).unwrap();
        prop_assert_eq!(g.shape(p), &[nh * nw * heads, s * s, dh][..]);
        let m = window_merge(&mut g, p, &geom).unwrap();
        prop_assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn shift_unshift_is_bitwise_identity(s in 2usize..5, n in 2usize..4, seed: u64) {
        let geom = WindowGeom::new(2, 1, s, n * s, n * s).unwrap();
        let sh = geom.shift() as isize;
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f32>::uniform(&[2, n * s, n * s], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let r = g.roll(x, &[0, -sh, -sh]).unwrap();
        let back = g.roll(r, &[0, sh, sh]).unwrap();
        prop_assert_eq!(g.value(back), g.value(x));
    }
}
