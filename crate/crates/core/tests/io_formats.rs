use proptest::prelude::*;
use sst_core::io::*;
use sst_core::model::ParamStore;
use sst_core::{CodedMask, Error, Measurement, SpectralCube, Tensor};

/// Pooled Pearson correlation between adjacent channels.
fn lag1_autocorrelation(cube: &SpectralCube<f32>) -> f64 {
    let (h, w, c) = cube.dims();
    let mut pairs = Vec::new();
    for m in 0..c - 1 {
        for x in 0..h {
            for y in 0..w {
                pairs.push((cube.at(x, y, m) as f64, cube.at(x, y, m + 1) as f64));
            }
        }
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn hsc_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.hsc");
    let cube = generate_scene(&SyntheticSceneSpec::new(SceneKind::GaussianBlobs, 9, 11, 5, 4)).unwrap();
    write_hsc(&cube, &path).unwrap();
    let back = read_hsc(&path).unwrap();
    assert_eq!(back.dims(), (9, 11, 5));
    assert_eq!(bits(back.data()), bits(cube.data()));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "temporary file left behind: {leftovers:?}");
}

#[test]
fn two_by_two_cube_is_36_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hsc");
    write_hsc(&SpectralCube::new(2, 2, 1, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(), &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 36);
    assert_eq!(HSC_HEADER_LEN, 20);
}

#[test]
fn payload_order_is_channel_major() {
    let cube = SpectralCube::from_fn(2, 3, 2, |x, y, m| (100 * m + 10 * x + y) as f32);
    let (_, data) = decode_hsc(&encode_hsc(HscHeader { h: 2, w: 3, c: 2 }, cube.data()), "x".as_ref()).unwrap();
    for m in 0..2 {
        for x in 0..2 {
            for y in 0..3 {
                assert_eq!(data[(m * 2 + x) * 3 + y], (100 * m + 10 * x + y) as f32);
            }
        }
    }
}

#[test]
fn corrupted_files_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.hsc");
    let bytes = encode_hsc(HscHeader { h: 3, w: 3, c: 2 }, &[0.5f32; 18]);
    for cut in [0, 3, 10, 19, 20, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = read_hsc(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
    }
    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"HSCW");
    std::fs::write(&path, &wrong).unwrap();
    assert!(read_hsc(&path).unwrap_err().to_string().contains("bad magic"));
    assert!(matches!(read_hsc(&dir.path().join("missing.hsc")), Err(Error::Io { .. })));
}

#[test]
fn measurement_and_mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let y = Measurement::new(3, 5, (0..15).map(|i| i as f32 * 0.37).collect()).unwrap();
    write_measurement(&y, &dir.path().join("y.hsc")).unwrap();
    assert_eq!(bits(read_measurement(&dir.path().join("y.hsc")).unwrap().data()), bits(y.data()));
    let m = generate_mask(4, 6, 0.5, 9).unwrap();
    write_mask(&m, &dir.path().join("m.hsc")).unwrap();
    assert_eq!(read_mask(&dir.path().join("m.hsc")).unwrap().data(), m.data());
    // a multi-channel file is not a measurement
    write_hsc(&SpectralCube::<f32>::zeros(3, 5, 2), &dir.path().join("c.hsc")).unwrap();
    assert!(read_measurement(&dir.path().join("c.hsc")).is_err());
}

#[test]
fn weights_round_trip_preserves_order_and_bits() {
    let mut store = ParamStore::<f32>::new();
    store.insert("b.second".into(), Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0]).unwrap()).unwrap();
    store.insert("a.first".into(), Tensor::scalar(7.25)).unwrap();
    store.insert("c".into(), Tensor::zeros(&[0])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.hscw");
    write_hscw(&store, &path).unwrap();
    let back = read_hscw(&path).unwrap();
    let a: Vec<_> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), bits(t.data()))).collect();
    let b: Vec<_> = back.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), bits(t.data()))).collect();
    assert_eq!(a, b);
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_hscw(&bytes[..bytes.len() - 2], &path), Err(Error::Truncated { .. })));
}

#[test]
fn meta_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = meta_path(&dir.path().join("scene.hsc"));
    let mut m = Meta::new();
    m.set("peak", 0.8125).set("seed", 42);
    m.write(&path).unwrap();
    assert_eq!(Meta::read(&path).unwrap(), m);
}

#[test]
fn generators_are_deterministic_and_bounded() {
    for kind in SceneKind::ALL {
        let spec = SyntheticSceneSpec::new(kind, 16, 20, 8, 77);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(bits(a.data()), bits(b.data()), "{kind}");
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        let other = generate_scene(&SyntheticSceneSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(bits(a.data()), bits(other.data()), "{kind}");
    }
}

#[test]
fn blob_and_ramp_scenes_are_spectrally_smooth() {
    for kind in [SceneKind::GaussianBlobs, SceneKind::GradientRamps] {
        for seed in 0..20 {
            let cube = generate_scene(&SyntheticSceneSpec::new(kind, 32, 32, 8, seed)).unwrap();
            let r = lag1_autocorrelation(&cube);
            assert!(r > 0.5, "{kind} seed {seed}: lag-1 autocorrelation {r}");
        }
    }
}

#[test]
fn half_density_mask_mean_concentrates() {
    for seed in 0..5 {
        let m = generate_mask(256, 256, 0.5, seed).unwrap();
        let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / m.data().len() as f64;
        assert!((mean - 0.5).abs() <= 0.01, "seed {seed}: mean {mean}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn raster_import_orders_by_name_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, level) in [("b.png", 200u8), ("a.png", 100u8), ("c.png", 50u8)] {
        let img = image::GrayImage::from_fn(4, 3, |x, _| image::Luma([if x == 0 { level } else { 0 }]));
        img.save(dir.path().join(name)).unwrap();
    }
    let (cube, peak) = import_raster_dir(dir.path()).unwrap();
    assert_eq!(cube.dims(), (3, 4, 3));
    assert!((peak - 200.0 / 255.0).abs() < 1e-6);
    assert!((cube.at(0, 0, 0) - 0.5).abs() < 1e-6);
    assert_eq!(cube.at(1, 0, 1), 1.0);
    assert!((cube.at(2, 0, 2) - 0.25).abs() < 1e-6);
    assert_eq!(cube.at(0, 1, 1), 0.0);
}

#[test]
fn channel_previews_record_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cube = SpectralCube::from_fn(4, 5, 2, |x, y, m| (x + y) as f32 * (m + 1) as f32);
    let out = write_channel_pngs(&cube, dir.path(), "rec").unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].1, ChannelScale { min: 0.0, max: 14.0 });
    let img = image::open(&out[1].0).unwrap().into_luma8();
    assert_eq!(img.dimensions(), (5, 4));
    assert_eq!(img.get_pixel(4, 3).0[0], 255);
    write_loss_curve_png(&dir.path().join("loss.png"), &[1.0, 0.5, 0.3, f64::NAN, 0.2]).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsc_bytes_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, raw in proptest::collection::vec(any::<u32>(), 125)) {
        let data: Vec<f32> = raw[..h * w * c].iter().map(|&b| f32::from_bits(b)).collect();
        let bytes = encode_hsc(HscHeader { h, w, c }, &data);
        prop_assert_eq!(bytes.len(), HSC_HEADER_LEN + 4 * h * w * c);
        let (hd, back) = decode_hsc(&bytes, "p".as_ref()).unwrap();
        prop_assert_eq!(hd, HscHeader { h, w, c });
        prop_assert_eq!(bits(&back), bits(&data));
    }

    #[test]
    fn truncation_never_decodes(h in 1usize..5, w in 1usize..5, cut in 0usize..1000) {
        let bytes = encode_hsc(HscHeader { h, w, c: 2 }, &vec![0.25f32; h * w * 2]);
        let cut = cut % bytes.len();
        prop_assert!(decode_hsc(&bytes[..cut], "p".as_ref()).is_err());
    }

    #[test]
    fn mask_values_are_binary(h in 1usize..20, w in 1usize..20, density in 0.0f64..=1.0, seed: u64) {
        let m: CodedMask<f32> = generate_mask(h, w, density, seed).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
