use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sst_cli::{eval_scenes, eval_table, EvalRow};
use sst_core::io::{read_hsc, read_hscw, read_mask, read_measurement, write_hsc, Meta};
use sst_core::model::{Reconstructor, SstConfig, SstModel, StageTrace};
use sst_core::train::SceneMetrics;
use sst_core::{forward_project, CodedMask, DispersionConfig, Measurement, NoiseModel, SpectralCube};

fn sst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sst"))
        .args(args)
        .env_remove("SST_THREADS")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn err(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), text(o), err(o));
}

/// The `key=value` block between the echo markers.
fn echoed(o: &Output) -> Meta {
    let out = text(o);
    let block: String = out
        .lines()
        .skip_while(|l| !l.contains("resolved config"))
        .take_while(|l| !l.starts_with("# end config"))
        .map(|l| format!("{l}\n"))
        .collect();
    Meta::parse(&block, Path::new("stdout")).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_library_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = sst(&["simulate", "--height", "32", "--width", "32", "--channels", "8", "--d", "1", "--seed", "4", "--out", p(&out)]);
    ok(&o);
    assert!(text(&o).contains("measurement 32×39"), "{}", text(&o));

    let truth = read_hsc(&out.join("truth.hsc")).unwrap();
    let mask = read_mask(&out.join("mask.hsc")).unwrap();
    let y = read_measurement(&out.join("measurement.hsc")).unwrap();
    let want = forward_project(&truth, &mask, &DispersionConfig::new(1), &NoiseModel::None).unwrap();
    assert_eq!((y.height(), y.width()), (32, 39));
    assert_eq!(y.data(), want.data());
    let meta = Meta::read(&out.join("measurement.meta")).unwrap();
    assert_eq!(meta.get("peak"), Some("1"));
    assert_eq!(meta.get("step"), Some("1"));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for sigma in ["0", "0.05"] {
        let (a, b) = (dir.path().join(format!("a{sigma}")), dir.path().join(format!("b{sigma}")));
        for o in [&a, &b] {
            ok(&sst(&["simulate", "--synthetic", "gradient-ramps", "--noise-sigma", sigma, "--seed", "9", "--out", p(o)]));
        }
        for f in ["measurement.hsc", "mask.hsc", "truth.hsc", "measurement.meta"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} σ={sigma}");
        }
    }
}

#[test]
fn simulate_reads_scene_and_mask_files() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&sst(&["simulate", "--height", "16", "--width", "16", "--channels", "4", "--png", "--out", p(&first)]));
    assert!(first.join("truth_ch03.png").is_file());
    assert!(Meta::read(&first.join("truth.meta")).unwrap().get("png_ch03_max").is_some());
    let second = dir.path().join("second");
    let o = sst(&[
        "simulate",
        "--scene",
        p(&first.join("truth.hsc")),
        "--mask",
        p(&first.join("mask.hsc")),
        "--d",
        "2",
        "--out",
        p(&second),
    ]);
    ok(&o);
    assert!(text(&o).contains("measurement 16×22"));
    assert_eq!(fs::read(first.join("mask.hsc")).unwrap(), fs::read(second.join("mask.hsc")).unwrap());
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("nope.hsc");
    assert_eq!(sst(&["simulate"]).status.code(), Some(2));
    assert_eq!(sst(&["simulate", "--scene", p(&missing), "--out", p(&out)]).status.code(), Some(2));
    let o = sst(&["reconstruct", "--weights", p(&missing), "--measurement", p(&missing), "--mask", p(&missing), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(err(&o).contains("does not exist"));
    assert_eq!(sst(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sst(&["simulate", "--threads", "0", "--out", p(&out)]).status.code(), Some(2));
}

#[test]
fn config_file_fills_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("o");
    fs::write(&cfg, format!("# comment\nheight=16\nwidth = 24\nchannels=4\nnoise_sigma=0.1\npng=true\nout={}\n", p(&out))).unwrap();
    let o = sst(&["simulate", "--config", p(&cfg), "--width", "16"]);
    ok(&o);
    let e = echoed(&o);
    assert_eq!(e.get("height"), Some("16"));
    assert_eq!(e.get("width"), Some("16"), "flag overrides file");
    assert_eq!(e.get("noise_sigma"), Some("0.1"));
    assert_eq!(e.get("png"), Some("true"));
    assert!(out.join("truth_ch00.png").is_file());

    // The echo is itself a complete config.
    let again = dir.path().join("again.cfg");
    fs::write(&again, e.render()).unwrap();
    let o2 = sst(&["simulate", "--config", p(&again)]);
    ok(&o2);
    assert_eq!(echoed(&o2), e);

    fs::write(&cfg, "height=16\nwdith=3\n").unwrap();
    let o = sst(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(err(&o).contains("unknown key `wdith`"), "{}", err(&o));
}

#[test]
fn threads_flag_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_sst"))
        .args(["simulate", "--height", "16", "--width", "16", "--out", p(&out)])
        .env("SST_THREADS", "1")
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(echoed(&o).get("threads"), Some("1"));
    let o = sst(&["--threads", "2", "simulate", "--height", "16", "--width", "16", "--out", p(&out)]);
    ok(&o);
    assert_eq!(echoed(&o).get("threads"), Some("2"));
}

const SMALL: &[&str] = &["--preset", "tiny", "--height", "16", "--width", "16", "--iters-per-epoch", "2"];

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--scenes", "3", "--val-scenes", "1", "--out-dir", p(out)]);
    args.extend_from_slice(extra);
    sst(&args)
}

fn small_model() -> SstModel {
    SstModel::new(SstConfig { height: 16, width: 16, ..SstConfig::tiny(1) }).unwrap()
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&train_small(&out, &["--epochs", "0", "--seed", "5"]));
    let saved = read_hscw(&out.join("weights.hscw")).unwrap();
    let init = small_model().init_params::<f32>(5).unwrap();
    assert_eq!(saved.len(), init.len());
    for (name, t) in init.iter() {
        assert_eq!(saved.get(name).unwrap().data(), t.data(), "{name}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(out.join("loss_curve.png").is_file());
}

#[test]
fn train_reconstruct_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = train_small(&out, &["--epochs", "2", "--stages", "2"]);
    ok(&o);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,psnr,ssim,lr,wall_ms");
    assert_eq!(lines.len(), 3, "one row per epoch");
    assert!(out.join("loss_curve.png").is_file());
    assert!(out.join("best.hscw").is_file());
    let meta = Meta::read(&out.join("weights.meta")).unwrap();
    assert_eq!(meta.get("n_stages"), Some("2"));
    assert_eq!(meta.get("iterations"), Some("4"));

    let sim = dir.path().join("sim");
    ok(&sst(&[
        "simulate",
        "--height",
        "16",
        "--width",
        "16",
        "--channels",
        "4",
        "--mask",
        p(&out.join("mask.hsc")),
        "--seed",
        "77",
        "--out",
        p(&sim),
    ]));
    let rec = dir.path().join("rec");
    let o = sst(&[
        "reconstruct",
        "--weights",
        p(&out.join("weights.hscw")),
        "--measurement",
        p(&sim.join("measurement.hsc")),
        "--mask",
        p(&out.join("mask.hsc")),
        "--truth",
        p(&sim.join("truth.hsc")),
        "--out",
        p(&rec),
    ]);
    ok(&o);
    let x = read_hsc(&rec.join("recon.hsc")).unwrap();
    assert_eq!(x.dims(), (16, 16, 4));
    let trace = fs::read_to_string(rec.join("recon_trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "one row per stage");
    for r in rows {
        let e: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(e.is_finite() && e >= 0.0);
    }
    assert!(rec.join("recon_ch00.png").is_file());
    assert!(Meta::read(&rec.join("recon.meta")).unwrap().get("png_ch00_min").is_some());
    assert!(text(&o).contains("mean"));

    let sim2 = dir.path().join("sim2");
    ok(&sst(&["simulate", "--height", "16", "--width", "16", "--channels", "4", "--seed", "78", "--out", p(&sim2)]));
    let o = sst(&[
        "eval",
        "--weights",
        p(&out.join("weights.hscw")),
        "--mask",
        p(&out.join("mask.hsc")),
        "--truth",
        p(&sim.join("truth.hsc")),
        "--truth",
        p(&sim2.join("truth.hsc")),
    ]);
    ok(&o);
    let table: Vec<Vec<String>> = text(&o)
        .lines()
        .skip_while(|l| !l.starts_with("scene"))
        .skip(1)
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    assert_eq!(table.len(), 3);
    let psnr: Vec<f64> = table.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!((psnr[2] - (psnr[0] + psnr[1]) / 2.0).abs() < 1.5e-3, "{psnr:?}");

    // Wrong-sized measurement is rejected with a diagnostic.
    let o = sst(&[
        "reconstruct",
        "--weights",
        p(&out.join("weights.hscw")),
        "--measurement",
        p(&sim2.join("truth.hsc")),
        "--mask",
        p(&out.join("mask.hsc")),
        "--out",
        p(&rec),
    ]);
    assert!(!o.status.success());
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&train_small(&out, &["--epochs", "0"]));
    ok(&sst(&["simulate", "--height", "16", "--width", "16", "--channels", "4", "--out", p(&out.join("sim"))]));
    let w = out.join("weights.hscw");
    let bytes = fs::read(&w).unwrap();
    fs::write(&w, &bytes[..bytes.len() - 7]).unwrap();
    let o = sst(&[
        "reconstruct",
        "--weights",
        p(&w),
        "--measurement",
        p(&out.join("sim/measurement.hsc")),
        "--mask",
        p(&out.join("sim/mask.hsc")),
        "--out",
        p(&out.join("rec")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(err(&o).contains("weights.hscw"), "{}", err(&o));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for i in 0..2 {
        let mut x = SpectralCube::<f32>::from_fn(16, 16, 4, |r, c, m| ((r + c + m + i) % 5) as f32 / 5.0);
        if i == 0 {
            x.data_mut()[10] = f32::INFINITY;
        }
        write_hsc(&x, &data.join(format!("s{i}.hsc"))).unwrap();
    }
    let out = dir.path().join("t");
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--data", p(&data), "--val-scenes", "1", "--epochs", "1", "--out-dir", p(&out)]);
    let o = sst(&args);
    assert_eq!(o.status.code(), Some(3), "{}", err(&o));
    assert!(err(&o).contains("diverged"));
    assert!(out.join("weights.hscw").is_file(), "last good weights are kept");
}

#[test]
fn verification_commands() {
    let o = sst(&["gradcheck", "--precision", "f64", "--no-blocks", "--primitive-seeds", "2"]);
    ok(&o);
    assert!(text(&o).contains("matmul"));
    assert!(text(&o).contains("0 failed"));

    let o = sst(&["gradcheck", "--precision", "f64", "--no-blocks", "--primitive-seeds", "2", "--inject-fault", "matmul"]);
    assert_eq!(o.status.code(), Some(4));
    let stderr = err(&o);
    assert!(stderr.contains("matmul"), "{stderr}");
    assert!(!stderr.contains("conv2d"), "{stderr}");

    let o = sst(&["gradcheck", "--inject-fault", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sst(&["oracle-check", "--seed", "3"]);
    ok(&o);
    assert!(text(&o).contains("0 failed"));
    let o = sst(&["oracle-check", "--tol", "-1"]);
    assert_eq!(o.status.code(), Some(4));
}

/// Returns a stored cube regardless of the measurement.
struct Oracle(SpectralCube<f32>);

impl Reconstructor<f32> for Oracle {
    fn reconstruct(&self, _: &Measurement<f32>, _: &CodedMask<f32>) -> sst_core::Result<(SpectralCube<f32>, StageTrace<f32>)> {
        Ok((self.0.clone(), StageTrace::default()))
    }
}

#[test]
fn perfect_reconstruction_scores_infinite_psnr() {
    let truth = SpectralCube::<f32>::from_fn(12, 12, 3, |r, c, m| ((r * 7 + c * 3 + m) % 11) as f32 / 10.0);
    let mask = CodedMask::new(12, 12, (0..144).map(|i| (i % 2) as f32).collect()).unwrap();
    let res = eval_scenes(&Oracle(truth.clone()), &[truth], &mask, &DispersionConfig::new(1)).unwrap();
    assert_eq!(res[0].0.psnr, f64::INFINITY);
    assert_eq!(res[0].0.ssim, 1.0);
    let table = eval_table(&[EvalRow { name: "a".into(), metrics: res[0].0 }]);
    assert!(table.lines().nth(1).unwrap().contains("inf"), "{table}");
}

#[test]
fn eval_table_mean_is_arithmetic() {
    let rows = [
        EvalRow { name: "a".into(), metrics: SceneMetrics { psnr: 30.0, ssim: 0.9 } },
        EvalRow { name: "bb".into(), metrics: SceneMetrics { psnr: 20.0, ssim: 0.5 } },
        EvalRow { name: "c".into(), metrics: SceneMetrics { psnr: 25.5, ssim: 0.7 } },
    ];
    let t = eval_table(&rows);
    let last: Vec<&str> = t.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(last, vec!["mean", "25.167", "0.7000"]);
}
