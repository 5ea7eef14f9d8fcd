use std::path::Path;
use std::process::Command;

use hjscc::config::RunConfig;

fn hjscc(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hjscc"))
        .args(args)
        .env_remove("HJSCC_OUTPUT_ROOT")
        .output()
        .expect("spawn");
    assert!(
        out.status.success(),
        "hjscc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn shipped_config_parses() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.model.levels(), 3);
}

#[test]
fn synth_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    hjscc(&["synth", "--out", data.to_str().unwrap(), "--count", "4", "--size", "16"]);

    let mut cfg = RunConfig::default();
    cfg.model.channels = vec![4, 4];
    cfg.model.downsampling = vec![4, 2];
    cfg.model.width = 8;
    cfg.train.steps = 2;
    cfg.train.crop_size = 8;
    cfg.train.batch_size = 2;
    cfg.data.train_dir = Some(data.clone());
    cfg.output_dir = d.join("run");
    let cfg_path = d.join("cfg.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string().unwrap()).unwrap();
    hjscc(&["train", "--config", cfg_path.to_str().unwrap()]);
    let ckpt = d.join("run/checkpoint.bin");
    assert!(ckpt.exists());
    assert!(d.join("run/loss_curve.csv").exists());

    let eval = d.join("eval");
    hjscc(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--snr-db",
        "0,5,10",
        "--alpha",
        "0.5",
        "--out",
        eval.to_str().unwrap(),
    ]);
    for f in ["metrics.csv", "metrics.json", "rate_plans.json"] {
        assert!(eval.join(f).exists(), "{f} missing");
    }

    let rep = d.join("report");
    hjscc(&[
        "report",
        "--in",
        eval.join("metrics.csv").to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(rep.join("summary.json").exists());
    assert!(std::fs::read_dir(&rep)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png")));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[model]\nwidth = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hjscc"))
        .args(["train", "--config", p.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
