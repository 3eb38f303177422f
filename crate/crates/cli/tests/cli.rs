use std::path::Path;
use std::process::{Command, Output};

fn fbi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbi"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_net_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbi(dir.path(), &["analyze-net"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("blind-spot: PASS, RF 119×119"), "{}", stdout(&o));

    let o = fbi(dir.path(), &["analyze-net", "--config", "naive-3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("via (1,0)+(2,0)+(-3,0)"));

    std::fs::write(dir.path().join("net.txt"), "name tiny\nconv taps=0,1;1,0 in=1 out=2 prelu\nhead 2 2\n").unwrap();
    let o = fbi(dir.path(), &["analyze-net", "--config", "net.txt", "--offsets"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("(0,1)"));

    assert!(!fbi(dir.path(), &["analyze-net", "--config", "missing"]).status.success());
}

#[test]
fn synth_eval_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "synth", "--generate", "2", "--size", "48", "--clean-out", "clean", "--out", "noisy", "--alpha", "0.01",
        "--sigma", "0.02", "--seed", "3",
    ];
    assert!(fbi(d, &args).status.success());
    let first = std::fs::read(d.join("noisy/img_0000.pgm")).unwrap();
    assert!(fbi(d, &args).status.success());
    assert_eq!(std::fs::read(d.join("noisy/img_0000.pgm")).unwrap(), first);

    let o = fbi(d, &["eval", "--pred", "clean", "--clean", "clean", "--jsonl", "m.jsonl"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mean = text.lines().last().unwrap();
    assert!(mean.contains("99.00") && mean.contains("1.0000"), "{text}");
    let records = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(rec["psnr"], 99.0);
    assert_eq!(rec["ssim"], 1.0);

    let o = fbi(d, &["estimate", "--in", "noisy/img_0000.pgm"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("variance="));
    assert!(!fbi(d, &["estimate", "--in", "noisy", "--method", "pge"]).status.success());
}

#[test]
fn training_is_reproducible_and_checkpoints_load() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(fbi(d, &["synth", "--generate", "2", "--size", "32", "--out", "noisy", "--alpha", "0.02", "--sigma", "0.02"])
        .status
        .success());
    std::fs::write(
        d.join("run.cfg"),
        "seed = 5\npge.epochs = 1\npge.patches = 4\npge.patch_size = 32\npge.channels = 2,2,2\n\
         denoiser.epochs = 1\ndenoiser.patch_size = 16\n",
    )
    .unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = fbi(d, &["train-pge", "--data", "noisy", "--config", "run.cfg", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());

    let o = fbi(d, &["estimate", "--in", "noisy", "--method", "pge", "--ckpt", "a.ckpt"]);
    assert!(stdout(&o).contains("alpha="));

    let o = fbi(
        d,
        &["train-denoiser", "--data", "noisy", "--config", "run.cfg", "--pge-ckpt", "a.ckpt", "--out", "net.ckpt"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = fbi(d, &["denoise", "--in", "noisy", "--pge-ckpt", "a.ckpt", "--net-ckpt", "net.ckpt", "--out", "den"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("den/img_0001.pgm").exists());

    // the estimator checkpoint is not a denoiser checkpoint
    let o = fbi(d, &["denoise", "--in", "noisy", "--alpha", "0.02", "--sigma", "0.02", "--net-ckpt", "a.ckpt", "--out", "x"]);
    assert!(!o.status.success());
}

#[test]
fn bad_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "colour = red\n").unwrap();
    let o = fbi(d, &["train-pge", "--data", ".", "--config", "bad.cfg", "--out", "x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key colour"));

    std::fs::write(d.join("short.pgm"), b"P5\n4 4\n255\n\x00\x01").unwrap();
    let o = fbi(d, &["estimate", "--in", "short.pgm"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}
