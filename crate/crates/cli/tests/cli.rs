use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn resad(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resad"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_synth(dir: &Path, out: &str, keep: &str) {
    let o = resad(
        &[
            "synth", "--out", out, "--images-per-class", "12", "--height", "16", "--width", "16", "--layer",
            "8x8x4", "--layer", "4x4x4", "--keep", keep,
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = resad(&["verify"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 8);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "train.rsfd", "0,1");
    small_synth(d, "test.rsfd", "2");
    fs::write(d.join("run.cfg"), "epochs = 2\nbatch_size = 8\nlr = 1e-3\ncodebook_size = 16\ncoupling_blocks = 2\n").unwrap();

    let o = resad(&["train", "--config", "run.cfg", "--data", "train.rsfd", "--out", "m.rsck"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8(o.stdout).unwrap();
    assert!(log.contains("epoch 1 ") && log.contains("epoch 2 "));
    let manifest = fs::read_to_string(d.join("m.rsck.manifest")).unwrap();
    assert!(manifest.contains("config_sha256 = ") && manifest.contains("reference_indices = "));

    for report in ["a.txt", "b.txt"] {
        let o = resad(
            &["eval", "--ckpt", "m.rsck", "--data", "test.rsfd", "--n-refs", "4", "--seed", "7", "--report", report],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read_to_string(d.join("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.txt")).unwrap());
    for key in ["image_auroc = ", "pixel_auroc = ", "pro_03 = ", "images_scored = 8"] {
        assert!(a.contains(key), "{a}");
    }
    let m = fs::read_to_string(d.join("a.txt.manifest")).unwrap();
    assert!(m.contains("seed = 7"));

    let o = resad(&["stats", "--data", "test.rsfd", "--ckpt", "m.rsck"], d);
    assert_eq!(code(&o), 0);
    let stats = String::from_utf8(o.stdout).unwrap();
    assert!(stats.contains("residual.kurtosis = ") && stats.contains("constrained.scale_std = "));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&resad(&["train", "--out", "m.rsck"], dir.path())), 1);
    assert_eq!(code(&resad(&["eval", "--bogus"], dir.path())), 1);
    assert_eq!(code(&resad(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&resad(&["--help"], dir.path())), 0);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing file
    assert_eq!(code(&resad(&["train", "--data", "nope.rsfd", "--out", "m.rsck"], d)), 2);
    // readable file with the wrong magic
    fs::write(d.join("junk.rsfd"), b"not a dataset").unwrap();
    assert_eq!(code(&resad(&["stats", "--data", "junk.rsfd"], d)), 1);
    // unknown config key
    small_synth(d, "train.rsfd", "0,1");
    fs::write(d.join("bad.cfg"), "epochz = 3\n").unwrap();
    assert_eq!(code(&resad(&["train", "--config", "bad.cfg", "--data", "train.rsfd", "--out", "m.rsck"], d)), 1);
}
