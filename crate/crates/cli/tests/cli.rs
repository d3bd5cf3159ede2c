use std::path::{Path, PathBuf};
use std::process::Command;

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_quick.toml")
}

fn skinfair(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_skinfair"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &std::process::Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

#[test]
fn quick_config_runs_end_to_end_and_reruns_identically() {
    let config = quick_config();
    let config = config.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let stdout = ok(&skinfair(&["run", "--config", config], a.path()));
    assert!(stdout.contains("2 of 2 sub-runs completed"), "{stdout}");
    for split in 0..2 {
        let dir = a.path().join(format!("runs/baseline__smallcnn/split-{split}"));
        for f in ["checkpoint.safetensors", "manifest.json", "report_internal.json", "report_external.json"] {
            assert!(dir.join(f).is_file(), "{}", dir.join(f).display());
        }
    }
    let first = std::fs::read(a.path().join("aggregate.json")).unwrap();

    let stdout = ok(&skinfair(&["report"], a.path()));
    assert!(stdout.contains("tables"), "{stdout}");
    assert_eq!(std::fs::read(a.path().join("aggregate.json")).unwrap(), first);
    let eom = std::fs::read_to_string(a.path().join("tables/eom.md")).unwrap();
    assert!(eom.starts_with("| Model | SmallCNN Internal | SmallCNN External |"), "{eom}");

    let stdout = ok(&skinfair(&["plot", "--metric", "eom"], a.path()));
    assert!(stdout.starts_with("1 points"), "{stdout}");
    assert!(a.path().join("tradeoff_external.png").is_file());

    ok(&skinfair(&["run", "--config", config], b.path()));
    assert_eq!(std::fs::read(b.path().join("aggregate.json")).unwrap(), first);
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = skinfair(&["report"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn invalid_pairing_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "task = \"cancer\"\ntrain_source = \"fitzpatrick17k\"\nexternal_source = \"scin\"\n\
         [[backbones]]\nname = \"S\"\nfamily = \"small_cnn\"\nembedding_dim = 8\ntrainable = true\n",
    )
    .unwrap();
    let o = skinfair(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert!(!o.status.success());
    assert!(!dir.path().join("out/runs").exists());
}
