use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4
[task]
kind = "gaussian-blobs"
dim = 5
separation = 4.0
noise_std = 1.0
n_samples = 90
n_classes = 3
[model]
architecture = "mlp-mini-s"
hidden = [6]
[train]
epochs = 2
finetune_steps = 6
[autoencoder]
iterations = 10
batch_size = 4
channels = [4]
[diffusion]
steps = 10
iterations = 10
batch_size = 4
channels = [4]
time_dim = 4
[eval]
n_generated = 3
noise_draws = 1
"#;

fn pdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdiff"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn stage_by_stage_then_scatter() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    for stage in ["train-originals", "harvest", "train-ae", "train-diffusion", "generate", "evaluate"] {
        let out = pdiff(&[stage, "--config", "exp.toml", "--out", "run"], dir.path());
        assert!(out.status.success(), "{stage}: {}", text(&out.stderr));
    }
    let out = pdiff(&["evaluate", "-c", "exp.toml", "-o", "run"], dir.path());
    assert!(text(&out.stdout).contains("generated"));
    assert!(dir.path().join("run/report.json").is_file());

    let out = pdiff(&["scatter", "run/report.json", "--out", "all.csv"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("all.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("run,id,tag,accuracy,max_similarity"));
    // 6 originals, 1 ensemble, 3 noise-added, 3 generated
    assert_eq!(csv.lines().count(), 1 + 6 + 1 + 3 + 3);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("run,")));
}

#[test]
fn pipeline_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    let out = pdiff(&["pipeline", "--config", "exp.toml", "--seed", "9", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("r/report.json")).unwrap();
    assert!(report.contains("\"seed_override\": 9"));
    assert!(dir.path().join("r/timings.json").is_file());
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = pdiff(&["pipeline", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("[config]"), "{}", text(&out.stderr));

    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    let out = pdiff(&["train-ae", "--config", "exp.toml", "--out", "empty"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("[train-ae]"), "{}", text(&out.stderr));

    let out = pdiff(&["ablate", "--config", "exp.toml", "--axis", "gamma", "--values", "1"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("unknown ablation axis"), "{}", text(&out.stderr));

    let out = pdiff(&["no-such-command"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn ablate_writes_a_table_per_value() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    let out = pdiff(
        &["ablate", "--config", "exp.toml", "--axis", "k", "--values", "3,5", "--out", "abl", "--jobs", "1"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("abl/k-3/report.json").is_file());
    assert!(dir.path().join("abl/k-5/report.json").is_file());
}
