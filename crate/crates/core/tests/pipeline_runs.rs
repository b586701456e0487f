use pdiff::novelty::Tag;
use pdiff::pipeline::{
    self, emit_scatter, run_ablation, run_pipeline, Axis, Experiment, ExperimentConfig, RunReport, REPORT_FILE,
};
use sha2::{Digest, Sha256};

const TINY: &str = r#"
seed = 21

[task]
kind = "gaussian-blobs"
dim = 6
separation = 4.0
noise_std = 1.0
n_samples = 120
n_classes = 3

[model]
architecture = "mlp-mini-s"
hidden = [8]

[train]
epochs = 3
finetune_steps = 10

[autoencoder]
iterations = 25
batch_size = 8
channels = [4, 4]

[diffusion]
steps = 20
iterations = 25
batch_size = 8
channels = [4, 8]
time_dim = 8

[eval]
n_generated = 5
noise_draws = 2
trajectory_samples = 1
trajectory_snapshots = 4
"#;

fn tiny() -> Experiment {
    Experiment::from_toml(TINY).unwrap()
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&tiny(), a.path()).unwrap();
    let rb = run_pipeline(&tiny(), b.path()).unwrap();
    let ja = std::fs::read(a.path().join(REPORT_FILE)).unwrap();
    let jb = std::fs::read(b.path().join(REPORT_FILE)).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(ra, RunReport { timings: ra.timings.clone(), ..rb });
    for f in ["corpus.bin", "autoencoder.bin", "denoiser.bin", "generated.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }

    // a different seed changes the numbers
    let c = tempfile::tempdir().unwrap();
    let rc = run_pipeline(&tiny().with_seed(22), c.path()).unwrap();
    assert_ne!(rc.autoencoder_loss, ra.autoencoder_loss);
    assert_eq!(rc.config.seed_override, Some(22));
}

#[test]
fn snapshot_matches_the_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let exp = Experiment::from_file(&cfg_path).unwrap();
    let out = dir.path().join("run");
    let r = run_pipeline(&exp, &out).unwrap();
    let want = hex::encode(Sha256::digest(std::fs::read(&cfg_path).unwrap()));
    assert_eq!(r.config.sha256, want);
    assert_eq!(r.config.text, TINY);
    assert_eq!(std::fs::read(out.join("config.toml")).unwrap(), TINY.as_bytes());
    for path in r.artifacts.values() {
        assert!(out.join(path).is_file(), "{path} missing");
    }
    assert_eq!(r.corpus.rows, 10);
    assert_eq!(r.summary(Tag::Original).unwrap().count, 10);
    assert_eq!(r.summary(Tag::Ensemble).unwrap().count, 1);
    assert_eq!(r.summary(Tag::NoiseAdded).unwrap().count, 3 * 2);
    let generated = r.summary(Tag::Generated).map_or(0, |s| s.count);
    assert_eq!(generated + r.similarity.failures.len(), 5);
    assert_eq!(r.trajectories.len(), 1);
    let ts: Vec<usize> = r.trajectories[0].iter().map(|p| p.t).collect();
    assert_eq!(ts.first(), Some(&20));
    assert_eq!(ts.last(), Some(&0));
}

#[test]
fn zero_generated_leaves_originals_and_baselines() {
    let mut cfg: ExperimentConfig = toml::from_str(TINY).unwrap();
    cfg.eval.n_generated = 0;
    cfg.eval.trajectory_samples = 0;
    let dir = tempfile::tempdir().unwrap();
    let r = run_pipeline(&Experiment::from_config(cfg).unwrap(), dir.path()).unwrap();
    assert!(r.summary(Tag::Generated).is_none());
    assert_eq!(r.similarity.models.len(), 10 + 1 + 6);
    assert!(r.trajectories.is_empty());
}

#[test]
fn stages_run_one_at_a_time_match_the_chained_run() {
    let exp = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let chained = run_pipeline(&exp, a.path()).unwrap();
    pipeline::train_originals(&exp, b.path()).unwrap();
    pipeline::harvest(&exp, b.path()).unwrap();
    pipeline::train_ae(&exp, b.path()).unwrap();
    pipeline::train_diffusion(&exp, b.path()).unwrap();
    pipeline::generate(&exp, b.path()).unwrap();
    let stepwise = pipeline::evaluate_run(&exp, b.path()).unwrap();
    assert_eq!(chained.to_json().unwrap(), stepwise.to_json().unwrap());
}

#[test]
fn failures_name_the_stage_and_keep_earlier_artifacts() {
    let mut cfg: ExperimentConfig = toml::from_str(TINY).unwrap();
    cfg.diffusion.lr = 1e12;
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&Experiment::from_config(cfg).unwrap(), dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("[train-diffusion]"), "{msg}");
    for f in ["corpus.bin", "autoencoder.bin", "base_model.bin"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join(REPORT_FILE).exists());

    let empty = tempfile::tempdir().unwrap();
    let msg = pipeline::generate(&tiny(), empty.path()).unwrap_err().to_string();
    assert!(msg.starts_with("[generate]"), "{msg}");
}

#[test]
fn ablation_siblings_differ_only_on_their_axis() {
    let dir = tempfile::tempdir().unwrap();
    let values = vec!["0".to_string(), "0.2".to_string()];
    let out = run_ablation(&tiny(), Axis::SigmaZ, &values, dir.path(), 2).unwrap();
    assert_eq!(out.rows.len(), 2);
    let parsed: Vec<ExperimentConfig> = out.reports.iter().map(|r| toml::from_str(&r.config.text).unwrap()).collect();
    assert_eq!(parsed[0].autoencoder.sigma_z, 0.0);
    assert_eq!(parsed[1].autoencoder.sigma_z, 0.2);
    let mut a = parsed[0].clone();
    a.autoencoder.sigma_z = parsed[1].autoencoder.sigma_z;
    assert_eq!(a, parsed[1]);
    let mut base = tiny().config;
    base.autoencoder.sigma_z = 0.2;
    assert_eq!(parsed[1], base);

    // stages not downstream of the axis are shared exactly
    assert_eq!(out.reports[0].base_accuracy, out.reports[1].base_accuracy);
    assert_eq!(out.reports[0].corpus, out.reports[1].corpus);

    let mut buf = Vec::new();
    let n = emit_scatter(&mut buf, [("a", &out.reports[0]), ("b", &out.reports[1])]).unwrap();
    let rows = pdiff::novelty::read_scatter(buf.as_slice()).unwrap();
    assert_eq!(n, rows.len());
    assert_eq!(n, out.reports.iter().map(|r| r.similarity.models.len()).sum::<usize>());
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.max_similarity)));
    assert!(run_ablation(&tiny(), Axis::K, &["ten".to_string()], dir.path(), 1).is_err());
    assert!("gamma".parse::<Axis>().is_err());
}
