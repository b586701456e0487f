//! End-to-end experiment runner. Every stage reads its inputs from and
//! writes its outputs to one run directory, so stages can be run one at a
//! time or chained by [`run_pipeline`].

pub mod ablation;
pub mod config;

pub use ablation::{run_ablation, AblationOutcome, AblationRow, Axis};
pub use config::{
    AutoencoderSection, DiffusionSection, EvalSection, Experiment, ExperimentConfig, ModelConfig, StageSeeds,
    TaskConfig, TrainSection,
};

use crate::autoencoder::{train_autoencoder, Autoencoder, Noise};
use crate::container::{self, canonical_json_pretty, GENERATED_TAG};
use crate::corpus::{corpus_stats, load_corpus, save_corpus, ParamSelector, Provenance};
use crate::diffusion::{sample_many, train_denoiser, Denoiser, LatentScaler, SampleOptions};
use crate::error::{Error, Result, StageContext};
use crate::novelty::{
    noise_baseline, pooled_std, record_for, weight_ensemble, write_scatter, Failure, ScatterRow, SimilarityReport, Spread, Tag,
    NoiseScaleMode, TagSummary,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tasks::{evaluate, finetune_and_harvest, make_dataset, train_to_convergence, Model, Split};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Precision the autoencoder and denoiser compute in. Artifacts are stored
/// as f32 anyway, and f32 kernels run about twice as fast.
pub type NetScalar = f32;

pub const CONFIG_FILE: &str = "config.toml";
pub const BASE_MODEL_FILE: &str = "base_model.bin";
pub const TRAIN_LOG_FILE: &str = "train.json";
pub const CORPUS_FILE: &str = "corpus.bin";
pub const HARVEST_LOG_FILE: &str = "harvest.json";
pub const AUTOENCODER_FILE: &str = "autoencoder.bin";
pub const AUTOENCODER_LOG_FILE: &str = "autoencoder.json";
pub const DENOISER_FILE: &str = "denoiser.bin";
pub const DIFFUSION_LOG_FILE: &str = "diffusion.json";
pub const LATENT_SCALER_FILE: &str = "latent_scaler.json";
pub const GENERATED_FILE: &str = "generated.bin";
pub const TRAJECTORY_FILE: &str = "trajectories.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const TIMINGS_FILE: &str = "timings.json";

pub const STAGES: [&str; 6] = [
    "train-originals",
    "harvest",
    "train-ae",
    "train-diffusion",
    "generate",
    "evaluate",
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, canonical_json_pretty(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn snapshot(exp: &Experiment, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), &exp.source)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation accuracy after every epoch.
    pub val_accuracy: Vec<f64>,
    /// Validation accuracy of the stored (f32) base model.
    pub base_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestLog {
    pub step_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderLog {
    pub loss: Vec<f64>,
    /// Noise-free reconstruction MSE over the corpus after training.
    pub reconstruction_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLog {
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GeneratedManifest {
    rows: usize,
    dim: usize,
    latent_dim: usize,
    steps: usize,
}

/// Latent snapshots `(t, z_t)` of the recorded reverse chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub chains: Vec<Vec<(usize, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub text: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub rows: usize,
    pub dim: usize,
    pub min: f64,
    pub max: f64,
    /// Average over coordinates of the per-coordinate std.
    pub mean_std: f64,
    pub harvest_accuracy: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigSnapshot,
    pub seeds: StageSeeds,
    pub base_accuracy: f64,
    pub train_accuracy: Vec<f64>,
    pub corpus: CorpusSummary,
    pub autoencoder_loss: Vec<f64>,
    pub reconstruction_mse: f64,
    pub diffusion_loss: Vec<f64>,
    pub similarity: SimilarityReport,
    /// Decoded validation accuracy along each recorded reverse chain.
    pub trajectories: Vec<Vec<TrajectoryPoint>>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock per stage; kept out of the JSON so that reruns compare equal.
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn summary(&self, tag: Tag) -> Option<&TagSummary> {
        self.similarity.summary.get(&tag)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        canonical_json_pretty(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Trains the base model to convergence and stores it.
pub fn train_originals(exp: &Experiment, dir: &Path) -> Result<TrainLog> {
    let run = || -> Result<TrainLog> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let data = make_dataset(&cfg.dataset_spec())?;
        let mut model = Model::build(&cfg.model_spec()?, seeds.init)?;
        let val_accuracy = train_to_convergence(&mut model, &data, &cfg.train.resolve(seeds.train))?;
        let path = dir.join(BASE_MODEL_FILE);
        model.save(&path)?;
        let stored = Model::load(&path)?;
        let log = TrainLog {
            val_accuracy,
            base_accuracy: evaluate(&stored, &data, Split::Val)?.accuracy,
        };
        write_json(&dir.join(TRAIN_LOG_FILE), &log)?;
        Ok(log)
    };
    run().stage("train-originals")
}

/// Fine-tunes the stored base model and saves the per-step checkpoints.
pub fn harvest(exp: &Experiment, dir: &Path) -> Result<HarvestLog> {
    let run = || -> Result<HarvestLog> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let data = make_dataset(&cfg.dataset_spec())?;
        let mut model = Model::load(&dir.join(BASE_MODEL_FILE))?;
        let selector = ParamSelector::resolve(&cfg.selector, &model.params)?;
        let train = cfg.train.resolve(seeds.train);
        let h = finetune_and_harvest(&mut model, &data, &train, &selector)?;
        let log = HarvestLog {
            step_accuracy: h.step_accuracy.clone(),
        };
        let provenance = Provenance {
            train,
            init_seed: seeds.init,
        };
        save_corpus(&h.into_corpus(&model, &data, provenance)?, &dir.join(CORPUS_FILE))?;
        write_json(&dir.join(HARVEST_LOG_FILE), &log)?;
        Ok(log)
    };
    run().stage("harvest")
}

pub fn train_ae(exp: &Experiment, dir: &Path) -> Result<AutoencoderLog> {
    let run = || -> Result<AutoencoderLog> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
        let mut ae = Autoencoder::<NetScalar>::new(cfg.autoencoder.resolve(corpus.dim()), seeds.autoencoder_init)?;
        ae.set_output_bias(&weight_ensemble(&corpus.rows)?)?;
        let loss = train_autoencoder(&mut ae, &corpus.rows, seeds.autoencoder)?;
        let path = dir.join(AUTOENCODER_FILE);
        ae.save(&path)?;
        let stored = Autoencoder::<NetScalar>::load(&path)?;
        let log = AutoencoderLog {
            loss,
            reconstruction_mse: stored.reconstruction_mse(&corpus.rows)?,
        };
        write_json(&dir.join(AUTOENCODER_LOG_FILE), &log)?;
        Ok(log)
    };
    run().stage("train-ae")
}

fn encode_corpus(ae: &Autoencoder<NetScalar>, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    // Noise::Off never touches the rng
    ae.encode_batch(&refs, Noise::Off, &mut rng_from_seed(0))
}

fn decode_latents(ae: &Autoencoder<NetScalar>, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(64) {
        let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        out.extend(ae.decode_batch(&refs, Noise::Off, &mut rng_from_seed(0))?);
    }
    Ok(out)
}

pub fn train_diffusion(exp: &Experiment, dir: &Path) -> Result<DiffusionLog> {
    let run = || -> Result<DiffusionLog> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
        let ae = Autoencoder::<NetScalar>::load(&dir.join(AUTOENCODER_FILE))?;
        let latents = encode_corpus(&ae, &corpus.rows)?;
        let scaler = if cfg.diffusion.standardize_latents {
            LatentScaler::fit(&latents)?
        } else {
            LatentScaler::identity(ae.latent_dim()).bounded_by(&latents)
        };
        write_json(&dir.join(LATENT_SCALER_FILE), &scaler)?;
        let latents: Vec<Vec<f64>> = latents.iter().map(|z| scaler.apply(z)).collect();
        let schedule = cfg.diffusion.schedule()?;
        let mut den = Denoiser::<NetScalar>::new(cfg.diffusion.resolve(ae.latent_dim()), seeds.denoiser_init)?;
        let loss = train_denoiser(&mut den, &schedule, &latents, seeds.denoiser)?;
        den.save(&dir.join(DENOISER_FILE))?;
        let log = DiffusionLog { loss };
        write_json(&dir.join(DIFFUSION_LOG_FILE), &log)?;
        Ok(log)
    };
    run().stage("train-diffusion")
}

/// Samples `n_generated` latents, decodes them to parameter vectors, and
/// records the trajectory chains.
pub fn generate(exp: &Experiment, dir: &Path) -> Result<usize> {
    let run = || -> Result<usize> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let ae = Autoencoder::<NetScalar>::load(&dir.join(AUTOENCODER_FILE))?;
        let den = Denoiser::<NetScalar>::load(&dir.join(DENOISER_FILE))?;
        if den.config.latent_dim != ae.latent_dim() {
            return Err(Error::Format(format!(
                "denoiser latent width {} does not match the autoencoder's {}",
                den.config.latent_dim,
                ae.latent_dim()
            )));
        }
        let scaler: LatentScaler = read_json(&dir.join(LATENT_SCALER_FILE))?;
        if scaler.mean.len() != ae.latent_dim() || scaler.std.len() != ae.latent_dim() {
            return Err(Error::Format("latent scaler does not match the autoencoder".into()));
        }
        let schedule = cfg.diffusion.schedule()?;
        let ev = &cfg.eval;
        let clip = cfg.diffusion.clip_samples.then_some(scaler.bound);
        let opts = SampleOptions { snapshots: 0, clip };
        let samples = sample_many(&den, &schedule, ev.n_generated, seeds.sampling, opts, ev.sample_batch)?;
        let latents: Vec<Vec<f64>> = samples.into_iter().map(|s| scaler.invert(&s.latent)).collect();
        let vectors = decode_latents(&ae, &latents)?;
        let dim = ae.input_dim();
        let data: Vec<f32> = vectors.iter().flatten().map(|&v| v as f32).collect();
        let manifest = GeneratedManifest {
            rows: vectors.len(),
            dim,
            latent_dim: ae.latent_dim(),
            steps: schedule.steps,
        };
        container::write_file(&dir.join(GENERATED_FILE), GENERATED_TAG, &manifest, vectors.len(), dim, &data)?;

        let traj_seed = derive_seed(seeds.sampling, "trajectory");
        let chains = sample_many(
            &den,
            &schedule,
            ev.trajectory_samples,
            traj_seed,
            SampleOptions {
                snapshots: ev.trajectory_snapshots,
                clip,
            },
            ev.sample_batch,
        )?;
        let log = TrajectoryLog {
            chains: chains
                .into_iter()
                .map(|c| c.trajectory.into_iter().map(|(t, z)| (t, scaler.invert(&z))).collect())
                .collect(),
        };
        write_json(&dir.join(TRAJECTORY_FILE), &log)?;
        Ok(vectors.len())
    };
    run().stage("generate")
}

/// Reads generated parameter vectors (`[rows][dim]`).
pub fn load_generated(path: &Path) -> Result<Vec<Vec<f64>>> {
    let c = container::read_file::<GeneratedManifest>(path, GENERATED_TAG)?;
    if c.manifest.rows != c.rows || c.manifest.dim != c.cols {
        return Err(Error::Format("generated manifest disagrees with the data block".into()));
    }
    if c.cols == 0 {
        return Ok(vec![Vec::new(); c.rows]);
    }
    Ok(c.data.chunks(c.cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
}

fn artifact_paths(dir: &Path) -> BTreeMap<String, String> {
    let names = [
        ("config", CONFIG_FILE),
        ("base-model", BASE_MODEL_FILE),
        ("train-log", TRAIN_LOG_FILE),
        ("corpus", CORPUS_FILE),
        ("harvest-log", HARVEST_LOG_FILE),
        ("autoencoder", AUTOENCODER_FILE),
        ("autoencoder-log", AUTOENCODER_LOG_FILE),
        ("denoiser", DENOISER_FILE),
        ("diffusion-log", DIFFUSION_LOG_FILE),
        ("latent-scaler", LATENT_SCALER_FILE),
        ("generated", GENERATED_FILE),
        ("trajectories", TRAJECTORY_FILE),
        ("report", REPORT_FILE),
        ("scatter", SCATTER_FILE),
    ];
    names
        .iter()
        .filter(|(_, f)| matches!(*f, REPORT_FILE | SCATTER_FILE) || dir.join(f).exists())
        .map(|(k, f)| (k.to_string(), f.to_string()))
        .collect()
}

/// Scores originals, the weight ensemble, the noise baseline, generated
/// vectors and trajectories; writes the run report and its scatter CSV.
pub fn evaluate_run(exp: &Experiment, dir: &Path) -> Result<RunReport> {
    let run = || -> Result<RunReport> {
        snapshot(exp, dir)?;
        let cfg = &exp.config;
        let seeds = cfg.seeds();
        let data = make_dataset(&cfg.dataset_spec())?;
        let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
        let template = Model::load(&dir.join(BASE_MODEL_FILE))?;
        let selector = corpus.manifest.selector.clone();
        let ae = Autoencoder::<NetScalar>::load(&dir.join(AUTOENCODER_FILE))?;
        let generated = load_generated(&dir.join(GENERATED_FILE))?;
        let traj: TrajectoryLog = read_json(&dir.join(TRAJECTORY_FILE))?;
        let train: TrainLog = read_json(&dir.join(TRAIN_LOG_FILE))?;
        let harvest: HarvestLog = read_json(&dir.join(HARVEST_LOG_FILE))?;
        let ae_log: AutoencoderLog = read_json(&dir.join(AUTOENCODER_LOG_FILE))?;
        let diff_log: DiffusionLog = read_json(&dir.join(DIFFUSION_LOG_FILE))?;

        let mut records = Vec::new();
        for (k, row) in corpus.rows.iter().enumerate() {
            records.push(record_for(format!("orig-{k:04}"), Tag::Original, row, &template, &selector, &data)?);
        }
        let ens = weight_ensemble(&corpus.rows)?;
        records.push(record_for("ensemble".into(), Tag::Ensemble, &ens, &template, &selector, &data)?);
        let stats = corpus_stats(&corpus.rows)?;
        let pooled;
        let per_dim = match cfg.eval.noise_mode {
            NoiseScaleMode::Absolute => None,
            NoiseScaleMode::CorpusStd => Some(stats.std.as_slice()),
            NoiseScaleMode::CorpusGlobalStd => {
                pooled = vec![pooled_std(&corpus.rows)?; stats.std.len()];
                Some(pooled.as_slice())
            }
        };
        let mut rng = rng_from_seed(seeds.noise_baseline);
        records.extend(noise_baseline(
            &corpus.rows,
            &cfg.eval.noise_scales,
            cfg.eval.noise_draws,
            per_dim,
            &mut rng,
            &template,
            &selector,
            &data,
        )?);
        let mut failures = Vec::new();
        for (i, v) in generated.iter().enumerate() {
            let id = format!("gen-{i:04}");
            match record_for(id.clone(), Tag::Generated, v, &template, &selector, &data) {
                Ok(r) => records.push(r),
                Err(e) => failures.push(Failure {
                    id,
                    tag: Tag::Generated,
                    reason: e.to_string(),
                }),
            }
        }
        let similarity = SimilarityReport::build(records, failures)?;

        let mut trajectories = Vec::with_capacity(traj.chains.len());
        for chain in &traj.chains {
            let latents: Vec<Vec<f64>> = chain.iter().map(|(_, z)| z.clone()).collect();
            let decoded = decode_latents(&ae, &latents)?;
            let mut points = Vec::with_capacity(chain.len());
            for ((t, _), v) in chain.iter().zip(&decoded) {
                let accuracy = if v.iter().all(|x| x.is_finite()) {
                    let mut m = template.clone();
                    crate::corpus::unflatten(v, &mut m.params, &selector)?;
                    evaluate(&m, &data, Split::Val)?.accuracy
                } else {
                    0.0
                };
                points.push(TrajectoryPoint { t: *t, accuracy });
            }
            trajectories.push(points);
        }

        let report = RunReport {
            config: ConfigSnapshot {
                text: exp.source.clone(),
                sha256: exp.source_sha256(),
                seed_override: exp.seed_override,
            },
            seeds,
            base_accuracy: train.base_accuracy,
            train_accuracy: train.val_accuracy,
            corpus: CorpusSummary {
                rows: corpus.k(),
                dim: corpus.dim(),
                min: stats.min,
                max: stats.max,
                mean_std: stats.std.iter().sum::<f64>() / stats.std.len().max(1) as f64,
                harvest_accuracy: Spread::of(&harvest.step_accuracy),
            },
            autoencoder_loss: ae_log.loss,
            reconstruction_mse: ae_log.reconstruction_mse,
            diffusion_loss: diff_log.loss,
            similarity,
            trajectories,
            artifacts: artifact_paths(dir),
            timings: Vec::new(),
        };
        std::fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
        let f = std::fs::File::create(dir.join(SCATTER_FILE))?;
        report.similarity.write_csv(std::io::BufWriter::new(f))?;
        Ok(report)
    };
    run().stage("evaluate")
}

/// Runs every stage in order. A failing stage aborts the run and leaves the
/// artifacts of earlier stages in `dir`.
pub fn run_pipeline(exp: &Experiment, dir: &Path) -> Result<RunReport> {
    let mut timings = Vec::new();
    let mut timed = |stage: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let start = Instant::now();
        f()?;
        timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };
    timed("train-originals", &mut || train_originals(exp, dir).map(drop))?;
    timed("harvest", &mut || harvest(exp, dir).map(drop))?;
    timed("train-ae", &mut || train_ae(exp, dir).map(drop))?;
    timed("train-diffusion", &mut || train_diffusion(exp, dir).map(drop))?;
    timed("generate", &mut || generate(exp, dir).map(drop))?;
    let mut report = None;
    timed("evaluate", &mut || {
        report = Some(evaluate_run(exp, dir)?);
        Ok(())
    })?;
    let mut report = report.expect("evaluate stage ran");
    write_json(&dir.join(TIMINGS_FILE), &timings)?;
    report.timings = timings;
    Ok(report)
}

/// One CSV row per model across all reports, labelled with the run name.
pub fn emit_scatter<'a, W: Write>(w: W, reports: impl IntoIterator<Item = (&'a str, &'a RunReport)>) -> Result<usize> {
    let rows: Vec<ScatterRow> = reports
        .into_iter()
        .flat_map(|(run, r)| r.similarity.models.iter().map(move |m| ScatterRow::from_entry(m, Some(run))))
        .collect();
    let n = rows.len();
    write_scatter(w, rows)?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        let text = r#"
seed = 3
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
finetune_steps = 12
[autoencoder]
iterations = 20
batch_size = 8
channels = [4, 4]
[diffusion]
steps = 20
iterations = 20
batch_size = 8
channels = [4, 8]
time_dim = 8
[eval]
n_generated = 6
noise_draws = 2
trajectory_samples = 2
trajectory_snapshots = 3
"#;
        toml::from_str(text).unwrap()
    }

    #[test]
    fn tiny_pipeline_runs_and_reports() {
        let exp = Experiment::from_config(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&exp, dir.path()).unwrap();
        assert_eq!(r.corpus.rows, 12);
        let counts: usize = r.similarity.summary.values().map(|s| s.count).sum();
        assert_eq!(counts + r.similarity.failures.len(), 12 + 1 + 6 + 6);
        assert_eq!(r.trajectories.len(), 2);
        assert_eq!(r.trajectories[0].len(), 3);
        for f in r.artifacts.values() {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(), exp.source);
        assert_eq!(r.timings.len(), STAGES.len());
        let back = RunReport::load(&dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(back.similarity, r.similarity);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let exp = Experiment::from_config(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train_ae(&exp, dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("[train-ae]"), "{err}");
    }
}
