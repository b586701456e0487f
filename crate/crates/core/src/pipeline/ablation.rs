use super::config::{Experiment, ExperimentConfig};
use super::{emit_scatter, run_pipeline, write_json, RunReport};
use crate::corpus::SelectorSpec;
use crate::error::{Error, Result};
use crate::novelty::{Spread, Tag};
use crate::optim::OptimizerKind;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// The config field varied by an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    SigmaV,
    SigmaZ,
    /// `both`, `input`, `latent` or `none`.
    NoiseAug,
    Optimizer,
    /// Number of fine-tuning steps, i.e. corpus rows.
    K,
    Selector,
    FinetuneLr,
    Epochs,
    /// Diffusion steps.
    T,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::SigmaV,
        Axis::SigmaZ,
        Axis::NoiseAug,
        Axis::Optimizer,
        Axis::K,
        Axis::Selector,
        Axis::FinetuneLr,
        Axis::Epochs,
        Axis::T,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::SigmaV => "sigma-v",
            Axis::SigmaZ => "sigma-z",
            Axis::NoiseAug => "noise-aug",
            Axis::Optimizer => "optimizer",
            Axis::K => "k",
            Axis::Selector => "selector",
            Axis::FinetuneLr => "finetune-lr",
            Axis::Epochs => "epochs",
            Axis::T => "t",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("invalid value `{value}` for axis {self}"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let count = || value.parse::<usize>().map_err(|_| bad());
        let mut c = base.clone();
        match self {
            Axis::SigmaV => c.autoencoder.sigma_v = float()?,
            Axis::SigmaZ => c.autoencoder.sigma_z = float()?,
            Axis::NoiseAug => {
                let (v, z) = match value {
                    "both" => (true, true),
                    "input" => (true, false),
                    "latent" => (false, true),
                    "none" => (false, false),
                    _ => return Err(bad()),
                };
                if !v {
                    c.autoencoder.sigma_v = 0.0;
                }
                if !z {
                    c.autoencoder.sigma_z = 0.0;
                }
            }
            Axis::Optimizer => {
                c.train.optimizer = match value.to_ascii_lowercase().as_str() {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(bad()),
                }
            }
            Axis::K => c.train.finetune_steps = count()?,
            Axis::Selector => {
                c.selector = if value == "full" {
                    SelectorSpec::full()
                } else {
                    let names: Vec<&str> = value.split('+').collect();
                    SelectorSpec::layers(&names)
                }
            }
            Axis::FinetuneLr => c.train.finetune_lr = Some(float()?),
            Axis::Epochs => c.train.epochs = count()?,
            Axis::T => c.diffusion.steps = count()?,
        }
        c.validate().map_err(|e| Error::Config(format!("axis {self} = {value}: {e}")))?;
        Ok(c)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Axis::ALL.into_iter().find(|a| a.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub run_dir: String,
    pub original_mean: f64,
    pub original_best: f64,
    pub generated_count: usize,
    pub generated_mean: Option<f64>,
    pub generated_best: Option<f64>,
    pub failures: usize,
    /// Spread of the generated models' max-similarity.
    pub max_similarity: Option<Spread>,
}

impl AblationRow {
    fn of(value: &str, run_dir: &str, r: &RunReport) -> Self {
        let orig = r.summary(Tag::Original);
        let gen = r.summary(Tag::Generated);
        Self {
            value: value.to_string(),
            run_dir: run_dir.to_string(),
            original_mean: orig.map_or(f64::NAN, |s| s.mean_accuracy),
            original_best: orig.map_or(f64::NAN, |s| s.best_accuracy),
            generated_count: gen.map_or(0, |s| s.count),
            generated_mean: gen.map(|s| s.mean_accuracy),
            generated_best: gen.map(|s| s.best_accuracy),
            failures: r.similarity.failures.len(),
            max_similarity: gen.map(|s| s.max_similarity.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<RunReport>,
}

#[derive(Serialize)]
struct TableFile<'a> {
    axis: Axis,
    rows: &'a [AblationRow],
}

#[derive(Serialize)]
struct CsvRow<'a> {
    value: &'a str,
    original_mean: f64,
    original_best: f64,
    generated_mean: Option<f64>,
    generated_best: Option<f64>,
    max_sim_mean: Option<f64>,
    max_sim_min: Option<f64>,
    max_sim_q25: Option<f64>,
    max_sim_q75: Option<f64>,
    max_sim_max: Option<f64>,
    failures: usize,
}

fn dir_label(axis: Axis, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{axis}-{clean}")
}

/// Runs the base experiment once per value of `axis`, each in its own
/// subdirectory of `out`, using up to `jobs` worker threads. Writes
/// `ablation.json`, `ablation.csv` and a combined `scatter.csv` to `out`.
pub fn run_ablation(base: &Experiment, axis: Axis, values: &[String], out: &Path, jobs: usize) -> Result<AblationOutcome> {
    if values.is_empty() {
        return Err(Error::Config(format!("axis {axis} needs at least one value")));
    }
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let mut exp = Experiment::from_config(axis.apply(&base.config, v)?)?;
        exp.seed_override = base.seed_override;
        let label = dir_label(axis, v);
        if runs.iter().any(|(l, _, _): &(String, PathBuf, Experiment)| *l == label) {
            return Err(Error::Config(format!("duplicate value `{v}` for axis {axis}")));
        }
        runs.push((label.clone(), out.join(&label), exp));
    }
    std::fs::create_dir_all(out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, dir, exp)) = runs.get(i) else { break };
                let r = run_pipeline(exp, dir);
                results.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    let mut reports = Vec::with_capacity(runs.len());
    for r in results.into_inner().expect("workers joined") {
        reports.push(r.expect("every run was claimed")?);
    }

    let rows: Vec<AblationRow> = runs
        .iter()
        .zip(values)
        .zip(&reports)
        .map(|(((label, _, _), v), r)| AblationRow::of(v, label, r))
        .collect();
    write_json(&out.join("ablation.json"), &TableFile { axis, rows: &rows })?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &rows {
        let ms = r.max_similarity.as_ref();
        w.serialize(CsvRow {
            value: &r.value,
            original_mean: r.original_mean,
            original_best: r.original_best,
            generated_mean: r.generated_mean,
            generated_best: r.generated_best,
            max_sim_mean: ms.map(|s| s.mean),
            max_sim_min: ms.map(|s| s.min),
            max_sim_q25: ms.map(|s| s.q25),
            max_sim_q75: ms.map(|s| s.q75),
            max_sim_max: ms.map(|s| s.max),
            failures: r.failures,
        })?;
    }
    w.flush()?;
    let f = std::fs::File::create(out.join("scatter.csv"))?;
    emit_scatter(
        std::io::BufWriter::new(f),
        runs.iter().map(|(l, _, _)| l.as_str()).zip(&reports),
    )?;
    Ok(AblationOutcome { axis, rows, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_roundtrip() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert_eq!("finetune_lr".parse::<Axis>().unwrap(), Axis::FinetuneLr);
        assert!("learning-rate".parse::<Axis>().is_err());
    }

    #[test]
    fn apply_changes_only_the_axis() {
        let base = ExperimentConfig::default();
        let c = Axis::K.apply(&base, "10").unwrap();
        assert_eq!(c.train.finetune_steps, 10);
        assert_eq!(
            ExperimentConfig {
                train: base.train.clone(),
                ..c.clone()
            },
            base
        );
        let c = Axis::NoiseAug.apply(&base, "input").unwrap();
        assert_eq!((c.autoencoder.sigma_v, c.autoencoder.sigma_z), (1e-3, 0.0));
        let c = Axis::Selector.apply(&base, "linear2+linear3").unwrap();
        assert_eq!(c.selector.to_string(), "linear2+linear3");
        assert!(Axis::K.apply(&base, "many").is_err());
        assert!(Axis::NoiseAug.apply(&base, "some").is_err());
        assert!(Axis::T.apply(&base, "0").is_err());
    }

    #[test]
    fn tiny_k_ablation_table() {
        let base = Experiment::from_config(super::super::tests::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vals = vec!["4".to_string(), "8".to_string()];
        let out = run_ablation(&base, Axis::K, &vals, dir.path(), 2).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.reports[0].corpus.rows, 4);
        assert_eq!(out.reports[1].corpus.rows, 8);
        let rows = crate::novelty::read_scatter(std::fs::File::open(dir.path().join("scatter.csv")).unwrap()).unwrap();
        let total: usize = out.reports.iter().map(|r| r.similarity.models.len()).sum();
        assert_eq!(rows.len(), total);
        assert!(dir.path().join("ablation.csv").exists());
    }
}
