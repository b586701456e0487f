//! Parameter subset selection, flattening, and checkpoint corpora.

use crate::container::{self, CORPUS_TAG};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tasks::{DatasetSpec, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    Subset,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamRef {
    pub layer: String,
    pub param: String,
}

/// Ordered list of parameters to flatten. Flattening concatenates the
/// selected tensors in this order, each in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSelector {
    pub mode: SelectorMode,
    pub entries: Vec<ParamRef>,
}

/// User-facing selector: every parameter, or the named layers in the given order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SelectorSpec {
    Full(FullTag),
    Layers(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullTag {
    Full,
}

impl SelectorSpec {
    pub fn full() -> Self {
        Self::Full(FullTag::Full)
    }

    pub fn layers<S: AsRef<str>>(names: &[S]) -> Self {
        Self::Layers(names.iter().map(|s| s.as_ref().to_string()).collect())
    }
}

impl std::fmt::Display for SelectorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full(_) => f.write_str("full"),
            Self::Layers(l) => f.write_str(&l.join("+")),
        }
    }
}

impl ParamSelector {
    /// Every parameter in storage order.
    pub fn full<T: Scalar>(params: &ParamSet<T>) -> Self {
        Self {
            mode: SelectorMode::Full,
            entries: params
                .iter()
                .map(|p| ParamRef {
                    layer: p.layer.clone(),
                    param: p.name.clone(),
                })
                .collect(),
        }
    }

    /// All parameters of the named layers, layer by layer in the given order.
    pub fn layers<T: Scalar, S: AsRef<str>>(params: &ParamSet<T>, names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty parameter selector".into()));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for name in names {
            let name = name.as_ref();
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!("layer `{name}` selected twice")));
            }
            let before = entries.len();
            entries.extend(params.iter().filter(|p| p.layer == name).map(|p| ParamRef {
                layer: p.layer.clone(),
                param: p.name.clone(),
            }));
            if entries.len() == before {
                return Err(Error::UnknownParameter(name.to_string()));
            }
        }
        let mode = if entries.len() == params.len() {
            SelectorMode::Full
        } else {
            SelectorMode::Subset
        };
        Ok(Self { mode, entries })
    }

    pub fn resolve<T: Scalar>(spec: &SelectorSpec, params: &ParamSet<T>) -> Result<Self> {
        match spec {
            SelectorSpec::Full(_) => Ok(Self::full(params)),
            SelectorSpec::Layers(names) => Self::layers(params, names),
        }
    }

    /// Indices into `params` in selector order.
    pub fn indices<T: Scalar>(&self, params: &ParamSet<T>) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("empty parameter selector".into()));
        }
        self.entries
            .iter()
            .map(|e| {
                params
                    .index_of(&e.layer, &e.param)
                    .ok_or_else(|| Error::UnknownParameter(format!("{}.{}", e.layer, e.param)))
            })
            .collect()
    }

    /// Flattened length when applied to `params`.
    pub fn dim<T: Scalar>(&self, params: &ParamSet<T>) -> Result<usize> {
        Ok(self.indices(params)?.iter().map(|&i| params.tensor(i).len()).sum())
    }

    /// Flattened length implied by a model spec, without building the model.
    pub fn dim_for_spec(&self, spec: &ModelSpec) -> Result<usize> {
        let table = spec.param_table();
        self.entries
            .iter()
            .map(|e| {
                table
                    .iter()
                    .find(|(l, p, _)| *l == e.layer && *p == e.param)
                    .map(|(_, _, s)| s.iter().product::<usize>())
                    .ok_or_else(|| Error::UnknownParameter(format!("{}.{}", e.layer, e.param)))
            })
            .sum()
    }
}

/// Flattened selected parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParamVector(pub Vec<f64>);

impl FlatParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn flatten<T: Scalar>(params: &ParamSet<T>, selector: &ParamSelector) -> Result<FlatParamVector> {
    let idx = selector.indices(params)?;
    let mut out = Vec::new();
    for i in idx {
        out.extend(params.tensor(i).data().iter().map(|v| v.as_f64()));
    }
    Ok(FlatParamVector(out))
}

/// Overwrites the selected parameters from `vector`; everything else is untouched.
pub fn unflatten<T: Scalar>(vector: &[f64], params: &mut ParamSet<T>, selector: &ParamSelector) -> Result<()> {
    let idx = selector.indices(params)?;
    let d: usize = idx.iter().map(|&i| params.tensor(i).len()).sum();
    if vector.len() != d {
        return Err(Error::Shape {
            op: "unflatten",
            detail: format!("vector of length {} for a selector of size {d}", vector.len()),
        });
    }
    let mut off = 0;
    for i in idx {
        let t = params.tensor_mut(i);
        let n = t.len();
        for (dst, &src) in t.data_mut().iter_mut().zip(&vector[off..off + n]) {
            *dst = T::of(src);
        }
        off += n;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train: TrainConfig,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub task: DatasetSpec,
    pub model: ModelSpec,
    pub selector: ParamSelector,
    pub provenance: Provenance,
    pub rows: usize,
    pub dim: usize,
    pub storage_precision: String,
    pub compute_precision: String,
    /// Unix seconds; left empty for reproducible artifacts.
    pub created: Option<u64>,
}

/// K flattened checkpoints of dimension d plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointCorpus {
    pub manifest: CorpusManifest,
    pub rows: Vec<Vec<f64>>,
}

impl CheckpointCorpus {
    pub fn new(manifest: CorpusManifest, rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = Self { manifest, rows };
        c.validate()?;
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.rows.is_empty() || m.rows != self.rows.len() {
            return Err(Error::Format(format!(
                "manifest lists {} rows, corpus has {}",
                m.rows,
                self.rows.len()
            )));
        }
        if let Some((k, r)) = self.rows.iter().enumerate().find(|(_, r)| r.len() != m.dim) {
            return Err(Error::Format(format!("row {k} has {} entries, manifest says d={}", r.len(), m.dim)));
        }
        let sel_dim = m.selector.dim_for_spec(&m.model)?;
        if sel_dim != m.dim {
            return Err(Error::Format(format!("selector covers {sel_dim} parameters, manifest says d={}", m.dim)));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("corpus contains non-finite entries".into()));
        }
        Ok(())
    }

    /// Copy whose rows are rounded to storage precision.
    pub fn quantized(&self) -> Self {
        Self {
            manifest: self.manifest.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f32 as f64).collect())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let data: Vec<f32> = self.rows.iter().flatten().map(|&v| v as f32).collect();
        container::encode(CORPUS_TAG, &self.manifest, self.k(), self.dim(), &data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode::<CorpusManifest>(bytes, CORPUS_TAG)?;
        if c.cols != c.manifest.dim || c.rows != c.manifest.rows {
            return Err(Error::Format(format!(
                "matrix is {}x{}, manifest says {}x{}",
                c.rows, c.cols, c.manifest.rows, c.manifest.dim
            )));
        }
        let rows = c
            .data
            .chunks(c.cols.max(1))
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        Self::new(c.manifest, rows)
    }
}

pub fn save_corpus(corpus: &CheckpointCorpus, path: &Path) -> Result<()> {
    let bytes = corpus.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CheckpointCorpus> {
    CheckpointCorpus::from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation (K - 1 denominator).
    pub std: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn corpus_stats(rows: &[Vec<f64>]) -> Result<CorpusStats> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standard deviation needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let k = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let std = var.into_iter().map(|s| (s / (k - 1.0)).sqrt()).collect();
    let (min, max) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(CorpusStats { mean, std, min, max })
}
