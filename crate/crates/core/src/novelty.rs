//! Behavioural similarity between models: IoU of wrong-prediction sets,
//! maximum similarity against the originals, and the two baselines
//! (noise-added originals and the weight ensemble).

use crate::corpus::{unflatten, ParamSelector};
use crate::error::{Error, Result};
use crate::rng::{NoiseSource, Rng};
use crate::tasks::{evaluate, Model, Split, SyntheticDataset};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    Original,
    Generated,
    NoiseAdded,
    Ensemble,
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Generated => "generated",
            Self::NoiseAdded => "noise-added",
            Self::Ensemble => "ensemble",
        })
    }
}

/// Accuracy and misclassified validation indices of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub tag: Tag,
    pub accuracy: f64,
    /// Sorted, unique indices into the validation split.
    pub wrong: Vec<usize>,
    pub n_val: usize,
    /// Fingerprint of the validation labels the record was computed on.
    pub split: String,
    /// Noise scale for noise-added records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// Short hash of the validation labels, used to refuse cross-split comparisons.
pub fn split_fingerprint(data: &SyntheticDataset) -> String {
    let mut h = Sha256::new();
    for &y in data.labels(Split::Val) {
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Injects `vector` into a copy of `template` and evaluates it on the
/// validation split.
pub fn record_for(
    id: String,
    tag: Tag,
    vector: &[f64],
    template: &Model<f64>,
    selector: &ParamSelector,
    data: &SyntheticDataset,
) -> Result<PredictionRecord> {
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{id}: non-finite parameters")));
    }
    let mut model = template.clone();
    unflatten(vector, &mut model.params, selector)?;
    let e = evaluate(&model, data, Split::Val)?;
    Ok(PredictionRecord {
        id,
        tag,
        accuracy: e.accuracy,
        wrong: e.wrong,
        n_val: data.len(Split::Val),
        split: split_fingerprint(data),
        scale: None,
    })
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|A ∩ B| / |A ∪ B|` of the wrong sets; 1 if both are empty, 0 if exactly one is.
pub fn iou_similarity(a: &PredictionRecord, b: &PredictionRecord) -> Result<f64> {
    if a.split != b.split || a.n_val != b.n_val {
        return Err(Error::InvalidArgument(format!(
            "{} and {} were evaluated on different validation splits",
            a.id, b.id
        )));
    }
    Ok(iou_sets(&a.wrong, &b.wrong))
}

fn iou_sets(a: &[usize], b: &[usize]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let inter = sorted_intersection(a, b);
            inter as f64 / (a.len() + b.len() - inter) as f64
        }
    }
}

/// Largest IoU between `target` and the originals, skipping the original
/// that shares the target's id.
pub fn max_similarity(target: &PredictionRecord, originals: &[PredictionRecord]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for o in originals.iter().filter(|o| o.id != target.id) {
        let s = iou_similarity(target, o)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    best.ok_or_else(|| Error::InvalidArgument(format!("no original to compare {} against", target.id)))
}

/// Coordinate-wise mean of the rows.
pub fn weight_ensemble(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of an empty corpus".into()))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::Shape {
                op: "weight_ensemble",
                detail: format!("rows of length {} and {}", mean.len(), r.len()),
            });
        }
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let k = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// How noise-baseline scales are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScaleMode {
    /// Scales are standard deviations.
    #[default]
    Absolute,
    /// Scales multiply each coordinate's corpus standard deviation.
    CorpusStd,
    /// Scales multiply the standard deviation of all corpus entries pooled.
    CorpusGlobalStd,
}

/// Standard deviation of every entry of `rows` taken as one sample.
pub fn pooled_std(rows: &[Vec<f64>]) -> Result<f64> {
    let n: usize = rows.iter().map(Vec::len).sum();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pooled std needs at least 2 entries, got {n}")));
    }
    let mean = rows.iter().flatten().sum::<f64>() / n as f64;
    let ss: f64 = rows.iter().flatten().map(|x| (x - mean).powi(2)).sum();
    Ok((ss / (n - 1) as f64).sqrt())
}

/// Perturbed copy `v + scale * s_i * N(0, 1)` where `s_i` is 1 or the
/// per-coordinate std.
pub fn perturb(v: &[f64], scale: f64, per_dim: Option<&[f64]>, rng: &mut impl NoiseSource) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scale * per_dim.map_or(1.0, |d| d[i]);
            if s == 0.0 {
                x
            } else {
                x + s * rng.standard_normal()
            }
        })
        .collect()
}

/// Noise-added baseline: for every scale, `draws` perturbations of a
/// randomly chosen original row, each evaluated as its own model.
#[allow(clippy::too_many_arguments)]
pub fn noise_baseline(
    originals: &[Vec<f64>],
    scales: &[f64],
    draws: usize,
    per_dim: Option<&[f64]>,
    rng: &mut Rng,
    template: &Model<f64>,
    selector: &ParamSelector,
    data: &SyntheticDataset,
) -> Result<Vec<PredictionRecord>> {
    if originals.is_empty() {
        return Err(Error::InvalidArgument("noise baseline needs at least one original".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("noise scale {s} must be non-negative")));
    }
    let mut out = Vec::with_capacity(scales.len() * draws);
    for (si, &scale) in scales.iter().enumerate() {
        for k in 0..draws {
            let src = rng.random_range(0..originals.len());
            let v = perturb(&originals[src], scale, per_dim, rng);
            let mut r = record_for(format!("noise-{si}-{k:03}"), Tag::NoiseAdded, &v, template, selector, data)?;
            r.scale = Some(scale);
            out.push(r);
        }
    }
    Ok(out)
}

/// Distribution summary of a set of values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagSummary {
    pub count: usize,
    pub best_accuracy: f64,
    pub mean_accuracy: f64,
    pub accuracy: Spread,
    pub max_similarity: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub tag: Tag,
    pub accuracy: f64,
    pub max_similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// A vector that could not be evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub tag: Tag,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub records: Vec<PredictionRecord>,
    pub models: Vec<ModelEntry>,
    /// `iou_vs_originals[i][j]` = IoU of model `i` with original `j`.
    pub iou_vs_originals: Vec<Vec<f64>>,
    pub summary: BTreeMap<Tag, TagSummary>,
    pub failures: Vec<Failure>,
}

impl SimilarityReport {
    /// Assembles the report; `records` must contain at least two originals
    /// when any originals are present (self-exclusion needs a second one).
    pub fn build(records: Vec<PredictionRecord>, failures: Vec<Failure>) -> Result<Self> {
        let originals: Vec<PredictionRecord> = records.iter().filter(|r| r.tag == Tag::Original).cloned().collect();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate model id {}", dup.id)));
        }
        let mut models = Vec::with_capacity(records.len());
        let mut block = Vec::with_capacity(records.len());
        for r in &records {
            let row = originals.iter().map(|o| iou_similarity(r, o)).collect::<Result<Vec<f64>>>()?;
            let ms = max_similarity(r, &originals)?;
            models.push(ModelEntry {
                id: r.id.clone(),
                tag: r.tag,
                accuracy: r.accuracy,
                max_similarity: ms,
                scale: r.scale,
            });
            block.push(row);
        }
        let mut summary = BTreeMap::new();
        for tag in [Tag::Original, Tag::Generated, Tag::NoiseAdded, Tag::Ensemble] {
            let acc: Vec<f64> = models.iter().filter(|m| m.tag == tag).map(|m| m.accuracy).collect();
            let sim: Vec<f64> = models.iter().filter(|m| m.tag == tag).map(|m| m.max_similarity).collect();
            if let (Some(a), Some(s)) = (Spread::of(&acc), Spread::of(&sim)) {
                summary.insert(
                    tag,
                    TagSummary {
                        count: acc.len(),
                        best_accuracy: a.max,
                        mean_accuracy: a.mean,
                        accuracy: a,
                        max_similarity: s,
                    },
                );
            }
        }
        Ok(Self {
            records,
            models,
            iou_vs_originals: block,
            summary,
            failures,
        })
    }

    pub fn entries(&self, tag: Tag) -> impl Iterator<Item = &ModelEntry> {
        self.models.iter().filter(move |m| m.tag == tag)
    }

    /// Full symmetric IoU matrix over every model in the report.
    pub fn pairwise_iou(&self) -> Vec<Vec<f64>> {
        let n = self.records.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let s = iou_sets(&self.records[i].wrong, &self.records[j].wrong);
                m[i][j] = s;
                m[j][i] = s;
            }
        }
        m
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        crate::container::canonical_json_pretty(self)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_scatter(w, self.models.iter().map(|m| ScatterRow::from_entry(m, None)))
    }
}

/// One scatter point; `run` names the report it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub run: String,
    pub id: String,
    pub tag: Tag,
    pub accuracy: f64,
    pub max_similarity: f64,
}

impl ScatterRow {
    pub fn from_entry(m: &ModelEntry, run: Option<&str>) -> Self {
        Self {
            run: run.unwrap_or("").to_string(),
            id: m.id.clone(),
            tag: m.tag,
            accuracy: m.accuracy,
            max_similarity: m.max_similarity,
        }
    }
}

pub fn write_scatter<W: Write>(w: W, rows: impl IntoIterator<Item = ScatterRow>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scatter<R: Read>(r: R) -> Result<Vec<ScatterRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, tag: Tag, wrong: &[usize]) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            tag,
            accuracy: 1.0 - wrong.len() as f64 / 10.0,
            wrong: wrong.to_vec(),
            n_val: 10,
            split: "s".into(),
            scale: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = rec("a", Tag::Original, &[1, 2, 3]);
        let b = rec("b", Tag::Original, &[2, 3, 4]);
        assert_eq!(iou_similarity(&a, &b).unwrap(), 0.5);
        assert_eq!(iou_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_similarity(&a, &rec("c", Tag::Generated, &[7, 8])).unwrap(), 0.0);
        let e = rec("e", Tag::Original, &[]);
        assert_eq!(iou_similarity(&e, &rec("f", Tag::Original, &[])).unwrap(), 1.0);
        assert_eq!(iou_similarity(&e, &a).unwrap(), 0.0);
        let mut other = b.clone();
        other.split = "t".into();
        assert!(iou_similarity(&a, &other).is_err());
    }

    #[test]
    fn max_similarity_excludes_self() {
        let a = rec("a", Tag::Original, &[1, 2]);
        let b = rec("b", Tag::Original, &[2, 3, 4, 5]);
        let originals = vec![a.clone(), b.clone()];
        assert_eq!(max_similarity(&a, &originals).unwrap(), iou_similarity(&a, &b).unwrap());
        let copy = rec("g", Tag::Generated, &[1, 2]);
        assert_eq!(max_similarity(&copy, &originals).unwrap(), 1.0);
        assert_eq!(max_similarity(&rec("h", Tag::Generated, &[9]), &originals).unwrap(), 0.0);
        assert!(max_similarity(&a, &[a.clone()]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(weight_ensemble(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(weight_ensemble(&vec![vec![0.5, -1.0]; 4]).unwrap(), vec![0.5, -1.0]);
        assert!(weight_ensemble(&[]).is_err());
    }

    #[test]
    fn spread_quantiles() {
        let s = Spread::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q25, s.median, s.q75, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
        assert!(Spread::of(&[]).is_none());
    }

    #[test]
    fn report_bookkeeping_and_csv() {
        let records = vec![
            rec("o0", Tag::Original, &[1, 2]),
            rec("o1", Tag::Original, &[2, 3]),
            rec("g0", Tag::Generated, &[1, 2]),
            rec("n0", Tag::NoiseAdded, &[5]),
            rec("e", Tag::Ensemble, &[2]),
        ];
        let r = SimilarityReport::build(records, vec![]).unwrap();
        assert_eq!(r.models.len(), 5);
        assert_eq!(r.iou_vs_originals.len(), 5);
        assert_eq!(r.summary[&Tag::Generated].max_similarity.mean, 1.0);
        assert_eq!(r.summary[&Tag::Original].max_similarity.mean, 1.0 / 3.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run,id,tag,accuracy,max_similarity\n"), "{text}");
        let back = read_scatter(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[3].tag, Tag::NoiseAdded);
        assert_eq!(back[2].accuracy, r.models[2].accuracy);
        assert!(SimilarityReport::build(vec![rec("x", Tag::Original, &[1]), rec("x", Tag::Original, &[1])], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn iou_properties(a in proptest::collection::btree_set(0usize..30, 0..12),
                          b in proptest::collection::btree_set(0usize..30, 0..12)) {
            let (va, vb): (Vec<usize>, Vec<usize>) = (a.iter().copied().collect(), b.iter().copied().collect());
            let (ra, rb) = (rec("a", Tag::Original, &va), rec("b", Tag::Generated, &vb));
            let s = iou_similarity(&ra, &rb).unwrap();
            prop_assert_eq!(s, iou_similarity(&rb, &ra).unwrap());
            prop_assert!((0.0..=1.0).contains(&s));
            if !va.is_empty() {
                prop_assert_eq!(iou_similarity(&ra, &ra).unwrap(), 1.0);
                prop_assert_eq!(s == 1.0, va == vb);
            }
        }

        #[test]
        fn ensemble_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..8), rot in 0usize..8) {
            let mut shuffled = rows.clone();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            let a = weight_ensemble(&rows).unwrap();
            let b = weight_ensemble(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
