use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, NoiseSource, Rng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Isotropic Gaussian classes whose means sit on a random regular simplex
    /// with pairwise distance `separation`.
    GaussianBlobs {
        dim: usize,
        separation: f64,
        noise_std: f64,
    },
    /// `channels x height x width` images: a per-class random template plus
    /// additive pixel noise.
    TinyImages {
        channels: usize,
        height: usize,
        width: usize,
        noise_std: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub n_classes: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.5
}

impl DatasetSpec {
    pub fn blobs(n_samples: usize, n_classes: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs {
                dim,
                separation,
                noise_std: 1.0,
            },
            n_samples,
            n_classes,
            val_fraction: 0.5,
            seed,
        }
    }

    pub fn tiny_images(n_samples: usize, n_classes: usize, chw: [usize; 3], noise_std: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::TinyImages {
                channels: chw[0],
                height: chw[1],
                width: chw[2],
                noise_std,
            },
            n_samples,
            n_classes,
            val_fraction: 0.5,
            seed,
        }
    }

    /// Shape of one sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::GaussianBlobs { dim, .. } => vec![dim],
            DatasetKind::TinyImages {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("dataset: {m}")));
        if self.n_classes == 0 {
            return bad("n_classes must be at least 1".into());
        }
        if self.n_samples < self.n_classes {
            return bad(format!("{} samples for {} classes", self.n_samples, self.n_classes));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        let (n_train, n_val) = self.split_sizes();
        if n_train == 0 || n_val == 0 {
            return bad("both splits must be non-empty".into());
        }
        if self.input_shape().iter().any(|&d| d == 0) {
            return bad(format!("zero input extent in {:?}", self.input_shape()));
        }
        let noise = match self.kind {
            DatasetKind::GaussianBlobs { noise_std, separation, .. } => {
                if !(separation >= 0.0) {
                    return bad(format!("separation {separation}"));
                }
                noise_std
            }
            DatasetKind::TinyImages { noise_std, .. } => noise_std,
        };
        if !(noise >= 0.0) {
            return bad(format!("noise_std {noise}"));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let n_val = (self.n_samples as f64 * self.val_fraction).round() as usize;
        (self.n_samples - n_val.min(self.n_samples), n_val.min(self.n_samples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Inputs are stored flat, one row of `input_shape.product()` values per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub input_shape: Vec<usize>,
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Vec<f64>,
    pub val_y: Vec<usize>,
}

impl SyntheticDataset {
    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn len(&self, split: Split) -> usize {
        self.labels(split).len()
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_y,
            Split::Val => &self.val_y,
        }
    }

    fn inputs(&self, split: Split) -> &[f64] {
        match split {
            Split::Train => &self.train_x,
            Split::Val => &self.val_x,
        }
    }

    /// Gathers the given samples into a `[B, ...input_shape]` tensor.
    pub fn batch(&self, split: Split, idx: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        let n = self.sample_len();
        let xs = self.inputs(split);
        let ys = self.labels(split);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.input_shape);
        let labels = idx.iter().map(|&i| ys[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    pub fn full(&self, split: Split) -> (Tensor<f64>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len(split)).collect();
        self.batch(split, &idx)
    }
}

/// Builds a reproducible synthetic dataset. Labels cycle through the classes
/// before shuffling, so each split is balanced to within one sample.
pub fn make_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let input_shape = spec.input_shape();
    let sample_len: usize = input_shape.iter().product();
    let (n_train, n_val) = spec.split_sizes();

    let (centres, noise_std) = match spec.kind {
        DatasetKind::GaussianBlobs {
            dim,
            separation,
            noise_std,
        } => (simplex_means(spec.n_classes, dim, separation, &mut rng), noise_std),
        DatasetKind::TinyImages { noise_std, .. } => {
            let templates = (0..spec.n_classes).map(|_| rng.normal_vec(sample_len)).collect();
            (templates, noise_std)
        }
    };

    let draw = |n: usize, rng: &mut Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(rng);
        let mut xs = Vec::with_capacity(n * sample_len);
        for &y in &labels {
            for &c in &centres[y] {
                xs.push(c + noise_std * rng.standard_normal());
            }
        }
        (xs, labels)
    };
    let (train_x, train_y) = draw(n_train, &mut rng);
    let (val_x, val_y) = draw(n_val, &mut rng);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        input_shape,
        train_x,
        train_y,
        val_x,
        val_y,
    })
}

/// Vertices of a randomly rotated regular simplex with edge `separation`.
fn simplex_means(n_classes: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut v: Vec<f64> = rng.normal_vec(dim);
        if basis.len() < dim {
            // Gram-Schmidt against the directions so far
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * radius).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = DatasetSpec::blobs(400, 4, 16, 3.0, 7);
        let a = make_dataset(&spec).unwrap();
        let b = make_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&DatasetSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.train_x, c.train_x);
    }

    #[test]
    fn balanced_labels_and_disjoint_splits() {
        let spec = DatasetSpec::blobs(403, 4, 5, 3.0, 1);
        let d = make_dataset(&spec).unwrap();
        for split in [Split::Train, Split::Val] {
            let mut counts = [0usize; 4];
            d.labels(split).iter().for_each(|&y| counts[y] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        assert_eq!(d.len(Split::Train) + d.len(Split::Val), 403);
        // continuous draws: no validation row repeats a training row
        let n = d.sample_len();
        for v in d.val_x.chunks(n) {
            assert!(d.train_x.chunks(n).all(|t| t != v));
        }
    }

    #[test]
    fn simplex_is_equilateral() {
        let mut rng = rng_from_seed(3);
        let m = simplex_means(4, 16, 5.0, &mut rng);
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 5.0).abs() < 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn single_class_is_all_zero_labels() {
        let d = make_dataset(&DatasetSpec::blobs(10, 1, 3, 1.0, 0)).unwrap();
        assert!(d.train_y.iter().chain(&d.val_y).all(|&y| y == 0));
    }

    #[test]
    fn rejects_invalid_dims() {
        assert!(make_dataset(&DatasetSpec::blobs(3, 4, 3, 1.0, 0)).is_err());
        assert!(make_dataset(&DatasetSpec::blobs(10, 2, 0, 1.0, 0)).is_err());
        assert!(make_dataset(&DatasetSpec::tiny_images(20, 2, [3, 0, 8], 1.0, 0)).is_err());
        let img = make_dataset(&DatasetSpec::tiny_images(20, 2, [3, 4, 4], 1.0, 0)).unwrap();
        let (x, y) = img.full(Split::Val);
        assert_eq!(x.shape(), &[10, 3, 4, 4]);
        assert_eq!(y.len(), 10);
    }
}
