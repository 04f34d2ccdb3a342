//! Synthetic blob datasets, CSV ingestion and two-view augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Feature rows with integer class labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, split: Split) -> Result<Self> {
        let (n, _) = x
            .dims2()
            .ok_or_else(|| Error::Contract("dataset features must be a matrix".into()))?;
        if n == 0 {
            return Err(Error::Contract("dataset has no rows".into()));
        }
        if y.len() != n {
            return Err(Error::Contract(format!("{n} rows but {} labels", y.len())));
        }
        let classes = y.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            x,
            y,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dims2().map_or(0, |(_, d)| d)
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            x: self.x.gather_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Seeded 80/20 shuffle split.
    pub fn train_test_split(&self, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.len() * 4).div_ceil(5);
        let (train, test) = idx.split_at(n_train);
        (
            self.subset(train, Split::Train),
            self.subset(test, Split::Test),
        )
    }
}

/// `classes` Gaussian blobs around means drawn uniformly on the unit sphere.
pub fn gen_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "blobs need at least 2 classes and 2 dims, got {classes} and {dim}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config(
            "blobs need at least one point per class".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|a| a / norm).collect();
            }
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut y = Vec::with_capacity(classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spread * noise);
            }
            y.push(label);
        }
    }
    Dataset::new(
        Tensor::new(vec![classes * per_class, dim], data)?,
        y,
        Split::Full,
    )
}

/// Parse rows of `d` floats followed by an integer label.
///
/// A first row whose fields are not all numeric is taken as a header.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 0,
                detail: format!("{other:?}"),
            },
        })?;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let numeric = record.iter().all(|f| f.parse::<f64>().is_ok());
        if i == 0 && !numeric {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                detail: "need at least one feature and a label".into(),
            });
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::Parse {
                    line,
                    detail: format!("expected {} fields, found {}", w + 1, record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter().take(d) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                detail: format!("non-numeric feature '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("non-finite feature '{field}'"),
                });
            }
            data.push(v);
        }
        let label = &record[d];
        y.push(label.parse::<usize>().map_err(|_| Error::Parse {
            line,
            detail: format!("label '{label}' is not a non-negative integer"),
        })?);
    }
    let Some(d) = width else {
        return Err(Error::Parse {
            line: 0,
            detail: "no rows".into(),
        });
    };
    Dataset::new(Tensor::new(vec![y.len(), d], data)?, y, Split::Full)
}

/// Per-view augmentation: additive Gaussian noise, random zero-masking, and
/// a per-row uniform rescale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSpec {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            noise_std: 0.1,
            mask_prob: 0.1,
            scale_range: [0.8, 1.2],
        }
    }
}

impl AugSpec {
    pub fn identity() -> Self {
        AugSpec {
            noise_std: 0.0,
            mask_prob: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob out of range [0,1]: {}",
                self.mask_prob
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &Tensor, rng: &mut impl Rng) -> Tensor {
        let (m, d) = x.dims2().expect("views need a matrix");
        let noise = Normal::new(0.0, self.noise_std).expect("validated noise_std");
        let [lo, hi] = self.scale_range;
        let mut out = x.clone();
        for i in 0..m {
            let scale = if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            };
            for v in &mut out.data_mut()[i * d..(i + 1) * d] {
                if self.noise_std > 0.0 {
                    *v += noise.sample(rng);
                }
                if self.mask_prob > 0.0 && rng.random::<f64>() < self.mask_prob {
                    *v = 0.0;
                }
                *v *= scale;
            }
        }
        out
    }
}

/// Two independently augmented views of `x`.
pub fn make_views(x: &Tensor, aug: &AugSpec, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let x1 = aug.apply(x, rng);
    let x2 = aug.apply(x, rng);
    (x1, x2)
}
