//! Frozen-feature probes: cosine KNN-1, a linear softmax classifier and
//! embedding spread as a collapse signal.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Phase, Tape, EPS_NORM};
use crate::data::Dataset;
use crate::encoder::{ParamSet, StageName};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit_rows(x: &Tensor) -> Result<(Vec<Vec<f64>>, usize)> {
    let (_, d) = x
        .dims2()
        .ok_or_else(|| Error::Contract("features must be a matrix".into()))?;
    let rows = x
        .iter_rows()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Ok((rows, d))
}

/// Nearest-neighbour accuracy under cosine similarity; ties go to the
/// lowest training index.
pub fn knn_eval(train: &Tensor, train_y: &[usize], test: &Tensor, test_y: &[usize]) -> Result<f64> {
    let (train_rows, d) = unit_rows(train)?;
    let (test_rows, d2) = unit_rows(test)?;
    if train_rows.is_empty() {
        return Err(Error::Contract(
            "knn_eval needs a non-empty train set".into(),
        ));
    }
    if d != d2 || train_rows.len() != train_y.len() || test_rows.len() != test_y.len() {
        return Err(Error::Contract(
            "knn_eval: features and labels disagree in shape".into(),
        ));
    }
    if test_rows.is_empty() {
        return Ok(0.0);
    }
    let correct = test_rows
        .iter()
        .zip(test_y)
        .filter(|(q, &label)| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, r) in train_rows.iter().enumerate() {
                let s: f64 = q.iter().zip(r).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, i);
                }
            }
            train_y[best.1] == label
        })
        .count();
    Ok(correct as f64 / test_rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "ProbeConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "ProbeConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "ProbeConfig::default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ProbeConfig {
    fn default_lr() -> f64 {
        0.1
    }
    fn default_epochs() -> usize {
        200
    }
    fn default_batch() -> usize {
        64
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: Self::default_lr(),
            epochs: Self::default_epochs(),
            batch: Self::default_batch(),
            seed: 0,
        }
    }
}

/// Per-column mean and std of `x`, std floored so constant columns map to 0.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims2().expect("matrix");
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for r in x.iter_rows() {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let std = std.into_iter().map(|s| s.sqrt().max(1e-8)).collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let (_, d) = x.dims2().expect("matrix");
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % d;
        *v = (*v - mean[j]) / std[j];
    }
    out
}

/// Train a linear softmax classifier on standardized `train` features with
/// minibatch SGD and report test accuracy. Inputs are plain tensors, so no
/// gradient can reach whatever produced them.
pub fn linear_probe(
    train: &Tensor,
    train_y: &[usize],
    test: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, d) = train
        .dims2()
        .ok_or_else(|| Error::Contract("features must be a matrix".into()))?;
    if n == 0 || n != train_y.len() || test.dims2() != Some((test_y.len(), d)) {
        return Err(Error::Contract(
            "linear_probe: features and labels disagree in shape".into(),
        ));
    }
    if cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("probe batch and lr must be positive".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(1, |m| m + 1);
    let (mean, std) = standardizer(train);
    let xs = standardize(train, &mean, &std);
    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = Tensor::zeros(&[classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            tape.clear();
            let x = tape.constant(xs.gather_rows(chunk))?;
            let mut onehot = Tensor::zeros(&[chunk.len(), classes]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * classes + train_y[i]] = 1.0;
            }
            let t = tape.constant(onehot)?;
            let wv = tape.leaf(w.clone(), true)?;
            let bv = tape.leaf(b.clone(), true)?;
            let h = tape.matmul(x, wv)?;
            let logits = tape.add_bias(h, bv)?;
            let ce = tape.soft_cross_entropy(logits, t)?;
            let loss = tape.mean(ce)?;
            let grads = tape.backward(loss)?;
            for (p, v) in [(&mut w, wv), (&mut b, bv)] {
                if let Some(g) = grads.get(v) {
                    for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *pi -= cfg.lr * gi;
                    }
                }
            }
        }
    }
    if test_y.is_empty() {
        return Ok(0.0);
    }
    let xt = standardize(test, &mean, &std);
    let correct = xt
        .iter_rows()
        .zip(test_y)
        .filter(|(r, &label)| {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let s = b.data()[c]
                    + r.iter()
                        .enumerate()
                        .map(|(j, v)| v * w.data()[j * classes + c])
                        .sum::<f64>();
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1 == label
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedStats {
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

/// Population std of each coordinate of the row-normalized batch.
pub fn embedding_stats(z: &Tensor) -> Result<EmbedStats> {
    let (rows, d) = unit_rows(z)?;
    let m = rows.len();
    if m < 2 {
        return Err(Error::Contract(
            "embedding_stats needs at least 2 rows".into(),
        ));
    }
    let per_dim: Vec<f64> = (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m as f64;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m as f64).sqrt()
        })
        .collect();
    let mean = per_dim.iter().sum::<f64>() / d.max(1) as f64;
    Ok(EmbedStats { per_dim, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub step: usize,
    pub knn1_acc: f64,
    pub linear_acc: f64,
    pub embed_std: f64,
    pub embed_std_per_dim: Vec<f64>,
}

/// Evaluate a snapshot: KNN-1 and the linear probe on eval-mode backbone
/// features, embedding spread on the test set's projector outputs.
pub fn probe_snapshot(
    params: &ParamSet,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    step: usize,
) -> Result<ProbeReport> {
    let tr = params.forward_stages(&train.x, Phase::Eval)?;
    let te = params.forward_stages(&test.x, Phase::Eval)?;
    let feats = |o: &crate::encoder::StageOutputs, s| {
        o.get(s)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("snapshot lacks stage {s}")))
    };
    let (ftr, fte) = (
        feats(&tr, StageName::Block4)?,
        feats(&te, StageName::Block4)?,
    );
    let knn1_acc = knn_eval(&ftr, &train.y, &fte, &test.y)?;
    let linear_acc = linear_probe(&ftr, &train.y, &fte, &test.y, cfg)?;
    let stats = embedding_stats(&feats(&te, StageName::Projector)?)?;
    Ok(ProbeReport {
        step,
        knn1_acc,
        linear_acc,
        embed_std: stats.mean,
        embed_std_per_dim: stats.per_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_point_takes_its_label() {
        let train = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]);
        let test = Tensor::from_rows(&[[0.0, 1.0]]);
        assert_eq!(knn_eval(&train, &[0, 1, 2], &test, &[1]).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let train = Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0]]);
        let test = Tensor::from_rows(&[[3.0, 0.0]]);
        assert_eq!(knn_eval(&train, &[4, 5], &test, &[4]).unwrap(), 1.0);
    }

    #[test]
    fn single_class_train_set_scores_class_frequency() {
        let train = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let test = Tensor::from_rows(&[[1.0, 1.0], [1.0, -1.0], [0.2, 0.4], [3.0, 1.0]]);
        assert_eq!(
            knn_eval(&train, &[2, 2], &test, &[2, 0, 1, 2]).unwrap(),
            0.5
        );
    }

    #[test]
    fn empty_train_set_is_contract_error() {
        let empty = Tensor::zeros(&[0, 2]);
        let test = Tensor::from_rows(&[[1.0, 1.0]]);
        assert!(matches!(
            knn_eval(&empty, &[], &test, &[0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn knn_is_scale_invariant() {
        let d = gen_blobs(4, 6, 10, 0.4, 3).unwrap();
        let (tr, te) = d.train_test_split(1);
        let a = knn_eval(&tr.x, &tr.y, &te.x, &te.y).unwrap();
        let b = knn_eval(
            &tr.x.map(|v| v * 7.5),
            &tr.y,
            &te.x.map(|v| v * 0.01),
            &te.y,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn raw_blobs_are_nearly_perfect_for_knn() {
        let d = gen_blobs(8, 32, 64, 0.05, 0).unwrap();
        let (tr, te) = d.train_test_split(0);
        assert!(knn_eval(&tr.x, &tr.y, &te.x, &te.y).unwrap() >= 0.99);
        let d = gen_blobs(8, 32, 64, 0.1, 0).unwrap();
        let (tr, te) = d.train_test_split(0);
        assert!(knn_eval(&tr.x, &tr.y, &te.x, &te.y).unwrap() >= 0.99);
    }

    #[test]
    fn separable_two_class_probe_is_perfect() {
        let d = gen_blobs(2, 4, 30, 0.05, 9).unwrap();
        let (tr, te) = d.train_test_split(2);
        let acc = linear_probe(&tr.x, &tr.y, &te.x, &te.y, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_features_fall_back_to_majority() {
        let train = Tensor::filled(&[10, 3], 0.7);
        let y = vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 2];
        let test = Tensor::filled(&[4, 3], 0.7);
        let acc = linear_probe(&train, &y, &test, &[1, 1, 1, 0], &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn raw_blob_probe_is_accurate() {
        let d = gen_blobs(8, 32, 64, 0.1, 4).unwrap();
        let (tr, te) = d.train_test_split(4);
        let acc = linear_probe(&tr.x, &tr.y, &te.x, &te.y, &ProbeConfig::default()).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn identical_rows_have_zero_spread() {
        let z = Tensor::from_rows(&[[0.3, -1.0, 2.0]; 5]);
        let s = embedding_stats(&z).unwrap();
        assert!(s.per_dim.iter().all(|&v| v == 0.0) && s.mean == 0.0);
    }

    #[test]
    fn alternating_axis_rows() {
        let z = Tensor::from_rows(&[
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [-3.0, 0.0, 0.0],
        ]);
        let s = embedding_stats(&z).unwrap();
        assert_eq!(s.per_dim, vec![1.0, 0.0, 0.0]);
        assert!(embedding_stats(&Tensor::from_rows(&[[1.0, 2.0]])).is_err());
    }

    #[test]
    fn uniform_sphere_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..256 * 32)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let s = embedding_stats(&Tensor::new(vec![256, 32], data).unwrap()).unwrap();
        assert!((s.mean - 1.0 / 32f64.sqrt()).abs() < 0.01, "{}", s.mean);
    }
}
