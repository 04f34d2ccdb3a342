//! Self-supervised loss families: negative cosine (with predictor), InfoNCE
//! with an optional feature queue, and teacher-student soft cross-entropy
//! with optional centering.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, EPS_NORM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_tau() -> f64 {
    0.2
}
fn default_student_temp() -> f64 {
    0.1
}
fn default_teacher_temp() -> f64 {
    0.04
}
fn default_center_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// Symmetric negative cosine between predictions and target projections.
    NegCosine,
    InfoNce {
        #[serde(default = "default_tau")]
        temperature: f64,
        /// 0 keeps only in-batch negatives.
        #[serde(default)]
        queue_size: usize,
    },
    SoftCe {
        #[serde(default = "default_student_temp")]
        student_temp: f64,
        #[serde(default = "default_teacher_temp")]
        teacher_temp: f64,
        #[serde(default = "default_center_momentum")]
        center_momentum: f64,
        #[serde(default = "default_true")]
        centering: bool,
    },
}

impl ObjectiveSpec {
    pub fn infonce() -> Self {
        ObjectiveSpec::InfoNce {
            temperature: default_tau(),
            queue_size: 0,
        }
    }

    pub fn softce(centering: bool) -> Self {
        ObjectiveSpec::SoftCe {
            student_temp: default_student_temp(),
            teacher_temp: default_teacher_temp(),
            center_momentum: default_center_momentum(),
            centering,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::NegCosine => "negcosine",
            ObjectiveSpec::InfoNce { .. } => "infonce",
            ObjectiveSpec::SoftCe { .. } => "softce",
        }
    }

    pub fn needs_predictor(&self) -> bool {
        matches!(self, ObjectiveSpec::NegCosine)
    }

    /// Check temperatures and that the predictor presence fits the objective.
    pub fn validate(&self, has_predictor: bool) -> Result<()> {
        match *self {
            ObjectiveSpec::NegCosine => {}
            ObjectiveSpec::InfoNce { temperature, .. } => check_temperature(temperature)?,
            ObjectiveSpec::SoftCe {
                student_temp,
                teacher_temp,
                center_momentum,
                ..
            } => {
                check_temperature(student_temp)?;
                check_temperature(teacher_temp)?;
                if !(0.0..=1.0).contains(&center_momentum) {
                    return Err(Error::Config(format!(
                        "center_momentum out of range [0,1]: {center_momentum}"
                    )));
                }
            }
        }
        match (self.needs_predictor(), has_predictor) {
            (true, false) => Err(Error::Config(format!(
                "objective {} needs a predictor stage",
                self.name()
            ))),
            (false, true) => Err(Error::Config(format!(
                "objective {} does not use a predictor stage",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn ensure_detached(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.requires_grad(v) {
        Err(Error::Contract(format!("{what} must be gradient-detached")))
    } else {
        Ok(())
    }
}

fn ensure_batch(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.value(v).dims2() {
        Some((0, _)) => Err(Error::Contract("empty batch".into())),
        Some(d) => Ok(d),
        None => Err(Error::Dimension {
            primitive: "loss",
            detail: format!("expected [batch, dim], got {:?}", tape.value(v).shape()),
        }),
    }
}

/// `-(mean_i cos(p1_i, z2m_i) + mean_i cos(p2_i, z1m_i)) / 2`.
pub fn loss_negcos(tape: &mut Tape, p1: Var, p2: Var, z1m: Var, z2m: Var) -> Result<Var> {
    let dims = ensure_batch(tape, p1)?;
    for v in [p2, z1m, z2m] {
        if ensure_batch(tape, v)? != dims {
            return Err(Error::Dimension {
                primitive: "loss_negcos",
                detail: "all four inputs must share one shape".into(),
            });
        }
    }
    ensure_detached(tape, z1m, "z1m")?;
    ensure_detached(tape, z2m, "z2m")?;
    let c1 = tape.neg_cosine_rowwise(p1, z2m)?;
    let c2 = tape.neg_cosine_rowwise(p2, z1m)?;
    let m1 = tape.mean(c1)?;
    let m2 = tape.mean(c2)?;
    let total = tape.add(m1, m2)?;
    tape.scale(total, 0.5)
}

/// Fixed-capacity FIFO of unit-norm feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        FeatureQueue {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.as_slice())
    }

    /// Normalize and append each row of `z`, evicting the oldest rows.
    pub fn push(&mut self, z: &Tensor) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        let (m, d) = z.dims2().ok_or_else(|| Error::Dimension {
            primitive: "queue_push",
            detail: format!("expected [batch, dim], got {:?}", z.shape()),
        })?;
        if let Some(first) = self.rows.front() {
            if first.len() != d {
                return Err(Error::Dimension {
                    primitive: "queue_push",
                    detail: format!("row width {d} vs queued {}", first.len()),
                });
            }
        }
        for i in 0..m {
            let row = z.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
            self.rows.push_back(row.iter().map(|v| v / norm).collect());
            if self.rows.len() > self.capacity {
                self.rows.pop_front();
            }
        }
        Ok(())
    }

    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.rows.is_empty() {
            return None;
        }
        let rows: Vec<&[f64]> = self.rows().collect();
        Some(Tensor::from_rows(&rows))
    }
}

/// InfoNCE of anchors `z` against keys `zm` (positives on the diagonal),
/// with queued rows as extra negatives.
pub fn loss_infonce(
    tape: &mut Tape,
    z: Var,
    zm: Var,
    queue: &FeatureQueue,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let (b, d) = ensure_batch(tape, z)?;
    if ensure_batch(tape, zm)? != (b, d) {
        return Err(Error::Dimension {
            primitive: "loss_infonce",
            detail: "anchors and keys must share one shape".into(),
        });
    }
    ensure_detached(tape, zm, "zm")?;
    let anchors = tape.l2_normalize(z)?;
    let keys = tape.l2_normalize(zm)?;
    let keys = match queue.as_tensor() {
        Some(q) => {
            if q.dims2().map(|(_, c)| c) != Some(d) {
                return Err(Error::Dimension {
                    primitive: "loss_infonce",
                    detail: "queue width differs from feature width".into(),
                });
            }
            let qv = tape.constant(q)?;
            tape.concat_rows(&[keys, qv])?
        }
        None => keys,
    };
    let n_keys = tape.value(keys).rows();
    let keys_t = tape.transpose(keys)?;
    let sims = tape.matmul(anchors, keys_t)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let mut onehot = Tensor::zeros(&[b, n_keys]);
    for i in 0..b {
        onehot.data_mut()[i * n_keys + i] = 1.0;
    }
    let labels = tape.constant(onehot)?;
    let ce = tape.soft_cross_entropy(logits, labels)?;
    tape.mean(ce)
}

/// Running center of teacher outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn new(dim: usize, momentum: f64) -> Self {
        CenterState {
            center: vec![0.0; dim],
            momentum,
        }
    }

    /// `c <- m*c + (1-m)*mean(rows of z_t)`.
    pub fn update(&mut self, zt: &Tensor) -> Result<()> {
        let (m, d) = zt.dims2().ok_or_else(|| Error::Dimension {
            primitive: "center_update",
            detail: format!("expected [batch, dim], got {:?}", zt.shape()),
        })?;
        if d != self.center.len() {
            return Err(Error::Dimension {
                primitive: "center_update",
                detail: format!("width {d} vs center {}", self.center.len()),
            });
        }
        if m == 0 {
            return Ok(());
        }
        let mut mean = vec![0.0; d];
        for i in 0..m {
            for (acc, v) in mean.iter_mut().zip(zt.row(i)) {
                *acc += v;
            }
        }
        for (c, s) in self.center.iter_mut().zip(mean) {
            *c = self.momentum * *c + (1.0 - self.momentum) * (s / m as f64);
        }
        Ok(())
    }
}

/// Cross-entropy of the student `log softmax(z_s / t_s)` against the teacher
/// distribution `softmax((z_t - c) / t_t)`, averaged over the batch.
pub fn loss_softce(
    tape: &mut Tape,
    zs: Var,
    zt: Var,
    student_temp: f64,
    teacher_temp: f64,
    center: Option<&CenterState>,
) -> Result<Var> {
    check_temperature(student_temp)?;
    check_temperature(teacher_temp)?;
    let (b, k) = ensure_batch(tape, zs)?;
    if ensure_batch(tape, zt)? != (b, k) {
        return Err(Error::Dimension {
            primitive: "loss_softce",
            detail: "student and teacher must share one shape".into(),
        });
    }
    ensure_detached(tape, zt, "teacher output")?;
    let centered = match center {
        Some(c) => {
            if c.center.len() != k {
                return Err(Error::Dimension {
                    primitive: "loss_softce",
                    detail: format!("center width {} vs {k}", c.center.len()),
                });
            }
            let neg = tape.constant(Tensor::vector(c.center.iter().map(|v| -v).collect()))?;
            tape.add_bias(zt, neg)?
        }
        None => zt,
    };
    let t_logits = tape.scale(centered, 1.0 / teacher_temp)?;
    let teacher = tape.softmax(t_logits)?;
    let s_logits = tape.scale(zs, 1.0 / student_temp)?;
    let ce = tape.soft_cross_entropy(s_logits, teacher)?;
    tape.mean(ce)
}
