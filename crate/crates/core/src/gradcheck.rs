//! Central-difference gradient checks for tape primitives and composed losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Phase, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::{loss_infonce, loss_negcos, loss_softce, CenterState, FeatureQueue};
use crate::tensor::Tensor;

/// Step used by the suite.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, 1e-8)`,
/// where `numeric` is the central difference of the scalar `chain(input)`.
pub fn grad_check<F>(input: &Tensor, h: f64, chain: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true)?;
    let out = chain(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t, false)?;
        let out = chain(&mut tape, x)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}

/// Result of one named check over many random instances.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn positive_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols]).map(|v| v.abs() + 0.05);
    for i in 0..rows {
        let s: f64 = t.row(i).iter().sum();
        t.data_mut()[i * cols..(i + 1) * cols]
            .iter_mut()
            .for_each(|v| *v /= s);
    }
    t
}

/// `sum(weights * out)`, making any output a scalar with O(1) gradients.
fn weigh(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Case = fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);

macro_rules! case {
    ($input:expr, |$tape:ident, $x:ident| $body:expr) => {{
        let input = $input;
        let chain: Box<dyn Fn(&mut Tape, Var) -> Result<Var>> = Box::new(move |$tape, $x| $body);
        (input, chain)
    }};
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul/lhs", |rng| {
            let b = uniform(rng, &[3, 2]);
            let w = uniform(rng, &[4, 2]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let bv = t.constant(b.clone())?;
                let y = t.matmul(x, bv)?;
                weigh(t, y, &w)
            })
        }),
        ("matmul/rhs", |rng| {
            let a = uniform(rng, &[4, 3]);
            let w = uniform(rng, &[4, 2]);
            case!(uniform(rng, &[3, 2]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.matmul(av, x)?;
                weigh(t, y, &w)
            })
        }),
        ("transpose", |rng| {
            let w = uniform(rng, &[3, 2]);
            case!(uniform(rng, &[2, 3]), |t, x| {
                let y = t.transpose(x)?;
                weigh(t, y, &w)
            })
        }),
        ("add_bias/input", |rng| {
            let b = uniform(rng, &[3]);
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let bv = t.constant(b.clone())?;
                let y = t.add_bias(x, bv)?;
                weigh(t, y, &w)
            })
        }),
        ("add_bias/bias", |rng| {
            let a = uniform(rng, &[4, 3]);
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[3]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.add_bias(av, x)?;
                weigh(t, y, &w)
            })
        }),
        ("add", |rng| {
            let a = uniform(rng, &[3, 3]);
            let w = uniform(rng, &[3, 3]);
            case!(uniform(rng, &[3, 3]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.add(x, av)?;
                weigh(t, y, &w)
            })
        }),
        ("mul", |rng| {
            let a = uniform(rng, &[3, 3]);
            let w = uniform(rng, &[3, 3]);
            case!(uniform(rng, &[3, 3]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.mul(x, av)?;
                weigh(t, y, &w)
            })
        }),
        ("relu", |rng| {
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let y = t.relu(x)?;
                weigh(t, y, &w)
            })
        }),
        ("scale", |rng| {
            let c: f64 = rng.random_range(-2.0..2.0);
            let w = uniform(rng, &[2, 3]);
            case!(uniform(rng, &[2, 3]), |t, x| {
                let y = t.scale(x, c)?;
                weigh(t, y, &w)
            })
        }),
        ("batch_norm/train/input", |rng| {
            let g = uniform(rng, &[3]);
            let b = uniform(rng, &[3]);
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let (gv, bv) = (t.constant(g.clone())?, t.constant(b.clone())?);
                let (y, _) = t.batch_norm(x, gv, bv, Phase::Train, &RunningStats::new(3))?;
                weigh(t, y, &w)
            })
        }),
        ("batch_norm/train/gamma", |rng| {
            let a = uniform(rng, &[4, 3]);
            let b = uniform(rng, &[3]);
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[3]), |t, x| {
                let (av, bv) = (t.constant(a.clone())?, t.constant(b.clone())?);
                let (y, _) = t.batch_norm(av, x, bv, Phase::Train, &RunningStats::new(3))?;
                weigh(t, y, &w)
            })
        }),
        ("batch_norm/train/beta", |rng| {
            let a = uniform(rng, &[4, 3]);
            let g = uniform(rng, &[3]);
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[3]), |t, x| {
                let (av, gv) = (t.constant(a.clone())?, t.constant(g.clone())?);
                let (y, _) = t.batch_norm(av, gv, x, Phase::Train, &RunningStats::new(3))?;
                weigh(t, y, &w)
            })
        }),
        ("batch_norm/eval/input", |rng| {
            let g = uniform(rng, &[3]);
            let b = uniform(rng, &[3]);
            let running = RunningStats {
                mean: uniform(rng, &[3]).into_data(),
                var: uniform(rng, &[3]).map(|v| v.abs() + 0.1).into_data(),
            };
            let w = uniform(rng, &[4, 3]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let (gv, bv) = (t.constant(g.clone())?, t.constant(b.clone())?);
                let (y, _) = t.batch_norm(x, gv, bv, Phase::Eval, &running)?;
                weigh(t, y, &w)
            })
        }),
        ("l2_normalize", |rng| {
            let w = uniform(rng, &[3, 4]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let y = t.l2_normalize(x)?;
                weigh(t, y, &w)
            })
        }),
        ("softmax", |rng| {
            let w = uniform(rng, &[3, 4]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let y = t.softmax(x)?;
                weigh(t, y, &w)
            })
        }),
        ("concat_rows", |rng| {
            let a = uniform(rng, &[2, 3]);
            let w = uniform(rng, &[5, 3]);
            case!(uniform(rng, &[3, 3]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.concat_rows(&[av, x])?;
                weigh(t, y, &w)
            })
        }),
        ("neg_cosine_rowwise/lhs", |rng| {
            let b = uniform(rng, &[3, 4]);
            let w = uniform(rng, &[3]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let bv = t.constant(b.clone())?;
                let y = t.neg_cosine_rowwise(x, bv)?;
                weigh(t, y, &w)
            })
        }),
        ("neg_cosine_rowwise/rhs", |rng| {
            let a = uniform(rng, &[3, 4]);
            let w = uniform(rng, &[3]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let av = t.constant(a.clone())?;
                let y = t.neg_cosine_rowwise(av, x)?;
                weigh(t, y, &w)
            })
        }),
        ("soft_cross_entropy/logits", |rng| {
            let q = positive_rows(rng, 3, 4);
            let w = uniform(rng, &[3]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let qv = t.constant(q.clone())?;
                let y = t.soft_cross_entropy(x, qv)?;
                weigh(t, y, &w)
            })
        }),
        ("soft_cross_entropy/target", |rng| {
            let l = uniform(rng, &[3, 4]);
            let w = uniform(rng, &[3]);
            case!(positive_rows(rng, 3, 4), |t, x| {
                let lv = t.constant(l.clone())?;
                let y = t.soft_cross_entropy(lv, x)?;
                weigh(t, y, &w)
            })
        }),
        ("soft_cross_entropy/two_class", |rng| {
            let q = positive_rows(rng, 1, 2);
            case!(uniform(rng, &[1, 2]), |t, x| {
                let qv = t.constant(q.clone())?;
                let y = t.soft_cross_entropy(x, qv)?;
                t.sum(y)
            })
        }),
        ("mean", |rng| {
            case!(uniform(rng, &[3, 2]), |t, x| {
                let y = t.relu(x)?;
                let z = t.add(y, x)?;
                t.mean(z)
            })
        }),
        ("sum", |rng| {
            case!(uniform(rng, &[3, 2]), |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            })
        }),
        ("matmul+batch_norm", |rng| {
            let wmat = uniform(rng, &[3, 5]);
            let g = uniform(rng, &[5]);
            let b = uniform(rng, &[5]);
            let w = uniform(rng, &[4, 5]);
            case!(uniform(rng, &[4, 3]), |t, x| {
                let wv = t.constant(wmat.clone())?;
                let h = t.matmul(x, wv)?;
                let (gv, bv) = (t.constant(g.clone())?, t.constant(b.clone())?);
                let (y, _) = t.batch_norm(h, gv, bv, Phase::Train, &RunningStats::new(5))?;
                weigh(t, y, &w)
            })
        }),
        ("loss_negcos", |rng| {
            let p2 = uniform(rng, &[3, 4]);
            let z1m = uniform(rng, &[3, 4]);
            let z2m = uniform(rng, &[3, 4]);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let p2 = t.constant(p2.clone())?;
                let z1m = t.constant(z1m.clone())?;
                let z2m = t.constant(z2m.clone())?;
                loss_negcos(t, x, p2, z1m, z2m)
            })
        }),
        ("loss_infonce", |rng| {
            let zm = uniform(rng, &[3, 4]);
            let mut queue = FeatureQueue::new(4);
            queue.push(&uniform(rng, &[2, 4])).unwrap();
            let tau: f64 = rng.random_range(0.5..1.5);
            case!(uniform(rng, &[3, 4]), |t, x| {
                let zm = t.constant(zm.clone())?;
                loss_infonce(t, x, zm, &queue, tau)
            })
        }),
        ("loss_softce", |rng| {
            let zt = uniform(rng, &[3, 5]);
            let center = CenterState {
                center: uniform(rng, &[5]).into_data(),
                momentum: 0.9,
            };
            case!(uniform(rng, &[3, 5]), |t, x| {
                let zt = t.constant(zt.clone())?;
                loss_softce(t, x, zt, 1.0, 0.5, Some(&center))
            })
        }),
    ]
}

/// Run every primitive and loss check over `instances` seeded inputs.
pub fn run_suite(instances: usize, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, (name, make)) in cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for seed in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + k as u64);
            let (input, chain) = make(&mut rng);
            worst = worst.max(grad_check(&input, h, |t, x| chain(t, x))?);
        }
        out.push(CheckOutcome {
            name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
