//! The step engine: views, online and target forwards, loss, backward, SGD,
//! EMA, and queue/center maintenance, plus whole-run orchestration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Phase, Tape, Var};
use crate::data::{make_views, AugSpec, Dataset};
use crate::encoder::{forward_bound, ParamSet, StageActivations, StageName};
use crate::error::{Error, Result};
use crate::eval::{probe_snapshot, ProbeConfig, ProbeReport};
use crate::momentum::{
    ema_update_with, init_target, BetaRamp, ForwardCounter, MomentumPolicy, TargetParams,
    TargetPath,
};
use crate::objectives::{
    loss_infonce, loss_negcos, loss_softce, CenterState, FeatureQueue, ObjectiveSpec,
};
use crate::optim::{lr_at, Sgd};
use crate::telemetry::{
    record_stage_grads, record_weight_slice, CurveRow, GradTraceRow, WeightSelector,
    WeightTrajectoryRow,
};
use crate::tensor::Tensor;

fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub objective: ObjectiveSpec,
    pub policy: MomentumPolicy,
    #[serde(default)]
    pub aug: AugSpec,
    /// Optional cosine ramp of every EMA coefficient up to its configured value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_ramp: Option<BetaRamp>,
}

impl TrainConfig {
    pub fn new(
        steps: usize,
        batch: usize,
        lr: f64,
        objective: ObjectiveSpec,
        policy: MomentumPolicy,
    ) -> Self {
        TrainConfig {
            steps,
            batch,
            lr,
            sgd_momentum: default_sgd_momentum(),
            weight_decay: default_weight_decay(),
            warmup_steps: 0,
            seed: 0,
            objective,
            policy,
            aug: AugSpec::default(),
            beta_ramp: None,
        }
    }

    pub fn validate(&self, has_predictor: bool) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be a non-negative number, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config(format!(
                "sgd_momentum out of range [0,1): {}",
                self.sgd_momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if let Some(r) = self.beta_ramp {
            crate::momentum::check_beta(r.start)?;
        }
        self.aug.validate()?;
        self.objective.validate(has_predictor)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.lr, self.warmup_steps, self.steps)
    }
}

/// What one step reports.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grads: Vec<GradTraceRow>,
    /// Registered target parameters that nevertheless received a gradient.
    pub target_grad_entries: usize,
    /// How many target parameters were registered on the tape.
    pub target_params_audited: usize,
}

/// One recorded forward pass over both views.
struct Pass {
    tape: Tape,
    loss: Var,
    online: [StageActivations; 2],
    target: [StageActivations; 2],
    online_vars: Vec<Vec<Var>>,
    target_param_vars: Vec<Var>,
}

pub struct Trainer {
    cfg: TrainConfig,
    pub online: ParamSet,
    pub target: TargetParams,
    optim: Sgd,
    pub queue: FeatureQueue,
    pub center: Option<CenterState>,
    pub counter: ForwardCounter,
    step: usize,
    aug_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, online: ParamSet) -> Result<Self> {
        cfg.validate(online.has_predictor())?;
        let target = init_target(&online, &cfg.policy)?;
        let optim = Sgd::new(&online, cfg.sgd_momentum, cfg.weight_decay);
        let queue = match cfg.objective {
            ObjectiveSpec::InfoNce { queue_size, .. } => FeatureQueue::new(queue_size),
            _ => FeatureQueue::new(0),
        };
        let center = match cfg.objective {
            ObjectiveSpec::SoftCe {
                centering: true,
                center_momentum,
                ..
            } => {
                let proj = online
                    .stage(StageName::Projector)
                    .and_then(|s| s.linear(s.linear_count().checked_sub(1)?))
                    .ok_or_else(|| Error::Config("projector has no linear layer".into()))?;
                let (_, k) = proj.dims2().expect("linear weights are matrices");
                Some(CenterState::new(k, center_momentum))
            }
            _ => None,
        };
        let counter = ForwardCounter::new(target.bytes());
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        aug_rng.set_stream(1);
        Ok(Trainer {
            cfg,
            online,
            target,
            optim,
            queue,
            center,
            counter,
            step: 0,
            aug_rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn policy(&self) -> &MomentumPolicy {
        &self.cfg.policy
    }

    fn forward(&self, x1: &Tensor, x2: &Tensor, counter: &mut ForwardCounter) -> Result<Pass> {
        let mut tape = Tape::new();
        let bound = self.online.bind(&mut tape, true)?;
        let online_vars = bound.iter().map(|b| b.trainable_vars()).collect();
        let target = TargetPath::bind(&mut tape, &bound, &self.target, &self.cfg.policy)?;
        let mut online = Vec::with_capacity(2);
        let mut targets = Vec::with_capacity(2);
        for x in [x1, x2] {
            let xv = tape.constant(x.clone())?;
            let acts = forward_bound(&mut tape, &bound, StageName::Stem, xv, Phase::Train)?;
            counter.count_online(acts.stages());
            targets.push(target.forward(&mut tape, &acts, xv, Phase::Train, counter)?);
            online.push(acts);
        }
        let pick = |acts: &StageActivations, s: StageName| {
            acts.get(s)
                .ok_or_else(|| Error::Contract(format!("no output for stage {s}")))
        };
        let (z1m, z2m) = (
            pick(&targets[0], StageName::Projector)?,
            pick(&targets[1], StageName::Projector)?,
        );
        let loss = match self.cfg.objective {
            ObjectiveSpec::NegCosine => {
                let p1 = pick(&online[0], StageName::Predictor)?;
                let p2 = pick(&online[1], StageName::Predictor)?;
                loss_negcos(&mut tape, p1, p2, z1m, z2m)
            }
            ObjectiveSpec::InfoNce { temperature, .. } => {
                let z1 = pick(&online[0], StageName::Projector)?;
                let z2 = pick(&online[1], StageName::Projector)?;
                let a = loss_infonce(&mut tape, z1, z2m, &self.queue, temperature)?;
                let b = loss_infonce(&mut tape, z2, z1m, &self.queue, temperature)?;
                let s = tape.add(a, b)?;
                tape.scale(s, 0.5)
            }
            ObjectiveSpec::SoftCe {
                student_temp,
                teacher_temp,
                ..
            } => {
                let z1 = pick(&online[0], StageName::Projector)?;
                let z2 = pick(&online[1], StageName::Projector)?;
                let c = self.center.as_ref();
                let a = loss_softce(&mut tape, z1, z2m, student_temp, teacher_temp, c)?;
                let b = loss_softce(&mut tape, z2, z1m, student_temp, teacher_temp, c)?;
                let s = tape.add(a, b)?;
                tape.scale(s, 0.5)
            }
        }
        .map_err(|e| e.at_stage("loss"))?;
        let [t1, t2]: [StageActivations; 2] = targets.try_into().expect("two views");
        let [o1, o2]: [StageActivations; 2] = online.try_into().expect("two views");
        Ok(Pass {
            loss,
            online: [o1, o2],
            target: [t1, t2],
            online_vars,
            target_param_vars: target.param_vars,
            tape,
        })
    }

    /// Loss on an explicit view pair without touching any state.
    pub fn loss_for_views(&self, x1: &Tensor, x2: &Tensor) -> Result<f64> {
        let mut scratch = ForwardCounter::default();
        let pass = self
            .forward(x1, x2, &mut scratch)
            .map_err(|e| e.at_step(self.step))?;
        Ok(pass.tape.value(pass.loss).data()[0])
    }

    /// Draw two augmented views of `batch` and take one step on them.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepMetrics> {
        let (x1, x2) = make_views(batch, &self.cfg.aug, &mut self.aug_rng);
        self.train_step_on_views(&x1, &x2)
    }

    pub fn train_step_on_views(&mut self, x1: &Tensor, x2: &Tensor) -> Result<StepMetrics> {
        let step = self.step;
        self.step_inner(x1, x2).map_err(|e| e.at_step(step))
    }

    fn step_inner(&mut self, x1: &Tensor, x2: &Tensor) -> Result<StepMetrics> {
        if x1.rows() == 0 || x1.dims2().is_none() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let step = self.step;
        let mut counter = ForwardCounter::default();
        let pass = self.forward(x1, x2, &mut counter)?;
        let loss = pass.tape.value(pass.loss).data()[0];
        let grads = pass.tape.backward(pass.loss)?;
        let target_grad_entries = pass
            .target_param_vars
            .iter()
            .filter(|v| grads.contains(**v))
            .count();
        let grad_rows = record_stage_grads(
            step,
            &pass.tape,
            &grads,
            &[&pass.online[0], &pass.online[1]],
        )?;

        let online_grads: Vec<Vec<Option<Tensor>>> = pass
            .online_vars
            .iter()
            .map(|vars| vars.iter().map(|v| grads.get(*v).cloned()).collect())
            .collect();
        let lr = self.cfg.lr_at(step);
        self.optim.step(&mut self.online, &online_grads, lr)?;
        for stage in &self.online.stages {
            let mut finite = true;
            stage.for_each_trainable(|_, t| finite &= t.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    primitive: "sgd_update",
                    stage: Some(stage.name.to_string()),
                    step: None,
                });
            }
        }
        self.online.absorb_bn_stats(&pass.online[0].bn_stats);
        self.online.absorb_bn_stats(&pass.online[1].bn_stats);

        let (ramp, total) = (self.cfg.beta_ramp, self.cfg.steps);
        ema_update_with(
            &mut self.target,
            &self.online,
            &self.cfg.policy,
            |_, beta| match ramp {
                Some(r) => r.beta_at(beta, step + 1, total),
                None => beta,
            },
        )?;

        let z1m = pass.tape.value(
            pass.target[0]
                .get(StageName::Projector)
                .expect("checked in forward"),
        );
        let z2m = pass.tape.value(
            pass.target[1]
                .get(StageName::Projector)
                .expect("checked in forward"),
        );
        if self.queue.capacity() > 0 {
            self.queue.push(z1m)?;
            self.queue.push(z2m)?;
        }
        if let Some(center) = &mut self.center {
            let (m, k) = z1m.dims2().expect("batch matrix");
            let both = [z1m.data(), z2m.data()].concat();
            center.update(&Tensor::new(vec![2 * m, k], both)?)?;
        }

        self.counter.merge(&counter);
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            lr,
            grads: grad_rows,
            target_grad_entries,
            target_params_audited: pass.target_param_vars.len(),
        })
    }
}

/// Optional extras recorded during [`run_training`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub weights: Option<WeightSelector>,
    /// Probe every this many steps (0 = only at start and end).
    pub probe_every: usize,
    pub probe: ProbeConfig,
    /// `(train, test)` for probing; `None` disables probes.
    pub eval_sets: Option<(Dataset, Dataset)>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub curve: Vec<CurveRow>,
    pub grads: Vec<GradTraceRow>,
    pub weights: Vec<WeightTrajectoryRow>,
    pub probes: Vec<ProbeReport>,
    pub counter: ForwardCounter,
    pub target_grad_entries: usize,
    pub online: ParamSet,
    pub target: TargetParams,
}

/// Train on `data` for `cfg.steps` steps. Each epoch reshuffles with a
/// stream of `cfg.seed` and drops the last partial batch.
pub fn run_training(
    cfg: &TrainConfig,
    init: ParamSet,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(cfg.clone(), init)?;
    if cfg.steps > 0 && cfg.batch > data.len() {
        return Err(Error::Config(format!(
            "batch {} exceeds dataset size {}",
            cfg.batch,
            data.len()
        )));
    }
    if let Some(sel) = &opts.weights {
        sel.validate(&trainer.online)?;
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let per_epoch = (data.len() / cfg.batch).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut art = RunArtifacts {
        curve: Vec::with_capacity(cfg.steps),
        grads: Vec::new(),
        weights: Vec::new(),
        probes: Vec::new(),
        counter: ForwardCounter::default(),
        target_grad_entries: 0,
        online: ParamSet {
            input_dim: 0,
            stages: Vec::new(),
        },
        target: TargetParams { stages: Vec::new() },
    };
    let probe = |t: &Trainer, step: usize| -> Result<Option<ProbeReport>> {
        match &opts.eval_sets {
            Some((train, test)) => {
                probe_snapshot(&t.online, train, test, &opts.probe, step).map(Some)
            }
            None => Ok(None),
        }
    };
    art.probes.extend(probe(&trainer, 0)?);
    for step in 0..cfg.steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let idx = &order[slot * cfg.batch..(slot + 1) * cfg.batch];
        let m = trainer.train_step(&data.x.gather_rows(idx))?;
        art.curve.push(CurveRow {
            step,
            loss: m.loss,
            lr: m.lr,
        });
        art.grads.extend(m.grads);
        art.target_grad_entries += m.target_grad_entries;
        if let Some(sel) = &opts.weights {
            if step % sel.stride == 0 {
                art.weights.extend(record_weight_slice(
                    step,
                    &trainer.online,
                    &trainer.target,
                    sel,
                )?);
            }
        }
        let done = step + 1;
        if opts.probe_every > 0 && done % opts.probe_every == 0 && done != cfg.steps {
            art.probes.extend(probe(&trainer, done)?);
        }
    }
    if cfg.steps > 0 {
        art.probes.extend(probe(&trainer, cfg.steps)?);
    }
    art.counter = trainer.counter.clone();
    art.online = trainer.online;
    art.target = trainer.target;
    Ok(art)
}

/// Forward totals and the target/online backbone forward ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub online_forwards: BTreeMap<StageName, u64>,
    pub target_forwards: BTreeMap<StageName, u64>,
    pub target_param_bytes: u64,
    pub target_backbone_fwd_ratio: f64,
}

pub fn count_report(counter: &ForwardCounter) -> CountReport {
    let backbone = |m: &BTreeMap<StageName, u64>| -> u64 {
        m.iter()
            .filter(|(s, _)| s.is_backbone())
            .map(|(_, n)| n)
            .sum()
    };
    let online = backbone(&counter.online);
    let ratio = if online == 0 {
        0.0
    } else {
        backbone(&counter.target) as f64 / online as f64
    };
    CountReport {
        online_forwards: counter.online.clone(),
        target_forwards: counter.target.clone(),
        target_param_bytes: counter.target_param_bytes,
        target_backbone_fwd_ratio: ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::encoder::{build_encoder, EncoderConfig};
    use crate::momentum::Mode;

    fn blobs() -> Dataset {
        gen_blobs(8, 32, 64, 0.1, 0).unwrap()
    }

    fn negcos(steps: usize, policy: MomentumPolicy) -> (TrainConfig, ParamSet) {
        let mut cfg = TrainConfig::new(steps, 32, 0.05, ObjectiveSpec::NegCosine, policy);
        cfg.seed = 3;
        (
            cfg,
            build_encoder(&EncoderConfig::paper_shaped(1, true)).unwrap(),
        )
    }

    #[test]
    fn zero_lr_all_share_changes_nothing() {
        let (mut cfg, init) = negcos(3, MomentumPolicy::uniform(Mode::Share).unwrap());
        cfg.lr = 0.0;
        let mut t = Trainer::new(cfg, init.clone()).unwrap();
        let batch = blobs().x.gather_rows(&(0..32).collect::<Vec<_>>());
        t.train_step(&batch).unwrap();
        for (a, b) in t.online.stages.iter().zip(&init.stages) {
            let mut same = true;
            let mut theirs = Vec::new();
            b.for_each_trainable(|_, x| theirs.push(x.clone()));
            let mut k = 0;
            a.for_each_trainable(|_, x| {
                same &= x.bit_eq(&theirs[k]);
                k += 1;
            });
            assert!(same, "stage {} moved", a.name);
        }
        assert!(t.target.is_empty());
    }

    #[test]
    fn projector_only_counts_per_step() {
        let (cfg, init) = negcos(1, MomentumPolicy::projector_only(0.99).unwrap());
        let mut t = Trainer::new(cfg, init).unwrap();
        t.train_step(&blobs().x.gather_rows(&(0..32).collect::<Vec<_>>()))
            .unwrap();
        for s in StageName::TARGET {
            let expected = if s == StageName::Projector { 2 } else { 0 };
            assert_eq!(t.counter.target_count(s), expected, "{s}");
            assert_eq!(t.counter.online_count(s), 2);
        }
        assert_eq!(count_report(&t.counter).target_backbone_fwd_ratio, 0.0);
    }

    #[test]
    fn full_and_share_reports() {
        let (cfg, init) = negcos(2, MomentumPolicy::full(0.99).unwrap());
        let art = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap();
        assert_eq!(count_report(&art.counter).target_backbone_fwd_ratio, 1.0);
        let (cfg, init) = negcos(2, MomentumPolicy::uniform(Mode::Share).unwrap());
        let art = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap();
        let r = count_report(&art.counter);
        assert_eq!(
            (r.target_param_bytes, r.target_backbone_fwd_ratio),
            (0, 0.0)
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, init) = negcos(5, MomentumPolicy::projector_only(0.99).unwrap());
        let a = run_training(&cfg, init.clone(), &blobs(), &RunOptions::default()).unwrap();
        let b = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap();
        let bits = |c: &[CurveRow]| c.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.curve), bits(&b.curve));
        assert!(a.online.bit_eq(&b.online));
    }

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let (cfg, init) = negcos(0, MomentumPolicy::projector_only(0.99).unwrap());
        let art = run_training(&cfg, init.clone(), &blobs(), &RunOptions::default()).unwrap();
        assert!(art.curve.is_empty() && art.grads.is_empty());
        assert!(art.online.bit_eq(&init));
    }

    #[test]
    fn negcos_smoke_run_reduces_loss() {
        // seed 3 (shuffle/augment), encoder seed 1
        let (cfg, init) = negcos(300, MomentumPolicy::projector_only(0.99).unwrap());
        let art = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap();
        let first = art.curve[0].loss;
        let last = art.curve.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn every_online_stage_gets_a_grad_row() {
        let (cfg, init) = negcos(2, MomentumPolicy::projector_only(0.99).unwrap());
        let art = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap();
        assert_eq!(art.grads.len(), 2 * StageName::ALL.len());
        assert!(art
            .grads
            .iter()
            .all(|r| r.linf.is_finite() && r.linf >= 0.0));
        assert_eq!(art.target_grad_entries, 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (mut cfg, init) = negcos(10, MomentumPolicy::projector_only(0.99).unwrap());
        cfg.warmup_steps = 10;
        assert!(matches!(
            Trainer::new(cfg.clone(), init.clone()),
            Err(Error::Config(_))
        ));
        cfg.warmup_steps = 0;
        cfg.objective = ObjectiveSpec::infonce();
        assert!(matches!(Trainer::new(cfg, init), Err(Error::Config(_))));
    }

    #[test]
    fn exploding_lr_aborts_with_step_and_stage() {
        let (mut cfg, init) = negcos(50, MomentumPolicy::projector_only(0.99).unwrap());
        cfg.lr = 1e200;
        let err = run_training(&cfg, init, &blobs(), &RunOptions::default()).unwrap_err();
        match &err {
            Error::NonFinite { stage, step, .. } => {
                assert!(stage.is_some() && step.is_some(), "{err}");
            }
            other => panic!("expected numeric abort, got {other}"),
        }
    }
}
