//! Target (teacher) parameters under a per-stage momentum policy.
//!
//! Each non-predictor stage is `Share` (target reads the online weights),
//! `Ema(beta)` (target follows `xi <- beta*xi + (1-beta)*theta`) or `Frozen`
//! (target never moves). When the policy starts with a run of `Share`
//! stages, the target path reuses the online activations for that prefix
//! instead of recomputing them; projector-only momentum is the case where the
//! whole backbone is shared and only the projector runs twice.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Phase, Tape, Var};
use crate::encoder::{
    forward_bound, BoundStage, ParamSet, StageActivations, StageName, StageParams,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Mode {
    Share,
    Ema { beta: f64 },
    Frozen,
}

impl Mode {
    /// Effective momentum coefficient.
    pub fn beta(self) -> f64 {
        match self {
            Mode::Share => 0.0,
            Mode::Ema { beta } => beta,
            Mode::Frozen => 1.0,
        }
    }

    pub fn is_share(self) -> bool {
        matches!(self, Mode::Share)
    }
}

/// Per-stage modes for stem, block1..4 and projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<StageName, Mode>",
    into = "BTreeMap<StageName, Mode>"
)]
pub struct MomentumPolicy {
    modes: BTreeMap<StageName, Mode>,
}

impl TryFrom<BTreeMap<StageName, Mode>> for MomentumPolicy {
    type Error = Error;
    fn try_from(modes: BTreeMap<StageName, Mode>) -> Result<Self> {
        MomentumPolicy::new(modes)
    }
}

impl From<MomentumPolicy> for BTreeMap<StageName, Mode> {
    fn from(p: MomentumPolicy) -> Self {
        p.modes
    }
}

pub fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Config(format!("beta out of range [0,1]: {beta}")))
    }
}

impl MomentumPolicy {
    pub fn new(modes: BTreeMap<StageName, Mode>) -> Result<Self> {
        if modes.contains_key(&StageName::Predictor) {
            return Err(Error::Config(
                "the predictor is online-only and takes no momentum mode".into(),
            ));
        }
        for stage in StageName::TARGET {
            match modes.get(&stage) {
                None => {
                    return Err(Error::Config(format!(
                        "policy has no mode for stage {stage}"
                    )))
                }
                Some(Mode::Ema { beta }) => check_beta(*beta)?,
                Some(_) => {}
            }
        }
        Ok(MomentumPolicy { modes })
    }

    pub fn uniform(mode: Mode) -> Result<Self> {
        Self::new(StageName::TARGET.iter().map(|&s| (s, mode)).collect())
    }

    /// `Ema(beta)` on `stages`, `Share` everywhere else.
    pub fn ema_on(stages: &[StageName], beta: f64) -> Result<Self> {
        Self::new(
            StageName::TARGET
                .iter()
                .map(|&s| {
                    let mode = if stages.contains(&s) {
                        Mode::Ema { beta }
                    } else {
                        Mode::Share
                    };
                    (s, mode)
                })
                .collect(),
        )
    }

    pub fn projector_only(beta: f64) -> Result<Self> {
        Self::ema_on(&[StageName::Projector], beta)
    }

    pub fn full(beta: f64) -> Result<Self> {
        Self::ema_on(&StageName::TARGET, beta)
    }

    pub fn with_mode(mut self, stage: StageName, mode: Mode) -> Result<Self> {
        self.modes.insert(stage, mode);
        Self::new(self.modes)
    }

    pub fn mode(&self, stage: StageName) -> Mode {
        self.modes.get(&stage).copied().unwrap_or(Mode::Share)
    }

    pub fn modes(&self) -> &BTreeMap<StageName, Mode> {
        &self.modes
    }

    /// Number of leading `Share` stages in stem..projector order.
    pub fn shared_prefix_len(&self) -> usize {
        StageName::TARGET
            .iter()
            .take_while(|s| self.mode(**s).is_share())
            .count()
    }

    /// First stage that needs a dedicated target forward, if any.
    pub fn first_dedicated(&self) -> Option<StageName> {
        StageName::TARGET.get(self.shared_prefix_len()).copied()
    }
}

/// Named policy layouts used by sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyPreset {
    None,
    Conv1Only,
    Block1Only,
    Block2Only,
    Block3Only,
    Block4Only,
    ProjectorOnly,
    Block4Projector,
    BackboneOnly,
    Full,
}

impl PolicyPreset {
    pub const ALL: [PolicyPreset; 10] = [
        PolicyPreset::None,
        PolicyPreset::Conv1Only,
        PolicyPreset::Block1Only,
        PolicyPreset::Block2Only,
        PolicyPreset::Block3Only,
        PolicyPreset::Block4Only,
        PolicyPreset::ProjectorOnly,
        PolicyPreset::Block4Projector,
        PolicyPreset::BackboneOnly,
        PolicyPreset::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyPreset::None => "none",
            PolicyPreset::Conv1Only => "conv1-only",
            PolicyPreset::Block1Only => "block1-only",
            PolicyPreset::Block2Only => "block2-only",
            PolicyPreset::Block3Only => "block3-only",
            PolicyPreset::Block4Only => "block4-only",
            PolicyPreset::ProjectorOnly => "projector-only",
            PolicyPreset::Block4Projector => "block4+projector",
            PolicyPreset::BackboneOnly => "backbone-only",
            PolicyPreset::Full => "full",
        }
    }

    /// Stages that get `Ema(beta)` under this preset.
    pub fn ema_stages(self) -> &'static [StageName] {
        use StageName::*;
        match self {
            PolicyPreset::None => &[],
            PolicyPreset::Conv1Only => &[Stem],
            PolicyPreset::Block1Only => &[Block1],
            PolicyPreset::Block2Only => &[Block2],
            PolicyPreset::Block3Only => &[Block3],
            PolicyPreset::Block4Only => &[Block4],
            PolicyPreset::ProjectorOnly => &[Projector],
            PolicyPreset::Block4Projector => &[Block4, Projector],
            PolicyPreset::BackboneOnly => &[Stem, Block1, Block2, Block3, Block4],
            PolicyPreset::Full => &[Stem, Block1, Block2, Block3, Block4, Projector],
        }
    }

    pub fn policy(self, beta: f64) -> Result<MomentumPolicy> {
        MomentumPolicy::ema_on(self.ema_stages(), beta)
    }
}

impl fmt::Display for PolicyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PolicyPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy preset '{s}'")))
    }
}

impl TryFrom<String> for PolicyPreset {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PolicyPreset> for String {
    fn from(p: PolicyPreset) -> String {
        p.as_str().to_string()
    }
}

/// Cosine ramp of every `Ema` stage's coefficient from `start` to its
/// configured value over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaRamp {
    pub start: f64,
}

impl BetaRamp {
    pub fn beta_at(&self, target: f64, step: usize, total: usize) -> f64 {
        if total == 0 {
            return target;
        }
        let t = step.min(total) as f64 / total as f64;
        target - (target - self.start) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
    }
}

/// Target parameters, stored only for non-`Share` stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    pub stages: Vec<StageParams>,
}

impl TargetParams {
    pub fn stage(&self, name: StageName) -> Option<&StageParams> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.stages.iter().map(StageParams::bytes).sum()
    }

    /// Parameters the target path uses for `stage`: its own copy when one
    /// exists, otherwise the online stage.
    pub fn effective<'a>(
        &'a self,
        online: &'a ParamSet,
        stage: StageName,
    ) -> Option<&'a StageParams> {
        self.stage(stage).or_else(|| online.stage(stage))
    }
}

/// Copy the online parameters of every non-`Share` stage.
pub fn init_target(online: &ParamSet, policy: &MomentumPolicy) -> Result<TargetParams> {
    let mut stages = Vec::new();
    for name in StageName::TARGET {
        let mode = policy
            .modes()
            .get(&name)
            .ok_or_else(|| Error::Config(format!("policy has no mode for stage {name}")))?;
        if mode.is_share() {
            continue;
        }
        let stage = online
            .stage(name)
            .ok_or_else(|| Error::Config(format!("online network has no stage {name}")))?;
        stages.push(stage.clone());
    }
    Ok(TargetParams { stages })
}

/// `xi <- beta*xi + (1-beta)*theta` for every stored value of every
/// non-`Share` stage, running statistics included. `Frozen` stages are left
/// untouched.
pub fn ema_update(
    target: &mut TargetParams,
    online: &ParamSet,
    policy: &MomentumPolicy,
) -> Result<()> {
    ema_update_with(target, online, policy, |_, beta| beta)
}

/// [`ema_update`] with a hook that may adjust each stage's coefficient.
pub fn ema_update_with(
    target: &mut TargetParams,
    online: &ParamSet,
    policy: &MomentumPolicy,
    adjust: impl Fn(StageName, f64) -> f64,
) -> Result<()> {
    for stage in &mut target.stages {
        let name = stage.name;
        let beta = match policy.mode(name) {
            Mode::Frozen => continue,
            Mode::Share => {
                return Err(Error::Contract(format!(
                    "target holds stage {name} whose policy is share"
                )))
            }
            Mode::Ema { beta } => adjust(name, beta),
        };
        let theta = online
            .stage(name)
            .ok_or_else(|| Error::Contract(format!("online network has no stage {name}")))?;
        for (xi, th) in stage.zip_stored_mut(theta)? {
            for (x, t) in xi.iter_mut().zip(th) {
                *x = beta * *x + (1.0 - beta) * *t;
            }
        }
    }
    Ok(())
}

/// Dedicated forward tallies per network and stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardCounter {
    pub online: BTreeMap<StageName, u64>,
    pub target: BTreeMap<StageName, u64>,
    pub target_param_bytes: u64,
}

impl ForwardCounter {
    pub fn new(target_param_bytes: u64) -> Self {
        ForwardCounter {
            target_param_bytes,
            ..Default::default()
        }
    }

    pub fn count_online(&mut self, stages: impl IntoIterator<Item = StageName>) {
        for s in stages {
            *self.online.entry(s).or_default() += 1;
        }
    }

    pub fn count_target(&mut self, stages: impl IntoIterator<Item = StageName>) {
        for s in stages {
            *self.target.entry(s).or_default() += 1;
        }
    }

    pub fn online_count(&self, s: StageName) -> u64 {
        self.online.get(&s).copied().unwrap_or(0)
    }

    pub fn target_count(&self, s: StageName) -> u64 {
        self.target.get(&s).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &ForwardCounter) {
        for (s, n) in &other.online {
            *self.online.entry(*s).or_default() += n;
        }
        for (s, n) in &other.target {
            *self.target.entry(*s).or_default() += n;
        }
    }
}

/// Everything needed to run target forwards on one tape.
pub struct TargetPath<'a> {
    /// `None` for shared-prefix stages, which never run on the target side.
    stages: Vec<BoundStage<'a>>,
    start: Option<StageName>,
    /// Handles of every registered target parameter (for stop-gradient audits).
    pub param_vars: Vec<Var>,
}

impl<'a> TargetPath<'a> {
    /// Bind the effective target parameters of the dedicated stages.
    ///
    /// `online` must be the online stages already bound on `tape`; `Share`
    /// stages that follow a dedicated one reuse them behind detach marks.
    /// Target copies are registered as gradient-requiring leaves so that an
    /// audit of the [`GradMap`](crate::autodiff::GradMap) can show no
    /// gradient reaches them.
    pub fn bind(
        tape: &mut Tape,
        online: &[BoundStage<'a>],
        target: &'a TargetParams,
        policy: &MomentumPolicy,
    ) -> Result<Self> {
        let start = policy.first_dedicated();
        let mut stages = Vec::new();
        let mut param_vars = Vec::new();
        if let Some(start) = start {
            let from = StageName::TARGET.iter().position(|s| *s == start).unwrap();
            for &name in &StageName::TARGET[from..] {
                let bound = match target.stage(name) {
                    Some(params) => {
                        let b = params.bind(tape, true)?;
                        param_vars.extend(b.trainable_vars());
                        b
                    }
                    None => online
                        .iter()
                        .find(|b| b.params.name == name)
                        .ok_or_else(|| Error::Contract(format!("online stage {name} not bound")))?
                        .detached(tape)?,
                };
                stages.push(bound);
            }
        }
        Ok(TargetPath {
            stages,
            start,
            param_vars,
        })
    }

    /// Target activations for one view.
    ///
    /// Shared-prefix stages reuse the online outputs behind detach marks; the
    /// remaining stages run on `input` (the raw view for a dedicated stem,
    /// else the detached online output preceding the first dedicated stage).
    /// Every returned handle is detached. Dedicated forwards are tallied in
    /// `counter`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        online_acts: &StageActivations,
        x: Var,
        phase: Phase,
        counter: &mut ForwardCounter,
    ) -> Result<StageActivations> {
        let mut acts = StageActivations::default();
        let prefix = match self.start {
            Some(s) => StageName::TARGET.iter().position(|t| *t == s).unwrap(),
            None => StageName::TARGET.len(),
        };
        for &name in &StageName::TARGET[..prefix] {
            let v = online_acts
                .get(name)
                .ok_or_else(|| Error::Contract(format!("online activations lack stage {name}")))?;
            acts.outputs.push((name, tape.detach(v)?));
        }
        let Some(start) = self.start else {
            return Ok(acts);
        };
        let input = if prefix == 0 {
            tape.detach(x)?
        } else {
            acts.outputs[prefix - 1].1
        };
        let dedicated = forward_bound(tape, &self.stages, start, input, phase)?;
        counter.count_target(dedicated.stages());
        for (name, v) in dedicated.outputs {
            acts.outputs.push((name, tape.detach(v)?));
        }
        Ok(acts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig};
    use crate::tensor::Tensor;

    fn params(seed: u64) -> ParamSet {
        build_encoder(&EncoderConfig::paper_shaped(seed, true)).unwrap()
    }

    #[test]
    fn policy_requires_every_target_stage() {
        let mut modes: BTreeMap<_, _> = StageName::TARGET
            .iter()
            .map(|&s| (s, Mode::Share))
            .collect();
        assert!(MomentumPolicy::new(modes.clone()).is_ok());
        modes.remove(&StageName::Block2);
        assert!(matches!(
            MomentumPolicy::new(modes.clone()),
            Err(Error::Config(_))
        ));
        modes.insert(StageName::Block2, Mode::Share);
        modes.insert(StageName::Predictor, Mode::Share);
        assert!(MomentumPolicy::new(modes).is_err());
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        let err = MomentumPolicy::projector_only(1.2).unwrap_err();
        assert!(err.to_string().contains("beta out of range [0,1]"));
        assert!(MomentumPolicy::projector_only(-0.1).is_err());
        assert!(MomentumPolicy::projector_only(1.0).is_ok());
    }

    #[test]
    fn presets_parse_and_cover_stages() {
        for p in PolicyPreset::ALL {
            assert_eq!(p.as_str().parse::<PolicyPreset>().unwrap(), p);
        }
        let full = PolicyPreset::Full.policy(0.99).unwrap();
        assert_eq!(full.shared_prefix_len(), 0);
        let proj = PolicyPreset::ProjectorOnly.policy(0.99).unwrap();
        assert_eq!(proj.shared_prefix_len(), 5);
        assert_eq!(proj.first_dedicated(), Some(StageName::Projector));
        let none = PolicyPreset::None.policy(0.99).unwrap();
        assert_eq!(none.first_dedicated(), None);
        let b2 = PolicyPreset::Block2Only.policy(0.9).unwrap();
        assert_eq!(b2.first_dedicated(), Some(StageName::Block2));
    }

    #[test]
    fn all_share_allocates_nothing() {
        let p = params(0);
        let t = init_target(&p, &MomentumPolicy::uniform(Mode::Share).unwrap()).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.bytes(), 0);
    }

    #[test]
    fn projector_only_allocates_projector_bytes() {
        let p = params(0);
        let t = init_target(&p, &MomentumPolicy::projector_only(0.99).unwrap()).unwrap();
        assert_eq!(t.bytes(), p.stage(StageName::Projector).unwrap().bytes());
    }

    #[test]
    fn full_policy_mirrors_online_without_predictor() {
        let p = params(0);
        let t = init_target(&p, &MomentumPolicy::full(0.99).unwrap()).unwrap();
        assert_eq!(t.bytes(), p.target_eligible_bytes());
        assert!(t.stage(StageName::Predictor).is_none());
        for s in &t.stages {
            assert!(s.bit_eq(p.stage(s.name).unwrap()));
        }
    }

    fn set_all(stage: &mut StageParams, value: f64) {
        let other = stage.clone();
        for (dst, _) in stage.zip_stored_mut(&other).unwrap() {
            dst.iter_mut().for_each(|v| *v = value);
        }
    }

    fn first_value(stage: &StageParams) -> f64 {
        let mut s = stage.clone();
        let pairs = s.zip_stored_mut(stage).unwrap();
        pairs[0].1[0]
    }

    #[test]
    fn ema_rule_direct_evaluation() {
        let mut online = params(1);
        let policy = MomentumPolicy::projector_only(0.99).unwrap();
        let mut target = init_target(&online, &policy).unwrap();
        set_all(&mut target.stages[0], 1.0);
        set_all(online.stage_mut(StageName::Projector).unwrap(), 0.0);
        ema_update(&mut target, &online, &policy).unwrap();
        assert_eq!(first_value(&target.stages[0]), 0.99);
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let online = params(2);
        let moved = params(3);
        // beta = 0 copies theta
        let policy0 = MomentumPolicy::full(0.0).unwrap();
        let mut t0 = init_target(&moved, &policy0).unwrap();
        ema_update(&mut t0, &online, &policy0).unwrap();
        for s in &t0.stages {
            assert!(s.bit_eq(online.stage(s.name).unwrap()));
        }
        // beta = 1 keeps xi
        let policy1 = MomentumPolicy::full(1.0).unwrap();
        let mut t1 = init_target(&moved, &policy1).unwrap();
        ema_update(&mut t1, &online, &policy1).unwrap();
        for s in &t1.stages {
            assert!(s.bit_eq(moved.stage(s.name).unwrap()));
        }
        // frozen leaves the target alone as well
        let frozen = MomentumPolicy::uniform(Mode::Frozen).unwrap();
        let mut tf = init_target(&moved, &frozen).unwrap();
        ema_update(&mut tf, &online, &frozen).unwrap();
        for s in &tf.stages {
            assert!(s.bit_eq(moved.stage(s.name).unwrap()));
        }
    }

    #[test]
    fn ema_shape_mismatch_is_a_contract_error() {
        let online = params(0);
        let policy = MomentumPolicy::projector_only(0.5).unwrap();
        let mut target = init_target(
            &build_encoder(&EncoderConfig::viz(0, true)).unwrap(),
            &policy,
        )
        .unwrap();
        assert!(matches!(
            ema_update(&mut target, &online, &policy),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn beta_ramp_endpoints() {
        let ramp = BetaRamp { start: 0.9 };
        assert!((ramp.beta_at(0.99, 0, 100) - 0.9).abs() < 1e-15);
        assert!((ramp.beta_at(0.99, 100, 100) - 0.99).abs() < 1e-15);
        assert!((ramp.beta_at(0.99, 50, 100) - 0.945).abs() < 1e-12);
    }

    #[test]
    fn policy_serde_uses_stage_table() {
        let p = MomentumPolicy::projector_only(0.99).unwrap();
        let map: BTreeMap<StageName, Mode> = p.clone().into();
        assert_eq!(map[&StageName::Projector], Mode::Ema { beta: 0.99 });
        assert_eq!(MomentumPolicy::try_from(map).unwrap(), p);
    }

    fn views(seed: u64) -> (Tensor, Tensor) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut gen =
            || Tensor::new(vec![5, 32], (0..160).map(|_| n.sample(&mut rng)).collect()).unwrap();
        (gen(), gen())
    }

    #[test]
    fn projector_only_counts_two_projector_forwards() {
        let p = params(4);
        let policy = MomentumPolicy::projector_only(0.99).unwrap();
        let target = init_target(&p, &policy).unwrap();
        let (x1, x2) = views(0);
        let mut tape = Tape::new();
        let online = p.bind(&mut tape, true).unwrap();
        let path = TargetPath::bind(&mut tape, &online, &target, &policy).unwrap();
        let mut counter = ForwardCounter::default();
        for x in [x1, x2] {
            let xv = tape.leaf(x, false).unwrap();
            let acts =
                forward_bound(&mut tape, &online, StageName::Stem, xv, Phase::Train).unwrap();
            let t = path
                .forward(&mut tape, &acts, xv, Phase::Train, &mut counter)
                .unwrap();
            assert_eq!(t.stages(), StageName::TARGET.to_vec());
            for (_, v) in &t.outputs {
                assert!(!tape.requires_grad(*v));
            }
        }
        for s in StageName::TARGET {
            let expected = if s == StageName::Projector { 2 } else { 0 };
            assert_eq!(counter.target_count(s), expected, "{s}");
        }
    }

    #[test]
    fn all_share_target_equals_detached_online() {
        let p = params(5);
        let policy = MomentumPolicy::uniform(Mode::Share).unwrap();
        let target = init_target(&p, &policy).unwrap();
        let (x1, _) = views(1);
        let mut tape = Tape::new();
        let online = p.bind(&mut tape, true).unwrap();
        let path = TargetPath::bind(&mut tape, &online, &target, &policy).unwrap();
        let xv = tape.leaf(x1, false).unwrap();
        let acts = forward_bound(&mut tape, &online, StageName::Stem, xv, Phase::Train).unwrap();
        let mut counter = ForwardCounter::default();
        let t = path
            .forward(&mut tape, &acts, xv, Phase::Train, &mut counter)
            .unwrap();
        assert!(counter.target.is_empty());
        for s in StageName::TARGET {
            let (a, b) = (t.get(s).unwrap(), acts.get(s).unwrap());
            assert!(tape.value(a).bit_eq(tape.value(b)));
            assert_eq!(tape.primitive(a), crate::autodiff::Primitive::DetachMark);
        }
    }
}
