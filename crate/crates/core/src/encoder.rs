//! Staged MLP encoder: stem -> block1..4 -> projector -> (predictor).
//!
//! Parameters live in a [`ParamSet`], one [`StageParams`] per stage. A
//! forward pass binds each stage's tensors onto a [`Tape`] (see
//! [`StageParams::bind`]) and runs [`forward_bound`] from any start stage, which
//! is what lets the momentum module resume a target path mid-network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Phase, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Stem,
    Block1,
    Block2,
    Block3,
    Block4,
    Projector,
    Predictor,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Stem,
        StageName::Block1,
        StageName::Block2,
        StageName::Block3,
        StageName::Block4,
        StageName::Projector,
        StageName::Predictor,
    ];

    /// Stages that have a target counterpart (everything but the predictor).
    pub const TARGET: [StageName; 6] = [
        StageName::Stem,
        StageName::Block1,
        StageName::Block2,
        StageName::Block3,
        StageName::Block4,
        StageName::Projector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stem => "stem",
            StageName::Block1 => "block1",
            StageName::Block2 => "block2",
            StageName::Block3 => "block3",
            StageName::Block4 => "block4",
            StageName::Projector => "projector",
            StageName::Predictor => "predictor",
        }
    }

    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            StageName::Stem
                | StageName::Block1
                | StageName::Block2
                | StageName::Block3
                | StageName::Block4
        )
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

/// One layer of a stage, written `linear(in,out)`, `bn` or `relu` in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Linear { input: usize, output: usize },
    Bn,
    Relu,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { input, output } => write!(f, "linear({input},{output})"),
            LayerSpec::Bn => f.write_str("bn"),
            LayerSpec::Relu => f.write_str("relu"),
        }
    }
}

impl From<LayerSpec> for String {
    fn from(l: LayerSpec) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for LayerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match t.as_str() {
            "bn" => return Ok(LayerSpec::Bn),
            "relu" => return Ok(LayerSpec::Relu),
            _ => {}
        }
        let bad = || {
            Error::Config(format!(
                "bad layer '{s}', expected linear(in,out), bn or relu"
            ))
        };
        let inner = t
            .strip_prefix("linear(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (a, b) = inner.split_once(',').ok_or_else(bad)?;
        let input = a.parse().map_err(|_| bad())?;
        let output = b.parse().map_err(|_| bad())?;
        if input == 0 || output == 0 {
            return Err(Error::Config(format!("layer '{s}' has a zero dimension")));
        }
        Ok(LayerSpec::Linear { input, output })
    }
}

pub fn linear(input: usize, output: usize) -> LayerSpec {
    LayerSpec::Linear { input, output }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageName,
    pub layers: Vec<LayerSpec>,
    /// Append a batch norm after the stage output.
    #[serde(default)]
    pub output_bn: bool,
    /// Add the stage input to its output (needs equal widths).
    #[serde(default)]
    pub residual: bool,
}

impl StageSpec {
    pub fn new(name: StageName, layers: Vec<LayerSpec>) -> Self {
        StageSpec {
            name,
            layers,
            output_bn: false,
            residual: false,
        }
    }

    /// Output width given the input width, checking the linear chain.
    fn output_width(&self, input: usize) -> Result<usize> {
        let mut width = input;
        for layer in &self.layers {
            if let LayerSpec::Linear { input, output } = *layer {
                if input != width {
                    return Err(Error::Config(format!(
                        "stage {}: linear({input},{output}) fed width {width}",
                        self.name
                    )));
                }
                width = output;
            }
        }
        if self.residual && width != input {
            return Err(Error::Config(format!(
                "stage {}: residual needs equal in/out widths ({input} vs {width})",
                self.name
            )));
        }
        Ok(width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub seed: u64,
    pub stages: Vec<StageSpec>,
}

fn mlp_block(width: usize) -> Vec<LayerSpec> {
    vec![
        linear(width, width),
        LayerSpec::Bn,
        LayerSpec::Relu,
        linear(width, width),
        LayerSpec::Bn,
        LayerSpec::Relu,
    ]
}

fn two_layer_head(input: usize, hidden: usize, output: usize) -> Vec<LayerSpec> {
    vec![
        linear(input, hidden),
        LayerSpec::Bn,
        LayerSpec::Relu,
        linear(hidden, output),
    ]
}

impl EncoderConfig {
    /// Reference layout: input 32, width-64 stem and blocks, 128-hidden
    /// projector to 32, predictor of the same shape.
    pub fn paper_shaped(seed: u64, predictor: bool) -> Self {
        Self::with_projector_hidden(seed, predictor, 128)
    }

    /// Same as [`paper_shaped`](Self::paper_shaped) but with a 2-wide
    /// projector bottleneck, so every final-layer filter is a 2-D point.
    pub fn viz(seed: u64, predictor: bool) -> Self {
        Self::with_projector_hidden(seed, predictor, 2)
    }

    fn with_projector_hidden(seed: u64, predictor: bool, hidden: usize) -> Self {
        let (input_dim, width, out) = (32, 64, 32);
        let mut stages = vec![StageSpec::new(
            StageName::Stem,
            vec![linear(input_dim, width), LayerSpec::Bn, LayerSpec::Relu],
        )];
        for name in [
            StageName::Block1,
            StageName::Block2,
            StageName::Block3,
            StageName::Block4,
        ] {
            stages.push(StageSpec::new(name, mlp_block(width)));
        }
        stages.push(StageSpec::new(
            StageName::Projector,
            two_layer_head(width, hidden, out),
        ));
        if predictor {
            stages.push(StageSpec::new(
                StageName::Predictor,
                two_layer_head(out, 128, out),
            ));
        }
        EncoderConfig {
            input_dim,
            seed,
            stages,
        }
    }

    pub fn has_predictor(&self) -> bool {
        self.stages.iter().any(|s| s.name == StageName::Predictor)
    }

    pub fn stage(&self, name: StageName) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Check stage order and width chaining; returns per-stage (in, out).
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        let names: Vec<StageName> = self.stages.iter().map(|s| s.name).collect();
        let expected = &StageName::ALL[..names.len().clamp(6, 7)];
        if names != expected {
            return Err(Error::Config(format!(
                "stages must be stem, block1..4, projector[, predictor]; got {:?}",
                names.iter().map(|n| n.as_str()).collect::<Vec<_>>()
            )));
        }
        let mut width = self.input_dim;
        let mut dims = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = stage.output_width(width)?;
            dims.push((width, out));
            width = out;
        }
        if self.has_predictor() {
            let (pin, pout) = dims[6];
            let proj_out = dims[5].1;
            if pin != proj_out || pout != proj_out {
                return Err(Error::Config(format!(
                    "predictor must map {proj_out} -> {proj_out}, got {pin} -> {pout}"
                )));
            }
        }
        Ok(dims)
    }

    pub fn output_dim(&self, stage: StageName) -> Option<usize> {
        let dims = self.validate().ok()?;
        let idx = self.stages.iter().position(|s| s.name == stage)?;
        Some(dims[idx].1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerParams {
    Linear {
        /// `[in, out]`; output = input . weight + bias.
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running: RunningStats,
    },
    Relu,
}

/// Role of a trainable tensor, used to decide weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub name: StageName,
    pub layers: Vec<LayerParams>,
    pub residual: bool,
}

/// Online parameters for every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub input_dim: usize,
    pub stages: Vec<StageParams>,
}

/// Tape handles for one layer.
#[derive(Clone, Copy, Debug)]
pub enum LayerVars {
    Linear { weight: Var, bias: Var },
    BatchNorm { gamma: Var, beta: Var },
    Relu,
}

/// A stage whose tensors are registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundStage<'a> {
    pub params: &'a StageParams,
    pub vars: Vec<LayerVars>,
}

/// Batch statistics observed at one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub stage: StageName,
    pub layer: usize,
    pub stats: BatchStats,
}

impl StageParams {
    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::Linear { weight, bias } => weight.len() + bias.len(),
                LayerParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
                LayerParams::Relu => 0,
            })
            .sum()
    }

    /// Every stored value, running statistics included.
    pub fn stored_count(&self) -> usize {
        self.trainable_count()
            + self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::BatchNorm { running, .. } => {
                        running.mean.len() + running.var.len()
                    }
                    _ => 0,
                })
                .sum::<usize>()
    }

    pub fn bytes(&self) -> u64 {
        (self.stored_count() * std::mem::size_of::<f64>()) as u64
    }

    /// Register this stage's tensors on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> Result<BoundStage<'a>> {
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            vars.push(match layer {
                LayerParams::Linear { weight, bias } => LayerVars::Linear {
                    weight: tape.leaf(weight.clone(), requires_grad)?,
                    bias: tape.leaf(bias.clone(), requires_grad)?,
                },
                LayerParams::BatchNorm { gamma, beta, .. } => LayerVars::BatchNorm {
                    gamma: tape.leaf(gamma.clone(), requires_grad)?,
                    beta: tape.leaf(beta.clone(), requires_grad)?,
                },
                LayerParams::Relu => LayerVars::Relu,
            });
        }
        Ok(BoundStage { params: self, vars })
    }

    /// Visit trainable tensors in a fixed order.
    pub fn for_each_trainable(&self, mut f: impl FnMut(ParamKind, &Tensor)) {
        for layer in &self.layers {
            match layer {
                LayerParams::Linear { weight, bias } => {
                    f(ParamKind::Weight, weight);
                    f(ParamKind::Bias, bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    f(ParamKind::Gamma, gamma);
                    f(ParamKind::Beta, beta);
                }
                LayerParams::Relu => {}
            }
        }
    }

    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(ParamKind, &mut Tensor)) {
        for layer in &mut self.layers {
            match layer {
                LayerParams::Linear { weight, bias } => {
                    f(ParamKind::Weight, weight);
                    f(ParamKind::Bias, bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    f(ParamKind::Gamma, gamma);
                    f(ParamKind::Beta, beta);
                }
                LayerParams::Relu => {}
            }
        }
    }

    /// Every stored value as mutable slices paired with `other`'s, in the
    /// same order. Used by the EMA rule. Fails if layouts differ.
    pub fn zip_stored_mut<'a>(
        &'a mut self,
        other: &'a StageParams,
    ) -> Result<Vec<(&'a mut [f64], &'a [f64])>> {
        let mismatch = || Error::Contract(format!("stage {} layouts differ", self.name));
        if self.layers.len() != other.layers.len() {
            return Err(mismatch());
        }
        let mut pairs = Vec::new();
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            match (mine, theirs) {
                (
                    LayerParams::Linear { weight, bias },
                    LayerParams::Linear {
                        weight: w2,
                        bias: b2,
                    },
                ) => {
                    if weight.shape() != w2.shape() || bias.shape() != b2.shape() {
                        return Err(mismatch());
                    }
                    pairs.push((weight.data_mut(), w2.data()));
                    pairs.push((bias.data_mut(), b2.data()));
                }
                (
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running,
                    },
                    LayerParams::BatchNorm {
                        gamma: g2,
                        beta: b2,
                        running: r2,
                    },
                ) => {
                    if gamma.shape() != g2.shape() || running.mean.len() != r2.mean.len() {
                        return Err(mismatch());
                    }
                    pairs.push((gamma.data_mut(), g2.data()));
                    pairs.push((beta.data_mut(), b2.data()));
                    pairs.push((&mut running.mean[..], &r2.mean[..]));
                    pairs.push((&mut running.var[..], &r2.var[..]));
                }
                (LayerParams::Relu, LayerParams::Relu) => {}
                _ => return Err(mismatch()),
            }
        }
        Ok(pairs)
    }

    /// Bitwise equality including running statistics.
    pub fn bit_eq(&self, other: &StageParams) -> bool {
        let mut a = self.clone();
        match a.zip_stored_mut(other) {
            Ok(pairs) => pairs.iter().all(|(x, y)| {
                x.len() == y.len()
                    && x.iter()
                        .zip(y.iter())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            }),
            Err(_) => false,
        }
    }

    /// Linear layers in order of appearance.
    pub fn linear(&self, ordinal: usize) -> Option<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerParams::Linear { weight, .. } => Some(weight),
                _ => None,
            })
            .nth(ordinal)
    }

    pub fn linear_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerParams::Linear { .. }))
            .count()
    }
}

impl<'a> BoundStage<'a> {
    /// Same parameter values behind detach marks, so nothing reaches them.
    pub fn detached(&self, tape: &mut Tape) -> Result<BoundStage<'a>> {
        let vars = self
            .vars
            .iter()
            .map(|v| {
                Ok(match *v {
                    LayerVars::Linear { weight, bias } => LayerVars::Linear {
                        weight: tape.detach(weight)?,
                        bias: tape.detach(bias)?,
                    },
                    LayerVars::BatchNorm { gamma, beta } => LayerVars::BatchNorm {
                        gamma: tape.detach(gamma)?,
                        beta: tape.detach(beta)?,
                    },
                    LayerVars::Relu => LayerVars::Relu,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundStage {
            params: self.params,
            vars,
        })
    }

    /// Trainable handles in [`StageParams::for_each_trainable`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars
            .iter()
            .flat_map(|v| match *v {
                LayerVars::Linear { weight, bias } => vec![weight, bias],
                LayerVars::BatchNorm { gamma, beta } => vec![gamma, beta],
                LayerVars::Relu => vec![],
            })
            .collect()
    }

    /// Run this stage on `x`, returning its output and any batch statistics.
    pub fn forward(&self, tape: &mut Tape, x: Var, phase: Phase) -> Result<(Var, Vec<BnRecord>)> {
        let name = self.params.name;
        let mut h = x;
        let mut records = Vec::new();
        for (idx, (layer, vars)) in self.params.layers.iter().zip(&self.vars).enumerate() {
            h = match (layer, vars) {
                (LayerParams::Linear { .. }, LayerVars::Linear { weight, bias }) => {
                    let y = tape.matmul(h, *weight)?;
                    tape.add_bias(y, *bias)?
                }
                (LayerParams::BatchNorm { running, .. }, LayerVars::BatchNorm { gamma, beta }) => {
                    let (y, stats) = tape.batch_norm(h, *gamma, *beta, phase, running)?;
                    if let Some(stats) = stats {
                        records.push(BnRecord {
                            stage: name,
                            layer: idx,
                            stats,
                        });
                    }
                    y
                }
                (LayerParams::Relu, LayerVars::Relu) => tape.relu(h)?,
                _ => unreachable!("bound vars mirror layers"),
            };
        }
        if self.params.residual {
            h = tape.add(h, x)?;
        }
        Ok((h, records))
    }
}

/// Outputs of one forward pass, one tape handle per executed stage.
#[derive(Clone, Debug, Default)]
pub struct StageActivations {
    pub outputs: Vec<(StageName, Var)>,
    pub bn_stats: Vec<BnRecord>,
}

impl StageActivations {
    pub fn get(&self, stage: StageName) -> Option<Var> {
        self.outputs
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| *v)
    }

    pub fn last(&self) -> Option<Var> {
        self.outputs.last().map(|(_, v)| *v)
    }

    pub fn stages(&self) -> Vec<StageName> {
        self.outputs.iter().map(|(s, _)| *s).collect()
    }
}

/// Run the bound stages starting at `start` on `input`.
pub fn forward_bound(
    tape: &mut Tape,
    stages: &[BoundStage<'_>],
    start: StageName,
    input: Var,
    phase: Phase,
) -> Result<StageActivations> {
    let first = stages
        .iter()
        .position(|s| s.params.name == start)
        .ok_or_else(|| Error::Config(format!("stage {start} is not part of this network")))?;
    let mut acts = StageActivations::default();
    let mut h = input;
    for stage in &stages[first..] {
        let name = stage.params.name;
        let (out, records) = stage
            .forward(tape, h, phase)
            .map_err(|e| e.at_stage(name.as_str()))?;
        acts.outputs.push((name, out));
        acts.bn_stats.extend(records);
        h = out;
    }
    Ok(acts)
}

/// Stage outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub outputs: Vec<(StageName, Tensor)>,
    pub bn_stats: Vec<BnRecord>,
}

impl StageOutputs {
    pub fn get(&self, stage: StageName) -> Option<&Tensor> {
        self.outputs
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, t)| t)
    }
}

/// Build parameters for `config`: He-normal linear weights, zero biases,
/// unit/zero batch-norm affine. Deterministic in `config.seed`.
pub fn build_encoder(config: &EncoderConfig) -> Result<ParamSet> {
    let dims = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stages = Vec::with_capacity(config.stages.len());
    for (spec, &(input, _)) in config.stages.iter().zip(&dims) {
        let mut width = input;
        let mut layers = Vec::new();
        for layer in &spec.layers {
            layers.push(match *layer {
                LayerSpec::Linear { input, output } => {
                    let std = (2.0 / input as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data = (0..input * output)
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    width = output;
                    LayerParams::Linear {
                        weight: Tensor::new(vec![input, output], data)?,
                        bias: Tensor::zeros(&[output]),
                    }
                }
                LayerSpec::Bn => batch_norm_layer(width),
                LayerSpec::Relu => LayerParams::Relu,
            });
        }
        if spec.output_bn {
            layers.push(batch_norm_layer(width));
        }
        stages.push(StageParams {
            name: spec.name,
            layers,
            residual: spec.residual,
        });
    }
    Ok(ParamSet {
        input_dim: config.input_dim,
        stages,
    })
}

fn batch_norm_layer(width: usize) -> LayerParams {
    LayerParams::BatchNorm {
        gamma: Tensor::filled(&[width], 1.0),
        beta: Tensor::zeros(&[width]),
        running: RunningStats::new(width),
    }
}

impl ParamSet {
    pub fn stage(&self, name: StageName) -> Option<&StageParams> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_mut(&mut self, name: StageName) -> Option<&mut StageParams> {
        self.stages.iter_mut().find(|s| s.name == name)
    }

    pub fn has_predictor(&self) -> bool {
        self.stage(StageName::Predictor).is_some()
    }

    pub fn trainable_count(&self) -> usize {
        self.stages.iter().map(StageParams::trainable_count).sum()
    }

    /// Stored bytes of every stage except the predictor.
    pub fn target_eligible_bytes(&self) -> u64 {
        self.stages
            .iter()
            .filter(|s| s.name != StageName::Predictor)
            .map(StageParams::bytes)
            .sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<BoundStage<'a>>> {
        self.stages
            .iter()
            .map(|s| s.bind(tape, requires_grad))
            .collect()
    }

    /// Fold recorded batch statistics into the running estimates.
    pub fn absorb_bn_stats(&mut self, records: &[BnRecord]) {
        for rec in records {
            let Some(stage) = self.stage_mut(rec.stage) else {
                continue;
            };
            if let Some(LayerParams::BatchNorm { running, .. }) = stage.layers.get_mut(rec.layer) {
                running.absorb(&rec.stats);
            }
        }
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.stages.len() == other.stages.len()
            && self
                .stages
                .iter()
                .zip(&other.stages)
                .all(|(a, b)| a.name == b.name && a.bit_eq(b))
    }

    /// Run every stage on `x`.
    pub fn forward_stages(&self, x: &Tensor, phase: Phase) -> Result<StageOutputs> {
        self.forward_from(StageName::Stem, x, phase)
    }

    /// Run the stages from `start` onward on `input` (the output of the
    /// stage before `start`, or the raw input for the stem).
    pub fn forward_from(
        &self,
        start: StageName,
        input: &Tensor,
        phase: Phase,
    ) -> Result<StageOutputs> {
        let idx = self
            .stages
            .iter()
            .position(|s| s.name == start)
            .ok_or_else(|| Error::Config(format!("stage {start} is not part of this network")))?;
        let expected = if idx == 0 {
            self.input_dim
        } else {
            let mut width = self.input_dim;
            for s in &self.stages[..idx] {
                width = stage_output_width(s, width);
            }
            width
        };
        match input.dims2() {
            Some((_, c)) if c == expected => {}
            _ => {
                return Err(Error::dim(
                    "forward",
                    format!(
                        "stage {start} expects [batch, {expected}], got {:?}",
                        input.shape()
                    ),
                ))
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.leaf(input.clone(), false)?;
        let acts = forward_bound(&mut tape, &bound, start, x, phase)?;
        Ok(StageOutputs {
            outputs: acts
                .outputs
                .iter()
                .map(|&(s, v)| (s, tape.value(v).clone()))
                .collect(),
            bn_stats: acts.bn_stats,
        })
    }
}

fn stage_output_width(stage: &StageParams, input: usize) -> usize {
    stage
        .layers
        .iter()
        .rev()
        .find_map(|l| match l {
            LayerParams::Linear { weight, .. } => Some(weight.shape()[1]),
            _ => None,
        })
        .unwrap_or(input)
}
