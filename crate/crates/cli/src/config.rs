//! Experiment and sweep configuration files.
//!
//! Both are TOML. Two shorthands are expanded before typed parsing so that
//! a dumped config always spells everything out:
//!
//! ```toml
//! [encoder]
//! preset = "paper"       # or "viz"; optional seed and predictor
//!
//! [train.policy]
//! preset = "projector-only"
//! beta = 0.99
//! ```

use std::path::{Path, PathBuf};

use emalab_core::data::{gen_blobs, load_csv_dataset, Dataset};
use emalab_core::encoder::EncoderConfig;
use emalab_core::eval::ProbeConfig;
use emalab_core::momentum::{MomentumPolicy, PolicyPreset};
use emalab_core::telemetry::WeightSelector;
use emalab_core::trainer::TrainConfig;
use emalab_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataSpec {
    /// Relative CSV paths resolve against `base` (the config's directory).
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
                seed,
            } => gen_blobs(*classes, *dim, *per_class, *spread, *seed),
            DataSpec::Csv { path } => load_csv_dataset(base.join(path)),
        }
    }
}

fn default_split_seed() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Probe every this many steps, plus at the start and the end.
    #[serde(default)]
    pub probe_every: usize,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            probe_every: 0,
            split_seed: default_split_seed(),
            probe: ProbeConfig::default(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySection {
    #[serde(default = "default_true")]
    pub record_weights: bool,
    #[serde(default)]
    pub weights: WeightSelector,
}

impl Default for TelemetrySection {
    fn default() -> Self {
        TelemetrySection {
            record_weights: true,
            weights: WeightSelector::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub telemetry: TelemetrySection,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Config(detail.into())
}

/// Replace `encoder.preset` and `train.policy.preset` with explicit tables.
fn expand_shorthands(doc: &mut toml::Table) -> Result<()> {
    let predictor_default = doc
        .get("train")
        .and_then(|t| t.get("objective"))
        .and_then(|o| o.get("kind"))
        .and_then(toml::Value::as_str)
        .is_none_or(|k| k == "negcosine");
    if let Some(enc) = doc.get_mut("encoder").and_then(toml::Value::as_table_mut) {
        if let Some(preset) = enc.remove("preset") {
            let preset = preset
                .as_str()
                .ok_or_else(|| bad("encoder.preset must be a string"))?
                .to_string();
            let seed = match enc.remove("seed") {
                None => 0,
                Some(v) => v
                    .as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| bad("encoder.seed must be a non-negative integer"))?,
            };
            let predictor = match enc.remove("predictor") {
                None => predictor_default,
                Some(v) => v
                    .as_bool()
                    .ok_or_else(|| bad("encoder.predictor must be a boolean"))?,
            };
            if let Some(extra) = enc.keys().next() {
                return Err(bad(format!("unknown key '{extra}' next to encoder.preset")));
            }
            let cfg = match preset.as_str() {
                "paper" => EncoderConfig::paper_shaped(seed, predictor),
                "viz" => EncoderConfig::viz(seed, predictor),
                other => {
                    return Err(bad(format!(
                        "unknown encoder preset '{other}' (paper, viz)"
                    )))
                }
            };
            *enc = toml::Table::try_from(&cfg).map_err(|e| bad(e.to_string()))?;
        }
    }
    let policy = doc
        .get_mut("train")
        .and_then(toml::Value::as_table_mut)
        .and_then(|t| t.get_mut("policy"))
        .and_then(toml::Value::as_table_mut);
    if let Some(policy) = policy {
        if let Some(preset) = policy.remove("preset") {
            let preset: PolicyPreset = preset
                .as_str()
                .ok_or_else(|| bad("train.policy.preset must be a string"))?
                .parse()?;
            let beta = match policy.remove("beta") {
                Some(v) => v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| bad("train.policy.beta must be a number"))?,
                None => 0.99,
            };
            if let Some(extra) = policy.keys().next() {
                return Err(bad(format!(
                    "unknown key '{extra}' next to train.policy.preset"
                )));
            }
            let resolved = preset.policy(beta)?;
            *policy = toml::Table::try_from(&resolved).map_err(|e| bad(e.to_string()))?;
        }
    }
    Ok(())
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| bad(format!("{origin}: {}", e.to_string().trim_end())))
}

fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table, origin: &str) -> Result<T> {
    T::deserialize(toml::Value::Table(table))
        .map_err(|e| bad(format!("{origin}: {}", e.to_string().trim_end())))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let mut table = parse_table(text, origin)?;
        expand_shorthands(&mut table)?;
        let cfg: ExperimentConfig = from_table(table, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are representable in TOML")
    }

    /// Checks that need no data: encoder shape, training knobs, selectors.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate(self.encoder.has_predictor())?;
        if let DataSpec::Blobs {
            classes,
            dim,
            spread,
            ..
        } = self.data
        {
            if classes < 2 || dim < 2 || spread.is_nan() || spread < 0.0 {
                return Err(bad("blobs need classes >= 2, dim >= 2 and spread >= 0"));
            }
            if dim != self.encoder.input_dim {
                return Err(bad(format!(
                    "data dim {dim} differs from encoder input_dim {}",
                    self.encoder.input_dim
                )));
            }
        }
        if self.telemetry.record_weights && self.telemetry.weights.stride == 0 {
            return Err(bad("telemetry.weights.stride must be positive"));
        }
        if self.eval.probe.batch == 0 || self.eval.probe.lr.is_nan() || self.eval.probe.lr <= 0.0 {
            return Err(bad("eval.probe batch and lr must be positive"));
        }
        Ok(())
    }

    /// `--seed` override: the training stream and the encoder initialization.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.encoder.seed = seed;
    }

    pub fn with_policy(&self, policy: MomentumPolicy) -> Self {
        let mut cfg = self.clone();
        cfg.train.policy = policy;
        cfg
    }
}

/// A grid of policy presets against EMA coefficients over one base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub presets: Vec<PolicyPreset>,
    pub betas: Vec<f64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let mut table = parse_table(text, origin)?;
        let base = table
            .get_mut("base")
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| bad(format!("{origin}: missing [base] experiment table")))?;
        // The base policy is replaced per cell; give it a placeholder.
        if let Some(train) = base.get_mut("train").and_then(toml::Value::as_table_mut) {
            train.entry("policy").or_insert_with(|| {
                toml::Value::Table(toml::Table::from_iter([(
                    "preset".to_string(),
                    "none".into(),
                )]))
            });
        }
        expand_shorthands(base)?;
        let spec: SweepSpec = from_table(table, origin)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read sweep {}: {e}", path.display())))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() || self.betas.is_empty() {
            return Err(bad("sweep needs at least one preset and one beta"));
        }
        for &b in &self.betas {
            emalab_core::momentum::check_beta(b)?;
        }
        self.base.validate()
    }

    /// Cells in row-major (preset, beta) order.
    pub fn cells(&self) -> Vec<(PolicyPreset, f64)> {
        self.presets
            .iter()
            .flat_map(|&p| self.betas.iter().map(move |&b| (p, b)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use emalab_core::momentum::Mode;
    use emalab_core::StageName;

    pub(crate) const MINIMAL: &str = r#"
[data]
kind = "blobs"
classes = 4
dim = 32
per_class = 16
spread = 0.1

[encoder]
preset = "paper"
seed = 1

[train]
steps = 4
batch = 16
lr = 0.05
objective = { kind = "negcosine" }
policy = { preset = "projector-only", beta = 0.99 }
"#;

    #[test]
    fn presets_expand_and_defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "test").unwrap();
        assert!(cfg.encoder.has_predictor());
        assert_eq!(cfg.encoder.seed, 1);
        assert_eq!(
            cfg.train.policy.mode(StageName::Projector),
            Mode::Ema { beta: 0.99 }
        );
        assert_eq!(cfg.train.policy.mode(StageName::Block4), Mode::Share);
        assert_eq!(cfg.train.sgd_momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.eval.probe.epochs, 200);
    }

    #[test]
    fn dumped_config_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "test").unwrap();
        let dumped = cfg.to_toml();
        assert!(!dumped.contains("preset"));
        let back = ExperimentConfig::from_toml(&dumped, "dump").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), dumped);
    }

    #[test]
    fn beta_out_of_range_is_reported() {
        let text = MINIMAL.replace("beta = 0.99", "beta = 1.2");
        let err = ExperimentConfig::from_toml(&text, "test").unwrap_err();
        assert!(err.to_string().contains("beta out of range [0,1]"), "{err}");
        let text = MINIMAL.replace(
            "policy = { preset = \"projector-only\", beta = 0.99 }",
            "policy = { stem = { mode = \"share\" }, block1 = { mode = \"share\" }, block2 = { mode = \"share\" }, block3 = { mode = \"share\" }, block4 = { mode = \"share\" }, projector = { mode = \"ema\", beta = 1.2 } }",
        );
        let err = ExperimentConfig::from_toml(&text, "test").unwrap_err();
        assert!(err.to_string().contains("beta out of range [0,1]"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("lr = 0.05", "lr = 0.05\nlearning_rate = 1.0");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, "t"),
            Err(Error::Config(_))
        ));
        let text = MINIMAL.replace("seed = 1", "seed = 1\nwidth = 3");
        assert!(ExperimentConfig::from_toml(&text, "t").is_err());
    }

    #[test]
    fn data_and_encoder_widths_must_agree() {
        let text = MINIMAL.replace("dim = 32", "dim = 16");
        let err = ExperimentConfig::from_toml(&text, "t").unwrap_err();
        assert!(err.to_string().contains("input_dim"), "{err}");
    }

    #[test]
    fn sweep_cells_are_row_major() {
        let text = format!(
            "presets = [\"none\", \"projector-only\", \"full\"]\nbetas = [0.99]\n{}",
            MINIMAL
                .replace("[data]", "[base.data]")
                .replace("[encoder]", "[base.encoder]")
                .replace("[train]", "[base.train]")
        );
        let sweep = SweepSpec::from_toml(&text, "t").unwrap();
        let cells = sweep.cells();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[1], (PolicyPreset::ProjectorOnly, 0.99));
        let bad = text.replace("betas = [0.99]", "betas = [0.99, 1.5]");
        assert!(SweepSpec::from_toml(&bad, "t").is_err());
    }
}
