//! Batch front end: train one experiment, sweep policy presets against EMA
//! coefficients, re-probe a finished run, or run the gradient-check suite.
//!
//! Every run directory is self-describing: it holds the fully materialized
//! `config.toml`, the CSV traces, `counts.json`, `params.json` and a
//! `manifest.json` with SHA-256 checksums.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use emalab_core::encoder::{build_encoder, ParamSet};
use emalab_core::eval::{probe_snapshot, ProbeReport};
use emalab_core::gradcheck::{run_suite, CheckOutcome, DEFAULT_STEP};
use emalab_core::momentum::{PolicyPreset, TargetParams};
use emalab_core::telemetry::{
    export_csv, weights_header, GradTraceRow, ProbeRow, CURVE_HEADER, GRADS_HEADER, PROBE_HEADER,
};
use emalab_core::trainer::{count_report, run_training, CountReport, RunOptions};
use emalab_core::{Error, Result, StageName};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{DataSpec, ExperimentConfig, SweepSpec};

/// 2 for bad input (config, parse, missing files), 3 for numeric aborts.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        detail: format!("{}: {e}", path.display()),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedParams {
    pub online: ParamSet,
    pub target: TargetParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub encoder_seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

/// Headline numbers of a finished run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub final_loss: Option<f64>,
    pub probe: Option<ProbeReport>,
    pub counts: CountReport,
    /// Mean projector ℓ∞ over mean block1 ℓ∞ across the run.
    pub linf_ratio: Option<f64>,
}

fn mean_linf(rows: &[GradTraceRow], stage: StageName) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.linf)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Make a CSV data path absolute so the saved config is usable from anywhere.
fn anchor_paths(cfg: &mut ExperimentConfig, base: &Path) -> Result<()> {
    if let DataSpec::Csv { path } = &mut cfg.data {
        let joined = base.join(&*path);
        *path = joined
            .canonicalize()
            .map_err(|e| Error::Config(format!("data file {}: {e}", joined.display())))?;
    }
    Ok(())
}

/// Run one experiment and write its artifacts under `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, config_dir: &Path) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    anchor_paths(&mut cfg, config_dir)?;
    cfg.out_dir = None;
    cfg.validate()?;
    let data = cfg.data.load(config_dir)?;
    if data.dim() != cfg.encoder.input_dim {
        return Err(Error::Config(format!(
            "data has {} features, encoder expects {}",
            data.dim(),
            cfg.encoder.input_dim
        )));
    }
    let (train, test) = data.train_test_split(cfg.eval.split_seed);
    let init = build_encoder(&cfg.encoder)?;
    let opts = RunOptions {
        weights: cfg
            .telemetry
            .record_weights
            .then(|| cfg.telemetry.weights.clone()),
        probe_every: cfg.eval.probe_every,
        probe: cfg.eval.probe.clone(),
        eval_sets: Some((train.clone(), test)),
    };
    fs::create_dir_all(out)?;
    let config_text = cfg.to_toml();
    fs::write(out.join("config.toml"), &config_text)?;

    let art = run_training(&cfg.train, init, &train, &opts)?;
    let counts = count_report(&art.counter);

    export_csv(&art.curve, out.join("curve.csv"), CURVE_HEADER)?;
    export_csv(&art.grads, out.join("grads.csv"), GRADS_HEADER)?;
    let probe_rows: Vec<ProbeRow> = art
        .probes
        .iter()
        .map(|p| ProbeRow {
            step: p.step,
            knn1: p.knn1_acc,
            linear: p.linear_acc,
            embed_std: p.embed_std,
        })
        .collect();
    export_csv(&probe_rows, out.join("probe.csv"), PROBE_HEADER)?;
    let mut files = vec![
        "config.toml",
        "curve.csv",
        "grads.csv",
        "probe.csv",
        "counts.json",
        "params.json",
    ];
    if cfg.telemetry.record_weights {
        let width = weight_width(&art.online, &cfg);
        export_csv(
            &art.weights,
            out.join("weights.csv"),
            &weights_header(width),
        )?;
        files.push("weights.csv");
    }
    write_json(&out.join("counts.json"), &counts)?;
    write_json(
        &out.join("params.json"),
        &SavedParams {
            online: art.online.clone(),
            target: art.target.clone(),
        },
    )?;

    let mut artifacts = BTreeMap::new();
    for f in files {
        artifacts.insert(f.to_string(), sha256_hex(&fs::read(out.join(f))?));
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed: cfg.train.seed,
            encoder_seed: cfg.encoder.seed,
            artifacts,
        },
    )?;

    let linf_ratio = match (
        mean_linf(&art.grads, StageName::Projector),
        mean_linf(&art.grads, StageName::Block1),
    ) {
        (Some(p), Some(b)) if b > 0.0 => Some(p / b),
        _ => None,
    };
    Ok(TrainSummary {
        dir: out.to_path_buf(),
        final_loss: art.curve.last().map(|r| r.loss),
        probe: art.probes.last().cloned(),
        counts,
        linf_ratio,
    })
}

/// Input width of the selected linear layer, for the weights.csv header.
fn weight_width(params: &ParamSet, cfg: &ExperimentConfig) -> usize {
    let sel = &cfg.telemetry.weights;
    params
        .stage(sel.stage)
        .and_then(|s| s.linear(sel.linear.unwrap_or(s.linear_count().saturating_sub(1))))
        .and_then(|w| w.dims2())
        .map_or(0, |(i, _)| i)
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "preset",
    "beta",
    "final_loss",
    "knn1",
    "linear",
    "embed_std",
    "target_backbone_fwd_ratio",
    "target_param_bytes",
    "proj_block1_linf_ratio",
    "status",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub preset: PolicyPreset,
    pub beta: f64,
    pub final_loss: Option<f64>,
    pub knn1: Option<f64>,
    pub linear: Option<f64>,
    pub embed_std: Option<f64>,
    pub target_backbone_fwd_ratio: Option<f64>,
    pub target_param_bytes: Option<u64>,
    pub linf_ratio: Option<f64>,
    pub status: String,
}

impl SummaryRow {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        vec![
            self.preset.to_string(),
            self.beta.to_string(),
            opt(self.final_loss),
            opt(self.knn1),
            opt(self.linear),
            opt(self.embed_std),
            opt(self.target_backbone_fwd_ratio),
            self.target_param_bytes
                .map_or_else(String::new, |b| b.to_string()),
            opt(self.linf_ratio),
            self.status.clone(),
        ]
    }
}

pub fn cell_dir_name(preset: PolicyPreset, beta: f64) -> String {
    format!("{}_beta{}", preset.as_str().replace('+', "-"), beta)
}

/// Run every (preset, beta) cell in parallel, each into its own directory
/// under `out/cells`, and write `out/summary.csv`. A failing cell is
/// recorded in its row and the sweep carries on.
pub fn cmd_compare(spec: &SweepSpec, out: &Path, config_dir: &Path) -> Result<Vec<SummaryRow>> {
    spec.validate()?;
    fs::create_dir_all(out.join("cells"))?;
    let rows: Vec<SummaryRow> = spec
        .cells()
        .into_par_iter()
        .map(|(preset, beta)| {
            let dir = out.join("cells").join(cell_dir_name(preset, beta));
            let result = preset
                .policy(beta)
                .and_then(|policy| cmd_train(&spec.base.with_policy(policy), &dir, config_dir));
            match result {
                Ok(s) => SummaryRow {
                    preset,
                    beta,
                    final_loss: s.final_loss,
                    knn1: s.probe.as_ref().map(|p| p.knn1_acc),
                    linear: s.probe.as_ref().map(|p| p.linear_acc),
                    embed_std: s.probe.as_ref().map(|p| p.embed_std),
                    target_backbone_fwd_ratio: Some(s.counts.target_backbone_fwd_ratio),
                    target_param_bytes: Some(s.counts.target_param_bytes),
                    linf_ratio: s.linf_ratio,
                    status: "ok".into(),
                },
                Err(e) => SummaryRow {
                    preset,
                    beta,
                    final_loss: None,
                    knn1: None,
                    linear: None,
                    embed_std: None,
                    target_backbone_fwd_ratio: None,
                    target_param_bytes: None,
                    linf_ratio: None,
                    status: format!("aborted: {e}"),
                },
            }
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in &rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("{other:?}")),
    }
}

/// Re-evaluate the final snapshot of a run directory into `probe.json`.
pub fn cmd_probe(run_dir: &Path) -> Result<ProbeReport> {
    let cfg_path = run_dir.join("config.toml");
    if !cfg_path.is_file() {
        return Err(Error::Config(format!(
            "{} is not a run directory (no config.toml)",
            run_dir.display()
        )));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let saved: SavedParams = read_json(&run_dir.join("params.json"))?;
    let expected = build_encoder(&cfg.encoder)?;
    if expected.stages.len() != saved.online.stages.len()
        || expected
            .stages
            .iter()
            .zip(&saved.online.stages)
            .any(|(a, b)| a.name != b.name || a.stored_count() != b.stored_count())
    {
        return Err(Error::Parse {
            line: 0,
            detail: "params.json does not match the run's encoder layout".into(),
        });
    }
    let data = cfg.data.load(run_dir)?;
    let (train, test) = data.train_test_split(cfg.eval.split_seed);
    let report = probe_snapshot(
        &saved.online,
        &train,
        &test,
        &cfg.eval.probe,
        cfg.train.steps,
    )?;
    write_json(&run_dir.join("probe.json"), &report)?;
    Ok(report)
}

pub fn cmd_grad_check(instances: usize) -> Result<Vec<CheckOutcome>> {
    run_suite(instances, DEFAULT_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::NonFinite {
                primitive: "relu",
                stage: None,
                step: None
            }),
            3
        );
        assert_eq!(exit_code(&Error::Contract("x".into())), 1);
    }

    #[test]
    fn cell_names_are_path_safe() {
        assert_eq!(
            cell_dir_name(PolicyPreset::Block4Projector, 0.99),
            "block4-projector_beta0.99"
        );
    }

    #[test]
    fn summary_fields_leave_failures_blank() {
        let row = SummaryRow {
            preset: PolicyPreset::None,
            beta: 0.5,
            final_loss: None,
            knn1: None,
            linear: None,
            embed_std: None,
            target_backbone_fwd_ratio: None,
            target_param_bytes: None,
            linf_ratio: None,
            status: "aborted: x".into(),
        };
        let f = row.fields();
        assert_eq!(f.len(), SUMMARY_HEADER.len());
        assert_eq!(f[0], "none");
        assert!(f[2..9].iter().all(String::is_empty));
    }
}
