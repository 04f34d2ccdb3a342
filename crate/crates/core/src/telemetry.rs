//! Per-stage gradient traces, weight trajectories and curve rows, with
//! exact CSV round-tripping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tape};
use crate::encoder::{ParamSet, StageActivations, StageName};
use crate::error::{Error, Result};
use crate::momentum::TargetParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GradTraceRow {
    pub step: usize,
    pub stage: StageName,
    /// Largest absolute entry of the loss gradient at the stage output.
    pub linf: f64,
    pub l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Online,
    Target,
}

impl Network {
    pub fn as_str(self) -> &'static str {
        match self {
            Network::Online => "online",
            Network::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTrajectoryRow {
    pub step: usize,
    pub network: Network,
    pub filter: usize,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: usize,
    pub knn1: f64,
    pub linear: f64,
    pub embed_std: f64,
}

/// Which weights to trace: the output columns ("filters") of one linear
/// layer of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSelector {
    pub stage: StageName,
    /// Ordinal among the stage's linear layers; `None` picks the last one.
    #[serde(default)]
    pub linear: Option<usize>,
    /// Filter indices; `None` records all of them.
    #[serde(default)]
    pub filters: Option<Vec<usize>>,
    /// Record every `stride` steps.
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl Default for WeightSelector {
    fn default() -> Self {
        WeightSelector {
            stage: StageName::Projector,
            linear: None,
            filters: None,
            stride: 1,
        }
    }
}

impl WeightSelector {
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("weight trace stride must be positive".into()));
        }
        self.columns(params).map(|_| ())
    }

    /// Resolve to `(linear ordinal, filter indices)` for `params`.
    fn columns(&self, params: &ParamSet) -> Result<(usize, Vec<usize>)> {
        let stage = params
            .stage(self.stage)
            .ok_or_else(|| Error::Config(format!("weight selector: no stage {}", self.stage)))?;
        let count = stage.linear_count();
        let ordinal = self.linear.unwrap_or(count.saturating_sub(1));
        let weight = stage.linear(ordinal).ok_or_else(|| {
            Error::Config(format!(
                "weight selector: stage {} has {count} linear layers, asked for {ordinal}",
                self.stage
            ))
        })?;
        let (_, outputs) = weight.dims2().expect("linear weights are matrices");
        let filters = match &self.filters {
            None => (0..outputs).collect(),
            Some(f) => {
                if let Some(bad) = f.iter().find(|&&i| i >= outputs) {
                    return Err(Error::Config(format!(
                        "weight selector: filter {bad} out of range (layer has {outputs})"
                    )));
                }
                f.clone()
            }
        };
        Ok((ordinal, filters))
    }
}

/// One row per stage present in `acts[0]`; ℓ∞ and ℓ2 are taken over the
/// gradients at that stage's output across every activation set (both
/// views). A stage with no gradient path gets zeros.
pub fn record_stage_grads(
    step: usize,
    tape: &Tape,
    grads: &GradMap,
    acts: &[&StageActivations],
) -> Result<Vec<GradTraceRow>> {
    let Some(first) = acts.first() else {
        return Ok(Vec::new());
    };
    let mut rows = Vec::with_capacity(first.outputs.len());
    for (stage, _) in &first.outputs {
        let mut linf = 0.0f64;
        let mut sq = 0.0;
        for a in acts {
            let v = a.get(*stage).ok_or_else(|| {
                Error::Contract(format!("no activation recorded for stage {stage}"))
            })?;
            if let Some(g) = grads.get(v) {
                debug_assert_eq!(g.shape(), tape.value(v).shape());
                for x in g.data() {
                    linf = linf.max(x.abs());
                    sq += x * x;
                }
            }
        }
        rows.push(GradTraceRow {
            step,
            stage: *stage,
            linf,
            l2: sq.sqrt(),
        });
    }
    Ok(rows)
}

/// Selected filters of the online and target networks. A stage the target
/// shares is read from the online parameters.
pub fn record_weight_slice(
    step: usize,
    online: &ParamSet,
    target: &TargetParams,
    selector: &WeightSelector,
) -> Result<Vec<WeightTrajectoryRow>> {
    let (ordinal, filters) = selector.columns(online)?;
    let mut rows = Vec::with_capacity(2 * filters.len());
    for network in [Network::Online, Network::Target] {
        let stage = match network {
            Network::Online => online.stage(selector.stage),
            Network::Target => target.effective(online, selector.stage),
        }
        .ok_or_else(|| Error::Config(format!("weight selector: no stage {}", selector.stage)))?;
        let weight = stage
            .linear(ordinal)
            .ok_or_else(|| Error::Config("weight selector: layer missing on target".into()))?;
        let (inputs, outputs) = weight.dims2().expect("linear weights are matrices");
        for &j in &filters {
            rows.push(WeightTrajectoryRow {
                step,
                network,
                filter: j,
                w: (0..inputs)
                    .map(|i| weight.data()[i * outputs + j])
                    .collect(),
            });
        }
    }
    Ok(rows)
}

/// Rows that can be written to a CSV file with a fixed header.
pub trait CsvRecord {
    fn fields(&self) -> Vec<String>;
}

impl CsvRecord for GradTraceRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.stage.to_string(),
            self.linf.to_string(),
            self.l2.to_string(),
        ]
    }
}

impl CsvRecord for WeightTrajectoryRow {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.step.to_string(),
            self.network.as_str().to_string(),
            self.filter.to_string(),
        ];
        f.extend(self.w.iter().map(f64::to_string));
        f
    }
}

impl CsvRecord for CurveRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.loss.to_string(),
            self.lr.to_string(),
        ]
    }
}

impl CsvRecord for ProbeRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.knn1.to_string(),
            self.linear.to_string(),
            self.embed_std.to_string(),
        ]
    }
}

pub const GRADS_HEADER: &[&str] = &["step", "stage", "linf", "l2"];
pub const CURVE_HEADER: &[&str] = &["step", "loss", "lr"];
pub const PROBE_HEADER: &[&str] = &["step", "knn1", "linear", "embed_std"];

/// `step,network,filter,w0..w{width-1}`.
pub fn weights_header(width: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "network", "filter"].map(String::from).to_vec();
    h.extend((0..width).map(|i| format!("w{i}")));
    h
}

/// Write `header` then one line per row. Floats use the shortest decimal
/// form that parses back to the same bits.
pub fn export_csv<R: CsvRecord>(
    rows: &[R],
    path: impl AsRef<Path>,
    header: &[impl AsRef<str>],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(&mut out, rows, header)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv<R: CsvRecord>(
    out: &mut impl Write,
    rows: &[R],
    header: &[impl AsRef<str>],
) -> Result<()> {
    let header: Vec<&str> = header.iter().map(AsRef::as_ref).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let fields = row.fields();
        if fields.len() != header.len() {
            return Err(Error::Contract(format!(
                "row has {} fields, header has {}",
                fields.len(),
                header.len()
            )));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

fn read_records(path: &Path, header: Option<&[&str]>) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(header.is_none())
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 1,
                detail: format!("{other:?}"),
            },
        })?;
    if let Some(expected) = header {
        let found = reader.headers().map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?;
        if found.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected header {}", expected.join(",")),
            });
        }
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                detail: e.to_string(),
            })?;
            Ok((r.position().map_or(0, |p| p.line()), r))
        })
        .collect()
}

fn field<T: std::str::FromStr>(line: u64, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        detail: format!("missing field {i}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        detail: format!("cannot parse field {i} '{raw}'"),
    })
}

pub fn read_grads(path: impl AsRef<Path>) -> Result<Vec<GradTraceRow>> {
    read_records(path.as_ref(), Some(GRADS_HEADER))?
        .iter()
        .map(|(line, r)| {
            Ok(GradTraceRow {
                step: field(*line, r, 0)?,
                stage: field(*line, r, 1)?,
                linf: field(*line, r, 2)?,
                l2: field(*line, r, 3)?,
            })
        })
        .collect()
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    read_records(path.as_ref(), Some(CURVE_HEADER))?
        .iter()
        .map(|(line, r)| {
            Ok(CurveRow {
                step: field(*line, r, 0)?,
                loss: field(*line, r, 1)?,
                lr: field(*line, r, 2)?,
            })
        })
        .collect()
}

pub fn read_probe(path: impl AsRef<Path>) -> Result<Vec<ProbeRow>> {
    read_records(path.as_ref(), Some(PROBE_HEADER))?
        .iter()
        .map(|(line, r)| {
            Ok(ProbeRow {
                step: field(*line, r, 0)?,
                knn1: field(*line, r, 1)?,
                linear: field(*line, r, 2)?,
                embed_std: field(*line, r, 3)?,
            })
        })
        .collect()
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Vec<WeightTrajectoryRow>> {
    read_records(path.as_ref(), None)?
        .iter()
        .map(|(line, r)| {
            let network = match r.get(1) {
                Some("online") => Network::Online,
                Some("target") => Network::Target,
                other => {
                    return Err(Error::Parse {
                        line: *line,
                        detail: format!("unknown network {other:?}"),
                    })
                }
            };
            Ok(WeightTrajectoryRow {
                step: field(*line, r, 0)?,
                network,
                filter: field(*line, r, 2)?,
                w: (3..r.len())
                    .map(|i| field(*line, r, i))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

impl std::str::FromStr for Network {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(Network::Online),
            "target" => Ok(Network::Target),
            _ => Err(Error::Config(format!("unknown network '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Phase;
    use crate::encoder::{build_encoder, forward_bound, EncoderConfig};
    use crate::momentum::{init_target, MomentumPolicy};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn single_row_renders_plainly() {
        let mut buf = Vec::new();
        let row = GradTraceRow {
            step: 5,
            stage: StageName::Projector,
            linf: 0.25,
            l2: 0.5,
        };
        write_csv(&mut buf, &[row], GRADS_HEADER).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,stage,linf,l2\n5,projector,0.25,0.5\n");
    }

    #[test]
    fn empty_rows_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        export_csv::<GradTraceRow>(&[], &path, GRADS_HEADER).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,stage,linf,l2\n"
        );
        assert!(read_grads(&path).unwrap().is_empty());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err =
            export_csv::<CurveRow>(&[], "/nonexistent-dir/x/curve.csv", CURVE_HEADER).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..20)) {
            let vals: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.csv");
            let rows: Vec<CurveRow> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| CurveRow { step: i, loss: v, lr: -v / 3.0 })
                .collect();
            export_csv(&rows, &path, CURVE_HEADER).unwrap();
            let back = read_curve(&path).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            for (a, b) in rows.iter().zip(&back) {
                prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
                prop_assert_eq!(a.lr.to_bits(), b.lr.to_bits());
            }
        }
    }

    #[test]
    fn weight_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let rows = vec![
            WeightTrajectoryRow {
                step: 0,
                network: Network::Online,
                filter: 3,
                w: vec![0.1, -2.5e-300],
            },
            WeightTrajectoryRow {
                step: 0,
                network: Network::Target,
                filter: 3,
                w: vec![1.0 / 3.0, 7.0],
            },
        ];
        export_csv(&rows, &path, &weights_header(2)).unwrap();
        assert_eq!(read_weights(&path).unwrap(), rows);
    }

    #[test]
    fn constant_derivative_gives_linf_three() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.3, -1.0]), true).unwrap();
        let s = tape.sum(a).unwrap();
        let loss = tape.scale(s, 3.0).unwrap();
        let acts = StageActivations {
            outputs: vec![(StageName::Stem, a)],
            bn_stats: vec![],
        };
        let grads = tape.backward(loss).unwrap();
        let rows = record_stage_grads(0, &tape, &grads, &[&acts]).unwrap();
        assert_eq!(rows[0].linf, 3.0);
        assert!((rows[0].l2 - 18f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn detached_stage_reports_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0]), true).unwrap();
        let b = tape.leaf(Tensor::vector(vec![2.0]), true).unwrap();
        let d = tape.detach(b).unwrap();
        let s = tape.add(a, d).unwrap();
        let loss = tape.sum(s).unwrap();
        let acts = StageActivations {
            outputs: vec![(StageName::Stem, a), (StageName::Block1, b)],
            bn_stats: vec![],
        };
        let grads = tape.backward(loss).unwrap();
        let rows = record_stage_grads(1, &tape, &grads, &[&acts]).unwrap();
        assert_eq!((rows[0].linf, rows[1].linf), (1.0, 0.0));
    }

    #[test]
    fn stage_linf_matches_finite_differences() {
        let params = build_encoder(&EncoderConfig::paper_shaped(3, false)).unwrap();
        let x = crate::data::gen_blobs(2, 32, 4, 0.3, 1).unwrap().x;
        let w = crate::data::gen_blobs(2, 32, 4, 1.0, 2).unwrap().x;
        // L = sum(w ⊙ projector(block4)); check ∂L/∂block4 numerically.
        let loss_from_block4 = |h: &Tensor| -> f64 {
            let out = params
                .forward_from(StageName::Projector, h, Phase::Eval)
                .unwrap();
            let z = out.get(StageName::Projector).unwrap();
            z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let acts = forward_bound(&mut tape, &bound, StageName::Stem, xv, Phase::Eval).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(acts.last().unwrap(), wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let rows = record_stage_grads(0, &tape, &grads, &[&acts]).unwrap();
        let block4 = tape.value(acts.get(StageName::Block4).unwrap()).clone();
        let h = 1e-5;
        let mut fd_linf = 0.0f64;
        for i in 0..block4.len() {
            let mut plus = block4.clone();
            plus.data_mut()[i] += h;
            let mut minus = block4.clone();
            minus.data_mut()[i] -= h;
            fd_linf = fd_linf
                .max(((loss_from_block4(&plus) - loss_from_block4(&minus)) / (2.0 * h)).abs());
        }
        let row = rows.iter().find(|r| r.stage == StageName::Block4).unwrap();
        assert!(
            (row.linf - fd_linf).abs() <= 1e-4 * fd_linf.max(1.0),
            "{} vs {fd_linf}",
            row.linf
        );
    }

    #[test]
    fn viz_filters_are_two_dimensional() {
        let online = build_encoder(&EncoderConfig::viz(0, false)).unwrap();
        let target = init_target(&online, &MomentumPolicy::projector_only(0.99).unwrap()).unwrap();
        let rows = record_weight_slice(0, &online, &target, &WeightSelector::default()).unwrap();
        assert_eq!(rows.len(), 2 * 32);
        assert!(rows.iter().all(|r| r.w.len() == 2));
        let (on, tg) = rows.split_at(32);
        assert!(on.iter().zip(tg).all(|(a, b)| a.w == b.w));
    }

    #[test]
    fn selector_out_of_range_is_config_error() {
        let online = build_encoder(&EncoderConfig::viz(0, false)).unwrap();
        let target = init_target(&online, &MomentumPolicy::projector_only(0.99).unwrap()).unwrap();
        let sel = WeightSelector {
            filters: Some(vec![32]),
            ..WeightSelector::default()
        };
        assert!(matches!(
            record_weight_slice(0, &online, &target, &sel),
            Err(Error::Config(_))
        ));
        let sel = WeightSelector {
            linear: Some(5),
            ..WeightSelector::default()
        };
        assert!(matches!(sel.validate(&online), Err(Error::Config(_))));
    }
}
