//! Per-iteration records and their line-delimited JSON / CSV forms.
//!
//! Both files carry the columns `round, iter, clock, loss, grad_sq_norm,
//! msgs_scalars` in that order. `loss` and `grad_sq_norm` describe the
//! virtual model at the start of the iteration and are empty when not
//! evaluated. `clock` is the simulated time at the start of the round.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::message::MessageRecord;
use crate::error::Result;
use crate::global::GlobalModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: u64,
    pub iteration: u64,
    pub clock: f64,
    pub loss: Option<f64>,
    pub grad_sq_norm: Option<f64>,
    pub msgs_scalars: usize,
    /// θ̃^t: per-silo mean of client blocks before the step, flattened.
    /// Empty unless iterate recording is on.
    pub virtual_model: Vec<f64>,
    /// G^t: per-silo mean of client gradients at this step, flattened.
    pub mean_gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub records: Vec<IterationRecord>,
    pub messages: Vec<MessageRecord>,
    /// Clock after the round has been charged.
    pub end_clock: f64,
}

impl RoundTrace {
    pub fn start_loss(&self) -> Option<f64> {
        self.records.first().and_then(|r| r.loss)
    }

    pub fn start_grad_sq_norm(&self) -> Option<f64> {
        self.records.first().and_then(|r| r.grad_sq_norm)
    }

    pub fn message_scalars(&self) -> usize {
        self.messages.iter().map(|m| m.scalars).sum()
    }
}

/// Model state after the last round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub round: u64,
    pub iteration: u64,
    pub clock: f64,
    pub loss: f64,
    pub grad_sq_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundTrace>,
    pub initial_loss: f64,
    pub final_state: FinalState,
    pub model: GlobalModel,
    pub warnings: Vec<String>,
}

impl TrainingTrace {
    pub fn records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.rounds.iter().flat_map(|r| r.records.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Round-start (clock, loss) pairs followed by the final state.
    pub fn loss_curve(&self) -> Vec<(f64, f64)> {
        let mut curve: Vec<(f64, f64)> = self
            .rounds
            .iter()
            .filter_map(|r| r.records.first().and_then(|rec| rec.loss.map(|l| (rec.clock, l))))
            .collect();
        if !self.rounds.is_empty() {
            curve.push((self.final_state.clock, self.final_state.loss));
        }
        curve
    }

    /// Rows for the trace files: every iteration record, then the final
    /// state as an `iter = T` row. Empty when no round ran.
    pub fn rows(&self) -> Vec<TraceRow> {
        let mut rows: Vec<TraceRow> = self.records().map(TraceRow::from).collect();
        if !self.rounds.is_empty() {
            let f = &self.final_state;
            rows.push(TraceRow {
                round: f.round,
                iter: f.iteration,
                clock: f.clock,
                loss: Some(f.loss),
                grad_sq_norm: Some(f.grad_sq_norm),
                msgs_scalars: 0,
            });
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u64,
    pub iter: u64,
    pub clock: f64,
    pub loss: Option<f64>,
    pub grad_sq_norm: Option<f64>,
    pub msgs_scalars: usize,
}

impl From<&IterationRecord> for TraceRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            round: r.round,
            iter: r.iteration,
            clock: r.clock,
            loss: r.loss,
            grad_sq_norm: r.grad_sq_norm,
            msgs_scalars: r.msgs_scalars,
        }
    }
}

pub fn write_jsonl(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "iter", "clock", "loss", "grad_sq_norm", "msgs_scalars"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.iter.to_string(),
            format!("{:?}", r.clock),
            opt(r.loss),
            opt(r.grad_sq_norm),
            r.msgs_scalars.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_jsonl_share_columns() {
        let rows = vec![
            TraceRow { round: 0, iter: 0, clock: 0.0, loss: Some(1.5), grad_sq_norm: Some(2.0), msgs_scalars: 12 },
            TraceRow { round: 0, iter: 1, clock: 0.0, loss: None, grad_sq_norm: None, msgs_scalars: 4 },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(&dir.path().join("t.jsonl"), &rows).unwrap();
        write_csv(&dir.path().join("t.csv"), &rows).unwrap();
        let json = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(json.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let mut sorted_keys = keys.clone();
        sorted_keys.sort_unstable();
        let mut sorted_header = header.clone();
        sorted_header.sort_unstable();
        assert_eq!(sorted_keys, sorted_header);
        assert_eq!(csv.lines().nth(2).unwrap(), "0,1,0.0,,,4");
        let back: TraceRow = serde_json::from_str(json.lines().nth(1).unwrap()).unwrap();
        assert_eq!(back, rows[1]);
    }
}
