//! Per-batch training metrics and their CSV/JSON export.
//!
//! CSV layout: a `# dkm-metrics v1` schema line, then a header
//! `epoch,batch,loss,<layer>_error,<layer>_iterations,...` with one error and
//! one iteration-count column per compressed layer, then one row per batch.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DkmError, Result};

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_LINE: &str = "# dkm-metrics v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Frobenius norm of train-time minus snapped weights, per compressed layer.
    pub layer_errors: Vec<f64>,
    /// Clustering iterations used, per compressed layer.
    pub layer_iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema_version: u32,
    pub layer_names: Vec<String>,
    pub batches: Vec<BatchMetrics>,
}

impl TrainLog {
    pub fn new(layer_names: Vec<String>) -> Self {
        Self { schema_version: SCHEMA_VERSION, layer_names, batches: Vec::new() }
    }

    pub fn push(&mut self, m: BatchMetrics) {
        self.batches.push(m);
    }

    pub fn epochs(&self) -> usize {
        self.batches.last().map_or(0, |b| b.epoch + 1)
    }

    /// Mean train/inference error per epoch, indexed `[epoch][layer]`.
    pub fn epoch_mean_errors(&self) -> Vec<Vec<f64>> {
        let layers = self.layer_names.len();
        let mut sums = vec![vec![0.0; layers]; self.epochs()];
        let mut counts = vec![0usize; self.epochs()];
        for b in &self.batches {
            counts[b.epoch] += 1;
            for (s, e) in sums[b.epoch].iter_mut().zip(&b.layer_errors) {
                *s += e;
            }
        }
        sums.into_iter().zip(counts).map(|(row, n)| row.into_iter().map(|s| s / n.max(1) as f64).collect()).collect()
    }

    /// Mean iteration count over the first and the last `fraction` of batches, per layer.
    pub fn iteration_means(&self, fraction: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.batches.len();
        let take = ((n as f64 * fraction).floor() as usize).clamp(1, n.max(1));
        let mean = |slice: &[BatchMetrics]| -> Vec<f64> {
            (0..self.layer_names.len())
                .map(|l| slice.iter().map(|b| b.layer_iterations[l] as f64).sum::<f64>() / slice.len().max(1) as f64)
                .collect()
        };
        (mean(&self.batches[..take.min(n)]), mean(&self.batches[n.saturating_sub(take)..]))
    }

    fn check_non_empty(&self) -> Result<()> {
        if self.batches.is_empty() {
            return Err(DkmError::Contract("cannot export an empty metrics log".into()));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        self.check_non_empty()?;
        writeln!(out, "{SCHEMA_LINE}")?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "batch".to_string(), "loss".to_string()];
        for name in &self.layer_names {
            header.push(format!("{name}_error"));
            header.push(format!("{name}_iterations"));
        }
        w.write_record(&header)?;
        for b in &self.batches {
            let mut rec = vec![b.epoch.to_string(), b.batch.to_string(), b.loss.to_string()];
            for (e, i) in b.layer_errors.iter().zip(&b.layer_iterations) {
                rec.push(e.to_string());
                rec.push(i.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        if first.trim_end() != SCHEMA_LINE {
            return Err(DkmError::Serde(format!("unsupported metrics schema line {:?}", first.trim_end())));
        }
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 3 || cols[..3] != ["epoch", "batch", "loss"] || (cols.len() - 3) % 2 != 0 {
            return Err(DkmError::Serde(format!("unexpected metrics header {cols:?}")));
        }
        let mut layer_names = Vec::new();
        for pair in cols[3..].chunks(2) {
            let name = pair[0]
                .strip_suffix("_error")
                .filter(|n| pair[1].strip_suffix("_iterations") == Some(*n))
                .ok_or_else(|| DkmError::Serde(format!("bad layer columns {pair:?}")))?;
            layer_names.push(name.to_string());
        }
        let parse_err = |e: &dyn std::fmt::Display| DkmError::Serde(format!("metrics row: {e}"));
        let mut log = TrainLog::new(layer_names);
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| DkmError::Serde("short metrics row".into()));
            let mut m = BatchMetrics {
                epoch: field(0)?.parse().map_err(|e| parse_err(&e))?,
                batch: field(1)?.parse().map_err(|e| parse_err(&e))?,
                loss: field(2)?.parse().map_err(|e| parse_err(&e))?,
                layer_errors: Vec::new(),
                layer_iterations: Vec::new(),
            };
            for l in 0..log.layer_names.len() {
                m.layer_errors.push(field(3 + 2 * l)?.parse().map_err(|e| parse_err(&e))?);
                m.layer_iterations.push(field(4 + 2 * l)?.parse().map_err(|e| parse_err(&e))?);
            }
            log.push(m);
        }
        Ok(log)
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_non_empty()?;
        Ok(serde_json::to_string_pretty(self)?)
    }
}
