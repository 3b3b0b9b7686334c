//! Temperature search: golden-section over `ln tau`, scoring each probe by
//! snapped validation accuracy after a short training run.

use serde::{Deserialize, Serialize};

use super::{evaluate, train, ModelSpec, Split, TrainConfig, TrainMode};
use crate::error::{DkmError, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauProbe {
    pub tau: f64,
    pub snapped_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSearch {
    pub best_tau: f64,
    pub best_accuracy: f64,
    /// Every probe, sorted by tau.
    pub trace: Vec<TauProbe>,
}

impl TauSearch {
    pub fn runs(&self) -> usize {
        self.trace.len()
    }
}

/// Searches `[tau_low, tau_high]` with exactly `budget` training runs (one if
/// the bounds coincide). Both endpoints are always probed. Every probe trains
/// a fresh model from `spec` with the same seed, so warm starts never leak
/// between probes.
pub fn tau_search(
    spec: &ModelSpec,
    data: &Split,
    cfg: &TrainConfig,
    mode: TrainMode,
    tau_low: f64,
    tau_high: f64,
    budget: usize,
) -> Result<TauSearch> {
    let scheme =
        spec.scheme.as_ref().ok_or_else(|| DkmError::Parameter("tau search needs a clustering scheme".into()))?;
    if !(tau_low > 0.0 && tau_high.is_finite() && tau_low <= tau_high) {
        return Err(DkmError::Parameter(format!("need 0 < tau_low <= tau_high, got [{tau_low}, {tau_high}]")));
    }
    if budget < 3 {
        return Err(DkmError::Parameter(format!("tau search budget must be at least 3, got {budget}")));
    }

    let mut trace: Vec<TauProbe> = Vec::new();
    let mut probe = |tau: f64| -> Result<f64> {
        let probe_spec = ModelSpec { scheme: Some(scheme.with_temperature(tau)), ..spec.clone() };
        let model = probe_spec.build(cfg.seed)?;
        let (trained, _) = train(&model, data, cfg, mode)?;
        let acc = evaluate(&trained, &data.validation, true)?;
        trace.push(TauProbe { tau, snapped_accuracy: acc });
        Ok(acc)
    };

    if tau_low == tau_high {
        let acc = probe(tau_low)?;
        return Ok(TauSearch { best_tau: tau_low, best_accuracy: acc, trace });
    }

    probe(tau_low)?;
    probe(tau_high)?;
    let (mut a, mut b) = (tau_low.ln(), tau_high.ln());
    let mut remaining = budget - 2;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = probe(x1.exp())?;
    remaining -= 1;
    let mut f2 = f64::NAN;
    if remaining > 0 {
        f2 = probe(x2.exp())?;
        remaining -= 1;
    }
    while remaining > 0 {
        // ties keep the lower-temperature side
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = probe(x1.exp())?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = probe(x2.exp())?;
        }
        remaining -= 1;
    }

    trace.sort_by(|p, q| p.tau.total_cmp(&q.tau));
    let best = trace
        .iter()
        .fold(None::<&TauProbe>, |best, p| match best {
            Some(b) if b.snapped_accuracy >= p.snapped_accuracy => Some(b),
            _ => Some(p),
        })
        .expect("at least three probes");
    Ok(TauSearch { best_tau: best.tau, best_accuracy: best.snapped_accuracy, trace: trace.clone() })
}
