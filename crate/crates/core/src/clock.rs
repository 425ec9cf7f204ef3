//! Simulated latency. A communication round costs two hub-client round
//! trips, one hub exchange and `Q` local steps; latency is charged once per
//! round rather than per message.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Time units per communication hop (hub-client and hub-hub alike,
    /// unless `hub_exchange` overrides the latter).
    pub t_comm: f64,
    /// Time units per local gradient step.
    pub t_comp: f64,
    /// Separate hub-hub latency; when set a round costs
    /// `2·t_comm + hub_exchange + Q·t_comp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hub_exchange: Option<f64>,
}

impl LatencyModel {
    pub fn new(t_comm: f64, t_comp: f64) -> Self {
        Self {
            t_comm,
            t_comp,
            hub_exchange: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.t_comm) || !ok(self.t_comp) || !self.hub_exchange.map_or(true, ok) {
            return Err(Error::config("latency constants must be finite and >= 0"));
        }
        Ok(())
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::new(10.0, 1.0)
    }
}

/// `3·t_comm + Q·t_comp`.
pub fn round_latency(local_steps: u64, model: &LatencyModel) -> f64 {
    let comm = match model.hub_exchange {
        None => 3.0 * model.t_comm,
        Some(hh) => 2.0 * model.t_comm + hh,
    };
    comm + local_steps as f64 * model.t_comp
}

/// Cumulative round-boundary clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn charge_round(&mut self, local_steps: u64, model: &LatencyModel) -> f64 {
        self.now += round_latency(local_steps, model);
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(round_latency(5, &LatencyModel::new(10.0, 1.0)), 35.0);
        assert_eq!(round_latency(1, &LatencyModel::new(0.0, 0.0)), 0.0);
        assert_eq!(round_latency(10, &LatencyModel::new(100.0, 1.0)), 310.0);
    }

    #[test]
    fn split_hops() {
        let m = LatencyModel {
            t_comm: 10.0,
            t_comp: 1.0,
            hub_exchange: Some(50.0),
        };
        assert_eq!(round_latency(4, &m), 74.0);
    }

    #[test]
    fn clock_accumulates() {
        let m = LatencyModel::new(100.0, 1.0);
        let mut c = SimClock::default();
        for _ in 0..7 {
            c.charge_round(10, &m);
        }
        assert_eq!(c.now(), 7.0 * 310.0);
    }

    #[test]
    fn negative_latency_rejected() {
        assert!(LatencyModel::new(-1.0, 1.0).validate().is_err());
        assert!(LatencyModel::new(1.0, f64::NAN).validate().is_err());
    }
}
