//! Seeded synthetic datasets with known structure.
//!
//! With `condition = Some(κ)` the design matrix has orthogonal columns and
//! `XᵀX = M·diag(s_c²)` with `s_c` geometric from 1 down to `1/√κ`, so the
//! eigenvalue spread of `XᵀX` is exactly `κ`. Without it, features are
//! standard normal with an optional shared factor giving pairwise
//! correlation `correlation` between columns.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dot, largest_eigenvalue_psd, norm_sq, Matrix};
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    /// `y = x·θ* + noise·ε`
    LeastSquares {
        #[serde(default)]
        noise: f64,
    },
    /// `y ~ Bernoulli(sigmoid(margin · x·θ*))`
    Logistic {
        #[serde(default = "default_margin")]
        margin: f64,
    },
}

fn default_margin() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    #[serde(flatten)]
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<f64>,
    #[serde(default)]
    pub correlation: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.features == 0 {
            return Err(Error::config("synthetic data needs samples >= 1 and features >= 1"));
        }
        if let Some(k) = self.condition {
            if !(k.is_finite() && k >= 1.0) {
                return Err(Error::config("condition must be >= 1"));
            }
            if self.samples < self.features {
                return Err(Error::config("condition control needs samples >= features"));
            }
            if self.correlation != 0.0 {
                return Err(Error::config("condition and correlation cannot both be set"));
            }
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::config("correlation must be in [0, 1)"));
        }
        match self.task {
            Task::LeastSquares { noise } if !(noise.is_finite() && noise >= 0.0) => {
                Err(Error::config("noise must be >= 0"))
            }
            Task::Logistic { margin } if !(margin.is_finite() && margin > 0.0) => {
                Err(Error::config("margin must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Exact facts about a generated least-squares problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresFacts {
    /// Minimizer of `(1/M)‖Xθ − y‖²` from the normal equations.
    pub optimum: Vec<f64>,
    pub optimum_loss: f64,
    /// λ_max((2/M)·XᵀX)
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Generating parameter vector.
    pub truth: Vec<f64>,
    pub facts: Option<LeastSquaresFacts>,
}

/// Draw a dataset. `round` separates independent draws (e.g. train and
/// test) under one seed.
pub fn generate(spec: &SyntheticSpec, seed: u64, round: u64) -> Result<Synthetic> {
    spec.validate()?;
    let (m, d) = (spec.samples, spec.features);
    let mut s = Stream::new(seed, Purpose::Data, round);
    let truth: Vec<f64> = (0..d).map(|_| s.normal()).collect();
    let mut x = Matrix::zeros(m, d);
    let rho = spec.correlation;
    for i in 0..m {
        let shared = s.normal();
        for c in 0..d {
            let z = s.normal();
            x.set(i, c, (1.0 - rho).sqrt() * z + rho.sqrt() * shared);
        }
    }
    if let Some(kappa) = spec.condition {
        orthonormalize_columns(&mut x)?;
        let scale_base = if d > 1 { kappa.powf(-0.5 / (d - 1) as f64) } else { 1.0 };
        let root_m = (m as f64).sqrt();
        for c in 0..d {
            let sc = root_m * scale_base.powi(c as i32);
            for i in 0..m {
                x.set(i, c, x.get(i, c) * sc);
            }
        }
    }
    let margins = x.matvec(&truth);
    let labels: Vec<f64> = match spec.task {
        Task::LeastSquares { noise } => margins.iter().map(|v| v + noise * s.normal()).collect(),
        Task::Logistic { margin } => margins
            .iter()
            .map(|v| {
                let p = 1.0 / (1.0 + (-margin * v).exp());
                f64::from(u8::from(s.unit_f64() < p))
            })
            .collect(),
    };
    let facts = match spec.task {
        Task::LeastSquares { .. } => Some(least_squares_facts(&x, &labels)?),
        Task::Logistic { .. } => None,
    };
    Ok(Synthetic {
        dataset: Dataset::new(x, labels)?,
        truth,
        facts,
    })
}

/// Normal-equation solution and smoothness of `(1/M)‖Xθ − y‖²`.
pub fn least_squares_facts(x: &Matrix, y: &[f64]) -> Result<LeastSquaresFacts> {
    let m = x.rows() as f64;
    let gram = x.gram();
    let optimum = cholesky_solve(&gram, &x.t_matvec(y))?;
    let resid: Vec<f64> = x.matvec(&optimum).iter().zip(y).map(|(a, b)| a - b).collect();
    let mut h = gram;
    h.scale(2.0 / m);
    Ok(LeastSquaresFacts {
        optimum_loss: norm_sq(&resid) / m,
        smoothness: largest_eigenvalue_psd(&h, 1e-14, 100_000),
        optimum,
    })
}

/// Modified Gram-Schmidt on the columns, in place.
fn orthonormalize_columns(x: &mut Matrix) -> Result<()> {
    let (m, d) = (x.rows(), x.cols());
    let mut cols: Vec<Vec<f64>> = (0..d).map(|c| (0..m).map(|r| x.get(r, c)).collect()).collect();
    for c in 0..d {
        for p in 0..c {
            let proj = dot(&cols[c], &cols[p]);
            let (prev, cur) = cols.split_at_mut(c);
            for (v, q) in cur[0].iter_mut().zip(&prev[p]) {
                *v -= proj * q;
            }
        }
        let n = norm_sq(&cols[c]).sqrt();
        if n < 1e-12 {
            return Err(Error::config("degenerate design matrix; try another data seed"));
        }
        cols[c].iter_mut().for_each(|v| *v /= n);
    }
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            x.set(r, c, v);
        }
    }
    Ok(())
}
