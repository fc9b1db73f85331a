//! Finite-capacity birth-death queue with time-modulated rates.
//!
//! States `0..=m0` count customers. From state `j` the chain moves up at rate
//! `lambda(t) lambda_j` and down at rate `mu(t) mu_j`, where `lambda(t)` and
//! `mu(t)` are polynomial modulations. Detailed balance gives
//! `nu_j(t) ∝ (lambda(t)/mu(t))^j prod_{k<j} lambda_k / mu_{k+1}`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chain::ProbabilityVector;
use crate::diffusion::variance_profile;
use crate::error::{Error, Result};
use crate::generator::{uniform_grid, GeneratorSpec, PolyTerm, TimeVaryingGenerator, TwoScaleModel};
use crate::stats::normal_quantile;

/// JSON form of a queue model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub m0: usize,
    /// `lambda_0 .. lambda_{m0-1}`.
    pub lambda_base: Vec<f64>,
    /// `mu_1 .. mu_{m0}`.
    pub mu_base: Vec<f64>,
    /// Coefficients of `lambda(t)` in increasing powers of `t`.
    pub lambda_mod_poly: Vec<f64>,
    pub mu_mod_poly: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow: Option<GeneratorSpec>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}

impl QueueSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn poly(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &x| acc * t + x)
}

/// A validated queue model.
#[derive(Debug, Clone)]
pub struct QueueModel {
    spec: QueueSpec,
    slow: TimeVaryingGenerator,
}

impl QueueModel {
    pub fn new(spec: QueueSpec) -> Result<Self> {
        let m0 = spec.m0;
        if m0 == 0 {
            return Err(Error::Invalid("queue capacity must be at least 1".into()));
        }
        if spec.lambda_base.len() != m0 || spec.mu_base.len() != m0 {
            return Err(Error::Dimension(format!(
                "capacity {m0} needs {m0} birth and {m0} death rates, got {} and {}",
                spec.lambda_base.len(),
                spec.mu_base.len()
            )));
        }
        if spec.lambda_base.iter().chain(&spec.mu_base).any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Invalid("base rates must be positive and finite".into()));
        }
        if !(spec.horizon > 0.0) {
            return Err(Error::Invalid("queue horizon must be positive".into()));
        }
        for t in uniform_grid(0.0, spec.horizon, 1001) {
            let (l, m) = (poly(&spec.lambda_mod_poly, t), poly(&spec.mu_mod_poly, t));
            if !(l > 1e-9 && m > 1e-9) {
                return Err(Error::Invalid(format!(
                    "modulation must stay above 1e-9 on [0, T]; lambda({t}) = {l}, mu({t}) = {m}"
                )));
            }
        }
        let slow = match &spec.slow {
            Some(g) => {
                let slow = TimeVaryingGenerator::from_spec(g)?;
                if slow.dim() != m0 + 1 {
                    return Err(Error::Dimension("slow generator size differs from the queue".into()));
                }
                slow
            }
            None => TimeVaryingGenerator::zero(m0 + 1),
        };
        Ok(Self { spec, slow })
    }

    pub fn spec(&self) -> &QueueSpec {
        &self.spec
    }

    pub fn states(&self) -> usize {
        self.spec.m0 + 1
    }

    pub fn lambda_mod(&self, t: f64) -> f64 {
        poly(&self.spec.lambda_mod_poly, t)
    }

    pub fn mu_mod(&self, t: f64) -> f64 {
        poly(&self.spec.mu_mod_poly, t)
    }

    /// The two-scale model with the queue as fast part.
    pub fn two_scale(&self, eps: f64) -> Result<TwoScaleModel> {
        TwoScaleModel::new(build_generator(self)?, self.slow.clone(), eps, self.spec.horizon)
    }
}

/// Tridiagonal queue generator as a polynomial generator.
pub fn build_generator(q: &QueueModel) -> Result<TimeVaryingGenerator> {
    let n = q.states();
    let mut births = DMatrix::zeros(n, n);
    let mut deaths = DMatrix::zeros(n, n);
    for j in 0..q.spec.m0 {
        births[(j, j + 1)] = q.spec.lambda_base[j];
        births[(j, j)] = -q.spec.lambda_base[j];
        deaths[(j + 1, j)] = q.spec.mu_base[j];
        deaths[(j + 1, j + 1)] = -q.spec.mu_base[j];
    }
    TimeVaryingGenerator::from_terms(
        n,
        vec![
            PolyTerm {
                coeff: births,
                time_poly: q.spec.lambda_mod_poly.clone(),
            },
            PolyTerm {
                coeff: deaths,
                time_poly: q.spec.mu_mod_poly.clone(),
            },
        ],
    )
}

/// Detailed-balance form of `nu(t)`, evaluated in log space.
pub fn queue_nu_closed_form(q: &QueueModel, t: f64) -> Result<ProbabilityVector> {
    let log_ratio = (q.lambda_mod(t) / q.mu_mod(t)).ln();
    let mut logs = Vec::with_capacity(q.states());
    let mut acc = 0.0;
    logs.push(0.0);
    for j in 0..q.spec.m0 {
        acc += log_ratio + (q.spec.lambda_base[j] / q.spec.mu_base[j]).ln();
        logs.push(acc);
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    ProbabilityVector::new(weights.into_iter().map(|w| w / total).collect())
}

/// Normal band for the occupation time of one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupationBand {
    pub center: f64,
    pub halfwidth: f64,
}

impl OccupationBand {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.center).abs() <= self.halfwidth
    }
}

/// Band `int_0^t nu_i ds ± z sqrt(eps int_0^t sigma_i^2 ds)` at two-sided level `level`.
pub fn queue_occupation_band(q: &QueueModel, state: usize, eps: f64, t: f64, level: f64) -> Result<OccupationBand> {
    if state >= q.states() {
        return Err(Error::Invalid(format!("state {state} outside 0..={}", q.spec.m0)));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if !(eps > 0.0) || !(0.0..=q.spec.horizon).contains(&t) {
        return Err(Error::Invalid("need eps > 0 and t in [0, T]".into()));
    }
    if t == 0.0 {
        return Ok(OccupationBand {
            center: 0.0,
            halfwidth: 0.0,
        });
    }
    // Composite Simpson; nu is a smooth function of polynomial rates.
    let n = 512;
    let h = t / n as f64;
    let mut center = 0.0;
    for k in 0..=n {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        center += w * queue_nu_closed_form(q, k as f64 * h)?[state];
    }
    center *= h / 3.0;
    let mut f = vec![0.0; q.states()];
    f[state] = 1.0;
    let profile = variance_profile(&build_generator(q)?, &f, &[0.0, t])?;
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(OccupationBand {
        center,
        halfwidth: z * (eps * profile.total()).sqrt(),
    })
}
