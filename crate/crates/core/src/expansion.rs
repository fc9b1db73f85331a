//! Matched asymptotic expansion of the transition matrix `P_eps(t0, t)`.
//!
//! The approximation of order `n` is
//!
//! ```text
//! P_eps(t0, t) ~ sum_{k<=n} eps^k Phi_k(t) + sum_{k<=n} eps^k Psi_k(t0, (t - t0)/eps)
//! ```
//!
//! with regular terms `Phi_0 = 1 nu(t)` and
//! `Phi_k A = dPhi_{k-1}/dt - Phi_{k-1} B`, and boundary-layer terms solving
//! `dPsi_k/dtau = Psi_k A(t0) + R_k(t0, tau)` in the stretched time `tau`.
//!
//! `Phi_k` is pinned by `Phi_k 1 = 0` (rows of `P_eps` sum to one and the
//! layer terms vanish at infinity), which selects the particular solution
//! `forcing * A#`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chain::{group_inverse, nu_derivative, stationary_of};
use crate::error::{Error, Result};
use crate::generator::TimeVaryingGenerator;
use crate::linalg::{expm, max_abs, max_row_sum_abs, norm_inf};

/// Norm below which `Psi_0` counts as fully decayed when choosing `tau_max`.
const LAYER_FLOOR: f64 = 1e-12;
const TAU_CAP: f64 = 200.0;
const DOUBLING_TOL: f64 = 1e-8;
const NO_DECAY: f64 = 1e-6;
const CHECKPOINT_STRIDE: usize = 8;

/// Regular part of the expansion together with the generators it came from.
#[derive(Debug, Clone)]
pub struct ExpansionSet {
    fast: TimeVaryingGenerator,
    slow: TimeVaryingGenerator,
    order: usize,
    horizon: f64,
}

impl ExpansionSet {
    pub fn build(
        fast: TimeVaryingGenerator,
        slow: TimeVaryingGenerator,
        order: usize,
        horizon: f64,
    ) -> Result<Self> {
        if fast.dim() != slow.dim() {
            return Err(Error::Dimension("fast and slow generators differ in size".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        Ok(Self {
            fast,
            slow,
            order,
            horizon,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.fast.dim()
    }

    /// Step of the fourth-order central differences used for `dPhi_k/dt`, `k >= 1`.
    pub fn fd_step(&self) -> f64 {
        1e-4 * self.horizon
    }

    /// `Phi_0(t) = 1 nu(t)`.
    pub fn phi0(&self, t: f64) -> Result<DMatrix<f64>> {
        let nu = stationary_of(&self.fast.eval(t))?;
        let m = self.dim();
        Ok(DMatrix::from_fn(m, m, |_, j| nu[j]))
    }

    /// `Phi_k(t)`; errors if `k` exceeds the order of the set.
    pub fn phi(&self, k: usize, t: f64) -> Result<DMatrix<f64>> {
        if k > self.order {
            return Err(Error::Invalid(format!(
                "term {k} requested from an expansion of order {}",
                self.order
            )));
        }
        self.phi_unchecked(k, t)
    }

    fn phi_unchecked(&self, k: usize, t: f64) -> Result<DMatrix<f64>> {
        if k == 0 {
            return self.phi0(t);
        }
        let q = self.fast.eval(t);
        let nu = stationary_of(&q)?;
        let bundle = group_inverse(&q, &nu)?;
        let forcing = self.forcing(k, t)?;
        Ok(forcing * bundle.a_sharp)
    }

    /// Right-hand side `dPhi_{k-1}/dt - Phi_{k-1} B` of the equation for `Phi_k`.
    pub fn forcing(&self, k: usize, t: f64) -> Result<DMatrix<f64>> {
        if k == 0 {
            return Err(Error::Invalid("Phi_0 has no forcing term".into()));
        }
        let prev = self.phi_unchecked(k - 1, t)?;
        let forcing = self.phi_derivative(k - 1, t)? - prev * self.slow.eval(t);
        let row_sum = max_row_sum_abs(&forcing);
        if row_sum > 1e-8 {
            return Err(Error::SolvabilityViolation { order: k, row_sum });
        }
        Ok(forcing)
    }

    /// `dPhi_k/dt`: analytic for `k = 0`, fourth-order central differences otherwise.
    pub fn phi_derivative(&self, k: usize, t: f64) -> Result<DMatrix<f64>> {
        if k == 0 {
            let d = nu_derivative(&self.fast, t)?;
            let m = self.dim();
            return Ok(DMatrix::from_fn(m, m, |_, j| d[j]));
        }
        let h = self.fd_step();
        let f = |x: f64| self.phi_unchecked(k, x);
        Ok((f(t - 2.0 * h)? - f(t + 2.0 * h)? + (f(t + h)? - f(t - h)?) * 8.0) / (12.0 * h))
    }

    /// `sup |Phi_k A - forcing|` at `t`.
    pub fn phi_residual(&self, k: usize, t: f64) -> Result<f64> {
        if k == 0 {
            return Ok(max_abs(&(self.phi0(t)? * self.fast.eval(t))));
        }
        let lhs = self.phi(k, t)? * self.fast.eval(t);
        Ok(max_abs(&(lhs - self.forcing(k, t)?)))
    }

    /// Solves the boundary-layer equations anchored at `t0`.
    pub fn layer(&self, t0: f64) -> Result<BoundaryLayer> {
        BoundaryLayer::solve(self, t0)
    }

    /// The order-`n` approximation of `P_eps(t0, t)`, `layer` anchored at `t0`.
    pub fn eval(&self, layer: &BoundaryLayer, t: f64, eps: f64) -> Result<DMatrix<f64>> {
        if t < layer.t0 {
            return Err(Error::Invalid(format!("t = {t} precedes t0 = {}", layer.t0)));
        }
        let tau = (t - layer.t0) / eps;
        let psi = layer.psi_all(tau)?;
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        let mut scale = 1.0;
        for (k, psi_k) in psi.iter().enumerate().take(self.order + 1) {
            out += (self.phi_unchecked(k, t)? + psi_k) * scale;
            scale *= eps;
        }
        Ok(out)
    }

    pub fn dump(&self, t0: f64, t_grid: &[f64], tau_points: usize) -> Result<ExpansionDump> {
        let layer = self.layer(t0)?;
        let to_rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let phi = t_grid
            .iter()
            .map(|&t| {
                let terms = (0..=self.order)
                    .map(|k| self.phi(k, t).map(|m| to_rows(&m)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PhiSample { t, terms })
            })
            .collect::<Result<Vec<_>>>()?;
        let taus = crate::generator::uniform_grid(0.0, layer.tau_max, tau_points.max(2));
        let psi = taus
            .iter()
            .map(|&tau| {
                let terms = layer.psi_all(tau)?.iter().map(to_rows).collect();
                Ok(PsiSample { tau, terms })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut phi_residuals = Vec::new();
        for k in 0..=self.order {
            let mut worst: f64 = 0.0;
            for &t in t_grid {
                worst = worst.max(self.phi_residual(k, t)?);
            }
            phi_residuals.push(worst);
        }
        Ok(ExpansionDump {
            order: self.order,
            t0,
            tau_max: layer.tau_max,
            layer_step: layer.step,
            fd_step: self.fd_step(),
            residuals: DumpResiduals {
                phi: phi_residuals,
                layer_doubling_change: layer.doubling_change,
                layer_tail: layer.tail_norms(),
            },
            phi,
            psi,
        })
    }
}

/// Boundary-layer terms `Psi_0 .. Psi_n` on a uniform stretched-time grid.
///
/// Integrated jointly with classical RK4; values are checkpointed and
/// reconstructed between checkpoints by replaying the same steps.
#[derive(Debug, Clone)]
pub struct BoundaryLayer {
    pub t0: f64,
    pub tau_max: f64,
    pub step: f64,
    /// Sup-norm change of the accepted solution under grid doubling.
    pub doubling_change: f64,
    order: usize,
    a0: DMatrix<f64>,
    psi0_start: DMatrix<f64>,
    /// `(A^{(i+1)}(t0), B^{(i)}(t0))` for `i < order`.
    taylor: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    checkpoints: Vec<Vec<DMatrix<f64>>>,
    stride: usize,
}

impl BoundaryLayer {
    fn solve(set: &ExpansionSet, t0: f64) -> Result<Self> {
        let m = set.dim();
        let a0 = set.fast.eval(t0);
        let psi0_start = DMatrix::identity(m, m) - set.phi0(t0)?;
        let mut start = vec![psi0_start.clone()];
        for k in 1..=set.order {
            start.push(-set.phi(k, t0)?);
        }
        let taylor = (0..set.order)
            .map(|i| (set.fast.derivative(t0, i + 1), set.slow.derivative(t0, i)))
            .collect();

        let tau_max = layer_horizon(&a0, &psi0_start)?;
        let h0 = 0.01f64.min(0.5 / norm_inf(&a0).max(1e-300));
        let mut n = (tau_max / h0).ceil().max(1.0) as usize;
        n = n.div_ceil(CHECKPOINT_STRIDE) * CHECKPOINT_STRIDE;

        let mut layer = Self {
            t0,
            tau_max,
            step: tau_max / n as f64,
            doubling_change: f64::INFINITY,
            order: set.order,
            a0,
            psi0_start,
            taylor,
            checkpoints: Vec::new(),
            stride: CHECKPOINT_STRIDE,
        };
        let mut coarse = layer.integrate(&start, n, CHECKPOINT_STRIDE);
        for _ in 0..8 {
            let fine = layer.integrate(&start, 2 * n, 2 * CHECKPOINT_STRIDE);
            let change = coarse
                .iter()
                .zip(&fine)
                .flat_map(|(a, b)| a.iter().zip(b))
                .map(|(x, y)| max_abs(&(x - y)))
                .fold(0.0, f64::max);
            n *= 2;
            if change < DOUBLING_TOL {
                layer.step = tau_max / n as f64;
                layer.doubling_change = change;
                // keep a checkpoint every CHECKPOINT_STRIDE fine steps
                layer.checkpoints = layer.integrate(&start, n, CHECKPOINT_STRIDE);
                for (k, psi) in layer.checkpoints.last().expect("nonempty").iter().enumerate() {
                    let norm = norm_inf(psi);
                    if norm > NO_DECAY {
                        return Err(Error::NoDecay {
                            order: k,
                            tau: tau_max,
                            norm,
                        });
                    }
                }
                return Ok(layer);
            }
            coarse = fine;
        }
        Err(Error::NoDecay {
            order: set.order,
            tau: tau_max,
            norm: f64::NAN,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn rhs(&self, tau: f64, y: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let coupling: Vec<DMatrix<f64>> = self
            .taylor
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let fi = factorial(i);
                a * (tau.powi(i as i32 + 1) / (fi * (i + 1) as f64)) + b * (tau.powi(i as i32) / fi)
            })
            .collect();
        (0..y.len())
            .map(|k| {
                let mut d = &y[k] * &self.a0;
                for i in 0..k {
                    d += &y[k - i - 1] * &coupling[i];
                }
                d
            })
            .collect()
    }

    fn rk4_step(&self, tau: f64, y: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
        let axpy = |y: &[DMatrix<f64>], k: &[DMatrix<f64>], s: f64| -> Vec<DMatrix<f64>> {
            y.iter().zip(k).map(|(a, b)| a + b * s).collect()
        };
        let k1 = self.rhs(tau, y);
        let k2 = self.rhs(tau + h / 2.0, &axpy(y, &k1, h / 2.0));
        let k3 = self.rhs(tau + h / 2.0, &axpy(y, &k2, h / 2.0));
        let k4 = self.rhs(tau + h, &axpy(y, &k3, h));
        y.iter()
            .enumerate()
            .map(|(j, yj)| yj + (&k1[j] + &k2[j] * 2.0 + &k3[j] * 2.0 + &k4[j]) * (h / 6.0))
            .collect()
    }

    /// Integrates `n` steps over `[0, tau_max]`, keeping every `keep`-th state.
    fn integrate(&self, start: &[DMatrix<f64>], n: usize, keep: usize) -> Vec<Vec<DMatrix<f64>>> {
        let h = self.tau_max / n as f64;
        let mut y = start.to_vec();
        let mut out = vec![y.clone()];
        for j in 0..n {
            y = self.rk4_step(j as f64 * h, &y, h);
            if (j + 1) % keep == 0 {
                out.push(y.clone());
            }
        }
        out
    }

    /// `Psi_0(t0, tau) = (I - Phi_0(t0)) exp(A(t0) tau)`.
    pub fn psi0(&self, tau: f64) -> Result<DMatrix<f64>> {
        Ok(&self.psi0_start * expm(&(&self.a0 * tau))?)
    }

    /// `Psi_0 .. Psi_n` at stretched time `tau`. `Psi_0` uses its closed
    /// form; higher terms are zero beyond `tau_max`.
    pub fn psi_all(&self, tau: f64) -> Result<Vec<DMatrix<f64>>> {
        if tau < 0.0 {
            return Err(Error::Invalid(format!("negative stretched time {tau}")));
        }
        let m = self.a0.nrows();
        let mut out = if tau >= self.tau_max {
            vec![DMatrix::zeros(m, m); self.order + 1]
        } else {
            self.psi_grid(tau)
        };
        out[0] = self.psi0(tau)?;
        Ok(out)
    }

    pub fn psi(&self, k: usize, tau: f64) -> Result<DMatrix<f64>> {
        if k > self.order {
            return Err(Error::Invalid(format!("layer term {k} beyond order {}", self.order)));
        }
        Ok(self.psi_all(tau)?.swap_remove(k))
    }

    fn psi_grid(&self, tau: f64) -> Vec<DMatrix<f64>> {
        let h = self.step;
        let j = ((tau / h).floor() as usize).min(self.checkpoints.len().saturating_sub(1) * self.stride);
        let c = j / self.stride;
        let mut y = self.checkpoints[c].clone();
        let mut s = c * self.stride;
        while s < j {
            y = self.rk4_step(s as f64 * h, &y, h);
            s += 1;
        }
        let rest = tau - j as f64 * h;
        if rest > 0.0 {
            y = self.rk4_step(j as f64 * h, &y, rest);
        }
        y
    }

    /// Sup norms of every layer term at `tau_max`.
    pub fn tail_norms(&self) -> Vec<f64> {
        self.checkpoints
            .last()
            .map(|last| last.iter().map(norm_inf).collect())
            .unwrap_or_default()
    }

    /// Stretched times of the stored checkpoints.
    pub fn checkpoint_taus(&self) -> Vec<f64> {
        (0..self.checkpoints.len())
            .map(|c| (c * self.stride) as f64 * self.step)
            .collect()
    }

    /// Fits `||Psi_k(tau)|| ~ K exp(-kappa tau)` by least squares of the log
    /// norm over the checkpoints in `[1, tau_max]`.
    pub fn fit_decay(&self, k: usize) -> Result<LayerDecay> {
        if k > self.order {
            return Err(Error::Invalid(format!("layer term {k} beyond order {}", self.order)));
        }
        let mut points = Vec::new();
        // Psi_0 by repeated multiplication keeps relative accuracy deep in the tail.
        let delta = self.step * self.stride as f64;
        let advance = expm(&(&self.a0 * delta))?;
        let mut psi0 = self.psi0_start.clone();
        for (c, state) in self.checkpoints.iter().enumerate() {
            let tau = c as f64 * delta;
            let norm = if k == 0 { norm_inf(&psi0) } else { norm_inf(&state[k]) };
            if tau >= 1.0 && norm > 1e-300 {
                points.push((tau, norm.ln()));
            }
            psi0 = &psi0 * &advance;
        }
        if points.is_empty() {
            return Ok(LayerDecay {
                rate: f64::INFINITY,
                prefactor: 0.0,
                points: 0,
            });
        }
        if points.len() < 2 {
            return Err(Error::Invalid("too few layer points to fit a decay rate".into()));
        }
        let fit = crate::stats::linear_fit(
            &points.iter().map(|p| p.0).collect::<Vec<_>>(),
            &points.iter().map(|p| p.1).collect::<Vec<_>>(),
        )?;
        let rate = -fit.slope;
        if !(rate > 0.0) {
            return Err(Error::NoDecay {
                order: k,
                tau: self.tau_max,
                norm: points.last().map(|p| p.1.exp()).unwrap_or(f64::NAN),
            });
        }
        Ok(LayerDecay {
            rate,
            prefactor: fit.intercept.exp(),
            points: points.len(),
        })
    }
}

fn factorial(i: usize) -> f64 {
    (1..=i).map(|x| x as f64).product()
}

/// Smallest `tau` (on a 0.5 grid) with `||Psi_0(tau)|| < 1e-12`, at least 1 and at most 200.
pub fn layer_horizon(a0: &DMatrix<f64>, psi0_start: &DMatrix<f64>) -> Result<f64> {
    let dtau = 0.5;
    let advance = expm(&(a0 * dtau))?;
    let mut psi = psi0_start.clone();
    let mut tau = 0.0;
    while norm_inf(&psi) >= LAYER_FLOOR {
        if tau >= TAU_CAP {
            let norm = norm_inf(&psi);
            if norm > NO_DECAY {
                return Err(Error::NoDecay { order: 0, tau, norm });
            }
            return Ok(TAU_CAP);
        }
        psi = &psi * &advance;
        tau += dtau;
    }
    Ok(tau.max(1.0))
}

/// Fitted exponential decay of a layer term; `rate` is `+inf` for an identically zero term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDecay {
    pub rate: f64,
    pub prefactor: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionDump {
    pub order: usize,
    pub t0: f64,
    pub tau_max: f64,
    pub layer_step: f64,
    pub fd_step: f64,
    pub residuals: DumpResiduals,
    pub phi: Vec<PhiSample>,
    pub psi: Vec<PsiSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpResiduals {
    pub phi: Vec<f64>,
    pub layer_doubling_change: f64,
    pub layer_tail: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiSample {
    pub t: f64,
    pub terms: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSample {
    pub tau: f64,
    pub terms: Vec<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::transition_matrices;
    use crate::generator::{PolyTerm, TwoScaleModel};

    fn sym() -> TimeVaryingGenerator {
        TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap()
    }

    fn tilted() -> TimeVaryingGenerator {
        TimeVaryingGenerator::from_terms(
            2,
            vec![
                PolyTerm {
                    coeff: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
                    time_poly: vec![1.0],
                },
                PolyTerm {
                    coeff: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]),
                    time_poly: vec![0.0, 1.0],
                },
            ],
        )
        .unwrap()
    }

    fn half(g: &TimeVaryingGenerator) -> TimeVaryingGenerator {
        g.combine(0.5, &TimeVaryingGenerator::zero(g.dim()), 0.0).unwrap()
    }

    #[test]
    fn phi0_rows_are_nu() {
        let set = ExpansionSet::build(sym(), TimeVaryingGenerator::zero(2), 0, 1.0).unwrap();
        let p = set.phi0(0.4).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(max_abs(&(&p * &p - &p)) < 1e-15);
        let set = ExpansionSet::build(tilted(), TimeVaryingGenerator::zero(2), 0, 1.0).unwrap();
        let p = set.phi0(0.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-14));
    }

    #[test]
    fn phi1_vanishes_without_forcing() {
        let set = ExpansionSet::build(sym(), TimeVaryingGenerator::zero(2), 1, 1.0).unwrap();
        assert!(max_abs(&set.phi(1, 0.3).unwrap()) < 1e-15);
        // B = A/2 is annihilated by nu.
        let set = ExpansionSet::build(sym(), half(&sym()), 1, 1.0).unwrap();
        assert!(max_abs(&set.phi(1, 0.3).unwrap()) < 1e-15);
    }

    #[test]
    fn phi_residuals_and_row_sums() {
        let b = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.7, -0.7])).unwrap();
        let set = ExpansionSet::build(tilted(), b, 2, 1.0).unwrap();
        for j in 0..20 {
            let t = 0.025 + 0.05 * j as f64;
            for k in 1..=2 {
                assert!(set.phi_residual(k, t).unwrap() <= 1e-8, "k={k} t={t}");
                assert!(max_row_sum_abs(&set.phi(k, t).unwrap()) < 1e-9);
            }
        }
    }

    #[test]
    fn psi0_closed_form() {
        let set = ExpansionSet::build(sym(), TimeVaryingGenerator::zero(2), 0, 1.0).unwrap();
        let layer = set.layer(0.2).unwrap();
        let proj = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!(max_abs(&(layer.psi0(0.0).unwrap() - &proj)) < 1e-15);
        for &tau in &[0.3f64, 1.0, 4.0] {
            let expected = &proj * (-2.0 * tau).exp();
            assert!(max_abs(&(layer.psi0(tau).unwrap() - expected)) < 1e-14);
        }
        assert!(norm_inf(&layer.psi0(30.0).unwrap()) < 1e-12);
    }

    #[test]
    fn psi1_closed_form_for_half_slow_part() {
        // A constant symmetric, B = A/2: Psi_1(tau) = -tau exp(-2 tau) (I - 1 nu).
        let set = ExpansionSet::build(sym(), half(&sym()), 1, 1.0).unwrap();
        let layer = set.layer(0.0).unwrap();
        let proj = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        for &tau in &[0.0f64, 0.37, 1.0, 2.5, 7.0] {
            let expected = &proj * (-tau * (-2.0 * tau).exp());
            let got = layer.psi(1, tau).unwrap();
            assert!(max_abs(&(got - expected)) < 1e-9, "tau={tau}");
        }
        assert!(layer.doubling_change < 1e-8);
        assert!(layer.tail_norms().iter().all(|&x| x < 1e-10));
    }

    #[test]
    fn psi1_vanishes_when_b_zero_and_a_constant() {
        let set = ExpansionSet::build(sym(), TimeVaryingGenerator::zero(2), 1, 1.0).unwrap();
        let layer = set.layer(0.5).unwrap();
        assert!(max_abs(&layer.psi(1, 0.8).unwrap()) == 0.0);
        assert_eq!(layer.fit_decay(1).unwrap().rate, f64::INFINITY);
    }

    #[test]
    fn layer_ode_residual_small() {
        let b = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.7, -0.7])).unwrap();
        let set = ExpansionSet::build(tilted(), b.clone(), 1, 1.0).unwrap();
        let t0 = 0.3;
        let layer = set.layer(t0).unwrap();
        let a0 = tilted().eval(t0);
        let (a1, b0) = (tilted().derivative(t0, 1), b.eval(t0));
        let h = 1e-3;
        for j in 1..40 {
            let tau = 0.05 + 0.25 * j as f64;
            let p = |x: f64| layer.psi(1, x).unwrap();
            let deriv = (p(tau - 2.0 * h) - p(tau + 2.0 * h) + (p(tau + h) - p(tau - h)) * 8.0) / (12.0 * h);
            let rhs = p(tau) * &a0 + layer.psi0(tau).unwrap() * (&a1 * tau + &b0);
            assert!(max_abs(&(deriv - rhs)) < 1e-7, "tau={tau}");
        }
    }

    #[test]
    fn homogeneous_order_zero_is_exact() {
        let a = TimeVaryingGenerator::constant(DMatrix::from_row_slice(
            3,
            3,
            &[-2.0, 1.5, 0.5, 1.0, -1.0, 0.0, 0.3, 0.3, -0.6],
        ))
        .unwrap();
        let set = ExpansionSet::build(a.clone(), TimeVaryingGenerator::zero(3), 0, 1.0).unwrap();
        let eps = 0.05;
        let layer = set.layer(0.1).unwrap();
        for &t in &[0.1, 0.12, 0.2, 0.6, 1.0] {
            let approx = set.eval(&layer, t, eps).unwrap();
            let exact = expm(&(a.eval(0.0) * ((t - 0.1) / eps))).unwrap();
            assert!(max_abs(&(approx - exact)) < 1e-12, "t={t}");
            for r in set.eval(&layer, t, eps).unwrap().row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn far_from_layer_only_regular_terms_remain() {
        let b = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.7, -0.7])).unwrap();
        let set = ExpansionSet::build(tilted(), b, 1, 1.0).unwrap();
        let layer = set.layer(0.0).unwrap();
        let eps = 0.01;
        let t = 0.5;
        let regular = set.phi(0, t).unwrap() + set.phi(1, t).unwrap() * eps;
        assert!(max_abs(&(set.eval(&layer, t, eps).unwrap() - regular)) < 1e-10);
    }

    #[test]
    fn decay_rate_matches_spectral_gap() {
        let set = ExpansionSet::build(sym(), TimeVaryingGenerator::zero(2), 0, 1.0).unwrap();
        let fit = set.layer(0.0).unwrap().fit_decay(0).unwrap();
        assert!((fit.rate - 2.0).abs() < 0.01, "rate {}", fit.rate);
    }

    #[test]
    fn order_one_error_shrinks_quadratically() {
        let b = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.7, -0.7])).unwrap();
        let set = ExpansionSet::build(tilted(), b.clone(), 1, 1.0).unwrap();
        let layer = set.layer(0.0).unwrap();
        let grid: Vec<f64> = (1..=20).map(|j| 0.05 * j as f64).collect();
        let mut errs = Vec::new();
        for &eps in &[0.04, 0.02] {
            let model = TwoScaleModel::new(tilted(), b.clone(), eps, 1.0).unwrap();
            let exact = transition_matrices(&model, 0.0, &grid).unwrap();
            let mut worst: f64 = 0.0;
            for (p, &t) in exact.iter().zip(&grid) {
                worst = worst.max(norm_inf(&(p - set.eval(&layer, t, eps).unwrap())));
            }
            errs.push(worst);
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.0 && ratio < 5.5, "ratio {ratio}, errs {errs:?}");
    }
}
