//! Diffusion limit of the scaled occupation measure.
//!
//! For weights `F`, the limit of `xi_eps(t) = z_eps(t)/sqrt(eps)` is a
//! Brownian motion run with clock `int_0^t sigma^2(s) ds`, where
//!
//! ```text
//! sigma^2(s) = 2 sum_ij f(i) nu_i(s) int_0^inf psi0_ij(s, tau) dtau f(j)
//!            = -2 (nu o F) A#(s) F.
//! ```
//!
//! The second line uses `int_0^inf Psi_0 dtau = -A#`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{forward_solve, group_inverse, stationary_of, GroupInverseBundle, ProbabilityVector};
use crate::error::{Error, Result};
use crate::expansion::layer_horizon;
use crate::generator::{TimeVaryingGenerator, TwoScaleModel};
use crate::linalg::{expm, norm_inf};
use crate::simulator::{occupation, CenteringTable, OccupationSpec, PathRecord};

/// Negative values of `sigma^2` down to this size are treated as round-off.
pub const CLAMP_LIMIT: f64 = 1e-8;

fn check_weights(dim: usize, f: &[f64]) -> Result<()> {
    if f.len() != dim {
        return Err(Error::Dimension(format!(
            "weight vector has {} entries for a {dim}-state chain",
            f.len()
        )));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("weights must be finite".into()));
    }
    Ok(())
}

/// The rate is unchanged by adding a constant to `F`; shifting by `f(0)`
/// makes constant weights give exactly zero.
fn shifted(f: &[f64]) -> DVector<f64> {
    DVector::from_iterator(f.len(), f.iter().map(|x| x - f[0]))
}

/// `-2 (nu o F) A# F` before clamping.
pub fn sigma_squared_raw(bundle: &GroupInverseBundle, f: &[f64]) -> f64 {
    let fv = shifted(f);
    let af = &bundle.a_sharp * &fv;
    -2.0 * (0..f.len()).map(|i| bundle.nu[i] * fv[i] * af[i]).sum::<f64>()
}

/// Clamps round-off negatives to zero; the flag reports whether a clamp happened.
fn clamp(value: f64) -> Result<(f64, bool)> {
    if value < -CLAMP_LIMIT {
        Err(Error::NegativeVariance { value })
    } else if value < 0.0 {
        Ok((0.0, true))
    } else {
        Ok((value, false))
    }
}

/// Variance rate `sigma^2(s)` of the limit diffusion.
pub fn sigma_squared(a: &TimeVaryingGenerator, f: &[f64], s: f64) -> Result<f64> {
    check_weights(a.dim(), f)?;
    let q = a.eval(s);
    let nu = stationary_of(&q)?;
    let bundle = group_inverse(&q, &nu)?;
    Ok(clamp(sigma_squared_raw(&bundle, f))?.0)
}

/// `sigma^2(s)` from composite Simpson quadrature of the layer integrals
/// `int_0^tau_max Psi_0(s, tau) dtau`. Without `tau_max` the layer horizon is used.
pub fn sigma_squared_quadrature_oracle(
    a: &TimeVaryingGenerator,
    f: &[f64],
    s: f64,
    tau_max: Option<f64>,
) -> Result<f64> {
    check_weights(a.dim(), f)?;
    let q = a.eval(s);
    let nu = stationary_of(&q)?;
    let m = q.nrows();
    let one_nu = DMatrix::from_fn(m, m, |_, j| nu[j]);
    let start = DMatrix::identity(m, m) - &one_nu;
    let tau_max = match tau_max {
        Some(t) => t,
        None => layer_horizon(&q, &start)?,
    };
    let h_target = 0.01f64.min(0.02 / norm_inf(&q).max(1e-300));
    let mut n = (tau_max / h_target).ceil() as usize;
    n += n % 2;
    let h = tau_max / n as f64;
    // Psi_0(tau) = (I - 1 nu) exp(q tau), advanced multiplicatively.
    let advance = expm(&(&q * h))?;
    let mut psi = start;
    let mut integral = DMatrix::zeros(m, m);
    for k in 0..=n {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += &psi * w;
        psi = &psi * &advance;
    }
    integral *= h / 3.0;
    let tail = norm_inf(&psi);
    if tail > 1e-6 {
        return Err(Error::NoDecay {
            order: 0,
            tau: tau_max,
            norm: tail,
        });
    }
    let fv = shifted(f);
    let inner = &integral * &fv;
    let value = 2.0 * (0..m).map(|i| nu[i] * fv[i] * inner[i]).sum::<f64>();
    Ok(clamp(value)?.0)
}

/// `sigma^2` on a grid with cumulative integrals computed by adaptive Simpson.
#[derive(Debug, Clone)]
pub struct VarianceProfile {
    generator: TimeVaryingGenerator,
    weights: Vec<f64>,
    pub grid: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Number of evaluations where a round-off negative was clamped to zero.
    pub clamp_count: usize,
    tolerance: f64,
}

struct Rate<'a> {
    generator: &'a TimeVaryingGenerator,
    weights: &'a [f64],
    clamps: usize,
}

impl Rate<'_> {
    fn at(&mut self, s: f64) -> Result<f64> {
        let q = self.generator.eval(s);
        let nu = stationary_of(&q)?;
        let (v, clamped) = clamp(sigma_squared_raw(&group_inverse(&q, &nu)?, self.weights))?;
        self.clamps += usize::from(clamped);
        Ok(v)
    }
}

fn adaptive_simpson(rate: &mut Rate<'_>, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = rate.at(a)?;
    let fb = rate.at(b)?;
    let m = 0.5 * (a + b);
    let fm = rate.at(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(rate, a, b, fa, fm, fb, whole, tol, 40)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    rate: &mut Rate<'_>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let flm = rate.at(lm)?;
    let frm = rate.at(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson_step(rate, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + simpson_step(rate, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Builds the variance profile of `F` under the fast generator `a` on `grid`.
///
/// `grid` must start at 0 and increase; the cumulative integral is accurate
/// to about `1e-9` in absolute terms at every node.
pub fn variance_profile(a: &TimeVaryingGenerator, f: &[f64], grid: &[f64]) -> Result<VarianceProfile> {
    check_weights(a.dim(), f)?;
    if grid.is_empty() || grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("variance grid must start at 0 and strictly increase".into()));
    }
    let tolerance = 1e-9;
    let mut rate = Rate {
        generator: a,
        weights: f,
        clamps: 0,
    };
    let sigma2 = grid.iter().map(|&s| rate.at(s)).collect::<Result<Vec<_>>>()?;
    let span = grid[grid.len() - 1].max(f64::MIN_POSITIVE);
    let mut cumulative = vec![0.0];
    let mut acc = 0.0;
    for w in grid.windows(2) {
        let piece = adaptive_simpson(&mut rate, w[0], w[1], tolerance * (w[1] - w[0]) / span)?;
        // sigma^2 >= 0, so only quadrature noise can make a piece negative.
        acc += piece.max(0.0);
        cumulative.push(acc);
    }
    Ok(VarianceProfile {
        generator: a.clone(),
        weights: f.to_vec(),
        grid: grid.to_vec(),
        sigma2,
        cumulative,
        clamp_count: rate.clamps,
        tolerance,
    })
}

impl VarianceProfile {
    pub fn sigma_squared(&self, s: f64) -> Result<f64> {
        sigma_squared(&self.generator, &self.weights, s)
    }

    /// `int_0^t sigma^2(s) ds` for any `t` in the grid's range.
    pub fn cumulative_at(&self, t: f64) -> Result<f64> {
        let last = self.grid[self.grid.len() - 1];
        if !(0.0..=last).contains(&t) {
            return Err(Error::Invalid(format!("t = {t} outside [0, {last}]")));
        }
        let k = self.grid.partition_point(|&g| g <= t) - 1;
        if self.grid[k] == t {
            return Ok(self.cumulative[k]);
        }
        let mut rate = Rate {
            generator: &self.generator,
            weights: &self.weights,
            clamps: 0,
        };
        let piece = adaptive_simpson(&mut rate, self.grid[k], t, self.tolerance)?;
        Ok(self.cumulative[k] + piece.max(0.0))
    }

    pub fn total(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    /// Report with the maximum deviation of the quadrature oracle over the grid.
    pub fn report(&self) -> Result<VarianceReport> {
        let mut deviation: f64 = 0.0;
        for (&s, &v) in self.grid.iter().zip(&self.sigma2) {
            let oracle = sigma_squared_quadrature_oracle(&self.generator, &self.weights, s, None)?;
            deviation = deviation.max((oracle - v).abs());
        }
        Ok(VarianceReport {
            s_grid: self.grid.clone(),
            sigma2: self.sigma2.clone(),
            cumulative: self.cumulative.clone(),
            oracle_deviation: deviation,
            clamp_count: self.clamp_count,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub s_grid: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub oracle_deviation: f64,
    pub clamp_count: usize,
}

/// Initial-layer bias `X_eps(t) = int_0^t e_x0 (P_eps(0, s) - Phi_0(s)) F ds` on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerBias {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub eps: f64,
    /// `sup |X_eps| / eps` over the grid.
    pub k_hat: f64,
}

/// Computes `X_eps` from the exact forward solution.
///
/// Simpson steps are at most `eps/40` inside the initial layer (out to the
/// stretched time where the layer has decayed below `1e-12`) and at most
/// `T/200` beyond it.
pub fn initial_layer_bias(model: &TwoScaleModel, x0: usize, f: &[f64], grid: &[f64]) -> Result<LayerBias> {
    let m = model.dim();
    check_weights(m, f)?;
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|&t| t < 0.0 || t > model.horizon) {
        return Err(Error::Invalid("bias grid must increase within [0, T]".into()));
    }
    let a0 = model.fast.eval(0.0);
    let nu0 = stationary_of(&a0)?;
    let start = DMatrix::identity(m, m) - DMatrix::from_fn(m, m, |_, j| nu0[j]);
    let layer_end = model.eps * layer_horizon(&a0, &start)?;
    let h_layer = model.eps / 40.0;
    let h_outer = model.horizon / 200.0;

    // Quadrature nodes, with the index of every output point in the node list.
    let mut nodes = vec![0.0];
    let mut marks = Vec::with_capacity(grid.len());
    let push_piece = |nodes: &mut Vec<f64>, a: f64, b: f64, hmax: f64| {
        if b > a {
            let mut n = ((b - a) / hmax).ceil() as usize;
            n = n.max(2);
            n += n % 2;
            for k in 1..=n {
                nodes.push(if k == n { b } else { a + (b - a) * k as f64 / n as f64 });
            }
        }
    };
    let mut cursor = 0.0;
    for &t in grid {
        if t > cursor {
            if cursor < layer_end {
                let mid = t.min(layer_end);
                push_piece(&mut nodes, cursor, mid, h_layer);
                push_piece(&mut nodes, mid, t, h_outer);
            } else {
                push_piece(&mut nodes, cursor, t, h_outer);
            }
            cursor = t;
        }
        marks.push(nodes.len() - 1);
    }

    let p = forward_solve(model, &ProbabilityVector::point_mass(m, x0)?, &nodes)?;
    let integrand: Vec<f64> = nodes
        .iter()
        .zip(&p)
        .map(|(&s, ps)| {
            let nu = stationary_of(&model.fast.eval(s))?;
            Ok((0..m).map(|j| (ps[j] - nu[j]) * f[j]).sum::<f64>())
        })
        .collect::<Result<_>>()?;

    // Simpson pieces always have an even number of intervals, so cumulative
    // sums are exact Simpson sums at piece ends; output marks are piece ends.
    let mut cumulative = vec![0.0; nodes.len()];
    let mut k = 0;
    while k + 2 < nodes.len() {
        let (a, mid, b) = (nodes[k], nodes[k + 1], nodes[k + 2]);
        let h1 = mid - a;
        let h2 = b - mid;
        // Simpson on a possibly non-uniform pair of intervals.
        let (f0, f1, f2) = (integrand[k], integrand[k + 1], integrand[k + 2]);
        let total = (h1 + h2) / 6.0
            * ((2.0 - h2 / h1) * f0 + (h1 + h2).powi(2) / (h1 * h2) * f1 + (2.0 - h1 / h2) * f2);
        cumulative[k + 1] = cumulative[k] + 0.5 * h1 * (f0 + f1);
        cumulative[k + 2] = cumulative[k] + total;
        k += 2;
    }
    let values: Vec<f64> = marks.iter().map(|&i| cumulative[i]).collect();
    let k_hat = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) / model.eps;
    Ok(LayerBias {
        grid: grid.to_vec(),
        values,
        eps: model.eps,
        k_hat,
    })
}

/// `M_eps(t) = z_eps(t) - X_eps(t)` for one simulated path on the bias grid.
pub fn martingale_component(path: &PathRecord, centering: &CenteringTable, bias: &LayerBias) -> Result<Vec<f64>> {
    let spec = OccupationSpec::new(centering.weights().to_vec(), bias.grid.clone())?;
    let z = occupation(path, &spec, centering)?;
    Ok(z.iter().zip(&bias.values).map(|(z, x)| z - x).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::tests::random_generator;
    use crate::generator::uniform_grid;
    use crate::harness::{reference_fast, reference_model};
    use proptest::prelude::*;

    fn sym() -> TimeVaryingGenerator {
        TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap()
    }

    #[test]
    fn symmetric_two_state_rate() {
        assert!((sigma_squared(&sym(), &[1.0, 0.0], 0.3).unwrap() - 0.25).abs() < 1e-12);
        let oracle = sigma_squared_quadrature_oracle(&sym(), &[1.0, 0.0], 0.3, None).unwrap();
        assert!((oracle - 0.25).abs() < 1e-8, "{oracle}");
    }

    #[test]
    fn constant_weights_give_zero() {
        let a = reference_fast();
        assert_eq!(sigma_squared(&a, &[2.0, 2.0, 2.0], 0.4).unwrap(), 0.0);
        assert!(sigma_squared_quadrature_oracle(&a, &[2.0, 2.0, 2.0], 0.4, None).unwrap().abs() < 1e-10);
    }

    #[test]
    fn indicator_weights_match_diagonal_form() {
        let a = reference_fast();
        for i in 0..3 {
            let mut f = [0.0; 3];
            f[i] = 1.0;
            let bundle = crate::chain::group_inverse_at(&a, 0.7).unwrap();
            let diag = 2.0 * bundle.nu[i] * bundle.deviation()[(i, i)];
            assert!((sigma_squared(&a, &f, 0.7).unwrap() - diag).abs() < 1e-9);
        }
    }

    #[test]
    fn profile_constant_rate() {
        let grid = uniform_grid(0.0, 1.0, 11);
        let p = variance_profile(&sym(), &[1.0, 0.0], &grid).unwrap();
        assert_eq!(p.cumulative[0], 0.0);
        for (t, c) in grid.iter().zip(&p.cumulative) {
            assert!((c - 0.25 * t).abs() < 1e-12);
        }
        assert!((p.cumulative_at(0.55).unwrap() - 0.1375).abs() < 1e-12);
        assert_eq!(p.clamp_count, 0);
    }

    #[test]
    fn profile_refinement_is_stable() {
        let f = [1.0, 0.0, -1.0];
        let coarse = variance_profile(&reference_fast(), &f, &uniform_grid(0.0, 1.0, 5)).unwrap();
        let fine = variance_profile(&reference_fast(), &f, &uniform_grid(0.0, 1.0, 41)).unwrap();
        assert!((coarse.total() - fine.total()).abs() < 1e-8);
        assert!(fine.cumulative.windows(2).all(|w| w[1] >= w[0]));
        let report = fine.report().unwrap();
        assert!(report.oracle_deviation < 1e-8);
    }

    #[test]
    fn bias_two_state_closed_form() {
        let model = TwoScaleModel::new(sym(), TimeVaryingGenerator::zero(2), 0.05, 1.0).unwrap();
        let grid = vec![0.0, 0.01, 0.05, 0.2, 0.6, 1.0];
        let bias = initial_layer_bias(&model, 0, &[1.0, 0.0], &grid).unwrap();
        assert_eq!(bias.values[0], 0.0);
        for (t, x) in grid.iter().zip(&bias.values) {
            let exact = 0.05 / 4.0 * (1.0 - (-2.0 * t / 0.05).exp());
            assert!((x - exact).abs() < 1e-8, "t={t}: {x} vs {exact}");
        }
        assert!((bias.k_hat - 0.25 * (1.0 - (-40.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn bias_scales_with_eps() {
        let grid = uniform_grid(0.0, 1.0, 41);
        let ks: Vec<f64> = [0.1, 0.05, 0.02]
            .iter()
            .map(|&eps| {
                let model = reference_model(eps).unwrap();
                initial_layer_bias(&model, 0, &[1.0, 0.0, -1.0], &grid).unwrap().k_hat
            })
            .collect();
        let (lo, hi) = ks.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &k| (l.min(k), h.max(k)));
        assert!(hi / lo < 4.0, "{ks:?}");
        assert!(ks.iter().all(|&k| k <= 2.0 * ks[0]), "{ks:?}");
    }

    #[test]
    fn rejects_wrong_weight_length() {
        assert!(matches!(sigma_squared(&sym(), &[1.0], 0.0), Err(Error::Dimension(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn oracle_matches_closed_form(
            m in 2usize..=6,
            rates in proptest::collection::vec(0.05f64..3.0, 36),
            weights in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let q = random_generator(m, &rates);
            let g = TimeVaryingGenerator::constant(q).unwrap();
            let f = &weights[..m];
            let closed = sigma_squared(&g, f, 0.0).unwrap();
            let oracle = sigma_squared_quadrature_oracle(&g, f, 0.0, None).unwrap();
            prop_assert!((closed - oracle).abs() < 1e-8, "{} vs {}", closed, oracle);
            prop_assert!(closed >= 0.0);
        }
    }
}
