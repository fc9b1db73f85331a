//! Quasi-stationary distributions, group inverses and exact transition laws.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{TimeVaryingGenerator, TwoScaleModel};
use crate::linalg::{condition_one, expm, max_abs};

/// Entries below this are rejected outright by the quasi-stationary solve.
const NEGATIVE_REJECT: f64 = -1e-8;

/// A probability row vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Accepts entries `>= -1e-12` (clamped to zero) summing to one within `1e-10`.
    pub fn new(mut entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("probability vector is empty".into()));
        }
        for (i, p) in entries.iter_mut().enumerate() {
            if !p.is_finite() || *p < -1e-12 {
                return Err(Error::Invalid(format!("entry {i} = {p} is not a probability")));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    /// Point mass on `state`.
    pub fn point_mass(dim: usize, state: usize) -> Result<Self> {
        if state >= dim {
            return Err(Error::Invalid(format!("state {state} out of range 0..{dim}")));
        }
        let mut v = vec![0.0; dim];
        v[state] = 1.0;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_row(&self) -> RowDVector<f64> {
        RowDVector::from_row_slice(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    fn from_row_unchecked(row: RowDVector<f64>) -> Self {
        Self(row.iter().map(|&x| x.max(0.0)).collect())
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Quasi-stationary distribution of `g` frozen at time `t`.
pub fn quasi_stationary(g: &TimeVaryingGenerator, t: f64) -> Result<ProbabilityVector> {
    stationary_of(&g.eval(t))
}

/// Solves `nu Q = 0`, `nu 1 = 1` by least squares on the augmented system
/// `nu (1 : Q) = (1 : 0)` with a Householder QR factorization.
pub fn stationary_of(q: &DMatrix<f64>) -> Result<ProbabilityVector> {
    let m = q.nrows();
    if q.ncols() != m || m == 0 {
        return Err(Error::Dimension("generator must be square and non-empty".into()));
    }
    // Transposed augmented system: rows are (1 ... 1) and then Q^T.
    let mut aug = DMatrix::zeros(m + 1, m);
    aug.row_mut(0).fill(1.0);
    aug.view_mut((1, 0), (m, m)).copy_from(&q.transpose());
    let mut rhs = DVector::zeros(m + 1);
    rhs[0] = 1.0;

    let qr = aug.qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let rank = r
        .diagonal()
        .iter()
        .filter(|x| x.abs() > 1e-12 * diag_max.max(1e-300))
        .count();
    if rank < m {
        return Err(Error::RankDeficient { rank, dim: m });
    }
    let qtb = qr.q().transpose() * rhs;
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { rank: m - 1, dim: m })?;

    let mut nu: Vec<f64> = x.iter().copied().collect();
    for (state, v) in nu.iter_mut().enumerate() {
        if *v < NEGATIVE_REJECT {
            return Err(Error::NegativeSolution { state, value: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= sum);
    Ok(ProbabilityVector(nu))
}

/// Group inverse `A#` of a weakly irreducible generator, with the data it was built from.
#[derive(Debug, Clone)]
pub struct GroupInverseBundle {
    pub a_sharp: DMatrix<f64>,
    pub nu: ProbabilityVector,
    /// `I - 1 nu`
    pub projector: DMatrix<f64>,
}

impl GroupInverseBundle {
    /// The deviation matrix `-A# = int_0^inf (exp(A tau) - 1 nu) dtau`.
    pub fn deviation(&self) -> DMatrix<f64> {
        -&self.a_sharp
    }
}

/// Computes `A# = 1 nu - (1 nu - Q)^{-1}` from one dense inverse.
pub fn group_inverse(q: &DMatrix<f64>, nu: &ProbabilityVector) -> Result<GroupInverseBundle> {
    let m = q.nrows();
    if q.ncols() != m || nu.len() != m {
        return Err(Error::Dimension(format!(
            "generator is {}x{} but nu has {} entries",
            m,
            q.ncols(),
            nu.len()
        )));
    }
    let one_nu = DMatrix::from_fn(m, m, |_, j| nu[j]);
    let fundamental = &one_nu - q;
    let (condition, inverse) = condition_one(&fundamental).ok_or(Error::SingularSystem {
        condition: f64::INFINITY,
    })?;
    if !(condition <= 1e12) {
        return Err(Error::SingularSystem { condition });
    }
    let a_sharp = &one_nu - inverse;
    let projector = DMatrix::identity(m, m) - one_nu;
    Ok(GroupInverseBundle {
        a_sharp,
        nu: nu.clone(),
        projector,
    })
}

/// Group inverse of `g` frozen at `t`.
pub fn group_inverse_at(g: &TimeVaryingGenerator, t: f64) -> Result<GroupInverseBundle> {
    let q = g.eval(t);
    let nu = stationary_of(&q)?;
    group_inverse(&q, &nu)
}

/// `d nu / dt = -nu A'(t) A#(t)`, from differentiating `nu(t) A(t) = 0`.
pub fn nu_derivative(g: &TimeVaryingGenerator, t: f64) -> Result<RowDVector<f64>> {
    let bundle = group_inverse_at(g, t)?;
    let d = g.derivative(t, 1);
    Ok(-(bundle.nu.to_row() * d * bundle.a_sharp))
}

/// Step control for the exponential midpoint integrator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepControl {
    /// Acceptance threshold on the sup-norm change under step halving.
    pub tolerance: f64,
    /// Steps below this signal that `eps` is too small for direct integration.
    pub min_step: f64,
    pub max_halvings: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            min_step: 1e-14,
            max_halvings: 24,
        }
    }
}

/// Result of an accepted propagation.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub values: Vec<DMatrix<f64>>,
    /// Largest internal step of the accepted sweep.
    pub step: f64,
    /// Sup-norm change between the last two sweeps.
    pub change: f64,
}

/// Propagates `X' = X G_eps(t)` from `t_start` through `grid`.
///
/// Each sweep applies `exp(h G_eps(s + h/2))` on steps of size at most `h`,
/// starting from `h = min(eps/10, T/1000)`. The step is halved until the
/// outputs change by less than the tolerance; the finer sweep is returned.
pub fn propagate(
    model: &TwoScaleModel,
    init: &DMatrix<f64>,
    t_start: f64,
    grid: &[f64],
    control: StepControl,
) -> Result<Propagation> {
    if init.ncols() != model.dim() {
        return Err(Error::Dimension("initial state width does not match the model".into()));
    }
    let slack = 1e-12 * model.horizon.max(1.0);
    let mut prev_t = t_start;
    for &t in grid {
        if t < prev_t - slack || t > model.horizon + slack || t < -slack {
            return Err(Error::Invalid(format!(
                "grid must be increasing within [{t_start}, {}], found {t}",
                model.horizon
            )));
        }
        prev_t = t;
    }

    let mut h = (model.eps / 10.0).min(model.horizon / 1000.0);
    if h < control.min_step {
        return Err(Error::StepUnderflow { step: h });
    }
    let mut coarse = sweep(model, init, t_start, grid, h)?;
    for _ in 0..control.max_halvings {
        h /= 2.0;
        if h < control.min_step {
            return Err(Error::StepUnderflow { step: h });
        }
        let fine = sweep(model, init, t_start, grid, h)?;
        let change = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max);
        if change < control.tolerance {
            return Ok(Propagation {
                values: fine,
                step: h,
                change,
            });
        }
        coarse = fine;
    }
    Err(Error::StepUnderflow { step: h })
}

fn sweep(
    model: &TwoScaleModel,
    init: &DMatrix<f64>,
    t_start: f64,
    grid: &[f64],
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let mut x = init.clone();
    let mut t = t_start;
    let mut out = Vec::with_capacity(grid.len());
    for &target in grid {
        let len = target - t;
        if len > 0.0 {
            let n = (len / h).ceil().max(1.0) as usize;
            let dt = len / n as f64;
            for k in 0..n {
                let mid = t + (k as f64 + 0.5) * dt;
                x *= expm(&(model.generator_at(mid) * dt))?;
            }
            t = target;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Distribution `p_eps(t)` on `grid`, starting from `p0` at time 0.
pub fn forward_solve(
    model: &TwoScaleModel,
    p0: &ProbabilityVector,
    grid: &[f64],
) -> Result<Vec<ProbabilityVector>> {
    if p0.len() != model.dim() {
        return Err(Error::Dimension("initial distribution size does not match the model".into()));
    }
    let init = DMatrix::from_row_slice(1, p0.len(), p0.as_slice());
    let prop = propagate(model, &init, 0.0, grid, StepControl::default())?;
    Ok(prop
        .values
        .into_iter()
        .map(|m| {
            let row = RowDVector::from_iterator(m.ncols(), m.iter().copied());
            let sum = row.sum();
            ProbabilityVector::from_row_unchecked(row / sum)
        })
        .collect())
}

/// Transition matrix `P_eps(t0, t)`.
pub fn transition_matrix(model: &TwoScaleModel, t0: f64, t: f64) -> Result<DMatrix<f64>> {
    if t < t0 {
        return Err(Error::Invalid(format!("need t0 <= t, got t0 = {t0}, t = {t}")));
    }
    Ok(transition_matrices(model, t0, &[t])?.pop().expect("one grid point"))
}

/// `P_eps(t0, t)` for every `t` in an increasing grid starting at or after `t0`.
pub fn transition_matrices(model: &TwoScaleModel, t0: f64, grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let ident = DMatrix::identity(model.dim(), model.dim());
    Ok(propagate(model, &ident, t0, grid, StepControl::default())?.values)
}
