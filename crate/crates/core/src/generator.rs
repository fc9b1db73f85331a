//! Time-varying generators and the two-time-scale model built from them.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::max_abs;

type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// One term `coeff * (c0 + c1 t + c2 t^2 + ...)` of a polynomial generator.
#[derive(Debug, Clone)]
pub struct PolyTerm {
    pub coeff: DMatrix<f64>,
    pub time_poly: Vec<f64>,
}

impl PolyTerm {
    fn poly_derivative(&self, t: f64, order: usize) -> f64 {
        // Horner on sum_k c_k k!/(k-order)! t^(k-order)
        let mut acc = 0.0;
        for (k, &c) in self.time_poly.iter().enumerate().skip(order).rev() {
            let falling: f64 = ((k - order + 1)..=k).map(|x| x as f64).product();
            acc = acc * t + c * falling;
        }
        acc
    }
}

#[derive(Clone)]
enum Source {
    Polynomial(Vec<PolyTerm>),
    Closure {
        eval: MatrixFn,
        derivatives: Vec<MatrixFn>,
        smoothness: usize,
    },
}

/// A time-indexed rate matrix `t -> Q(t)` with derivative access.
///
/// Polynomial generators (the JSON input format) have analytic derivatives of
/// every order. Closure-backed generators carry whatever derivative evaluators
/// the caller supplied; higher orders fall back to central differences and
/// are flagged through [`TimeVaryingGenerator::uses_fd_fallback`].
#[derive(Clone)]
pub struct TimeVaryingGenerator {
    dim: usize,
    source: Source,
}

impl fmt::Debug for TimeVaryingGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.source {
            Source::Polynomial(terms) => format!("polynomial({} terms)", terms.len()),
            Source::Closure { derivatives, .. } => format!("closure({} derivatives)", derivatives.len()),
        };
        f.debug_struct("TimeVaryingGenerator")
            .field("dim", &self.dim)
            .field("source", &kind)
            .finish()
    }
}

impl TimeVaryingGenerator {
    pub fn from_terms(dim: usize, terms: Vec<PolyTerm>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("generator dimension must be positive".into()));
        }
        for (k, term) in terms.iter().enumerate() {
            if term.coeff.nrows() != dim || term.coeff.ncols() != dim {
                return Err(Error::Dimension(format!(
                    "term {k} coefficient is {}x{}, expected {dim}x{dim}",
                    term.coeff.nrows(),
                    term.coeff.ncols()
                )));
            }
            if term.coeff.iter().chain(term.time_poly.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("term {k} has non-finite entries")));
            }
        }
        Ok(Self {
            dim,
            source: Source::Polynomial(terms),
        })
    }

    pub fn constant(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::Dimension("generator matrix must be square".into()));
        }
        let dim = q.nrows();
        Self::from_terms(
            dim,
            vec![PolyTerm {
                coeff: q,
                time_poly: vec![1.0],
            }],
        )
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            source: Source::Polynomial(Vec::new()),
        }
    }

    /// A generator backed by closures. `derivatives[j]` evaluates the
    /// `(j+1)`-th derivative; `smoothness` is the declared differentiability order.
    pub fn from_fn<F>(dim: usize, eval: F, derivatives: Vec<MatrixFn>, smoothness: usize) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            source: Source::Closure {
                eval: Arc::new(eval),
                derivatives,
                smoothness,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Declared smoothness order (`usize::MAX` for polynomials).
    pub fn smoothness(&self) -> usize {
        match &self.source {
            Source::Polynomial(_) => usize::MAX,
            Source::Closure { smoothness, .. } => *smoothness,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self.source, Source::Polynomial(_))
    }

    /// True when the derivative of this order is not available analytically.
    pub fn uses_fd_fallback(&self, order: usize) -> bool {
        match &self.source {
            Source::Polynomial(_) => false,
            Source::Closure { derivatives, .. } => order > derivatives.len(),
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        self.derivative(t, 0)
    }

    /// `order`-th time derivative at `t`; order 0 is the generator itself.
    pub fn derivative(&self, t: f64, order: usize) -> DMatrix<f64> {
        match &self.source {
            Source::Polynomial(terms) => {
                let mut out = DMatrix::zeros(self.dim, self.dim);
                for term in terms {
                    let c = term.poly_derivative(t, order);
                    if c != 0.0 {
                        out += &term.coeff * c;
                    }
                }
                out
            }
            Source::Closure {
                eval, derivatives, ..
            } => {
                if order == 0 {
                    eval(t)
                } else if let Some(d) = derivatives.get(order - 1) {
                    d(t)
                } else {
                    self.finite_difference(t, order)
                }
            }
        }
    }

    /// Central-difference derivative of any order.
    ///
    /// The first derivative uses `h = 1e-5 max(1, |t|)`; order `j` uses
    /// `h = 10^(-5/j) max(1, |t|)` so that round-off stays bounded.
    pub fn finite_difference(&self, t: f64, order: usize) -> DMatrix<f64> {
        if order == 0 {
            return self.eval(t);
        }
        let h = 10f64.powf(-5.0 / order as f64) * t.abs().max(1.0);
        let mut out = DMatrix::zeros(self.dim, self.dim);
        let mut binom = 1.0;
        for k in 0..=order {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let x = t + (order as f64 / 2.0 - k as f64) * h;
            out += self.eval(x) * (sign * binom);
            binom = binom * (order - k) as f64 / (k + 1) as f64;
        }
        out / h.powi(order as i32)
    }

    /// Writes row `i` of `Q(t)` into `out` without building the full matrix
    /// for polynomial generators.
    pub fn row_into(&self, t: f64, i: usize, out: &mut [f64]) {
        match &self.source {
            Source::Polynomial(terms) => {
                out.iter_mut().for_each(|x| *x = 0.0);
                for term in terms {
                    let c = term.poly_derivative(t, 0);
                    if c != 0.0 {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += term.coeff[(i, j)] * c;
                        }
                    }
                }
            }
            Source::Closure { eval, .. } => {
                let q = eval(t);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = q[(i, j)];
                }
            }
        }
    }

    /// `a * self + b * other` for polynomial generators; closures are combined lazily.
    pub fn combine(&self, a: f64, other: &TimeVaryingGenerator, b: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "cannot combine generators of size {} and {}",
                self.dim, other.dim
            )));
        }
        match (&self.source, &other.source) {
            (Source::Polynomial(x), Source::Polynomial(y)) => {
                let scaled = |term: &PolyTerm, s: f64| PolyTerm {
                    coeff: &term.coeff * s,
                    time_poly: term.time_poly.clone(),
                };
                let terms = x
                    .iter()
                    .map(|term| scaled(term, a))
                    .chain(y.iter().map(|term| scaled(term, b)))
                    .collect();
                Self::from_terms(self.dim, terms)
            }
            _ => {
                let order = self.smoothness().min(other.smoothness()).min(8);
                let (lhs, rhs) = (self.clone(), other.clone());
                let derivs: Vec<MatrixFn> = (1..=order)
                    .take_while(|&j| !lhs.uses_fd_fallback(j) && !rhs.uses_fd_fallback(j))
                    .map(|j| {
                        let (l, r) = (lhs.clone(), rhs.clone());
                        Arc::new(move |t: f64| l.derivative(t, j) * a + r.derivative(t, j) * b) as MatrixFn
                    })
                    .collect();
                let (l, r) = (self.clone(), other.clone());
                Ok(Self::from_fn(
                    self.dim,
                    move |t| l.eval(t) * a + r.eval(t) * b,
                    derivs,
                    order,
                ))
            }
        }
    }

    pub fn from_spec(spec: &GeneratorSpec) -> Result<Self> {
        let dim = spec.m0;
        let terms = spec
            .terms
            .iter()
            .enumerate()
            .map(|(k, term)| {
                if term.coeff.len() != dim || term.coeff.iter().any(|r| r.len() != dim) {
                    return Err(Error::Dimension(format!(
                        "term {k} coefficient must be {dim}x{dim}"
                    )));
                }
                let flat: Vec<f64> = term.coeff.iter().flatten().copied().collect();
                Ok(PolyTerm {
                    coeff: DMatrix::from_row_slice(dim, dim, &flat),
                    time_poly: term.time_poly.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(dim, terms)
    }

    /// Polynomial generators convert back to their JSON description.
    pub fn to_spec(&self) -> Option<GeneratorSpec> {
        match &self.source {
            Source::Polynomial(terms) => Some(GeneratorSpec {
                m0: self.dim,
                terms: terms
                    .iter()
                    .map(|t| TermSpec {
                        coeff: t
                            .coeff
                            .row_iter()
                            .map(|r| r.iter().copied().collect())
                            .collect(),
                        time_poly: t.time_poly.clone(),
                    })
                    .collect(),
            }),
            Source::Closure { .. } => None,
        }
    }
}

/// JSON description of a polynomial generator:
/// `{"m0": 3, "terms": [{"coeff": [[..]], "time_poly": [c0, c1, ..]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub m0: usize,
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub coeff: Vec<Vec<f64>>,
    pub time_poly: Vec<f64>,
}

impl GeneratorSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One violated generator invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeOffDiagonal { t: f64, i: usize, j: usize, value: f64 },
    RowSum { t: f64, i: usize, value: f64 },
    NonFinite { t: f64, i: usize, j: usize },
    DerivativeMismatch { t: f64, order: usize, relative_error: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub violations: Vec<Violation>,
    /// Set when some derivative checks had to rely on finite differences.
    pub fd_fallback: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks generator invariants at every probe time. Never aborts.
///
/// Off-diagonals must be nonnegative, each row must sum to zero within
/// `1e-12` times the largest absolute row sum, and analytic first derivatives
/// must agree with central differences to relative tolerance `1e-5`.
pub fn validate_generator(g: &TimeVaryingGenerator, probe_times: &[f64]) -> ValidationReport {
    let mut report = ValidationReport {
        probes: probe_times.len(),
        fd_fallback: g.uses_fd_fallback(1),
        ..Default::default()
    };
    for &t in probe_times {
        let q = g.eval(t);
        check_matrix(&q, t, &mut report.violations);
        if !g.uses_fd_fallback(1) {
            let analytic = g.derivative(t, 1);
            let h = 1e-5 * t.abs().max(1.0);
            let numeric = (g.eval(t + h) - g.eval(t - h)) / (2.0 * h);
            let scale = max_abs(&analytic).max(max_abs(&q)).max(1e-300);
            let rel = max_abs(&(analytic - numeric)) / scale;
            if rel > 1e-5 {
                report.violations.push(Violation::DerivativeMismatch {
                    t,
                    order: 1,
                    relative_error: rel,
                });
            }
        }
    }
    report
}

pub(crate) fn check_matrix(q: &DMatrix<f64>, t: f64, out: &mut Vec<Violation>) {
    let n = q.nrows();
    let magnitude = q
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let tol = 1e-12 * magnitude;
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let v = q[(i, j)];
            if !v.is_finite() {
                out.push(Violation::NonFinite { t, i, j });
                continue;
            }
            if i != j && v < 0.0 {
                out.push(Violation::NegativeOffDiagonal { t, i, j, value: v });
            }
            sum += v;
        }
        if sum.abs() > tol {
            out.push(Violation::RowSum { t, i, value: sum });
        }
    }
}

/// `G_eps(t) = A(t)/eps + B(t)` on the horizon `[0, T]`.
#[derive(Debug, Clone)]
pub struct TwoScaleModel {
    pub fast: TimeVaryingGenerator,
    pub slow: TimeVaryingGenerator,
    pub eps: f64,
    pub horizon: f64,
}

impl TwoScaleModel {
    pub fn new(
        fast: TimeVaryingGenerator,
        slow: TimeVaryingGenerator,
        eps: f64,
        horizon: f64,
    ) -> Result<Self> {
        if fast.dim() != slow.dim() {
            return Err(Error::Dimension(format!(
                "fast generator is {0}x{0} but slow generator is {1}x{1}",
                fast.dim(),
                slow.dim()
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            fast,
            slow,
            eps,
            horizon,
        })
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.fast.clone(), self.slow.clone(), eps, self.horizon)
    }

    pub fn dim(&self) -> usize {
        self.fast.dim()
    }

    pub fn generator_at(&self, t: f64) -> DMatrix<f64> {
        self.fast.eval(t) / self.eps + self.slow.eval(t)
    }

    pub fn row_into(&self, t: f64, i: usize, fast_buf: &mut [f64], out: &mut [f64]) {
        self.fast.row_into(t, i, fast_buf);
        self.slow.row_into(t, i, out);
        for (o, f) in out.iter_mut().zip(fast_buf.iter()) {
            *o += f / self.eps;
        }
    }

    /// Validates `A`, `B` and the combined generator on a uniform probe grid.
    pub fn validate(&self, probes: usize) -> ValidationReport {
        let times = uniform_grid(0.0, self.horizon, probes.max(2));
        let mut report = validate_generator(&self.fast, &times);
        let slow = validate_generator(&self.slow, &times);
        report.violations.extend(slow.violations);
        report.fd_fallback |= slow.fd_fallback;
        for &t in &times {
            check_matrix(&self.generator_at(t), t, &mut report.violations);
        }
        report
    }
}

/// `n` equally spaced points from `a` to `b` inclusive.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    b
                } else {
                    a + (b - a) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(q: [f64; 4]) -> TimeVaryingGenerator {
        TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &q)).unwrap()
    }

    #[test]
    fn canonical_two_state_is_valid() {
        let r = validate_generator(&two_state([-1.0, 1.0, 1.0, -1.0]), &[0.0, 0.5, 1.0]);
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn row_sum_violation_reported() {
        let r = validate_generator(&two_state([-1.0, 0.5, 1.0, -1.0]), &[0.0]);
        assert_eq!(r.violations.len(), 1);
        match &r.violations[0] {
            Violation::RowSum { i, value, .. } => {
                assert_eq!(*i, 0);
                assert!((value + 0.5).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_off_diagonal_reported() {
        let r = validate_generator(&two_state([1.0, -1.0, -1.0, 1.0]), &[0.3]);
        let negatives = r
            .violations
            .iter()
            .filter(|v| matches!(v, Violation::NegativeOffDiagonal { .. }))
            .count();
        assert_eq!(negatives, 2);
    }

    #[test]
    fn polynomial_derivatives() {
        // Q(t) = C (1 + 2t + 3t^2): Q' = C (2 + 6t), Q'' = 6C, Q''' = 0
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        let g = TimeVaryingGenerator::from_terms(
            2,
            vec![PolyTerm {
                coeff: c.clone(),
                time_poly: vec![1.0, 2.0, 3.0],
            }],
        )
        .unwrap();
        let t = 0.7;
        assert!(max_abs(&(g.eval(t) - &c * (1.0 + 2.0 * t + 3.0 * t * t))) < 1e-14);
        assert!(max_abs(&(g.derivative(t, 1) - &c * (2.0 + 6.0 * t))) < 1e-14);
        assert!(max_abs(&(g.derivative(t, 2) - &c * 6.0)) < 1e-14);
        assert!(max_abs(&g.derivative(t, 3)) == 0.0);
    }

    #[test]
    fn closure_fallback_is_flagged_and_accurate() {
        let g = TimeVaryingGenerator::from_fn(
            2,
            |t| {
                let r = 1.0 + t.sin();
                DMatrix::from_row_slice(2, 2, &[-r, r, 1.0, -1.0])
            },
            Vec::new(),
            4,
        );
        assert!(g.uses_fd_fallback(1));
        let d = g.derivative(0.4, 1);
        assert!((d[(0, 1)] - 0.4f64.cos()).abs() < 1e-8);
        let d2 = g.derivative(0.4, 2);
        assert!((d2[(0, 1)] + 0.4f64.sin()).abs() < 1e-4);
        let r = validate_generator(&g, &[0.1]);
        assert!(r.fd_fallback && r.is_valid());
    }

    #[test]
    fn analytic_derivative_mismatch_detected() {
        let wrong: MatrixFn = Arc::new(|_| DMatrix::from_row_slice(2, 2, &[-5.0, 5.0, 0.0, 0.0]));
        let g = TimeVaryingGenerator::from_fn(
            2,
            |t| DMatrix::from_row_slice(2, 2, &[-(1.0 + t), 1.0 + t, 1.0, -1.0]),
            vec![wrong],
            2,
        );
        let r = validate_generator(&g, &[0.2]);
        assert!(matches!(r.violations[0], Violation::DerivativeMismatch { .. }));
    }

    #[test]
    fn json_round_trip_and_row_eval() {
        let text = r#"{"m0": 2, "terms": [
            {"coeff": [[-1, 1], [2, -2]], "time_poly": [1.0]},
            {"coeff": [[-0.5, 0.5], [0, 0]], "time_poly": [0.0, 1.0]}]}"#;
        let spec = GeneratorSpec::from_json(text).unwrap();
        let g = TimeVaryingGenerator::from_spec(&spec).unwrap();
        assert_eq!(g.to_spec().unwrap(), spec);
        let q = g.eval(2.0);
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 2.0, -2.0]));
        let mut row = [0.0; 2];
        g.row_into(2.0, 1, &mut row);
        assert_eq!(row, [2.0, -2.0]);
    }

    #[test]
    fn model_rejects_bad_parameters() {
        let a = two_state([-1.0, 1.0, 1.0, -1.0]);
        let b = TimeVaryingGenerator::zero(3);
        assert!(TwoScaleModel::new(a.clone(), b, 0.1, 1.0).is_err());
        let z = TimeVaryingGenerator::zero(2);
        assert!(TwoScaleModel::new(a.clone(), z.clone(), 0.0, 1.0).is_err());
        assert!(TwoScaleModel::new(a, z, 0.1, -1.0).is_err());
    }
}
