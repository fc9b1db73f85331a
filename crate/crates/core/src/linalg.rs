//! Dense matrix helpers: the matrix exponential and a few norms.
//!
//! The exponential uses scaling and squaring with a diagonal Padé approximant
//! whose degree (3, 5, 7, 9 or 13) is chosen from the 1-norm of the argument,
//! following Higham's 2005 variant of the algorithm. Backward error is at the
//! level of unit round-off for every degree.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE_9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Induced 1-norm (maximum absolute column sum).
pub fn norm_one(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced infinity norm (maximum absolute row sum).
pub fn norm_inf(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest absolute row sum, used for generator conservation checks.
pub fn max_row_sum_abs(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
}

/// Matrix exponential `exp(a)`.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!(
            "expm needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("expm argument has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if n == 1 {
        return Ok(DMatrix::from_element(1, 1, a[(0, 0)].exp()));
    }

    let norm = norm_one(a);
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;

    if norm <= THETA_9 {
        let (u, v) = if norm <= THETA_3 {
            odd_even(a, &ident, &[&a2], &PADE_3)
        } else if norm <= THETA_5 {
            let a4 = &a2 * &a2;
            odd_even(a, &ident, &[&a2, &a4], &PADE_5)
        } else if norm <= THETA_7 {
            let a4 = &a2 * &a2;
            let a6 = &a4 * &a2;
            odd_even(a, &ident, &[&a2, &a4, &a6], &PADE_7)
        } else {
            let a4 = &a2 * &a2;
            let a6 = &a4 * &a2;
            let a8 = &a6 * &a2;
            odd_even(a, &ident, &[&a2, &a4, &a6, &a8], &PADE_9)
        };
        return pade_quotient(u, v);
    }

    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scale = 0.5f64.powi(s);
    let a_s = a * scale;
    let a2 = &a2 * (scale * scale);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE_13;

    let u_inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_poly = &a6 * &u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = &a_s * u_poly;
    let v_inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * &v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let mut r = pade_quotient(u, v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Odd and even parts `u = a * sum b[2k+1] a^{2k}`, `v = sum b[2k] a^{2k}`.
fn odd_even(
    a: &DMatrix<f64>,
    ident: &DMatrix<f64>,
    even_powers: &[&DMatrix<f64>],
    b: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut u_poly = ident * b[1];
    let mut v = ident * b[0];
    for (k, p) in even_powers.iter().enumerate() {
        u_poly += *p * b[2 * k + 3];
        v += *p * b[2 * k + 2];
    }
    (a * u_poly, v)
}

fn pade_quotient(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let denom = &v - &u;
    let numer = v + u;
    denom
        .lu()
        .solve(&numer)
        .ok_or(Error::SingularSystem { condition: f64::INFINITY })
}

/// 1-norm condition number estimate from an explicit inverse.
pub fn condition_one(a: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let inv = a.clone().try_inverse()?;
    Some((norm_one(a) * norm_one(&inv), inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_state_closed_form() {
        // exp of [[-a, a], [b, -b]] t has a rank-one-plus-decay closed form.
        let (a, b, t) = (1.3, 0.4, 2.7);
        let q = DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]) * t;
        let e = expm(&q).unwrap();
        let s = a + b;
        let d = (-s * t).exp();
        let expected = DMatrix::from_row_slice(
            2,
            2,
            &[
                (b + a * d) / s,
                (a - a * d) / s,
                (b - b * d) / s,
                (a + b * d) / s,
            ],
        );
        assert!(max_abs(&(e - expected)) < 1e-14);
    }

    #[test]
    fn diagonal_matrix() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-30.0, 0.1, 4.0]));
        let e = expm(&d).unwrap();
        for (i, x) in [-30.0f64, 0.1, 4.0].iter().enumerate() {
            assert!((e[(i, i)] - x.exp()).abs() <= 1e-13 * x.exp().max(1.0));
        }
    }

    #[test]
    fn large_norm_generator_rows_stay_stochastic() {
        let q = DMatrix::from_row_slice(3, 3, &[-50.0, 30.0, 20.0, 1.0, -1.5, 0.5, 70.0, 10.0, -80.0]);
        let e = expm(&(q * 3.0)).unwrap();
        for r in e.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&x| x >= -1e-14));
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(expm(&DMatrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn matches_taylor_reference(entries in proptest::collection::vec(-3.0f64..3.0, 16), scale in 0.01f64..4.0) {
            let a = DMatrix::from_row_slice(4, 4, &entries) * scale;
            let e = expm(&a).unwrap();
            // Independent route: exp(a) = exp(a / 2^k)^(2^k) with a long Taylor series.
            let k = 8;
            let small = &a / f64::from(1u32 << k);
            let mut term = DMatrix::<f64>::identity(4, 4);
            let mut sum = term.clone();
            for j in 1..30 {
                term = &term * &small / j as f64;
                sum += &term;
            }
            for _ in 0..k {
                sum = &sum * &sum;
            }
            let rel = max_abs(&(&e - &sum)) / max_abs(&sum).max(1.0);
            prop_assert!(rel < 1e-11, "relative deviation {}", rel);
        }

        #[test]
        fn inverse_of_negation(entries in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let a = DMatrix::from_row_slice(3, 3, &entries);
            let prod = expm(&a).unwrap() * expm(&(-&a)).unwrap();
            prop_assert!(max_abs(&(prod - DMatrix::identity(3, 3))) < 1e-11);
        }
    }
}
