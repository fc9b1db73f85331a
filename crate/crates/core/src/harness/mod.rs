//! Reference model and the numerical experiments driven by the CLI.

use nalgebra::DMatrix;

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;

pub use config::{Bounds, ExperimentConfig, ExperimentKind, Inline, ModelSource, CONFIG_SCHEMA};
pub use experiments::{
    run_clt, run_expansion_error, run_experiment, run_queue_demo, run_rate_proxy, run_second_moment,
};
pub use report::{CheckResult, ExperimentReport, MetricRow};

use crate::generator::{PolyTerm, TimeVaryingGenerator, TwoScaleModel};

/// `A(t) = [[-(1+t/2), 1+t/2, 0], [1, -2, 1], [0, 2-t/2, -(2-t/2)]]`.
pub fn reference_fast() -> TimeVaryingGenerator {
    TimeVaryingGenerator::from_terms(
        3,
        vec![
            PolyTerm {
                coeff: DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 2.0, -2.0]),
                time_poly: vec![1.0],
            },
            PolyTerm {
                coeff: DMatrix::from_row_slice(3, 3, &[-0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5, 0.5]),
                time_poly: vec![0.0, 1.0],
            },
        ],
    )
    .expect("reference fast generator")
}

pub fn reference_slow() -> TimeVaryingGenerator {
    TimeVaryingGenerator::constant(DMatrix::from_row_slice(
        3,
        3,
        &[-1.0, 1.0, 0.0, 0.5, -1.0, 0.5, 0.0, 1.0, -1.0],
    ))
    .expect("reference slow generator")
}

/// The three-state reference model on `[0, 1]`.
pub fn reference_model(eps: f64) -> crate::Result<TwoScaleModel> {
    TwoScaleModel::new(reference_fast(), reference_slow(), eps, 1.0)
}

/// Runs `f` on a dedicated rayon pool of `threads` workers (0 means the
/// rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> crate::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
