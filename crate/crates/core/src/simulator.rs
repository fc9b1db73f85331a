//! Exact path simulation by thinning, occupation measures and reproducible
//! Monte Carlo.
//!
//! Replication `r` draws from ChaCha8 seeded with `seed_from_u64(base_seed)`
//! on stream `r`, so every replication owns a non-overlapping keystream and
//! results do not depend on how replications are scheduled.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{nu_derivative, quasi_stationary};
use crate::error::{Error, Result};
use crate::generator::{uniform_grid, TimeVaryingGenerator, TwoScaleModel};
use crate::stats::{moments, quantile_sorted};

pub const RNG_NAME: &str = "ChaCha8 (rand_chacha 0.9), key from seed_from_u64(base_seed), stream = replication index";

const RATE_SCAN_POINTS: usize = 10_000;
const RATE_SAFETY: f64 = 1.05;
const TABLE_INTERVALS: usize = 1024;

/// RNG for replication `r` under `base_seed`.
pub fn replication_rng(base_seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(r);
    rng
}

/// One simulated trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub x0: usize,
    pub jump_times: Vec<f64>,
    /// State entered at each jump.
    pub states: Vec<usize>,
    pub base_seed: u64,
    pub stream: u64,
    pub eps: f64,
    pub horizon: f64,
}

impl PathRecord {
    pub fn state_at(&self, t: f64) -> usize {
        match self.jump_times.partition_point(|&s| s <= t) {
            0 => self.x0,
            k => self.states[k - 1],
        }
    }

    pub fn terminal_state(&self) -> usize {
        self.states.last().copied().unwrap_or(self.x0)
    }

    pub fn jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Checks increasing jump times, actual state changes and state range.
    pub fn check(&self, dim: usize) -> Result<()> {
        let mut prev_t = 0.0;
        let mut prev = self.x0;
        if self.x0 >= dim {
            return Err(Error::Invalid(format!("initial state {} out of range", self.x0)));
        }
        for (&t, &s) in self.jump_times.iter().zip(&self.states) {
            if t <= prev_t || t > self.horizon || s >= dim || s == prev {
                return Err(Error::Invalid(format!("malformed path at t = {t}")));
            }
            prev_t = t;
            prev = s;
        }
        Ok(())
    }

    /// Sojourns `(state, start, end)` covering `[0, horizon]`.
    pub fn sojourns(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let starts = std::iter::once(0.0).chain(self.jump_times.iter().copied());
        let ends = self.jump_times.iter().copied().chain(std::iter::once(self.horizon));
        let states = std::iter::once(self.x0).chain(self.states.iter().copied());
        states.zip(starts.zip(ends)).map(|(s, (a, b))| (s, a, b))
    }
}

/// Thinning sampler with a precomputed dominating rate.
#[derive(Debug, Clone)]
pub struct Sampler {
    model: TwoScaleModel,
    rate_bound: f64,
}

impl Sampler {
    /// Scans `max_i |g_ii(t)|` on 10^4 points and pads it by 5%.
    pub fn new(model: &TwoScaleModel) -> Result<Self> {
        let m = model.dim();
        let mut fast = vec![0.0; m];
        let mut row = vec![0.0; m];
        let mut peak: f64 = 0.0;
        for t in uniform_grid(0.0, model.horizon, RATE_SCAN_POINTS) {
            for i in 0..m {
                model.row_into(t, i, &mut fast, &mut row);
                peak = peak.max(row[i].abs());
            }
        }
        if !peak.is_finite() {
            return Err(Error::Invalid("generator diagonal is not finite".into()));
        }
        Ok(Self {
            model: model.clone(),
            rate_bound: RATE_SAFETY * peak,
        })
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn model(&self) -> &TwoScaleModel {
        &self.model
    }

    pub fn sample<R: Rng>(&self, x0: usize, rng: &mut R) -> Result<PathRecord> {
        let m = self.model.dim();
        if x0 >= m {
            return Err(Error::Invalid(format!("initial state {x0} outside 0..{m}")));
        }
        let mut path = PathRecord {
            x0,
            jump_times: Vec::new(),
            states: Vec::new(),
            base_seed: 0,
            stream: 0,
            eps: self.model.eps,
            horizon: self.model.horizon,
        };
        let bound = self.rate_bound;
        if bound == 0.0 {
            return Ok(path);
        }
        let mut fast = vec![0.0; m];
        let mut row = vec![0.0; m];
        let mut state = x0;
        let mut t = 0.0;
        loop {
            let wait: f64 = rng.sample(Exp1);
            t += wait / bound;
            if t > self.model.horizon {
                return Ok(path);
            }
            self.model.row_into(t, state, &mut fast, &mut row);
            let exit = -row[state];
            if exit > bound {
                return Err(Error::RateBoundExceeded { t, rate: exit, bound });
            }
            let u = rng.random::<f64>() * bound;
            let mut acc = 0.0;
            for (j, &rate) in row.iter().enumerate() {
                if j == state {
                    continue;
                }
                acc += rate;
                if u < acc {
                    state = j;
                    path.jump_times.push(t);
                    path.states.push(j);
                    break;
                }
            }
        }
    }
}

/// Samples one path from stream 0 of `seed`.
pub fn sample_path(model: &TwoScaleModel, x0: usize, seed: u64) -> Result<PathRecord> {
    let mut rng = replication_rng(seed, 0);
    let mut path = Sampler::new(model)?.sample(x0, &mut rng)?;
    path.base_seed = seed;
    Ok(path)
}

/// Weights `F` and the grid on which occupation measures are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationSpec {
    pub weights: Vec<f64>,
    pub grid: Vec<f64>,
}

impl OccupationSpec {
    pub fn new(weights: Vec<f64>, grid: Vec<f64>) -> Result<Self> {
        if weights.iter().chain(&grid).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("occupation weights and grid must be finite".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) || grid.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::Invalid("occupation grid must be strictly increasing and nonnegative".into()));
        }
        Ok(Self { weights, grid })
    }
}

/// Cubic Hermite table of `nu(s)` and `nu'(s)` used for the centering
/// integrals `int sum_i (f(x) - f(i)) nu_i(s) ds` of the occupation measure.
#[derive(Debug, Clone)]
pub struct CenteringTable {
    weights: Vec<f64>,
    dim: usize,
    horizon: f64,
    step: f64,
    nu: Vec<f64>,
    dnu: Vec<f64>,
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    128.0 / 225.0,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

impl CenteringTable {
    pub fn new(fast: &TimeVaryingGenerator, horizon: f64, weights: &[f64], intervals: usize) -> Result<Self> {
        let dim = fast.dim();
        if weights.len() != dim {
            return Err(Error::Dimension(format!(
                "weight vector has {} entries for a {dim}-state chain",
                weights.len()
            )));
        }
        let intervals = intervals.max(1);
        let mut nu = Vec::with_capacity((intervals + 1) * dim);
        let mut dnu = Vec::with_capacity((intervals + 1) * dim);
        for s in uniform_grid(0.0, horizon, intervals + 1) {
            nu.extend_from_slice(quasi_stationary(fast, s)?.as_slice());
            dnu.extend(nu_derivative(fast, s)?.iter());
        }
        Ok(Self {
            weights: weights.to_vec(),
            dim,
            horizon,
            step: horizon / intervals as f64,
            nu,
            dnu,
        })
    }

    pub fn for_model(model: &TwoScaleModel, weights: &[f64]) -> Result<Self> {
        Self::new(&model.fast, model.horizon, weights, TABLE_INTERVALS)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Interpolated `nu(s)`.
    pub fn nu_at(&self, s: f64) -> Vec<f64> {
        let (k, basis) = self.basis(s);
        (0..self.dim).map(|i| self.hermite(k, i, &basis)).collect()
    }

    fn basis(&self, s: f64) -> (usize, [f64; 4]) {
        let cells = self.nu.len() / self.dim - 1;
        let x = (s / self.step).clamp(0.0, cells as f64);
        let k = (x.floor() as usize).min(cells - 1);
        let th = x - k as f64;
        let (t2, t3) = (th * th, th * th * th);
        (
            k,
            [
                2.0 * t3 - 3.0 * t2 + 1.0,
                (t3 - 2.0 * t2 + th) * self.step,
                -2.0 * t3 + 3.0 * t2,
                (t3 - t2) * self.step,
            ],
        )
    }

    fn hermite(&self, k: usize, i: usize, b: &[f64; 4]) -> f64 {
        let (p, q) = (k * self.dim + i, (k + 1) * self.dim + i);
        b[0] * self.nu[p] + b[1] * self.dnu[p] + b[2] * self.nu[q] + b[3] * self.dnu[q]
    }

    /// `sum_i (f(x) - f(i)) nu_i(s)`.
    pub fn centered_rate(&self, x: usize, s: f64) -> f64 {
        let (k, basis) = self.basis(s);
        let fx = self.weights[x];
        (0..self.dim)
            .map(|i| (fx - self.weights[i]) * self.hermite(k, i, &basis))
            .sum()
    }

    /// Centered occupation increment of a sojourn in `x` over `[a, b]`.
    pub fn increment(&self, x: usize, a: f64, b: f64) -> f64 {
        let len = b - a;
        if len <= 0.0 {
            return 0.0;
        }
        if len < 1e-12 {
            return self.centered_rate(x, 0.5 * (a + b)) * len;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * len);
        GL5_NODES
            .iter()
            .zip(&GL5_WEIGHTS)
            .map(|(&n, &w)| w * self.centered_rate(x, mid + half * n))
            .sum::<f64>()
            * half
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Centered occupation measure `z_eps` on the spec grid.
pub fn occupation(path: &PathRecord, spec: &OccupationSpec, table: &CenteringTable) -> Result<Vec<f64>> {
    if spec.weights != table.weights {
        return Err(Error::Invalid("centering table was built for different weights".into()));
    }
    if spec.grid.last().is_some_and(|&t| t > path.horizon * (1.0 + 1e-12)) {
        return Err(Error::Invalid("occupation grid extends past the path horizon".into()));
    }
    let mut out = Vec::with_capacity(spec.grid.len());
    let mut acc = 0.0;
    let mut cursor = 0.0;
    let mut next = 0;
    let mut state = path.x0;
    for &g in &spec.grid {
        while next < path.jump_times.len() && path.jump_times[next] <= g {
            let jump = path.jump_times[next];
            acc += table.increment(state, cursor, jump);
            cursor = jump;
            state = path.states[next];
            next += 1;
        }
        acc += table.increment(state, cursor, g);
        cursor = cursor.max(g);
        out.push(acc);
    }
    Ok(out)
}

/// `xi_eps = z_eps / sqrt(eps)`.
pub fn scaled_occupation(z: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
    }
    let scale = eps.sqrt();
    Ok(z.iter().map(|v| v / scale).collect())
}

/// Runs `job` for replications `0..n` on the current rayon pool and returns
/// the results in replication order.
pub fn replicate<T, F>(n: usize, base_seed: u64, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|r| job(r, &mut replication_rng(base_seed, r)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub replications: usize,
    pub eps: f64,
    pub base_seed: u64,
    pub rng: String,
    pub rate_bound: f64,
    /// `xi_eps(T)` per replication, in replication order.
    pub terminal: Vec<f64>,
    pub mean: f64,
    pub mean_se: f64,
    pub second_moment: f64,
    pub second_moment_se: f64,
    pub quantile_levels: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub timing: Timing,
}

pub const QUANTILE_LEVELS: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

impl MonteCarloSummary {
    /// Statistics of terminal values; all of them are computed from the
    /// sorted sample so they do not depend on replication order.
    pub fn from_terminal(terminal: Vec<f64>, eps: f64, base_seed: u64, rate_bound: f64, timing: Timing) -> Result<Self> {
        if terminal.is_empty() {
            return Err(Error::Invalid("Monte Carlo needs at least one replication".into()));
        }
        let mut sorted = terminal.clone();
        sorted.sort_by(f64::total_cmp);
        let first = moments(&sorted);
        let squares: Vec<f64> = sorted.iter().map(|x| x * x).collect();
        let second = moments(&squares);
        Ok(Self {
            replications: terminal.len(),
            eps,
            base_seed,
            rng: RNG_NAME.into(),
            rate_bound,
            terminal,
            mean: first.mean,
            mean_se: first.std_error,
            second_moment: second.mean,
            second_moment_se: second.std_error,
            quantile_levels: QUANTILE_LEVELS.to_vec(),
            quantiles: QUANTILE_LEVELS.iter().map(|&p| quantile_sorted(&sorted, p)).collect(),
            timing,
        })
    }
}

/// Where replications start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    State(usize),
    /// Drawn from `nu(0)` with the replication's own generator.
    QuasiStationary,
}

impl From<usize> for InitialCondition {
    fn from(x0: usize) -> Self {
        Self::State(x0)
    }
}

impl InitialCondition {
    /// Initial distribution as a probability vector.
    pub fn distribution(&self, model: &TwoScaleModel) -> Result<crate::chain::ProbabilityVector> {
        match *self {
            Self::State(x) => crate::chain::ProbabilityVector::point_mass(model.dim(), x),
            Self::QuasiStationary => quasi_stationary(&model.fast, 0.0),
        }
    }
}

/// Draws an initial state from a probability vector.
fn draw_state<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples paths for `n` replications; state-valued starts use no randomness.
pub fn sample_paths_with<T, F>(
    sampler: &Sampler,
    initial: InitialCondition,
    n: usize,
    base_seed: u64,
    job: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, PathRecord) -> Result<T> + Sync,
{
    let p0 = initial.distribution(sampler.model())?;
    replicate(n, base_seed, |r, rng| {
        let x0 = match initial {
            InitialCondition::State(x) => x,
            InitialCondition::QuasiStationary => draw_state(p0.as_slice(), rng),
        };
        let mut path = sampler.sample(x0, rng)?;
        path.base_seed = base_seed;
        path.stream = r;
        job(r, path)
    })
}

/// Simulates `n` paths and summarises `xi_eps` at the last grid point.
pub fn monte_carlo(
    model: &TwoScaleModel,
    spec: &OccupationSpec,
    initial: impl Into<InitialCondition>,
    n: usize,
    base_seed: u64,
) -> Result<MonteCarloSummary> {
    let started = Instant::now();
    let sampler = Sampler::new(model)?;
    let table = CenteringTable::for_model(model, &spec.weights)?;
    let scale = model.eps.sqrt();
    let terminal = sample_paths_with(&sampler, initial.into(), n, base_seed, |_, path| {
        let z = occupation(&path, spec, &table)?;
        Ok(z.last().copied().unwrap_or(0.0) / scale)
    })?;
    let timing = Timing {
        elapsed_seconds: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    MonteCarloSummary::from_terminal(terminal, model.eps, base_seed, sampler.rate_bound(), timing)
}

/// Writes paths as CSV with columns `rep, jump_index, time, state`; the row
/// with `jump_index = 0` carries the initial state at time 0.
pub fn write_paths_csv<W: Write>(paths: &[PathRecord], mut out: W) -> Result<()> {
    writeln!(out, "rep,jump_index,time,state")?;
    for (rep, path) in paths.iter().enumerate() {
        writeln!(out, "{rep},0,0,{}", path.x0)?;
        for (k, (t, s)) in path.jump_times.iter().zip(&path.states).enumerate() {
            writeln!(out, "{rep},{},{t},{s}", k + 1)?;
        }
    }
    Ok(())
}
