//! Ground truth, bound formulas and parameter sweeps.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{NodeSpec, SimConfig};
use crate::digraph::Digraph;
use crate::engine::{self, RunOptions};
use crate::protocol::{NodeInit, Variant};
use crate::rng::{self, Domain};
use crate::Error;

/// Reduced non-negative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ExactRatio {
    pub numerator: i64,
    pub denominator: i64,
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

impl ExactRatio {
    pub fn new(numerator: i64, denominator: i64) -> Option<Self> {
        if denominator <= 0 || numerator < 0 {
            return None;
        }
        let g = gcd(numerator, denominator).max(1);
        Some(Self { numerator: numerator / g, denominator: denominator / g })
    }

    pub fn floor(&self) -> i64 {
        self.numerator / self.denominator
    }

    pub fn ceil(&self) -> i64 {
        crate::protocol::ceil_div(self.numerator, self.denominator)
    }

    pub fn is_integer(&self) -> bool {
        self.denominator == 1
    }

    pub fn as_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Whether `v` is the floor or the ceiling of the ratio.
    pub fn admits(&self, v: i64) -> bool {
        v == self.floor() || v == self.ceil()
    }
}

impl fmt::Display for ExactRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("no nodes given")]
    Empty,
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
}

/// Total tests over total infections.
pub fn global_ratio(inits: &[NodeInit]) -> Result<ExactRatio, AnalysisError> {
    if inits.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let tests: i64 = inits.iter().map(NodeInit::tests).sum();
    let infections: i64 = inits.iter().map(|i| i.infections).sum();
    ExactRatio::new(tests, infections)
        .ok_or_else(|| AnalysisError::OutOfRange(format!("total infections {infections} must be >= 1")))
}

/// Minimizer of `sum_i alpha_i/2 (z - chi_i)^2`.
pub fn closed_form_weighted_mean(weights: &[f64], demands: &[f64]) -> Result<f64, AnalysisError> {
    if weights.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if weights.len() != demands.len() {
        return Err(AnalysisError::OutOfRange("weights and demands differ in length".into()));
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w <= 0.0) {
        return Err(AnalysisError::OutOfRange(format!("weight {w} is not positive")));
    }
    let num: f64 = weights.iter().zip(demands).map(|(a, c)| a * c).sum();
    let den: f64 = weights.iter().sum();
    Ok(num / den)
}

/// Initial spread potential: how far node ratio ceilings sit above `ceil(q)`
/// plus how far node ratio floors sit below `floor(q)`.
pub fn y_init_potential(masses: &[(i64, i64)], q: ExactRatio) -> i64 {
    let (qc, qf) = (q.ceil(), q.floor());
    masses
        .iter()
        .filter(|(_, z)| *z >= 1)
        .map(|&(y, z)| {
            let (c, f) = (crate::protocol::ceil_div(y, z), y.div_euclid(z));
            (c - qc).max(0) + (qf - f).max(0)
        })
        .sum()
}

/// Token-level spread `Y`: excess above `ceil(q)` plus deficit below `floor(q)`.
pub fn token_spread<'a>(values: impl IntoIterator<Item = &'a i64>, q: ExactRatio) -> i64 {
    let (qc, qf) = (q.ceil(), q.floor());
    values.into_iter().map(|&y| (y - qc).max(0) + (qf - y).max(0)).sum()
}

/// Which walk length the reachability window uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauWindow {
    /// `n - 1` steps per window.
    #[default]
    NodesMinusOne,
    /// `D + 1` steps per window.
    DiameterPlusOne,
}

/// Smallest integer `t >= 1` with `(1 - (1 + d_max)^-(n-1))^t <= eps`.
/// Saturates at `u64::MAX` when the per-window hit probability underflows.
pub fn tau(eps: f64, d_max: usize, n: usize) -> Result<u64, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::OutOfRange(format!("n must be >= 2, got {n}")));
    }
    tau_with_window(eps, d_max, n - 1)
}

/// Same as [`tau`] with a window of `diameter + 1` steps.
pub fn tau_diameter_window(eps: f64, d_max: usize, diameter: usize) -> Result<u64, AnalysisError> {
    tau_with_window(eps, d_max, diameter + 1)
}

fn tau_with_window(eps: f64, d_max: usize, window: usize) -> Result<u64, AnalysisError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(AnalysisError::OutOfRange(format!("eps must lie in (0, 1), got {eps}")));
    }
    if d_max < 1 {
        return Err(AnalysisError::OutOfRange("maximum out-degree must be >= 1".into()));
    }
    // p = (1 + d_max)^-window, computed in log space.
    let ln_p = -(window as f64) * ((1 + d_max) as f64).ln();
    let p = ln_p.exp();
    if p == 0.0 {
        return Ok(u64::MAX);
    }
    let ln_miss = (-p).ln_1p();
    let raw = eps.ln() / ln_miss;
    if !raw.is_finite() || raw >= u64::MAX as f64 {
        return Ok(u64::MAX);
    }
    // Check both neighbours of the float ceiling against the defining inequality.
    let holds = |t: f64| t * ln_miss <= eps.ln();
    let mut t = raw.ceil().max(1.0);
    if t > 1.0 && holds(t - 1.0) {
        t -= 1.0;
    } else if !holds(t) {
        t += 1.0;
    }
    Ok(t as u64)
}

/// Theoretical iteration bounds and success-probability lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub eps1: f64,
    pub eps2: f64,
    pub window: TauWindow,
    pub tau1: u64,
    pub tau2: u64,
    pub y_init: i64,
    pub d_max: usize,
    pub diameter: usize,
    /// Private nodes that start with fewer tokens than out-neighbours.
    pub slow_private_nodes: usize,
    /// Iterations by which all offsets are injected.
    pub k0_prime: u64,
    /// Iterations for the averaging phase.
    pub k0: u64,
    pub k0_double_prime: u64,
    pub privacy_product: f64,
    pub averaging_probability: f64,
    /// Natural log of the overall lower bound; finite even when the bound underflows.
    pub ln_probability: f64,
    pub probability: f64,
}

/// Inputs to [`convergence_bound`]: the graph, node inputs, and for each node
/// whether it runs the offset protocol together with its initial `z_alpha`.
pub struct BoundInputs<'a> {
    pub graph: &'a Digraph,
    pub inits: &'a [NodeInit],
    pub private: &'a [bool],
    pub initial_z_alpha: &'a [i64],
    /// Window length `D` used by the stopping test.
    pub window_len: usize,
}

pub fn convergence_bound(
    eps1: f64,
    eps2: f64,
    window: TauWindow,
    inputs: &BoundInputs<'_>,
) -> Result<BoundReport, AnalysisError> {
    let g = inputs.graph;
    let n = g.node_count();
    let d_max = g.max_out_degree();
    let steps = match window {
        TauWindow::NodesMinusOne => n - 1,
        TauWindow::DiameterPlusOne => g.diameter() + 1,
    };
    let tau1 = tau_with_window(eps1, d_max, steps)?;
    let tau2 = tau_with_window(eps2, d_max, steps)?;
    let q = global_ratio(inputs.inits)?;
    let masses: Vec<(i64, i64)> = inputs.inits.iter().map(|i| (i.tests(), i.infections)).collect();
    let y_init = y_init_potential(&masses, q);
    let d = inputs.window_len.max(1) as u64;

    let slow = (0..n)
        .filter(|&j| inputs.private[j] && inputs.initial_z_alpha[j] <= g.out_degree(j) as i64)
        .count();
    let k0_prime = if slow == 0 {
        1
    } else {
        (slow as u64).saturating_mul(tau1.saturating_mul(steps as u64).saturating_add(1)).max(1)
    };
    let walk = tau2
        .saturating_mul(steps as u64)
        .saturating_mul((y_init.max(0) as u64).saturating_add(n as u64));
    let k0 = walk.div_ceil(d).saturating_mul(d).saturating_add(d);
    let k0_double_prime = k0.saturating_add(k0_prime);

    let mut ln_privacy = 0.0;
    for j in (0..n).filter(|&j| inputs.private[j]) {
        let dj = g.out_degree(j) as f64;
        ln_privacy += dj * (1.0 - eps1).ln() - dj * (1.0 + dj).ln();
    }
    let ln_avg = (y_init as f64 + n as f64) * (1.0 - eps2).ln();
    let ln_probability = ln_privacy + ln_avg;
    Ok(BoundReport {
        eps1,
        eps2,
        window,
        tau1,
        tau2,
        y_init,
        d_max,
        diameter: g.diameter(),
        slow_private_nodes: slow,
        k0_prime,
        k0,
        k0_double_prime,
        privacy_product: ln_privacy.exp(),
        averaging_probability: ln_avg.exp(),
        ln_probability,
        probability: ln_probability.exp(),
    })
}

/// Parameter varied across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Same infection count at every node.
    Lambda,
    /// Node count.
    Nodes,
    /// Centre of the tests range, keeping its width.
    TestsMean,
    /// Half-width of the tests range, keeping its centre.
    TestsHalfWidth,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Nodes => "n",
            SweepParam::TestsMean => "tests_mean",
            SweepParam::TestsHalfWidth => "tests_half_width",
        }
    }

    fn apply(&self, cfg: &mut SimConfig, value: i64) -> Result<(), Error> {
        let nodes = match &mut cfg.nodes {
            NodeSpec::Random(r) => r,
            NodeSpec::Explicit { .. } if *self == SweepParam::Nodes => {
                return Err(Error::Config("node-count sweeps need random node specs".into()))
            }
            NodeSpec::Explicit { .. } => {
                return Err(Error::Config("sweeps need a random node spec".into()))
            }
        };
        match self {
            SweepParam::Lambda => nodes.infections = [value, value],
            SweepParam::Nodes => {
                let g = cfg.graph.as_random_mut().ok_or_else(|| {
                    Error::Config("node-count sweeps need a generated graph".into())
                })?;
                g.n = value as usize;
            }
            SweepParam::TestsMean => {
                let half = (nodes.tests[1] - nodes.tests[0]) / 2;
                nodes.tests = [value - half, value + half];
            }
            SweepParam::TestsHalfWidth => {
                let mid = (nodes.tests[0] + nodes.tests[1]) / 2;
                nodes.tests = [mid - value, mid + value];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<i64>,
    pub runs: usize,
    /// Also run the no-privacy baseline (plain protocol on doubled inputs)
    /// with identical seeds and report both.
    #[serde(default)]
    pub compare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param_name: String,
    pub param_value: i64,
    pub runs: usize,
    pub terminated: usize,
    pub mean_k: f64,
    pub std_k: f64,
    pub mean_k_alg1: f64,
    pub mean_k_alg2: f64,
    pub mean_diff: f64,
}

impl SweepRow {
    pub fn termination_rate(&self) -> f64 {
        self.terminated as f64 / self.runs as f64
    }
}

pub const SWEEP_CSV_HEADER: [&str; 9] = [
    "param_name",
    "param_value",
    "runs",
    "terminated",
    "mean_k",
    "std_k",
    "mean_k_alg1",
    "mean_k_alg2",
    "mean_diff",
];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of run `run` at grid point `point`. Shared by both arms of a comparison.
pub fn sweep_run_seed(base: u64, point: usize, run: usize) -> u64 {
    rng::derive_seed(base, Domain::Sweep, &[point as u64, run as u64])
}

/// Runs `spec.runs` seeded simulations per grid value, in parallel.
pub fn sweep(template: &SimConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>, Error> {
    if spec.values.is_empty() || spec.runs == 0 {
        return Err(Error::Config("sweep grid and run count must be non-empty".into()));
    }
    let opts = RunOptions::lean();
    spec.values
        .iter()
        .enumerate()
        .map(|(point, &value)| {
            let mut cfg = template.clone();
            spec.param.apply(&mut cfg, value)?;
            let outcomes: Vec<(Option<u64>, Option<u64>)> = (0..spec.runs)
                .into_par_iter()
                .map(|run| -> Result<_, Error> {
                    let mut c = cfg.clone();
                    c.reseed(sweep_run_seed(template.seed, point, run));
                    let scenario = c.resolve()?;
                    let main = engine::run_with(&scenario, &opts)?.k_end;
                    let baseline = if spec.compare {
                        Some(engine::run_with(&scenario.no_privacy_baseline(), &opts)?.k_end)
                    } else {
                        None
                    };
                    Ok((main, baseline.flatten()))
                })
                .collect::<Result<_, _>>()?;
            Ok(summarize(spec, value, template.variant, &outcomes))
        })
        .collect()
}

fn summarize(spec: &SweepSpec, value: i64, variant: Variant, outcomes: &[(Option<u64>, Option<u64>)]) -> SweepRow {
    let main: Vec<f64> = outcomes.iter().filter_map(|o| o.0).map(|k| k as f64).collect();
    let (mean_k, std_k) = mean_std(&main);
    let (mut mean_k_alg1, mut mean_k_alg2, mut mean_diff) = (f64::NAN, f64::NAN, f64::NAN);
    if spec.compare {
        let base: Vec<f64> = outcomes.iter().filter_map(|o| o.1).map(|k| k as f64).collect();
        let (mb, _) = mean_std(&base);
        (mean_k_alg1, mean_k_alg2) = match variant {
            Variant::Alg2 => (mb, mean_k),
            Variant::Alg1 => (mean_k, mb),
        };
        mean_diff = mean_k_alg2 - mean_k_alg1;
    } else {
        match variant {
            Variant::Alg1 => mean_k_alg1 = mean_k,
            Variant::Alg2 => mean_k_alg2 = mean_k,
        }
    }
    SweepRow {
        param_name: spec.param.name().to_string(),
        param_value: value,
        runs: outcomes.len(),
        terminated: main.len(),
        mean_k,
        std_k,
        mean_k_alg1,
        mean_k_alg2,
        mean_diff,
    }
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.param_name.clone(),
            r.param_value.to_string(),
            r.runs.to_string(),
            r.terminated.to_string(),
            fmt_f64(r.mean_k),
            fmt_f64(r.std_k),
            fmt_f64(r.mean_k_alg1),
            fmt_f64(r.mean_k_alg2),
            fmt_f64(r.mean_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}
