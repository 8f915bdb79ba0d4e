//! `qalloc` command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adversary;
use crate::analysis::{self, BoundInputs, SweepRow};
use crate::config::{GraphSpec, NodeSpec, Scenario, SimConfig};
use crate::engine::{self, RunOptions, RunResult};
use crate::protocol::{Role, Variant};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "qalloc", version, about = "Quantized consensus test allocation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write its event log, snapshots and allocations.
    Run(Common),
    /// Run the configured parameter sweep.
    Sweep(Common),
    /// Attack every target of the configured coalition.
    Attack(Common),
    /// Evaluate the iteration bounds for the configured scenario.
    Bounds(Common),
    /// Run with every invariant check enabled.
    Verify(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, env = "QALLOC_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub cap: Option<u64>,
    /// Override the node count of a generated graph.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

impl Common {
    fn load(&self) -> Result<SimConfig, Error> {
        let text = fs::read_to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", self.config.display())))?;
        let mut cfg = SimConfig::from_toml_str(&text)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(cap) = self.cap {
            cfg.cap = Some(cap);
        }
        if let Some(n) = self.nodes {
            match (&mut cfg.graph, &cfg.nodes) {
                (GraphSpec::Random(g), NodeSpec::Random(_)) => g.n = n,
                _ => return Err(Error::Config("--nodes needs a generated graph and random node inputs".into())),
            }
        }
        Ok(cfg)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Error> {
        fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Toml(_) | Error::Graph(_) => EXIT_INVALID,
        _ => EXIT_FAILED,
    }
}

pub fn execute(cmd: &Command) -> Result<i32, Error> {
    match cmd {
        Command::Run(c) => cmd_run(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Attack(c) => cmd_attack(c),
        Command::Bounds(c) => cmd_bounds(c),
        Command::Verify(c) => cmd_verify(c),
    }
}

fn write_json<T: Serialize>(w: &mut impl Write, value: &T) -> Result<(), Error> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    variant: Variant,
    seed: u64,
    n: usize,
    window: usize,
    ratio: String,
    terminated: bool,
    k_end: Option<u64>,
    rounds: u64,
    offsets_completed_at: Option<u64>,
    allocations_correct: bool,
}

fn summary(r: &RunResult) -> RunSummary {
    RunSummary {
        variant: r.variant,
        seed: r.seed,
        n: r.graph.node_count(),
        window: r.window,
        ratio: r.ratio.to_string(),
        terminated: r.terminated(),
        k_end: r.k_end,
        rounds: r.rounds,
        offsets_completed_at: r.offsets_completed_at,
        allocations_correct: r.terminated() && r.allocations_correct(),
    }
}

pub fn write_finals_csv<W: Write>(r: &RunResult, out: W) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["node", "role", "stored", "received", "infections", "q_s", "w_star"])?;
    for (f, i) in r.finals.iter().zip(&r.inits) {
        let role = match i.role {
            Role::Private => "private",
            Role::Curious => "curious",
            Role::Neutral => "neutral",
        };
        w.write_record([
            f.node.to_string(),
            role.to_string(),
            i.stored.to_string(),
            i.received.to_string(),
            i.infections.to_string(),
            f.q_s.to_string(),
            f.w_star.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wide table `k, q_s_0, ..., q_s_{n-1}` from the snapshots.
fn write_run_plot<W: Write>(r: &RunResult, mut out: W) -> Result<(), Error> {
    let n = r.graph.node_count();
    writeln!(out, "# state variable q_s of every node against iteration k; exact ratio {}", r.ratio)?;
    write!(out, "k")?;
    for j in 0..n {
        write!(out, ",q_s_{j}")?;
    }
    writeln!(out)?;
    for chunk in r.snapshots.chunks(n) {
        write!(out, "{}", chunk[0].k)?;
        for s in chunk {
            write!(out, ",{}", s.q_s)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn resolve(c: &Common, cfg: &SimConfig) -> Result<Scenario, Error> {
    let s = cfg.resolve()?;
    c.say(format!("n = {}, window = {}, variant = {}, seed = {}", s.n(), s.window, s.variant, s.seed));
    Ok(s)
}

pub fn cmd_run(c: &Common) -> Result<i32, Error> {
    let cfg = c.load()?;
    let scenario = resolve(c, &cfg)?;
    let result = engine::run_with(&scenario, &RunOptions { check_invariants: false, ..RunOptions::default() })?;
    write_outputs(c, &result)?;
    Ok(finish_run(c, &result))
}

fn write_outputs(c: &Common, result: &RunResult) -> Result<(), Error> {
    let mut f = c.create("events.jsonl")?;
    result.write_events_jsonl(&mut f)?;
    f.flush()?;
    let mut f = c.create("snapshots.csv")?;
    result.write_snapshots_csv(&mut f)?;
    f.flush()?;
    let mut f = c.create("finals.csv")?;
    write_finals_csv(result, &mut f)?;
    f.flush()?;
    let mut f = c.create("graph.txt")?;
    f.write_all(result.graph.to_adjacency_text().as_bytes())?;
    f.flush()?;
    let mut f = c.create("plot_run.csv")?;
    write_run_plot(result, &mut f)?;
    f.flush()?;
    let mut f = c.create("summary.json")?;
    write_json(&mut f, &summary(result))?;
    f.flush()?;
    Ok(())
}

fn finish_run(c: &Common, result: &RunResult) -> i32 {
    match result.k_end {
        Some(k) => {
            c.say(format!("terminated at k = {k}; q = {}", result.ratio));
            EXIT_OK
        }
        None => {
            c.say(format!("did not terminate within {} iterations", result.rounds));
            EXIT_FAILED
        }
    }
}

fn write_sweep_plot<W: Write>(rows: &[SweepRow], mut out: W) -> Result<(), Error> {
    let name = rows.first().map(|r| r.param_name.as_str()).unwrap_or("x");
    writeln!(out, "# mean termination iteration against {name}; empty cells mean the series was not run")?;
    writeln!(out, "{name},mean_k,std_k,mean_k_alg1,mean_k_alg2")?;
    let f = |x: f64| if x.is_nan() { String::new() } else { format!("{x:.6}") };
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.param_value, f(r.mean_k), f(r.std_k), f(r.mean_k_alg1), f(r.mean_k_alg2))?;
    }
    Ok(())
}

pub fn cmd_sweep(c: &Common) -> Result<i32, Error> {
    let cfg = c.load()?;
    let spec = cfg.sweep.clone().ok_or_else(|| Error::Config("config has no [sweep] table".into()))?;
    // Validate the template once so errors surface before the parallel runs.
    cfg.resolve()?;
    let rows = analysis::sweep(&cfg, &spec)?;
    let mut f = c.create("sweep.csv")?;
    analysis::write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = c.create("plot_sweep.csv")?;
    write_sweep_plot(&rows, &mut f)?;
    f.flush()?;
    for r in &rows {
        c.say(format!("{} = {}: mean k = {:.1} ({}/{} terminated)", r.param_name, r.param_value, r.mean_k, r.terminated, r.runs));
    }
    let all = rows.iter().all(|r| r.terminated == r.runs);
    Ok(if all { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_attack(c: &Common) -> Result<i32, Error> {
    let cfg = c.load()?;
    let scenario = resolve(c, &cfg)?;
    let spec = cfg.attack.clone().unwrap_or_default();
    let result = engine::run_with(&scenario, &RunOptions { check_invariants: false, ..RunOptions::default() })?;
    let targets: Vec<usize> = if spec.targets.is_empty() {
        (0..scenario.n())
            .filter(|&j| scenario.inits[j].role != Role::Curious)
            .filter(|&j| scenario.inits[j].role == Role::Private || adversary::hidden_neighbors(&result, j).is_empty())
            .collect()
    } else {
        spec.targets.clone()
    };
    let reports = targets
        .iter()
        .map(|&t| adversary::attack_report(&result, t, spec.round, spec.bound))
        .collect::<Result<Vec<_>, _>>()?;
    let mut f = c.create("attack.json")?;
    write_json(&mut f, &reports)?;
    f.flush()?;
    let mut f = c.create("plot_attack.csv")?;
    writeln!(f, "# initial states consistent with the coalition's view, per target")?;
    writeln!(f, "target,feasible_count,inferred_tests,inferred_infections,true_tests,true_infections")?;
    for r in &reports {
        let (it, ii) = r.inferred.map(|[a, b]| (a.to_string(), b.to_string())).unwrap_or_default();
        writeln!(f, "{},{},{it},{ii},{},{}", r.target, r.feasible_count.unwrap_or(0), r.truth[0], r.truth[1])?;
    }
    f.flush()?;
    for r in &reports {
        c.say(format!("target {}: inferred {:?}, truth {:?}, feasible {:?}", r.target, r.inferred, r.truth, r.feasible_count));
    }
    Ok(EXIT_OK)
}

pub fn cmd_bounds(c: &Common) -> Result<i32, Error> {
    let cfg = c.load()?;
    let scenario = resolve(c, &cfg)?;
    let spec = cfg.bounds.clone().unwrap_or_default();
    let states = engine::initialize(&scenario)?;
    let private: Vec<bool> = states.iter().map(|s| s.private).collect();
    let z_alpha: Vec<i64> = states.iter().map(|s| s.z_alpha).collect();
    let inputs = BoundInputs {
        graph: &scenario.graph,
        inits: &scenario.inits,
        private: &private,
        initial_z_alpha: &z_alpha,
        window_len: scenario.window,
    };
    let report = analysis::convergence_bound(spec.eps1, spec.eps2, spec.window, &inputs)?;
    let mut f = c.create("bounds.json")?;
    write_json(&mut f, &report)?;
    f.flush()?;
    let mut f = c.create("plot_bounds.csv")?;
    writeln!(f, "# windows tau needed to reach every node with probability 1 - eps")?;
    writeln!(f, "eps,tau")?;
    for i in 1..20 {
        let eps = i as f64 * 0.05;
        let t = match spec.window {
            analysis::TauWindow::NodesMinusOne => analysis::tau(eps, report.d_max, scenario.n())?,
            analysis::TauWindow::DiameterPlusOne => analysis::tau_diameter_window(eps, report.d_max, report.diameter)?,
        };
        writeln!(f, "{eps:.2},{t}")?;
    }
    f.flush()?;
    c.say(format!("k0'' = {}, ln P >= {:.3}", report.k0_double_prime, report.ln_probability));
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct VerifyReport {
    invariants: bool,
    terminated: bool,
    allocations_correct: bool,
    pair_equivalence: Option<bool>,
    error: Option<String>,
}

pub fn cmd_verify(c: &Common) -> Result<i32, Error> {
    let cfg = c.load()?;
    let scenario = resolve(c, &cfg)?;
    let mut report =
        VerifyReport { invariants: true, terminated: false, allocations_correct: false, pair_equivalence: None, error: None };
    match engine::run_with(&scenario, &RunOptions::checked()) {
        Ok(r) => {
            report.terminated = r.terminated();
            report.allocations_correct = r.terminated() && r.allocations_correct();
        }
        Err(Error::Invariant(msg)) => {
            report.invariants = false;
            report.error = Some(msg);
        }
        Err(e) => return Err(e),
    }
    if scenario.private_nodes().is_empty() {
        report.pair_equivalence = Some(engine::run_pair_equivalence(&scenario)?);
    }
    let mut f = c.create("verify.json")?;
    write_json(&mut f, &report)?;
    f.flush()?;
    let ok = report.invariants && report.allocations_correct && report.pair_equivalence != Some(false);
    c.say(if ok { "all checks passed" } else { "verification failed" });
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

/// Output directory helper for callers that only want the path.
pub fn output_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
