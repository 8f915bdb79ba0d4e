//! Synchronous round scheduler.
//!
//! Each round `k = 1, 2, ...` runs these phases in order:
//! 1. window reset (when `k = 1 (mod D)`)
//! 2. max/min exchange
//! 3. token transmission
//! 4. aggregation
//! 5. stopping test (when `k = 0 (mod D)`)
//!
//! Every phase reads only state produced by earlier phases of the same
//! round, so the outcome does not depend on node iteration order. Routing
//! randomness for node `j` in round `k` comes from its own substream.

use std::io::Write;

use serde::Serialize;

use crate::analysis::{self, ExactRatio};
use crate::config::Scenario;
use crate::digraph::Digraph;
use crate::protocol::{
    is_window_end, is_window_start, NodeInit, NodeState, OutboundBatch, RngRouter, Transmission,
    Variant,
};
use crate::rng::{self, Domain};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// One token crossing an edge; `y`, `z` are the token.
    Token,
    /// Offset added to the token on `from -> to`; `y`, `z` are `(xi, zeta)`.
    Offset,
    /// Node stopped; `y` is `q_s`, `z` is `w*`.
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Event {
    pub k: u64,
    pub kind: EventKind,
    pub from: usize,
    pub to: usize,
    pub y: i64,
    pub z: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub k: u64,
    pub node: usize,
    pub q_s: i64,
    pub y_alpha: i64,
    pub z_alpha: i64,
    pub w_star: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeFinal {
    pub node: usize,
    pub q_s: i64,
    pub w_star: Option<i64>,
    pub y_alpha: i64,
    pub z_alpha: i64,
}

/// Output of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub window: usize,
    pub graph: Digraph,
    pub inits: Vec<NodeInit>,
    /// Nodes that ran the offset protocol.
    pub private: Vec<bool>,
    pub initial_z_alpha: Vec<i64>,
    pub ratio: ExactRatio,
    /// Round in which every node had stopped; `None` if the cap was hit.
    pub k_end: Option<u64>,
    pub rounds: u64,
    /// First round after which no offset was pending (0 if none ever was).
    pub offsets_completed_at: Option<u64>,
    pub finals: Vec<NodeFinal>,
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<Event>,
    /// Token spread after each round; index 0 is the initial state.
    pub spread: Vec<i64>,
}

impl RunResult {
    pub fn terminated(&self) -> bool {
        self.k_end.is_some()
    }

    /// Every node's `q_s` is the floor or ceiling of the exact ratio and
    /// every allocation equals `q_s * lambda - u`.
    pub fn allocations_correct(&self) -> bool {
        self.finals.iter().zip(&self.inits).all(|(f, init)| {
            self.ratio.admits(f.q_s) && f.w_star == Some(f.q_s * init.infections - init.received)
        })
    }

    pub fn write_events_jsonl<W: Write>(&self, mut out: W) -> Result<(), Error> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_snapshots_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["k", "node", "q_s", "y_alpha", "z_alpha", "w_star"])?;
        for s in &self.snapshots {
            w.write_record([
                s.k.to_string(),
                s.node.to_string(),
                s.q_s.to_string(),
                s.y_alpha.to_string(),
                s.z_alpha.to_string(),
                s.w_star.map(|w| w.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What a run records and checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub record_events: bool,
    pub record_snapshots: bool,
    /// Check conservation, spread monotonicity, the privacy delay and the
    /// final allocations after every round; a violation aborts the run.
    pub check_invariants: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_events: true, record_snapshots: true, check_invariants: cfg!(debug_assertions) }
    }
}

impl RunOptions {
    /// No recording, no checks: what sweeps use.
    pub fn lean() -> Self {
        Self { record_events: false, record_snapshots: false, check_invariants: false }
    }

    pub fn checked() -> Self {
        Self { check_invariants: true, ..Self::default() }
    }
}

/// Read-only view handed to observers after each round.
pub struct RoundView<'a> {
    pub k: u64,
    pub states: &'a [NodeState],
    /// Network transmissions of this round, in sender order.
    pub batches: &'a [OutboundBatch],
}

/// Initial node states for a scenario.
pub fn initialize(scenario: &Scenario) -> Result<Vec<NodeState>, Error> {
    let g = &scenario.graph;
    (0..scenario.n())
        .map(|j| {
            let init = scenario.inits[j];
            let state = match scenario.variant {
                Variant::Alg1 => NodeState::algorithm1_init(j, init)?,
                Variant::Alg2 => {
                    let mut rng = rng::stream(scenario.seed, Domain::Init, &[j as u64]);
                    NodeState::init_node(j, init, g.out_neighbors(j), scenario.runs_privacy(j), &mut rng)?
                }
            };
            Ok(state)
        })
        .collect()
}

pub fn run(scenario: &Scenario) -> Result<RunResult, Error> {
    run_with(scenario, &RunOptions::default())
}

pub fn run_with(scenario: &Scenario, opts: &RunOptions) -> Result<RunResult, Error> {
    run_observed(scenario, opts, |_| Ok(()))
}

/// Runs the scenario, calling `observe` after every round.
pub fn run_observed<F>(scenario: &Scenario, opts: &RunOptions, mut observe: F) -> Result<RunResult, Error>
where
    F: FnMut(&RoundView<'_>) -> Result<(), Error>,
{
    let g = &scenario.graph;
    let n = scenario.n();
    let d = scenario.window.max(1) as u64;
    let ratio = analysis::global_ratio(&scenario.inits)?;
    let mut states = initialize(scenario)?;
    let private: Vec<bool> = states.iter().map(|s| s.private).collect();
    let initial_z_alpha: Vec<i64> = states.iter().map(|s| s.z_alpha).collect();

    let scale = match scenario.variant {
        Variant::Alg1 => 1,
        Variant::Alg2 => 2,
    };
    let total_y: i64 = scale * scenario.inits.iter().map(NodeInit::tests).sum::<i64>();
    let total_z: i64 = scale * scenario.inits.iter().map(|i| i.infections).sum::<i64>();

    let mut events = Vec::new();
    let mut snapshots = Vec::new();
    let mut spread = vec![spread_of(&states, ratio)];
    let mut offsets_completed_at = (!states.iter().any(NodeState::privacy_pending)).then_some(0);
    if opts.record_snapshots {
        push_snapshots(&mut snapshots, 0, &states);
    }
    let mut k_end = None;
    let mut k = 0;
    let mut broadcasts: Vec<Option<(i64, i64)>> = vec![None; n];
    let mut batches: Vec<OutboundBatch> = Vec::with_capacity(n);

    while k < scenario.cap {
        k += 1;
        let active: Vec<bool> = states.iter().map(|s| !s.terminated).collect();

        if is_window_start(k, d) {
            for s in states.iter_mut().filter(|s| !s.terminated) {
                s.begin_window();
            }
        }
        for (j, s) in states.iter().enumerate() {
            broadcasts[j] = (active[j] || scenario.relay_after_flag).then_some((s.max, s.min));
        }
        for j in (0..n).filter(|&j| active[j]) {
            let heard: Vec<(i64, i64)> = g.in_neighbors(j).iter().filter_map(|&i| broadcasts[i]).collect();
            states[j].merge_maxmin(&heard);
        }

        batches.clear();
        for (j, s) in states.iter_mut().enumerate() {
            let batch = if active[j] {
                let mut router = RngRouter(rng::stream(scenario.seed, Domain::Route, &[j as u64, k]));
                s.transmit_round(g.out_neighbors(j), &mut router)
            } else {
                // Stopped nodes stay silent and keep their tokens.
                let mut keep = Transmission { from: j, to: j, tokens: Vec::new(), sum_y: 0, sum_z: 0 };
                for t in std::mem::take(&mut s.recv) {
                    keep.sum_y += t.y;
                    keep.sum_z += t.z;
                    keep.tokens.push(t);
                }
                OutboundBatch { to_self: keep, to_neighbors: Vec::new(), injections: Vec::new() }
            };
            if opts.record_events {
                for inj in &batch.injections {
                    events.push(Event { k, kind: EventKind::Offset, from: j, to: inj.to, y: inj.xi, z: inj.zeta });
                }
                for tr in &batch.to_neighbors {
                    for t in &tr.tokens {
                        events.push(Event { k, kind: EventKind::Token, from: j, to: tr.to, y: t.y, z: t.z });
                    }
                }
            }
            batches.push(batch);
        }

        let mut inbound: Vec<Vec<&Transmission>> = vec![Vec::new(); n];
        for (j, batch) in batches.iter().enumerate() {
            inbound[j].push(&batch.to_self);
            for tr in &batch.to_neighbors {
                inbound[tr.to].push(tr);
            }
        }
        for (j, s) in states.iter_mut().enumerate() {
            // Sender order: self batch is at the sender's own index.
            inbound[j].sort_by_key(|t| t.from);
            s.aggregate_round(&inbound[j])?;
        }
        drop(inbound);

        if is_window_end(k, d) {
            for j in (0..n).filter(|&j| active[j]) {
                if states[j].check_termination() && opts.record_events {
                    let s = &states[j];
                    events.push(Event {
                        k,
                        kind: EventKind::Terminate,
                        from: j,
                        to: j,
                        y: s.q_s,
                        z: s.w_star.unwrap_or_default(),
                    });
                }
            }
        }

        let pending = states.iter().any(NodeState::privacy_pending);
        if offsets_completed_at.is_none() && !pending {
            offsets_completed_at = Some(k);
        }
        spread.push(spread_of(&states, ratio));
        let all_done = states.iter().all(|s| s.terminated);

        if opts.check_invariants {
            check_round(k, &states, total_y, total_z, pending, offsets_completed_at, &spread, ratio)?;
        }
        if opts.record_snapshots && (k % scenario.snapshot_stride.max(1) == 0 || all_done) {
            push_snapshots(&mut snapshots, k, &states);
        }
        observe(&RoundView { k, states: &states, batches: &batches })?;
        if all_done {
            k_end = Some(k);
            break;
        }
    }
    if opts.record_snapshots && k_end.is_none() && k % scenario.snapshot_stride.max(1) != 0 {
        push_snapshots(&mut snapshots, k, &states);
    }

    let finals = states
        .iter()
        .map(|s| NodeFinal { node: s.id, q_s: s.q_s, w_star: s.w_star, y_alpha: s.y_alpha, z_alpha: s.z_alpha })
        .collect();
    Ok(RunResult {
        variant: scenario.variant,
        seed: scenario.seed,
        window: scenario.window,
        graph: scenario.graph.clone(),
        inits: scenario.inits.clone(),
        private,
        initial_z_alpha,
        ratio,
        k_end,
        rounds: k,
        offsets_completed_at,
        finals,
        snapshots,
        events,
        spread,
    })
}

fn spread_of(states: &[NodeState], q: ExactRatio) -> i64 {
    analysis::token_spread(states.iter().flat_map(|s| s.recv.iter().map(|t| &t.y)), q)
}

fn push_snapshots(out: &mut Vec<Snapshot>, k: u64, states: &[NodeState]) {
    out.extend(states.iter().map(|s| Snapshot {
        k,
        node: s.id,
        q_s: s.q_s,
        y_alpha: s.y_alpha,
        z_alpha: s.z_alpha,
        w_star: s.w_star,
    }));
}

#[allow(clippy::too_many_arguments)]
fn check_round(
    k: u64,
    states: &[NodeState],
    total_y: i64,
    total_z: i64,
    pending: bool,
    offsets_completed_at: Option<u64>,
    spread: &[i64],
    q: ExactRatio,
) -> Result<(), Error> {
    let y: i64 = states.iter().map(|s| s.y_alpha + s.y_beta).sum();
    let z: i64 = states.iter().map(|s| s.z_alpha + s.z_beta).sum();
    if (y, z) != (total_y, total_z) {
        return Err(Error::Invariant(format!(
            "round {k}: mass ({y}, {z}) differs from the conserved total ({total_y}, {total_z})"
        )));
    }
    if pending {
        if let Some(s) = states.iter().find(|s| s.terminated) {
            return Err(Error::Invariant(format!("round {k}: node {} stopped while an offset is pending", s.id)));
        }
    }
    if let Some(done) = offsets_completed_at {
        if k > done {
            let (prev, cur) = (spread[spread.len() - 2], spread[spread.len() - 1]);
            if cur > prev {
                return Err(Error::Invariant(format!("round {k}: token spread rose from {prev} to {cur}")));
            }
        }
    }
    for s in states.iter().filter(|s| s.terminated) {
        let expected = s.q_s * s.init.infections - s.init.received;
        if !q.admits(s.q_s) || s.w_star != Some(expected) {
            return Err(Error::Invariant(format!(
                "round {k}: node {} stopped with q_s = {} (q = {q}) and w* = {:?}",
                s.id, s.q_s, s.w_star
            )));
        }
    }
    Ok(())
}

/// Per-round `(y_alpha, z_alpha)` of every node.
pub type Trajectory = Vec<Vec<(i64, i64)>>;

fn trajectory(scenario: &Scenario) -> Result<(Trajectory, Option<u64>), Error> {
    let mut traj = vec![initialize(scenario)?.iter().map(|s| (s.y_alpha, s.z_alpha)).collect()];
    let res = run_observed(scenario, &RunOptions::lean(), |view| {
        traj.push(view.states.iter().map(|s| (s.y_alpha, s.z_alpha)).collect());
        Ok(())
    })?;
    Ok((traj, res.k_end))
}

/// Runs the doubled-mass protocol and the plain protocol on doubled inputs
/// with the same seed and compares their mass trajectories round by round.
/// The scenario must not contain private nodes.
pub fn run_pair_equivalence(scenario: &Scenario) -> Result<bool, Error> {
    if !scenario.private_nodes().is_empty() {
        return Err(Error::Config("pair equivalence needs a scenario without private nodes".into()));
    }
    let (doubled, k2) = trajectory(&scenario.with_variant(Variant::Alg2))?;
    let (plain, k1) = trajectory(&scenario.no_privacy_baseline())?;
    Ok(k1 == k2 && doubled == plain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GraphSpec, NodeSpec, RandomGraph, RandomNodes, SimConfig};
    use crate::protocol::Role;

    fn scenario(graph: Digraph, inits: Vec<NodeInit>, variant: Variant, seed: u64) -> Scenario {
        let window = graph.diameter();
        let cap = crate::config::default_cap(window, &inits);
        Scenario { graph, inits, window, variant, seed, cap, snapshot_stride: 1, relay_after_flag: false }
    }

    #[test]
    fn balanced_pair_stops_after_the_first_window() {
        let s = scenario(Digraph::cycle(2).unwrap(), vec![NodeInit::neutral(4, 2); 2], Variant::Alg1, 1);
        let r = run_with(&s, &RunOptions::checked()).unwrap();
        assert_eq!(r.k_end, Some(1));
        assert!(r.finals.iter().all(|f| f.q_s == 2));
        assert!(r.allocations_correct());
    }

    #[test]
    fn five_node_example_allocates_three_tests_per_case() {
        let inits = vec![
            NodeInit::new(2000, 1000, 1000, Role::Neutral),
            NodeInit::new(4000, 500, 1000, Role::Neutral),
            NodeInit::new(2500, 0, 1000, Role::Neutral),
            NodeInit::new(1000, 500, 1000, Role::Neutral),
            NodeInit::new(3500, 0, 1000, Role::Neutral),
        ];
        let g = Digraph::generate_strongly_connected(5, 0.5, 9).unwrap();
        for variant in [Variant::Alg1, Variant::Alg2] {
            let r = run_with(&scenario(g.clone(), inits.clone(), variant, 5), &RunOptions::checked()).unwrap();
            assert!(r.terminated());
            assert_eq!(r.ratio, ExactRatio::new(3, 1).unwrap());
            assert!(r.finals.iter().all(|f| f.q_s == 3));
            assert_eq!(r.finals[0].w_star, Some(3000 - 1000));
        }
    }

    #[test]
    fn private_run_matches_offline_allocation() {
        let cfg = SimConfig {
            variant: Variant::Alg2,
            seed: 123,
            cap: None,
            window: None,
            snapshot_stride: None,
            relay_after_flag: false,
            graph: GraphSpec::Random(RandomGraph { n: 10, extra_edge_fraction: 0.3, seed: None }),
            nodes: NodeSpec::Random(RandomNodes {
                tests: [200, 4000],
                infections: [2, 200],
                received: [0, 100],
                private: vec![1, 4, 7],
                curious: vec![],
                private_count: 0,
            }),
            sweep: None,
            attack: None,
            bounds: None,
        };
        let s = cfg.resolve().unwrap();
        let r = run_with(&s, &RunOptions::checked()).unwrap();
        assert!(r.terminated());
        // offline exact ratio from the drawn inputs
        let tests: i64 = s.inits.iter().map(|i| i.stored + i.received).sum();
        let cases: i64 = s.inits.iter().map(|i| i.infections).sum();
        let (lo, hi) = (tests / cases, (tests + cases - 1) / cases);
        for (f, i) in r.finals.iter().zip(&s.inits) {
            let w = f.w_star.unwrap();
            assert!(w == lo * i.infections - i.received || w == hi * i.infections - i.received);
        }
        assert!(r.offsets_completed_at.unwrap() <= r.k_end.unwrap());
    }

    #[test]
    fn runs_are_bit_identical() {
        let g = Digraph::generate_strongly_connected(8, 0.4, 2).unwrap();
        let inits: Vec<_> = (0..8).map(|j| NodeInit::new(300 + 17 * j, 0, 3 + j % 4, if j % 3 == 0 { Role::Private } else { Role::Neutral })).collect();
        let s = scenario(g, inits, Variant::Alg2, 77);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a, b);
        let (mut ja, mut jb) = (Vec::new(), Vec::new());
        a.write_events_jsonl(&mut ja).unwrap();
        b.write_events_jsonl(&mut jb).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn event_and_snapshot_formats() {
        let s = scenario(Digraph::cycle(2).unwrap(), vec![NodeInit::neutral(4, 2), NodeInit::neutral(6, 2)], Variant::Alg1, 3);
        let r = run(&s).unwrap();
        let mut jsonl = Vec::new();
        r.write_events_jsonl(&mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"k\":"), "{first}");
        assert!(first.contains("\"kind\":"));
        let mut csv = Vec::new();
        r.write_snapshots_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("k,node,q_s,y_alpha,z_alpha,w_star\n0,0,2,4,2,\n"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn cap_reports_non_termination() {
        let mut s = scenario(Digraph::cycle(3).unwrap(), vec![NodeInit::neutral(100, 2), NodeInit::neutral(2, 2), NodeInit::neutral(50, 2)], Variant::Alg1, 0);
        s.cap = 1;
        let r = run(&s).unwrap();
        assert_eq!(r.k_end, None);
        assert_eq!(r.rounds, 1);
    }

    #[test]
    fn equivalence_on_trivial_pair() {
        let s = scenario(Digraph::cycle(2).unwrap(), vec![NodeInit::neutral(4, 2); 2], Variant::Alg2, 1);
        assert!(run_pair_equivalence(&s).unwrap());
    }

    #[test]
    fn equivalence_requires_no_private_nodes() {
        let s = scenario(
            Digraph::cycle(2).unwrap(),
            vec![NodeInit::new(4, 0, 2, Role::Private), NodeInit::neutral(4, 2)],
            Variant::Alg2,
            1,
        );
        assert!(run_pair_equivalence(&s).is_err());
    }
}
