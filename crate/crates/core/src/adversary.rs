//! Curious-coalition attacks on a finished run.
//!
//! The coalition sees every token that crosses an edge with a curious
//! endpoint, pools those observations, and knows the protocol. It never sees
//! a node's internal state or the tokens it routes to itself.
//!
//! State index `k` means "after `k` rounds"; the tokens a node sends in round
//! `k + 1` are drawn from its state at index `k`. Cumulative flows at index
//! `k` cover rounds `1..=k`.

use num_rational::Ratio;
use serde::Serialize;

use crate::engine::{EventKind, RunResult};
use crate::protocol::{Role, Variant};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("node {target} is outside the graph")]
    NodeOutOfRange { target: usize },
    #[error("node {target} is not observable: neighbours {hidden:?} are not curious")]
    NotObservable { target: usize, hidden: Vec<usize> },
    #[error("run has no event log; rerun with event recording enabled")]
    NoEvents,
    #[error("node {target} sent no token to a neighbour in round {round}")]
    NoObservation { target: usize, round: u64 },
    #[error("observation rounds must satisfy first < second, got {first} and {second}")]
    InvalidRounds { first: u64, second: u64 },
    #[error("bound {bound} is below the true state ({tests}, {infections}) of node {target}")]
    BoundTooSmall { target: usize, bound: i64, tests: i64, infections: i64 },
}

/// Cumulative transmission sums into and out of one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Flows {
    pub y_in: i64,
    pub y_out: i64,
    pub z_in: i64,
    pub z_out: i64,
}

impl Flows {
    fn net_y(&self) -> i64 {
        self.y_in - self.y_out
    }

    fn net_z(&self) -> i64 {
        self.z_in - self.z_out
    }
}

/// What a fully curious neighbourhood records about `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transcript {
    pub target: usize,
    /// 1 for the plain protocol, 2 for the doubled-mass protocol.
    pub scale: i64,
    /// State index of the first observation.
    pub first: u64,
    /// State index of the second observation.
    pub second: u64,
    /// Numerator of the first token sent from state `first`.
    pub y_out_first: i64,
    pub y_out_second: i64,
    /// All observed numerators agree within each of the two rounds.
    pub uniform: bool,
    pub flows_first: Flows,
    pub flows_second: Flows,
}

#[derive(Debug, Clone, Default)]
struct RoundView {
    inflow: (i64, i64),
    outflow: (i64, i64),
    /// Numerators of tokens the target sent to neighbours.
    sent: Vec<i64>,
}

/// Per-round view of the target's links, indexed by round (index 0 unused).
fn link_view(result: &RunResult, target: usize) -> Result<Vec<RoundView>, AdversaryError> {
    if result.events.is_empty() && result.rounds > 0 {
        return Err(AdversaryError::NoEvents);
    }
    let mut view = vec![RoundView::default(); result.rounds as usize + 1];
    for e in result.events.iter().filter(|e| e.kind == EventKind::Token) {
        let r = &mut view[e.k as usize];
        if e.from == target {
            r.outflow.0 += e.y;
            r.outflow.1 += e.z;
            r.sent.push(e.y);
        } else if e.to == target {
            r.inflow.0 += e.y;
            r.inflow.1 += e.z;
        }
    }
    Ok(view)
}

fn cumulative(view: &[RoundView], upto: u64) -> Flows {
    view.iter().take(upto as usize + 1).skip(1).fold(Flows::default(), |f, r| Flows {
        y_in: f.y_in + r.inflow.0,
        y_out: f.y_out + r.outflow.0,
        z_in: f.z_in + r.inflow.1,
        z_out: f.z_out + r.outflow.1,
    })
}

fn scale(result: &RunResult) -> i64 {
    match result.variant {
        Variant::Alg1 => 1,
        Variant::Alg2 => 2,
    }
}

/// Neighbours of `target` (in or out) that are not curious.
pub fn hidden_neighbors(result: &RunResult, target: usize) -> Vec<usize> {
    let g = &result.graph;
    let mut hidden: Vec<usize> = g
        .in_neighbors(target)
        .iter()
        .chain(g.out_neighbors(target))
        .copied()
        .filter(|&v| result.inits[v].role != Role::Curious)
        .collect();
    hidden.sort_unstable();
    hidden.dedup();
    hidden
}

fn check_target(result: &RunResult, target: usize) -> Result<(), AdversaryError> {
    if target >= result.graph.node_count() {
        return Err(AdversaryError::NodeOutOfRange { target });
    }
    Ok(())
}

fn require_observable(result: &RunResult, target: usize) -> Result<(), AdversaryError> {
    check_target(result, target)?;
    let hidden = hidden_neighbors(result, target);
    if hidden.is_empty() {
        Ok(())
    } else {
        Err(AdversaryError::NotObservable { target, hidden })
    }
}

/// Transcript between the initial state and state index `k`.
pub fn capture_transcript(result: &RunResult, target: usize, k: u64) -> Result<Transcript, AdversaryError> {
    capture_transcript_between(result, target, 0, k)
}

/// Transcript between state indices `first < second`.
pub fn capture_transcript_between(
    result: &RunResult,
    target: usize,
    first: u64,
    second: u64,
) -> Result<Transcript, AdversaryError> {
    require_observable(result, target)?;
    if first >= second {
        return Err(AdversaryError::InvalidRounds { first, second });
    }
    let view = link_view(result, target)?;
    let sent = |idx: u64| -> Result<&[i64], AdversaryError> {
        view.get(idx as usize + 1)
            .map(|r| r.sent.as_slice())
            .filter(|s| !s.is_empty())
            .ok_or(AdversaryError::NoObservation { target, round: idx + 1 })
    };
    let (a, b) = (sent(first)?, sent(second)?);
    let uniform = a.iter().all(|&v| v == a[0]) && b.iter().all(|&v| v == b[0]);
    Ok(Transcript {
        target,
        scale: scale(result),
        first,
        second,
        y_out_first: a[0],
        y_out_second: b[0],
        uniform,
        flows_first: cumulative(&view, first),
        flows_second: cumulative(&view, second),
    })
}

/// Round in which `target` injected its last offset (0 if it never did).
pub fn privacy_phase_end(result: &RunResult, target: usize) -> u64 {
    result
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Offset && e.from == target)
        .map(|e| e.k)
        .max()
        .unwrap_or(0)
}

/// Observation rounds the coalition would pick on its own: the first state
/// index after the target's offsets are out whose sent tokens agree, and the
/// next such index with a different numerator (or simply the next one).
pub fn default_observation_rounds(result: &RunResult, target: usize) -> Result<(u64, u64), AdversaryError> {
    check_target(result, target)?;
    let view = link_view(result, target)?;
    let start = privacy_phase_end(result, target);
    let mut candidates = (start..result.rounds).filter(|&idx| {
        let s = &view[idx as usize + 1].sent;
        !s.is_empty() && s.iter().all(|&v| v == s[0])
    });
    let first = candidates.next().ok_or(AdversaryError::NoObservation { target, round: start + 1 })?;
    let p = view[first as usize + 1].sent[0];
    let rest: Vec<u64> = candidates.collect();
    let second = rest
        .iter()
        .copied()
        .find(|&idx| view[idx as usize + 1].sent[0] != p)
        .or_else(|| rest.first().copied())
        .ok_or(AdversaryError::NoObservation { target, round: first + 2 })?;
    Ok((first, second))
}

type Q = Ratio<i128>;

/// Linear system `A x = b` over `x = (y[first], z[first], y[second], z[second])`.
pub fn attack_system(t: &Transcript) -> ([[i128; 4]; 4], [i128; 4]) {
    let (p, r) = (t.y_out_first as i128, t.y_out_second as i128);
    let dy = (t.flows_second.net_y() - t.flows_first.net_y()) as i128;
    let dz = (t.flows_second.net_z() - t.flows_first.net_z()) as i128;
    let a = [[1, -p, 0, 0], [0, 0, 1, -r], [-1, 0, 1, 0], [0, -1, 0, 1]];
    (a, [0, 0, dy, dz])
}

/// Gaussian elimination over the rationals. Returns the determinant and,
/// when it is non-zero, the solution.
fn solve4(a: [[i128; 4]; 4], b: [i128; 4]) -> (Q, Option<[Q; 4]>) {
    let mut m: Vec<Vec<Q>> = (0..4)
        .map(|i| a[i].iter().map(|&v| Q::from_integer(v)).chain([Q::from_integer(b[i])]).collect())
        .collect();
    let mut det = Q::from_integer(1);
    for col in 0..4 {
        let Some(pivot) = (col..4).find(|&r| m[r][col] != Q::from_integer(0)) else {
            return (Q::from_integer(0), None);
        };
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        let pv = m[col][col];
        det *= pv;
        for r in 0..4 {
            if r != col && m[r][col] != Q::from_integer(0) {
                let f = m[r][col] / pv;
                let pivot_row = m[col].clone();
                for (dst, src) in m[r].iter_mut().zip(&pivot_row).skip(col) {
                    *dst -= f * src;
                }
            }
        }
    }
    let x = [0, 1, 2, 3].map(|i| m[i][4] / m[i][i]);
    (det, Some(x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Inference {
    /// Recovered `(l + u, lambda)`. `exact` is false when the solution had to
    /// be rounded or the observed tokens were not uniform, i.e. the integral
    /// ratio hypothesis visibly failed.
    Determined { tests: i64, infections: i64, exact: bool },
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub det: i128,
    pub inference: Inference,
}

fn round_q(q: Q) -> i64 {
    (q + Q::new(1, 2)).floor().to_integer() as i64
}

/// Solves the four-equation system and backs out the initial state.
pub fn infer_initial_state(t: &Transcript) -> AttackOutcome {
    let (a, b) = attack_system(t);
    let (det, sol) = solve4(a, b);
    let det_int = det.to_integer();
    let Some([y_first, z_first, _, _]) = sol else {
        return AttackOutcome { det: det_int, inference: Inference::Indeterminate };
    };
    let s = Q::from_integer(t.scale as i128);
    let y0 = (y_first - Q::from_integer(t.flows_first.net_y() as i128)) / s;
    let z0 = (z_first - Q::from_integer(t.flows_first.net_z() as i128)) / s;
    let exact = t.uniform && y0.is_integer() && z0.is_integer() && z0 >= Q::from_integer(1) && z_first >= Q::from_integer(1);
    AttackOutcome {
        det: det_int,
        inference: Inference::Determined { tests: round_q(y0), infections: round_q(z0), exact },
    }
}

/// Visible constraints from one post-privacy round.
struct KnownRound {
    /// Net inflow before the round's state.
    net: (i64, i64),
    sent: Vec<i64>,
}

/// Number of initial states `(l + u, lambda)` with
/// `1 <= lambda <= l + u <= bound` that reproduce everything the coalition
/// saw. Values of at least 2 mean the target's state stays hidden.
///
/// Flows on links to non-curious neighbours are unknown to the coalition, so
/// when such a link exists no mass balance ties the target's later tokens to
/// its initial state and every candidate survives. Otherwise each round after
/// the target's last offset yields `alpha = s * x0 + net inflow`, and the
/// numerators it sends must be the floor/ceiling tokens of that state: at
/// most `R - 1` ceilings (it keeps one) and `z - R` floors, `R = y mod z`.
pub fn privacy_feasible_set(result: &RunResult, target: usize, bound: i64) -> Result<u64, AdversaryError> {
    check_target(result, target)?;
    let truth = result.inits[target];
    if truth.tests() > bound || truth.infections > bound {
        return Err(AdversaryError::BoundTooSmall {
            target,
            bound,
            tests: truth.tests(),
            infections: truth.infections,
        });
    }
    let b = bound.max(0) as u64;
    if !hidden_neighbors(result, target).is_empty() {
        return Ok(b * (b + 1) / 2);
    }
    let view = link_view(result, target)?;
    let s = scale(result);
    let start = if result.private[target] { privacy_phase_end(result, target) } else { 0 };
    let mut net = cumulative(&view, start);
    let mut known = Vec::new();
    for idx in start..result.rounds {
        known.push(KnownRound { net: (net.net_y(), net.net_z()), sent: view[idx as usize + 1].sent.clone() });
        let r = &view[idx as usize + 1];
        net.y_in += r.inflow.0;
        net.y_out += r.outflow.0;
        net.z_in += r.inflow.1;
        net.z_out += r.outflow.1;
    }
    let informative: Vec<&KnownRound> = known.iter().filter(|k| !k.sent.is_empty()).collect();

    let mut count = 0u64;
    for z0 in 1..=bound {
        // Candidate window for y0 from value ranges alone.
        let (mut lo, mut hi) = (z0, bound);
        let mut dead = false;
        for k in &known {
            let zk = s * z0 + k.net.1;
            if zk < 1 || (!k.sent.is_empty() && zk < 2) {
                dead = true;
                break;
            }
            let Some((&vmin, &vmax)) = k.sent.iter().min().zip(k.sent.iter().max()) else {
                continue;
            };
            let (ylo, yhi) = match vmax - vmin {
                0 => ((vmin - 1) * zk + 1, (vmin + 1) * zk - 1),
                1 => (vmin * zk + 1, vmax * zk - 1),
                _ => {
                    dead = true;
                    break;
                }
            };
            lo = lo.max(div_ceil(ylo - k.net.0, s));
            hi = hi.min((yhi - k.net.0).div_euclid(s));
            if lo > hi {
                dead = true;
                break;
            }
        }
        if dead {
            continue;
        }
        for y0 in lo..=hi {
            if informative.iter().all(|k| consistent(s * y0 + k.net.0, s * z0 + k.net.1, &k.sent)) {
                count += 1;
            }
        }
    }
    Ok(count)
}

fn div_ceil(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

/// Whether a node holding `(y, z)` after re-partitioning could have sent `sent`.
fn consistent(y: i64, z: i64, sent: &[i64]) -> bool {
    if z < 2 || sent.len() as i64 > z - 1 {
        return false;
    }
    let (q, r) = (y.div_euclid(z), y.rem_euclid(z));
    let ceil = sent.iter().filter(|&&v| v == q + 1).count() as i64;
    let floor = sent.iter().filter(|&&v| v == q).count() as i64;
    if ceil + floor != sent.len() as i64 {
        return false;
    }
    if r == 0 {
        ceil == 0
    } else {
        ceil < r && floor <= z - r
    }
}

/// Structured attack outcome for one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub target: usize,
    /// Second observation state index, when the linear attack ran.
    pub k: Option<u64>,
    pub det: Option<i128>,
    /// `[l + u, lambda]` recovered by the linear attack.
    pub inferred: Option<[i64; 2]>,
    pub exact: Option<bool>,
    pub truth: [i64; 2],
    #[serde(rename = "match")]
    pub matches: bool,
    pub feasible_count: Option<u64>,
    /// Why the linear attack did not run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Runs both attacks against `target`. `round` overrides the second
/// observation index; `bound` defaults to four times the true `l + u`.
pub fn attack_report(
    result: &RunResult,
    target: usize,
    round: Option<u64>,
    bound: Option<i64>,
) -> Result<AttackReport, AdversaryError> {
    check_target(result, target)?;
    let init = result.inits[target];
    let truth = [init.tests(), init.infections];
    let mut report = AttackReport {
        target,
        k: None,
        det: None,
        inferred: None,
        exact: None,
        truth,
        matches: false,
        feasible_count: None,
        note: None,
    };
    let rounds = require_observable(result, target).and_then(|_| {
        let (first, second) = default_observation_rounds(result, target)?;
        Ok(match round {
            Some(k) => (first.min(k.saturating_sub(1)), k),
            None => (first, second),
        })
    });
    match rounds.and_then(|(a, b)| capture_transcript_between(result, target, a, b)) {
        Ok(t) => {
            let out = infer_initial_state(&t);
            report.k = Some(t.second);
            report.det = Some(out.det);
            if let Inference::Determined { tests, infections, exact } = out.inference {
                report.inferred = Some([tests, infections]);
                report.exact = Some(exact);
                report.matches = [tests, infections] == truth;
            }
        }
        Err(e) => report.note = Some(e.to_string()),
    }
    let bound = bound.unwrap_or(4 * init.tests().max(1));
    report.feasible_count = Some(privacy_feasible_set(result, target, bound)?);
    Ok(report)
}
