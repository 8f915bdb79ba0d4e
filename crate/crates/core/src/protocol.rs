//! Per-node state machine.
//!
//! A node holds integer mass `(y, z)` as a multiset of tokens. Each round it
//! keeps its largest token, scatters the rest uniformly over its
//! out-neighbours and itself, and merges whatever arrives into fresh
//! ceiling/floor tokens. Private nodes additionally split their doubled
//! initial mass into a circulating part and an offset reservoir; the
//! reservoir is injected into the first token sent along each out-edge, and
//! until every out-edge has carried its offset the node forwards tokens
//! verbatim and inflates its advertised maximum so nobody stops early.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Unit of transmitted mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub y: i64,
    pub z: i64,
}

impl Token {
    pub const fn new(y: i64, z: i64) -> Self {
        Self { y, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Private,
    Curious,
    #[default]
    Neutral,
}

/// Which protocol the network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain quantized averaging on `(l + u, lambda)`.
    Alg1,
    /// Doubled masses with substate split and offset injection at private nodes.
    #[default]
    Alg2,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Alg1 => "alg1",
            Variant::Alg2 => "alg2",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alg1" => Ok(Variant::Alg1),
            "alg2" => Ok(Variant::Alg2),
            other => Err(format!("unknown variant `{other}` (expected alg1 or alg2)")),
        }
    }
}

/// Local inputs of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInit {
    /// Tests already stored at the node (`l`).
    pub stored: i64,
    /// Tests received (`u`); the final allocation is reported relative to it.
    pub received: i64,
    /// Infections (`lambda`).
    pub infections: i64,
    #[serde(default)]
    pub role: Role,
}

impl NodeInit {
    pub const fn new(stored: i64, received: i64, infections: i64, role: Role) -> Self {
        Self { stored, received, infections, role }
    }

    pub const fn neutral(tests: i64, infections: i64) -> Self {
        Self::new(tests, 0, infections, Role::Neutral)
    }

    pub const fn tests(&self) -> i64 {
        self.stored + self.received
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("cannot partition mass {y} into zero tokens")]
    DivisionByZero { y: i64 },
    #[error("node {node}: invalid initial state: {reason}")]
    InvalidInit { node: usize, reason: String },
    #[error("node {node}: no valid private split found: {reason}")]
    InitInfeasible { node: usize, reason: String },
    #[error("node {node}: batch from {from} declares ({sum_y}, {sum_z}) but its tokens sum to ({token_y}, {token_z})")]
    BatchMismatch { node: usize, from: usize, sum_y: i64, sum_z: i64, token_y: i64, token_z: i64 },
    #[error("node {node}: integer overflow in mass arithmetic")]
    Overflow { node: usize },
}

/// Splits `y` into `z` unit-denominator tokens whose numerators differ by at
/// most one: `y mod z` tokens of `ceil(y/z)` first, then floors.
pub fn partition_into_tokens(y: i64, z: i64) -> Result<Vec<Token>, ProtocolError> {
    if z <= 0 {
        return Err(ProtocolError::DivisionByZero { y });
    }
    let q = y.div_euclid(z);
    let r = y.rem_euclid(z);
    let mut tokens = Vec::with_capacity(z as usize);
    tokens.extend((0..r).map(|_| Token::new(q + 1, 1)));
    tokens.extend((r..z).map(|_| Token::new(q, 1)));
    Ok(tokens)
}

pub fn ceil_div(a: i64, b: i64) -> i64 {
    let q = a.div_euclid(b);
    if a.rem_euclid(b) == 0 {
        q
    } else {
        q + 1
    }
}

/// One offset pair `(xi, zeta)` reserved for an out-neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Offset {
    pub to: usize,
    pub xi: i64,
    pub zeta: i64,
    pub pending: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OffsetPlan {
    /// Aligned with the node's out-neighbour list.
    pub entries: Vec<Offset>,
}

impl OffsetPlan {
    /// Balanced split: `z_beta` spread as evenly as possible, then every edge
    /// gets at least its `zeta` in `xi` and the surplus `y_beta - z_beta` is
    /// spread evenly on top.
    pub fn balanced(out_neighbors: &[usize], y_beta: i64, z_beta: i64) -> Option<Self> {
        let d = out_neighbors.len() as i64;
        if d == 0 || y_beta < z_beta || z_beta < 0 {
            return None;
        }
        let zetas = balanced_parts(z_beta, d);
        let surplus = balanced_parts(y_beta - z_beta, d);
        let entries = out_neighbors
            .iter()
            .zip(zetas.iter().zip(&surplus))
            .map(|(&to, (&zeta, &extra))| Offset { to, xi: zeta + extra, zeta, pending: true })
            .collect();
        Some(Self { entries })
    }

    pub fn has_pending(&self) -> bool {
        self.entries.iter().any(|o| o.pending)
    }

    pub fn pending_count(&self) -> usize {
        self.entries.iter().filter(|o| o.pending).count()
    }
}

fn balanced_parts(total: i64, parts: i64) -> Vec<i64> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + i64::from(i < r)).collect()
}

/// Source of routing decisions. Returns an index in `0..options`.
pub trait TokenRouter {
    fn choose(&mut self, options: usize) -> usize;
}

/// Uniform routing backed by any `rand` generator.
pub struct RngRouter<R>(pub R);

impl<R: Rng> TokenRouter for RngRouter<R> {
    fn choose(&mut self, options: usize) -> usize {
        self.0.gen_range(0..options)
    }
}

/// Tokens bound for one destination in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transmission {
    pub from: usize,
    pub to: usize,
    pub tokens: Vec<Token>,
    pub sum_y: i64,
    pub sum_z: i64,
}

impl Transmission {
    fn empty(from: usize, to: usize) -> Self {
        Self { from, to, tokens: Vec::new(), sum_y: 0, sum_z: 0 }
    }

    fn push(&mut self, t: Token) {
        self.sum_y += t.y;
        self.sum_z += t.z;
        self.tokens.push(t);
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Injection {
    pub to: usize,
    pub xi: i64,
    pub zeta: i64,
}

/// Everything a node emits in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutboundBatch {
    pub to_self: Transmission,
    /// Only non-empty transmissions, in out-neighbour order.
    pub to_neighbors: Vec<Transmission>,
    pub injections: Vec<Injection>,
}

impl OutboundBatch {
    pub fn network_messages(&self) -> usize {
        self.to_neighbors.len()
    }
}

/// Full protocol state of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeState {
    pub id: usize,
    pub init: NodeInit,
    /// Runs the offset protocol (private role under `Alg2`).
    pub private: bool,
    pub y_alpha: i64,
    pub z_alpha: i64,
    pub y_beta: i64,
    pub z_beta: i64,
    pub y_s: i64,
    pub z_s: i64,
    pub q_s: i64,
    pub recv: Vec<Token>,
    pub offsets: OffsetPlan,
    pub max: i64,
    pub min: i64,
    pub terminated: bool,
    pub w_star: Option<i64>,
}

fn validate_init(id: usize, init: &NodeInit) -> Result<(), ProtocolError> {
    let bad = |reason: String| Err(ProtocolError::InvalidInit { node: id, reason });
    if init.stored < 0 || init.received < 0 {
        return bad("test counts must be non-negative".into());
    }
    if init.infections < 1 {
        return bad(format!("infections must be >= 1, got {}", init.infections));
    }
    if init.tests() < init.infections {
        return bad(format!(
            "tests ({}) must be >= infections ({})",
            init.tests(),
            init.infections
        ));
    }
    Ok(())
}

const SPLIT_ATTEMPTS: usize = 1000;

impl NodeState {
    fn from_alpha(id: usize, init: NodeInit, y_alpha: i64, z_alpha: i64) -> Result<Self, ProtocolError> {
        let recv = partition_into_tokens(y_alpha, z_alpha)?;
        Ok(Self {
            id,
            init,
            private: false,
            y_alpha,
            z_alpha,
            y_beta: 0,
            z_beta: 0,
            y_s: y_alpha,
            z_s: z_alpha,
            q_s: ceil_div(y_alpha, z_alpha),
            recv,
            offsets: OffsetPlan::default(),
            max: 0,
            min: 0,
            terminated: false,
            w_star: None,
        })
    }

    /// Initialization for the doubled-mass protocol. With `privacy` set the
    /// node draws a random substate split and builds its offset plan.
    pub fn init_node<R: Rng>(
        id: usize,
        init: NodeInit,
        out_neighbors: &[usize],
        privacy: bool,
        rng: &mut R,
    ) -> Result<Self, ProtocolError> {
        validate_init(id, &init)?;
        let total_y = init.tests().checked_mul(2).ok_or(ProtocolError::Overflow { node: id })?;
        let total_z = init.infections.checked_mul(2).ok_or(ProtocolError::Overflow { node: id })?;
        if !privacy {
            return Self::from_alpha(id, init, total_y, total_z);
        }
        if out_neighbors.is_empty() {
            return Err(ProtocolError::InitInfeasible {
                node: id,
                reason: "private node has no out-neighbours".into(),
            });
        }
        // With a single infection the only admissible denominator split is
        // (2, 0): the reservoir then carries numerator offsets only.
        let z_range = if init.infections == 1 { 2..=2 } else { 1..=total_z - 1 };
        for _ in 0..SPLIT_ATTEMPTS {
            let z_alpha = rng.gen_range(z_range.clone());
            if z_alpha > total_y - 1 {
                continue;
            }
            let y_alpha = rng.gen_range(z_alpha..=total_y - 1);
            let (y_beta, z_beta) = (total_y - y_alpha, total_z - z_alpha);
            if y_alpha == y_beta || z_alpha == z_beta || y_beta < z_beta {
                continue;
            }
            let Some(offsets) = OffsetPlan::balanced(out_neighbors, y_beta, z_beta) else {
                continue;
            };
            let mut state = Self::from_alpha(id, init, y_alpha, z_alpha)?;
            state.private = true;
            state.y_beta = y_beta;
            state.z_beta = z_beta;
            state.offsets = offsets;
            return Ok(state);
        }
        Err(ProtocolError::InitInfeasible {
            node: id,
            reason: format!(
                "no split of ({total_y}, {total_z}) satisfies y_alpha >= z_alpha >= 1, \
                 unequal substates and y_beta >= z_beta after {SPLIT_ATTEMPTS} draws"
            ),
        })
    }

    /// Initialization for the plain protocol: `(y, z) = (l + u, lambda)`.
    pub fn algorithm1_init(id: usize, init: NodeInit) -> Result<Self, ProtocolError> {
        validate_init(id, &init)?;
        Self::from_alpha(id, init, init.tests(), init.infections)
    }

    pub fn privacy_pending(&self) -> bool {
        self.private && self.offsets.has_pending()
    }

    fn refresh_state_variables(&mut self) {
        if self.z_alpha >= 1 {
            self.y_s = self.y_alpha;
            self.z_s = self.z_alpha;
            self.q_s = ceil_div(self.y_alpha, self.z_alpha);
        }
    }

    /// Routes this round's tokens. Consumes `recv`.
    pub fn transmit_round<T: TokenRouter + ?Sized>(
        &mut self,
        out_neighbors: &[usize],
        router: &mut T,
    ) -> OutboundBatch {
        let mut to_self = Transmission::empty(self.id, self.id);
        let mut per_neighbor: Vec<Transmission> =
            out_neighbors.iter().map(|&l| Transmission::empty(self.id, l)).collect();
        let mut injections = Vec::new();
        let mut tokens = std::mem::take(&mut self.recv);

        // A node holding one token (z <= 1) keeps it; q_s still tracks it.
        self.refresh_state_variables();
        if self.z_alpha <= 1 || out_neighbors.is_empty() {
            for t in tokens {
                to_self.push(t);
            }
            return OutboundBatch { to_self, to_neighbors: Vec::new(), injections };
        }

        if let Some(keep) = argmax_first(&tokens) {
            to_self.push(tokens.remove(keep));
        }
        let options = out_neighbors.len() + 1;
        for mut t in tokens {
            let choice = router.choose(options);
            if choice == out_neighbors.len() {
                to_self.push(t);
                continue;
            }
            if self.private {
                let entry = &mut self.offsets.entries[choice];
                if entry.pending {
                    t.y += entry.xi;
                    t.z += entry.zeta;
                    self.y_beta -= entry.xi;
                    self.z_beta -= entry.zeta;
                    entry.pending = false;
                    injections.push(Injection { to: entry.to, xi: entry.xi, zeta: entry.zeta });
                }
            }
            per_neighbor[choice].push(t);
        }
        let to_neighbors = per_neighbor.into_iter().filter(|t| !t.is_empty()).collect();
        OutboundBatch { to_self, to_neighbors, injections }
    }

    /// Merges this round's inbound transmissions (including the self batch).
    pub fn aggregate_round(&mut self, inbound: &[&Transmission]) -> Result<(), ProtocolError> {
        let overflow = ProtocolError::Overflow { node: self.id };
        let (mut y, mut z) = (0i64, 0i64);
        for tr in inbound {
            let (ty, tz) = tr.tokens.iter().try_fold((0i64, 0i64), |(a, b), t| {
                Some((a.checked_add(t.y)?, b.checked_add(t.z)?))
            })
            .ok_or(ProtocolError::Overflow { node: self.id })?;
            if (ty, tz) != (tr.sum_y, tr.sum_z) {
                return Err(ProtocolError::BatchMismatch {
                    node: self.id,
                    from: tr.from,
                    sum_y: tr.sum_y,
                    sum_z: tr.sum_z,
                    token_y: ty,
                    token_z: tz,
                });
            }
            y = y.checked_add(tr.sum_y).ok_or(overflow.clone())?;
            z = z.checked_add(tr.sum_z).ok_or(overflow.clone())?;
        }
        self.y_alpha = y;
        self.z_alpha = z;
        self.recv = if self.privacy_pending() {
            inbound.iter().flat_map(|tr| tr.tokens.iter().copied()).collect()
        } else if z == 0 {
            Vec::new()
        } else {
            partition_into_tokens(y, z)?
        };
        Ok(())
    }

    /// Start of a max/min window: reset to the local token extremes.
    pub fn begin_window(&mut self) {
        if let (Some(hi), Some(lo)) =
            (self.recv.iter().map(|t| t.y).max(), self.recv.iter().map(|t| t.y).min())
        {
            self.max = hi;
            self.min = lo;
        }
        if self.privacy_pending() {
            self.max += 2;
        }
    }

    pub fn merge_maxmin(&mut self, neighbors: &[(i64, i64)]) {
        for &(hi, lo) in neighbors {
            self.max = self.max.max(hi);
            self.min = self.min.min(lo);
        }
    }

    /// Stopping test. On success records `w* = q_s * lambda - u` and sets the flag.
    pub fn check_termination(&mut self) -> bool {
        if self.max - self.min <= 1 {
            self.terminated = true;
            self.w_star = Some(self.q_s * self.init.infections - self.init.received);
        }
        self.terminated
    }

    /// One max/min consensus step at round `k` with window length `d`:
    /// window reset on `k = 1 (mod d)`, merge with neighbour values, stopping
    /// test on `k = 0 (mod d)`. Returns whether the node stopped.
    pub fn maxmin_step(&mut self, k: u64, d: u64, neighbors: &[(i64, i64)]) -> bool {
        if is_window_start(k, d) {
            self.begin_window();
        }
        self.merge_maxmin(neighbors);
        is_window_end(k, d) && self.check_termination()
    }
}

pub fn is_window_start(k: u64, d: u64) -> bool {
    (k - 1).is_multiple_of(d)
}

pub fn is_window_end(k: u64, d: u64) -> bool {
    k.is_multiple_of(d)
}

fn argmax_first(tokens: &[Token]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in tokens.iter().enumerate() {
        if best.is_none_or(|b| t.y > tokens[b].y) {
            best = Some(i);
        }
    }
    best
}
