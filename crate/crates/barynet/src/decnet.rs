//! Round-synchronous multi-agent simulator: per-agent dual iterates in the
//! transformed variables `λ̄_i`, quantized-histogram message exchange over the
//! graph, the two batch regimes, and exact accounting of samples, coordinates,
//! and bits.
//!
//! Each round every agent broadcasts one gradient message to its neighbors.
//! The accelerated recursion runs in `λ̄`-space, where the centralized
//! gradient `√W g` becomes `m·[W g]_i` per agent under the change of
//! variables `λ̄ = m√Wλ` — so only Laplacian rows (neighbor sums) are ever
//! needed, never `√W` itself.
//!
//! A barrier separates the two phases of a round: first every agent absorbs
//! the previous round's messages into its running sum `s_i`, forms the fresh
//! query point `λ̄_i^{k+1}`, draws its batch, and stages its new message; only
//! once all messages exist does any agent aggregate them for the `ζ/η`
//! update. Per-agent random substreams make the result bit-identical
//! regardless of intra-round execution order.

use std::io::Write as IoWrite;
use std::time::{Duration, Instant};

use crate::dual_oracle::{exact_gradient_finite, quantize_counts, sampled_gradient, DualPotential};
use crate::graph::{build_laplacian, GraphTopology, LaplacianInfo};
use crate::metrics::{self, ConsensusReport};
use crate::pdasgd::{
    batch_schedule_a, iterations_case_a, iterations_case_b, variance_bound, Case, Schedule,
};
use crate::problem::{BarycenterProblem, Measure, Point};
use crate::rng::{substream, Purpose, Stream};
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// What the agents communicate each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Sampled local plans, quantized to sparse histograms for transmission.
    Quantized,
    /// Sampled local plans sent dense (the uncompressed baseline).
    SampledOnly,
    /// Exact local gradients (finite-support measures only), sent dense.
    Exact,
}

/// Per-round batch sizes `(M₁, M₂)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchRule {
    /// The increasing schedule `M_k = max(1, ⌈(k+2)/ln Ω⌉)` for both batch
    /// sizes (case A regime only).
    Auto,
    /// Constant batches every round.
    Fixed { m1: usize, m2: usize },
}

/// Run-level knobs beyond the problem and graph.
#[derive(Clone, Copy, Debug)]
pub struct RunSettings {
    pub mode: Mode,
    pub case: Case,
    pub batches: BatchRule,
    /// Communication rounds; `None` derives the count from the convergence
    /// theory for the chosen regime.
    pub iterations: Option<usize>,
    /// Keep every `record_stride`-th round log (round 0 and the final round
    /// are always kept).
    pub record_stride: usize,
    /// Size of each agent's fixed dual-evaluation pool (ignored in exact
    /// mode, which evaluates the dual in closed form).
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            mode: Mode::Quantized,
            case: Case::A,
            batches: BatchRule::Auto,
            iterations: None,
            record_stride: 1,
            eval_samples: 256,
            seed: 0,
        }
    }
}

/// Constants derived from the problem, graph, and settings; echoed so a run
/// is fully reproducible from its resolved configuration.
#[derive(Clone, Copy, Debug)]
pub struct DerivedConstants {
    pub gamma: f64,
    pub ln_omega: f64,
    pub lambda_max: f64,
    pub lambda_min_plus: f64,
    pub lipschitz: f64,
    /// Dual-radius bound; undefined for `m = 1`.
    pub radius: Option<f64>,
    /// Gradient-noise bound `σ` (square root of the variance bound);
    /// undefined under auto batches, zero in exact mode.
    pub sigma_bound: Option<f64>,
    /// Communication rounds the run will execute.
    pub iterations: usize,
}

/// One agent's complete state.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    /// Query point `λ̄_i^k` of the most recent gradient draw.
    pub lam_bar: Vec<f64>,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub z: Vec<f64>,
    /// Running weighted aggregated-gradient sum `Σ_l α_l·m·[W g̃_l]_i`.
    pub s: Vec<f64>,
    /// Primal average `p̂_i^k` (a simplex vector after the init phase).
    pub p_hat: Vec<f64>,
    measure: Measure,
    measure_stream: Stream,
    quantize_stream: Stream,
    // Round-local scratch.
    p_bar: Vec<f64>,
    outgoing: Option<GradientMessage>,
    round_samples: u64,
}

impl AgentState {
    fn new(id: usize, n: usize, measure: Measure, seed: u64) -> Self {
        AgentState {
            id,
            lam_bar: vec![0.0; n],
            eta: vec![0.0; n],
            zeta: vec![0.0; n],
            z: vec![0.0; n],
            s: vec![0.0; n],
            p_hat: vec![0.0; n],
            measure,
            measure_stream: substream(seed, id as u64, Purpose::Measure),
            quantize_stream: substream(seed, id as u64, Purpose::Quantize),
            p_bar: vec![0.0; n],
            outgoing: None,
            round_samples: 0,
        }
    }

    pub fn p_hat(&self) -> &[f64] {
        &self.p_hat
    }
}

/// Sparse histogram message: `m2` categorical draws encoded as sorted
/// `(coordinate, count)` pairs with counts ≥ 1 summing to `m2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedMessage {
    pub sender: usize,
    pub round: usize,
    pub m2: u32,
    pub entries: Vec<(u32, u32)>,
}

/// One broadcast gradient message.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientMessage {
    Quantized(QuantizedMessage),
    Dense { sender: usize, round: usize, values: Vec<f64> },
}

/// `⌈log₂ x⌉` with the convention `⌈log₂ 0⌉ = ⌈log₂ 1⌉ = 0`.
pub fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

impl GradientMessage {
    pub fn sender(&self) -> usize {
        match self {
            GradientMessage::Quantized(q) => q.sender,
            GradientMessage::Dense { sender, .. } => *sender,
        }
    }

    pub fn round(&self) -> usize {
        match self {
            GradientMessage::Quantized(q) => q.round,
            GradientMessage::Dense { round, .. } => *round,
        }
    }

    /// Coordinate entries this message carries (histogram entries, or `n` for
    /// dense payloads).
    pub fn coord_entries(&self) -> usize {
        match self {
            GradientMessage::Quantized(q) => q.entries.len(),
            GradientMessage::Dense { values, .. } => values.len(),
        }
    }

    /// Payload size in bits: `entries·(⌈log₂ n⌉ + ⌈log₂(M₂+1)⌉)` for
    /// histograms, `n·64` for dense doubles.
    pub fn payload_bits(&self, n: usize) -> u64 {
        match self {
            GradientMessage::Quantized(q) => {
                q.entries.len() as u64
                    * (ceil_log2(n as u64) + ceil_log2(q.m2 as u64 + 1)) as u64
            }
            GradientMessage::Dense { values, .. } => values.len() as u64 * 64,
        }
    }

    /// Decodes into a dense `n`-vector, checking the protocol invariants.
    pub fn decode(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            GradientMessage::Quantized(q) => {
                if q.entries.is_empty() {
                    return Err(Error::Protocol("quantized message with no entries".into()));
                }
                if q.entries.len() > (q.m2 as usize).min(n) {
                    return Err(Error::Protocol(format!(
                        "quantized message with {} entries exceeds min(M₂ = {}, n = {n})",
                        q.entries.len(),
                        q.m2
                    )));
                }
                let mut total = 0u64;
                let mut dense = vec![0.0; n];
                let mut prev: Option<u32> = None;
                for &(idx, count) in &q.entries {
                    if idx as usize >= n {
                        return Err(Error::Protocol(format!(
                            "coordinate {idx} out of range for n = {n}"
                        )));
                    }
                    if count == 0 {
                        return Err(Error::Protocol("zero count in quantized message".into()));
                    }
                    if prev.is_some_and(|p| p >= idx) {
                        return Err(Error::Protocol(
                            "quantized entries not sorted by coordinate".into(),
                        ));
                    }
                    prev = Some(idx);
                    total += count as u64;
                    dense[idx as usize] = count as f64 / q.m2 as f64;
                }
                if total != q.m2 as u64 {
                    return Err(Error::Protocol(format!(
                        "quantized counts sum to {total}, expected M₂ = {}",
                        q.m2
                    )));
                }
                Ok(dense)
            }
            GradientMessage::Dense { values, .. } => {
                if values.len() != n {
                    return Err(Error::Protocol(format!(
                        "dense message of length {} for n = {n}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Protocol("non-finite entry in dense message".into()));
                }
                Ok(values.clone())
            }
        }
    }
}

/// `message_bits` accounting convention as a free function.
pub fn message_bits(msg: &GradientMessage, n: usize) -> u64 {
    msg.payload_bits(n)
}

/// `Σ_j W̄_ij·g̃_j` over the nonzero row entries. Every `j` with `W̄_ij ≠ 0`
/// (including `j = i`) must have a decoded histogram present.
pub fn aggregate_neighbors(
    row: &[f64],
    decoded: &[Option<Vec<f64>>],
    n: usize,
) -> Result<Vec<f64>> {
    if decoded.len() != row.len() {
        return Err(Error::Protocol(format!(
            "{} decoded messages for a row of length {}",
            decoded.len(),
            row.len()
        )));
    }
    let mut acc = vec![0.0; n];
    for (j, &w) in row.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = decoded[j]
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("missing message from agent {j}")))?;
        if g.len() != n {
            return Err(Error::Protocol(format!(
                "message from agent {j} has length {}, expected {n}",
                g.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += w * v;
        }
    }
    Ok(acc)
}

/// Per-round (or cumulative) communication and sampling counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AgentCounters {
    /// Measure samples drawn (`M₁`; zero in exact mode).
    pub samples: u64,
    /// Directed message deliveries (one broadcast reaches `deg(i)` neighbors).
    pub messages: u64,
    /// Coordinate entries delivered.
    pub coords: u64,
    /// Payload bits delivered.
    pub bits: u64,
}

impl AgentCounters {
    pub fn add(&mut self, other: &AgentCounters) {
        self.samples += other.samples;
        self.messages += other.messages;
        self.coords += other.coords;
        self.bits += other.bits;
    }
}

/// Everything recorded about one round (round 0 is the init exchange).
#[derive(Clone, Debug)]
pub struct RoundLog {
    pub round: usize,
    pub per_agent: Vec<AgentCounters>,
    pub totals: AgentCounters,
    pub gap: ConsensusReport,
    pub dual_estimate: f64,
    pub duration: Duration,
}

/// Final artifacts of a complete run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub p_hats: Vec<Vec<f64>>,
    pub lam_bars: Vec<Vec<f64>>,
    pub etas: Vec<Vec<f64>>,
    /// Grand totals over the init exchange and every round, independent of
    /// the record stride.
    pub cumulative: AgentCounters,
}

/// The round-synchronous network.
pub struct NetworkRun {
    problem: BarycenterProblem,
    graph: GraphTopology,
    laplacian: LaplacianInfo,
    rows: Vec<Vec<f64>>,
    degrees: Vec<usize>,
    schedule: Schedule,
    settings: RunSettings,
    derived: DerivedConstants,
    agents: Vec<AgentState>,
    inbox: Vec<GradientMessage>,
    pools: Vec<Vec<Point>>,
    round: usize,
    initialized: bool,
}

impl NetworkRun {
    pub fn new(
        problem: BarycenterProblem,
        graph: GraphTopology,
        settings: RunSettings,
    ) -> Result<Self> {
        if graph.m() != problem.m() {
            return Err(Error::invalid(
                "graph",
                format!("{} nodes for {} measures", graph.m(), problem.m()),
            ));
        }
        if settings.record_stride == 0 {
            return Err(Error::invalid("record_stride", "must be at least 1"));
        }
        if settings.eval_samples == 0 {
            return Err(Error::invalid("eval_samples", "must be at least 1"));
        }
        if let BatchRule::Fixed { m1, m2 } = settings.batches {
            if m1 == 0 || m2 == 0 {
                return Err(Error::invalid("batches", "batch sizes must be at least 1"));
            }
        }
        if settings.batches == BatchRule::Auto && settings.case == Case::B {
            return Err(Error::invalid(
                "batches",
                "auto batches implement the increasing schedule of the case A \
                 regime; case B needs explicit {m1, m2}",
            ));
        }
        if settings.mode == Mode::Exact && !problem.all_finite_support() {
            return Err(Error::invalid(
                "mode",
                "exact mode requires all measures to have finite support",
            ));
        }
        if problem.n() > u32::MAX as usize {
            return Err(Error::invalid("n", "support size exceeds message encoding range"));
        }

        let m = graph.m();
        let laplacian = build_laplacian(&graph)?;
        let rows: Vec<Vec<f64>> = (0..m).map(|i| laplacian.row(i)).collect();
        let degrees = graph.degrees();

        let gamma = problem.gamma();
        let lipschitz = m as f64 * laplacian.lambda_max / gamma;
        let radius = if laplacian.lambda_min_plus > 0.0 {
            Some(crate::dual_oracle::dual_radius_bound(
                problem.n(),
                m,
                laplacian.lambda_min_plus,
            )?)
        } else {
            None
        };
        let sigma_bound = match (settings.mode, settings.batches) {
            (Mode::Exact, _) => Some(0.0),
            (_, BatchRule::Auto) => None,
            (Mode::Quantized, BatchRule::Fixed { m1, m2 }) => Some(
                variance_bound(laplacian.lambda_max, &vec![m1; m], &vec![m2; m]).sqrt(),
            ),
            (Mode::SampledOnly, BatchRule::Fixed { m1, .. }) => {
                // Only the measure-sampling term remains without quantization.
                Some((2.0 * laplacian.lambda_max * (m as f64 / m1 as f64)).sqrt())
            }
        };

        let schedule = match settings.case {
            Case::A => Schedule::case_a(lipschitz)?,
            Case::B => {
                let r = radius.ok_or_else(|| {
                    Error::invalid("case", "case B needs the dual-radius bound (m ≥ 2)")
                })?;
                let sigma = sigma_bound.ok_or_else(|| {
                    Error::invalid("case", "case B needs a gradient-noise bound")
                })?;
                Schedule::case_b(lipschitz, sigma, r)?
            }
        };

        let iterations = match settings.iterations {
            Some(n) => n,
            None => {
                let r = radius.ok_or_else(|| {
                    Error::invalid(
                        "iterations",
                        "no dual-radius bound for m = 1; give iterations explicitly",
                    )
                })?;
                match settings.case {
                    Case::A => iterations_case_a(lipschitz, r, problem.epsilon())?,
                    Case::B => iterations_case_b(
                        lipschitz,
                        r,
                        problem.epsilon(),
                        sigma_bound.unwrap_or(0.0),
                    )?,
                }
            }
        };

        let derived = DerivedConstants {
            gamma,
            ln_omega: problem.ln_omega(),
            lambda_max: laplacian.lambda_max,
            lambda_min_plus: laplacian.lambda_min_plus,
            lipschitz,
            radius,
            sigma_bound,
            iterations,
        };

        let pools = if settings.mode == Mode::Exact {
            Vec::new()
        } else {
            metrics::build_eval_pools(&problem, settings.eval_samples, settings.seed)?
        };

        let n = problem.n();
        let agents = (0..m)
            .map(|i| AgentState::new(i, n, problem.measures()[i].clone(), settings.seed))
            .collect();

        Ok(NetworkRun {
            problem,
            graph,
            laplacian,
            rows,
            degrees,
            schedule,
            settings,
            derived,
            agents,
            inbox: Vec::new(),
            pools,
            round: 0,
            initialized: false,
        })
    }

    pub fn derived(&self) -> &DerivedConstants {
        &self.derived
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    pub fn problem(&self) -> &BarycenterProblem {
        &self.problem
    }

    pub fn graph(&self) -> &GraphTopology {
        &self.graph
    }

    pub fn laplacian(&self) -> &LaplacianInfo {
        &self.laplacian
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    /// Completed communication rounds (0 right after the init exchange).
    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn lam_bars(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.lam_bar.clone()).collect()
    }

    pub fn etas(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.eta.clone()).collect()
    }

    pub fn p_hats(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.p_hat.clone()).collect()
    }

    fn batches_for(&self, batch_index: usize) -> (usize, usize) {
        match self.settings.batches {
            BatchRule::Auto => {
                let m = batch_schedule_a(batch_index, self.derived.ln_omega);
                (m, m)
            }
            BatchRule::Fixed { m1, m2 } => (m1, m2),
        }
    }

    /// Init exchange: gradients at `λ̄⁰ = 0` drawn with batch index 0,
    /// broadcast, and the primal seeded with `p̂⁰ = p̄⁰`; the running sum `s`
    /// absorbs these messages at the start of round 1.
    pub fn initialize(&mut self) -> Result<RoundLog> {
        if self.initialized {
            return Err(Error::Protocol("network already initialized".into()));
        }
        let t0 = Instant::now();
        let (m1, m2) = self.batches_for(0);
        let mode = self.settings.mode;
        let grid = self.problem.grid();
        let cost = self.problem.cost();
        let gamma = self.derived.gamma;

        try_each_agent(&mut self.agents, |agent| {
            let lam = DualPotential { values: agent.lam_bar.clone() };
            let (p_bar, msg, samples) =
                draw_and_encode(agent, &lam, mode, m1, m2, grid, cost, gamma, 0)?;
            agent.p_hat = p_bar.clone();
            agent.p_bar = p_bar;
            agent.outgoing = Some(msg);
            agent.round_samples = samples;
            Ok(())
        })?;

        self.inbox = self.collect_outgoing()?;
        self.initialized = true;

        let per_agent = self.round_counters();
        let (gap, dual) = self.snapshot_metrics()?;
        Ok(make_log(0, per_agent, gap, dual, t0.elapsed()))
    }

    /// One full communication round (two phases around a barrier).
    fn advance(&mut self) -> Result<Vec<AgentCounters>> {
        if !self.initialized {
            return Err(Error::Protocol("initialize the network before stepping".into()));
        }
        let k = self.round;
        let n = self.problem.n();
        let m_f = self.graph.m() as f64;
        let tau = self.schedule.tau(k);
        let beta_k = self.schedule.beta(k);
        let alpha_k = self.schedule.alpha(k);
        let alpha_next = self.schedule.alpha(k + 1);
        let a_cur = self.schedule.a_big(k);
        let a_next = self.schedule.a_big(k + 1);
        let (m1, m2) = self.batches_for(k + 1);
        let mode = self.settings.mode;
        let grid = self.problem.grid();
        let cost = self.problem.cost();
        let gamma = self.derived.gamma;

        // Delivered round-k messages, decoded once per sender.
        self.validate_inbox(k)?;
        let decoded_old = decode_all(&self.inbox, n)?;
        let rows = &self.rows;

        // Phase 1: absorb the inbox into s, form z and λ̄^{k+1}, draw the new
        // batch, stage the outgoing message.
        try_each_agent(&mut self.agents, |agent| {
            let agg = aggregate_neighbors(&rows[agent.id], &decoded_old, n)?;
            for (s, a) in agent.s.iter_mut().zip(&agg) {
                *s += alpha_k * m_f * a;
            }
            agent.z = if beta_k == 0.0 {
                vec![0.0; n]
            } else {
                agent.s.iter().map(|s| -s / beta_k).collect()
            };
            for i in 0..n {
                agent.lam_bar[i] = tau * agent.z[i] + (1.0 - tau) * agent.eta[i];
            }
            if agent.lam_bar.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "λ̄ of agent {} at round {}",
                    agent.id,
                    k + 1
                )));
            }
            let lam = DualPotential { values: agent.lam_bar.clone() };
            let (p_bar, msg, samples) =
                draw_and_encode(agent, &lam, mode, m1, m2, grid, cost, gamma, k + 1)?;
            agent.p_bar = p_bar;
            agent.outgoing = Some(msg);
            agent.round_samples = samples;
            Ok(())
        })?;

        // Barrier: gather every broadcast before any agent aggregates it.
        let messages = self.collect_outgoing()?;
        let decoded_new = decode_all(&messages, n)?;
        let rows = &self.rows;

        // Phase 2: ζ/η update from the new messages, primal average update.
        let step_scale = if beta_k == 0.0 { 0.0 } else { alpha_next / beta_k };
        try_each_agent(&mut self.agents, |agent| {
            let agg = aggregate_neighbors(&rows[agent.id], &decoded_new, n)?;
            for i in 0..n {
                agent.zeta[i] = agent.z[i] - step_scale * m_f * agg[i];
                agent.eta[i] = tau * agent.zeta[i] + (1.0 - tau) * agent.eta[i];
                agent.p_hat[i] = (alpha_next * agent.p_bar[i] + a_cur * agent.p_hat[i]) / a_next;
            }
            if agent.eta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "η of agent {} at round {}",
                    agent.id,
                    k + 1
                )));
            }
            Ok(())
        })?;

        self.inbox = messages;
        self.round += 1;
        Ok(self.round_counters())
    }

    /// Runs one round and records its full log.
    pub fn step_round(&mut self) -> Result<RoundLog> {
        let t0 = Instant::now();
        let per_agent = self.advance()?;
        let (gap, dual) = self.snapshot_metrics()?;
        Ok(make_log(self.round, per_agent, gap, dual, t0.elapsed()))
    }

    /// Init exchange plus the planned number of rounds, keeping logs at the
    /// record stride.
    pub fn run(&mut self) -> Result<RunOutput> {
        let total = self.derived.iterations;
        let mut logs = Vec::with_capacity(total / self.settings.record_stride + 2);
        logs.push(self.initialize()?);
        let mut cumulative = AgentCounters::default();
        cumulative.add(&logs[0].totals);
        for _ in 0..total {
            let t0 = Instant::now();
            let per_agent = self.advance()?;
            for c in &per_agent {
                cumulative.add(c);
            }
            let r = self.round;
            if r % self.settings.record_stride == 0 || r == total {
                let (gap, dual) = self.snapshot_metrics()?;
                logs.push(make_log(r, per_agent, gap, dual, t0.elapsed()));
            }
        }
        Ok(RunOutput {
            logs,
            p_hats: self.p_hats(),
            lam_bars: self.lam_bars(),
            etas: self.etas(),
            cumulative,
        })
    }

    fn validate_inbox(&self, k: usize) -> Result<()> {
        if self.inbox.len() != self.graph.m() {
            return Err(Error::Protocol(format!(
                "{} inbox messages for {} agents",
                self.inbox.len(),
                self.graph.m()
            )));
        }
        for (j, msg) in self.inbox.iter().enumerate() {
            if msg.sender() != j {
                return Err(Error::Protocol(format!(
                    "message slot {j} holds sender {}",
                    msg.sender()
                )));
            }
            if msg.round() != k {
                return Err(Error::Protocol(format!(
                    "message from agent {j} is for round {}, expected {k}",
                    msg.round()
                )));
            }
        }
        Ok(())
    }

    fn collect_outgoing(&mut self) -> Result<Vec<GradientMessage>> {
        self.agents
            .iter_mut()
            .map(|a| {
                a.outgoing
                    .take()
                    .ok_or_else(|| Error::Protocol(format!("agent {} staged no message", a.id)))
            })
            .collect()
    }

    fn round_counters(&self) -> Vec<AgentCounters> {
        let n = self.problem.n();
        self.agents
            .iter()
            .zip(&self.inbox)
            .map(|(agent, msg)| {
                let deg = self.degrees[agent.id] as u64;
                AgentCounters {
                    samples: agent.round_samples,
                    messages: deg,
                    coords: deg * msg.coord_entries() as u64,
                    bits: deg * msg.payload_bits(n),
                }
            })
            .collect()
    }

    fn snapshot_metrics(&self) -> Result<(ConsensusReport, f64)> {
        let p_hats = self.p_hats();
        let gap = metrics::consensus_gap(&self.graph, &p_hats)?;
        let etas: Vec<DualPotential> = self
            .agents
            .iter()
            .map(|a| DualPotential { values: a.eta.clone() })
            .collect();
        let dual = match self.settings.mode {
            Mode::Exact => metrics::dual_objective_exact(&etas, &self.problem)?,
            _ => metrics::dual_objective_with_pools(&etas, &self.problem, &self.pools)?,
        };
        Ok((gap, dual))
    }
}

/// Draws this round's local plan and encodes the outgoing message.
#[allow(clippy::too_many_arguments)]
fn draw_and_encode(
    agent: &mut AgentState,
    lam: &DualPotential,
    mode: Mode,
    m1: usize,
    m2: usize,
    grid: &crate::problem::SupportGrid,
    cost: &crate::problem::CostOracle,
    gamma: f64,
    round: usize,
) -> Result<(Vec<f64>, GradientMessage, u64)> {
    match mode {
        Mode::Exact => {
            let g = exact_gradient_finite(lam, &agent.measure, grid, cost, gamma)?;
            let values = g.into_vec();
            let msg = GradientMessage::Dense {
                sender: agent.id,
                round,
                values: values.clone(),
            };
            Ok((values, msg, 0))
        }
        Mode::SampledOnly => {
            let p_bar =
                sampled_gradient(lam, &agent.measure, grid, cost, m1, gamma, &mut agent.measure_stream);
            let values = p_bar.into_vec();
            let msg = GradientMessage::Dense {
                sender: agent.id,
                round,
                values: values.clone(),
            };
            Ok((values, msg, m1 as u64))
        }
        Mode::Quantized => {
            let p_bar =
                sampled_gradient(lam, &agent.measure, grid, cost, m1, gamma, &mut agent.measure_stream);
            let counts = quantize_counts(&p_bar, m2, &mut agent.quantize_stream);
            let msg = GradientMessage::Quantized(QuantizedMessage {
                sender: agent.id,
                round,
                m2: m2 as u32,
                entries: counts.iter().map(|&(i, c)| (i as u32, c)).collect(),
            });
            Ok((p_bar.into_vec(), msg, m1 as u64))
        }
    }
}

fn decode_all(messages: &[GradientMessage], n: usize) -> Result<Vec<Option<Vec<f64>>>> {
    messages
        .iter()
        .map(|m| m.decode(n).map(Some))
        .collect()
}

fn make_log(
    round: usize,
    per_agent: Vec<AgentCounters>,
    gap: ConsensusReport,
    dual_estimate: f64,
    duration: Duration,
) -> RoundLog {
    let mut totals = AgentCounters::default();
    for c in &per_agent {
        totals.add(c);
    }
    RoundLog { round, per_agent, totals, gap, dual_estimate, duration }
}

fn try_each_agent<F>(agents: &mut [AgentState], f: F) -> Result<()>
where
    F: Fn(&mut AgentState) -> Result<()> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        agents.par_iter_mut().try_for_each(|a| f(a))
    }
    #[cfg(not(feature = "parallel"))]
    {
        agents.iter_mut().try_for_each(f)
    }
}

/// Uniform average of the agents' barycenter estimates.
pub fn average_barycenter(p_hats: &[Vec<f64>]) -> Vec<f64> {
    if p_hats.is_empty() {
        return Vec::new();
    }
    let n = p_hats[0].len();
    let mut avg = vec![0.0; n];
    for p in p_hats {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= p_hats.len() as f64;
    }
    avg
}

/// Writes the round trajectory: one row per agent plus a `total` row per
/// recorded round. Gap and dual columns are filled only on total rows.
pub fn write_trajectory_csv<W: IoWrite>(out: &mut W, logs: &[RoundLog]) -> Result<()> {
    writeln!(
        out,
        "round,agent,samples,coords_sent,bits_sent,consensus_gap_w,consensus_gap_max,dual_estimate"
    )?;
    for log in logs {
        for (i, c) in log.per_agent.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},,,", log.round, i, c.samples, c.coords, c.bits)?;
        }
        writeln!(
            out,
            "{},total,{},{},{},{:.16e},{:.16e},{:.16e}",
            log.round,
            log.totals.samples,
            log.totals.coords,
            log.totals.bits,
            log.gap.gap_w,
            log.gap.gap_max,
            log.dual_estimate
        )?;
    }
    Ok(())
}

/// Writes the final barycenters: one row per support atom with every agent's
/// estimate and the agent-averaged barycenter.
pub fn write_barycenters_csv<W: IoWrite>(
    out: &mut W,
    grid: &crate::problem::SupportGrid,
    p_hats: &[Vec<f64>],
) -> Result<()> {
    let m = p_hats.len();
    let avg = average_barycenter(p_hats);
    write!(out, "x,y")?;
    for i in 0..m {
        write!(out, ",agent_{i}")?;
    }
    writeln!(out, ",average")?;
    for (l, point) in grid.points().iter().enumerate() {
        write!(out, "{:.16e},{:.16e}", point[0], point[1])?;
        for p in p_hats {
            write!(out, ",{:.16e}", p[l])?;
        }
        writeln!(out, ",{:.16e}", avg[l])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GraphKind};
    use crate::problem::{CostKind, CostOracle, Domain, OmegaSpec, SupportGrid};

    fn finite_problem(m: usize, n: usize, eps: f64) -> BarycenterProblem {
        let grid = SupportGrid::regular_1d(n, 0.0, 1.0).unwrap();
        let domain = Domain::unit(1);
        let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
        let measures = (0..m)
            .map(|i| Measure::FiniteSupport {
                atoms: vec![[i as f64 / m.max(2) as f64, 0.0]],
                probs: vec![1.0],
            })
            .collect();
        BarycenterProblem::new(grid, cost, measures, eps, OmegaSpec::LnOmega(1.0), &domain, None)
            .unwrap()
    }

    fn settings(mode: Mode, batches: BatchRule, iters: usize, seed: u64) -> RunSettings {
        RunSettings {
            mode,
            case: Case::A,
            batches,
            iterations: Some(iters),
            record_stride: 1,
            eval_samples: 16,
            seed,
        }
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(0), 0);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(101), 7);
        assert_eq!(ceil_log2(1024), 10);
        assert_eq!(ceil_log2(1025), 11);
    }

    #[test]
    fn message_bit_examples() {
        let msg = GradientMessage::Quantized(QuantizedMessage {
            sender: 0,
            round: 0,
            m2: 3,
            entries: vec![(5, 1), (17, 1), (900, 1)],
        });
        assert_eq!(msg.payload_bits(1024), 36);

        let tiny = GradientMessage::Quantized(QuantizedMessage {
            sender: 0,
            round: 0,
            m2: 1,
            entries: vec![(1, 1)],
        });
        assert_eq!(tiny.payload_bits(2), 2);

        let dense = GradientMessage::Dense { sender: 0, round: 0, values: vec![0.0; 100] };
        assert_eq!(dense.payload_bits(100), 6400);
        assert_eq!(message_bits(&dense, 100), 6400);
    }

    #[test]
    fn decode_validates_protocol() {
        let ok = GradientMessage::Quantized(QuantizedMessage {
            sender: 1,
            round: 3,
            m2: 4,
            entries: vec![(0, 2), (2, 1), (3, 1)],
        });
        assert_eq!(ok.decode(4).unwrap(), vec![0.5, 0.0, 0.25, 0.25]);
        assert_eq!(ok.coord_entries(), 3);

        let bad_sum = GradientMessage::Quantized(QuantizedMessage {
            sender: 0,
            round: 0,
            m2: 4,
            entries: vec![(0, 2), (1, 1)],
        });
        assert!(bad_sum.decode(4).is_err());

        let unsorted = GradientMessage::Quantized(QuantizedMessage {
            sender: 0,
            round: 0,
            m2: 2,
            entries: vec![(2, 1), (1, 1)],
        });
        assert!(unsorted.decode(4).is_err());

        let out_of_range = GradientMessage::Quantized(QuantizedMessage {
            sender: 0,
            round: 0,
            m2: 1,
            entries: vec![(9, 1)],
        });
        assert!(out_of_range.decode(4).is_err());

        let wrong_len = GradientMessage::Dense { sender: 0, round: 0, values: vec![0.5; 3] };
        assert!(wrong_len.decode(4).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let u = vec![0.25, 0.25, 0.5];
        // Path-3 middle node: row sums to zero, identical inputs cancel.
        let row = [-1.0, 2.0, -1.0];
        let decoded = vec![Some(u.clone()), Some(u.clone()), Some(u.clone())];
        assert_eq!(aggregate_neighbors(&row, &decoded, 3).unwrap(), vec![0.0; 3]);

        // K2: row (1, −1) with e₁, e₂.
        let row = [1.0, -1.0];
        let decoded = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        assert_eq!(aggregate_neighbors(&row, &decoded, 2).unwrap(), vec![1.0, -1.0]);

        // Isolated node: zero row needs no messages.
        assert_eq!(aggregate_neighbors(&[0.0], &[None], 3).unwrap(), vec![0.0; 3]);

        // Missing neighbor message is a protocol violation.
        let row = [1.0, -1.0];
        let holes = vec![Some(vec![1.0, 0.0]), None];
        assert!(matches!(
            aggregate_neighbors(&row, &holes, 2),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn edgeless_agent_stays_at_zero() {
        let grid = SupportGrid::regular_1d(3, 0.0, 1.0).unwrap();
        let domain = Domain::unit(1);
        let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
        let mu = Measure::FiniteSupport {
            atoms: vec![[0.1, 0.0], [0.9, 0.0]],
            probs: vec![0.5, 0.5],
        };
        let problem = BarycenterProblem::new(
            grid,
            cost,
            vec![mu],
            1.0,
            OmegaSpec::LnOmega(1.0),
            &domain,
            None,
        )
        .unwrap();
        let graph = generate_graph(GraphKind::Path, 1, 0).unwrap();
        let m1 = 3;
        let mut net = NetworkRun::new(
            problem.clone(),
            graph,
            settings(Mode::SampledOnly, BatchRule::Fixed { m1, m2: 1 }, 5, 42),
        )
        .unwrap();
        let out = net.run().unwrap();
        assert_eq!(out.lam_bars[0], vec![0.0; 3]);
        assert_eq!(out.etas[0], vec![0.0; 3]);

        // p̂ must be the α-weighted average of plans sampled at λ̄ = 0,
        // reproduced here from an identical stream.
        let schedule = Schedule::case_a(0.0).unwrap();
        let mut stream = substream(42, 0, Purpose::Measure);
        let lam = DualPotential::zeros(3);
        let mut expect = vec![0.0; 3];
        let mut weight = 0.0;
        for k in 0..=5 {
            let p = sampled_gradient(
                &lam,
                &problem.measures()[0],
                problem.grid(),
                problem.cost(),
                m1,
                problem.gamma(),
                &mut stream,
            );
            let a = schedule.alpha(k);
            for (e, v) in expect.iter_mut().zip(p.probs()) {
                *e += a * v;
            }
            weight += a;
        }
        for e in &mut expect {
            *e /= weight;
        }
        for (a, b) in out.p_hats[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_agents_stay_symmetric() {
        let grid = SupportGrid::regular_1d(3, 0.0, 1.0).unwrap();
        let domain = Domain::unit(1);
        let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
        let mu = Measure::FiniteSupport {
            atoms: vec![[0.2, 0.0], [0.8, 0.0]],
            probs: vec![0.5, 0.5],
        };
        let problem = BarycenterProblem::new(
            grid,
            cost,
            vec![mu.clone(), mu.clone(), mu],
            0.5,
            OmegaSpec::LnOmega(1.0),
            &domain,
            None,
        )
        .unwrap();
        let graph = generate_graph(GraphKind::Complete, 3, 0).unwrap();
        let mut net = NetworkRun::new(
            problem,
            graph,
            settings(Mode::Exact, BatchRule::Fixed { m1: 1, m2: 1 }, 10, 7),
        )
        .unwrap();
        let out = net.run().unwrap();
        for i in 1..3 {
            for l in 0..3 {
                assert!((out.lam_bars[i][l] - out.lam_bars[0][l]).abs() < 1e-12);
                assert!((out.p_hats[i][l] - out.p_hats[0][l]).abs() < 1e-12);
            }
        }
        // Identical exact gradients cancel through the zero-row-sum Laplacian,
        // so the duals never move and p̂ is the weighted gradient average at 0.
        assert_eq!(out.lam_bars[0], vec![0.0; 3]);
    }

    #[test]
    fn quantized_accounting_matches_messages() {
        let problem = finite_problem(4, 100, 0.5);
        let graph = generate_graph(GraphKind::Path, 4, 0).unwrap();
        let mut net = NetworkRun::new(
            problem,
            graph.clone(),
            settings(Mode::Quantized, BatchRule::Fixed { m1: 1, m2: 3 }, 3, 5),
        )
        .unwrap();
        net.initialize().unwrap();
        let degrees = graph.degrees();
        for _ in 0..3 {
            let log = net.step_round().unwrap();
            // Inbox now holds exactly the messages this round delivered.
            for (i, msg) in net.inbox.iter().enumerate() {
                let entries = msg.coord_entries() as u64;
                assert!(entries <= 3);
                assert_eq!(log.per_agent[i].coords, degrees[i] as u64 * entries);
                assert_eq!(log.per_agent[i].bits, degrees[i] as u64 * msg.payload_bits(100));
                assert_eq!(log.per_agent[i].messages, degrees[i] as u64);
                assert_eq!(log.per_agent[i].samples, 1);
            }
            let mut totals = AgentCounters::default();
            for c in &log.per_agent {
                totals.add(c);
            }
            assert_eq!(totals, log.totals);
        }
    }

    #[test]
    fn auto_batches_follow_schedule() {
        let problem = finite_problem(2, 3, 0.5); // ln Ω pinned to 1
        let graph = generate_graph(GraphKind::Complete, 2, 0).unwrap();
        let n_rounds = 6;
        let mut net = NetworkRun::new(
            problem,
            graph,
            settings(Mode::Quantized, BatchRule::Auto, n_rounds, 9),
        )
        .unwrap();
        let out = net.run().unwrap();
        assert_eq!(out.logs.len(), n_rounds + 1);
        for log in &out.logs {
            // M_k = k + 2 when ln Ω = 1, for every agent.
            let expect = log.round as u64 + 2;
            for c in &log.per_agent {
                assert_eq!(c.samples, expect);
            }
        }
        let loop_total: u64 = out.logs[1..].iter().map(|l| l.totals.samples).sum();
        let n = n_rounds as u64;
        assert_eq!(loop_total, 2 * (n * (n + 1) / 2 + 2 * n));
    }

    #[test]
    fn determinism_and_quantized_bit_savings() {
        let problem = finite_problem(3, 10, 0.5);
        let graph = generate_graph(GraphKind::Cycle, 3, 0).unwrap();
        let s = settings(Mode::Quantized, BatchRule::Fixed { m1: 2, m2: 4 }, 4, 11);

        let out_a = NetworkRun::new(problem.clone(), graph.clone(), s).unwrap().run().unwrap();
        let out_b = NetworkRun::new(problem.clone(), graph.clone(), s).unwrap().run().unwrap();
        assert_eq!(out_a.p_hats, out_b.p_hats);
        assert_eq!(out_a.etas, out_b.etas);
        for (la, lb) in out_a.logs.iter().zip(&out_b.logs) {
            assert_eq!(la.per_agent, lb.per_agent);
            assert_eq!(la.gap.gap_w, lb.gap.gap_w);
            assert_eq!(la.dual_estimate, lb.dual_estimate);
        }

        // M₂ = 4 < n = 10: quantized messages must be cheaper than dense.
        let dense = NetworkRun::new(
            problem,
            graph,
            settings(Mode::SampledOnly, BatchRule::Fixed { m1: 2, m2: 4 }, 4, 11),
        )
        .unwrap()
        .run()
        .unwrap();
        let bits_q: u64 = out_a.logs.iter().map(|l| l.totals.bits).sum();
        let bits_d: u64 = dense.logs.iter().map(|l| l.totals.bits).sum();
        assert!(bits_q < bits_d, "{bits_q} >= {bits_d}");
    }

    #[test]
    fn p_hat_stays_on_simplex() {
        let problem = finite_problem(3, 5, 0.4);
        let graph = generate_graph(GraphKind::Path, 3, 0).unwrap();
        let mut net = NetworkRun::new(
            problem,
            graph,
            settings(Mode::Quantized, BatchRule::Fixed { m1: 2, m2: 2 }, 8, 13),
        )
        .unwrap();
        net.initialize().unwrap();
        for _ in 0..8 {
            net.step_round().unwrap();
            for agent in net.agents() {
                let sum: f64 = agent.p_hat.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(agent.p_hat.iter().all(|&p| p >= -1e-12));
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_settings() {
        let problem = finite_problem(2, 3, 0.5);
        let graph = generate_graph(GraphKind::Complete, 2, 0).unwrap();

        let mut s = settings(Mode::Quantized, BatchRule::Fixed { m1: 0, m2: 1 }, 1, 0);
        assert!(NetworkRun::new(problem.clone(), graph.clone(), s).is_err());

        s = settings(Mode::Quantized, BatchRule::Auto, 1, 0);
        s.record_stride = 0;
        assert!(NetworkRun::new(problem.clone(), graph.clone(), s).is_err());

        s = settings(Mode::Quantized, BatchRule::Auto, 1, 0);
        s.case = Case::B;
        assert!(NetworkRun::new(problem.clone(), graph.clone(), s).is_err());

        // Exact mode with a sampler-only measure is invalid.
        let grid = SupportGrid::regular_1d(3, 0.0, 1.0).unwrap();
        let domain = Domain::unit(1);
        let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
        let gaussians = vec![
            Measure::Gaussian { mean: [0.3, 0.0], std: 0.1 },
            Measure::Gaussian { mean: [0.7, 0.0], std: 0.1 },
        ];
        let gp = BarycenterProblem::new(
            grid,
            cost,
            gaussians,
            0.5,
            OmegaSpec::LnOmega(1.0),
            &domain,
            None,
        )
        .unwrap();
        let s = settings(Mode::Exact, BatchRule::Fixed { m1: 1, m2: 1 }, 1, 0);
        assert!(NetworkRun::new(gp, graph.clone(), s).is_err());

        // Graph/measure count mismatch.
        let p3 = finite_problem(3, 3, 0.5);
        let s = settings(Mode::Quantized, BatchRule::Auto, 1, 0);
        assert!(NetworkRun::new(p3, graph, s).is_err());
    }

    #[test]
    fn csv_shapes() {
        let problem = finite_problem(2, 3, 0.5);
        let graph = generate_graph(GraphKind::Complete, 2, 0).unwrap();
        let mut net = NetworkRun::new(
            problem,
            graph,
            settings(Mode::Quantized, BatchRule::Auto, 2, 3),
        )
        .unwrap();
        let out = net.run().unwrap();

        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &out.logs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Header + 3 rounds × (2 agents + total).
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert_eq!(
            lines[0],
            "round,agent,samples,coords_sent,bits_sent,consensus_gap_w,consensus_gap_max,dual_estimate"
        );
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[3].starts_with("0,total,"));
        // Agent rows leave the three metric cells empty.
        assert_eq!(lines[1].matches(',').count(), 7);
        assert!(lines[1].ends_with(",,,"));

        let mut buf = Vec::new();
        write_barycenters_csv(&mut buf, net.problem().grid(), &out.p_hats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3);
        assert_eq!(lines[0], "x,y,agent_0,agent_1,average");
    }

    #[test]
    fn stride_keeps_first_and_last() {
        let problem = finite_problem(2, 3, 0.5);
        let graph = generate_graph(GraphKind::Complete, 2, 0).unwrap();
        let mut s = settings(Mode::Quantized, BatchRule::Auto, 5, 3);
        s.record_stride = 2;
        let mut net = NetworkRun::new(problem, graph, s).unwrap();
        let out = net.run().unwrap();
        let rounds: Vec<usize> = out.logs.iter().map(|l| l.round).collect();
        assert_eq!(rounds, vec![0, 2, 4, 5]);
    }
}
