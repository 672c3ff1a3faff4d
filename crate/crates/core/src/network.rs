//! Chain-level orchestration: herald sweeps, pipelined cycles, per-hop
//! purification, swap cascades and frame propagation.
//!
//! The clock sits at node 0. Every `cycle_period` a herald leaves node 0 and
//! sweeps right, firing each node's fusillade as it passes. The next herald
//! collects the frame records produced by the previous cycle's swaps and
//! delivers them to the right end node.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::algebra::{
    chain_fidelity, purify3_analytic, purify3_apply, success_probability, swap_apply, Fidelity, LinkModel, PairRecord,
    PauliFrame, PurifyOutcomes,
};
use crate::engine::{self, Channel, Draws, Event, EventKind, EventQueue, Handler, Nanos, RngStream, StreamKind, TraceRecord};
use crate::error::{Error, Result};
use crate::protocol::{fold_records, FrameRecord, HeraldMessage, NodeState, SignalOutcome, SwapAction};

fn default_signal_speed() -> f64 {
    engine::DEFAULT_SIGNAL_SPEED_M_PER_S
}

fn default_tau_slot_ns() -> u64 {
    10
}

fn default_granularity_ns() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDescriptor {
    pub name: String,
}

/// One hop: the link model plus the fusillade and fusiland counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, rename = "L0_km", skip_serializing_if = "Option::is_none")]
    pub l0_km: Option<f64>,
    pub raw_fidelity: Fidelity,
    pub n_fusiliers: u32,
    pub m_fusilands: u32,
}

impl LinkConfig {
    pub fn new(model: LinkModel, n_fusiliers: u32, m_fusilands: u32) -> Self {
        LinkConfig {
            length_km: model.length_km,
            p_success: model.p_success,
            p0: model.p0,
            l0_km: model.l0_km,
            raw_fidelity: model.raw_fidelity,
            n_fusiliers,
            m_fusilands,
        }
    }

    pub fn model(&self) -> LinkModel {
        LinkModel {
            length_km: self.length_km,
            p_success: self.p_success,
            p0: self.p0,
            l0_km: self.l0_km,
            raw_fidelity: self.raw_fidelity,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Raw,
    /// Three raw links per hop are purified into one before swapping.
    #[serde(rename = "purify3_per_hop")]
    Purify3PerHop,
}

impl Strategy {
    /// Raw links consumed per usable link.
    pub fn group_size(self) -> usize {
        match self {
            Strategy::Raw => 1,
            Strategy::Purify3PerHop => 3,
        }
    }
}

/// Declarative description of a linear chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub nodes: Vec<NodeDescriptor>,
    pub links: Vec<LinkConfig>,
    #[serde(default = "default_signal_speed")]
    pub signal_speed_m_per_s: f64,
    #[serde(default = "default_tau_slot_ns")]
    pub tau_slot_ns: u64,
    #[serde(default)]
    pub proc_ns: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    pub cycles: u64,
    #[serde(default)]
    pub butterfly: bool,
    #[serde(default = "default_granularity_ns")]
    pub clock_granularity_ns: u64,
    /// Forces the herald period instead of deriving it. A value below the
    /// safe period makes the run abort with a desynchronization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_period_ns: Option<u64>,
}

impl NetworkConfig {
    /// Equally spaced chain with identical hops and default timing.
    pub fn uniform(hops: usize, link: LinkConfig, cycles: u64, seed: u64) -> Self {
        NetworkConfig {
            nodes: (0..=hops).map(|i| NodeDescriptor { name: format!("node{i}") }).collect(),
            links: vec![link; hops],
            signal_speed_m_per_s: default_signal_speed(),
            tau_slot_ns: default_tau_slot_ns(),
            proc_ns: 0,
            strategy: Strategy::Raw,
            seed,
            cycles,
            butterfly: false,
            clock_granularity_ns: default_granularity_ns(),
            cycle_period_ns: None,
        }
    }

    pub fn hops(&self) -> usize {
        self.links.len()
    }

    fn channel(&self, hop: usize) -> Channel {
        Channel {
            from_node: hop,
            to_node: hop + 1,
            length_km: self.links[hop].length_km,
            signal_speed: self.signal_speed_m_per_s,
        }
    }

    /// Per-hop fidelity of the links that enter the swap cascade.
    pub fn hop_fidelities(&self) -> Vec<Fidelity> {
        self.links
            .iter()
            .map(|l| match self.strategy {
                Strategy::Raw => l.raw_fidelity,
                Strategy::Purify3PerHop => purify3_analytic(l.raw_fidelity),
            })
            .collect()
    }

    /// Closed-form fidelity of an end-to-end pair.
    pub fn analytic_end_fidelity(&self) -> Result<Fidelity> {
        chain_fidelity(&self.hop_fidelities())
    }
}

/// Timing derived from a validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSchedule {
    pub cycle_period: Nanos,
    /// Smallest period at which every node finishes before the next herald.
    pub required_period: Nanos,
    /// One-way delay per hop.
    pub one_way: Vec<Nanos>,
    /// Herald arrival per node, relative to the cycle start at node 0.
    pub herald_offsets: Vec<Nanos>,
    /// Latest swap completion per node, relative to its herald arrival.
    pub swap_bounds: Vec<Nanos>,
    /// Offset from cycle start by which every swap of the cycle is done.
    pub ready_offset: Nanos,
    /// End-to-end pairs a cycle can yield at most.
    pub links_per_cycle: usize,
    pub warnings: Vec<String>,
}

fn round_up(value: u64, granularity: u64) -> u64 {
    value.div_ceil(granularity) * granularity
}

/// Checks a configuration and derives its cycle schedule.
pub fn validate(config: &NetworkConfig) -> Result<CycleSchedule> {
    let cfg_err = |msg: String| Err(Error::Config(msg));
    if config.nodes.len() < 2 {
        return cfg_err(format!("need at least 2 nodes, got {}", config.nodes.len()));
    }
    if config.links.len() != config.nodes.len() - 1 {
        return cfg_err(format!(
            "{} nodes need {} links, got {}",
            config.nodes.len(),
            config.nodes.len() - 1,
            config.links.len()
        ));
    }
    if config.clock_granularity_ns == 0 {
        return cfg_err("clock_granularity_ns must be positive".into());
    }
    if config.cycle_period_ns == Some(0) {
        return cfg_err("cycle_period_ns must be positive".into());
    }
    if config.nodes.len() > 1 << 16 {
        return cfg_err("at most 65536 nodes are supported".into());
    }

    let mut warnings = Vec::new();
    let tau = config.tau_slot_ns;
    let mut one_way = Vec::with_capacity(config.hops());
    for (hop, link) in config.links.iter().enumerate() {
        let at = |msg: String| Error::Config(format!("links[{hop}]: {msg}"));
        if !(link.length_km.is_finite() && link.length_km > 0.0) {
            return Err(at(format!("length_km must be positive, got {}", link.length_km)));
        }
        success_probability(&link.model()).map_err(|e| at(e.to_string()))?;
        if link.n_fusiliers == 0 || link.m_fusilands == 0 {
            return Err(at("n_fusiliers and m_fusilands must be positive".into()));
        }
        if link.m_fusilands > link.n_fusiliers {
            return Err(at(format!(
                "m_fusilands = {} exceeds n_fusiliers = {}",
                link.m_fusilands, link.n_fusiliers
            )));
        }
        if config.strategy == Strategy::Purify3PerHop && link.m_fusilands % 3 != 0 {
            return Err(at(format!(
                "m_fusilands = {} is not a multiple of 3 as purify3_per_hop requires",
                link.m_fusilands
            )));
        }
        if link.raw_fidelity.value() <= 0.5 {
            warnings.push(format!(
                "links[{hop}]: raw_fidelity {} does not exceed 0.5; purification cannot help",
                link.raw_fidelity
            ));
        }
        one_way.push(config.channel(hop).delay_ns().map_err(|e| at(e.to_string()))?);
    }

    let hop_period = |hop: usize| {
        one_way[hop] * 2 + Nanos(u64::from(config.links[hop].n_fusiliers) * tau) + Nanos(config.proc_ns)
    };
    let required = (0..config.hops()).map(hop_period).max().unwrap_or_default();
    let required_period = Nanos(round_up(required.0, config.clock_granularity_ns));
    let cycle_period = match config.cycle_period_ns {
        Some(p) => {
            if p < required_period.0 {
                warnings.push(format!(
                    "cycle_period_ns = {p} is below the safe period {}; the run will desynchronize",
                    required_period.0
                ));
            }
            Nanos(p)
        }
        None => required_period,
    };

    let mut herald_offsets = vec![Nanos::ZERO];
    for d in &one_way {
        let last = *herald_offsets.last().expect("non-empty");
        herald_offsets.push(last + *d);
    }
    let nodes = config.nodes.len();
    let swap_bounds: Vec<Nanos> = (0..nodes)
        .map(|j| {
            // Last signal of the incoming train, and the return from the right.
            let left = if j > 0 {
                Nanos((u64::from(config.links[j - 1].n_fusiliers) - 1) * tau)
            } else {
                Nanos::ZERO
            };
            let right = if j + 1 < nodes { hop_period(j) } else { Nanos::ZERO };
            left.max(right)
        })
        .collect();
    let ready_offset = (0..nodes)
        .map(|j| herald_offsets[j] + swap_bounds[j])
        .max()
        .unwrap_or_default();
    let group = config.strategy.group_size();
    let links_per_cycle = config
        .links
        .iter()
        .map(|l| l.m_fusilands as usize / group)
        .min()
        .unwrap_or(0);

    Ok(CycleSchedule {
        cycle_period,
        required_period,
        one_way,
        herald_offsets,
        swap_bounds,
        ready_offset,
        links_per_cycle,
        warnings,
    })
}

/// Intermediate node that best balances the one-way delay on either side.
/// Ties go to the lower index.
pub fn butterfly_split(config: &NetworkConfig) -> Result<usize> {
    if config.nodes.len() < 3 {
        return Err(Error::Config(format!(
            "a butterfly split needs at least 3 nodes, got {}",
            config.nodes.len()
        )));
    }
    let schedule = validate(config)?;
    let total = *schedule.herald_offsets.last().expect("non-empty");
    let split = (1..config.nodes.len() - 1)
        .min_by_key(|&j| {
            let left = schedule.herald_offsets[j];
            let right = total - left;
            (left.0.abs_diff(right.0), j)
        })
        .expect("at least one intermediate node");
    Ok(split)
}

/// Sweeps a herald across `nodes` in order, collecting every pending frame
/// record. The simulator performs the same step node by node as the herald
/// arrives.
pub fn propagate_frames(nodes: &mut [NodeState], mut herald: HeraldMessage) -> HeraldMessage {
    for node in nodes {
        herald.frame_payload.append(&mut node.pending_frame);
    }
    herald
}

/// One established end-to-end pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndRecord {
    pub cycle: u64,
    pub slot: usize,
    pub pair: PairRecord,
    pub established_at: Nanos,
    /// When the right end holds every frame record it needs.
    pub frame_available_at: Nanos,
    /// XOR-fold of all frame records for this pair.
    pub correction: PauliFrame,
    /// Butterfly only: when the left half's records reach the left end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_frame_available_at: Option<Nanos>,
}

impl EndToEndRecord {
    /// The pair's bit flip after the folded correction is applied.
    pub fn corrected_error(&self) -> bool {
        self.pair.physical_flip() ^ self.correction.x
    }
}

/// Per-hop outcome of one cycle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HopCycle {
    /// Fusilier ids that entangled a fusiland, in firing order.
    pub matched: Vec<u32>,
    pub failures: u32,
    pub discarded: u32,
}

impl HopCycle {
    pub fn successes(&self) -> usize {
        self.matched.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub schedule: CycleSchedule,
    pub split: Option<usize>,
    pub records: Vec<EndToEndRecord>,
    /// `hop_cycles[hop][cycle]`.
    pub hop_cycles: Vec<Vec<HopCycle>>,
    pub events: u64,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Cycle { cycle: u64 },
    Herald(HeraldMessage),
    Signal { cycle: u64, hop: usize, fusilier: usize },
    Return { cycle: u64, hop: usize },
    Swap { cycle: u64, swaps: usize },
    Ready { cycle: u64 },
}

struct HopRuntime {
    p: f64,
    fidelity: Fidelity,
    n: usize,
    signal_draws: Option<Draws>,
    mailbox: HashMap<u64, (crate::protocol::ReturnMessage, Vec<PairRecord>)>,
}

struct Established {
    slot: usize,
    pair: PairRecord,
}

struct Chain<'a> {
    config: &'a NetworkConfig,
    schedule: &'a CycleSchedule,
    streams: RngStream,
    nodes: Vec<NodeState>,
    hops: Vec<HopRuntime>,
    split: Option<usize>,
    tracing: bool,
    /// Live segments per `(cycle, slot)`, keyed by their left node.
    segments: BTreeMap<(u64, usize), BTreeMap<usize, PairRecord>>,
    /// Herald payloads that reached the right end, by herald cycle.
    delivered: HashMap<u64, Vec<FrameRecord>>,
    /// Butterfly: records relayed to the left end, with arrival times.
    leftward: HashMap<u64, Vec<(FrameRecord, Nanos)>>,
    awaiting: HashMap<u64, Vec<Established>>,
    records: Vec<EndToEndRecord>,
    hop_cycles: Vec<Vec<HopCycle>>,
}

impl Chain<'_> {
    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn routes_left(&self, node: usize) -> bool {
        self.split.is_some_and(|s| node < s)
    }

    fn emit_record(&mut self, record: FrameRecord) {
        if self.routes_left(record.node) {
            let arrival = Nanos(record.at_ns) + self.schedule.herald_offsets[record.node];
            self.leftward.entry(record.cycle).or_default().push((record, arrival));
        } else {
            self.nodes[record.node].pending_frame.push(record);
        }
    }

    fn herald_at(&mut self, node: usize, mut herald: HeraldMessage, now: Nanos, queue: &mut EventQueue<Payload>) -> Result<String> {
        let tau = Nanos(self.config.tau_slot_ns);
        let emissions = self.nodes[node].on_herald(&mut herald, now, tau)?;
        let cycle = herald.cycle;
        let flush = herald.flush;
        let carried = herald.frame_payload.len();

        if node == self.last() {
            self.delivered.insert(cycle, herald.frame_payload);
            let cycle_start = self.schedule.cycle_period * cycle;
            queue.schedule(cycle_start + self.schedule.ready_offset, EventKind::PairReady, node, Payload::Ready { cycle })?;
        } else {
            let delay = self.schedule.one_way[node];
            queue.schedule(now + delay, EventKind::HeraldArrive, node + 1, Payload::Herald(herald))?;
            for emission in &emissions {
                queue.schedule(
                    emission.at + delay,
                    EventKind::SignalArrive,
                    node + 1,
                    Payload::Signal {
                        cycle,
                        hop: node,
                        fusilier: emission.fusilier,
                    },
                )?;
            }
            if !flush {
                // The return's arrival time does not depend on its content, so
                // it is scheduled now and filled from the mailbox later.
                let link = &self.config.links[node];
                let back = delay * 2 + tau * u64::from(link.n_fusiliers) + Nanos(self.config.proc_ns);
                queue.schedule(now + back, EventKind::ReturnArrive, node, Payload::Return { cycle, hop: node })?;
            }
        }
        Ok(self.detail(|| format!("cycle={cycle} flush={flush} frames={carried} fired={}", emissions.len())))
    }

    fn detail(&self, f: impl FnOnce() -> String) -> String {
        if self.tracing {
            f()
        } else {
            String::new()
        }
    }

    fn on_signal(&mut self, cycle: u64, hop: usize, fusilier: usize, now: Nanos, queue: &mut EventQueue<Payload>) -> Result<String> {
        let node = hop + 1;
        if fusilier == 0 {
            self.hops[hop].signal_draws = Some(self.streams.substream(StreamKind::Signal, hop, cycle));
        }
        let runtime = &mut self.hops[hop];
        let draws = runtime
            .signal_draws
            .as_mut()
            .ok_or_else(|| Error::Protocol(format!("hop {hop} signal arrived before its train started")))?;
        let (success_draw, fidelity_draw) = (draws.uniform(), draws.uniform());
        let (p, fidelity, n) = (runtime.p, runtime.fidelity, runtime.n);
        let (outcome, _) =
            self.nodes[node].on_signal(cycle, fusilier, hop, p, fidelity, success_draw, fidelity_draw, now)?;

        let stats = &mut self.hop_cycles[hop];
        if stats.len() as u64 == cycle {
            stats.push(HopCycle::default());
        }
        let entry = stats.last_mut().expect("pushed");
        match outcome {
            SignalOutcome::Success { .. } => entry.matched.push(fusilier as u32),
            SignalOutcome::Failure => entry.failures += 1,
            SignalOutcome::Discarded => entry.discarded += 1,
        }

        let mut detail = self.detail(|| format!("cycle={cycle} hop={hop} fusilier={fusilier} outcome={outcome:?}"));
        if fusilier + 1 == n {
            self.hops[hop].signal_draws = None;
            let summary = self.finish_train(cycle, hop, now, queue)?;
            if self.tracing {
                let _ = write!(detail, "; {summary}");
            }
        }
        Ok(detail)
    }

    fn finish_train(&mut self, cycle: u64, hop: usize, now: Nanos, queue: &mut EventQueue<Payload>) -> Result<String> {
        let node = hop + 1;
        let n = self.hops[hop].n;
        self.nodes[node].finish_train(cycle, n)?;
        let raw = std::mem::take(&mut self.nodes[node].left_links);
        let raw_count = raw.len();

        let (links, corrections) = match self.config.strategy {
            Strategy::Raw => (raw, Vec::new()),
            Strategy::Purify3PerHop => {
                let mut draws = self.streams.substream(StreamKind::Purify, hop, cycle);
                let mut links = Vec::with_capacity(raw.len() / 3);
                let mut corrections = Vec::with_capacity(raw.len() / 3);
                for (slot, triple) in raw.chunks_exact(3).enumerate() {
                    let triple: &[PairRecord; 3] = triple.try_into().expect("chunk of three");
                    let outcomes = PurifyOutcomes::consistent_with(
                        triple,
                        draws.bit(),
                        draws.bit(),
                        [draws.bit(), draws.bit(), draws.bit(), draws.bit()],
                    );
                    let kept = purify3_apply(triple, &outcomes)?;
                    corrections.push(FrameRecord {
                        cycle,
                        node: hop,
                        slot,
                        frame: kept.frame ^ triple[0].frame,
                        at_ns: now.0,
                    });
                    links.push(kept);
                }
                (links, corrections)
            }
        };

        for (slot, link) in links.iter().enumerate() {
            self.segments.entry((cycle, slot)).or_default().insert(hop, *link);
        }
        self.nodes[node].left_links = links.clone();
        let mut message = self.nodes[node].build_return_message(cycle)?;
        message.corrections = corrections;
        let kept = links.len();
        self.hops[hop].mailbox.insert(cycle, (message, links));

        let swapped = self.complete_node(node, cycle, now, queue, |node, draws| node.try_complete(draws))?;
        Ok(format!("train done raw={raw_count} kept={kept}{swapped}"))
    }

    fn on_return(&mut self, cycle: u64, hop: usize, now: Nanos, queue: &mut EventQueue<Payload>) -> Result<String> {
        let (message, links) = self.hops[hop]
            .mailbox
            .remove(&cycle)
            .ok_or_else(|| Error::Protocol(format!("hop {hop} return for cycle {cycle} was never dispatched")))?;
        let matches = message.matches.len();
        let swapped = self.complete_node(hop, cycle, now, queue, |node, draws| node.on_return(&message, links, draws))?;
        if self.routes_left(hop) {
            let records: Vec<FrameRecord> = self.nodes[hop].pending_frame.drain(..).collect();
            for record in records {
                self.emit_record(record);
            }
        }
        Ok(self.detail(|| format!("cycle={cycle} hop={hop} matches={matches}{swapped}")))
    }

    /// Runs a node step that may complete its cycle and applies any swaps.
    fn complete_node(
        &mut self,
        node: usize,
        cycle: u64,
        now: Nanos,
        queue: &mut EventQueue<Payload>,
        step: impl FnOnce(&mut NodeState, &mut Draws) -> Result<Vec<SwapAction>>,
    ) -> Result<String> {
        let mut draws = self.streams.substream(StreamKind::Swap, node, cycle);
        let was_closed = self.nodes[node].is_closed();
        let swaps = step(&mut self.nodes[node], &mut draws)?;
        let completed = !was_closed && self.nodes[node].is_closed();
        if !completed {
            return Ok(String::new());
        }
        let intermediate = node > 0 && node < self.last();
        for action in &swaps {
            self.apply_swap(node, cycle, action, now)?;
        }
        if intermediate {
            queue.schedule(now, EventKind::SwapComplete, node, Payload::Swap { cycle, swaps: swaps.len() })?;
        }
        Ok(format!(" swaps={}", swaps.len()))
    }

    fn apply_swap(&mut self, node: usize, cycle: u64, action: &SwapAction, now: Nanos) -> Result<()> {
        let segments = self.segments.get_mut(&(cycle, action.slot)).ok_or_else(|| {
            Error::Protocol(format!("no segments for cycle {cycle} slot {}", action.slot))
        })?;
        let left_key = segments
            .iter()
            .find(|(_, seg)| seg.right.node == node)
            .map(|(&k, _)| k)
            .ok_or_else(|| Error::Protocol(format!("node {node} has no left segment in slot {}", action.slot)))?;
        let left = segments.remove(&left_key).expect("found");
        let right = segments
            .remove(&node)
            .ok_or_else(|| Error::Protocol(format!("node {node} has no right segment in slot {}", action.slot)))?;
        let merged = swap_apply(&left, &right, action.parity, action.x_readout)?;
        segments.insert(merged.left.node, merged);
        self.emit_record(FrameRecord {
            cycle,
            node,
            slot: action.slot,
            frame: PauliFrame::new(action.parity, action.x_readout),
            at_ns: now.0,
        });
        Ok(())
    }

    fn on_ready(&mut self, cycle: u64, now: Nanos) -> Result<String> {
        let last = self.last();
        let mut established = 0;
        if cycle < self.config.cycles {
            let mut done = Vec::new();
            for slot in 0..self.schedule.links_per_cycle {
                if let Some(segments) = self.segments.remove(&(cycle, slot)) {
                    if let Some(pair) = segments.get(&0).filter(|p| p.right.node == last) {
                        done.push(Established { slot, pair: *pair });
                    }
                }
            }
            // Any other segments of this cycle are partial chains; retire them.
            self.segments.retain(|&(c, _), _| c != cycle);
            established = done.len();
            self.awaiting.insert(cycle, done);
        }

        let mut finalized = 0;
        if cycle > 0 {
            let previous = cycle - 1;
            let payload = self.delivered.remove(&cycle).unwrap_or_default();
            let leftward = self.leftward.remove(&previous).unwrap_or_default();
            let established_at = self.schedule.cycle_period * previous + self.schedule.ready_offset;
            for Established { slot, pair } in self.awaiting.remove(&previous).unwrap_or_default() {
                let right_fold = fold_records(&payload, previous, slot);
                let left: Vec<&(FrameRecord, Nanos)> = leftward.iter().filter(|(r, _)| r.slot == slot).collect();
                let left_fold: PauliFrame = left.iter().map(|(r, _)| r.frame).collect();
                let left_frame_available_at = if self.split.is_some() {
                    left.iter().map(|&&(_, at)| at).max()
                } else {
                    None
                };
                self.records.push(EndToEndRecord {
                    cycle: previous,
                    slot,
                    pair,
                    established_at,
                    frame_available_at: now,
                    correction: right_fold ^ left_fold,
                    left_frame_available_at,
                });
                finalized += 1;
            }
        }
        Ok(self.detail(|| format!("cycle={cycle} established={established} finalized={finalized}")))
    }
}

impl Handler<Payload> for Chain<'_> {
    fn handle(&mut self, event: &Event<Payload>, queue: &mut EventQueue<Payload>) -> Result<String> {
        let now = event.time;
        match &event.payload {
            Payload::Cycle { cycle } => {
                let cycle = *cycle;
                let herald = if cycle < self.config.cycles {
                    HeraldMessage::new(cycle)
                } else {
                    HeraldMessage::flush(cycle)
                };
                let detail = self.herald_at(0, herald, now, queue)?;
                if cycle < self.config.cycles {
                    queue.schedule(now + self.schedule.cycle_period, EventKind::CycleStart, 0, Payload::Cycle { cycle: cycle + 1 })?;
                }
                Ok(detail)
            }
            Payload::Herald(herald) => self.herald_at(event.node, herald.clone(), now, queue),
            Payload::Signal { cycle, hop, fusilier } => self.on_signal(*cycle, *hop, *fusilier, now, queue),
            Payload::Return { cycle, hop } => self.on_return(*cycle, *hop, now, queue),
            Payload::Swap { cycle, swaps } => Ok(self.detail(|| format!("cycle={cycle} swaps={swaps}"))),
            Payload::Ready { cycle } => self.on_ready(*cycle, now),
        }
    }
}

/// Runs the configured number of cycles plus one frame-only flush sweep.
pub fn run_network(config: &NetworkConfig) -> Result<RunOutput> {
    run_network_with(config, RunOptions::default())
}

pub fn run_network_with(config: &NetworkConfig, options: RunOptions) -> Result<RunOutput> {
    let schedule = validate(config)?;
    let split = if config.butterfly { Some(butterfly_split(config)?) } else { None };
    let nodes = config.nodes.len();
    let node_states = (0..nodes)
        .map(|j| {
            let n_right = if j + 1 < nodes { config.links[j].n_fusiliers as usize } else { 0 };
            let m_left = if j > 0 { config.links[j - 1].m_fusilands as usize } else { 0 };
            NodeState::new(j, n_right, m_left)
        })
        .collect();
    let hops = config
        .links
        .iter()
        .map(|link| {
            Ok(HopRuntime {
                p: success_probability(&link.model())?,
                fidelity: link.raw_fidelity,
                n: link.n_fusiliers as usize,
                signal_draws: None,
                mailbox: HashMap::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut chain = Chain {
        config,
        schedule: &schedule,
        streams: RngStream::new(config.seed),
        nodes: node_states,
        hops,
        split,
        tracing: options.trace,
        segments: BTreeMap::new(),
        delivered: HashMap::new(),
        leftward: HashMap::new(),
        awaiting: HashMap::new(),
        records: Vec::new(),
        hop_cycles: vec![Vec::with_capacity(config.cycles as usize); config.hops()],
    };

    let mut queue = EventQueue::new();
    queue.schedule(Nanos::ZERO, EventKind::CycleStart, 0, Payload::Cycle { cycle: 0 })?;
    let mut events = 0u64;
    let trace = {
        let mut counter = Counting {
            inner: &mut chain,
            count: &mut events,
        };
        engine::run(&mut queue, &mut counter, Nanos(u64::MAX), options.trace)?
    };

    Ok(RunOutput {
        split,
        records: chain.records,
        hop_cycles: chain.hop_cycles,
        events,
        trace,
        schedule,
    })
}

struct Counting<'a, 'b> {
    inner: &'a mut Chain<'b>,
    count: &'a mut u64,
}

impl Handler<Payload> for Counting<'_, '_> {
    fn handle(&mut self, event: &Event<Payload>, queue: &mut EventQueue<Payload>) -> Result<String> {
        *self.count += 1;
        self.inner.handle(event, queue)
    }
}

/// Events a run dispatches: per cycle one cycle start, a herald arrival per
/// non-origin node, every signal, one return per hop, one swap notification
/// per intermediate node and one pair-ready tick; the flush sweep adds the
/// start, the herald arrivals and the final tick.
pub fn expected_event_count(config: &NetworkConfig) -> u64 {
    let nodes = config.nodes.len() as u64;
    let signals: u64 = config.links.iter().map(|l| u64::from(l.n_fusiliers)).sum();
    let per_cycle = 1 + (nodes - 1) + signals + (nodes - 1) + (nodes - 2) + 1;
    per_cycle * config.cycles + (1 + (nodes - 1) + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(km: f64, p: f64, f: f64, n: u32, m: u32) -> LinkConfig {
        LinkConfig::new(LinkModel::explicit(km, p, Fidelity::new(f).unwrap()), n, m)
    }

    fn chain(hops: &[f64], p: f64, f: f64, n: u32, m: u32, cycles: u64) -> NetworkConfig {
        let mut cfg = NetworkConfig::uniform(hops.len(), link(1.0, p, f, n, m), cycles, 7);
        for (l, km) in cfg.links.iter_mut().zip(hops) {
            l.length_km = *km;
        }
        cfg
    }

    #[test]
    fn forty_km_period() {
        let mut cfg = chain(&[40.0], 1.0, 1.0, 1, 1, 1);
        cfg.tau_slot_ns = 0;
        assert_eq!(validate(&cfg).unwrap().cycle_period, Nanos(400_000));
    }

    #[test]
    fn slowest_hop_governs() {
        let mut cfg = chain(&[10.0, 40.0], 1.0, 1.0, 1, 1, 1);
        cfg.tau_slot_ns = 0;
        assert_eq!(validate(&cfg).unwrap().cycle_period, Nanos(400_000));
    }

    #[test]
    fn signal_train_adds_to_the_period() {
        let cfg = chain(&[40.0], 1.0, 1.0, 100, 1, 1);
        assert_eq!(validate(&cfg).unwrap().cycle_period, Nanos(401_000));
    }

    #[test]
    fn granularity_rounds_up() {
        let mut cfg = chain(&[40.0], 1.0, 1.0, 3, 1, 1);
        cfg.clock_granularity_ns = 1000;
        assert_eq!(validate(&cfg).unwrap().cycle_period, Nanos(401_000));
    }

    #[test]
    fn validator_rejections() {
        let mut purify = chain(&[10.0], 1.0, 0.9, 4, 2, 1);
        purify.strategy = Strategy::Purify3PerHop;
        assert!(matches!(validate(&purify), Err(Error::Config(m)) if m.contains("multiple of 3")));

        let mut lonely = chain(&[10.0], 1.0, 0.9, 1, 1, 1);
        lonely.nodes.pop();
        lonely.links.clear();
        assert!(validate(&lonely).is_err());

        let zero = chain(&[0.0], 1.0, 0.9, 1, 1, 1);
        assert!(validate(&zero).is_err());

        let overfull = chain(&[10.0], 1.0, 0.9, 1, 2, 1);
        assert!(validate(&overfull).is_err());
    }

    #[test]
    fn low_fidelity_warns() {
        let cfg = chain(&[10.0], 1.0, 0.4, 1, 1, 1);
        assert_eq!(validate(&cfg).unwrap().warnings.len(), 1);
    }

    #[test]
    fn split_examples() {
        assert_eq!(butterfly_split(&chain(&[10.0; 4], 1.0, 1.0, 1, 1, 1)).unwrap(), 2);
        assert_eq!(butterfly_split(&chain(&[10.0, 10.0, 40.0], 1.0, 1.0, 1, 1, 1)).unwrap(), 2);
        assert_eq!(butterfly_split(&chain(&[5.0, 30.0], 1.0, 1.0, 1, 1, 1)).unwrap(), 1);
        assert!(butterfly_split(&chain(&[5.0], 1.0, 1.0, 1, 1, 1)).is_err());
        // Equal imbalance on both candidates resolves to the lower index.
        assert_eq!(butterfly_split(&chain(&[10.0, 10.0, 10.0], 1.0, 1.0, 1, 1, 1)).unwrap(), 1);
    }

    #[test]
    fn perfect_links_give_one_pair_per_cycle() {
        let out = run_network(&chain(&[10.0, 10.0], 1.0, 1.0, 1, 1, 20)).unwrap();
        assert_eq!(out.records.len(), 20);
        assert!(out.records.iter().all(|r| !r.pair.x_error && !r.corrected_error()));
        assert!(out.records.iter().all(|r| r.pair.left.node == 0 && r.pair.right.node == 2));
    }

    #[test]
    fn zero_probability_gives_nothing() {
        let out = run_network(&chain(&[10.0], 0.0, 1.0, 4, 1, 10)).unwrap();
        assert!(out.records.is_empty());
        assert!(out.hop_cycles[0].iter().all(|h| h.successes() == 0 && h.failures == 4));
    }

    #[test]
    fn event_count_matches_formula() {
        for (hops, n, m) in [(vec![10.0], 3, 1), (vec![10.0, 20.0, 5.0], 4, 2)] {
            let cfg = chain(&hops, 0.5, 0.9, n, m, 13);
            let out = run_network(&cfg).unwrap();
            assert_eq!(out.events, expected_event_count(&cfg));
        }
    }

    #[test]
    fn frames_fold_to_the_pair_frame() {
        let mut cfg = chain(&[10.0, 20.0, 15.0, 10.0], 0.6, 0.9, 9, 6, 200);
        cfg.strategy = Strategy::Purify3PerHop;
        let out = run_network(&cfg).unwrap();
        assert!(!out.records.is_empty());
        for r in &out.records {
            assert_eq!(r.correction, r.pair.frame);
            assert_eq!(r.corrected_error(), r.pair.x_error);
        }
    }

    #[test]
    fn frame_latency_is_one_period() {
        let cfg = chain(&[10.0, 30.0, 20.0], 0.7, 0.95, 6, 2, 150);
        let out = run_network(&cfg).unwrap();
        let period = out.schedule.cycle_period;
        for r in &out.records {
            assert_eq!(r.frame_available_at - r.established_at, period);
        }
    }

    #[test]
    fn short_period_desynchronizes() {
        let mut cfg = chain(&[10.0, 40.0], 1.0, 1.0, 1, 1, 5);
        cfg.cycle_period_ns = Some(150_000);
        let err = run_network(&cfg).unwrap_err();
        assert!(err.is_desync());
        match err.root() {
            Error::Desync { hop, .. } => assert_eq!(*hop, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn purified_pairs_carry_the_purified_fidelity() {
        let mut cfg = chain(&[10.0], 1.0, 0.95, 3, 3, 5);
        cfg.strategy = Strategy::Purify3PerHop;
        let out = run_network(&cfg).unwrap();
        assert_eq!(out.records.len(), 5);
        for r in &out.records {
            assert!((r.pair.model_fidelity.value() - 0.99275).abs() < 1e-12);
        }
    }

    #[test]
    fn butterfly_routes_left_half_records_left() {
        let mut cfg = chain(&[10.0; 4], 1.0, 0.9, 1, 1, 30);
        cfg.butterfly = true;
        let out = run_network(&cfg).unwrap();
        assert_eq!(out.split, Some(2));
        for r in &out.records {
            assert_eq!(r.correction, r.pair.frame);
            assert!(r.left_frame_available_at.is_some());
        }
    }

    #[test]
    fn propagate_frames_collects_in_order() {
        let mut nodes: Vec<NodeState> = (0..3).map(|j| NodeState::new(j, 1, 1)).collect();
        let frames = [PauliFrame::new(true, false), PauliFrame::new(true, true)];
        for (j, frame) in frames.iter().enumerate() {
            nodes[j + 1].pending_frame.push(FrameRecord {
                cycle: 0,
                node: j + 1,
                slot: 0,
                frame: *frame,
                at_ns: 0,
            });
        }
        let herald = propagate_frames(&mut nodes, HeraldMessage::new(1));
        assert_eq!(fold_records(&herald.frame_payload, 0, 0), PauliFrame::new(false, true));
        assert!(nodes.iter().all(|n| n.pending_frame.is_empty()));

        let empty = propagate_frames(&mut nodes, HeraldMessage::new(2));
        assert!(fold_records(&empty.frame_payload, 1, 0).is_identity());
    }
}
