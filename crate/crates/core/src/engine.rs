//! Deterministic discrete-event core.
//!
//! Time is an integer count of nanoseconds. Events are ordered by
//! `(time, seq)`, where `seq` is assigned at scheduling, so equal-time events
//! pop in the order they were scheduled.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }
}

impl std::ops::Add for Nanos {
    type Output = Nanos;

    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Nanos {
    type Output = Nanos;

    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl std::ops::Mul<u64> for Nanos {
    type Output = Nanos;

    fn mul(self, rhs: u64) -> Nanos {
        Nanos(self.0 * rhs)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ns", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    HeraldArrive,
    SignalArrive,
    ReturnArrive,
    CycleStart,
    SwapComplete,
    PairReady,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A scheduled event. `node` is the node the event is delivered to.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub time: Nanos,
    pub seq: u64,
    pub kind: EventKind,
    pub node: usize,
    pub payload: P,
}

impl<P> PartialOrd for Event<P>
where
    P: PartialEq,
{
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P: PartialEq> Eq for Event<P> {}

impl<P: PartialEq> Ord for Event<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ns: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub node: usize,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{} {} at node {} t={} ns ({})",
            self.seq, self.kind, self.node, self.t_ns, self.detail
        )
    }
}

/// Priority queue of pending events plus the simulation clock.
#[derive(Debug)]
pub struct EventQueue<P> {
    now: Nanos,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Event<P>>>,
}

impl<P: PartialEq> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: PartialEq> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: Nanos::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Inserts an event and returns its sequence number.
    pub fn schedule(&mut self, time: Nanos, kind: EventKind, node: usize, payload: P) -> Result<u64> {
        if time < self.now {
            return Err(Error::Scheduling {
                at_ns: time.0,
                now_ns: self.now.0,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event {
            time,
            seq,
            kind,
            node,
            payload,
        }));
        Ok(seq)
    }

    fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    fn pop(&mut self) -> Option<Event<P>> {
        let Reverse(event) = self.heap.pop()?;
        self.now = event.time;
        Some(event)
    }
}

/// Receives every dispatched event. The returned string becomes the trace
/// record's `detail`.
pub trait Handler<P> {
    fn handle(&mut self, event: &Event<P>, queue: &mut EventQueue<P>) -> Result<String>;
}

/// Dispatches events in `(time, seq)` order until the queue drains or the
/// next event lies beyond `until`.
///
/// The trace is collected only when `record` is set; otherwise the returned
/// vector is empty.
pub fn run<P, H>(queue: &mut EventQueue<P>, handler: &mut H, until: Nanos, record: bool) -> Result<Vec<TraceRecord>>
where
    P: PartialEq,
    H: Handler<P>,
{
    let mut trace = Vec::new();
    while let Some(time) = queue.peek_time() {
        if time > until {
            break;
        }
        let event = queue.pop().expect("peeked event");
        match handler.handle(&event, queue) {
            Ok(detail) => {
                if record {
                    trace.push(TraceRecord {
                        t_ns: event.time.0,
                        seq: event.seq,
                        kind: event.kind,
                        node: event.node,
                        detail,
                    });
                }
            }
            Err(source) => {
                return Err(Error::Aborted {
                    event: Box::new(TraceRecord {
                        t_ns: event.time.0,
                        seq: event.seq,
                        kind: event.kind,
                        node: event.node,
                        detail: String::new(),
                    }),
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(trace)
}

/// Default fibre signal speed, refractive index ≈ 1.5.
pub const DEFAULT_SIGNAL_SPEED_M_PER_S: f64 = 2.0e8;

/// A fibre between adjacent nodes. Classical and quantum signals share it
/// and see the same delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub from_node: usize,
    pub to_node: usize,
    pub length_km: f64,
    pub signal_speed: f64,
}

impl Channel {
    /// One-way delay in seconds.
    pub fn delay(&self) -> Result<f64> {
        channel_delay(self)
    }

    /// One-way delay rounded up to whole nanoseconds.
    pub fn delay_ns(&self) -> Result<Nanos> {
        let exact = self.length_km * 1e12 / self.signal_speed;
        self.delay()?;
        let nearest = exact.round();
        // Snap values that only miss an integer by rounding noise.
        let ns = if (exact - nearest).abs() < 1e-6 { nearest } else { exact.ceil() };
        Ok(Nanos(ns as u64))
    }
}

/// One-way propagation delay: `length_km · 1000 / signal_speed` seconds.
pub fn channel_delay(channel: &Channel) -> Result<f64> {
    if !(channel.signal_speed.is_finite() && channel.signal_speed > 0.0) {
        return Err(Error::Config(format!(
            "signal speed must be positive, got {}",
            channel.signal_speed
        )));
    }
    if channel.length_km.is_nan() || channel.length_km < 0.0 {
        return Err(Error::Config(format!(
            "channel length must be non-negative, got {}",
            channel.length_km
        )));
    }
    Ok(channel.length_km * 1000.0 / channel.signal_speed)
}

/// Which protocol step a random substream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamKind {
    /// Per-hop signal success and fidelity draws.
    Signal = 0,
    /// Per-hop purification measurement outcomes.
    Purify = 1,
    /// Per-node swap measurement outcomes.
    Swap = 2,
}

/// Factory for reproducible, independent random substreams.
///
/// Every `(kind, index, cycle)` triple maps to its own ChaCha stream under
/// the master seed, so adding or removing a node leaves the other links'
/// draws untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    /// Layout: kind in the top 8 bits, index in the next 16, cycle in the low 40.
    pub fn stream_id(kind: StreamKind, index: usize, cycle: u64) -> u64 {
        debug_assert!(index < 1 << 16, "substream index out of range");
        debug_assert!(cycle < 1 << 40, "cycle out of range");
        ((kind as u64) << 56) | ((index as u64 & 0xffff) << 40) | (cycle & ((1 << 40) - 1))
    }

    pub fn substream(&self, kind: StreamKind, index: usize, cycle: u64) -> Draws {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(Self::stream_id(kind, index, cycle));
        Draws { rng, drawn: 0 }
    }
}

/// A positioned substream. `drawn` counts values taken so far.
#[derive(Debug, Clone)]
pub struct Draws {
    rng: ChaCha8Rng,
    drawn: u64,
}

impl Draws {
    /// Uniform value in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.drawn += 1;
        self.rng.random::<f64>()
    }

    pub fn bit(&mut self) -> bool {
        self.uniform() < 0.5
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }
}
