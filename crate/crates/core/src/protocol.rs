//! Fusillade, fusiland and repeater-node state machines.
//!
//! A node owns the fusillade for the hop to its right and the fusiland bank
//! for the hop to its left. Per cycle it is primed by a herald, fires its
//! signal train, receives the train from its left neighbour, gets one return
//! message from its right neighbour and, once both sides are settled, swaps
//! and frees everything for the next cycle.

use serde::{Deserialize, Serialize};

use crate::algebra::{Endpoint, Fidelity, PairRecord, PauliFrame};
use crate::engine::{Draws, Nanos};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusilierState {
    Idle,
    Primed,
    Fired,
    /// Confirmed by a return message; holds the fusiland slot it reached.
    Entangled(usize),
    Retired,
}

impl FusilierState {
    /// Moves along `Idle → Primed → Fired → {Entangled, Retired}`.
    pub fn advance(self, next: FusilierState) -> Result<FusilierState> {
        use FusilierState::*;
        match (self, next) {
            (Idle, Primed) | (Primed, Fired) | (Fired, Entangled(_)) | (Fired, Retired) => Ok(next),
            _ => Err(Error::Protocol(format!("fusilier cannot move from {self:?} to {next:?}"))),
        }
    }

    /// Frees the fusilier at cycle end.
    pub fn reset(self) -> Result<FusilierState> {
        match self {
            FusilierState::Idle | FusilierState::Entangled(_) | FusilierState::Retired => Ok(FusilierState::Idle),
            other => Err(Error::Protocol(format!("fusilier in {other:?} cannot be freed"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusilandState {
    Idle,
    Ready,
    /// Holds the fusilier id whose signal it captured.
    Entangled(usize),
    Exhausted,
}

impl FusilandState {
    pub fn advance(self, next: FusilandState) -> Result<FusilandState> {
        use FusilandState::*;
        match (self, next) {
            (Idle, Ready) | (Ready, Entangled(_)) | (Ready, Exhausted) => Ok(next),
            _ => Err(Error::Protocol(format!("fusiland cannot move from {self:?} to {next:?}"))),
        }
    }

    pub fn reset(self) -> Result<FusilandState> {
        match self {
            FusilandState::Idle | FusilandState::Entangled(_) | FusilandState::Exhausted => Ok(FusilandState::Idle),
            other => Err(Error::Protocol(format!("fusiland in {other:?} cannot be freed"))),
        }
    }
}

/// A frame update produced at `node` for end-to-end slot `slot` of `cycle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub cycle: u64,
    pub node: usize,
    pub slot: usize,
    pub frame: PauliFrame,
    pub at_ns: u64,
}

/// Folds the records of one cycle and slot into a single frame.
pub fn fold_records<'a>(records: impl IntoIterator<Item = &'a FrameRecord>, cycle: u64, slot: usize) -> PauliFrame {
    records
        .into_iter()
        .filter(|r| r.cycle == cycle && r.slot == slot)
        .map(|r| r.frame)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeraldMessage {
    pub cycle: u64,
    /// A flush herald only collects frame records; nodes do not fire.
    pub flush: bool,
    pub frame_payload: Vec<FrameRecord>,
}

impl HeraldMessage {
    pub fn new(cycle: u64) -> Self {
        HeraldMessage {
            cycle,
            flush: false,
            frame_payload: Vec::new(),
        }
    }

    pub fn flush(cycle: u64) -> Self {
        HeraldMessage {
            cycle,
            flush: true,
            frame_payload: Vec::new(),
        }
    }
}

/// Sent from a fusiland bank back to the fusillade once per cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnMessage {
    pub cycle: u64,
    /// `(fusilier_id, fusiland_slot)`, in firing order.
    pub matches: Vec<(usize, usize)>,
    /// Decoded purification corrections destined for the fusillade side.
    pub corrections: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalEmission {
    pub fusilier: usize,
    pub at: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalOutcome {
    Success { slot: usize },
    Failure,
    Discarded,
}

/// One swap a node performs: its k-th left link with its k-th right link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapAction {
    pub slot: usize,
    pub parity: bool,
    pub x_readout: bool,
}

/// Everything a repeater node keeps between events.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: usize,
    /// Fusillade aimed at the right neighbour; empty on the rightmost node.
    pub fusiliers: Vec<FusilierState>,
    /// Fusiland bank fed by the left neighbour; empty on the leftmost node.
    pub fusilands: Vec<FusilandState>,
    pub active_fusiland: usize,
    pub left_links: Vec<PairRecord>,
    pub right_links: Vec<PairRecord>,
    pub swap_done: bool,
    /// Frame records waiting for the next herald.
    pub pending_frame: Vec<FrameRecord>,
    cycle: Option<u64>,
    closed: bool,
    next_fusilier: usize,
    matches: Vec<(usize, usize)>,
    left_ready: bool,
    right_ready: bool,
}

impl NodeState {
    /// `n_right` fusiliers toward the right, `m_left` fusilands from the left.
    pub fn new(id: usize, n_right: usize, m_left: usize) -> Self {
        NodeState {
            id,
            fusiliers: vec![FusilierState::Idle; n_right],
            fusilands: vec![FusilandState::Idle; m_left],
            active_fusiland: 0,
            left_links: Vec::new(),
            right_links: Vec::new(),
            swap_done: false,
            pending_frame: Vec::new(),
            cycle: None,
            closed: true,
            next_fusilier: 0,
            matches: Vec::new(),
            left_ready: true,
            right_ready: true,
        }
    }

    pub fn cycle(&self) -> Option<u64> {
        self.cycle
    }

    /// True once the current cycle's work is finished and resources are free.
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn has_left(&self) -> bool {
        !self.fusilands.is_empty()
    }

    pub fn has_right(&self) -> bool {
        !self.fusiliers.is_empty()
    }

    fn expect_cycle(&self, cycle: u64) -> Result<()> {
        match self.cycle {
            Some(c) if c == cycle => Ok(()),
            other => Err(Error::Protocol(format!(
                "node {} is in cycle {other:?}, message is for cycle {cycle}",
                self.id
            ))),
        }
    }

    /// Handles the herald: checks the node finished its previous cycle,
    /// hands pending frame records to the herald and, unless flushing,
    /// readies the fusilands and fires the fusillade.
    pub fn on_herald(&mut self, herald: &mut HeraldMessage, now: Nanos, tau_slot: Nanos) -> Result<Vec<SignalEmission>> {
        let expected = self.cycle.map_or(0, |c| c + 1);
        if herald.cycle != expected {
            return Err(Error::Desync {
                hop: self.id,
                cycle: herald.cycle,
                reason: format!("node {} expected cycle {expected}", self.id),
            });
        }
        if !self.closed {
            let (hop, reason) = if !self.right_ready {
                (self.id, format!("node {} still awaits its return message", self.id))
            } else if !self.left_ready {
                (self.id - 1, format!("node {} is still receiving its signal train", self.id))
            } else {
                (self.id, format!("node {} has not swapped", self.id))
            };
            return Err(Error::Desync {
                hop,
                cycle: herald.cycle,
                reason,
            });
        }

        herald.frame_payload.append(&mut self.pending_frame);
        self.cycle = Some(herald.cycle);
        if herald.flush {
            return Ok(Vec::new());
        }

        self.closed = false;
        self.swap_done = false;
        self.active_fusiland = 0;
        self.next_fusilier = 0;
        self.matches.clear();
        self.left_ready = !self.has_left();
        self.right_ready = !self.has_right();
        for fusiland in &mut self.fusilands {
            *fusiland = fusiland.advance(FusilandState::Ready)?;
        }
        let mut emissions = Vec::with_capacity(self.fusiliers.len());
        for (k, fusilier) in self.fusiliers.iter_mut().enumerate() {
            *fusilier = fusilier.advance(FusilierState::Primed)?.advance(FusilierState::Fired)?;
            emissions.push(SignalEmission {
                fusilier: k,
                at: now + tau_slot * k as u64,
            });
        }
        Ok(emissions)
    }

    /// Lets the active fusiland interact with one incoming signal.
    ///
    /// `success_draw` decides the heralded success against `p`; on success
    /// `fidelity_draw` samples the new pair's bit flip.
    #[allow(clippy::too_many_arguments)]
    pub fn on_signal(
        &mut self,
        cycle: u64,
        fusilier_id: usize,
        left_node: usize,
        p: f64,
        fidelity: Fidelity,
        success_draw: f64,
        fidelity_draw: f64,
        now: Nanos,
    ) -> Result<(SignalOutcome, Option<PairRecord>)> {
        self.expect_cycle(cycle)?;
        if !self.has_left() || self.left_ready {
            return Err(Error::Protocol(format!("node {} is not receiving a train", self.id)));
        }
        if fusilier_id != self.next_fusilier {
            return Err(Error::Protocol(format!(
                "node {} got fusilier {fusilier_id}, expected {}",
                self.id, self.next_fusilier
            )));
        }
        self.next_fusilier += 1;

        if self.active_fusiland >= self.fusilands.len() {
            return Ok((SignalOutcome::Discarded, None));
        }
        if success_draw >= p {
            // The same fusiland is re-prepared for the next signal.
            return Ok((SignalOutcome::Failure, None));
        }
        let slot = self.active_fusiland;
        self.fusilands[slot] = self.fusilands[slot].advance(FusilandState::Entangled(fusilier_id))?;
        let pair = PairRecord::sample(
            Endpoint::new(left_node, fusilier_id),
            Endpoint::new(self.id, slot),
            fidelity,
            fidelity_draw,
            now.as_secs_f64(),
        )?;
        self.left_links.push(pair);
        self.matches.push((fusilier_id, slot));
        self.active_fusiland += 1;
        Ok((SignalOutcome::Success { slot }, Some(pair)))
    }

    /// Closes the incoming train after `train_len` signals.
    pub fn finish_train(&mut self, cycle: u64, train_len: usize) -> Result<()> {
        self.expect_cycle(cycle)?;
        if self.left_ready {
            return Err(Error::Protocol(format!("node {} has no open train", self.id)));
        }
        if self.next_fusilier != train_len {
            return Err(Error::Protocol(format!(
                "node {} saw {} of {train_len} signals",
                self.id, self.next_fusilier
            )));
        }
        for fusiland in &mut self.fusilands {
            if *fusiland == FusilandState::Ready {
                *fusiland = fusiland.advance(FusilandState::Exhausted)?;
            }
        }
        self.left_ready = true;
        Ok(())
    }

    /// Lists this cycle's successes for the fusillade side.
    pub fn build_return_message(&self, cycle: u64) -> Result<ReturnMessage> {
        self.expect_cycle(cycle)?;
        if !self.left_ready || !self.has_left() {
            return Err(Error::Protocol(format!(
                "node {} cannot report before its train finishes",
                self.id
            )));
        }
        Ok(ReturnMessage {
            cycle,
            matches: self.matches.clone(),
            corrections: Vec::new(),
        })
    }

    /// Confirms the fusillade from a return message and stores the hop's
    /// final right links. Swaps immediately if the left side is settled.
    pub fn on_return(&mut self, msg: &ReturnMessage, right_links: Vec<PairRecord>, swap_draws: &mut Draws) -> Result<Vec<SwapAction>> {
        self.expect_cycle(msg.cycle)?;
        if self.right_ready {
            return Err(Error::Protocol(format!("node {} got an unexpected return", self.id)));
        }
        let mut last = None;
        for &(fusilier, slot) in &msg.matches {
            if last.is_some_and(|prev| fusilier <= prev) {
                return Err(Error::Protocol("return matches must be in firing order".into()));
            }
            last = Some(fusilier);
            let state = self.fusiliers.get_mut(fusilier).ok_or_else(|| {
                Error::Protocol(format!("node {} has no fusilier {fusilier}", self.id))
            })?;
            *state = state.advance(FusilierState::Entangled(slot))?;
        }
        for state in &mut self.fusiliers {
            if *state == FusilierState::Fired {
                *state = state.advance(FusilierState::Retired)?;
            }
        }
        self.pending_frame.extend(msg.corrections.iter().copied());
        self.right_links = right_links;
        self.right_ready = true;
        self.try_complete(swap_draws)
    }

    /// Whether both sides are settled and the swap has not yet run.
    pub fn ready_to_swap(&self) -> bool {
        !self.closed && self.left_ready && self.right_ready && !self.swap_done
    }

    /// Swaps k-th left with k-th right link, retires the surplus and frees
    /// the node. Does nothing until both sides are settled.
    pub fn try_complete(&mut self, swap_draws: &mut Draws) -> Result<Vec<SwapAction>> {
        if !self.ready_to_swap() {
            return Ok(Vec::new());
        }
        let swaps = if self.has_left() && self.has_right() {
            let count = self.left_links.len().min(self.right_links.len());
            (0..count)
                .map(|slot| SwapAction {
                    slot,
                    parity: swap_draws.bit(),
                    x_readout: swap_draws.bit(),
                })
                .collect()
        } else {
            Vec::new()
        };
        self.swap_done = true;
        for fusilier in &mut self.fusiliers {
            *fusilier = fusilier.reset()?;
        }
        for fusiland in &mut self.fusilands {
            *fusiland = fusiland.reset()?;
        }
        self.left_links.clear();
        self.right_links.clear();
        self.closed = true;
        Ok(swaps)
    }
}
