//! Closed-form link, purification and swap mathematics.
//!
//! Everything here is a pure function. The simulator calls the `*_apply`
//! functions once per pair; the planner calls the analytic forms.
//!
//! A pair is modelled as the two-branch bit-flip mixture
//! `F |Φ+⟩⟨Φ+| + (1 − F) |Ψ+⟩⟨Ψ+|`. Sampling the branch gives one error bit
//! per pair, so every quantum operation reduces to XOR arithmetic on bits.

use std::fmt;
use std::ops::{BitXor, BitXorAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pair fidelity against the canonical `|gg + ee⟩` state.
///
/// Values in `[0, 0.5]` are accepted: every formula stays well defined. Use
/// [`Fidelity::is_purifiable`] to flag pairs that purification cannot improve.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Fidelity(f64);

impl Fidelity {
    pub const PERFECT: Fidelity = Fidelity(1.0);
    pub const MIXED: Fidelity = Fidelity(0.5);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Fidelity(value))
        } else {
            Err(Error::Domain(format!("fidelity {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Probability that a pair drawn from this mixture carries a bit flip.
    pub fn error_rate(self) -> f64 {
        1.0 - self.0
    }

    /// `2F − 1`, the quantity that multiplies under swapping.
    pub fn bias(self) -> f64 {
        2.0 * self.0 - 1.0
    }

    /// Whether three-pair purification strictly raises this fidelity.
    pub fn is_purifiable(self) -> bool {
        self.0 > 0.5 && self.0 < 1.0
    }

    // Clamps rounding spill from closed forms that are mathematically in [0, 1].
    fn clamped(value: f64) -> Self {
        Fidelity(value.clamp(0.0, 1.0))
    }
}

impl TryFrom<f64> for Fidelity {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Fidelity::new(value)
    }
}

impl From<Fidelity> for f64 {
    fn from(f: Fidelity) -> f64 {
        f.0
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Pending Pauli corrections on a pair, kept as bookkeeping instead of being
/// applied physically.
///
/// Frames compose by XOR, so composition is associative, commutative and
/// every frame is its own inverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliFrame {
    pub x: bool,
    pub z: bool,
}

impl PauliFrame {
    pub const IDENTITY: PauliFrame = PauliFrame { x: false, z: false };

    pub fn new(x: bool, z: bool) -> Self {
        PauliFrame { x, z }
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }
}

impl BitXor for PauliFrame {
    type Output = PauliFrame;

    fn bitxor(self, rhs: PauliFrame) -> PauliFrame {
        PauliFrame {
            x: self.x ^ rhs.x,
            z: self.z ^ rhs.z,
        }
    }
}

impl BitXorAssign for PauliFrame {
    fn bitxor_assign(&mut self, rhs: PauliFrame) {
        *self = *self ^ rhs;
    }
}

impl std::iter::FromIterator<PauliFrame> for PauliFrame {
    fn from_iter<I: IntoIterator<Item = PauliFrame>>(iter: I) -> Self {
        iter.into_iter().fold(PauliFrame::IDENTITY, |acc, f| acc ^ f)
    }
}

/// One qubit of a pair: the node holding it and the fusilier/fusiland slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: usize,
    pub slot: usize,
}

impl Endpoint {
    pub fn new(node: usize, slot: usize) -> Self {
        Endpoint { node, slot }
    }
}

/// A sampled entangled pair.
///
/// `x_error` is the bit flip still unknown to anyone. The physically present
/// flip is `x_error ^ frame.x`: the frame records the part that measurement
/// outcomes have revealed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub left: Endpoint,
    pub right: Endpoint,
    pub x_error: bool,
    pub frame: PauliFrame,
    /// Creation time in seconds.
    pub created_at: f64,
    pub model_fidelity: Fidelity,
}

impl PairRecord {
    /// Samples a fresh pair: `x_error` is set when `draw < 1 − fidelity`.
    pub fn sample(
        left: Endpoint,
        right: Endpoint,
        fidelity: Fidelity,
        draw: f64,
        created_at: f64,
    ) -> Result<Self> {
        if left.node == right.node {
            return Err(Error::Protocol(format!(
                "pair endpoints must be on distinct nodes (both on node {})",
                left.node
            )));
        }
        Ok(PairRecord {
            left,
            right,
            x_error: draw < fidelity.error_rate(),
            frame: PauliFrame::IDENTITY,
            created_at,
            model_fidelity: fidelity,
        })
    }

    /// The bit flip an observer would see before applying the frame.
    pub fn physical_flip(&self) -> bool {
        self.x_error ^ self.frame.x
    }
}

/// Per-hop link parameters.
///
/// The success probability is either given directly (`p_success`) or derived
/// from fibre attenuation as `p0 · exp(−length_km / l0_km)`. Exactly one form
/// must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, rename = "L0_km", skip_serializing_if = "Option::is_none")]
    pub l0_km: Option<f64>,
    pub raw_fidelity: Fidelity,
}

impl LinkModel {
    pub fn explicit(length_km: f64, p_success: f64, raw_fidelity: Fidelity) -> Self {
        LinkModel {
            length_km,
            p_success: Some(p_success),
            p0: None,
            l0_km: None,
            raw_fidelity,
        }
    }

    pub fn attenuated(length_km: f64, p0: f64, l0_km: f64, raw_fidelity: Fidelity) -> Self {
        LinkModel {
            length_km,
            p_success: None,
            p0: Some(p0),
            l0_km: Some(l0_km),
            raw_fidelity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        success_probability(self).map(|_| ())
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {p} outside [0, 1]")))
    }
}

/// Single-attempt success probability of a link.
pub fn success_probability(model: &LinkModel) -> Result<f64> {
    if !(model.length_km.is_finite() && model.length_km >= 0.0) {
        return Err(Error::Config(format!(
            "length_km must be a finite non-negative number, got {}",
            model.length_km
        )));
    }
    match (model.p_success, model.p0, model.l0_km) {
        (Some(p), None, None) => {
            check_probability("p_success", p).map_err(|e| Error::Config(e.to_string()))?;
            Ok(p)
        }
        (None, Some(p0), Some(l0)) => {
            check_probability("p0", p0).map_err(|e| Error::Config(e.to_string()))?;
            if l0.is_nan() || l0 <= 0.0 {
                return Err(Error::Config(format!("L0_km must be positive, got {l0}")));
            }
            Ok(p0 * (-model.length_km / l0).exp())
        }
        _ => Err(Error::Config(
            "link needs exactly one of p_success or (p0, L0_km)".into(),
        )),
    }
}

/// Probability that none of `n` independent attempts succeeds: `(1 − p)^n`.
pub fn failure_prob_single(n: u32, p: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("need at least one fusilier".into()));
    }
    check_probability("p", p)?;
    Ok((1.0 - p).powi(n as i32))
}

/// Probability that `n` fusiliers fill fewer than `m` fusilands, i.e. the
/// binomial lower tail `P[successes ≤ m − 1]`.
///
/// Whichever tail lies away from the mean is summed directly and the other
/// obtained as its complement, so results near 1 keep full precision. Terms
/// follow the ratio recurrence in log space, which survives fusillades large
/// enough for `(1 − p)^n` to underflow.
pub fn failure_prob_multi(n: u32, m: u32, p: f64) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(Error::Domain("n and m must be positive".into()));
    }
    if m > n {
        return Err(Error::Domain(format!(
            "cannot fill {m} fusilands with {n} fusiliers"
        )));
    }
    check_probability("p", p)?;
    if p == 1.0 {
        // All n attempts succeed and n ≥ m.
        return Ok(0.0);
    }
    if m == 1 {
        return failure_prob_single(n, p);
    }
    if p == 0.0 {
        return Ok(1.0);
    }
    let q = 1.0 - p;
    let ln_odds = (p / q).ln();
    let (n_f, last) = (f64::from(n), m - 1);
    if f64::from(last) < n_f * p {
        // P[X ≤ m − 1], walking up from k = 0.
        let terms = (0..last).map(|k| (f64::from(n - k) / f64::from(k + 1)).ln() + ln_odds);
        Ok(log_sum(n_f * q.ln(), terms).min(1.0))
    } else {
        // 1 − P[X ≥ m], walking down from k = n.
        let terms = (m..n).rev().map(|k| (f64::from(k + 1) / f64::from(n - k)).ln() - ln_odds);
        Ok((1.0 - log_sum(n_f * p.ln(), terms)).max(0.0))
    }
}

/// `Σ exp(lₖ)` where `l₀ = first` and each step adds the next log ratio.
fn log_sum(first: f64, steps: impl Iterator<Item = f64>) -> f64 {
    let (mut ln_term, mut peak, mut scaled) = (first, first, 1.0f64);
    for step in steps {
        ln_term += step;
        if ln_term > peak {
            scaled = scaled * (peak - ln_term).exp() + 1.0;
            peak = ln_term;
        } else {
            scaled += (ln_term - peak).exp();
        }
    }
    (peak + scaled.ln()).exp()
}

/// Smallest `n ≥ m` whose failure probability is strictly below `target_pf`.
pub fn min_fusiliers(m: u32, p: f64, target_pf: f64) -> Result<u32> {
    if m == 0 {
        return Err(Error::Domain("m must be positive".into()));
    }
    check_probability("p", p)?;
    if !(target_pf > 0.0 && target_pf < 1.0) {
        return Err(Error::Domain(format!(
            "target failure probability {target_pf} must lie in (0, 1)"
        )));
    }
    if p == 0.0 {
        return Err(Error::Unsatisfiable(
            "p = 0: no number of fusiliers can succeed".into(),
        ));
    }
    // The tail is non-increasing in n, so a linear scan finds the boundary.
    let mut n = m;
    loop {
        if failure_prob_multi(n, m, p)? < target_pf {
            return Ok(n);
        }
        n = n.checked_add(1).ok_or_else(|| {
            Error::Unsatisfiable(format!("no n below u32::MAX reaches {target_pf}"))
        })?;
    }
}

/// Fidelity after three-pair repetition-code purification:
/// `F³ + 3F²(1 − F)`.
pub fn purify3_analytic(f: Fidelity) -> Fidelity {
    let f = f.value();
    Fidelity::clamped(f * f * f + 3.0 * f * f * (1.0 - f))
}

/// Which of the three pairs the minimal-weight decoder blames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorLocation {
    None,
    Pair1,
    Pair2,
    Pair3,
}

/// Minimal-weight decoding of the repetition-code syndromes
/// `s12 = x1 ⊕ x2`, `s23 = x2 ⊕ x3`.
pub fn purify3_decode(syndrome_12: bool, syndrome_23: bool) -> ErrorLocation {
    match (syndrome_12, syndrome_23) {
        (false, false) => ErrorLocation::None,
        (true, false) => ErrorLocation::Pair1,
        (true, true) => ErrorLocation::Pair2,
        (false, true) => ErrorLocation::Pair3,
    }
}

/// Measurement record of one purification round.
///
/// `p12`, `p23` are the fusilier-side parity outcomes, `r12`, `r23` the
/// fusiland-side ones. `x_outcomes` are the X-basis readouts of pairs 2 and 3
/// on both sides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurifyOutcomes {
    pub p12: bool,
    pub p23: bool,
    pub r12: bool,
    pub r23: bool,
    pub x_outcomes: [bool; 4],
}

impl PurifyOutcomes {
    /// Builds a record consistent with the given physical flips: the
    /// fusilier-side bits are free and the fusiland side differs by the true
    /// parity.
    pub fn consistent_with(pairs: &[PairRecord; 3], p12: bool, p23: bool, x_outcomes: [bool; 4]) -> Self {
        let flips = pairs.map(|pair| pair.physical_flip());
        PurifyOutcomes {
            p12,
            p23,
            r12: p12 ^ flips[0] ^ flips[1],
            r23: p23 ^ flips[1] ^ flips[2],
            x_outcomes,
        }
    }
}

/// Applies three-pair purification, keeping pair 1.
///
/// The returned pair's `x_error` is the residual after decoding and its
/// frame carries the decoded X correction plus the XOR of the four X-basis
/// outcomes on the Z side.
pub fn purify3_apply(pairs: &[PairRecord; 3], outcomes: &PurifyOutcomes) -> Result<PairRecord> {
    let [first, second, third] = pairs;
    for other in [second, third] {
        if other.left.node != first.left.node || other.right.node != first.right.node {
            return Err(Error::Protocol(format!(
                "purification needs pairs on one hop, got {}–{} and {}–{}",
                first.left.node, first.right.node, other.left.node, other.right.node
            )));
        }
    }

    // Measured parities reveal the physical flips; removing the already known
    // frame parts leaves the syndrome of the unknown errors.
    let s12 = outcomes.p12 ^ outcomes.r12 ^ first.frame.x ^ second.frame.x;
    let s23 = outcomes.p23 ^ outcomes.r23 ^ second.frame.x ^ third.frame.x;
    let correct_kept = purify3_decode(s12, s23) == ErrorLocation::Pair1;
    let z_update = outcomes.x_outcomes.iter().fold(false, |acc, &b| acc ^ b);

    let mut kept = *first;
    kept.x_error = first.x_error ^ correct_kept;
    kept.frame ^= PauliFrame::new(correct_kept, z_update);
    kept.model_fidelity = purify3_analytic(first.model_fidelity);
    Ok(kept)
}

/// Fidelity of the pair produced by swapping two independent bit-flip pairs.
pub fn swap_compose_analytic(f1: Fidelity, f2: Fidelity) -> Fidelity {
    let (a, b) = (f1.value(), f2.value());
    Fidelity::clamped(a * b + (1.0 - a) * (1.0 - b))
}

/// Swaps `left` and `right` at their shared node.
///
/// `parity` is the parity-gate outcome (X side of the frame) and `x_readout`
/// the X-basis readout (Z side).
pub fn swap_apply(left: &PairRecord, right: &PairRecord, parity: bool, x_readout: bool) -> Result<PairRecord> {
    if left.right.node != right.left.node {
        return Err(Error::Protocol(format!(
            "swap needs adjacent pairs: left ends at node {}, right starts at node {}",
            left.right.node, right.left.node
        )));
    }
    if left.left.node == right.right.node {
        return Err(Error::Protocol(format!(
            "swap would produce a loop on node {}",
            left.left.node
        )));
    }
    Ok(PairRecord {
        left: left.left,
        right: right.right,
        x_error: left.x_error ^ right.x_error,
        frame: left.frame ^ right.frame ^ PauliFrame::new(parity, x_readout),
        created_at: left.created_at.max(right.created_at),
        model_fidelity: swap_compose_analytic(left.model_fidelity, right.model_fidelity),
    })
}

/// End-to-end fidelity of a chain of swapped hops: `(1 + Π(2Fᵢ − 1)) / 2`.
pub fn chain_fidelity(hops: &[Fidelity]) -> Result<Fidelity> {
    if hops.is_empty() {
        return Err(Error::Domain("chain needs at least one hop".into()));
    }
    let bias: f64 = hops.iter().map(|f| f.bias()).product();
    Ok(Fidelity::clamped((1.0 + bias) / 2.0))
}
