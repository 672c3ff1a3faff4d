//! Run summaries and analytic planning tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::algebra::{failure_prob_multi, min_fusiliers};
use crate::engine::{Channel, Nanos};
use crate::error::{Error, Result};
use crate::network::{validate, EndToEndRecord, NetworkConfig};

/// Headline numbers of one run.
///
/// Rates count end-to-end pairs; divide by the fusiland count for a
/// per-fusiland rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub cycles: u64,
    pub links_per_cycle: usize,
    pub pairs_total: u64,
    pub pairs_per_second: f64,
    pub pairs_per_second_se: f64,
    /// `1 −` the frame-corrected error rate; absent when no pair was made.
    pub empirical_end_fidelity: Option<f64>,
    pub empirical_end_fidelity_se: Option<f64>,
    pub analytic_end_fidelity: f64,
    pub cycle_period_s: f64,
    /// Cycles that produced fewer than `links_per_cycle` end-to-end pairs.
    pub failure_cycles: u64,
    pub frame_latency_cycles: Option<f64>,
}

/// Aggregates the records of a completed run.
pub fn summarize(records: &[EndToEndRecord], config: &NetworkConfig) -> Result<SummaryStats> {
    if config.cycles == 0 {
        return Err(Error::Domain("cannot summarize a run of zero cycles".into()));
    }
    let schedule = validate(config)?;
    let cycles = config.cycles;
    let period = schedule.cycle_period;
    let period_s = period.as_secs_f64();

    let mut per_cycle: BTreeMap<u64, u64> = BTreeMap::new();
    for r in records {
        *per_cycle.entry(r.cycle).or_default() += 1;
    }
    let pairs_total = records.len() as u64;
    let failure_cycles = cycles
        - per_cycle
            .values()
            .filter(|&&count| count >= schedule.links_per_cycle as u64)
            .count() as u64;

    // Normal approximation over per-cycle counts, zeros included.
    let mean = pairs_total as f64 / cycles as f64;
    let sum_sq: f64 = per_cycle.values().map(|&c| (c as f64) * (c as f64)).sum();
    let variance = if cycles > 1 {
        ((sum_sq - cycles as f64 * mean * mean) / (cycles - 1) as f64).max(0.0)
    } else {
        0.0
    };
    let pairs_per_second = pairs_total as f64 / (cycles as f64 * period_s);
    let pairs_per_second_se = (variance / cycles as f64).sqrt() / period_s;

    let (empirical_end_fidelity, empirical_end_fidelity_se) = if pairs_total > 0 {
        let errors = records.iter().filter(|r| r.corrected_error()).count() as f64;
        let fidelity = 1.0 - errors / pairs_total as f64;
        let se = (fidelity * (1.0 - fidelity) / pairs_total as f64).sqrt();
        (Some(fidelity), Some(se))
    } else {
        (None, None)
    };
    let frame_latency_cycles = if pairs_total > 0 {
        let total: f64 = records
            .iter()
            .map(|r| (r.frame_available_at - r.established_at).0 as f64 / period.0 as f64)
            .sum();
        Some(total / pairs_total as f64)
    } else {
        None
    };

    Ok(SummaryStats {
        cycles,
        links_per_cycle: schedule.links_per_cycle,
        pairs_total,
        pairs_per_second,
        pairs_per_second_se,
        empirical_end_fidelity,
        empirical_end_fidelity_se,
        analytic_end_fidelity: config.analytic_end_fidelity()?.value(),
        cycle_period_s: period_s,
        failure_cycles,
        frame_latency_cycles,
    })
}

/// One row of a fusillade sizing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub m: u32,
    pub p: f64,
    pub target_pf: f64,
    pub n_required: u32,
    pub exact_pf_at_n: f64,
    /// Failure probability one fusilier short; absent when `n_required = m`.
    pub exact_pf_below: Option<f64>,
    pub expected_successes: f64,
}

/// Sizes the fusillade for each fusiland count in `ms`.
pub fn plan_table(ms: &[u32], p: f64, target_pf: f64) -> Result<Vec<PlanRow>> {
    ms.iter()
        .map(|&m| {
            let n = min_fusiliers(m, p, target_pf)?;
            let below = if n > m { Some(failure_prob_multi(n - 1, m, p)?) } else { None };
            Ok(PlanRow {
                m,
                p,
                target_pf,
                n_required: n,
                exact_pf_at_n: failure_prob_multi(n, m, p)?,
                exact_pf_below: below,
                expected_successes: f64::from(n) * p,
            })
        })
        .collect()
}

/// Widely quoted fusillade sizes for `p = 0.25`, `p_f = 0.01`, obtained by
/// rounding the failure probability to two decimals.
pub fn reference_fusiliers(m: u32, p: f64, target_pf: f64) -> Option<u32> {
    if p != 0.25 || target_pf != 0.01 {
        return None;
    }
    match m {
        1 => Some(16),
        2 => Some(24),
        10 => Some(70),
        100 => Some(485),
        _ => None,
    }
}

/// Single-hop timing and sizing for [`rate_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateInputs {
    pub length_km: f64,
    pub signal_speed_m_per_s: f64,
    pub n_fusiliers: u32,
    pub m_fusilands: u32,
    pub p: f64,
    pub tau_slot_ns: u64,
    pub proc_ns: u64,
}

/// Expected pairs per second on one hop.
///
/// Slot `k` is filled with probability `1 − p_f(n, k, p)`, so a cycle yields
/// `Σₖ (1 − p_f(n, k, p))` pairs on average. With `p = 1` this is `m / period`.
pub fn rate_model(inputs: &RateInputs) -> Result<f64> {
    let one_way = Channel {
        from_node: 0,
        to_node: 1,
        length_km: inputs.length_km,
        signal_speed: inputs.signal_speed_m_per_s,
    }
    .delay_ns()?;
    let period = one_way * 2 + Nanos(u64::from(inputs.n_fusiliers) * inputs.tau_slot_ns) + Nanos(inputs.proc_ns);
    if period == Nanos::ZERO {
        return Err(Error::Domain("cycle period must be positive".into()));
    }
    let expected: f64 = (1..=inputs.m_fusilands)
        .map(|k| failure_prob_multi(inputs.n_fusiliers, k, inputs.p).map(|pf| 1.0 - pf))
        .sum::<Result<f64>>()?;
    Ok(expected / period.as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{failure_prob_single, Fidelity, LinkModel};
    use crate::network::{run_network, LinkConfig};

    fn rate(km: f64, n: u32, m: u32, p: f64) -> f64 {
        rate_model(&RateInputs {
            length_km: km,
            signal_speed_m_per_s: 2e8,
            n_fusiliers: n,
            m_fusilands: m,
            p,
            tau_slot_ns: 0,
            proc_ns: 0,
        })
        .unwrap()
    }

    #[test]
    fn rate_examples() {
        assert!((rate(40.0, 1, 1, 1.0) - 2500.0).abs() < 1e-9);
        assert!((rate(10.0, 100, 100, 1.0) - 1e6).abs() < 1e-6);
        let expected = 2500.0 * (1.0 - failure_prob_single(17, 0.25).unwrap());
        assert!((rate(40.0, 17, 1, 0.25) - expected).abs() < 1e-9);
        assert!((expected - 2_481.207_632_954_465).abs() < 1e-9);
    }

    #[test]
    fn plan_rows() {
        let rows = plan_table(&[1, 2], 0.25, 0.01).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_required).collect::<Vec<_>>(), vec![17, 24]);
        assert!((rows[0].exact_pf_at_n - 0.007_516_946_818_213_91).abs() < 1e-15);
        assert!((rows[0].exact_pf_below.unwrap() - 0.010_022_595_757_618_546).abs() < 1e-15);

        let half = plan_table(&[1], 0.5, 0.5).unwrap();
        assert_eq!(half[0].n_required, 2);
        assert_eq!(half[0].exact_pf_at_n, 0.25);
        assert_eq!(half[0].exact_pf_below, Some(0.5));

        assert!(plan_table(&[1], 0.25, 1.0).is_err());
        assert!(matches!(plan_table(&[1], 0.0, 0.01), Err(Error::Unsatisfiable(_))));
    }

    fn single_hop(km: f64, p: f64) -> NetworkConfig {
        let link = LinkConfig::new(LinkModel::explicit(km, p, Fidelity::PERFECT), 1, 1);
        let mut cfg = NetworkConfig::uniform(1, link, 1000, 3);
        cfg.tau_slot_ns = 0;
        cfg
    }

    #[test]
    fn summary_rates() {
        for (km, expected) in [(40.0, 2500.0), (10.0, 10_000.0)] {
            let cfg = single_hop(km, 1.0);
            let out = run_network(&cfg).unwrap();
            let stats = summarize(&out.records, &cfg).unwrap();
            assert!((stats.pairs_per_second - expected).abs() < 1e-9);
            assert_eq!(stats.failure_cycles, 0);
            assert_eq!(stats.frame_latency_cycles, Some(1.0));
            assert_eq!(stats.empirical_end_fidelity, Some(1.0));
        }
    }

    #[test]
    fn summary_without_pairs() {
        let cfg = single_hop(40.0, 0.0);
        let out = run_network(&cfg).unwrap();
        let stats = summarize(&out.records, &cfg).unwrap();
        assert_eq!(stats.pairs_total, 0);
        assert_eq!(stats.failure_cycles, cfg.cycles);
        assert_eq!(stats.empirical_end_fidelity, None);
    }

    #[test]
    fn summary_rejects_zero_cycles() {
        let mut cfg = single_hop(40.0, 1.0);
        cfg.cycles = 0;
        assert!(matches!(summarize(&[], &cfg), Err(Error::Domain(_))));
    }
}
