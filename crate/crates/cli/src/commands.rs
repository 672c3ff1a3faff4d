use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fusillade::algebra::Fidelity;
use fusillade::metrics::{plan_table, reference_fusiliers, summarize, SummaryStats};
use fusillade::network::{run_network_with, CycleSchedule, NetworkConfig, RunOptions, Strategy};
use serde::Serialize;

use crate::config::{ConfigDocument, Format};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanLine {
    pub m: u32,
    pub n_required: u32,
    pub n_per_m: f64,
    pub exact_pf_at_n: f64,
    pub exact_pf_below: Option<f64>,
    pub expected_successes: f64,
    /// The commonly quoted size for the same target, where one exists.
    pub reference_n: Option<u32>,
}

pub fn plan(ms: &[u32], p: f64, target: f64) -> CliResult<Vec<PlanLine>> {
    if ms.is_empty() {
        return Err(CliError::Config("--m: empty list".into()));
    }
    if ms.contains(&0) {
        return Err(CliError::Config("--m: fusiland counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(CliError::Config(format!("--p: {p} is not a probability")));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(CliError::Config(format!("--target: {target} must lie strictly between 0 and 1")));
    }
    let rows = plan_table(ms, p, target).map_err(|e| match e {
        fusillade::Error::Unsatisfiable(msg) => CliError::Unsatisfiable(format!("--p: {msg}")),
        other => other.into(),
    })?;
    Ok(rows
        .into_iter()
        .map(|r| PlanLine {
            m: r.m,
            n_required: r.n_required,
            n_per_m: f64::from(r.n_required) / f64::from(r.m),
            exact_pf_at_n: r.exact_pf_at_n,
            exact_pf_below: r.exact_pf_below,
            expected_successes: r.expected_successes,
            reference_n: reference_fusiliers(r.m, p, target),
        })
        .collect())
}

/// Aligned text, or CSV when `csv` is set.
pub fn render_plan(lines: &[PlanLine], csv: bool) -> String {
    match csv {
        true => to_csv(lines),
        false => {
            let mut out = String::new();
            writeln!(out, "{:>6} {:>8} {:>8} {:>14} {:>14} {:>8}", "m", "n", "n/m", "p_f(n)", "p_f(n-1)", "ref_n").unwrap();
            for l in lines {
                let below = l.exact_pf_below.map_or("-".to_string(), |v| format!("{v:.6e}"));
                let reference = l.reference_n.map_or("-".to_string(), |v| v.to_string());
                writeln!(
                    out,
                    "{:>6} {:>8} {:>8.3} {:>14.6e} {:>14} {:>8}",
                    l.m, l.n_required, l.n_per_m, l.exact_pf_at_n, below, reference
                )
                .unwrap();
            }
            out
        }
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("flat rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

/// Everything a run writes: the resolved configuration, the derived timing
/// and the statistics.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryDocument {
    pub config: ConfigDocument,
    pub schedule: CycleSchedule,
    pub summary: SummaryStats,
}

pub struct Simulation {
    pub document: SummaryDocument,
    /// One JSON record per line, when tracing was requested.
    pub trace: Option<String>,
}

pub fn simulate(doc: &ConfigDocument, trace: bool) -> CliResult<Simulation> {
    let schedule = doc.check()?;
    let out = run_network_with(&doc.network, RunOptions { trace })?;
    let summary = summarize(&out.records, &doc.network)?;
    let trace = trace.then(|| {
        let mut lines = String::new();
        for record in &out.trace {
            lines.push_str(&serde_json::to_string(record).expect("trace records serialize"));
            lines.push('\n');
        }
        lines
    });
    Ok(Simulation { document: SummaryDocument { config: doc.clone(), schedule, summary }, trace })
}

pub fn render_summary(doc: &SummaryDocument, format: Format) -> String {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(doc).expect("summaries serialize");
            text.push('\n');
            text
        }
        Format::Csv => to_csv(std::slice::from_ref(&doc.summary)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    LengthKm,
    P,
    N,
    M,
    F,
    Strategy,
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s {
            "length_km" => SweepParam::LengthKm,
            "p" => SweepParam::P,
            "n" => SweepParam::N,
            "m" => SweepParam::M,
            "F" => SweepParam::F,
            "strategy" => SweepParam::Strategy,
            other => {
                return Err(CliError::Config(format!(
                    "--param: unknown parameter {other:?}; expected one of length_km, p, n, m, F, strategy"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LengthKm => "length_km",
            SweepParam::P => "p",
            SweepParam::N => "n",
            SweepParam::M => "m",
            SweepParam::F => "F",
            SweepParam::Strategy => "strategy",
        }
    }

    /// Sets the parameter on every hop of `network`.
    fn apply(self, network: &mut NetworkConfig, value: &str) -> CliResult<()> {
        let bad = |what: &str| CliError::Config(format!("--values: cannot read {value:?} as {what}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let count = || value.parse::<u32>().map_err(|_| bad("a non-negative integer"));
        match self {
            SweepParam::Strategy => {
                network.strategy = match value {
                    "raw" => Strategy::Raw,
                    "purify3_per_hop" => Strategy::Purify3PerHop,
                    _ => return Err(bad("a strategy (raw, purify3_per_hop)")),
                }
            }
            SweepParam::LengthKm => {
                let v = float()?;
                network.links.iter_mut().for_each(|l| l.length_km = v);
            }
            SweepParam::P => {
                let v = float()?;
                for link in &mut network.links {
                    link.p_success = Some(v);
                    link.p0 = None;
                    link.l0_km = None;
                }
            }
            SweepParam::N => {
                let v = count()?;
                network.links.iter_mut().for_each(|l| l.n_fusiliers = v);
            }
            SweepParam::M => {
                let v = count()?;
                network.links.iter_mut().for_each(|l| l.m_fusilands = v);
            }
            SweepParam::F => {
                let v = Fidelity::new(float()?).map_err(|e| CliError::Config(format!("--values: {e}")))?;
                network.links.iter_mut().for_each(|l| l.raw_fidelity = v);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: String,
    pub seed: u64,
    pub cycles: u64,
    pub links_per_cycle: usize,
    pub pairs_total: u64,
    pub pairs_per_second: f64,
    pub pairs_per_second_se: f64,
    pub empirical_end_fidelity: Option<f64>,
    pub empirical_end_fidelity_se: Option<f64>,
    pub analytic_end_fidelity: f64,
    pub cycle_period_s: f64,
    pub failure_cycles: u64,
    pub frame_latency_cycles: Option<f64>,
}

impl SweepRow {
    fn new(param: SweepParam, value: &str, seed: u64, s: SummaryStats) -> Self {
        SweepRow {
            parameter: param.name(),
            value: value.to_string(),
            seed,
            cycles: s.cycles,
            links_per_cycle: s.links_per_cycle,
            pairs_total: s.pairs_total,
            pairs_per_second: s.pairs_per_second,
            pairs_per_second_se: s.pairs_per_second_se,
            empirical_end_fidelity: s.empirical_end_fidelity,
            empirical_end_fidelity_se: s.empirical_end_fidelity_se,
            analytic_end_fidelity: s.analytic_end_fidelity,
            cycle_period_s: s.cycle_period_s,
            failure_cycles: s.failure_cycles,
            frame_latency_cycles: s.frame_latency_cycles,
        }
    }
}

/// Runs one simulation per value, seeded `seed + index`. Points run on
/// separate threads; rows come back in input order.
pub fn sweep(doc: &ConfigDocument, param: SweepParam, values: &[String]) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("--values: empty value list".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for (i, value) in values.iter().enumerate() {
        let mut network = doc.network.clone();
        param.apply(&mut network, value)?;
        network.seed = doc.network.seed.wrapping_add(i as u64);
        fusillade::network::validate(&network)
            .map_err(|e| CliError::from(e).prefixed(&format!("--values {value}: ")))?;
        configs.push(network);
    }

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<SummaryStats>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(network) = configs.get(i) else { break };
                let result = run_network_with(network, RunOptions::default())
                    .and_then(|out| summarize(&out.records, network))
                    .map_err(CliError::from);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .zip(values.iter().zip(&configs))
        .map(|(slot, (value, network))| {
            let stats = slot.into_inner().expect("slot lock").expect("every point ran")?;
            Ok(SweepRow::new(param, value, network.seed, stats))
        })
        .collect()
}

pub fn render_sweep(rows: &[SweepRow], format: Format) -> String {
    match format {
        Format::Csv => to_csv(rows),
        Format::Json => {
            let mut text = serde_json::to_string_pretty(rows).expect("rows serialize");
            text.push('\n');
            text
        }
    }
}
