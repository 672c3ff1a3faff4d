//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the verdicts always print; any failure makes the target fail.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fusillade::algebra::{
    chain_fidelity, failure_prob_multi, min_fusiliers, purify3_analytic, purify3_apply, swap_apply, Endpoint,
    Fidelity, LinkModel, PairRecord, PurifyOutcomes,
};
use fusillade::engine::{Draws, RngStream, StreamKind};
use fusillade::metrics::summarize;
use fusillade::network::{run_network, validate, LinkConfig, NetworkConfig};
use fusillade_cli::commands::simulate;
use fusillade_cli::config::ConfigDocument;

type Verdict = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Verdict);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn four_se(label: &str, hits: usize, trials: usize, expected: f64) -> Result<f64, String> {
    let observed = hits as f64 / trials as f64;
    let se = (expected * (1.0 - expected) / trials as f64).sqrt();
    let z = (observed - expected).abs() / se;
    ensure(z <= 4.0, || format!("{label}: observed {observed:.6}, expected {expected:.6}, z = {z:.2}"))?;
    Ok(z)
}

fn hop(km: f64, p: f64, f: f64, n: u32, m: u32) -> LinkConfig {
    LinkConfig::new(LinkModel::explicit(km, p, Fidelity::new(f).unwrap()), n, m)
}

fn pair(draws: &mut Draws, node: usize, f: Fidelity) -> PairRecord {
    PairRecord::sample(Endpoint::new(node, 0), Endpoint::new(node + 1, 0), f, draws.uniform(), 0.0).unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn purification_fidelity() -> Verdict {
    let f = purify3_analytic(Fidelity::new(0.95).map_err(|e| e.to_string())?).value();
    ensure((f - 0.99275).abs() <= 1e-12, || format!("F' = {f}"))?;
    ensure(f >= 0.99, || format!("F' = {f} below 0.99"))?;
    Ok(format!("F'(0.95) = {f}"))
}

fn rate_reproduction() -> Verdict {
    let mut doc = ConfigDocument::load(&bundled("two_node_40km.json")).map_err(|e| e.line())?;
    let mut report = Vec::new();
    for (km, expected) in [(40.0, 2500.0), (10.0, 10_000.0)] {
        doc.network.links[0].length_km = km;
        let link = &doc.network.links[0];
        ensure(
            link.p_success == Some(1.0) && link.m_fusilands == 1 && doc.network.tau_slot_ns == 0 && doc.network.proc_ns == 0,
            || "bundled config is not p = 1, m = 1 with zero overheads".into(),
        )?;
        let rate = simulate(&doc, false).map_err(|e| e.line())?.document.summary.pairs_per_second;
        ensure((rate - expected).abs() <= 1e-3 * expected, || format!("{km} km: {rate} pairs/s, expected {expected}"))?;
        report.push(format!("{km} km -> {rate}/s"));
    }
    Ok(report.join(", "))
}

fn resource_table() -> Verdict {
    let mut report = Vec::new();
    for (n, m) in [(16u32, 1u32), (24, 2), (70, 10), (485, 100)] {
        let pf = failure_prob_multi(n, m, 0.25).map_err(|e| e.to_string())?;
        ensure((0.005..=0.0155).contains(&pf), || format!("p_f({n}, {m}) = {pf}"))?;
        let strict = min_fusiliers(m, 0.25, 0.01).map_err(|e| e.to_string())?;
        let at = failure_prob_multi(strict, m, 0.25).map_err(|e| e.to_string())?;
        let below = failure_prob_multi(strict - 1, m, 0.25).map_err(|e| e.to_string())?;
        ensure(at < 0.01 && 0.01 <= below, || format!("m = {m}: boundary fails at n = {strict}"))?;
        report.push(format!("({n},{m}) p_f={pf:.5} strict n={strict}"));
    }
    Ok(report.join("; "))
}

fn monte_carlo() -> Verdict {
    let mut worst = 0.0f64;

    const CYCLES: u64 = 100_000;
    for (n, m) in [(16u32, 1u32), (24, 2), (12, 3)] {
        let cfg = NetworkConfig::uniform(1, hop(40.0, 0.25, 1.0, n, m), CYCLES, 3);
        let out = run_network(&cfg).map_err(|e| e.to_string())?;
        let short = out.hop_cycles[0].iter().filter(|c| c.successes() < m as usize).count();
        let pf = failure_prob_multi(n, m, 0.25).map_err(|e| e.to_string())?;
        worst = worst.max(four_se(&format!("hop n={n} m={m}"), short, CYCLES as usize, pf)?);
    }

    const TRIPLES: usize = 1_000_000;
    for (i, f) in [0.8, 0.9, 0.95].into_iter().enumerate() {
        let fid = Fidelity::new(f).unwrap();
        let mut draws = RngStream::new(77).substream(StreamKind::Purify, i, 0);
        let mut residual = 0;
        for _ in 0..TRIPLES {
            let pairs = [0; 3].map(|_| pair(&mut draws, 0, fid));
            let bits = [draws.bit(), draws.bit(), draws.bit(), draws.bit(), draws.bit(), draws.bit()];
            let outcomes = PurifyOutcomes::consistent_with(&pairs, bits[0], bits[1], [bits[2], bits[3], bits[4], bits[5]]);
            residual += usize::from(purify3_apply(&pairs, &outcomes).map_err(|e| e.to_string())?.x_error);
        }
        let expected = 1.0 - purify3_analytic(fid).value();
        worst = worst.max(four_se(&format!("purify F={f}"), residual, TRIPLES, expected)?);
    }

    const CHAINS: usize = 1_000_000;
    let hops: Vec<Fidelity> = [0.97, 0.95, 0.99, 0.9, 0.96].map(|f| Fidelity::new(f).unwrap()).into();
    let mut draws = RngStream::new(78).substream(StreamKind::Swap, 5, 0);
    let mut errors = 0;
    for _ in 0..CHAINS {
        let mut chain = pair(&mut draws, 0, hops[0]);
        for (h, &f) in hops.iter().enumerate().skip(1) {
            let next = pair(&mut draws, h, f);
            chain = swap_apply(&chain, &next, draws.bit(), draws.bit()).map_err(|e| e.to_string())?;
        }
        ensure(chain.physical_flip() ^ chain.frame.x == chain.x_error, || "frame does not explain the flip".into())?;
        errors += usize::from(chain.x_error);
    }
    let expected = 1.0 - chain_fidelity(&hops).map_err(|e| e.to_string())?.value();
    worst = worst.max(four_se("5-hop chain", errors, CHAINS, expected)?);
    Ok(format!("largest deviation {worst:.2} standard errors"))
}

fn enumerate_failure(n: u32, m: u32, p: f64) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for outcomes in (0u32..1 << n).filter(|o| o.count_ones() < m) {
        let k = outcomes.count_ones() as i32;
        let term = p.powi(k) * (1.0 - p).powi(n as i32 - k);
        let t = sum + term;
        carry += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    sum + carry
}

fn brute_force() -> Verdict {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for p in [0.1, 0.25, 0.5] {
        for n in 1..=16 {
            for m in 1..=n {
                let diff = (failure_prob_multi(n, m, p).map_err(|e| e.to_string())? - enumerate_failure(n, m, p)).abs();
                ensure(diff <= 1e-12, || format!("n={n} m={m} p={p}: difference {diff:e}"))?;
                worst = worst.max(diff);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, max difference {worst:.1e}"))
}

fn pipelining() -> Verdict {
    let mut cfg = NetworkConfig::uniform(4, hop(25.0, 1.0, 0.9, 6, 3), 120, 12);
    cfg.links[1].length_km = 40.0;
    cfg.links[2].length_km = 10.0;
    let out = run_network(&cfg).map_err(|e| e.to_string())?;
    let period = out.schedule.cycle_period;
    ensure(out.records.len() as u64 == 120 * out.schedule.links_per_cycle as u64, || {
        format!("{} records", out.records.len())
    })?;
    for r in &out.records {
        ensure(r.frame_available_at - r.established_at == period, || {
            format!("cycle {} slot {}: latency {:?}", r.cycle, r.slot, r.frame_available_at - r.established_at)
        })?;
    }
    let stats = summarize(&out.records, &cfg).map_err(|e| e.to_string())?;
    let exact = out.schedule.links_per_cycle as f64 / period.as_secs_f64();
    ensure(stats.pairs_per_second == exact, || format!("{} vs {exact}", stats.pairs_per_second))?;
    Ok(format!("{} records, latency {} ns, {exact} pairs/s", out.records.len(), period.0))
}

fn butterfly() -> Verdict {
    let mut cfg = NetworkConfig::uniform(6, hop(10.0, 0.5, 0.92, 8, 2), 3_000, 31);
    for (link, km) in cfg.links.iter_mut().zip([12.0, 30.0, 7.0, 18.0, 25.0, 9.0]) {
        link.length_km = km;
    }
    let plain = run_network(&cfg).map_err(|e| e.to_string())?;
    cfg.butterfly = true;
    let split = run_network(&cfg).map_err(|e| e.to_string())?;

    // Exhaustive scan over interior nodes of |left delay − right delay|.
    let schedule = validate(&cfg).map_err(|e| e.to_string())?;
    let offsets = &schedule.herald_offsets;
    let total = offsets.last().unwrap().0 as i128;
    let scan = (1..offsets.len() - 1)
        .min_by_key(|&j| ((offsets[j].0 as i128) - (total - offsets[j].0 as i128)).abs())
        .unwrap();
    ensure(split.split == Some(scan), || format!("split {:?}, scan says {scan}", split.split))?;

    let errors = |records: &[fusillade::network::EndToEndRecord]| {
        records.iter().map(|r| (r.cycle, r.slot, r.pair.x_error)).collect::<Vec<_>>()
    };
    ensure(errors(&plain.records) == errors(&split.records), || "x_error sequences differ".into())?;
    ensure(!plain.records.is_empty(), || "no pairs".into())?;
    Ok(format!("split node {scan}, {} identical records", plain.records.len()))
}

fn determinism() -> Verdict {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let config = bundled("purified_chain.json");
    let mut files = Vec::new();
    for run in 0..2 {
        let summary = dir.join(format!("summary_{run}.json"));
        let trace = dir.join(format!("trace_{run}.jsonl"));
        let status = Command::new(env!("CARGO_BIN_EXE_fusillade"))
            .arg("simulate")
            .arg(&config)
            .arg("--out")
            .arg(&summary)
            .arg("--trace")
            .arg(&trace)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("simulate exited with {status}"))?;
        files.push((std::fs::read(&summary).map_err(|e| e.to_string())?, std::fs::read(&trace).map_err(|e| e.to_string())?));
    }
    ensure(files[0].0 == files[1].0, || "summaries differ".into())?;
    ensure(files[0].1 == files[1].1, || "traces differ".into())?;
    Ok(format!("summary {} bytes, trace {} bytes, byte-identical", files[0].0.len(), files[0].1.len()))
}

fn asymptotic_trend() -> Verdict {
    let mut ratios = Vec::new();
    for m in [1u32, 2, 10, 100] {
        ratios.push(f64::from(min_fusiliers(m, 0.25, 0.01).map_err(|e| e.to_string())?) / f64::from(m));
    }
    ensure(ratios.windows(2).all(|w| w[1] <= w[0]), || format!("{ratios:?} increases"))?;
    ensure(ratios.iter().all(|&r| r >= 4.0), || format!("{ratios:?} dips below 1/p"))?;
    Ok(format!("n/m = {ratios:?}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("purified fidelity at F = 0.95", Duration::from_millis(100), purification_fidelity),
        ("2-node rates at 40 km and 10 km", Duration::from_secs(2), rate_reproduction),
        ("resource table and strict sizes", Duration::from_secs(1), resource_table),
        ("Monte Carlo against closed forms", Duration::from_secs(30), monte_carlo),
        ("binomial tail against enumeration", Duration::from_secs(10), brute_force),
        ("pipelining and frame latency", Duration::from_secs(5), pipelining),
        ("butterfly invariance", Duration::from_secs(5), butterfly),
        ("byte-identical simulate output", Duration::from_secs(10), determinism),
        ("fusiliers per fusiland trend", Duration::from_secs(1), asymptotic_trend),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let timing = if elapsed > budget {
            format!("{elapsed:.2?}, over the {budget:?} budget")
        } else {
            format!("{elapsed:.2?}")
        };
        match verdict {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail} [{timing}]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {reason} [{timing}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
