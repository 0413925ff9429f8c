//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mags::certify::{catastrophic_failure, contraction, ensemble_identity, gradient_check, Certificate};
use mags::faults::{FaultModel, FaultProcess};
use mags::harness::{eval_all, train_all, Experiment, RunRecord};
use mags::metrics::{count_comm, eval_fault_rng, Combiner, Policy};
use mags::topology::{build_graph, AggregatorPlacement, GraphKind};

struct Line {
    pass: bool,
    detail: String,
}

fn within_time(start: Instant, limit: Duration, mut line: Line) -> Line {
    let took = start.elapsed();
    line.detail = format!("{} [{:.2}s, limit {}s]", line.detail, took.as_secs_f64(), limit.as_secs());
    line.pass &= took <= limit;
    line
}

fn from_certs(certs: &[Certificate]) -> Line {
    let failed: Vec<String> = certs.iter().filter(|c| !c.pass).map(|c| c.to_string()).collect();
    Line {
        pass: failed.is_empty(),
        detail: if failed.is_empty() { format!("{} checks passed", certs.len()) } else { failed.join("; ") },
    }
}

fn ensemble_criterion() -> Line {
    let start = Instant::now();
    let c = ensemble_identity(&[2, 4, 16], 10, 10_000, Combiner::Geometric, 1);
    within_time(start, Duration::from_secs(5), Line { pass: c.pass, detail: c.detail })
}

fn contraction_criterion() -> Line {
    let start = Instant::now();
    let line = match contraction(100, 10, 1) {
        Ok(certs) => from_certs(&certs),
        Err(e) => Line { pass: false, detail: e.to_string() },
    };
    within_time(start, Duration::from_secs(10), line)
}

fn failure_criterion() -> Line {
    let start = Instant::now();
    let mut certs = Vec::new();
    for rate in [0.3, 0.5] {
        for k in [1, 2, 4] {
            match catastrophic_failure(rate, k, 1_000_000, 1) {
                Ok(c) => certs.extend(c),
                Err(e) => return Line { pass: false, detail: e.to_string() },
            }
        }
    }
    within_time(start, Duration::from_secs(30), from_certs(&certs))
}

fn comm_criterion() -> Line {
    let start = Instant::now();
    // (name, aggregators, gossip rounds, expected, tolerance)
    let cases = [
        ("VFL", 1, 0, 10.5, 0.4),
        ("4-MACL", 4, 0, 42.0, 1.0),
        ("4-MACL-G2", 4, 2, 126.0, 2.0),
        ("MACL", 16, 0, 168.0, 3.0),
        ("MACL-G4", 16, 4, 840.0, 10.0),
    ];
    let fault = FaultModel::Communication { rate: 0.3 };
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, k, g, expected, tol) in cases {
        let base = build_graph(GraphKind::Complete, 16, k, &AggregatorPlacement::Lowest).expect("valid graph");
        let mut process = FaultProcess::new(fault, &base).expect("valid fault model");
        let mut rng = eval_fault_rng(1, &fault);
        let n = 10_000;
        let mut total = 0usize;
        for _ in 0..n {
            let r = process.realize(&base, g + 1, &mut rng).expect("realization");
            total += count_comm(&r, base.aggregators()).expect("rounds present").total();
        }
        let mean = total as f64 / n as f64;
        let ok = (mean - expected).abs() <= tol;
        pass &= ok;
        parts.push(format!("{name} {mean:.2} (want {expected} ± {tol}){}", if ok { "" } else { " MISS" }));
    }
    within_time(start, Duration::from_secs(30), Line { pass, detail: parts.join(", ") })
}

fn gradient_criterion() -> Line {
    let start = Instant::now();
    let line = match gradient_check(1) {
        Ok(c) => Line { pass: c.pass, detail: c.detail },
        Err(e) => Line { pass: false, detail: e.to_string() },
    };
    within_time(start, Duration::from_secs(10), line)
}

const DESK_CONFIG: &str = r#"
seeds = [1, 2, 3, 4]
[data]
source = "synthetic"
n = 10000
test_count = 2000
noise = 0.3
classes = 10
[graph]
kind = "complete"
[train]
methods = ["VFL", "MACL", "CD-MACL"]
epochs = 20
dropout_rate = 0.3
[eval]
methods = ["VFL", "MACL", "MACL-G4", "CD-MACL", "CD-MACL-G4"]
fault_kinds = ["communication", "device"]
rates = [0.0, 0.3, 0.5]
"#;

fn desk_runs(out: &Path) -> mags::Result<Vec<RunRecord>> {
    let mut exp = Experiment::from_str(DESK_CONFIG, out)?;
    exp.config.out_dir = out.to_path_buf();
    train_all(&exp, None)?;
    eval_all(&exp, None)
}

type Key = (String, String, u64, u64);

fn index(records: &[RunRecord]) -> BTreeMap<Key, BTreeMap<Policy, Option<f64>>> {
    let mut map: BTreeMap<Key, BTreeMap<Policy, Option<f64>>> = BTreeMap::new();
    for r in records {
        map.entry((r.method.clone(), r.fault.clone(), r.rate.to_bits(), r.seed))
            .or_default()
            .insert(r.policy, r.accuracy);
    }
    map
}

fn acc(map: &BTreeMap<Key, BTreeMap<Policy, Option<f64>>>, method: &str, fault: &str, rate: f64, seed: u64, policy: Policy) -> f64 {
    map.get(&(method.to_string(), fault.to_string(), rate.to_bits(), seed))
        .and_then(|p| p.get(&policy).copied().flatten())
        .unwrap_or(f64::NAN)
}

fn end_to_end_criterion(map: &BTreeMap<Key, BTreeMap<Policy, Option<f64>>>, seeds: &[u64]) -> Line {
    let mean = |m: &str| seeds.iter().map(|&s| acc(map, m, "communication", 0.5, s, Policy::ActiveRand)).sum::<f64>() / seeds.len() as f64;
    let (vfl, macl, cd) = (mean("VFL"), mean("MACL"), mean("CD-MACL-G4"));
    let pass = cd > macl && macl > vfl && cd - vfl >= 0.20;
    Line {
        pass,
        detail: format!("comm fault 0.5, active_rand over {} seeds: CD-MACL-G4 {cd:.4} > MACL {macl:.4} > VFL {vfl:.4}, gap {:.4} (need ≥ 0.20)", seeds.len(), cd - vfl),
    }
}

fn ordering_criterion(map: &BTreeMap<Key, BTreeMap<Policy, Option<f64>>>) -> Line {
    let mut checked = 0;
    let mut violations = Vec::new();
    for ((method, fault, rate, seed), p) in map {
        if method.contains("VFL") {
            continue;
        }
        let get = |x: Policy| p.get(&x).copied().flatten().unwrap_or(f64::NAN);
        let (rand, best, worst, any) = (get(Policy::ActiveRand), get(Policy::ActiveBest), get(Policy::ActiveWorst), get(Policy::AnyRand));
        checked += 1;
        if !(best >= rand && rand >= worst && any <= rand) {
            violations.push(format!("{method}/{fault}/{}/seed{seed}: best {best} rand {rand} worst {worst} any {any}", f64::from_bits(*rate)));
        }
    }
    Line {
        pass: violations.is_empty() && checked > 0,
        detail: if violations.is_empty() { format!("{checked} cells ordered") } else { violations.join("; ") },
    }
}

fn gossip_comparison(map: &BTreeMap<Key, BTreeMap<Policy, Option<f64>>>, fault: &str, seeds: &[u64]) -> Line {
    let mut checked = 0;
    let mut violations = Vec::new();
    for rate in [0.3, 0.5] {
        for &s in seeds {
            let g0 = acc(map, "CD-MACL", fault, rate, s, Policy::ActiveRand);
            let g4 = acc(map, "CD-MACL-G4", fault, rate, s, Policy::ActiveRand);
            checked += 1;
            if g4.is_nan() || g0.is_nan() || g4 < g0 {
                violations.push(format!("{fault}/{rate}/seed{s}: G4 {g4} < G0 {g0}"));
            }
        }
    }
    Line {
        pass: violations.is_empty(),
        detail: if violations.is_empty() { format!("{fault} faults: G4 ≥ G0 in {checked} (rate, seed) cells") } else { violations.join("; ") },
    }
}

fn main() -> ExitCode {
    let mut lines: Vec<(u32, &str, Line)> = vec![
        (1, "ensemble identity", ensemble_criterion()),
        (2, "gossip contraction", contraction_criterion()),
        (3, "catastrophic failure and selection", failure_criterion()),
        (4, "communication counts", comm_criterion()),
        (5, "split gradients", gradient_criterion()),
    ];

    let start = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    let seeds = [1, 2, 3, 4];
    match desk_runs(dir.path()) {
        Ok(records) => {
            let map = index(&records);
            let e2e = within_time(start, Duration::from_secs(20 * 60), end_to_end_criterion(&map, &seeds));
            lines.push((6, "desk-scale end-to-end", e2e));
            lines.push((7, "oracle ordering", ordering_criterion(&map)));
            lines.push((8, "gossip benefit", gossip_comparison(&map, "communication", &seeds)));
            // Device faults are outside the criterion; the comparison is printed for reference only.
            let info = gossip_comparison(&map, "device", &seeds);
            println!("INFO gossip benefit under device faults (not gated): {}", info.detail);
        }
        Err(e) => {
            for (i, name) in [(6, "desk-scale end-to-end"), (7, "oracle ordering"), (8, "gossip benefit")] {
                lines.push((i, name, Line { pass: false, detail: format!("desk-scale run failed: {e}") }));
            }
        }
    }

    let mut all = true;
    for (i, name, line) in &lines {
        all &= line.pass;
        println!("{} criterion {i} ({name}): {}", if line.pass { "PASS" } else { "FAIL" }, line.detail);
    }
    if all {
        println!("acceptance: all {} criteria passed", lines.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
