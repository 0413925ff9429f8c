//! Self-contained numerical certificates: ensemble decomposition identity,
//! gossip contraction, catastrophic-failure probability, conditional
//! selection frequency and end-to-end gradients.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::faults::{active_set, sample_device_faults};
use crate::inference::{Architecture, SplitModel};
use crate::metrics::{ensemble_decomposition_with, select_with, Combiner, Policy, SelectionDraw};
use crate::nn::{log_softmax, Matrix};
use crate::rng::{self, Stream};
use crate::topology::{build_graph, consensus_matrix, spectral_radius, AggregatorPlacement, DeviceGraph, GraphKind};
use crate::train::{split_loss, split_loss_and_grad, BatchPlan};

/// Eigenvalue governing gossip on a 16-ring with self-loops:
/// `(1 + 2 cos(π/8)) / 3`.
pub const RING16_RADIUS: f64 = 0.949_253_021_674_191_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub seed: u64,
    pub combiner: Combiner,
    pub ensemble_trials: usize,
    pub contraction_inits: usize,
    pub failure_draws: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { seed: 1, combiner: Combiner::Geometric, ensemble_trials: 10_000, contraction_inits: 100, failure_draws: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub certificates: Vec<Certificate>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.certificates.iter().all(|c| c.pass)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.certificates {
            writeln!(w, "{c}")?;
        }
        writeln!(w, "{}", if self.all_pass() { "all certificates passed" } else { "some certificates FAILED" })?;
        Ok(())
    }
}

/// Runs every certificate. Timings are not part of the report so that two
/// runs with the same options print identical text.
pub fn run_all(opts: &CertifyOptions) -> Result<Report> {
    let mut certificates = Vec::new();
    certificates.push(ensemble_identity(&[2, 4, 16], 10, opts.ensemble_trials, opts.combiner, opts.seed));
    certificates.extend(contraction(opts.contraction_inits, 10, opts.seed)?);
    for rate in [0.3, 0.5] {
        for k in [1, 2, 4] {
            certificates.extend(catastrophic_failure(rate, k, opts.failure_draws, opts.seed)?);
        }
    }
    certificates.push(gradient_check(opts.seed)?);
    Ok(Report { certificates })
}

fn random_members<R: Rng>(rng: &mut R, k: usize, classes: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 2.0).expect("valid std");
    (0..k)
        .map(|_| log_softmax(&(0..classes).map(|_| normal.sample(rng)).collect::<Vec<_>>()))
        .collect()
}

/// Ensemble loss = mean member loss − diversity, with diversity ≥ 0, over
/// `trials` random member sets per ensemble size.
pub fn ensemble_identity(sizes: &[usize], classes: usize, trials: usize, combiner: Combiner, seed: u64) -> Certificate {
    let mut rng = rng::salted(seed, Stream::Certificate, &[2]);
    let (mut worst, mut min_div) = (0.0f64, f64::INFINITY);
    let mut failures = 0usize;
    for &k in sizes {
        for _ in 0..trials {
            let members = random_members(&mut rng, k, classes);
            let label = rng.random_range(0..classes);
            match ensemble_decomposition_with(&members, label, combiner) {
                Ok(d) => {
                    worst = worst.max(d.residual().abs());
                    min_div = min_div.min(d.diversity);
                }
                Err(_) => failures += 1,
            }
        }
    }
    Certificate {
        name: "ensemble-identity".into(),
        pass: failures == 0 && worst < 1e-9 && min_div >= 0.0,
        detail: format!("sizes {sizes:?}, {trials} sets each: max residual {worst:.3e}, min diversity {min_div:.3e}"),
    }
}

fn regular_graph(kind: GraphKind) -> Result<DeviceGraph> {
    build_graph(kind, 16, 16, &AggregatorPlacement::Lowest)
}

/// Disagreement after `G` averaging rounds is at most
/// `λ^G · √C · max pairwise distance`, on ring, complete and torus graphs.
pub fn contraction(inits: usize, max_rounds: usize, seed: u64) -> Result<Vec<Certificate>> {
    let mut out = Vec::new();
    let mut rng = rng::salted(seed, Stream::Certificate, &[3]);
    let dim = 10;
    for kind in [GraphKind::Ring, GraphKind::Complete, GraphKind::Torus] {
        let g = regular_graph(kind)?;
        let v = consensus_matrix(&g);
        let lambda = spectral_radius(&v)?;
        let c = g.device_count();
        let mut worst_ratio = 0.0f64;
        let mut violations = 0usize;
        for _ in 0..inits {
            let y0 = Matrix::from_vec(c, dim, (0..c * dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let mean: Vec<f64> = (0..dim).map(|j| (0..c).map(|i| y0.get(i, j)).sum::<f64>() / c as f64).collect();
            let mut spread = 0.0f64;
            for a in 0..c {
                for b in 0..c {
                    spread = spread.max(dist(y0.row(a), y0.row(b)));
                }
            }
            let mut y = y0;
            for rounds in 1..=max_rounds {
                y = v.v.matmul(&y)?;
                let bound = lambda.powi(rounds as i32) * (c as f64).sqrt() * spread;
                for i in 0..c {
                    let d = dist(y.row(i), &mean);
                    if d > bound + 1e-12 {
                        violations += 1;
                    }
                    if bound > 0.0 {
                        worst_ratio = worst_ratio.max(d / bound);
                    }
                }
            }
        }
        out.push(Certificate {
            name: format!("contraction-{kind}-16"),
            pass: violations == 0,
            detail: format!(
                "radius {lambda:.6}, G in 1..={max_rounds}, {inits} inits: {violations} violations, max distance/bound {worst_ratio:.3e}"
            ),
        });
        if kind == GraphKind::Ring {
            let err = (lambda - RING16_RADIUS).abs();
            out.push(Certificate {
                name: "ring-16-radius".into(),
                pass: err < 1e-6,
                detail: format!("power iteration {lambda:.9} vs analytic {RING16_RADIUS:.9} (error {err:.2e})"),
            });
        }
    }
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Empirical `Pr(|A| = 0)` against `r^K` under device faults, and the
/// conditional frequency with which `active_rand` picks each aggregator
/// given a non-empty active set against `1/K`.
pub fn catastrophic_failure(rate: f64, k: usize, draws: usize, seed: u64) -> Result<Vec<Certificate>> {
    let g = build_graph(GraphKind::Complete, k, k, &AggregatorPlacement::Lowest)?;
    let mut rng = rng::salted(seed, Stream::Certificate, &[4, rate.to_bits(), k as u64]);
    let predicted = vec![Some(0); k];
    let mut empty = 0usize;
    let mut picked = vec![0usize; k];
    for _ in 0..draws {
        let realized = sample_device_faults(&g, rate, &mut rng);
        let active = active_set(&realized, g.aggregators());
        let draw = SelectionDraw::sample(&mut rng, 2);
        if active.is_empty() {
            empty += 1;
            continue;
        }
        let s = select_with(Policy::ActiveRand, g.aggregators(), &predicted, &active, k, 0, draw);
        picked[s.source.expect("active set is non-empty")] += 1;
    }
    let n = draws as f64;
    let p = rate.powi(k as i32);
    let observed = empty as f64 / n;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let mut out = vec![Certificate {
        name: format!("empty-active-r{rate}-K{k}"),
        pass: (observed - p).abs() <= 3.0 * sigma,
        detail: format!("{observed:.6} vs r^K = {p:.6} (3 sigma = {:.2e}, {draws} draws)", 3.0 * sigma),
    }];
    let nonempty = (draws - empty) as f64;
    let q = 1.0 / k as f64;
    let sigma = (q * (1.0 - q) / nonempty).sqrt();
    let worst = picked.iter().map(|&c| (c as f64 / nonempty - q).abs()).fold(0.0, f64::max);
    out.push(Certificate {
        name: format!("selection-frequency-r{rate}-K{k}"),
        pass: worst <= 3.0 * sigma || k == 1 && worst == 0.0,
        detail: format!("max |freq − 1/K| = {worst:.2e} (3 sigma = {:.2e})", 3.0 * sigma),
    });
    Ok(out)
}

/// Relative error with the denominator floored at 1e-4, so parameters whose
/// true gradient is (near) zero are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Analytic gradients of the summed objective against central finite
/// differences on a 2-client, 2-aggregator toy, under a clean plan, a
/// communication-dropout plan, a party-dropout plan and a plan with two
/// gossip rounds inside the forward pass.
pub fn gradient_check(seed: u64) -> Result<Certificate> {
    let g = build_graph(GraphKind::Complete, 2, 2, &AggregatorPlacement::Lowest)?;
    let arch = Architecture { encoder: vec![3, 4, 2], head_hidden: vec![5], classes: 3 };
    let mut rng = rng::salted(seed, Stream::Certificate, &[5]);
    let mut model = SplitModel::new(&arch, 2, g.aggregators(), &mut rng)?;
    let rows = 4;
    let inputs: Vec<Matrix> = (0..2)
        .map(|_| Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();

    let clean = BatchPlan::clean(&g, g.aggregators(), 0);
    let mut cd = clean.clone();
    cd.mask.set(0, 1, false);
    let mut pd = clean.clone();
    pd.mask.restrict_clients(&[true, false]);
    let gossip = BatchPlan::clean(&g, g.aggregators(), 2);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for plan in [&clean, &cd, &pd, &gossip] {
        let (_, grads) = split_loss_and_grad(&model, &inputs, &labels, plan)?;
        let analytic: Vec<f64> = grads.groups().flat_map(|p| p.params().copied().collect::<Vec<_>>()).collect();
        let total = analytic.len();
        for (i, &a) in analytic.iter().enumerate().take(total) {
            let original = nth_param(&mut model, i);
            *original += h;
            let up = split_loss(&model, &inputs, &labels, plan)?;
            *nth_param(&mut model, i) -= 2.0 * h;
            let down = split_loss(&model, &inputs, &labels, plan)?;
            *nth_param(&mut model, i) += h;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
            checked += 1;
        }
    }
    Ok(Certificate {
        name: "split-gradients".into(),
        pass: worst < 1e-6,
        detail: format!("{checked} partial derivatives over 4 plans, max relative error {worst:.2e}"),
    })
}

fn nth_param(model: &mut SplitModel, mut i: usize) -> &mut f64 {
    for g in model.groups_mut() {
        let n = g.param_count();
        if i < n {
            return g.params_mut().nth(i).expect("index within group");
        }
        i -= n;
    }
    panic!("parameter index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_constant_matches_closed_form() {
        let expected = (1.0 + 2.0 * (std::f64::consts::PI / 8.0).cos()) / 3.0;
        assert!((RING16_RADIUS - expected).abs() < 1e-15);
    }

    #[test]
    fn geometric_combiner_passes_and_arithmetic_fails() {
        assert!(ensemble_identity(&[2, 4], 10, 500, Combiner::Geometric, 1).pass);
        assert!(!ensemble_identity(&[2, 4], 10, 500, Combiner::Arithmetic, 1).pass);
    }

    #[test]
    fn contraction_passes_with_few_inits() {
        assert!(contraction(5, 10, 3).unwrap().iter().all(|c| c.pass));
    }

    #[test]
    fn gradients_pass() {
        let c = gradient_check(1).unwrap();
        assert!(c.pass, "{c}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-9), 1e-5);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_lines() {
        let r = Report {
            certificates: vec![Certificate { name: "x".into(), pass: false, detail: "d".into() }],
        };
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "FAIL x: d\nsome certificates FAILED\n");
    }
}
