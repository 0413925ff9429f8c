//! Selection policies, Monte Carlo dynamic-risk estimation, communication
//! accounting and the ensemble decomposition.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::data::ClientData;
use crate::error::{Error, Result};
use crate::faults::{active_set, FaultModel, FaultProcess, RealizedGraph};
use crate::inference::{mags_infer_on, SplitModel};
use crate::nn::log_softmax;
use crate::rng::{self, Stream};
use crate::topology::DeviceGraph;

/// Markov steps discarded before evaluation so the chain starts near its
/// stationary fault rate.
pub const MARKOV_BURN_IN: usize = 100;

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How the external entity turns per-aggregator predictions into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    ActiveRand,
    ActiveBest,
    ActiveWorst,
    AnyRand,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::ActiveRand, Policy::ActiveBest, Policy::ActiveWorst, Policy::AnyRand];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::ActiveRand => "active_rand",
            Policy::ActiveBest => "active_best",
            Policy::ActiveWorst => "active_worst",
            Policy::AnyRand => "any_rand",
        }
    }

    /// The oracle policies say nothing beyond `active_rand` with a single
    /// aggregator, so they are reported as undefined there.
    pub fn defined_for(&self, aggregators: usize) -> bool {
        aggregators > 1 || matches!(self, Policy::ActiveRand | Policy::AnyRand)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

/// Per-sample randomness shared by every policy: a uniform `u` that picks
/// the selected device, and the class guessed when nothing usable is picked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionDraw {
    pub u: f64,
    pub fallback: usize,
}

impl SelectionDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, classes: usize) -> Self {
        Self { u: rng.random::<f64>(), fallback: rng.random_range(0..classes.max(1)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub predicted: usize,
    pub correct: bool,
    /// Device whose prediction was used; `None` means a uniform guess.
    pub source: Option<usize>,
}

fn pick(len: usize, u: f64) -> usize {
    ((u * len as f64) as usize).min(len - 1)
}

/// Applies `policy` given each aggregator's predicted class (`None` when the
/// aggregator is dead) and the active set `active` (device indices).
pub fn select_with(
    policy: Policy,
    aggregators: &[usize],
    predicted: &[Option<usize>],
    active: &[usize],
    devices: usize,
    label: usize,
    draw: SelectionDraw,
) -> Selection {
    let guess = Selection { predicted: draw.fallback, correct: draw.fallback == label, source: None };
    let prediction_of = |d: usize| -> Option<usize> {
        let i = aggregators.binary_search(&d).ok()?;
        predicted[i]
    };
    let from = |d: usize| -> Selection {
        match prediction_of(d) {
            Some(p) => Selection { predicted: p, correct: p == label, source: Some(d) },
            None => guess,
        }
    };
    if active.is_empty() && policy != Policy::AnyRand {
        return guess;
    }
    match policy {
        Policy::ActiveRand => from(active[pick(active.len(), draw.u)]),
        Policy::ActiveBest => active
            .iter()
            .map(|&d| from(d))
            .find(|s| s.correct)
            .unwrap_or_else(|| from(active[0])),
        Policy::ActiveWorst => active
            .iter()
            .map(|&d| from(d))
            .find(|s| !s.correct)
            .unwrap_or_else(|| from(active[0])),
        Policy::AnyRand => {
            let d = pick(devices.max(1), draw.u);
            if active.contains(&d) {
                from(d)
            } else {
                guess
            }
        }
    }
}

/// [`select_with`] with a fresh draw from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn select<R: Rng + ?Sized>(
    policy: Policy,
    aggregators: &[usize],
    predicted: &[Option<usize>],
    active: &[usize],
    devices: usize,
    label: usize,
    classes: usize,
    rng: &mut R,
) -> Selection {
    select_with(policy, aggregators, predicted, active, devices, label, SelectionDraw::sample(rng, classes))
}

/// Messages of one inference: one per delivered client→aggregator transfer
/// per round. The final hop to the external entity is not counted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommCount {
    pub aggregation: usize,
    pub gossip: Vec<usize>,
}

impl CommCount {
    pub fn total(&self) -> usize {
        self.aggregation + self.gossip.iter().sum::<usize>()
    }
}

fn messages_into_aggregators(realized: &RealizedGraph, aggregators: &[usize]) -> usize {
    let c = realized.device_count();
    aggregators
        .iter()
        .filter(|&&k| realized.is_alive(k))
        .map(|&k| (0..c).filter(|&s| s != k && realized.delivers(k, s)).count())
        .sum()
}

/// Counts messages over `realizations` (aggregation round first, then one
/// per gossip round). During gossip every delivered neighbor message into an
/// aggregator counts, not only those from other aggregators.
pub fn count_comm(realizations: &[RealizedGraph], aggregators: &[usize]) -> Result<CommCount> {
    let (first, rest) = realizations.split_first().ok_or_else(|| Error::Input("no realizations to count".into()))?;
    Ok(CommCount {
        aggregation: messages_into_aggregators(first, aggregators),
        gossip: rest.iter().map(|r| messages_into_aggregators(r, aggregators)).collect(),
    })
}

/// Knobs of one evaluation cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub fault: FaultModel,
    pub gossip_rounds: usize,
    pub batch_size: usize,
    /// Passes over the test set per seed.
    pub trials: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { fault: FaultModel::None, gossip_rounds: 0, batch_size: 64, trials: 1 }
    }
}

/// Outcome of one seed of one evaluation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Accuracy per requested policy, same order.
    pub accuracy: Vec<f64>,
    /// Mean messages per inference.
    pub comm_mean: f64,
    pub samples: usize,
    /// Fraction of inferences with an empty active set.
    pub empty_active: f64,
}

fn fault_salts(fault: &FaultModel) -> [u64; 2] {
    let kind = match fault {
        FaultModel::None => 0,
        FaultModel::Device { .. } => 1,
        FaultModel::Communication { .. } => 2,
        FaultModel::MarkovComm { .. } => 3,
    };
    [kind, fault.rate().to_bits()]
}

/// Fault-sampling stream of an evaluation cell. It depends only on the seed
/// and the fault model, so changing the gossip rounds or the policy never
/// changes which faults occur.
pub fn eval_fault_rng(seed: u64, fault: &FaultModel) -> rng::Rng {
    rng::salted(seed, Stream::Faults, &fault_salts(fault))
}

/// Evaluates every policy in one pass: faults are drawn once per batch and
/// shared by the policies, as is each sample's selection draw.
pub fn evaluate_seed(
    model: &SplitModel,
    data: &ClientData,
    base: &DeviceGraph,
    policies: &[Policy],
    settings: &EvalSettings,
    seed: u64,
) -> Result<SeedResult> {
    if settings.batch_size == 0 || settings.trials == 0 {
        return Err(Error::Config("batch size and trials must be at least 1".into()));
    }
    let mut fault_rng = eval_fault_rng(seed, &settings.fault);
    let mut select_rng = rng::salted(seed, Stream::Selection, &fault_salts(&settings.fault));
    let mut process = FaultProcess::new(settings.fault, base)?;
    process.burn_in(base, MARKOV_BURN_IN, &mut fault_rng)?;

    let classes = model.class_count;
    let mut correct = vec![0usize; policies.len()];
    let (mut samples, mut batches, mut comm, mut empty) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..settings.trials {
        for start in (0..data.len()).step_by(settings.batch_size) {
            let (inputs, labels) = data.chunk(start..(start + settings.batch_size).min(data.len()));
            let realizations = process.realize(base, settings.gossip_rounds + 1, &mut fault_rng)?;
            comm += count_comm(&realizations, &model.aggregators)?.total();
            let out = mags_infer_on(model, &inputs, &realizations, false)?;
            let active = active_set(out.final_realization(), &model.aggregators);
            empty += usize::from(active.is_empty());
            batches += 1;
            for (row, &label) in labels.iter().enumerate() {
                let predicted: Vec<Option<usize>> =
                    out.log_probs.iter().map(|lp| lp.as_ref().map(|m| argmax(m.row(row)))).collect();
                let draw = SelectionDraw::sample(&mut select_rng, classes);
                for (n, &policy) in correct.iter_mut().zip(policies) {
                    let s = select_with(policy, &model.aggregators, &predicted, &active, base.device_count(), label, draw);
                    *n += usize::from(s.correct);
                }
                samples += 1;
            }
        }
    }
    let denom = samples.max(1) as f64;
    Ok(SeedResult {
        seed,
        accuracy: correct.iter().map(|&c| c as f64 / denom).collect(),
        comm_mean: comm as f64 / batches.max(1) as f64,
        samples,
        empty_active: empty as f64 / batches.max(1) as f64,
    })
}

/// Seed-level results for one model per seed, run in parallel.
pub fn evaluate_cell(
    models: &[(u64, &SplitModel)],
    data: &ClientData,
    base: &DeviceGraph,
    policies: &[Policy],
    settings: &EvalSettings,
) -> Result<Vec<SeedResult>> {
    models
        .par_iter()
        .map(|&(seed, model)| evaluate_seed(model, data, base, policies, settings, seed))
        .collect()
}

/// Mean and spread of one policy's accuracy over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub policy: Policy,
    pub fault: FaultModel,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub seeds: usize,
    pub samples: usize,
    pub comm_mean: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(policies: &[Policy], fault: FaultModel, results: &[SeedResult]) -> Vec<RiskEstimate> {
    let (comm_mean, _) = mean_std(&results.iter().map(|r| r.comm_mean).collect::<Vec<_>>());
    policies
        .iter()
        .enumerate()
        .map(|(i, &policy)| {
            let acc: Vec<f64> = results.iter().map(|r| r.accuracy[i]).collect();
            let (mean, std) = mean_std(&acc);
            RiskEstimate {
                policy,
                fault,
                mean,
                std,
                seeds: results.len(),
                samples: results.iter().map(|r| r.samples).sum(),
                comm_mean,
            }
        })
        .collect()
}

/// Accuracy of one policy, averaged over `seeds` with the same model.
pub fn estimate_risk(
    model: &SplitModel,
    data: &ClientData,
    base: &DeviceGraph,
    policy: Policy,
    settings: &EvalSettings,
    seeds: &[u64],
) -> Result<RiskEstimate> {
    let models: Vec<(u64, &SplitModel)> = seeds.iter().map(|&s| (s, model)).collect();
    let results = evaluate_cell(&models, data, base, &[policy], settings)?;
    Ok(summarize(&[policy], settings.fault, &results).remove(0))
}

/// How member predictions are combined into the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combiner {
    /// Mean of log-probabilities, renormalized.
    #[default]
    Geometric,
    /// Mean of probabilities.
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub ensemble_loss: f64,
    pub mean_member_loss: f64,
    /// Mean KL divergence from the ensemble to each member.
    pub diversity: f64,
    /// Log-partition of the geometric combination (`-diversity` when exact).
    pub log_partition: f64,
}

impl Decomposition {
    /// How far the ensemble loss is from `mean member loss − diversity`.
    pub fn residual(&self) -> f64 {
        self.ensemble_loss - (self.mean_member_loss - self.diversity)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy decomposition of a geometric-mean ensemble of
/// `members` (each a log-probability vector) at class `label`.
pub fn ensemble_decomposition(members: &[Vec<f64>], label: usize) -> Result<Decomposition> {
    ensemble_decomposition_with(members, label, Combiner::Geometric)
}

pub fn ensemble_decomposition_with(members: &[Vec<f64>], label: usize, combiner: Combiner) -> Result<Decomposition> {
    let first = members.first().ok_or_else(|| Error::Input("ensemble needs at least one member".into()))?;
    let classes = first.len();
    if label >= classes || members.iter().any(|m| m.len() != classes) {
        return Err(Error::Shape(format!("members must share {classes} classes and contain label {label}")));
    }
    let k = members.len() as f64;
    let mean_log: Vec<f64> = (0..classes).map(|i| members.iter().map(|m| m[i]).sum::<f64>() / k).collect();
    let log_partition = log_sum_exp(&mean_log);
    let ensemble: Vec<f64> = match combiner {
        Combiner::Geometric => mean_log.iter().map(|v| v - log_partition).collect(),
        Combiner::Arithmetic => {
            let probs: Vec<f64> = (0..classes).map(|i| members.iter().map(|m| m[i].exp()).sum::<f64>() / k).collect();
            log_softmax(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>())
        }
    };
    let diversity = members
        .iter()
        .map(|m| ensemble.iter().zip(m).map(|(e, q)| e.exp() * (e - q)).sum::<f64>())
        .sum::<f64>()
        / k;
    Ok(Decomposition {
        ensemble_loss: -ensemble[label],
        mean_member_loss: -members.iter().map(|m| m[label]).sum::<f64>() / k,
        diversity,
        log_partition,
    })
}

/// Empirical check of the catastrophic-failure lower bound on 0-1 risk.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub rate: f64,
    pub aggregators: usize,
    /// Probability that every aggregator is down, `r^K`.
    pub catastrophic_weight: f64,
    pub clean_risk: f64,
    pub faulted_risk: f64,
    pub uniform_risk: f64,
    pub bound: f64,
    /// Combined Monte Carlo standard error of the two risk estimates.
    pub sigma: f64,
    pub pass: bool,
}

/// Compares `active_rand` 0-1 risk under device faults at `rate` with
/// `(1 − r^K)·R_clean + r^K·R_uniform`.
pub fn prop1_certificate(model: &SplitModel, data: &ClientData, base: &DeviceGraph, rate: f64, trials: usize, seed: u64) -> Result<Prop1Report> {
    let clean = EvalSettings { trials, ..EvalSettings::default() };
    let faulted = EvalSettings { fault: FaultModel::Device { rate }, ..clean };
    faulted.fault.validate()?;
    let r_clean = 1.0 - evaluate_seed(model, data, base, &[Policy::ActiveRand], &clean, seed)?.accuracy[0];
    let res = evaluate_seed(model, data, base, &[Policy::ActiveRand], &faulted, seed)?;
    let r_fault = 1.0 - res.accuracy[0];
    let k = model.aggregators.len();
    let weight = rate.powi(k as i32);
    let uniform_risk = 1.0 - 1.0 / model.class_count as f64;
    let bound = (1.0 - weight) * r_clean + weight * uniform_risk;
    let n = res.samples.max(1) as f64;
    let sigma = ((r_clean * (1.0 - r_clean) + r_fault * (1.0 - r_fault)) / n).sqrt();
    Ok(Prop1Report {
        rate,
        aggregators: k,
        catastrophic_weight: weight,
        clean_risk: r_clean,
        faulted_risk: r_fault,
        uniform_risk,
        bound,
        sigma,
        pass: r_fault >= bound - 3.0 * sigma,
    })
}
