//! Decentralized training: every aggregator head is trained on its own
//! zero-imputed view with the sum of head losses as the objective. Faults are
//! simulated with party-wise (PD) or communication-wise (CD) dropout, with
//! optional real train-time faults. Kept activations are never rescaled.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::ClientData;
use crate::error::{Error, Result};
use crate::faults::{FaultModel, FaultProcess, RealizedGraph};
use crate::inference::{assemble, gossip_neighborhoods, Architecture, SplitModel};
use crate::nn::{
    adam_update, log_softmax, log_softmax_rows, mlp_backward, mlp_forward, softmax_cross_entropy, AdamConfig,
    AdamState, Matrix, MlpParams,
};
use crate::rng::{self, Rng as StreamRng, Stream};
use crate::topology::DeviceGraph;

/// Training-time fault simulation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Dropout {
    #[default]
    None,
    /// Drop a client's representation for every aggregator at once.
    Party(f64),
    /// Drop each client→aggregator transfer independently.
    Communication(f64),
}

impl Dropout {
    pub fn rate(&self) -> f64 {
        match *self {
            Dropout::None => 0.0,
            Dropout::Party(r) | Dropout::Communication(r) => r,
        }
    }
}

impl fmt::Display for Dropout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dropout::None => write!(f, "none"),
            Dropout::Party(r) => write!(f, "pd({r})"),
            Dropout::Communication(r) => write!(f, "cd({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: Dropout,
    pub train_faults: FaultModel,
    /// Gossip rounds inside the training forward pass; 0 disables.
    pub train_gossip_rounds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            dropout: Dropout::None,
            train_faults: FaultModel::None,
            train_gossip_rounds: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let r = self.dropout.rate();
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("dropout rate {r} outside [0, 1]")));
        }
        self.train_faults.validate()
    }

    /// Ordered key/value description stored in checkpoints.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.adam.lr.to_string()),
            ("beta1".into(), self.adam.beta1.to_string()),
            ("beta2".into(), self.adam.beta2.to_string()),
            ("eps".into(), self.adam.eps.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("train_faults".into(), self.train_faults.to_string()),
            ("train_gossip_rounds".into(), self.train_gossip_rounds.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Which client slots each aggregator receives (`aggregators × clients`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMask {
    pub aggregators: Vec<usize>,
    pub clients: usize,
    keep: Vec<bool>,
}

impl SlotMask {
    pub fn full(aggregators: &[usize], clients: usize) -> Self {
        Self { aggregators: aggregators.to_vec(), clients, keep: vec![true; aggregators.len() * clients] }
    }

    /// Slots along base-graph edges (self slot included).
    pub fn from_base(base: &DeviceGraph, aggregators: &[usize]) -> Self {
        Self::from_realized(&RealizedGraph::from_base(base), aggregators)
    }

    /// Slots delivered in a realization.
    pub fn from_realized(realized: &RealizedGraph, aggregators: &[usize]) -> Self {
        let clients = realized.device_count();
        let keep = aggregators
            .iter()
            .flat_map(|&k| (0..clients).map(move |c| realized.is_alive(c) && realized.delivers(k, c)))
            .collect();
        Self { aggregators: aggregators.to_vec(), clients, keep }
    }

    pub fn keep(&self, head: usize, client: usize) -> bool {
        self.keep[head * self.clients + client]
    }

    pub fn set(&mut self, head: usize, client: usize, keep: bool) {
        self.keep[head * self.clients + client] = keep;
    }

    pub fn intersect(&mut self, other: &SlotMask) {
        for (a, b) in self.keep.iter_mut().zip(&other.keep) {
            *a = *a && *b;
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Keeps only clients flagged in `clients_kept`, for every aggregator.
    pub fn restrict_clients(&mut self, clients_kept: &[bool]) {
        for h in 0..self.aggregators.len() {
            for (c, &k) in clients_kept.iter().enumerate() {
                if !k {
                    self.set(h, c, false);
                }
            }
        }
    }
}

/// Party-wise dropout: per-client keep flags (true = kept).
pub fn apply_pd_mask<R: Rng + ?Sized>(clients: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    (0..clients).map(|_| !rng.random_bool(rate.clamp(0.0, 1.0))).collect()
}

/// Communication-wise dropout: each (aggregator, client ≠ aggregator) slot
/// dropped independently. Self slots are always kept.
pub fn apply_cd_mask<R: Rng + ?Sized>(aggregators: &[usize], clients: usize, rate: f64, rng: &mut R) -> SlotMask {
    let mut mask = SlotMask::full(aggregators, clients);
    for (h, &k) in aggregators.iter().enumerate() {
        for c in 0..clients {
            if c != k && rng.random_bool(rate.clamp(0.0, 1.0)) {
                mask.set(h, c, false);
            }
        }
    }
    mask
}

/// The network condition held fixed for one batch.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub mask: SlotMask,
    pub alive_heads: Vec<bool>,
    /// One realization per gossip round inside the forward pass.
    pub gossip: Vec<RealizedGraph>,
}

impl BatchPlan {
    /// Fault-free, dropout-free plan with `gossip_rounds` clean rounds.
    pub fn clean(base: &DeviceGraph, aggregators: &[usize], gossip_rounds: usize) -> Self {
        Self {
            mask: SlotMask::from_base(base, aggregators),
            alive_heads: vec![true; aggregators.len()],
            gossip: vec![RealizedGraph::from_base(base); gossip_rounds],
        }
    }
}

/// Gradients for every parameter group of a [`SplitModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGrads {
    pub encoders: Vec<MlpParams>,
    pub heads: Vec<MlpParams>,
}

impl SplitGrads {
    pub fn groups(&self) -> impl Iterator<Item = &MlpParams> {
        self.encoders.iter().chain(&self.heads)
    }
}

/// Composite gossip weights: row `i` says how final head `i` mixes the
/// per-head log-probabilities.
fn gossip_weights(plan: &BatchPlan, aggregators: &[usize]) -> Vec<Vec<f64>> {
    let k = aggregators.len();
    let mut w: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for realized in &plan.gossip {
        let hoods = gossip_neighborhoods(&plan.alive_heads, realized, aggregators);
        let next: Vec<Vec<f64>> = hoods
            .iter()
            .enumerate()
            .map(|(i, hood)| match hood {
                None => w[i].clone(),
                Some(hood) => {
                    let mut row = vec![0.0; k];
                    for &j in hood {
                        for (r, &x) in row.iter_mut().zip(&w[j]) {
                            *r += x / hood.len() as f64;
                        }
                    }
                    row
                }
            })
            .collect();
        w = next;
    }
    w
}

struct Forward {
    reps: Vec<Option<Matrix>>,
    enc_tapes: Vec<Option<crate::nn::Tape>>,
    head_tapes: Vec<Option<crate::nn::Tape>>,
    logits: Vec<Option<Matrix>>,
}

fn forward(model: &SplitModel, inputs: &[Matrix], plan: &BatchPlan, keep_tapes: bool) -> Result<Forward> {
    if inputs.len() != model.client_count() {
        return Err(Error::Shape(format!("{} client inputs for {} clients", inputs.len(), model.client_count())));
    }
    let rows = inputs.first().map_or(0, Matrix::rows);
    let used: Vec<bool> = (0..model.client_count())
        .map(|c| (0..model.heads.len()).any(|h| plan.alive_heads[h] && plan.mask.keep(h, c)))
        .collect();
    let mut reps = Vec::with_capacity(inputs.len());
    let mut enc_tapes = Vec::with_capacity(inputs.len());
    for ((x, enc), &u) in inputs.iter().zip(&model.encoders).zip(&used) {
        if u {
            let (z, tape) = mlp_forward(enc, x)?;
            reps.push(Some(z));
            enc_tapes.push(keep_tapes.then_some(tape));
        } else {
            reps.push(None);
            enc_tapes.push(None);
        }
    }
    let mut head_tapes = Vec::with_capacity(model.heads.len());
    let mut logits = Vec::with_capacity(model.heads.len());
    for (h, head) in model.heads.iter().enumerate() {
        if !plan.alive_heads[h] {
            head_tapes.push(None);
            logits.push(None);
            continue;
        }
        let agg = assemble(&reps, model.rep_dim, rows, |c| plan.mask.keep(h, c))?;
        let (out, tape) = mlp_forward(head, &agg)?;
        head_tapes.push(keep_tapes.then_some(tape));
        logits.push(Some(out));
    }
    Ok(Forward { reps, enc_tapes, head_tapes, logits })
}

/// Final per-head log-probabilities after the plan's gossip rounds.
fn final_log_probs(fwd: &Forward, weights: &[Vec<f64>], gossip: bool) -> Vec<Option<Matrix>> {
    let lps: Vec<Option<Matrix>> = fwd.logits.iter().map(|l| l.as_ref().map(log_softmax_rows)).collect();
    if !gossip {
        return lps;
    }
    weights
        .iter()
        .enumerate()
        .map(|(i, row)| {
            lps[i].as_ref()?;
            let mut acc: Option<Matrix> = None;
            for (j, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut term = lps[j].clone().expect("mixing weight on a dead head");
                term.scale(w);
                match acc.as_mut() {
                    None => acc = Some(term),
                    Some(a) => a.add_assign(&term).expect("equal shapes"),
                }
            }
            acc.map(|a| log_softmax_rows(&a))
        })
        .collect()
}

/// Summed-over-heads, mean-over-batch cross-entropy (forward only).
pub fn split_loss(model: &SplitModel, inputs: &[Matrix], labels: &[usize], plan: &BatchPlan) -> Result<f64> {
    let fwd = forward(model, inputs, plan, false)?;
    let gossip = !plan.gossip.is_empty();
    let weights = gossip_weights(plan, &model.aggregators);
    let batch = labels.len().max(1) as f64;
    let mut total = 0.0;
    for lp in final_log_probs(&fwd, &weights, gossip).iter().flatten() {
        total -= labels.iter().enumerate().map(|(r, &y)| lp.get(r, y)).sum::<f64>() / batch;
    }
    Ok(total)
}

/// Loss and exact gradients of the summed objective through heads,
/// concatenation, optional gossip mixing, and every client encoder.
pub fn split_loss_and_grad(model: &SplitModel, inputs: &[Matrix], labels: &[usize], plan: &BatchPlan) -> Result<(f64, SplitGrads)> {
    let fwd = forward(model, inputs, plan, true)?;
    let rows = labels.len();
    let batch = rows.max(1) as f64;
    let gossip = !plan.gossip.is_empty();
    let k = model.heads.len();

    let mut loss = 0.0;
    let mut d_logits: Vec<Option<Matrix>> = vec![None; k];
    if !gossip {
        for (h, logits) in fwd.logits.iter().enumerate() {
            if let Some(logits) = logits {
                let (l, d) = softmax_cross_entropy(logits, labels)?;
                loss += l;
                d_logits[h] = Some(d);
            }
        }
    } else {
        let weights = gossip_weights(plan, &model.aggregators);
        let finals = final_log_probs(&fwd, &weights, true);
        // d loss / d final-mixed log-probs, pushed back through the mixing
        let mut d_lp: Vec<Option<Matrix>> = fwd.logits.iter().map(|l| l.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()))).collect();
        for (i, fin) in finals.iter().enumerate() {
            let Some(fin) = fin else { continue };
            let mut dz = fin.map(f64::exp);
            for (r, &y) in labels.iter().enumerate() {
                loss -= fin.get(r, y) / batch;
                dz.set(r, y, dz.get(r, y) - 1.0);
            }
            dz.scale(1.0 / batch);
            for (j, &w) in weights[i].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut term = dz.clone();
                term.scale(w);
                d_lp[j].as_mut().expect("alive head").add_assign(&term)?;
            }
        }
        for (h, dl) in d_lp.into_iter().enumerate() {
            let (Some(dl), Some(logits)) = (dl, fwd.logits[h].as_ref()) else { continue };
            let mut d = dl.clone();
            for r in 0..rows {
                let sm: Vec<f64> = log_softmax(logits.row(r)).iter().map(|v| v.exp()).collect();
                let s: f64 = dl.row(r).iter().sum();
                for (o, p) in d.row_mut(r).iter_mut().zip(sm) {
                    *o -= p * s;
                }
            }
            d_logits[h] = Some(d);
        }
    }

    let mut d_reps: Vec<Option<Matrix>> = fwd.reps.iter().map(|r| r.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()))).collect();
    let mut head_grads = Vec::with_capacity(k);
    for (h, head) in model.heads.iter().enumerate() {
        let (Some(tape), Some(d)) = (fwd.head_tapes[h].as_ref(), d_logits[h].as_ref()) else {
            head_grads.push(head.zeros_like());
            continue;
        };
        let (g, d_in) = mlp_backward(head, tape, d)?;
        head_grads.push(g);
        let r = model.rep_dim;
        for (c, d_rep) in d_reps.iter_mut().enumerate() {
            let Some(d_rep) = d_rep.as_mut().filter(|_| plan.mask.keep(h, c)) else { continue };
            for row in 0..rows {
                for (o, v) in d_rep.row_mut(row).iter_mut().zip(&d_in.row(row)[c * r..(c + 1) * r]) {
                    *o += v;
                }
            }
        }
    }
    let mut enc_grads = Vec::with_capacity(model.client_count());
    for (c, enc) in model.encoders.iter().enumerate() {
        match (fwd.enc_tapes[c].as_ref(), d_reps[c].as_ref()) {
            (Some(tape), Some(d)) => enc_grads.push(mlp_backward(enc, tape, d)?.0),
            _ => enc_grads.push(enc.zeros_like()),
        }
    }
    Ok((loss, SplitGrads { encoders: enc_grads, heads: head_grads }))
}

/// One Adam state per parameter group, in [`SplitModel::groups`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerStates {
    pub states: Vec<AdamState>,
}

impl OptimizerStates {
    pub fn new(model: &SplitModel, config: AdamConfig) -> Self {
        Self { states: model.groups().map(|g| AdamState::new(g, config)).collect() }
    }

    pub fn step(&mut self, model: &mut SplitModel, grads: &SplitGrads) -> Result<()> {
        for ((p, g), s) in model.groups_mut().zip(grads.groups()).zip(&mut self.states) {
            adam_update(p, g, s)?;
        }
        Ok(())
    }
}

/// Independent random streams of one training run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: StreamRng,
    pub dropout: StreamRng,
    pub faults: StreamRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            shuffle: rng::stream(seed, Stream::DataShuffle),
            dropout: rng::stream(seed, Stream::Dropout),
            faults: rng::stream(seed, Stream::Faults),
        }
    }
}

fn plan_batch(
    model: &SplitModel,
    base: &DeviceGraph,
    cfg: &TrainConfig,
    process: &mut FaultProcess,
    rngs: &mut TrainRngs,
) -> Result<BatchPlan> {
    let mut plan = BatchPlan::clean(base, &model.aggregators, cfg.train_gossip_rounds);
    if cfg.train_faults != FaultModel::None {
        let realized = process.realize(base, 1 + cfg.train_gossip_rounds, &mut rngs.faults)?;
        plan.mask.intersect(&SlotMask::from_realized(&realized[0], &model.aggregators));
        plan.alive_heads = model.aggregators.iter().map(|&k| realized[0].is_alive(k)).collect();
        plan.gossip = realized[1..].to_vec();
    }
    match cfg.dropout {
        Dropout::None => {}
        Dropout::Party(rate) => {
            let keep = apply_pd_mask(model.client_count(), rate, &mut rngs.dropout);
            plan.mask.restrict_clients(&keep);
        }
        Dropout::Communication(rate) => {
            let cd = apply_cd_mask(&model.aggregators, model.client_count(), rate, &mut rngs.dropout);
            plan.mask.intersect(&cd);
        }
    }
    Ok(plan)
}

/// One pass over the training data. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut SplitModel,
    opt: &mut OptimizerStates,
    data: &ClientData,
    base: &DeviceGraph,
    cfg: &TrainConfig,
    process: &mut FaultProcess,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks(cfg.batch_size) {
        let plan = plan_batch(model, base, cfg, process, rngs)?;
        if !plan.alive_heads.iter().any(|&a| a) {
            continue;
        }
        let (inputs, labels) = data.batch(idx);
        let (loss, grads) = split_loss_and_grad(model, &inputs, &labels, &plan)?;
        opt.step(model, &grads)?;
        total += loss;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Fault-free loss (summed over heads) and mean per-head accuracy.
pub fn evaluate_clean(model: &SplitModel, data: &ClientData, base: &DeviceGraph, gossip_rounds: usize) -> Result<(f64, f64)> {
    let plan = BatchPlan::clean(base, &model.aggregators, gossip_rounds);
    let weights = gossip_weights(&plan, &model.aggregators);
    let (mut loss, mut correct) = (0.0, 0usize);
    const CHUNK: usize = 1024;
    for start in (0..data.len()).step_by(CHUNK) {
        let (inputs, labels) = data.chunk(start..(start + CHUNK).min(data.len()));
        let fwd = forward(model, &inputs, &plan, false)?;
        for lp in final_log_probs(&fwd, &weights, gossip_rounds > 0).iter().flatten() {
            for (r, &y) in labels.iter().enumerate() {
                loss -= lp.get(r, y);
                correct += usize::from(crate::metrics::argmax(lp.row(r)) == y);
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / (n * model.heads.len() as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

pub fn write_curve<W: Write>(mut w: W, curve: &[EpochRecord]) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in curve {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

/// Trains for `cfg.epochs` epochs and keeps the parameters with the lowest
/// fault-free validation loss (the initial parameters count as epoch 0).
pub fn fit(cfg: &TrainConfig, arch: &Architecture, train: &ClientData, val: &ClientData, base: &DeviceGraph) -> Result<FitOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    if train.client_count() != base.device_count() {
        return Err(Error::Shape(format!(
            "{} client views for a {}-device graph",
            train.client_count(),
            base.device_count()
        )));
    }
    let mut model = SplitModel::new(arch, base.device_count(), base.aggregators(), &mut rng::stream(cfg.seed, Stream::Init))?;
    let mut opt = OptimizerStates::new(&model, cfg.adam);
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut process = FaultProcess::new(cfg.train_faults, base)?;

    let (val_loss, val_accuracy) = evaluate_clean(&model, val, base, cfg.train_gossip_rounds)?;
    let mut curve = vec![EpochRecord { epoch: 0, train_loss: f64::NAN, val_loss, val_accuracy }];
    let mut best = (val_loss, 0usize, model.clone());
    for epoch in 1..=cfg.epochs {
        let train_loss = train_epoch(&mut model, &mut opt, train, base, cfg, &mut process, &mut rngs)?;
        let (val_loss, val_accuracy) = evaluate_clean(&model, val, base, cfg.train_gossip_rounds)?;
        curve.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
        }
    }
    let mut echo = cfg.echo();
    echo.push(("encoder".into(), join(&arch.encoder)));
    echo.push(("head_hidden".into(), join(&arch.head_hidden)));
    echo.push(("graph".into(), base.kind().to_string()));
    let checkpoint = Checkpoint::new(best.2, echo, best.0, best.1);
    Ok(FitOutcome { checkpoint, curve })
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

const CHECKPOINT_MAGIC: &str = "mags-checkpoint v1";

/// A trained model with the metadata needed to reproduce it.
///
/// Parameters are held at 32-bit precision (the on-disk precision), so a
/// reloaded checkpoint yields bit-identical inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SplitModel,
    pub config: Vec<(String, String)>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn new(mut model: SplitModel, config: Vec<(String, String)>, best_val_loss: f64, best_epoch: usize) -> Self {
        for g in model.groups_mut() {
            g.params_mut().for_each(|p| *p = f64::from(*p as f32));
        }
        Self { model, config, best_val_loss, best_epoch }
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.config {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.model;
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "config_hash {}", self.config_hash())?;
        writeln!(w, "best_val_loss {}", self.best_val_loss)?;
        writeln!(w, "best_epoch {}", self.best_epoch)?;
        writeln!(w, "clients {}", m.client_count())?;
        writeln!(w, "rep_dim {}", m.rep_dim)?;
        writeln!(w, "classes {}", m.class_count)?;
        writeln!(w, "aggregators {}", join(&m.aggregators))?;
        for (c, e) in m.encoders.iter().enumerate() {
            writeln!(w, "group encoder {c} relu_out {} dims {}", u8::from(e.relu_output), join(&e.dims()))?;
        }
        for (k, h) in m.aggregators.iter().zip(&m.heads) {
            writeln!(w, "group head {k} relu_out {} dims {}", u8::from(h.relu_output), join(&h.dims()))?;
        }
        for (k, v) in &self.config {
            writeln!(w, "config {k}={v}")?;
        }
        writeln!(w, "end")?;
        let mut bytes = Vec::with_capacity(m.param_count() * 4);
        for g in m.groups() {
            for p in g.params() {
                bytes.extend_from_slice(&(*p as f32).to_le_bytes());
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::read(bytes.as_slice())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("checkpoint header ended early".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let mut hash = String::new();
        let (mut best_val_loss, mut best_epoch) = (f64::NAN, 0usize);
        let (mut clients, mut rep_dim, mut classes) = (0usize, 0usize, 0usize);
        let mut aggregators = Vec::new();
        let mut encoders = Vec::new();
        let mut heads = Vec::new();
        let mut config = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let (key, rest) = l.split_once(' ').ok_or_else(|| Error::Parse(format!("bad header line {l:?}")))?;
            match key {
                "config_hash" => hash = rest.to_string(),
                "best_val_loss" => best_val_loss = parse(rest)?,
                "best_epoch" => best_epoch = parse(rest)?,
                "clients" => clients = parse(rest)?,
                "rep_dim" => rep_dim = parse(rest)?,
                "classes" => classes = parse(rest)?,
                "aggregators" => aggregators = parse_list(rest)?,
                "group" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [kind, _, "relu_out", relu, "dims", dims] = f.as_slice() else {
                        return Err(Error::Parse(format!("bad group line {l:?}")));
                    };
                    let params = MlpParams::zeros(&parse_list(dims)?, *relu == "1")?;
                    match *kind {
                        "encoder" => encoders.push(params),
                        "head" => heads.push(params),
                        other => return Err(Error::Parse(format!("unknown group kind {other:?}"))),
                    }
                }
                "config" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| Error::Parse(format!("bad config line {l:?}")))?;
                    config.push((k.to_string(), v.to_string()));
                }
                other => return Err(Error::Parse(format!("unknown header key {other:?}"))),
            }
        }
        let mut model = SplitModel { encoders, aggregators, heads, rep_dim, class_count: classes };
        if model.client_count() != clients {
            return Err(Error::Parse(format!("header lists {clients} clients but {} encoders", model.client_count())));
        }
        model.validate()?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != model.param_count() * 4 {
            return Err(Error::Parse(format!(
                "checkpoint payload is {} bytes, expected {}",
                payload.len(),
                model.param_count() * 4
            )));
        }
        let mut values = payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))));
        for g in model.groups_mut() {
            for p in g.params_mut() {
                *p = values.next().expect("length checked");
            }
        }
        let ck = Checkpoint { model, config, best_val_loss, best_epoch };
        if ck.config_hash() != hash {
            return Err(Error::Parse("checkpoint config hash mismatch".into()));
        }
        Ok(ck)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("cannot parse {s:?}")))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|p| !p.is_empty()).map(parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::topology::{build_graph, AggregatorPlacement, GraphKind};

    fn complete(c: usize, k: usize) -> DeviceGraph {
        build_graph(GraphKind::Complete, c, k, &AggregatorPlacement::Lowest).unwrap()
    }

    #[test]
    fn pd_mask_extremes_and_mean() {
        let mut rng = stream(1, Stream::Dropout);
        assert!(apply_pd_mask(16, 0.0, &mut rng).iter().all(|&k| k));
        assert!(apply_pd_mask(16, 1.0, &mut rng).iter().all(|&k| !k));
        let n = 100_000;
        let kept: usize = (0..n).map(|_| apply_pd_mask(16, 0.3, &mut rng).iter().filter(|&&k| k).count()).sum();
        let sigma = (16.0 * 0.3 * 0.7 / n as f64).sqrt();
        assert!((kept as f64 / n as f64 - 11.2).abs() < 3.0 * sigma);
    }

    #[test]
    fn cd_mask_extremes_and_mean() {
        let aggs: Vec<usize> = (0..16).collect();
        let mut rng = stream(2, Stream::Dropout);
        assert_eq!(apply_cd_mask(&aggs, 16, 0.0, &mut rng), SlotMask::full(&aggs, 16));
        let all = apply_cd_mask(&aggs, 16, 1.0, &mut rng);
        assert_eq!(all.kept(), 16);
        assert!((0..16).all(|h| all.keep(h, h)));
        let n = 20_000;
        let dropped: usize = (0..n).map(|_| 256 - apply_cd_mask(&aggs, 16, 0.3, &mut rng).kept()).sum();
        let sigma = (240.0 * 0.3 * 0.7 / n as f64).sqrt();
        assert!((dropped as f64 / n as f64 - 72.0).abs() < 3.0 * sigma);
    }

    fn toy_data(clients: usize, dim: usize, n: usize, classes: usize, seed: u64) -> ClientData {
        let mut rng = stream(seed, Stream::Certificate);
        let views = (0..clients)
            .map(|_| Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        ClientData::from_views(views, labels, classes).unwrap()
    }

    #[test]
    fn zero_heads_give_k_ln_classes() {
        let g = complete(4, 4);
        let arch = Architecture { encoder: vec![3, 4, 2], head_hidden: vec![5], classes: 10 };
        let mut model = SplitModel::new(&arch, 4, g.aggregators(), &mut stream(1, Stream::Init)).unwrap();
        model.zero_heads();
        let data = toy_data(4, 3, 8, 10, 1);
        let (inputs, labels) = data.chunk(0..8);
        let plan = BatchPlan::clean(&g, g.aggregators(), 0);
        let loss = split_loss(&model, &inputs, &labels, &plan).unwrap();
        assert!((loss - 4.0 * 10f64.ln()).abs() < 1e-12);
        let (l2, _) = split_loss_and_grad(&model, &inputs, &labels, &plan).unwrap();
        assert!((l2 - loss).abs() < 1e-12);
    }

    #[test]
    fn full_cd_dropout_isolates_heads() {
        let g = complete(4, 4);
        let arch = Architecture { encoder: vec![3, 2], head_hidden: vec![4], classes: 3 };
        let model = SplitModel::new(&arch, 4, g.aggregators(), &mut stream(2, Stream::Init)).unwrap();
        let data = toy_data(4, 3, 6, 3, 2);
        let (inputs, labels) = data.chunk(0..6);
        let mut plan = BatchPlan::clean(&g, g.aggregators(), 0);
        plan.mask.intersect(&apply_cd_mask(g.aggregators(), 4, 1.0, &mut stream(1, Stream::Dropout)));
        let (_, grads) = split_loss_and_grad(&model, &inputs, &labels, &plan).unwrap();
        // head h's first-layer weights for slots c != h receive no gradient
        for (h, hg) in grads.heads.iter().enumerate() {
            let w = &hg.layers[0].weight;
            for row in 0..w.rows() {
                if row / 2 != h {
                    assert!(w.row(row).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn single_device_training_matches_monolithic_adam() {
        let g = complete(1, 1);
        let arch = Architecture { encoder: vec![5, 4, 3], head_hidden: vec![6], classes: 3 };
        let data = toy_data(1, 5, 40, 3, 3);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let mut model = SplitModel::new(&arch, 1, &[0], &mut stream(cfg.seed, Stream::Init)).unwrap();
        let mut mono = MlpParams {
            layers: model.encoders[0].layers.iter().chain(&model.heads[0].layers).cloned().collect(),
            relu_output: false,
        };
        let mut opt = OptimizerStates::new(&model, cfg.adam);
        let mut mono_opt = AdamState::new(&mono, cfg.adam);
        let mut rngs = TrainRngs::new(cfg.seed);
        let mut process = FaultProcess::new(FaultModel::None, &g).unwrap();
        train_epoch(&mut model, &mut opt, &data, &g, &cfg, &mut process, &mut rngs).unwrap();

        // Oracle: the same batches through one monolithic MLP.
        let mut order: Vec<usize> = (0..40).collect();
        order.shuffle(&mut TrainRngs::new(cfg.seed).shuffle);
        for idx in order.chunks(8) {
            let (inputs, labels) = data.batch(idx);
            let mut y = Matrix::zeros(labels.len(), 3);
            labels.iter().enumerate().for_each(|(r, &l)| y.set(r, l, 1.0));
            let (_, grads) = crate::nn::loss_and_grad(&mono, &inputs[0], &y, Default::default()).unwrap();
            adam_update(&mut mono, &grads, &mut mono_opt).unwrap();
        }
        let split: Vec<f64> = model.groups().flat_map(|g| g.params().copied().collect::<Vec<_>>()).collect();
        let mono: Vec<f64> = mono.params().copied().collect();
        assert_eq!(split.len(), mono.len());
        for (a, b) in split.iter().zip(&mono) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let g = complete(4, 2);
        let arch = Architecture { encoder: vec![3, 2], head_hidden: vec![4], classes: 3 };
        let model = SplitModel::new(&arch, 4, g.aggregators(), &mut stream(3, Stream::Init)).unwrap();
        let ck = Checkpoint::new(model, TrainConfig::default().echo(), 0.5, 3);
        let bytes = ck.to_bytes();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let truncated = &bytes[..bytes.len() - 2];
        assert!(Checkpoint::read(truncated).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("config seed=1", "config seed=2");
        let mut tampered = text.as_bytes().to_vec();
        tampered.truncate(text.find("end\n").unwrap() + 4);
        tampered.extend_from_slice(&bytes[bytes.len() - ck.model.param_count() * 4..]);
        assert!(Checkpoint::read(tampered.as_slice()).unwrap_err().to_string().contains("hash"));
        assert!(Checkpoint::read("garbage\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let g = complete(4, 4);
        let arch = Architecture { encoder: vec![3, 2], head_hidden: vec![4], classes: 3 };
        let data = toy_data(4, 3, 20, 3, 5);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = fit(&cfg, &arch, &data, &data, &g).unwrap();
        let init = SplitModel::new(&arch, 4, g.aggregators(), &mut stream(cfg.seed, Stream::Init)).unwrap();
        assert_eq!(out.checkpoint, Checkpoint::new(init, out.checkpoint.config.clone(), out.checkpoint.best_val_loss, 0));
        assert_eq!(out.curve.len(), 1);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dropout: Dropout::Party(1.5), ..TrainConfig::default() }.validate().is_err());
        let g = complete(4, 4);
        let arch = Architecture { encoder: vec![3, 2], head_hidden: vec![4], classes: 3 };
        let data = toy_data(4, 3, 20, 3, 5);
        let empty = ClientData::from_views(vec![Matrix::zeros(0, 3); 4], vec![], 3).unwrap();
        assert!(fit(&TrainConfig::default(), &arch, &data, &empty, &g).is_err());
    }
}
