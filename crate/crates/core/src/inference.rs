//! The split-network inference pipeline: encode at every client, aggregate
//! neighbor representations at each aggregator (zero-imputing what did not
//! arrive), apply the aggregator's head, then average log-probabilities with
//! neighboring aggregators for `G` gossip rounds.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::faults::{FaultProcess, RealizedGraph};
use crate::nn::{log_softmax_rows, mlp_forward, Matrix, MlpParams};
use crate::topology::DeviceGraph;

/// Layer widths of the encoders and heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Encoder widths, patch dim first, representation dim last.
    pub encoder: Vec<usize>,
    /// Hidden widths of each head between the concatenation and the logits.
    pub head_hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    /// Reference architectures for 4, 16 and 49 clients on 28×28 images;
    /// other client counts get a 16→4 encoder and one hidden head layer as
    /// wide as the concatenation.
    pub fn preset(clients: usize, patch_dim: usize, classes: usize) -> Self {
        let (encoder, hidden) = match (clients, patch_dim) {
            (4, 196) => (vec![196, 64, 16], 64),
            (16, 49) => (vec![49, 16, 4], 64),
            (49, 16) => (vec![16, 4, 2], 98),
            _ => (vec![patch_dim, 16, 4], clients * 4),
        };
        Self { encoder, head_hidden: vec![hidden], classes }
    }

    pub fn rep_dim(&self) -> usize {
        *self.encoder.last().expect("non-empty encoder dims")
    }

    pub fn head_dims(&self, clients: usize) -> Vec<usize> {
        let mut dims = vec![clients * self.rep_dim()];
        dims.extend(&self.head_hidden);
        dims.push(self.classes);
        dims
    }
}

/// Encoder parameters for every client and head parameters for every
/// aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub encoders: Vec<MlpParams>,
    /// Device index of each head, ascending.
    pub aggregators: Vec<usize>,
    pub heads: Vec<MlpParams>,
    pub rep_dim: usize,
    pub class_count: usize,
}

impl SplitModel {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, clients: usize, aggregators: &[usize], rng: &mut R) -> Result<Self> {
        let encoders = (0..clients)
            .map(|_| MlpParams::new(&arch.encoder, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_dims = arch.head_dims(clients);
        let heads = aggregators
            .iter()
            .map(|_| MlpParams::new(&head_dims, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            encoders,
            aggregators: aggregators.to_vec(),
            heads,
            rep_dim: arch.rep_dim(),
            class_count: arch.classes,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.encoders.len();
        if c == 0 {
            return Err(Error::Config("model has no clients".into()));
        }
        if let Some(e) = self.encoders.iter().find(|e| e.output_dim() != self.rep_dim) {
            return Err(Error::Shape(format!("encoder output {} != rep dim {}", e.output_dim(), self.rep_dim)));
        }
        if self.heads.len() != self.aggregators.len() {
            return Err(Error::Shape("one head per aggregator required".into()));
        }
        if self.aggregators.windows(2).any(|w| w[0] >= w[1]) || self.aggregators.iter().any(|&k| k >= c) {
            return Err(Error::Config(format!("aggregators {:?} must be ascending device indices", self.aggregators)));
        }
        for h in &self.heads {
            if h.input_dim() != c * self.rep_dim || h.output_dim() != self.class_count {
                return Err(Error::Shape(format!(
                    "head {:?} incompatible with {c} clients x {} rep dims -> {} classes",
                    h.dims(),
                    self.rep_dim,
                    self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn client_count(&self) -> usize {
        self.encoders.len()
    }

    pub fn head_index(&self, device: usize) -> Option<usize> {
        self.aggregators.binary_search(&device).ok()
    }

    pub fn param_count(&self) -> usize {
        self.encoders.iter().chain(&self.heads).map(MlpParams::param_count).sum()
    }

    /// Parameter groups in checkpoint order: encoders ascending, then heads.
    pub fn groups(&self) -> impl Iterator<Item = &MlpParams> {
        self.encoders.iter().chain(&self.heads)
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut MlpParams> {
        self.encoders.iter_mut().chain(self.heads.iter_mut())
    }

    /// Sets every head parameter to zero (heads then predict uniformly).
    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.params_mut().for_each(|p| *p = 0.0);
        }
    }
}

/// Runs each alive client's encoder on its own features. Dead clients
/// produce nothing.
pub fn client_encode(model: &SplitModel, inputs: &[Matrix], alive: &[bool]) -> Result<Vec<Option<Matrix>>> {
    if inputs.len() != model.client_count() || alive.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{} inputs / {} liveness flags for {} clients",
            inputs.len(),
            alive.len(),
            model.client_count()
        )));
    }
    inputs
        .iter()
        .zip(&model.encoders)
        .zip(alive)
        .map(|((x, enc), &up)| if up { mlp_forward(enc, x).map(|(z, _)| Some(z)) } else { Ok(None) })
        .collect()
}

/// Client-ordered concatenation of representations. Slot `c` holds client
/// `c`'s representation when `keep(c)` and the representation exists;
/// otherwise zeros.
pub fn assemble(reps: &[Option<Matrix>], rep_dim: usize, rows: usize, keep: impl Fn(usize) -> bool) -> Result<Matrix> {
    let width = reps.len() * rep_dim;
    let mut out = Matrix::zeros(rows, width);
    for (c, rep) in reps.iter().enumerate() {
        let Some(rep) = rep.as_ref().filter(|_| keep(c)) else {
            continue;
        };
        if rep.shape() != (rows, rep_dim) {
            return Err(Error::Shape(format!("client {c} representation {:?}, expected ({rows}, {rep_dim})", rep.shape())));
        }
        for r in 0..rows {
            out.row_mut(r)[c * rep_dim..(c + 1) * rep_dim].copy_from_slice(rep.row(r));
        }
    }
    Ok(out)
}

/// What aggregator `k` receives in the realized graph.
pub fn aggregate(reps: &[Option<Matrix>], realized: &RealizedGraph, k: usize, rep_dim: usize) -> Result<Matrix> {
    if !realized.is_alive(k) {
        return Err(Error::Input(format!("aggregator {k} is not alive")));
    }
    let rows = reps.iter().flatten().next().map_or(0, Matrix::rows);
    assemble(reps, rep_dim, rows, |c| realized.is_alive(c) && realized.delivers(k, c))
}

/// Head forward followed by log-softmax.
pub fn aggregator_head(head: &MlpParams, aggregated: &Matrix) -> Result<Matrix> {
    let (logits, _) = mlp_forward(head, aggregated)?;
    Ok(log_softmax_rows(&logits))
}

/// Per-aggregator log-probability rows (one row per sample); `None` for
/// aggregators that are dead.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionState {
    pub values: Vec<Option<Matrix>>,
}

impl PredictionState {
    /// Row-wise renormalized log-probabilities.
    pub fn normalized(&self) -> PredictionState {
        PredictionState { values: self.values.iter().map(|v| v.as_ref().map(log_softmax_rows)).collect() }
    }
}

/// Averaging neighborhoods for one gossip round: for each aggregator slot
/// that updates, the slots it averages over (itself included).
pub fn gossip_neighborhoods(present: &[bool], realized: &RealizedGraph, aggregators: &[usize]) -> Vec<Option<Vec<usize>>> {
    aggregators
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            if !present[i] || !realized.is_alive(k) {
                return None;
            }
            let hood = aggregators
                .iter()
                .enumerate()
                .filter(|&(j, &k2)| j == i || (present[j] && realized.is_alive(k2) && realized.delivers(k, k2)))
                .map(|(j, _)| j)
                .collect();
            Some(hood)
        })
        .collect()
}

/// One synchronous gossip round: every alive aggregator replaces its
/// log-probabilities with the mean over itself and the alive aggregators
/// whose messages reach it.
pub fn gossip_round(state: &PredictionState, realized: &RealizedGraph, aggregators: &[usize]) -> PredictionState {
    let present: Vec<bool> = state.values.iter().map(Option::is_some).collect();
    let hoods = gossip_neighborhoods(&present, realized, aggregators);
    let values = hoods
        .iter()
        .zip(&state.values)
        .map(|(hood, own)| match hood {
            None => own.clone(),
            Some(hood) => {
                let mut acc = state.values[hood[0]].clone().expect("present");
                for &j in &hood[1..] {
                    acc.add_assign(state.values[j].as_ref().expect("present")).expect("equal shapes");
                }
                acc.scale(1.0 / hood.len() as f64);
                Some(acc)
            }
        })
        .collect();
    PredictionState { values }
}

/// Result of one (batched) inference.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Normalized log-probabilities per aggregator, `None` if dead.
    pub log_probs: Vec<Option<Matrix>>,
    /// The realization used at each round, aggregation round first.
    pub realizations: Vec<RealizedGraph>,
    /// Prediction state after the heads and after each gossip round, when
    /// recorded.
    pub trace: Vec<PredictionState>,
}

impl InferenceOutput {
    pub fn probabilities(&self) -> Vec<Option<Matrix>> {
        self.log_probs.iter().map(|v| v.as_ref().map(|m| m.map(f64::exp))).collect()
    }

    /// The realization at the final round, which decides the active set.
    pub fn final_realization(&self) -> &RealizedGraph {
        self.realizations.last().expect("at least one round")
    }
}

/// Runs the full pipeline on given per-round realizations
/// (`realizations.len() == G + 1`).
pub fn mags_infer_on(model: &SplitModel, inputs: &[Matrix], realizations: &[RealizedGraph], record_trace: bool) -> Result<InferenceOutput> {
    let first = realizations.first().ok_or_else(|| Error::Input("no realizations given".into()))?;
    let alive: Vec<bool> = (0..model.client_count()).map(|c| first.is_alive(c)).collect();
    let reps = client_encode(model, inputs, &alive)?;
    let rows = inputs.first().map_or(0, Matrix::rows);

    let mut values = Vec::with_capacity(model.heads.len());
    for (&k, head) in model.aggregators.iter().zip(&model.heads) {
        if !first.is_alive(k) {
            values.push(None);
            continue;
        }
        let agg = assemble(&reps, model.rep_dim, rows, |c| first.delivers(k, c))?;
        values.push(Some(aggregator_head(head, &agg)?));
    }
    let mut state = PredictionState { values };
    let mut trace = Vec::new();
    for realized in &realizations[1..] {
        if record_trace {
            trace.push(state.clone());
        }
        state = gossip_round(&state, realized, &model.aggregators);
    }
    if record_trace {
        trace.push(state.clone());
    }
    Ok(InferenceOutput { log_probs: state.normalized().values, realizations: realizations.to_vec(), trace })
}

/// Samples `G + 1` round realizations from `process` and runs the pipeline.
pub fn mags_infer<R: Rng + ?Sized>(
    model: &SplitModel,
    base: &DeviceGraph,
    inputs: &[Matrix],
    process: &mut FaultProcess,
    gossip_rounds: usize,
    rng: &mut R,
) -> Result<InferenceOutput> {
    let realizations = process.realize(base, gossip_rounds + 1, rng)?;
    mags_infer_on(model, inputs, &realizations, false)
}

pub const PREDICTION_TRACE_PREFIX: &str = "t,aggregator";

/// Dumps the recorded trace of sample `row` as `t,aggregator,c0,c1,...`
/// (t = 1 is the head output, t = 2.. the gossip rounds).
pub fn write_prediction_trace<W: Write>(mut w: W, model: &SplitModel, out: &InferenceOutput, row: usize) -> Result<()> {
    let classes: Vec<String> = (0..model.class_count).map(|c| format!("c{c}")).collect();
    writeln!(w, "{PREDICTION_TRACE_PREFIX},{}", classes.join(","))?;
    for (i, state) in out.trace.iter().enumerate() {
        for (&k, v) in model.aggregators.iter().zip(&state.values) {
            if let Some(m) = v {
                let vals: Vec<String> = m.row(row).iter().map(|x| x.to_string()).collect();
                writeln!(w, "{},{k},{}", i + 1, vals.join(","))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faults::sample_comm_faults;
    use crate::rng::{stream, Stream};
    use crate::topology::{build_graph, consensus_matrix, AggregatorPlacement, GraphKind};

    fn graph(kind: GraphKind, c: usize, k: usize) -> DeviceGraph {
        build_graph(kind, c, k, &AggregatorPlacement::Lowest).unwrap()
    }

    fn random_inputs(clients: usize, rows: usize, dim: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = stream(seed, Stream::Certificate);
        (0..clients)
            .map(|_| Matrix::from_vec(rows, dim, (0..rows * dim).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn preset_architectures() {
        assert_eq!(Architecture::preset(16, 49, 10).head_dims(16), vec![64, 64, 10]);
        assert_eq!(Architecture::preset(4, 196, 10).head_dims(4), vec![64, 64, 10]);
        assert_eq!(Architecture::preset(49, 16, 10).head_dims(49), vec![98, 98, 10]);
        assert_eq!(Architecture::preset(49, 16, 10).encoder, vec![16, 4, 2]);
    }

    #[test]
    fn encode_skips_dead_clients() {
        let arch = Architecture::preset(16, 49, 10);
        let model = SplitModel::new(&arch, 16, &[0], &mut stream(1, Stream::Init)).unwrap();
        let inputs = random_inputs(16, 3, 49, 2);
        let mut alive = vec![true; 16];
        alive[5] = false;
        let reps = client_encode(&model, &inputs, &alive).unwrap();
        assert!(reps[5].is_none());
        assert_eq!(reps.iter().flatten().count(), 15);
        assert!(reps.iter().flatten().all(|r| r.shape() == (3, 4)));
    }

    #[test]
    fn aggregation_masks_exactly_the_faulted_slots() {
        let g = graph(GraphKind::Complete, 16, 16);
        let arch = Architecture::preset(16, 49, 10);
        let model = SplitModel::new(&arch, 16, g.aggregators(), &mut stream(1, Stream::Init)).unwrap();
        let inputs = random_inputs(16, 2, 49, 3);
        let reps = client_encode(&model, &inputs, &[true; 16]).unwrap();

        let clean = RealizedGraph::from_base(&g);
        let dense = aggregate(&reps, &clean, 3, 4).unwrap();
        assert_eq!(dense.shape(), (2, 64));

        let cut = sample_comm_faults(&g, 1.0, &mut stream(1, Stream::Faults));
        let lonely = aggregate(&reps, &cut, 3, 4).unwrap();
        for r in 0..2 {
            for (j, &v) in lonely.row(r).iter().enumerate() {
                if j / 4 == 3 {
                    assert_eq!(v, dense.get(r, j));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }

        // Independent mask oracle against a random realization.
        let partial = sample_comm_faults(&g, 0.5, &mut stream(2, Stream::Faults));
        let got = aggregate(&reps, &partial, 7, 4).unwrap();
        let mask: Vec<f64> = (0..64).map(|j| if partial.delivers(7, j / 4) { 1.0 } else { 0.0 }).collect();
        for r in 0..2 {
            for (j, m) in mask.iter().enumerate() {
                assert_eq!(got.get(r, j), dense.get(r, j) * m);
            }
        }
    }

    #[test]
    fn zero_head_is_uniform_and_heads_normalize() {
        let mut head = MlpParams::zeros(&[64, 64, 10], false).unwrap();
        let x = random_inputs(1, 3, 64, 4).remove(0);
        let lp = aggregator_head(&head, &x).unwrap();
        assert!(lp.data().iter().all(|&v| (v + 10f64.ln()).abs() < 1e-12));

        head = MlpParams::new(&[64, 64, 10], false, &mut stream(5, Stream::Init)).unwrap();
        let lp = aggregator_head(&head, &x).unwrap();
        let (logits, _) = mlp_forward(&head, &x).unwrap();
        for r in 0..3 {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            let oracle = crate::nn::log_softmax(logits.row(r));
            assert_eq!(lp.row(r), oracle.as_slice());
        }
    }

    fn state(rows: &[&[f64]]) -> PredictionState {
        PredictionState { values: rows.iter().map(|r| Some(Matrix::from_rows(&[r.to_vec()]).unwrap())).collect() }
    }

    #[test]
    fn gossip_examples() {
        let g = graph(GraphKind::Complete, 2, 2);
        let clean = RealizedGraph::from_base(&g);
        let s = state(&[&[0.0, -1.0], &[-1.0, 0.0]]);
        let next = gossip_round(&s, &clean, g.aggregators());
        for v in &next.values {
            assert_eq!(v.as_ref().unwrap().row(0), &[-0.5, -0.5]);
        }
        let same = state(&[&[-0.2, -1.7], &[-0.2, -1.7]]);
        assert_eq!(gossip_round(&same, &clean, g.aggregators()), same);

        // ring of 4: one round equals V · Z
        let ring = graph(GraphKind::Ring, 4, 4);
        let z = state(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0], &[-1.0, 5.0]]);
        let next = gossip_round(&z, &RealizedGraph::from_base(&ring), ring.aggregators());
        let v = consensus_matrix(&ring).v;
        let zm = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [-1.0, 5.0]]).unwrap();
        let oracle = v.matmul(&zm).unwrap();
        for i in 0..4 {
            let got = next.values[i].as_ref().unwrap().row(0);
            for (a, b) in got.iter().zip(oracle.row(i)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dead_aggregators_drop_out_of_gossip() {
        let g = graph(GraphKind::Complete, 3, 3);
        let s = PredictionState {
            values: vec![
                Some(Matrix::from_rows(&[[0.0]]).unwrap()),
                None,
                Some(Matrix::from_rows(&[[2.0]]).unwrap()),
            ],
        };
        let next = gossip_round(&s, &RealizedGraph::from_base(&g), g.aggregators());
        assert!(next.values[1].is_none());
        assert_eq!(next.values[0].as_ref().unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn degenerate_network_is_a_plain_mlp() {
        let g = graph(GraphKind::Complete, 1, 1);
        let arch = Architecture { encoder: vec![6, 5, 3], head_hidden: vec![4], classes: 3 };
        let model = SplitModel::new(&arch, 1, &[0], &mut stream(8, Stream::Init)).unwrap();
        let inputs = random_inputs(1, 4, 6, 9);
        let out = mags_infer_on(&model, &inputs, &[RealizedGraph::from_base(&g)], false).unwrap();
        let mut layers = model.encoders[0].layers.clone();
        layers.extend(model.heads[0].layers.clone());
        let mono = MlpParams { layers, relu_output: false };
        let (logits, _) = mlp_forward(&mono, &inputs[0]).unwrap();
        let lp = out.log_probs[0].as_ref().unwrap();
        for (a, b) in lp.data().iter().zip(log_softmax_rows(&logits).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn many_gossip_rounds_reach_consensus() {
        let g = graph(GraphKind::Grid, 16, 16);
        let arch = Architecture::preset(16, 49, 10);
        let model = SplitModel::new(&arch, 16, g.aggregators(), &mut stream(2, Stream::Init)).unwrap();
        let inputs = random_inputs(16, 2, 49, 10);
        let rounds = vec![RealizedGraph::from_base(&g); 400];
        let out = mags_infer_on(&model, &inputs, &rounds, false).unwrap();
        let first = out.log_probs[0].as_ref().unwrap();
        for lp in out.log_probs.iter().flatten() {
            for (a, b) in lp.data().iter().zip(first.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn trace_dump_has_one_block_per_round() {
        let g = graph(GraphKind::Complete, 4, 4);
        let arch = Architecture { encoder: vec![2, 2], head_hidden: vec![3], classes: 2 };
        let model = SplitModel::new(&arch, 4, g.aggregators(), &mut stream(1, Stream::Init)).unwrap();
        let inputs = random_inputs(4, 1, 2, 1);
        let out = mags_infer_on(&model, &inputs, &vec![RealizedGraph::from_base(&g); 3], true).unwrap();
        let mut buf = Vec::new();
        write_prediction_trace(&mut buf, &model, &out, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,aggregator,c0,c1");
        assert_eq!(text.lines().count(), 1 + 3 * 4);
    }
}
