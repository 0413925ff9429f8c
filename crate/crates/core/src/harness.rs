//! Experiment driver: TOML configs, method naming, the train/eval run
//! matrix and tidy CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::data::{load_idx, make_splits, synth_dataset, ClientData, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::faults::FaultModel;
use crate::inference::{Architecture, SplitModel};
use crate::metrics::{evaluate_seed, mean_std, EvalSettings, Policy};
use crate::nn::AdamConfig;
use crate::topology::{build_graph, AggregatorPlacement, DeviceGraph, GraphKind};
use crate::train::{fit, write_curve, Checkpoint, Dropout, TrainConfig};

/// Environment variable that relative dataset paths are resolved against.
pub const DATA_ROOT_ENV: &str = "MAGS_DATA_ROOT";
pub const RUNS_SCHEMA: &str = "# mags-runs v1";
pub const RUNS_HEADER: &str = "method,graph,fault,rate,policy,seed,accuracy,comm";
pub const AGGREGATE_SCHEMA: &str = "# mags-aggregate v1";
pub const AGGREGATE_HEADER: &str = "method,graph,fault,rate,policy,mean,std,comm_mean,seeds";
pub const TIMINGS_HEADER: &str = "method,fault,rate,seed,wall_seconds";
pub const PANEL_HEADER: &str = "method,x,y,err";
pub const TABLE2_HEADER: &str = "method,graph,fault,rate,comm_mean";
pub const TABLE3_HEADER: &str = "method,graph,fault,rate,active_rand,active_best,active_worst,any_rand";

/// How many devices aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggregatorCount {
    /// A single server.
    Vfl,
    /// Every device.
    Macl,
    Fixed(usize),
}

/// A method name such as `VFL`, `PD-VFL`, `4-MACL`, `CD-MACL-G4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub dropout: DropoutKind,
    pub aggregators: AggregatorCount,
    pub gossip_rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutKind {
    None,
    Party,
    Communication,
}

impl MethodSpec {
    pub fn aggregator_count(&self, devices: usize) -> usize {
        match self.aggregators {
            AggregatorCount::Vfl => 1,
            AggregatorCount::Macl => devices,
            AggregatorCount::Fixed(k) => k,
        }
    }

    /// The trained model this method evaluates (gossip is inference-only).
    pub fn trained(&self) -> MethodSpec {
        MethodSpec { gossip_rounds: 0, ..*self }
    }

    pub fn dropout(&self, rate: f64) -> Dropout {
        match self.dropout {
            DropoutKind::None => Dropout::None,
            DropoutKind::Party => Dropout::Party(rate),
            DropoutKind::Communication => Dropout::Communication(rate),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.dropout {
            DropoutKind::None => {}
            DropoutKind::Party => write!(f, "PD-")?,
            DropoutKind::Communication => write!(f, "CD-")?,
        }
        match self.aggregators {
            AggregatorCount::Vfl => write!(f, "VFL")?,
            AggregatorCount::Macl => write!(f, "MACL")?,
            AggregatorCount::Fixed(k) => write!(f, "{k}-MACL")?,
        }
        if self.gossip_rounds > 0 {
            write!(f, "-G{}", self.gossip_rounds)?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method {s:?}"));
        let mut rest = s.trim();
        let dropout = if let Some(r) = rest.strip_prefix("PD-") {
            rest = r;
            DropoutKind::Party
        } else if let Some(r) = rest.strip_prefix("CD-") {
            rest = r;
            DropoutKind::Communication
        } else {
            DropoutKind::None
        };
        let mut gossip_rounds = 0;
        if let Some((head, g)) = rest.rsplit_once("-G") {
            gossip_rounds = g.parse().map_err(|_| bad())?;
            rest = head;
        }
        let aggregators = match rest {
            "VFL" => AggregatorCount::Vfl,
            "MACL" => AggregatorCount::Macl,
            _ => {
                let k = rest.strip_suffix("-MACL").ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                AggregatorCount::Fixed(k)
            }
        };
        Ok(MethodSpec { dropout, aggregators, gossip_rounds })
    }
}

fn default_seeds() -> Vec<u64> {
    (1..=16).collect()
}

fn default_rates() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

fn default_policies() -> Vec<String> {
    Policy::ALL.iter().map(|p| p.name().to_string()).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_test_count")]
        test_count: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_signal")]
        signal: f64,
        #[serde(default = "one")]
        data_seed: u64,
        #[serde(default = "default_grid")]
        grid_side: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first `max_train` training images.
        max_train: Option<usize>,
        max_test: Option<usize>,
        #[serde(default = "default_grid")]
        grid_side: usize,
    },
}

fn default_n() -> usize {
    10_000
}
fn default_test_count() -> usize {
    2000
}
fn default_classes() -> usize {
    10
}
fn default_noise() -> f64 {
    0.3
}
fn default_signal() -> f64 {
    SynthSpec::default().signal
}
fn one() -> u64 {
    1
}
fn default_grid() -> usize {
    4
}

impl DataConfig {
    pub fn grid_side(&self) -> usize {
        match self {
            DataConfig::Synthetic { grid_side, .. } | DataConfig::Idx { grid_side, .. } => *grid_side,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default = "default_graph")]
    pub kind: String,
    /// `lowest` or `uniform`.
    #[serde(default = "default_placement")]
    pub placement: String,
    #[serde(default = "one")]
    pub placement_seed: u64,
}

fn default_graph() -> String {
    "complete".into()
}
fn default_placement() -> String {
    "lowest".into()
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { kind: default_graph(), placement: default_placement(), placement_seed: 1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "default_fault_kind")]
    pub fault_kind: String,
    #[serde(default)]
    pub fault_rate: f64,
    #[serde(default)]
    pub gossip_rounds: usize,
}

fn default_methods() -> Vec<String> {
    vec!["MACL".into()]
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_dropout_rate() -> f64 {
    0.3
}
fn default_fault_kind() -> String {
    "none".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Methods to evaluate; defaults to the trained methods.
    pub methods: Option<Vec<String>>,
    #[serde(default = "default_fault_kinds")]
    pub fault_kinds: Vec<String>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    #[serde(default = "one_usize")]
    pub trials: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_fault_kinds() -> Vec<String> {
    vec!["communication".into(), "device".into()]
}
fn one_usize() -> usize {
    1
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

/// A parsed and validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Directory relative dataset paths fall back to.
    pub base_dir: PathBuf,
    pub graph_kind: GraphKind,
    pub train_methods: Vec<MethodSpec>,
    pub eval_methods: Vec<MethodSpec>,
    pub faults: Vec<(String, f64)>,
    pub policies: Vec<Policy>,
}

impl Experiment {
    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(config, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::new(config, &base)
    }

    pub fn new(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        if config.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let graph_kind: GraphKind = config.graph.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        let train_methods = parse_methods(&config.train.methods)?;
        if train_methods.is_empty() {
            return Err(Error::Config("no training methods".into()));
        }
        let eval_methods = match &config.eval.methods {
            Some(m) => parse_methods(m)?,
            None => train_methods.clone(),
        };
        if config.eval.policies.is_empty() {
            return Err(Error::Config("policy list is empty".into()));
        }
        let policies = config.eval.policies.iter().map(|p| p.parse()).collect::<Result<Vec<Policy>>>()?;
        let mut faults = Vec::new();
        for kind in &config.eval.fault_kinds {
            for &rate in &config.eval.rates {
                FaultModel::from_kind(kind, rate)?;
                faults.push((kind.clone(), rate));
            }
        }
        for r in [config.train.dropout_rate, config.train.fault_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rate {r} outside [0, 1]")));
            }
        }
        FaultModel::from_kind(&config.train.fault_kind, config.train.fault_rate)?;
        if !matches!(config.graph.placement.as_str(), "lowest" | "uniform") {
            return Err(Error::Config(format!("unknown placement {:?}", config.graph.placement)));
        }
        let exp = Self {
            base_dir: base_dir.to_path_buf(),
            graph_kind,
            train_methods,
            eval_methods,
            faults,
            policies,
            config,
        };
        if let DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. } = &exp.config.data {
            for p in [train_images, train_labels, test_images, test_labels] {
                let resolved = exp.resolve(p);
                if !resolved.exists() {
                    return Err(Error::Config(format!("dataset file {} not found", resolved.display())));
                }
            }
        }
        Ok(exp)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => Path::new(&root).join(p),
            None => self.base_dir.join(p),
        }
    }

    /// (train+validation, test) datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.config.data {
            DataConfig::Synthetic { n, test_count, classes, noise, signal, data_seed, grid_side } => {
                if test_count >= n {
                    return Err(Error::Config(format!("test_count {test_count} must be below n {n}")));
                }
                let ds = synth_dataset(&SynthSpec {
                    n: *n,
                    classes: *classes,
                    grid_side: *grid_side,
                    seed: *data_seed,
                    noise: *noise,
                    signal: *signal,
                })?;
                Ok((ds.slice(0..n - test_count), ds.slice(n - test_count..*n)))
            }
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, max_train, max_test, .. } => {
                let mut train = load_idx(&self.resolve(train_images), &self.resolve(train_labels))?;
                let mut test = load_idx(&self.resolve(test_images), &self.resolve(test_labels))?;
                if let Some(m) = max_train {
                    train = train.slice(0..(*m).min(train.len()));
                }
                if let Some(m) = max_test {
                    test = test.slice(0..(*m).min(test.len()));
                }
                Ok((train, test))
            }
        }
    }

    pub fn graph(&self, method: &MethodSpec, devices: usize) -> Result<DeviceGraph> {
        let k = method.aggregator_count(devices);
        let placement = match self.config.graph.placement.as_str() {
            "uniform" => AggregatorPlacement::Uniform { seed: self.config.graph.placement_seed },
            _ => AggregatorPlacement::Lowest,
        };
        build_graph(self.graph_kind, devices, k, &placement)
    }

    pub fn train_config(&self, method: &MethodSpec, seed: u64) -> Result<TrainConfig> {
        let t = &self.config.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig { lr: t.lr, ..AdamConfig::default() },
            dropout: method.dropout(t.dropout_rate),
            train_faults: FaultModel::from_kind(&t.fault_kind, t.fault_rate)?,
            train_gossip_rounds: t.gossip_rounds,
            seed,
        })
    }

    pub fn checkpoint_path(&self, method: &MethodSpec, seed: u64) -> PathBuf {
        self.config.out_dir.join("checkpoints").join(format!("{}_seed{seed}.ckpt", method.trained()))
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<MethodSpec>> {
    names.iter().map(|m| m.parse()).collect()
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Trains every (method, seed) pair and writes one checkpoint and one
/// learning-curve CSV per pair. Returns the checkpoint paths.
pub fn train_all(exp: &Experiment, workers: Option<usize>) -> Result<Vec<PathBuf>> {
    let (trainval, _) = exp.datasets()?;
    let grid = exp.config.data.grid_side();
    let dir = exp.config.out_dir.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let jobs: Vec<(MethodSpec, u64)> = exp
        .train_methods
        .iter()
        .flat_map(|m| exp.config.seeds.iter().map(move |&s| (m.trained(), s)))
        .collect();
    pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(method, seed)| {
                let (train, val) = make_splits(&trainval, *seed);
                let train = ClientData::new(&train, grid)?;
                let val = ClientData::new(&val, grid)?;
                let devices = train.client_count();
                let base = exp.graph(method, devices)?;
                let arch = Architecture::preset(devices, train.views[0].cols(), train.class_count);
                let mut outcome = fit(&exp.train_config(method, *seed)?, &arch, &train, &val, &base)?;
                outcome.checkpoint.config.push(("method".into(), method.to_string()));
                let path = exp.checkpoint_path(method, *seed);
                outcome.checkpoint.save(&path)?;
                let curve = std::fs::File::create(path.with_extension("curve.csv"))?;
                write_curve(std::io::BufWriter::new(curve), &outcome.curve)?;
                Ok(path)
            })
            .collect()
    })
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub graph: String,
    pub fault: String,
    pub rate: f64,
    pub policy: Policy,
    pub seed: u64,
    /// `None` when the policy is undefined for the configuration.
    pub accuracy: Option<f64>,
    pub comm: f64,
    pub wall_seconds: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Evaluates every (method, fault kind, rate, seed) cell with all policies
/// and writes `runs.csv`, `aggregate.csv` and `timings.csv` under the output
/// directory. Nothing is written if any cell fails.
pub fn eval_all(exp: &Experiment, workers: Option<usize>) -> Result<Vec<RunRecord>> {
    let (_, test) = exp.datasets()?;
    let test = ClientData::new(&test, exp.config.data.grid_side())?;
    let devices = test.client_count();

    let mut models: BTreeMap<(String, u64), (SplitModel, DeviceGraph)> = BTreeMap::new();
    for method in &exp.eval_methods {
        for &seed in &exp.config.seeds {
            let key = (method.trained().to_string(), seed);
            if models.contains_key(&key) {
                continue;
            }
            let path = exp.checkpoint_path(method, seed);
            let ck = Checkpoint::load(&path)?;
            let base = exp.graph(method, devices)?;
            check_schema(&ck, &base, &test, &path)?;
            models.insert(key, (ck.model, base));
        }
    }

    let mut jobs = Vec::new();
    for method in &exp.eval_methods {
        for (kind, rate) in &exp.faults {
            for &seed in &exp.config.seeds {
                jobs.push((*method, kind.clone(), *rate, seed));
            }
        }
    }
    let settings_for = |kind: &str, rate: f64, g: usize| -> Result<EvalSettings> {
        Ok(EvalSettings {
            fault: FaultModel::from_kind(kind, rate)?,
            gossip_rounds: g,
            batch_size: exp.config.eval.batch_size,
            trials: exp.config.eval.trials,
        })
    };
    let graph_name = exp.graph_kind.to_string();
    let per_job: Vec<Vec<RunRecord>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(method, kind, rate, seed)| {
                let (model, base) = &models[&(method.trained().to_string(), *seed)];
                let start = Instant::now();
                let res = evaluate_seed(model, &test, base, &exp.policies, &settings_for(kind, *rate, method.gossip_rounds)?, *seed)?;
                let wall = start.elapsed().as_secs_f64();
                let k = model.aggregators.len();
                Ok(exp
                    .policies
                    .iter()
                    .zip(&res.accuracy)
                    .map(|(&policy, &acc)| RunRecord {
                        method: method.to_string(),
                        graph: graph_name.clone(),
                        fault: kind.clone(),
                        rate: *rate,
                        policy,
                        seed: *seed,
                        accuracy: policy.defined_for(k).then_some(acc),
                        comm: res.comm_mean,
                        wall_seconds: wall,
                    })
                    .collect())
            })
            .collect::<Result<_>>()
    })?;
    let records: Vec<RunRecord> = per_job.into_iter().flatten().collect();

    std::fs::create_dir_all(&exp.config.out_dir)?;
    write_runs(&exp.config.out_dir.join("runs.csv"), &records)?;
    write_aggregate(&exp.config.out_dir.join("aggregate.csv"), &records)?;
    let mut t = csv::Writer::from_path(exp.config.out_dir.join("timings.csv")).map_err(csv_err)?;
    t.write_record(TIMINGS_HEADER.split(',')).map_err(csv_err)?;
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if seen.insert((r.method.clone(), r.fault.clone(), r.rate.to_bits(), r.seed)) {
            t.write_record([r.method.clone(), r.fault.clone(), r.rate.to_string(), r.seed.to_string(), r.wall_seconds.to_string()])
                .map_err(csv_err)?;
        }
    }
    t.flush()?;
    Ok(records)
}

fn check_schema(ck: &Checkpoint, base: &DeviceGraph, test: &ClientData, path: &Path) -> Result<()> {
    let m = &ck.model;
    let mismatch = |what: String| Error::Input(format!("checkpoint {} does not match the experiment: {what}", path.display()));
    if m.client_count() != test.client_count() {
        return Err(mismatch(format!("{} clients vs {} data views", m.client_count(), test.client_count())));
    }
    if m.class_count != test.class_count {
        return Err(mismatch(format!("{} classes vs {}", m.class_count, test.class_count)));
    }
    if m.aggregators != base.aggregators() {
        return Err(mismatch(format!("aggregators {:?} vs {:?}", m.aggregators, base.aggregators())));
    }
    if m.encoders[0].input_dim() != test.views[0].cols() {
        return Err(mismatch(format!("patch dim {} vs {}", m.encoders[0].input_dim(), test.views[0].cols())));
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn write_with_schema(path: &Path, schema: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    {
        use std::io::Write;
        writeln!(buf, "{schema}")?;
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header.split(',')).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.graph.clone(),
                r.fault.clone(),
                r.rate.to_string(),
                r.policy.to_string(),
                r.seed.to_string(),
                fmt_opt(r.accuracy),
                r.comm.to_string(),
            ]
        })
        .collect();
    write_with_schema(path, RUNS_SCHEMA, RUNS_HEADER, &rows)
}

type CellKey = (String, String, String, String, Policy);

fn group_cells(records: &[RunRecord]) -> Vec<(CellKey, Vec<&RunRecord>)> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut cells: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.graph.clone(), r.fault.clone(), r.rate.to_string(), r.policy);
        let i = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key.clone());
            order.len() - 1
        });
        cells.entry(i).or_default().push(r);
    }
    order.into_iter().enumerate().map(|(i, k)| (k, cells.remove(&i).unwrap_or_default())).collect()
}

/// Mean ± std over seeds of a cell; `None` when the metric is undefined.
fn cell_stats(rs: &[&RunRecord]) -> (Option<(f64, f64)>, f64) {
    let (comm, _) = mean_std(&rs.iter().map(|r| r.comm).collect::<Vec<_>>());
    let acc: Option<Vec<f64>> = rs.iter().map(|r| r.accuracy).collect();
    (acc.map(|a| mean_std(&a)), comm)
}

pub fn write_aggregate(path: &Path, records: &[RunRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = group_cells(records)
        .into_iter()
        .map(|((method, graph, fault, rate, policy), rs)| {
            let (stats, comm) = cell_stats(&rs);
            vec![
                method,
                graph,
                fault,
                rate,
                policy.to_string(),
                fmt_opt(stats.map(|s| s.0)),
                fmt_opt(stats.map(|s| s.1)),
                comm.to_string(),
                rs.len().to_string(),
            ]
        })
        .collect();
    write_with_schema(path, AGGREGATE_SCHEMA, AGGREGATE_HEADER, &rows)
}

/// Reads a runs CSV written by [`write_runs`] (wall time is not stored).
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(RUNS_SCHEMA) {
        return Err(Error::Parse(format!("{}: missing {RUNS_SCHEMA:?} line", path.display())));
    }
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.join(",") != RUNS_HEADER {
        return Err(Error::Parse(format!("{}: unexpected header {:?}", path.display(), header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j).parse().map_err(|_| Error::Parse(format!("{} row {}: bad number {:?}", path.display(), i + 1, field(j))))
        };
        let acc = num(6)?;
        out.push(RunRecord {
            method: field(0).to_string(),
            graph: field(1).to_string(),
            fault: field(2).to_string(),
            rate: num(3)?,
            policy: field(4).parse()?,
            seed: field(5).parse().map_err(|_| Error::Parse(format!("{} row {}: bad seed", path.display(), i + 1)))?,
            accuracy: (!acc.is_nan()).then_some(acc),
            comm: num(7)?,
            wall_seconds: f64::NAN,
        });
    }
    Ok(out)
}

/// Writes one `fig_<fault>_<graph>.csv` panel per (fault kind, graph) with
/// the `active_rand` series, plus `table2.csv` (communication) and
/// `table3.csv` (all policies). Returns the written paths.
pub fn plotdata(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut records = Vec::new();
    for p in inputs {
        records.extend(read_runs(p)?);
    }
    std::fs::create_dir_all(out_dir)?;
    let cells = group_cells(&records);
    let mut written = Vec::new();

    let mut panels: BTreeMap<(String, String), Vec<Vec<String>>> = BTreeMap::new();
    for ((method, graph, fault, rate, policy), rs) in &cells {
        if *policy != Policy::ActiveRand {
            continue;
        }
        let (stats, _) = cell_stats(rs);
        panels.entry((fault.clone(), graph.clone())).or_default().push(vec![
            method.clone(),
            rate.clone(),
            fmt_opt(stats.map(|s| s.0)),
            fmt_opt(stats.map(|s| s.1)),
        ]);
    }
    for ((fault, graph), rows) in &panels {
        let safe: String = graph.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
        let path = out_dir.join(format!("fig_{fault}_{safe}.csv"));
        write_plain(&path, PANEL_HEADER, rows)?;
        written.push(path);
    }

    let mut t2 = Vec::new();
    let mut t3: Vec<(Vec<String>, [String; 4])> = Vec::new();
    for ((method, graph, fault, rate, policy), rs) in &cells {
        let key = vec![method.clone(), graph.clone(), fault.clone(), rate.clone()];
        let (stats, comm) = cell_stats(rs);
        let slot = Policy::ALL.iter().position(|p| p == policy).expect("known policy");
        let i = t3.iter().position(|(k, _)| *k == key).unwrap_or_else(|| {
            t3.push((key.clone(), std::array::from_fn(|_| String::new())));
            let mut row = key.clone();
            row.push(comm.to_string());
            t2.push(row);
            t3.len() - 1
        });
        t3[i].1[slot] = stats.map_or_else(|| "nan".to_string(), |(m, s)| format!("{m:.4}±{s:.4}"));
    }
    let path = out_dir.join("table2.csv");
    write_plain(&path, TABLE2_HEADER, &t2)?;
    written.push(path);
    let rows: Vec<Vec<String>> = t3.into_iter().map(|(mut k, v)| {
        k.extend(v);
        k
    }).collect();
    let path = out_dir.join("table3.csv");
    write_plain(&path, TABLE3_HEADER, &rows)?;
    written.push(path);
    Ok(written)
}

fn write_plain(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
