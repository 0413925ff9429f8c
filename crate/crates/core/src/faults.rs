//! Fault processes that turn a base topology into realized graphs.

use std::fmt;
use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::topology::DeviceGraph;

/// Default Markov stay-alive probability.
pub const DEFAULT_STAY_ALIVE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultModel {
    None,
    /// Each device independently absent with probability `rate`.
    Device { rate: f64 },
    /// Each directed non-self link (entity links included) independently
    /// absent with probability `rate`.
    Communication { rate: f64 },
    /// Two-state Markov chain per link, advanced once per round, whose
    /// stationary fault probability is `rate`.
    MarkovComm { rate: f64, stay_alive: f64 },
}

impl FaultModel {
    pub fn rate(&self) -> f64 {
        match *self {
            FaultModel::None => 0.0,
            FaultModel::Device { rate } | FaultModel::Communication { rate } | FaultModel::MarkovComm { rate, .. } => rate,
        }
    }

    /// Short tag used in CSV files and configs.
    pub fn kind_name(&self) -> &'static str {
        match self {
            FaultModel::None => "none",
            FaultModel::Device { .. } => "device",
            FaultModel::Communication { .. } => "communication",
            FaultModel::MarkovComm { .. } => "markov",
        }
    }

    pub fn from_kind(kind: &str, rate: f64) -> Result<FaultModel> {
        let model = match kind {
            "none" => FaultModel::None,
            "device" => FaultModel::Device { rate },
            "communication" | "comm" => FaultModel::Communication { rate },
            "markov" => FaultModel::MarkovComm { rate, stay_alive: DEFAULT_STAY_ALIVE },
            other => return Err(Error::Config(format!("unknown fault kind {other:?}"))),
        };
        model.validate()?;
        Ok(model)
    }

    /// Probability that a faulted Markov link recovers: `q = (1−p)(1−r)/r`.
    /// With `r = 0` links never fault, so `q` is irrelevant and reported as 1.
    pub fn recovery_prob(&self) -> Option<f64> {
        match *self {
            FaultModel::MarkovComm { rate, stay_alive } if rate > 0.0 => {
                Some((1.0 - stay_alive) * (1.0 - rate) / rate)
            }
            FaultModel::MarkovComm { .. } => Some(1.0),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rate();
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("fault rate {r} outside [0, 1]")));
        }
        if let FaultModel::MarkovComm { stay_alive, .. } = *self {
            if !(0.0..=1.0).contains(&stay_alive) {
                return Err(Error::Config(format!("stay-alive probability {stay_alive} outside [0, 1]")));
            }
            let q = self.recovery_prob().unwrap_or(1.0);
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!(
                    "Markov recovery probability q = {q} outside [0, 1] for rate {r}, p = {stay_alive}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FaultModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultModel::None => write!(f, "none"),
            FaultModel::MarkovComm { rate, stay_alive } => write!(f, "markov({rate},p={stay_alive})"),
            other => write!(f, "{}({})", other.kind_name(), other.rate()),
        }
    }
}

/// The network as it exists at one communication round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealizedGraph {
    pub t: usize,
    devices: usize,
    alive: Vec<bool>,
    /// `links[recv * C + send]`: a message from `send` reaches `recv`.
    links: Vec<bool>,
    /// Per device: its link to the external entity is up.
    entity: Vec<bool>,
}

impl RealizedGraph {
    /// The fault-free realization of a base graph.
    pub fn from_base(base: &DeviceGraph) -> Self {
        let c = base.device_count();
        let mut links = vec![false; c * c];
        for recv in 0..c {
            for send in 0..c {
                links[recv * c + send] = base.has_edge(recv, send);
            }
        }
        let entity = (0..c).map(|d| base.is_aggregator(d)).collect();
        Self { t: 0, devices: c, alive: vec![true; c], links, entity }
    }

    pub fn device_count(&self) -> usize {
        self.devices
    }

    pub fn is_alive(&self, d: usize) -> bool {
        self.alive[d]
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// A message from `send` reaches `recv`. Self-delivery holds for every
    /// alive device.
    pub fn delivers(&self, recv: usize, send: usize) -> bool {
        self.links[recv * self.devices + send]
    }

    pub fn entity_link(&self, d: usize) -> bool {
        self.entity[d]
    }

    /// Number of alive directed non-self links into `recv`.
    pub fn in_degree(&self, recv: usize) -> usize {
        (0..self.devices).filter(|&s| s != recv && self.delivers(recv, s)).count()
    }

    /// Alive directed device→device links, excluding self-loops.
    pub fn directed_link_count(&self) -> usize {
        (0..self.devices).map(|r| self.in_degree(r)).sum()
    }

    /// Appends `(t, kind, entity, alive)` rows describing this realization.
    pub fn write_trace<W: Write>(&self, mut w: W, base: &DeviceGraph) -> Result<()> {
        let t = self.t;
        for d in 0..self.devices {
            writeln!(w, "{t},device,{d},{}", u8::from(self.alive[d]))?;
        }
        for recv in 0..self.devices {
            for send in base.neighbors(recv) {
                writeln!(w, "{t},link,{send}->{recv},{}", u8::from(self.delivers(recv, send)))?;
            }
        }
        for &k in base.aggregators() {
            writeln!(w, "{t},entity_link,{k}->entity,{}", u8::from(self.entity[k]))?;
        }
        Ok(())
    }
}

pub const TRACE_HEADER: &str = "t,kind,entity,alive";

pub fn sample_device_faults<R: Rng + ?Sized>(base: &DeviceGraph, rate: f64, rng: &mut R) -> RealizedGraph {
    let mut g = RealizedGraph::from_base(base);
    let c = g.devices;
    for d in 0..c {
        g.alive[d] = !rng.random_bool(rate.clamp(0.0, 1.0));
    }
    for recv in 0..c {
        for send in 0..c {
            let i = recv * c + send;
            g.links[i] = g.links[i] && g.alive[recv] && g.alive[send];
        }
    }
    for d in 0..c {
        g.entity[d] = g.entity[d] && g.alive[d];
    }
    g
}

pub fn sample_comm_faults<R: Rng + ?Sized>(base: &DeviceGraph, rate: f64, rng: &mut R) -> RealizedGraph {
    let mut g = RealizedGraph::from_base(base);
    let c = g.devices;
    let rate = rate.clamp(0.0, 1.0);
    for recv in 0..c {
        for send in 0..c {
            let i = recv * c + send;
            if send != recv && g.links[i] {
                g.links[i] = !rng.random_bool(rate);
            }
        }
    }
    for d in 0..c {
        if g.entity[d] {
            g.entity[d] = !rng.random_bool(rate);
        }
    }
    g
}

/// Per-link state of the temporal Markov fault model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkovLinkState {
    devices: usize,
    links: Vec<bool>,
    entity: Vec<bool>,
}

impl MarkovLinkState {
    /// Every link starts alive.
    pub fn new(base: &DeviceGraph) -> Self {
        let r = RealizedGraph::from_base(base);
        Self { devices: r.devices, links: r.links, entity: r.entity }
    }

    pub fn realize(&self, t: usize) -> RealizedGraph {
        RealizedGraph {
            t,
            devices: self.devices,
            alive: vec![true; self.devices],
            links: self.links.clone(),
            entity: self.entity.clone(),
        }
    }

    /// Fraction of tracked non-self links that are currently faulted.
    pub fn faulted_fraction(&self, base: &DeviceGraph) -> f64 {
        let (mut faulted, mut total) = (0usize, 0usize);
        for recv in 0..self.devices {
            for send in base.neighbors(recv) {
                total += 1;
                faulted += usize::from(!self.links[recv * self.devices + send]);
            }
        }
        for &k in base.aggregators() {
            total += 1;
            faulted += usize::from(!self.entity[k]);
        }
        if total == 0 { 0.0 } else { faulted as f64 / total as f64 }
    }
}

/// Advances every non-self link (entity links included) one step.
pub fn markov_step<R: Rng + ?Sized>(
    state: &MarkovLinkState,
    base: &DeviceGraph,
    model: &FaultModel,
    rng: &mut R,
) -> Result<MarkovLinkState> {
    let FaultModel::MarkovComm { rate, stay_alive } = *model else {
        return Err(Error::Config(format!("markov_step needs a Markov fault model, got {model}")));
    };
    model.validate()?;
    let (stay, recover) = if rate == 0.0 { (1.0, 1.0) } else { (stay_alive, model.recovery_prob().unwrap_or(1.0)) };
    let mut next = state.clone();
    let mut step = |alive: &mut bool| {
        let u: f64 = rng.random();
        *alive = if *alive { u < stay } else { u < recover };
    };
    let c = state.devices;
    for recv in 0..c {
        for send in 0..c {
            if send != recv && base.has_edge(recv, send) {
                step(&mut next.links[recv * c + send]);
            }
        }
    }
    for d in 0..c {
        if base.is_aggregator(d) {
            step(&mut next.entity[d]);
        }
    }
    Ok(next)
}

/// Aggregators that are alive and can reach the external entity.
pub fn active_set(realized: &RealizedGraph, aggregators: &[usize]) -> Vec<usize> {
    aggregators
        .iter()
        .copied()
        .filter(|&k| realized.is_alive(k) && realized.entity_link(k))
        .collect()
}

/// Stateful sampler producing the per-round realizations of one inference
/// (or one training batch).
///
/// i.i.d. models draw a single realization and hold it for every round;
/// the Markov model advances one step per round and keeps its link state
/// across calls.
#[derive(Debug, Clone)]
pub struct FaultProcess {
    model: FaultModel,
    markov: Option<MarkovLinkState>,
    t: usize,
}

impl FaultProcess {
    pub fn new(model: FaultModel, base: &DeviceGraph) -> Result<Self> {
        model.validate()?;
        let markov = matches!(model, FaultModel::MarkovComm { .. }).then(|| MarkovLinkState::new(base));
        Ok(Self { model, markov, t: 0 })
    }

    pub fn model(&self) -> FaultModel {
        self.model
    }

    /// Advances the Markov chain `steps` times without producing output.
    pub fn burn_in<R: Rng + ?Sized>(&mut self, base: &DeviceGraph, steps: usize, rng: &mut R) -> Result<()> {
        if let Some(state) = self.markov.as_mut() {
            for _ in 0..steps {
                *state = markov_step(state, base, &self.model, rng)?;
            }
        }
        Ok(())
    }

    /// Realizations for `rounds` consecutive communication rounds.
    pub fn realize<R: Rng + ?Sized>(&mut self, base: &DeviceGraph, rounds: usize, rng: &mut R) -> Result<Vec<RealizedGraph>> {
        let rounds = rounds.max(1);
        let start = self.t;
        self.t += rounds;
        let single = |g: RealizedGraph| {
            (0..rounds).map(|i| RealizedGraph { t: start + i + 1, ..g.clone() }).collect()
        };
        Ok(match self.model {
            FaultModel::None => single(RealizedGraph::from_base(base)),
            FaultModel::Device { rate } => single(sample_device_faults(base, rate, rng)),
            FaultModel::Communication { rate } => single(sample_comm_faults(base, rate, rng)),
            FaultModel::MarkovComm { .. } => {
                let mut out = Vec::with_capacity(rounds);
                for i in 0..rounds {
                    let state = self.markov.as_mut().expect("markov state present");
                    *state = markov_step(state, base, &self.model, rng)?;
                    out.push(state.realize(start + i + 1));
                }
                out
            }
        })
    }
}
