//! Base communication graphs over devices, consensus matrices and spectral
//! radius.
//!
//! Devices are indexed `0..C` internally. The external collection entity is
//! not a device: it only links to aggregators, and it appears as node `0`
//! (with devices shifted to `1..=C`) in the edge-list text format.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphKind {
    Complete,
    /// Index cycle; the last device connects back to the first.
    Ring,
    /// 4-neighborhood on the √C × √C lattice.
    Grid,
    /// Lattice with wrap-around edges.
    Torus,
    /// Devices within Euclidean lattice distance `radius` (closed ball).
    Rgg { radius: f64 },
}

impl GraphKind {
    fn needs_lattice(self) -> bool {
        !matches!(self, GraphKind::Complete | GraphKind::Ring)
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Complete => write!(f, "complete"),
            GraphKind::Ring => write!(f, "ring"),
            GraphKind::Grid => write!(f, "grid"),
            GraphKind::Torus => write!(f, "torus"),
            GraphKind::Rgg { radius } => write!(f, "rgg({radius})"),
        }
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "complete" => return Ok(GraphKind::Complete),
            "ring" => return Ok(GraphKind::Ring),
            "grid" => return Ok(GraphKind::Grid),
            "torus" => return Ok(GraphKind::Torus),
            _ => {}
        }
        let radius = s
            .strip_prefix("rgg(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|r| r.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Parse(format!("unknown graph kind {s:?}")))?;
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::Parse(format!("invalid rgg radius {radius}")));
        }
        Ok(GraphKind::Rgg { radius })
    }
}

/// How the aggregator devices are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AggregatorPlacement {
    /// The `K` lowest device indices.
    #[default]
    Lowest,
    /// `K` devices drawn uniformly without replacement.
    Uniform { seed: u64 },
    /// Explicit device list (e.g. to move the single VFL server).
    Explicit(Vec<usize>),
}

/// Undirected base topology with self-loops on every device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGraph {
    kind: GraphKind,
    devices: usize,
    positions: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
    aggregators: Vec<usize>,
}

fn lattice_side(devices: usize) -> usize {
    let mut side = (devices as f64).sqrt() as usize;
    while side * side < devices {
        side += 1;
    }
    while side > 0 && (side - 1) * (side - 1) >= devices {
        side -= 1;
    }
    side
}

pub fn build_graph(kind: GraphKind, devices: usize, aggregators: usize, placement: &AggregatorPlacement) -> Result<DeviceGraph> {
    if devices == 0 {
        return Err(Error::Config("a graph needs at least one device".into()));
    }
    let side = lattice_side(devices);
    if kind.needs_lattice() && side * side != devices {
        return Err(Error::Config(format!("{kind} needs a perfect-square device count, got {devices}")));
    }
    if aggregators == 0 || aggregators > devices {
        return Err(Error::Config(format!("aggregator count {aggregators} outside 1..={devices}")));
    }
    let positions: Vec<(usize, usize)> = (0..devices).map(|i| (i / side, i % side)).collect();
    let mut adjacency = vec![false; devices * devices];
    let mut link = |a: usize, b: usize| {
        adjacency[a * devices + b] = true;
        adjacency[b * devices + a] = true;
    };
    for i in 0..devices {
        link(i, i);
    }
    match kind {
        GraphKind::Complete => {
            for i in 0..devices {
                for j in i + 1..devices {
                    link(i, j);
                }
            }
        }
        GraphKind::Ring => {
            for i in 0..devices {
                link(i, (i + 1) % devices);
            }
        }
        GraphKind::Grid | GraphKind::Torus => {
            let wrap = kind == GraphKind::Torus;
            for (i, &(r, c)) in positions.iter().enumerate() {
                if c + 1 < side {
                    link(i, i + 1);
                } else if wrap {
                    link(i, r * side);
                }
                if r + 1 < side {
                    link(i, i + side);
                } else if wrap {
                    link(i, c);
                }
            }
        }
        GraphKind::Rgg { radius } => {
            let r2 = radius * radius;
            for i in 0..devices {
                for j in i + 1..devices {
                    let (a, b) = (positions[i], positions[j]);
                    let dr = a.0.abs_diff(b.0);
                    let dc = a.1.abs_diff(b.1);
                    if ((dr * dr + dc * dc) as f64) <= r2 + 1e-9 {
                        link(i, j);
                    }
                }
            }
        }
    }
    let aggregators = match placement {
        AggregatorPlacement::Lowest => (0..aggregators).collect(),
        AggregatorPlacement::Uniform { seed } => {
            let mut rng = rng::stream(*seed, Stream::Init);
            let mut picked = sample(&mut rng, devices, aggregators).into_vec();
            picked.sort_unstable();
            picked
        }
        AggregatorPlacement::Explicit(list) => {
            let mut list = list.clone();
            list.sort_unstable();
            list.dedup();
            if list.len() != aggregators || list.iter().any(|&k| k >= devices) {
                return Err(Error::Config(format!(
                    "explicit aggregators {list:?} do not name {aggregators} distinct devices below {devices}"
                )));
            }
            list
        }
    };
    Ok(DeviceGraph { kind, devices, positions, adjacency, aggregators })
}

impl DeviceGraph {
    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn device_count(&self) -> usize {
        self.devices
    }

    pub fn aggregators(&self) -> &[usize] {
        &self.aggregators
    }

    pub fn is_aggregator(&self, d: usize) -> bool {
        self.aggregators.binary_search(&d).is_ok()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// True for device pairs joined by an edge, and for `a == b`.
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.devices + b]
    }

    pub fn neighbors(&self, d: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.devices).filter(move |&o| o != d && self.has_edge(d, o))
    }

    /// Degree counting the self-loop.
    pub fn degree(&self, d: usize) -> usize {
        self.adjacency[d * self.devices..(d + 1) * self.devices].iter().filter(|&&e| e).count()
    }

    /// Undirected device–device edges, excluding self-loops.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.devices {
            for b in a + 1..self.devices {
                if self.has_edge(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Writes `# C=.. K=.. kind=..` then one `u v` line per edge, with the
    /// entity as node 0 and device `d` as node `d + 1`.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        let aggs: Vec<String> = self.aggregators.iter().map(|k| k.to_string()).collect();
        writeln!(
            w,
            "# C={} K={} kind={} aggregators={}",
            self.devices,
            self.aggregators.len(),
            self.kind,
            aggs.join(",")
        )?;
        for (a, b) in self.undirected_edges() {
            writeln!(w, "{} {}", a + 1, b + 1)?;
        }
        for &k in &self.aggregators {
            writeln!(w, "0 {}", k + 1)?;
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(r: R) -> Result<DeviceGraph> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty edge list".into()))??;
        let mut devices = None;
        let mut kind = None;
        let mut aggregators = Vec::new();
        for field in header.trim_start_matches('#').split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header field {field:?}")))?;
            match key {
                "C" => devices = Some(parse_num(value)?),
                "K" => {}
                "kind" => kind = Some(value.parse::<GraphKind>()?),
                "aggregators" => {
                    aggregators = value.split(',').filter(|s| !s.is_empty()).map(parse_num).collect::<Result<_>>()?
                }
                other => return Err(Error::Parse(format!("unknown header key {other:?}"))),
            }
        }
        let devices = devices.ok_or_else(|| Error::Parse("header lacks C".into()))?;
        let kind = kind.ok_or_else(|| Error::Parse("header lacks kind".into()))?;
        let side = lattice_side(devices);
        let mut adjacency = vec![false; devices * devices];
        for d in 0..devices {
            adjacency[d * devices + d] = true;
        }
        let mut entity = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (u, v) = match (it.next(), it.next(), it.next()) {
                (Some(u), Some(v), None) => (parse_num(u)?, parse_num(v)?),
                _ => return Err(Error::Parse(format!("line {}: expected `u v`, got {line:?}", n + 2))),
            };
            if u > devices || v > devices {
                return Err(Error::Parse(format!("line {}: node out of range", n + 2)));
            }
            match (u, v) {
                (0, 0) => return Err(Error::Parse(format!("line {}: entity self-loop", n + 2))),
                (0, d) | (d, 0) => entity.push(d - 1),
                (a, b) => {
                    adjacency[(a - 1) * devices + (b - 1)] = true;
                    adjacency[(b - 1) * devices + (a - 1)] = true;
                }
            }
        }
        entity.sort_unstable();
        if !aggregators.is_empty() && aggregators != entity {
            return Err(Error::Parse("entity edges disagree with header aggregators".into()));
        }
        Ok(DeviceGraph {
            kind,
            devices,
            positions: (0..devices).map(|i| (i / side, i % side)).collect(),
            adjacency,
            aggregators: entity,
        })
    }
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse(format!("not a non-negative integer: {s:?}")))
}

/// Row-stochastic `V = D⁻¹A` over devices, self-loops included.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    pub v: Matrix,
    pub degree: Vec<f64>,
}

pub fn consensus_matrix(g: &DeviceGraph) -> ConsensusMatrix {
    let all: Vec<usize> = (0..g.device_count()).collect();
    induced_consensus_matrix(g, &all)
}

/// Consensus matrix of the subgraph induced by `subset` (rows in subset order).
pub fn induced_consensus_matrix(g: &DeviceGraph, subset: &[usize]) -> ConsensusMatrix {
    let n = subset.len();
    let mut v = Matrix::zeros(n, n);
    let mut degree = vec![0.0; n];
    for (i, &a) in subset.iter().enumerate() {
        let row: Vec<usize> = (0..n).filter(|&j| g.has_edge(a, subset[j])).collect();
        degree[i] = row.len() as f64;
        for j in row {
            v.set(i, j, 1.0 / degree[i]);
        }
    }
    ConsensusMatrix { v, degree }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-10, seed: 0x5eed }
    }
}

pub fn spectral_radius(v: &ConsensusMatrix) -> Result<f64> {
    spectral_radius_with(v, PowerIteration::default())
}

/// Largest |eigenvalue| of `M = V − 11ᵀ/C` by power iteration.
///
/// Iterates on `M²` (two products per step) so that eigenvalue pairs `±λ`,
/// common on bipartite-like graphs, do not make the estimate oscillate.
pub fn spectral_radius_with(v: &ConsensusMatrix, opts: PowerIteration) -> Result<f64> {
    let n = v.v.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let shift = 1.0 / n as f64;
    let apply = |x: &[f64]| -> Vec<f64> {
        let mean_x: f64 = x.iter().sum::<f64>() * shift;
        (0..n)
            .map(|i| v.v.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - mean_x)
            .collect()
    };
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();

    let mut rng = rng::stream(opts.seed, Stream::Certificate);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|a| *a /= nx);

    let mut estimate = f64::NAN;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let z = apply(&apply(&x));
        let nz = norm(&z);
        if nz < 1e-300 {
            return Ok(0.0);
        }
        let next = nz.sqrt();
        gap = (next - estimate).abs();
        estimate = next;
        x = z.into_iter().map(|a| a / nz).collect();
        if gap < opts.tolerance {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations, gap })
}

/// Breadth-first reachability inside the subgraph induced by `subset`.
pub fn is_connected(g: &DeviceGraph, subset: &[usize]) -> bool {
    let Some(&start) = subset.first() else {
        return true;
    };
    let mut inside = vec![false; g.device_count()];
    subset.iter().for_each(|&d| inside[d] = true);
    let mut seen = vec![false; g.device_count()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut reached = 1;
    while let Some(d) = queue.pop_front() {
        for o in g.neighbors(d) {
            if inside[o] && !seen[o] {
                seen[o] = true;
                reached += 1;
                queue.push_back(o);
            }
        }
    }
    let distinct = inside.iter().filter(|&&b| b).count();
    reached == distinct
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(kind: GraphKind, c: usize) -> DeviceGraph {
        build_graph(kind, c, 1, &AggregatorPlacement::Lowest).unwrap()
    }

    #[test]
    fn edge_counts() {
        let g = graph(GraphKind::Grid, 16);
        assert_eq!(g.undirected_edges().len(), 24);
        assert!((0..16).all(|d| g.has_edge(d, d)));
        let g = graph(GraphKind::Complete, 4);
        assert_eq!(g.undirected_edges().len(), 6);
        let g = graph(GraphKind::Ring, 16);
        assert_eq!(g.undirected_edges().len(), 16);
        assert!(g.has_edge(15, 0));
        let g = graph(GraphKind::Torus, 16);
        assert_eq!(g.undirected_edges().len(), 32);
        assert!((0..16).all(|d| g.degree(d) == 5));
    }

    #[test]
    fn rgg_radius_one_is_the_grid() {
        for c in [4, 16, 49] {
            let grid = graph(GraphKind::Grid, c);
            let rgg = graph(GraphKind::Rgg { radius: 1.0 }, c);
            assert_eq!(grid.undirected_edges(), rgg.undirected_edges());
        }
    }

    #[test]
    fn rgg_sparsity_ladder_is_monotone() {
        let counts: Vec<usize> = [1.0, 1.5, 2.0, 2.5]
            .iter()
            .map(|&r| graph(GraphKind::Rgg { radius: r }, 16).undirected_edges().len())
            .collect();
        // r=1.5 adds the 18 diagonals, r=2 the 16 distance-2 pairs, r=2.5 the 24 knight moves
        assert_eq!(counts, vec![24, 42, 58, 82]);
    }

    #[test]
    fn rejects_bad_configs() {
        let p = AggregatorPlacement::Lowest;
        assert!(build_graph(GraphKind::Grid, 15, 1, &p).is_err());
        assert!(build_graph(GraphKind::Complete, 4, 0, &p).is_err());
        assert!(build_graph(GraphKind::Complete, 4, 5, &p).is_err());
        assert!(build_graph(GraphKind::Complete, 4, 2, &AggregatorPlacement::Explicit(vec![1, 1])).is_err());
    }

    #[test]
    fn aggregator_placement() {
        let g = build_graph(GraphKind::Complete, 16, 4, &AggregatorPlacement::Lowest).unwrap();
        assert_eq!(g.aggregators(), &[0, 1, 2, 3]);
        let a = build_graph(GraphKind::Complete, 16, 4, &AggregatorPlacement::Uniform { seed: 3 }).unwrap();
        let b = build_graph(GraphKind::Complete, 16, 4, &AggregatorPlacement::Uniform { seed: 3 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aggregators().len(), 4);
        let g = build_graph(GraphKind::Ring, 16, 1, &AggregatorPlacement::Explicit(vec![7])).unwrap();
        assert_eq!(g.aggregators(), &[7]);
    }

    #[test]
    fn consensus_rows() {
        let v = consensus_matrix(&graph(GraphKind::Complete, 16)).v;
        assert!(v.data().iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-15));

        let v = consensus_matrix(&graph(GraphKind::Ring, 4)).v;
        assert_eq!(v.row(0), &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);

        let v = consensus_matrix(&graph(GraphKind::Grid, 16)).v;
        assert_eq!(v.row(0).iter().filter(|&&x| x == 1.0 / 3.0).count(), 3);
        assert_eq!(v.row(5).iter().filter(|&&x| x == 0.2).count(), 5);

        for kind in [GraphKind::Complete, GraphKind::Ring, GraphKind::Grid, GraphKind::Rgg { radius: 1.5 }] {
            for c in [4, 16, 49] {
                let v = consensus_matrix(&graph(kind, c)).v;
                for r in v.row_iter() {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(r.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn spectral_radius_examples() {
        let lam = spectral_radius(&consensus_matrix(&graph(GraphKind::Complete, 16))).unwrap();
        assert!(lam.abs() < 1e-12);
        let lam = spectral_radius(&consensus_matrix(&graph(GraphKind::Ring, 4))).unwrap();
        assert!((lam - 1.0 / 3.0).abs() < 1e-9);
        let lam = spectral_radius(&consensus_matrix(&graph(GraphKind::Ring, 16))).unwrap();
        let analytic = (1.0 + 2.0 * (std::f64::consts::PI / 8.0).cos()) / 3.0;
        assert!((lam - analytic).abs() < 1e-8, "{lam} vs {analytic}");
    }

    #[test]
    fn connected_graphs_contract_disconnected_do_not() {
        for kind in [GraphKind::Complete, GraphKind::Ring, GraphKind::Grid, GraphKind::Torus] {
            let lam = spectral_radius(&consensus_matrix(&graph(kind, 16))).unwrap();
            assert!(lam < 1.0);
        }
        let g = graph(GraphKind::Ring, 16);
        let subset: Vec<usize> = (0..16).filter(|&d| d != 0 && d != 8).collect();
        assert!(!is_connected(&g, &subset));
        let lam = spectral_radius(&induced_consensus_matrix(&g, &subset)).unwrap();
        assert!((lam - 1.0).abs() < 1e-8, "{lam}");
    }

    #[test]
    fn connectivity_examples() {
        let g = graph(GraphKind::Complete, 16);
        assert!(is_connected(&g, &[3, 9, 12]));
        assert!(is_connected(&g, &[5]));
        let ring = graph(GraphKind::Ring, 16);
        assert!(is_connected(&ring, &(0..16).collect::<Vec<_>>()));
        assert!(!is_connected(&ring, &[0, 2]));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_graph(GraphKind::Rgg { radius: 1.5 }, 16, 4, &AggregatorPlacement::Uniform { seed: 9 }).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# C=16 K=4 kind=rgg(1.5)"));
        let back = DeviceGraph::read_edge_list(buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert!(DeviceGraph::read_edge_list("# C=4 kind=ring\n1 2 3\n".as_bytes()).is_err());
    }

    #[test]
    fn graph_kind_parsing() {
        assert_eq!("rgg(2.5)".parse::<GraphKind>().unwrap(), GraphKind::Rgg { radius: 2.5 });
        assert_eq!("torus".parse::<GraphKind>().unwrap(), GraphKind::Torus);
        assert!("star".parse::<GraphKind>().is_err());
    }
}
