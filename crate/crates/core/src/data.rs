//! Image datasets: IDX loading, spatial patch partitioning, splits and a
//! synthetic patch-classifiable dataset.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, Stream};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Flattened images with values in `[0, 1]` and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize, height: usize, width: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!("{} images but {} labels", features.rows(), labels.len())));
        }
        if features.cols() != height * width {
            return Err(Error::Input(format!("{} features for a {height}x{width} image", features.cols())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Input(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self { features, labels, class_count, height, width })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            height: self.height,
            width: self.width,
        }
    }

    /// Rows `range.start..range.end`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        self.subset(&range.collect::<Vec<_>>())
    }

    /// Writes the dataset as an IDX image/label file pair (pixels × 255,
    /// rounded).
    pub fn write_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        if self.class_count > 256 {
            return Err(Error::Input("IDX labels are single bytes".into()));
        }
        let mut img = Vec::with_capacity(16 + self.features.data().len());
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for d in [self.len(), self.height, self.width] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend(self.features.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lab.extend(self.labels.iter().map(|&y| y as u8));
        fs::File::create(images)?.write_all(&img)?;
        fs::File::create(labels)?.write_all(&lab)?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Parse(format!("{}: truncated header at byte {}", self.what, self.pos)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn rest(&self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Parse(format!("{}: truncated body, need {len} bytes, have {available}", self.what)));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

/// Parses an IDX image/label pair from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = Cursor { bytes: images, pos: 0, what: "image file" };
    let magic = img.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse(format!("image file: bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (img.u32()? as usize, img.u32()? as usize, img.u32()? as usize);
    let pixels = img.rest(n * rows * cols)?;

    let mut lab = Cursor { bytes: labels, pos: 0, what: "label file" };
    let magic = lab.u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse(format!("label file: bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = lab.u32()? as usize;
    if count != n {
        return Err(Error::Parse(format!("count mismatch: {n} images, {count} labels")));
    }
    let labels: Vec<usize> = lab.rest(n)?.iter().map(|&b| b as usize).collect();

    let features = Matrix::from_vec(n, rows * cols, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(features, labels, class_count, rows, cols)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", images_path.display())))?;
    let labels = fs::read(labels_path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", labels_path.display())))?;
    parse_idx(&images, &labels)
}

/// Disjoint per-client feature index sets, one square block per client,
/// clients numbered row-major over the `g × g` block grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub grid_side: usize,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn new(height: usize, width: usize, grid_side: usize) -> Result<Self> {
        if grid_side == 0 || !height.is_multiple_of(grid_side) || !width.is_multiple_of(grid_side) {
            return Err(Error::Config(format!(
                "a {height}x{width} image cannot be split into a {grid_side}x{grid_side} block grid"
            )));
        }
        let (bh, bw) = (height / grid_side, width / grid_side);
        let clients = (0..grid_side * grid_side)
            .map(|c| {
                let (br, bc) = (c / grid_side, c % grid_side);
                (0..bh)
                    .flat_map(|r| (0..bw).map(move |col| (br * bh + r) * width + bc * bw + col))
                    .collect()
            })
            .collect();
        Ok(Self { grid_side, clients })
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.clients.first().map_or(0, Vec::len)
    }

    /// Per-client views of a feature matrix.
    pub fn views(&self, features: &Matrix) -> Vec<Matrix> {
        self.clients.iter().map(|idx| features.select_cols(idx)).collect()
    }

    /// Inverse of [`PartitionSpec::views`].
    pub fn reassemble(&self, views: &[Matrix]) -> Result<Matrix> {
        let rows = views.first().map_or(0, Matrix::rows);
        let d: usize = self.clients.iter().map(Vec::len).sum();
        let mut out = Matrix::zeros(rows, d);
        for (view, idx) in views.iter().zip(&self.clients) {
            if view.shape() != (rows, idx.len()) {
                return Err(Error::Shape(format!("view {:?} does not match partition", view.shape())));
            }
            for r in 0..rows {
                for (j, &col) in idx.iter().enumerate() {
                    out.set(r, col, view.get(r, j));
                }
            }
        }
        Ok(out)
    }
}

pub fn split_patches(ds: &Dataset, grid_side: usize) -> Result<(PartitionSpec, Vec<Matrix>)> {
    let spec = PartitionSpec::new(ds.height, ds.width, grid_side)?;
    let views = spec.views(&ds.features);
    Ok((spec, views))
}

/// A dataset already split into per-client feature views.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub views: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ClientData {
    pub fn new(ds: &Dataset, grid_side: usize) -> Result<Self> {
        let (_, views) = split_patches(ds, grid_side)?;
        Ok(Self { views, labels: ds.labels.clone(), class_count: ds.class_count })
    }

    pub fn from_views(views: Vec<Matrix>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if let Some(v) = views.iter().find(|v| v.rows() != labels.len()) {
            return Err(Error::Shape(format!("view with {} rows for {} labels", v.rows(), labels.len())));
        }
        Ok(Self { views, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn client_count(&self) -> usize {
        self.views.len()
    }

    /// Per-client rows and labels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Vec<Matrix>, Vec<usize>) {
        let views = self.views.iter().map(|v| v.select_rows(idx)).collect();
        (views, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn chunk(&self, range: std::ops::Range<usize>) -> (Vec<Matrix>, Vec<usize>) {
        self.batch(&range.collect::<Vec<_>>())
    }
}

/// Seeded split into (train, validation).
///
/// The permutation is `SliceRandom::shuffle` (Fisher–Yates) over `0..n`
/// driven by the ChaCha8 `DataShuffle` stream of `seed`. The first
/// `⌊4n/5⌋` permuted indices train (48 000 of 60 000 for the canonical
/// files), the rest validate.
pub fn make_splits(ds: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::DataShuffle));
    let cut = ds.len() * 4 / 5;
    (ds.subset(&idx[..cut]), ds.subset(&idx[cut..]))
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub grid_side: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Mean deviation of a class image from mid-gray.
    pub signal: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n: 10_000, classes: 10, grid_side: 4, seed: 1, noise: 0.3, signal: 0.08 }
    }
}

pub const SYNTH_SIDE: usize = 28;

/// Class mean images: mid-gray plus a ±amplitude sign pattern drawn per
/// (class, pixel); the amplitude varies per patch between 0.5× and 1.5×
/// `signal`, so some patches are more informative than others.
pub fn synth_class_means(spec: &SynthSpec) -> Result<Matrix> {
    let partition = PartitionSpec::new(SYNTH_SIDE, SYNTH_SIDE, spec.grid_side)?;
    let mut rng = rng::salted(spec.seed, Stream::Synthetic, &[0]);
    let amplitude: Vec<f64> = (0..partition.client_count())
        .map(|_| spec.signal * (0.5 + rng.random::<f64>()))
        .collect();
    let mut means = Matrix::zeros(spec.classes, SYNTH_SIDE * SYNTH_SIDE);
    for c in 0..spec.classes {
        for (p, idx) in partition.clients.iter().enumerate() {
            for &pixel in idx {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                means.set(c, pixel, 0.5 + sign * amplitude[p]);
            }
        }
    }
    Ok(means)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if spec.noise.is_nan() || spec.noise < 0.0 {
        return Err(Error::Config(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let means = synth_class_means(spec)?;
    let mut rng = rng::salted(spec.seed, Stream::Synthetic, &[1]);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let d = SYNTH_SIDE * SYNTH_SIDE;
    let mut features = Matrix::zeros(spec.n, d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = rng.random_range(0..spec.classes);
        labels.push(y);
        let row = features.row_mut(i);
        for (v, &m) in row.iter_mut().zip(means.row(y)) {
            let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            *v = (m + noise).clamp(0.0, 1.0);
        }
    }
    Dataset::new(features, labels, spec.classes, SYNTH_SIDE, SYNTH_SIDE)
}
