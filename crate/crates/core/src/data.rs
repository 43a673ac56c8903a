//! Datasets: IDX ingestion, preprocessing, and a synthetic multi-scale task.
//!
//! IDX layout (big-endian): two zero bytes, a dtype byte (`0x08` for
//! unsigned bytes), a dimension-count byte, one `u32` extent per dimension,
//! then the raw row-major data. Image files are `N × H × W` (magic
//! `0x00000803`) and label files are `N` (magic `0x00000801`).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian as BE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::rng_for;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic {magic:#010x}")]
    BadMagic { path: String, magic: u32 },
    #[error("{path}: unsupported IDX dtype {dtype:#04x} (only unsigned bytes)")]
    Dtype { path: String, dtype: u8 },
    #[error("{path}: file is truncated")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic task: {0}")]
    Synth(String),
    #[error("preprocessing: {0}")]
    Preprocess(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub target: [usize; 2],
    pub mean: Vec<f64>,
}

/// Labeled images with split assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
    pub preprocessing: Option<PreprocessRecord>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize, splits: Vec<Split>) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch { images: images.len(), labels: labels.len() });
        }
        if splits.len() != images.len() {
            return Err(DataError::Invalid(format!("{} split tags for {} images", splits.len(), images.len())));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|im| im.shape() != first.shape()) {
                return Err(DataError::Invalid(format!("image {i} has shape {}, expected {}", images[i].shape(), first.shape())));
            }
            if first.shape().rank() != 3 {
                return Err(DataError::Invalid(format!("images must be H×W×C, got {}", first.shape())));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes, splits, preprocessing: None })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&Shape> {
        self.images.first().map(Tensor::shape)
    }

    /// Example indices of a split, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in self.indices(split) {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Per-channel mean over a split.
    pub fn channel_means(&self, split: Split) -> Vec<f64> {
        let idx = self.indices(split);
        let Some(shape) = self.image_shape() else { return Vec::new() };
        let c = shape.dims()[2];
        let mut sums = vec![0.0; c];
        let mut count = 0usize;
        for i in idx {
            for px in self.images[i].data().chunks_exact(c) {
                for (s, v) in sums.iter_mut().zip(px) {
                    *s += v;
                }
                count += 1;
            }
        }
        sums.into_iter().map(|s| if count > 0 { s / count as f64 } else { 0.0 }).collect()
    }

    /// Applies [`preprocess`] to every image and records the settings.
    pub fn preprocess_all(&self, target: [usize; 2], mean: &[f64]) -> Result<Dataset, DataError> {
        let images = self.images.iter().map(|im| preprocess(im, target, mean)).collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            splits: self.splits.clone(),
            preprocessing: Some(PreprocessRecord { target, mean: mean.to_vec() }),
        })
    }

    /// Reassigns splits per class: after a seeded shuffle of each class's
    /// examples, the first `fractions[0]` go to train, the next
    /// `fractions[1]` to validation, and the rest to test.
    pub fn stratified_splits(mut self, fractions: [f64; 2], seed: u64) -> Dataset {
        let mut rng = rng_for(seed, 0x5B1D);
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let n_train = (n * fractions[0]).round() as usize;
            let n_val = (n * fractions[1]).round() as usize;
            for (rank, &i) in members.iter().enumerate() {
                self.splits[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        self
    }
}

/// Raw IDX contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_UBYTE: u8 = 0x08;

fn io_err(path: &str) -> impl Fn(io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::UnexpectedEof {
            DataError::Truncated { path: path.to_string() }
        } else {
            DataError::Io { path: path.to_string(), source }
        }
    }
}

/// Parses an IDX stream of unsigned bytes. `name` labels errors.
pub fn read_idx<R: Read>(r: &mut R, name: &str) -> Result<IdxArray, DataError> {
    let wrap = io_err(name);
    let magic = r.read_u32::<BE>().map_err(&wrap)?;
    if magic >> 16 != 0 {
        return Err(DataError::BadMagic { path: name.to_string(), magic });
    }
    let dtype = ((magic >> 8) & 0xff) as u8;
    if dtype != IDX_UBYTE {
        return Err(DataError::Dtype { path: name.to_string(), dtype });
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(DataError::BadMagic { path: name.to_string(), magic });
    }
    let dims = (0..ndim).map(|_| r.read_u32::<BE>().map(|d| d as usize)).collect::<io::Result<Vec<_>>>().map_err(&wrap)?;
    let len: usize = dims.iter().product();
    let mut data = vec![0u8; len];
    r.read_exact(&mut data).map_err(&wrap)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(&wrap)? != 0 {
        return Err(DataError::Invalid(format!("{name}: trailing bytes after IDX data")));
    }
    Ok(IdxArray { dims, data })
}

pub fn write_idx<W: Write>(w: &mut W, array: &IdxArray) -> io::Result<()> {
    let ndim = u8::try_from(array.dims.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "too many dimensions"))?;
    w.write_u32::<BE>(((IDX_UBYTE as u32) << 8) | ndim as u32)?;
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "extent exceeds u32"))?;
        w.write_u32::<BE>(d)?;
    }
    w.write_all(&array.data)
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray, DataError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io { path: name.clone(), source })?;
    read_idx(&mut BufReader::new(file), &name)
}

pub fn write_idx_file(path: &Path, array: &IdxArray) -> Result<(), DataError> {
    let name = path.display().to_string();
    let wrap = |source| DataError::Io { path: name.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    write_idx(&mut w, array).map_err(wrap)?;
    w.flush().map_err(|source| DataError::Io { path: name.clone(), source })
}

fn idx_magic(a: &IdxArray) -> u32 {
    ((IDX_UBYTE as u32) << 8) | a.dims.len() as u32
}

/// Converts parsed IDX image and label arrays into `H × W × 1` tensors with
/// pixels scaled to `[0, 1]`. Every example is tagged as training data.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, name: &str) -> Result<Dataset, DataError> {
    if idx_magic(images) != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: format!("{name} images"), magic: idx_magic(images) });
    }
    if idx_magic(labels) != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: format!("{name} labels"), magic: idx_magic(labels) });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if n != labels.dims[0] {
        return Err(DataError::CountMismatch { images: n, labels: labels.dims[0] });
    }
    let shape = Shape::new(vec![h, w, 1]).map_err(|e| DataError::Invalid(e.to_string()))?;
    let tensors = images
        .data
        .chunks_exact(h * w)
        .map(|px| Tensor::new(shape.clone(), px.iter().map(|&b| b as f64 / 255.0).collect()).expect("sized by shape"))
        .collect::<Vec<_>>();
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(tensors, labels, classes, vec![Split::Train; n])
}

/// Loads an image/label IDX pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let im = read_idx_file(images)?;
    let lb = read_idx_file(labels)?;
    dataset_from_idx(&im, &lb, &images.display().to_string())
}

fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}-images.idx", split.name())),
        dir.join(format!("{}-labels.idx", split.name())),
    )
}

/// Loads `{train,val,test}-{images,labels}.idx` from a directory. Training
/// files are required; validation and test files are optional.
pub fn load_idx_dir(dir: &Path) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let (ip, lp) = split_paths(dir, split);
        if split != Split::Train && !ip.exists() {
            continue;
        }
        let part = load_idx(&ip, &lp)?;
        splits.extend(std::iter::repeat_n(split, part.len()));
        images.extend(part.images);
        labels.extend(part.labels);
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(images, labels, classes, splits)
}

/// Quantizes single-channel images to bytes and writes one IDX pair per
/// non-empty split into `dir`. Returns the files written.
pub fn write_idx_dir(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let shape = dataset.image_shape().ok_or_else(|| DataError::Invalid("empty dataset".into()))?;
    let (h, w, c) = shape.as_hwc().expect("validated rank");
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX images hold one channel, dataset has {c}")));
    }
    if dataset.num_classes > 256 {
        return Err(DataError::Invalid("labels do not fit in a byte".into()));
    }
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.display().to_string(), source })?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let idx = dataset.indices(split);
        if idx.is_empty() {
            continue;
        }
        let mut pixels = Vec::with_capacity(idx.len() * h * w);
        for &i in &idx {
            pixels.extend(dataset.images[i].data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        let (ip, lp) = split_paths(dir, split);
        write_idx_file(&ip, &IdxArray { dims: vec![idx.len(), h, w], data: pixels })?;
        write_idx_file(&lp, &IdxArray { dims: vec![idx.len()], data: idx.iter().map(|&i| dataset.labels[i] as u8).collect() })?;
        written.push(ip);
        written.push(lp);
    }
    Ok(written)
}

/// Bilinear resampling with half-pixel centers; samples outside the image
/// clamp to the border.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, DataError> {
    let (h, w, c) = image
        .shape()
        .as_hwc()
        .ok_or_else(|| DataError::Preprocess(format!("expected H×W×C image, got {}", image.shape())))?;
    if out_h == 0 || out_w == 0 {
        return Err(DataError::Preprocess("target extents must be positive".into()));
    }
    let src = image.data();
    let coord = |dst: usize, in_len: usize, out_len: usize| {
        let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        let s = s.clamp(0.0, (in_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(vec![out_h, out_w, c], out).map_err(|e| DataError::Preprocess(e.to_string()))
}

/// Scales so the image covers `target` (short side matching), center-crops
/// to `target`, and subtracts the per-channel mean.
pub fn preprocess(image: &Tensor, target: [usize; 2], mean: &[f64]) -> Result<Tensor, DataError> {
    let (h, w, c) = image
        .shape()
        .as_hwc()
        .ok_or_else(|| DataError::Preprocess(format!("expected H×W×C image, got {}", image.shape())))?;
    let [th, tw] = target;
    if th == 0 || tw == 0 {
        return Err(DataError::Preprocess("degenerate target size".into()));
    }
    if mean.len() != c {
        return Err(DataError::Preprocess(format!("{} mean values for {c} channels", mean.len())));
    }
    let scale = (th as f64 / h as f64).max(tw as f64 / w as f64);
    let sh = ((h as f64 * scale).round() as usize).max(th);
    let sw = ((w as f64 * scale).round() as usize).max(tw);
    let scaled = if (sh, sw) == (h, w) { image.clone() } else { resize_bilinear(image, sh, sw)? };
    let (y0, x0) = ((sh - th) / 2, (sw - tw) / 2);
    let mut out = Vec::with_capacity(th * tw * c);
    let data = scaled.data();
    for y in 0..th {
        for x in 0..tw {
            let px = &data[((y0 + y) * sw + x0 + x) * c..][..c];
            out.extend(px.iter().zip(mean).map(|(v, m)| v - m));
        }
    }
    let t = Tensor::from_vec(vec![th, tw, c], out).map_err(|e| DataError::Preprocess(e.to_string()))?;
    if !t.is_finite() {
        return Err(DataError::Preprocess("non-finite pixel".into()));
    }
    Ok(t)
}

/// Synthetic classes whose coarse factor lives only in the global
/// arrangement of a few large blobs and whose fine factor lives only in the
/// small-period texture filling them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskConfig {
    pub size: usize,
    pub coarse_classes: usize,
    pub fine_classes: usize,
    pub noise: f64,
    /// Maximum shift, in pixels, applied to the whole layout.
    pub jitter: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            size: 32,
            coarse_classes: 4,
            fine_classes: 4,
            noise: 0.1,
            jitter: 8,
            train_per_class: 24,
            val_per_class: 16,
            test_per_class: 16,
            seed: 0,
        }
    }
}

/// Blob centers in units of 3/16 of the image size, as (dx, dy).
const LAYOUTS: &[&[(i32, i32)]] = &[
    &[(-1, 0), (1, 0)],
    &[(0, -1), (0, 1)],
    &[(-1, -1), (1, 1)],
    &[(-1, 1), (1, -1)],
    &[(0, -1), (-1, 1), (1, 1)],
    &[(0, 1), (-1, -1), (1, -1)],
];

pub const MAX_COARSE_CLASSES: usize = LAYOUTS.len();
pub const MAX_FINE_CLASSES: usize = 8;
const MIN_SYNTH_SIZE: usize = 8;

/// Binary texture with a 50% duty cycle; `phase` shifts the pattern.
fn texture(kind: usize, x: usize, y: usize, phase: usize) -> f64 {
    let (xp, yp) = (x + phase, y + phase);
    let on = match kind {
        0 => yp % 2,
        1 => xp % 2,
        2 => (x + y + phase) % 2,
        3 => (yp / 2) % 2,
        4 => (xp / 2) % 2,
        5 => (xp / 2 + yp / 2) % 2,
        6 => ((x + y + phase) / 2) % 2,
        _ => ((x + 64 - y % 64 + phase) / 2) % 2,
    };
    on as f64
}

impl SynthTaskConfig {
    pub fn num_classes(&self) -> usize {
        self.coarse_classes * self.fine_classes
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.size < MIN_SYNTH_SIZE {
            return Err(DataError::Synth(format!(
                "size {} cannot render the smallest texture period (need at least {MIN_SYNTH_SIZE} px)",
                self.size
            )));
        }
        if self.coarse_classes == 0 || self.coarse_classes > MAX_COARSE_CLASSES {
            return Err(DataError::Synth(format!("coarse classes must be in 1..={MAX_COARSE_CLASSES}")));
        }
        if self.fine_classes == 0 || self.fine_classes > MAX_FINE_CLASSES {
            return Err(DataError::Synth(format!("fine classes must be in 1..={MAX_FINE_CLASSES}")));
        }
        if self.num_classes() < 2 {
            return Err(DataError::Synth("need at least two classes".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DataError::Synth("noise must be a finite non-negative number".into()));
        }
        if self.train_per_class == 0 {
            return Err(DataError::Synth("need at least one training example per class".into()));
        }
        Ok(())
    }

    fn render(&self, coarse: usize, fine: usize, stream: u64) -> Tensor {
        let mut rng = rng_for(self.seed, stream);
        let s = self.size as i32;
        let spacing = (s * 3 / 16).max(2);
        let radius = (s / 8).max(2) as f64;
        let j = self.jitter as i32;
        let (sx, sy) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        let phase = rng.random_range(0..4usize);
        let centers: Vec<(f64, f64)> = LAYOUTS[coarse]
            .iter()
            .map(|&(dx, dy)| {
                (
                    (s / 2 + dx * spacing + sx) as f64 - 0.5 + rng.random_range(-0.5..0.5),
                    (s / 2 + dy * spacing + sy) as f64 - 0.5 + rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let n = self.size;
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let inside = centers.iter().any(|&(cx, cy)| {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    dx * dx + dy * dy <= radius * radius
                });
                let base = if inside { 0.25 + 0.75 * texture(fine, x, y, phase) } else { 0.0 };
                let eps = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(base + eps);
            }
        }
        Tensor::from_vec(vec![n, n, 1], data).expect("sized by shape")
    }
}

/// Generates the synthetic task: exactly `*_per_class` examples of every
/// class in each split, label `coarse · fine_classes + fine`.
pub fn synth_multiscale(config: &SynthTaskConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let counts = [
        (Split::Train, config.train_per_class),
        (Split::Val, config.val_per_class),
        (Split::Test, config.test_per_class),
    ];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut stream = 0u64;
    for (split, per_class) in counts {
        for _ in 0..per_class {
            for coarse in 0..config.coarse_classes {
                for fine in 0..config.fine_classes {
                    images.push(config.render(coarse, fine, stream));
                    labels.push(coarse * config.fine_classes + fine);
                    splits.push(split);
                    stream += 1;
                }
            }
        }
    }
    Dataset::new(images, labels, config.num_classes(), splits)
}
