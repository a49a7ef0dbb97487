//! MNIST ingestion, fixed-angle rotation, and construction of the two input
//! modes plus the 50/50 foundation mixture.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Real, Rng};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const ROTATED_DEGREES: Real = 45.0;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Deg0,
    Deg45,
}

impl Mode {
    pub fn degrees(self) -> Real {
        match self {
            Mode::Deg0 => 0.0,
            Mode::Deg45 => ROTATED_DEGREES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// A 28×28 grayscale digit. Pixels are shared so mode views of the same
/// image do not copy the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Arc<[Real]>,
    pub label: u8,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` items (or all, if fewer); order preserved.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images.iter().take(n).cloned().collect(),
            split: self.split,
        }
    }

    /// The whole dataset (or its first `limit` items) as one batch.
    pub fn head_batch(&self, limit: usize) -> Batch {
        let idx: Vec<usize> = (0..self.len().min(limit)).collect();
        make_batch(self, &idx)
    }
}

/// Raw IDX3 payload: images as `[0,1]` pixel buffers with the header's dims.
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Arc<[Real]>>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

fn check_payload(path: &Path, header: usize, expected: usize, actual: usize) -> Result<()> {
    let have = actual.saturating_sub(header);
    if have != expected {
        return Err(format_err(
            path,
            format!("header declares {expected} payload bytes, file holds {have}"),
        ));
    }
    Ok(())
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let per = rows * cols;
    check_payload(path, 16, count * per, bytes.len())?;
    let images = bytes[16..]
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| px.iter().map(|&b| Real::from(b) / 255.0).collect())
        .collect();
    Ok(IdxImages { rows, cols, images })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    check_payload(path, 8, count, bytes.len())?;
    let labels = bytes[8..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(path, format!("label byte {bad} outside 0..=9")));
    }
    Ok(labels)
}

/// Canonical file stems for a split, e.g. `train-images-idx3-ubyte`.
pub fn expected_files(split: Split) -> [String; 2] {
    let p = split.prefix();
    [
        format!("{p}-images-idx3-ubyte"),
        format!("{p}-labels-idx1-ubyte"),
    ]
}

/// Accepts the dashed canonical name or the dotted variant, raw or `.gz`.
fn locate(dir: &Path, stem: &str) -> Option<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    [stem.to_string(), dotted]
        .iter()
        .flat_map(|s| [s.clone(), format!("{s}.gz")])
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let [img_stem, lbl_stem] = expected_files(split);
    let (img, lbl) = match (locate(dir, &img_stem), locate(dir, &lbl_stem)) {
        (Some(i), Some(l)) => (i, l),
        (i, l) => {
            let mut missing = Vec::new();
            if i.is_none() {
                missing.push(dir.join(&img_stem));
            }
            if l.is_none() {
                missing.push(dir.join(&lbl_stem));
            }
            return Err(Error::MissingData(missing));
        }
    };
    let images = load_idx_images(&img)?;
    if images.rows != SIDE || images.cols != SIDE {
        return Err(format_err(
            &img,
            format!("expected 28x28 images, header says {}x{}", images.rows, images.cols),
        ));
    }
    let labels = load_idx_labels(&lbl)?;
    if labels.len() != images.images.len() {
        return Err(format_err(
            &lbl,
            format!("{} labels for {} images", labels.len(), images.images.len()),
        ));
    }
    Ok(Dataset {
        images: images
            .images
            .into_iter()
            .zip(labels)
            .map(|(pixels, label)| LabeledImage {
                pixels,
                label,
                mode: Mode::Deg0,
            })
            .collect(),
        split,
    })
}

/// Snaps cos/sin to exact values at multiples of 90° so quarter turns are
/// pure pixel permutations.
fn rotation_coeffs(degrees: Real) -> (Real, Real) {
    let quarter = degrees / 90.0;
    if quarter == quarter.round() {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates a 28×28 image counterclockwise (as displayed, rows pointing down)
/// about its center `(13.5, 13.5)` with bilinear sampling; out-of-frame
/// samples read as black.
pub fn rotate_image(img: &[Real], degrees: Real) -> Vec<Real> {
    assert_eq!(img.len(), PIXELS, "rotate_image expects a 28x28 buffer");
    let (c, s) = rotation_coeffs(degrees);
    let center = (SIDE as Real - 1.0) / 2.0;
    let fetch = |y: isize, x: isize| -> Real {
        if y < 0 || x < 0 || y >= SIDE as isize || x >= SIDE as isize {
            0.0
        } else {
            img[y as usize * SIDE + x as usize]
        }
    };
    let mut out = vec![0.0; PIXELS];
    for oy in 0..SIDE {
        for ox in 0..SIDE {
            let dx = ox as Real - center;
            let dy = oy as Real - center;
            // Inverse map: output pixel -> source location.
            let sx = center + c * dx - s * dy;
            let sy = center + s * dx + c * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let mut v = 0.0;
            for (wy, yy) in [(1.0 - fy, yi), (fy, yi + 1)] {
                for (wx, xx) in [(1.0 - fx, xi), (fx, xi + 1)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        v += w * fetch(yy, xx);
                    }
                }
            }
            out[oy * SIDE + ox] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn with_mode(img: &LabeledImage, mode: Mode) -> LabeledImage {
    let pixels = match mode {
        Mode::Deg0 => img.pixels.clone(),
        Mode::Deg45 => rotate_image(&img.pixels, mode.degrees()).into(),
    };
    LabeledImage {
        pixels,
        label: img.label,
        mode,
    }
}

pub fn make_mode_dataset(base: &Dataset, mode: Mode) -> Dataset {
    Dataset {
        images: base.images.iter().map(|img| with_mode(img, mode)).collect(),
        split: base.split,
    }
}

/// Each image independently becomes Deg0 or Deg45 with probability ½.
pub fn make_foundation_mixture(base: &Dataset, rng: &mut Rng) -> Dataset {
    Dataset {
        images: base
            .images
            .iter()
            .map(|img| {
                let mode = if rng.bernoulli_half() {
                    Mode::Deg45
                } else {
                    Mode::Deg0
                };
                with_mode(img, mode)
            })
            .collect(),
        split: base.split,
    }
}

fn make_batch(ds: &Dataset, indices: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(indices.len() * PIXELS);
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = &ds.images[i];
        data.extend_from_slice(&img.pixels);
        targets.push(img.label);
    }
    Batch {
        inputs: Matrix::from_vec(indices.len(), PIXELS, data).expect("batch shape"),
        targets,
    }
}

/// Sequential minibatches over `ds`; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = make_batch(self.ds, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn batches<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng, shuffle: bool) -> Batches<'a> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    }
}
