//! Dataset readers (MNIST IDX, CIFAR-10 binary) and synthetic fields.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Result, SgsError};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor4};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T: Scalar = f64> {
    images: Tensor4<T>,
    labels: Vec<usize>,
    class_count: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(SgsError::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SgsError::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor4<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.images.shape();
        (c, h, w)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Seeded shuffle, then split off the trailing `fraction` as a second set.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(SgsError::invalid(format!(
                "split fraction {fraction} must lie in [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        SeededRng::new(seed).shuffle(&mut idx);
        let held = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - held;
        Ok((self.select(&idx[..cut]), self.select(&idx[cut..])))
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }
}

/// Reads a file, transparently gunzipping names ending in `.gz`.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| SgsError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| SgsError::Format {
                path: path.to_path_buf(),
                message: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> SgsError {
    SgsError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            format!("unexpected magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            path,
            format!("truncated: {n} images of {h}x{w} need {need} bytes, found {}", body.len()),
        ));
    }
    Ok((n, h, w, body[..need].to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("unexpected magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_err(
            path,
            format!("truncated: {n} labels, found {} bytes", body.len()),
        ));
    }
    Ok(body[..n].to_vec())
}

/// MNIST-style IDX image and label files (optionally gzipped).
pub fn read_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<T>> {
    let (n, h, w, pixels) = parse_idx_images(&read_bytes(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_bytes(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            labels_path,
            format!("{} labels for {n} images in {}", labels.len(), images_path.display()),
        ));
    }
    let scale = T::of(1.0 / 255.0);
    let data = pixels.iter().map(|&p| T::of(p as f64) * scale).collect();
    let images = Tensor4::from_vec([n, 1, h, w], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(images, labels, classes)
}

/// Writes IDX files, gzipped for names ending in `.gz`. Pixel values are
/// rounded from `[0, 1]` to bytes.
pub fn write_idx<T: Scalar>(data: &LabeledDataset<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [n, c, h, w] = data.images().shape();
    if c != 1 {
        return Err(SgsError::shape(format!("IDX images are single-channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in data.images().data() {
        img.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in data.labels() {
        let b = u8::try_from(l).map_err(|_| SgsError::invalid(format!("label {l} does not fit a byte")))?;
        lab.push(b);
    }
    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| SgsError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(f, Compression::default());
        gz.write_all(bytes).map_err(|e| SgsError::io(path, e))?;
        gz.finish().map_err(|e| SgsError::io(path, e))?;
        Ok(())
    } else {
        let mut f = f;
        f.write_all(bytes).map_err(|e| SgsError::io(path, e))
    }
}

/// CIFAR-10 binary batches: records of one label byte and 3x32x32
/// channel-planar pixels.
pub fn read_cifar_binary<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let bytes = read_bytes(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(format_err(path, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| T::of(b as f64 / 255.0)));
        }
    }
    if labels.is_empty() {
        return Err(SgsError::invalid("CIFAR input contains zero samples"));
    }
    let images = Tensor4::from_vec([labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, 10)
}

/// Gaussian white noise smoothed by a normalized `(2l+1) x (2l+1)` box per
/// plane (zero padded). `l = 0` leaves i.i.d. noise.
pub fn synth_correlated_field<T: Scalar>(shape: [usize; 4], correlation_length: usize, seed: u64) -> Result<Tensor4<T>> {
    if shape.contains(&0) {
        return Err(SgsError::shape(format!("field shape {shape:?} must be non-empty")));
    }
    let mut rng = SeededRng::new(seed);
    let noise: Tensor4<f64> = Tensor4::from_fn(shape, |_| rng.normal());
    if correlation_length == 0 {
        return Ok(noise.cast());
    }
    let l = correlation_length as isize;
    let norm = 1.0 / ((2 * l + 1) * (2 * l + 1)) as f64;
    let [n, c, h, w] = shape;
    let mut out = Tensor4::zeros(shape);
    for s in 0..n {
        for ch in 0..c {
            let src = noise.plane(s, ch);
            // row pass then column pass of the separable box
            let mut rows = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for dj in -l..=l {
                        let jj = j as isize + dj;
                        if (0..w as isize).contains(&jj) {
                            acc += src[i * w + jj as usize];
                        }
                    }
                    rows[i * w + j] = acc;
                }
            }
            let dst = out.plane_mut(s, ch);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in -l..=l {
                        let ii = i as isize + di;
                        if (0..h as isize).contains(&ii) {
                            acc += rows[ii as usize * w + j];
                        }
                    }
                    dst[i * w + j] = T::of(acc * norm);
                }
            }
        }
    }
    Ok(out)
}

/// Random images and labels, for configs with `kind = "synthetic"`.
pub fn synthetic_dataset<T: Scalar>(
    samples: usize,
    shape: (usize, usize, usize),
    classes: usize,
    correlation_length: usize,
    seed: u64,
) -> Result<LabeledDataset<T>> {
    if classes == 0 {
        return Err(SgsError::invalid("synthetic dataset needs >= 1 class"));
    }
    let (c, h, w) = shape;
    let field: Tensor4<f64> = synth_correlated_field([samples, c, h, w], correlation_length, seed)?;
    let (lo, hi) = field.min_max().unwrap_or((0.0, 1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let images = field.map(|v| (v - lo) / span).cast();
    let mut rng = SeededRng::stream(seed, 7);
    let labels = (0..samples).map(|_| rng.below(classes)).collect();
    LabeledDataset::new(images, labels, classes)
}
