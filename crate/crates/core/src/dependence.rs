//! Spatial dependence of feature maps, measured per kernel displacement.
//!
//! For a displacement `(i, j)` the pair set is every `(p, q)` where `p` is a
//! pixel and `q` the pixel `i` rows and `j` columns away, pooled over samples,
//! channels and positions. Entry `(a, b)` of a dependence matrix holds the
//! displacement `(a - kh/2, b - kw/2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};
use crate::scaling::ScalingMatrix;
use crate::tensor::{KernelMatrix, Scalar, Tensor4};

pub const DEFAULT_BINS: usize = 32;

/// Per-displacement dependence values, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDependenceMatrix(KernelMatrix);

impl SpatialDependenceMatrix {
    pub fn new(values: KernelMatrix) -> Result<Self> {
        if let Some(bad) = values.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SgsError::invalid(format!(
                "dependence entries must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &KernelMatrix {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Displacement held by entry `(a, b)`.
    pub fn displacement(&self, a: usize, b: usize) -> (isize, isize) {
        displacement_for(self.shape(), a, b)
    }

    /// Mean over the entries whose displacement is not `(0, 0)`.
    pub fn mean_off_center(&self) -> f64 {
        let (rows, cols) = self.shape();
        let mut sum = 0.0;
        let mut n = 0usize;
        for a in 0..rows {
            for b in 0..cols {
                if self.displacement(a, b) != (0, 0) {
                    sum += self.0.get(a, b);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn record(&self, layer: usize, epoch: usize) -> DependenceRecord {
        DependenceRecord {
            kind: "dependence".to_string(),
            layer,
            epoch,
            kernel: [self.0.rows(), self.0.cols()],
            values: self.values().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceRecord {
    pub kind: String,
    pub layer: usize,
    pub epoch: usize,
    pub kernel: [usize; 2],
    pub values: Vec<f64>,
}

pub fn displacement_for(kernel: (usize, usize), a: usize, b: usize) -> (isize, isize) {
    (
        a as isize - (kernel.0 / 2) as isize,
        b as isize - (kernel.1 / 2) as isize,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum RedundancyFilter {
    #[default]
    Off,
    /// Drop pairs with `|p - q| < threshold`. `None` uses `(max - min) / bins`.
    On { threshold: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub bins: usize,
    /// Fixed `(min, max)`; `None` takes the min/max of the sampled maps.
    pub range: Option<(f64, f64)>,
    pub redundancy_filter: RedundancyFilter,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            range: None,
            redundancy_filter: RedundancyFilter::Off,
        }
    }
}

impl BinningConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(SgsError::invalid(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        if let Some((lo, hi)) = self.range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(SgsError::invalid(format!("bad bin range ({lo}, {hi})")));
            }
        }
        if let RedundancyFilter::On {
            threshold: Some(d),
        } = self.redundancy_filter
        {
            if !(d.is_finite() && d > 0.0) {
                return Err(SgsError::invalid(format!(
                    "redundancy threshold must be > 0, got {d}"
                )));
            }
        }
        Ok(())
    }
}

/// `B x B` joint counts; row = bin of `p`, column = bin of `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
}

impl JointHistogram {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            counts: vec![0; bins * bins],
        }
    }

    pub fn from_counts(bins: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != bins * bins {
            return Err(SgsError::shape(format!(
                "{bins}x{bins} histogram needs {} counts, got {}",
                bins * bins,
                counts.len()
            )));
        }
        Ok(Self { bins, counts })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, p: usize, q: usize) -> u64 {
        self.counts[p * self.bins + q]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    #[inline]
    fn add(&mut self, p: usize, q: usize) {
        self.counts[p * self.bins + q] += 1;
    }

    /// Element-wise sum, for merging partial histograms.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.bins != other.bins {
            return Err(SgsError::shape("merging histograms of different bin counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let b = self.bins;
        let mut out = Self::new(b);
        for p in 0..b {
            for q in 0..b {
                out.counts[q * b + p] = self.counts[p * b + q];
            }
        }
        out
    }
}

fn entropy(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    h
}

/// `(H(P) + H(Q) - H(P,Q)) / H(P,Q)`, clamped to `[0, 1]`; 0 when the joint
/// entropy vanishes.
pub fn normalized_mi(joint: &JointHistogram) -> Result<f64> {
    let total = joint.total();
    if total == 0 {
        return Err(SgsError::Estimator("empty joint histogram".into()));
    }
    let total = total as f64;
    let b = joint.bins;
    let h_pq = entropy(joint.counts.iter().copied(), total);
    if h_pq <= 0.0 {
        return Ok(0.0);
    }
    let h_p = entropy((0..b).map(|p| (0..b).map(|q| joint.get(p, q)).sum()), total);
    let h_q = entropy((0..b).map(|q| (0..b).map(|p| joint.get(p, q)).sum()), total);
    Ok(((h_p + h_q - h_pq) / h_pq).clamp(0.0, 1.0))
}

/// Feature maps flattened to `f64` with their pooled value range.
struct PairSource {
    maps: Vec<([usize; 4], Vec<f64>)>,
    lo: f64,
    hi: f64,
}

impl PairSource {
    fn new<T: Scalar>(maps: &[Tensor4<T>], range: Option<(f64, f64)>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| SgsError::Estimator("no feature maps".into()))?;
        let channels = first.shape()[1];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut flat = Vec::with_capacity(maps.len());
        for m in maps {
            if m.shape()[1] != channels {
                return Err(SgsError::shape(format!(
                    "feature maps disagree on channel count: {} vs {}",
                    m.shape()[1],
                    channels
                )));
            }
            let values: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
            for &v in &values {
                if !v.is_finite() {
                    return Err(SgsError::Estimator("non-finite activation".into()));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
            flat.push((m.shape(), values));
        }
        let (lo, hi) = range.unwrap_or((lo, hi));
        Ok(Self {
            maps: flat,
            lo,
            hi,
        })
    }

    #[inline]
    fn bin(&self, v: f64, bins: usize) -> usize {
        if self.hi <= self.lo {
            return 0;
        }
        let b = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        }
    }

    fn check_displacement(&self, d: (isize, isize)) -> Result<()> {
        for (shape, _) in &self.maps {
            if d.0.unsigned_abs() >= shape[2] || d.1.unsigned_abs() >= shape[3] {
                return Err(SgsError::Estimator(format!(
                    "displacement {d:?} exceeds spatial extent {}x{}",
                    shape[2], shape[3]
                )));
            }
        }
        Ok(())
    }

    /// Calls `f(p, q)` for every in-bounds pair at displacement `d`.
    fn for_each_pair(&self, d: (isize, isize), mut f: impl FnMut(f64, f64)) {
        for (shape, values) in &self.maps {
            let [n, c, h, w] = *shape;
            let (di, dj) = d;
            let rows = (0.max(-di) as usize)..((h as isize).min(h as isize - di) as usize);
            let cols = (0.max(-dj) as usize)..((w as isize).min(w as isize - dj) as usize);
            for plane in 0..n * c {
                let base = plane * h * w;
                for r in rows.clone() {
                    let qr = (r as isize + di) as usize;
                    let prow = &values[base + r * w..base + (r + 1) * w];
                    let qrow = &values[base + qr * w..base + (qr + 1) * w];
                    for col in cols.clone() {
                        let qc = (col as isize + dj) as usize;
                        f(prow[col], qrow[qc]);
                    }
                }
            }
        }
    }

    fn histogram(
        &self,
        d: (isize, isize),
        bins: usize,
        filter: Option<f64>,
    ) -> Result<JointHistogram> {
        self.check_displacement(d)?;
        let mut joint = JointHistogram::new(bins);
        self.for_each_pair(d, |p, q| {
            if let Some(delta) = filter {
                if (p - q).abs() < delta {
                    return;
                }
            }
            joint.add(self.bin(p, bins), self.bin(q, bins));
        });
        if joint.total() == 0 {
            return Err(SgsError::Estimator(format!(
                "no pairs left for displacement {d:?}"
            )));
        }
        Ok(joint)
    }

    fn filter_threshold(&self, cfg: &BinningConfig) -> Option<f64> {
        match cfg.redundancy_filter {
            RedundancyFilter::Off => None,
            RedundancyFilter::On { threshold: Some(t) } => Some(t),
            RedundancyFilter::On { threshold: None } => {
                Some((self.hi - self.lo) / cfg.bins as f64)
            }
        }
    }
}

/// Joint histogram of `(p, q)` pairs at one displacement.
pub fn collect_pairs<T: Scalar>(
    maps: &[Tensor4<T>],
    displacement: (isize, isize),
    cfg: &BinningConfig,
) -> Result<JointHistogram> {
    cfg.validate()?;
    let src = PairSource::new(maps, cfg.range)?;
    src.histogram(displacement, cfg.bins, src.filter_threshold(cfg))
}

/// Normalized MI for every displacement in the kernel's receptive field.
///
/// The `(0, 0)` displacement ignores the redundancy filter, which would
/// otherwise discard every `p == q` pair.
pub fn spatial_dependence_mi<T: Scalar>(
    maps: &[Tensor4<T>],
    kernel: (usize, usize),
    cfg: &BinningConfig,
) -> Result<SpatialDependenceMatrix> {
    cfg.validate()?;
    check_kernel(kernel)?;
    let src = PairSource::new(maps, cfg.range)?;
    let filter = src.filter_threshold(cfg);
    let mut out = KernelMatrix::filled(kernel.0, kernel.1, 0.0);
    for a in 0..kernel.0 {
        for b in 0..kernel.1 {
            let d = displacement_for(kernel, a, b);
            let f = if d == (0, 0) { None } else { filter };
            let joint = src.histogram(d, cfg.bins, f)?;
            out.set(a, b, normalized_mi(&joint)?);
        }
    }
    SpatialDependenceMatrix::new(out)
}

/// `|Pearson correlation|` between pixels and their displaced neighbours.
pub fn spatial_dependence_autocorr<T: Scalar>(
    maps: &[Tensor4<T>],
    kernel: (usize, usize),
) -> Result<SpatialDependenceMatrix> {
    check_kernel(kernel)?;
    let src = PairSource::new(maps, None)?;
    let mut out = KernelMatrix::filled(kernel.0, kernel.1, 0.0);
    for a in 0..kernel.0 {
        for b in 0..kernel.1 {
            let d = displacement_for(kernel, a, b);
            src.check_displacement(d)?;
            let rho = if d == (0, 0) {
                1.0
            } else {
                abs_correlation(&src, d)?
            };
            out.set(a, b, rho);
        }
    }
    SpatialDependenceMatrix::new(out)
}

fn abs_correlation(src: &PairSource, d: (isize, isize)) -> Result<f64> {
    let (mut n, mut sp, mut sq) = (0usize, 0.0, 0.0);
    src.for_each_pair(d, |p, q| {
        n += 1;
        sp += p;
        sq += q;
    });
    if n == 0 {
        return Err(SgsError::Estimator(format!(
            "no pairs for displacement {d:?}"
        )));
    }
    let (mp, mq) = (sp / n as f64, sq / n as f64);
    let (mut cov, mut vp, mut vq) = (0.0, 0.0, 0.0);
    src.for_each_pair(d, |p, q| {
        let (a, b) = (p - mp, q - mq);
        cov += a * b;
        vp += a * a;
        vq += b * b;
    });
    if vp <= 0.0 || vq <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vp.sqrt() * vq.sqrt())).abs().clamp(0.0, 1.0))
}

fn check_kernel(kernel: (usize, usize)) -> Result<()> {
    if kernel.0 == 0 || kernel.1 == 0 {
        return Err(SgsError::invalid(format!(
            "kernel dims must be >= 1, got {kernel:?}"
        )));
    }
    Ok(())
}

/// 3x3 scaling with centre 1, edges `1/alpha`, corners `1/beta`, rescaled to
/// mean 1 by `9 / (1 + 4/alpha + 4/beta)`.
pub fn alpha_beta_scaling(alpha: f64, beta: f64) -> Result<ScalingMatrix> {
    if !(alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta > 0.0) {
        return Err(SgsError::invalid(format!(
            "alpha and beta must be > 0, got {alpha}, {beta}"
        )));
    }
    let factor = 9.0 / (1.0 + 4.0 / alpha + 4.0 / beta);
    let m = KernelMatrix::from_fn(3, 3, |r, c| {
        let base = match (r == 1, c == 1) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 1.0 / alpha,
            (false, false) => 1.0 / beta,
        };
        base * factor
    });
    ScalingMatrix::new(m)
}

/// The alpha/beta values searched by the grid-search command.
pub const ALPHA_BETA_GRID: [f64; 7] = [0.8, 1.0, 1.25, 1.7, 5.0, 10.0, 100.0];
