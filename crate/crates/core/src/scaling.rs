//! Spatial gradient scaling matrices.
//!
//! A `ScalingMatrix` is kernel-shaped, strictly positive and has mean 1. It
//! multiplies a convolution weight gradient position-wise, broadcast over the
//! output and input channels.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::dependence::SpatialDependenceMatrix;
use crate::error::{Result, SgsError};
use crate::reparam::BranchMask;
use crate::tensor::{KernelMatrix, Scalar, Tensor4};

pub const MEAN_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingMatrix(KernelMatrix);

impl ScalingMatrix {
    /// Wraps `values`, checking positivity and unit mean.
    pub fn new(values: KernelMatrix) -> Result<Self> {
        if let Some(bad) = values.values().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(SgsError::invalid(format!(
                "scaling entries must be finite and > 0, found {bad}"
            )));
        }
        let mean = values.mean();
        if (mean - 1.0).abs() > MEAN_TOLERANCE {
            return Err(SgsError::invalid(format!(
                "scaling mean must be 1, got {mean}"
            )));
        }
        Ok(Self(values))
    }

    pub fn identity(rows: usize, cols: usize) -> Self {
        Self(KernelMatrix::ones(rows, cols))
    }

    pub fn matrix(&self) -> &KernelMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> KernelMatrix {
        self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.values().iter().all(|&v| v == 1.0)
    }

    pub fn record(&self, layer: usize, epoch: usize) -> ScalingRecord {
        ScalingRecord {
            layer,
            epoch,
            kernel: [self.rows(), self.cols()],
            values: self.values().to_vec(),
        }
    }
}

impl Deref for ScalingMatrix {
    type Target = KernelMatrix;

    fn deref(&self) -> &KernelMatrix {
        &self.0
    }
}

/// Exported form of a scaling matrix: one JSON object per layer and refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub layer: usize,
    pub epoch: usize,
    pub kernel: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

impl ScalingRecord {
    pub fn to_scaling(&self) -> Result<ScalingMatrix> {
        ScalingMatrix::new(KernelMatrix::new(
            self.kernel[0],
            self.kernel[1],
            self.values.clone(),
        )?)
    }
}

/// Coverage of a set of branch masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCoverage {
    /// `sum_n M_n`, integer valued. This is the scaling that makes a single
    /// convolution train exactly like the branched one.
    pub raw: KernelMatrix,
    /// `raw / mean(raw)`.
    pub normalized: ScalingMatrix,
}

pub fn from_masks(masks: &[BranchMask]) -> Result<MaskCoverage> {
    let first = masks
        .first()
        .ok_or_else(|| SgsError::invalid("mask set is empty"))?;
    let (rows, cols) = first.shape();
    let mut raw = KernelMatrix::filled(rows, cols, 0.0);
    for (n, mask) in masks.iter().enumerate() {
        if mask.shape() != (rows, cols) {
            return Err(SgsError::shape(format!(
                "mask {n} has shape {:?}, expected {:?}",
                mask.shape(),
                (rows, cols)
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                if mask.get(r, c) {
                    raw.set(r, c, raw.get(r, c) + 1.0);
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if raw.get(r, c) == 0.0 {
                return Err(SgsError::invalid(format!(
                    "kernel position ({r},{c}) is not covered by any mask"
                )));
            }
        }
    }
    let mean = raw.mean();
    let normalized = ScalingMatrix(raw.map(|v| v / mean));
    Ok(MaskCoverage { raw, normalized })
}

/// `k S / ((k - 1) S + 1)` elementwise. Fixes 0 and 1; `k = 1` is the
/// identity, larger `k` lifts small dependences.
pub fn k_transform(s: &SpatialDependenceMatrix, k: f64) -> Result<KernelMatrix> {
    if !(k.is_finite() && k > 0.0) {
        return Err(SgsError::invalid(format!("k must be > 0, got {k}")));
    }
    if let Some(bad) = s.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SgsError::invalid(format!(
            "dependence entries must lie in [0, 1], found {bad}"
        )));
    }
    Ok(s.matrix().map(|v| k_transform_value(v, k)))
}

#[inline]
pub fn k_transform_value(s: f64, k: f64) -> f64 {
    k * s / ((k - 1.0) * s + 1.0)
}

/// Floors every entry at `epsilon_floor`, then divides by the mean.
pub fn finalize(raw: &KernelMatrix, epsilon_floor: f64) -> Result<ScalingMatrix> {
    if !(epsilon_floor.is_finite() && epsilon_floor >= 0.0) {
        return Err(SgsError::invalid(format!(
            "epsilon floor must be >= 0, got {epsilon_floor}"
        )));
    }
    if let Some(bad) = raw.values().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(SgsError::invalid(format!(
            "raw scaling entries must be finite and >= 0, found {bad}"
        )));
    }
    let floored = raw.map(|v| v.max(epsilon_floor));
    let mean = floored.mean();
    if mean <= 0.0 || floored.min() <= 0.0 {
        return Err(SgsError::invalid(
            "raw scaling has zero entries and no positive floor; cannot normalize",
        ));
    }
    ScalingMatrix::new(floored.map(|v| v / mean))
}

/// `g` scaled position-wise by `scaling`.
pub fn apply<T: Scalar>(g: &Tensor4<T>, scaling: &ScalingMatrix) -> Result<Tensor4<T>> {
    g.broadcast_scale(scaling)
}
