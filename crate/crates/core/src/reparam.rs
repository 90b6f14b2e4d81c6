//! Masked multi-branch convolutions and the lockstep harness that trains a
//! branched convolution next to a single gradient-scaled one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{conv_backward_input, conv_backward_weights, conv_forward, ConvSpec};
use crate::error::{Result, SgsError};
use crate::net::layers::{dense_backward, dense_forward, relu_backward, relu_forward, softmax_cross_entropy};
use crate::optim::{LearningRateSchedule, OptimizerConfig, OptimizerState, ScalingPosition};
use crate::rng::SeededRng;
use crate::scaling::from_masks;
use crate::tensor::{KernelMatrix, Scalar, Tensor4};

/// Binary kernel-shaped mask with at least one set entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchMask {
    rows: usize,
    cols: usize,
    values: Vec<bool>,
}

impl BranchMask {
    pub fn new(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SgsError::invalid("mask dimensions must be >= 1"));
        }
        if values.len() != rows * cols {
            return Err(SgsError::shape(format!(
                "mask {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if !values.iter().any(|&b| b) {
            return Err(SgsError::invalid("mask has no set entry"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols]).expect("non-empty full mask")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values)
    }

    /// Centered `a x b` rectangle inside a `rows x cols` kernel.
    pub fn centered_rect(rows: usize, cols: usize, a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 || a > rows || b > cols || !(rows - a).is_multiple_of(2) || !(cols - b).is_multiple_of(2) {
            return Err(SgsError::invalid(format!(
                "no centered {a}x{b} rectangle in a {rows}x{cols} kernel"
            )));
        }
        let (r0, c0) = ((rows - a) / 2, (cols - b) / 2);
        Self::from_fn(rows, cols, |r, c| {
            (r0..r0 + a).contains(&r) && (c0..c0 + b).contains(&c)
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols, "mask index ({r},{c}) out of range");
        self.values[r * self.cols + c]
    }

    /// Refuses to clear the last set entry.
    pub fn set(&mut self, r: usize, c: usize, value: bool) -> Result<()> {
        assert!(r < self.rows && c < self.cols, "mask index ({r},{c}) out of range");
        let i = r * self.cols + c;
        if !value && self.count() == 1 && self.values[i] {
            return Err(SgsError::invalid("cannot clear the only set entry of a mask"));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn to_matrix(&self) -> KernelMatrix {
        KernelMatrix::from_fn(self.rows, self.cols, |r, c| if self.get(r, c) { 1.0 } else { 0.0 })
    }

    /// Zeroes every spatial position outside the mask.
    pub fn apply<T: Scalar>(&self, w: &Tensor4<T>) -> Result<Tensor4<T>> {
        if w.spatial() != self.shape() {
            return Err(SgsError::shape(format!(
                "mask {:?} vs tensor spatial {:?}",
                self.shape(),
                w.spatial()
            )));
        }
        let mut out = w.clone();
        let plane = self.rows * self.cols;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if !self.values[i % plane] {
                *v = T::zero();
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MaskFamily {
    /// the full kernel alone
    Full,
    /// full kernel, middle row, middle column
    Acb,
    FullPlusCenter,
    /// every centered odd-by-odd rectangle
    AllRectangles,
    Random { n: usize, seed: u64 },
}

impl std::str::FromStr for MaskFamily {
    type Err = SgsError;

    /// `full`, `acb`, `full_plus_center`, `all_rectangles` or
    /// `random:<n>:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskFamily::Full),
            "acb" => Ok(MaskFamily::Acb),
            "full_plus_center" => Ok(MaskFamily::FullPlusCenter),
            "all_rectangles" => Ok(MaskFamily::AllRectangles),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["random", n, seed] => Ok(MaskFamily::Random {
                        n: n.parse().map_err(|_| SgsError::Config(format!("bad mask count in '{s}'")))?,
                        seed: seed.parse().map_err(|_| SgsError::Config(format!("bad seed in '{s}'")))?,
                    }),
                    _ => Err(SgsError::Config(format!(
                        "unknown mask family '{s}' (full, acb, full_plus_center, all_rectangles, random:<n>:<seed>)"
                    ))),
                }
            }
        }
    }
}

pub fn standard_mask_sets(kernel: (usize, usize), family: MaskFamily) -> Result<Vec<BranchMask>> {
    let (kx, ky) = kernel;
    if kx == 0 || ky == 0 {
        return Err(SgsError::invalid("kernel dimensions must be >= 1"));
    }
    let need_odd = || {
        if kx % 2 == 0 || ky % 2 == 0 {
            Err(SgsError::invalid(format!(
                "{family:?} masks need an odd kernel, got {kx}x{ky}"
            )))
        } else {
            Ok(())
        }
    };
    match family {
        MaskFamily::Full => Ok(vec![BranchMask::full(kx, ky)]),
        MaskFamily::Acb => {
            need_odd()?;
            Ok(vec![
                BranchMask::full(kx, ky),
                BranchMask::centered_rect(kx, ky, 1, ky)?,
                BranchMask::centered_rect(kx, ky, kx, 1)?,
            ])
        }
        MaskFamily::FullPlusCenter => {
            need_odd()?;
            Ok(vec![BranchMask::full(kx, ky), BranchMask::centered_rect(kx, ky, 1, 1)?])
        }
        MaskFamily::AllRectangles => {
            need_odd()?;
            let mut out = Vec::new();
            for a in (1..=kx).step_by(2) {
                for b in (1..=ky).step_by(2) {
                    out.push(BranchMask::centered_rect(kx, ky, a, b)?);
                }
            }
            Ok(out)
        }
        MaskFamily::Random { n, seed } => {
            if n == 0 {
                return Err(SgsError::invalid("random mask family needs n >= 1"));
            }
            let mut rng = SeededRng::new(seed);
            let mut out = Vec::with_capacity(n + 1);
            for _ in 0..n {
                let mut values: Vec<bool> = (0..kx * ky).map(|_| rng.bernoulli(0.5)).collect();
                if !values.iter().any(|&b| b) {
                    values[rng.below(kx * ky)] = true;
                }
                out.push(BranchMask::new(kx, ky, values)?);
            }
            let covered = (0..kx * ky).all(|i| out.iter().any(|m| m.values[i]));
            if !covered {
                out.push(BranchMask::full(kx, ky));
            }
            Ok(out)
        }
    }
}

/// Parallel masked branches sharing one convolution geometry. Each branch
/// stores a full-size kernel that is zero outside its mask.
#[derive(Debug, Clone)]
pub struct BranchedConv<T: Scalar = f64> {
    spec: ConvSpec,
    masks: Vec<BranchMask>,
    weights: Vec<Tensor4<T>>,
}

impl<T: Scalar> BranchedConv<T> {
    /// Splits `w_base` so that each position's value is shared equally by
    /// the branches covering it. The last covering branch takes the exact
    /// remainder, which makes the merged kernel equal `w_base` bit for bit.
    pub fn split_init(w_base: &Tensor4<T>, masks: Vec<BranchMask>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        if w_base.shape() != spec.weight_shape() {
            return Err(SgsError::shape(format!(
                "base weight {:?} does not match conv {:?}",
                w_base.shape(),
                spec.weight_shape()
            )));
        }
        let coverage = from_masks(&masks)?;
        if coverage.raw.shape() != spec.kernel {
            return Err(SgsError::shape(format!(
                "masks are {:?}, kernel is {:?}",
                coverage.raw.shape(),
                spec.kernel
            )));
        }
        let (kh, kw) = spec.kernel;
        let plane = kh * kw;
        let mut weights: Vec<Tensor4<T>> = masks.iter().map(|_| Tensor4::zeros(w_base.shape())).collect();
        for (i, &w) in w_base.data().iter().enumerate() {
            let p = i % plane;
            let owners: Vec<usize> = (0..masks.len()).filter(|&n| masks[n].values[p]).collect();
            let share = w / T::of(owners.len() as f64);
            let mut partial = T::zero();
            for (j, &n) in owners.iter().enumerate() {
                let v = if j + 1 == owners.len() { w - partial } else { share };
                weights[n].data_mut()[i] = v;
                partial += v;
            }
        }
        Ok(Self { spec, masks, weights })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn masks(&self) -> &[BranchMask] {
        &self.masks
    }

    pub fn branch_weights(&self) -> &[Tensor4<T>] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `sum_n M_n * W_n`, accumulated in branch order.
    pub fn merged(&self) -> Tensor4<T> {
        let plane = self.spec.kernel.0 * self.spec.kernel.1;
        let mut out = Tensor4::zeros(self.spec.weight_shape());
        for (mask, w) in self.masks.iter().zip(&self.weights) {
            for (i, (o, &v)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
                if mask.values[i % plane] {
                    *o += v;
                }
            }
        }
        out
    }

    /// Sum of each branch's own convolution.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut acc: Option<Tensor4<T>> = None;
        for (mask, w) in self.masks.iter().zip(&self.weights) {
            let y = conv_forward(x, &mask.apply(w)?, &self.spec)?;
            match acc.as_mut() {
                Some(a) => a.add_assign(&y)?,
                None => acc = Some(y),
            }
        }
        acc.ok_or_else(|| SgsError::invalid("branched conv has no branches"))
    }

    pub fn backward_input(&self, dy: &Tensor4<T>, input_hw: (usize, usize)) -> Result<Tensor4<T>> {
        let mut acc: Option<Tensor4<T>> = None;
        for (mask, w) in self.masks.iter().zip(&self.weights) {
            let dx = conv_backward_input(dy, &mask.apply(w)?, &self.spec, input_hw)?;
            match acc.as_mut() {
                Some(a) => a.add_assign(&dx)?,
                None => acc = Some(dx),
            }
        }
        acc.ok_or_else(|| SgsError::invalid("branched conv has no branches"))
    }

    /// Every branch receives `M_n * dL/dW` for the shared weight gradient and
    /// takes an independent optimizer step.
    pub fn backward_step(
        &mut self,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        states: &mut [OptimizerState<T>],
        lr: f64,
    ) -> Result<()> {
        let dw = conv_backward_weights(dy, x, &self.spec)?;
        self.step_with_gradient(&dw, states, lr)
    }

    pub fn step_with_gradient(
        &mut self,
        dw: &Tensor4<T>,
        states: &mut [OptimizerState<T>],
        lr: f64,
    ) -> Result<()> {
        if states.len() != self.masks.len() {
            return Err(SgsError::invalid(format!(
                "{} optimizer states for {} branches",
                states.len(),
                self.masks.len()
            )));
        }
        for ((mask, w), state) in self.masks.iter().zip(&mut self.weights).zip(states) {
            let g = mask.apply(dw)?;
            state.step(w, &g, None, ScalingPosition::Pre, lr)?;
        }
        Ok(())
    }
}

/// Free-function form of [`BranchedConv::split_init`].
pub fn split_init<T: Scalar>(w_base: &Tensor4<T>, masks: Vec<BranchMask>, spec: ConvSpec) -> Result<BranchedConv<T>> {
    BranchedConv::split_init(w_base, masks, spec)
}

pub fn branched_forward<T: Scalar>(b: &BranchedConv<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    b.forward(x)
}

pub fn branched_backward_step<T: Scalar>(
    b: &mut BranchedConv<T>,
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    states: &mut [OptimizerState<T>],
    lr: f64,
) -> Result<()> {
    b.backward_step(x, dy, states, lr)
}

/// Toy network and data stream for a lockstep run:
/// conv (no bias, same padding) -> relu -> flatten -> dense -> softmax loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceSetup {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_hw: (usize, usize),
    pub batch: usize,
    pub classes: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LearningRateSchedule,
    pub steps: usize,
    pub seed: u64,
}

impl Default for EquivalenceSetup {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 3,
            input_hw: (8, 8),
            batch: 4,
            classes: 3,
            optimizer: OptimizerConfig::sgd_momentum(0.9, 1e-4),
            schedule: LearningRateSchedule::constant(0.05),
            steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDivergence {
    pub step: usize,
    pub max_rel_divergence: f64,
    pub mean_rel_divergence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub steps: Vec<StepDivergence>,
    /// Worst relative gap between the branch-sum output and the merged
    /// convolution output over all steps.
    pub max_forward_divergence: f64,
    /// Largest training loss seen on the single side. A run whose loss
    /// explodes amplifies rounding noise far past the divergence tolerance.
    pub max_loss: f64,
    /// False for optimizers outside the linear family.
    pub equivalence_guaranteed: bool,
    pub optimizer: String,
    pub branches: usize,
}

impl DivergenceReport {
    pub fn max_divergence(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.max_rel_divergence)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.equivalence_guaranteed && self.max_divergence() <= tolerance
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| SgsError::Numeric(format!("writing divergence CSV: {e}"));
        w.write_record(["step", "max_rel_divergence", "mean_rel_divergence"])
            .map_err(err)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                format!("{:e}", s.max_rel_divergence),
                format!("{:e}", s.mean_rel_divergence),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| SgsError::Numeric(format!("writing divergence CSV: {e}")))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| SgsError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

struct Head {
    w: Tensor4<f64>,
    b: Tensor4<f64>,
    sw: OptimizerState<f64>,
    sb: OptimizerState<f64>,
}

impl Head {
    /// Forward from conv output to loss; returns d(loss)/d(conv output) and
    /// steps the dense parameters.
    fn train_step(&mut self, conv_out: &Tensor4<f64>, labels: &[usize], lr: f64) -> Result<(f64, Tensor4<f64>)> {
        let [n, c, h, w] = conv_out.shape();
        let act = relu_forward(conv_out);
        let flat = act.clone().reshape([n, c * h * w, 1, 1])?;
        let logits = dense_forward(&flat, &self.w, &self.b)?;
        let loss = softmax_cross_entropy(&logits, labels)?;
        if !loss.loss.is_finite() {
            return Err(SgsError::Numeric("non-finite loss in equivalence run".into()));
        }
        let g = dense_backward(&flat, &self.w, &loss.dlogits)?;
        self.sw.step(&mut self.w, &g.dw, None, ScalingPosition::Pre, lr)?;
        self.sb.step(&mut self.b, &g.db, None, ScalingPosition::Pre, lr)?;
        let dact = g.dx.reshape([n, c, h, w])?;
        Ok((loss.loss, relu_backward(conv_out, &dact)?))
    }
}

/// Trains the branched convolution and a single convolution scaled by the
/// raw mask coverage side by side on the same stream, reporting how far the
/// merged branch weights drift from the single weights after every step.
///
/// The relative divergence at a step is `max|merged - single| / max|single|`
/// over the conv kernel and the dense head taken together; the mean variant
/// uses the mean absolute gap in the numerator.
pub fn equivalence_run(masks: &[BranchMask], w_init: &Tensor4<f64>, setup: &EquivalenceSetup) -> Result<DivergenceReport> {
    setup.optimizer.validate()?;
    setup.schedule.validate()?;
    let kernel = masks
        .first()
        .map(|m| m.shape())
        .ok_or_else(|| SgsError::invalid("mask set is empty"))?;
    let spec = ConvSpec::same(setup.in_channels, setup.out_channels, kernel);
    let coverage = from_masks(masks)?;
    let mut branched = BranchedConv::split_init(w_init, masks.to_vec(), spec)?;
    let mut single = w_init.clone();
    let guaranteed = setup.optimizer.kind.is_linear();
    if !guaranteed {
        log::warn!(
            "optimizer {} is not linear; no equivalence guarantee",
            setup.optimizer.kind
        );
    }

    let (h, w) = setup.input_hw;
    let (oh, ow) = spec.output_size(h, w)?;
    let features = setup.out_channels * oh * ow;
    let mut rng = SeededRng::new(setup.seed);
    let std = (2.0 / features as f64).sqrt();
    let dense_w = Tensor4::from_fn([setup.classes, features, 1, 1], |_| rng.normal() * std);
    let new_head = || Head {
        w: dense_w.clone(),
        b: Tensor4::zeros([setup.classes, 1, 1, 1]),
        sw: OptimizerState::new(setup.optimizer),
        sb: OptimizerState::new(setup.optimizer),
    };
    let mut head_single = new_head();
    let mut head_branched = new_head();
    let mut single_state = OptimizerState::new(setup.optimizer);
    let mut branch_states: Vec<_> = masks.iter().map(|_| OptimizerState::new(setup.optimizer)).collect();

    let mut data_rng = SeededRng::stream(setup.seed, 1);
    let mut steps = Vec::with_capacity(setup.steps);
    let mut max_forward: f64 = 0.0;
    let mut max_loss: f64 = 0.0;
    for step in 0..setup.steps {
        let x = Tensor4::from_fn([setup.batch, setup.in_channels, h, w], |_| data_rng.normal());
        let labels: Vec<usize> = (0..setup.batch).map(|_| data_rng.below(setup.classes)).collect();
        let lr = setup.schedule.lr(step);

        let y_single = conv_forward(&x, &single, &spec)?;
        let (loss, dy_single) = head_single.train_step(&y_single, &labels, lr)?;
        max_loss = max_loss.max(loss);
        let dw_single = conv_backward_weights(&dy_single, &x, &spec)?;
        single_state.step(&mut single, &dw_single, Some(&coverage.raw), ScalingPosition::Pre, lr)?;

        let y_branched = branched.forward(&x)?;
        let y_merged = conv_forward(&x, &branched.merged(), &spec)?;
        max_forward = max_forward.max(relative_gap(y_branched.data(), y_merged.data()));
        let (_, dy_branched) = head_branched.train_step(&y_branched, &labels, lr)?;
        branched.backward_step(&x, &dy_branched, &mut branch_states, lr)?;

        let merged = branched.merged();
        let mut a: Vec<f64> = merged.data().to_vec();
        a.extend_from_slice(head_branched.w.data());
        a.extend_from_slice(head_branched.b.data());
        let mut b: Vec<f64> = single.data().to_vec();
        b.extend_from_slice(head_single.w.data());
        b.extend_from_slice(head_single.b.data());
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if scale == 0.0 { 1.0 } else { scale };
        let gaps: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
        let max_gap = gaps.iter().fold(0.0f64, |m, &v| m.max(v));
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        steps.push(StepDivergence {
            step: step + 1,
            max_rel_divergence: max_gap / scale,
            mean_rel_divergence: mean_gap / scale,
        });
    }
    Ok(DivergenceReport {
        steps,
        max_forward_divergence: max_forward,
        max_loss,
        equivalence_guaranteed: guaranteed,
        optimizer: setup.optimizer.kind.to_string(),
        branches: masks.len(),
    })
}

/// [`equivalence_run`] on the default toy setup, sized for the masks'
/// kernel, from a seeded random initial kernel.
pub fn standard_equivalence_run(
    masks: &[BranchMask],
    optimizer: OptimizerConfig,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<DivergenceReport> {
    let (kh, kw) = masks
        .first()
        .map(|m| m.shape())
        .ok_or_else(|| SgsError::invalid("mask set is empty"))?;
    let setup = EquivalenceSetup {
        input_hw: (kh.max(8), kw.max(8)),
        optimizer,
        schedule: LearningRateSchedule::constant(lr),
        steps,
        seed,
        ..EquivalenceSetup::default()
    };
    let mut rng = SeededRng::stream(seed, 9);
    let w = Tensor4::from_fn([setup.out_channels, setup.in_channels, kh, kw], |_| rng.normal() * 0.3);
    equivalence_run(masks, &w, &setup)
}
