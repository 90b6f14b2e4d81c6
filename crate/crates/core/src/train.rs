//! Training loop with periodic spatial-gradient-scaling refreshes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::dependence::{
    alpha_beta_scaling, spatial_dependence_autocorr, spatial_dependence_mi, BinningConfig,
    DependenceRecord, SpatialDependenceMatrix,
};
use crate::error::{Result, SgsError};
use crate::net::{Network, NetworkSpec, ParamRole};
use crate::optim::{LearningRateSchedule, OptimizerConfig, OptimizerState, ScalingPosition, ScheduleKind};
use crate::reparam::{standard_mask_sets, MaskFamily};
use crate::rng::SeededRng;
use crate::scaling::{finalize, from_masks, k_transform, ScalingMatrix, ScalingRecord, DEFAULT_EPSILON_FLOOR};
use crate::tensor::{KernelMatrix, Scalar, Tensor4};

/// How the spatial dependence (or the scaling itself) is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "measure", rename_all = "snake_case")]
pub enum Measure {
    Mi,
    Autocorr,
    /// Fixed 3x3 parameterization; no data pass.
    AlphaBeta { alpha: f64, beta: f64 },
    /// Fixed matrix, floored and mean-normalized.
    Fixed { matrix: KernelMatrix },
    /// Normalized coverage of a mask family.
    Masks { family: MaskFamily },
}

impl Measure {
    fn needs_data(&self) -> bool {
        matches!(self, Measure::Mi | Measure::Autocorr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgsConfig {
    pub enabled: bool,
    pub measure: Measure,
    pub k: f64,
    /// Epochs between refreshes.
    pub refresh_every: usize,
    /// Batches sampled per refresh.
    pub refresh_batches: usize,
    pub warmup_epochs: usize,
    pub binning: BinningConfig,
    pub epsilon_floor: f64,
    pub scaling_position: ScalingPosition,
}

impl Default for SgsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            measure: Measure::Mi,
            k: 5.0,
            refresh_every: 5,
            refresh_batches: 2,
            warmup_epochs: 1,
            binning: BinningConfig::default(),
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            scaling_position: ScalingPosition::Pre,
        }
    }
}

impl SgsConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SgsError::Config(m));
        if self.refresh_every == 0 {
            return bad("sgs.refresh_every must be >= 1".into());
        }
        if self.refresh_batches == 0 {
            return bad("sgs.refresh_batches must be >= 1".into());
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return bad(format!("sgs.k must be > 0, got {}", self.k));
        }
        if !(self.epsilon_floor.is_finite() && self.epsilon_floor > 0.0) {
            return bad(format!("sgs.epsilon_floor must be > 0, got {}", self.epsilon_floor));
        }
        self.binning
            .validate()
            .map_err(|e| SgsError::Config(format!("sgs binning: {e}")))?;
        match &self.measure {
            Measure::AlphaBeta { alpha, beta } => {
                alpha_beta_scaling(*alpha, *beta).map_err(|e| SgsError::Config(e.to_string()))?;
            }
            Measure::Fixed { matrix } => {
                finalize(matrix, self.epsilon_floor).map_err(|e| SgsError::Config(e.to_string()))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether scalings are recomputed at the start of `epoch`.
    pub fn refreshes_at(&self, epoch: usize) -> bool {
        self.enabled && epoch >= self.warmup_epochs && (epoch - self.warmup_epochs).is_multiple_of(self.refresh_every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub sgs: SgsConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            schedule: ScheduleKind::Constant,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            sgs: SgsConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SgsError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SgsError::Config("train.batch_size must be >= 1".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| SgsError::Config(format!("optimizer: {e}")))?;
        self.schedule_for(1)
            .validate()
            .map_err(|e| SgsError::Config(format!("schedule: {e}")))?;
        self.sgs.validate()
    }

    fn schedule_for(&self, total_steps: usize) -> LearningRateSchedule {
        match self.schedule {
            ScheduleKind::Constant => LearningRateSchedule::constant(self.lr),
            ScheduleKind::CosineAnnealing => LearningRateSchedule::cosine(self.lr, total_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub wall_seconds: f64,
}

/// Scalings produced by one refresh, indexed by conv ordinal.
#[derive(Debug, Clone)]
pub struct Refresh {
    pub scalings: Vec<ScalingMatrix>,
    /// Empty for measures that do not look at data.
    pub dependences: Vec<Option<SpatialDependenceMatrix>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    pub scalings: Vec<ScalingRecord>,
    pub dependences: Vec<DependenceRecord>,
    pub network: Network<T>,
}

fn scaling_for_layer<T: Scalar>(
    maps: &[Tensor4<T>],
    kernel: (usize, usize),
    cfg: &SgsConfig,
) -> Result<(ScalingMatrix, Option<SpatialDependenceMatrix>)> {
    match &cfg.measure {
        Measure::Mi | Measure::Autocorr => {
            let s = if cfg.measure == Measure::Mi {
                spatial_dependence_mi(maps, kernel, &cfg.binning)?
            } else {
                spatial_dependence_autocorr(maps, kernel)?
            };
            let g = finalize(&k_transform(&s, cfg.k)?, cfg.epsilon_floor)?;
            Ok((g, Some(s)))
        }
        Measure::AlphaBeta { alpha, beta } => {
            if kernel != (3, 3) {
                return Err(SgsError::invalid(format!(
                    "alpha/beta scaling is 3x3, layer kernel is {kernel:?}"
                )));
            }
            Ok((alpha_beta_scaling(*alpha, *beta)?, None))
        }
        Measure::Fixed { matrix } => {
            if matrix.shape() != kernel {
                return Err(SgsError::shape(format!(
                    "fixed scaling is {:?}, layer kernel is {kernel:?}",
                    matrix.shape()
                )));
            }
            Ok((finalize(matrix, cfg.epsilon_floor)?, None))
        }
        Measure::Masks { family } => {
            let masks = standard_mask_sets(kernel, *family)?;
            Ok((from_masks(&masks)?.normalized, None))
        }
    }
}

/// Recomputes one scaling per conv layer from `refresh_batches` random
/// batches of the input feature maps, captured in evaluation mode. Layers
/// whose estimator fails fall back to all-ones with a warning.
pub fn refresh_scalings<T: Scalar>(
    net: &mut Network<T>,
    data: &LabeledDataset<T>,
    cfg: &SgsConfig,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Refresh> {
    let convs: Vec<_> = net.conv_layers().into_iter().map(|(i, s, _)| (i, s.kernel)).collect();
    let mut captured: Vec<Vec<Tensor4<T>>> = vec![Vec::new(); convs.len()];
    if cfg.measure.needs_data() && convs.iter().any(|(_, k)| k.0 * k.1 > 1) {
        if data.is_empty() {
            return Err(SgsError::invalid("cannot refresh scalings on an empty dataset"));
        }
        let size = batch_size.min(data.len());
        for _ in 0..cfg.refresh_batches {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            rng.shuffle(&mut idx);
            let batch = data.images().select_outer(&idx[..size]);
            for (slot, x) in captured.iter_mut().zip(net.capture_conv_inputs(&batch)?) {
                slot.push(x);
            }
        }
    }
    let mut scalings = Vec::with_capacity(convs.len());
    let mut dependences = Vec::with_capacity(convs.len());
    for ((layer, kernel), maps) in convs.iter().zip(&captured) {
        if kernel.0 * kernel.1 == 1 {
            scalings.push(ScalingMatrix::identity(kernel.0, kernel.1));
            dependences.push(None);
            continue;
        }
        match scaling_for_layer(maps, *kernel, cfg) {
            Ok((g, s)) => {
                scalings.push(g);
                dependences.push(s);
            }
            Err(e) => {
                log::warn!("conv layer {layer}: scaling refresh failed ({e}); using all-ones");
                scalings.push(ScalingMatrix::identity(kernel.0, kernel.1));
                dependences.push(None);
            }
        }
    }
    Ok(Refresh {
        scalings,
        dependences,
    })
}

/// The network `train` starts from for `seed`.
pub fn init_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    Network::build(spec, &mut SeededRng::stream(seed, 0))
}

/// The stream `train` samples refresh batches from.
pub fn refresh_rng(seed: u64) -> SeededRng {
    SeededRng::stream(seed, 2)
}

/// Fraction of correctly classified samples, evaluated in batches.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &LabeledDataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let x = data.images().slice_outer(start, end)?;
        let logits = net.forward(&x, false)?;
        let k = logits.shape()[1];
        for (s, &label) in data.labels()[start..end].iter().enumerate() {
            let row = &logits.data()[s * k..(s + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Trains a freshly initialized network. Everything except `wall_seconds`
/// is a deterministic function of the config and data.
pub fn train<T: Scalar>(
    spec: &NetworkSpec,
    train_data: &LabeledDataset<T>,
    eval_data: &LabeledDataset<T>,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (c, h, w) = spec.input;
    if train_data.sample_shape() != (c, h, w) {
        return Err(SgsError::shape(format!(
            "network input {:?} does not match data samples {:?}",
            spec.input,
            train_data.sample_shape()
        )));
    }
    if train_data.is_empty() {
        return Err(SgsError::invalid("training set is empty"));
    }
    let classes = spec.classes()?;
    if train_data.class_count() > classes {
        return Err(SgsError::shape(format!(
            "network predicts {classes} classes, data has {}",
            train_data.class_count()
        )));
    }

    let mut order_rng = SeededRng::stream(cfg.seed, 1);
    let mut refresh_rng = refresh_rng(cfg.seed);
    let mut net = init_network::<T>(spec, cfg.seed)?;
    let mut states: Vec<OptimizerState<T>> = net
        .params_mut()
        .iter()
        .map(|_| OptimizerState::new(cfg.optimizer))
        .collect();

    let n = train_data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = cfg.schedule_for(cfg.epochs * batches_per_epoch);
    let mut current: Option<Vec<ScalingMatrix>> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut scaling_history = Vec::new();
    let mut dependence_history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.sgs.refreshes_at(epoch) {
            let r = refresh_scalings(&mut net, train_data, &cfg.sgs, cfg.batch_size, &mut refresh_rng)?;
            for (layer, g) in r.scalings.iter().enumerate() {
                scaling_history.push(g.record(layer, epoch));
            }
            for (layer, s) in r.dependences.iter().enumerate() {
                if let Some(s) = s {
                    dependence_history.push(s.record(layer, epoch));
                }
            }
            current = Some(r.scalings);
        }

        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_data.images().select_outer(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_data.labels()[i]).collect();
            let out = net.loss_and_backward(&x, &labels)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(SgsError::Numeric(format!(
                    "loss became {loss} at epoch {epoch}, step {step} (lr {})",
                    schedule.lr(step)
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += out.correct;
            let lr = schedule.lr(step);
            for (p, state) in net.params_mut().into_iter().zip(&mut states) {
                let scaling = match (p.role, p.conv_index, current.as_ref()) {
                    (ParamRole::ConvWeight, Some(ci), Some(gs)) if p.value.spatial() != (1, 1) => {
                        Some(gs[ci].matrix())
                    }
                    _ => None,
                };
                state.step(p.value, p.grad, scaling, cfg.sgs.scaling_position, lr)?;
            }
            step += 1;
        }
        let eval_acc = evaluate(&mut net, eval_data, cfg.batch_size.max(64))?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            eval_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train_acc {:.4} eval_acc {:.4} ({:.2}s)",
            m.train_loss,
            m.train_acc,
            m.eval_acc,
            m.wall_seconds
        );
        metrics.push(m);
    }
    Ok(TrainOutcome {
        metrics,
        scalings: scaling_history,
        dependences: dependence_history,
        network: net,
    })
}

/// `mean_{co,ci} |W[co, ci, :, :]|`, divided by its own mean.
pub fn kernel_magnitude_matrix<T: Scalar>(w: &Tensor4<T>) -> Result<KernelMatrix> {
    let [co, ci, kh, kw] = w.shape();
    if w.is_empty() {
        return Err(SgsError::shape("empty weight tensor"));
    }
    let plane = kh * kw;
    let mut acc = vec![0.0; plane];
    for (i, v) in w.data().iter().enumerate() {
        acc[i % plane] += v.as_f64().abs();
    }
    let count = (co * ci) as f64;
    let m = KernelMatrix::new(kh, kw, acc.into_iter().map(|v| v / count).collect())?;
    let mean = m.mean();
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(SgsError::Numeric(
            "kernel magnitude matrix is degenerate (zero mean)".into(),
        ));
    }
    Ok(m.map(|v| v / mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    #[test]
    fn refresh_schedule() {
        let cfg = SgsConfig::default();
        let at: Vec<usize> = (0..17).filter(|&e| cfg.refreshes_at(e)).collect();
        assert_eq!(at, vec![1, 6, 11, 16]);
        assert!(!(0..20).any(|e| SgsConfig::disabled().refreshes_at(e)));
        let no_warmup = SgsConfig {
            warmup_epochs: 0,
            refresh_every: 1,
            ..SgsConfig::default()
        };
        assert!((0..4).all(|e| no_warmup.refreshes_at(e)));
    }

    #[test]
    fn documented_defaults() {
        let cfg = SgsConfig::default();
        assert_eq!((cfg.refresh_every, cfg.refresh_batches, cfg.warmup_epochs), (5, 2, 1));
        assert_eq!(cfg.k, 5.0);
        assert_eq!(cfg.binning.bins, 32);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainingConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sgs.refresh_every = 0;
        assert!(cfg.validate().is_err());
        cfg.sgs.refresh_every = 1;
        cfg.sgs.k = 0.0;
        assert!(cfg.validate().is_err());
        cfg.sgs.k = 5.0;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn magnitude_examples() {
        let w = Tensor4::<f64>::full([2, 3, 3, 3], -0.7);
        assert!(kernel_magnitude_matrix(&w).unwrap().values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let w = Tensor4::<f64>::from_fn([2, 2, 3, 3], |[_, _, _, c]| if c == 1 { 2.0 } else { 1.0 });
        let m = kernel_magnitude_matrix(&w).unwrap();
        assert!((m.mean() - 1.0).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.5).abs() < 1e-15);
        assert!((m.get(2, 0) - 0.75).abs() < 1e-15);
        assert!(kernel_magnitude_matrix(&Tensor4::<f64>::zeros([1, 1, 3, 3])).is_err());
    }

    fn tiny() -> (NetworkSpec, LabeledDataset<f64>) {
        let spec = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![
                "conv 4 3x3 relu".parse().unwrap(),
                "maxpool".parse().unwrap(),
                "flatten".parse().unwrap(),
                "dense 3".parse().unwrap(),
            ],
        };
        (spec, synthetic_dataset(48, (1, 8, 8), 3, 1, 5).unwrap())
    }

    #[test]
    fn fixed_ones_refresh() {
        let (spec, data) = tiny();
        let mut net = Network::<f64>::build(&spec, &mut SeededRng::new(0)).unwrap();
        let cfg = SgsConfig {
            measure: Measure::Fixed {
                matrix: KernelMatrix::ones(3, 3),
            },
            ..SgsConfig::default()
        };
        let r = refresh_scalings(&mut net, &data, &cfg, 8, &mut SeededRng::new(1)).unwrap();
        assert!(r.scalings.iter().all(|g| g.is_identity()));
    }

    #[test]
    fn mismatched_measure_degrades_to_ones() {
        let (spec, data) = tiny();
        let mut net = Network::<f64>::build(&spec, &mut SeededRng::new(0)).unwrap();
        let cfg = SgsConfig {
            measure: Measure::Fixed {
                matrix: KernelMatrix::ones(5, 5),
            },
            ..SgsConfig::default()
        };
        let r = refresh_scalings(&mut net, &data, &cfg, 8, &mut SeededRng::new(1)).unwrap();
        assert!(r.scalings[0].is_identity());
    }

    #[test]
    fn training_is_deterministic_and_identity_neutral() {
        let (spec, data) = tiny();
        let base = TrainingConfig {
            epochs: 3,
            batch_size: 8,
            sgs: SgsConfig::disabled(),
            ..TrainingConfig::default()
        };
        let a = train(&spec, &data, &data, &base).unwrap();
        let b = train(&spec, &data, &data, &base).unwrap();
        let ones = TrainingConfig {
            sgs: SgsConfig {
                measure: Measure::Fixed {
                    matrix: KernelMatrix::ones(3, 3),
                },
                refresh_every: 1,
                warmup_epochs: 0,
                ..SgsConfig::default()
            },
            ..base.clone()
        };
        let c = train(&spec, &data, &data, &ones).unwrap();
        let strip = |o: &TrainOutcome<f64>| -> Vec<(f64, f64, f64)> {
            o.metrics.iter().map(|m| (m.train_loss, m.train_acc, m.eval_acc)).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(strip(&a), strip(&c));
        let (mut na, mut nc) = (a.network, c.network);
        assert_eq!(na.export_weights(), nc.export_weights());
        assert_eq!(c.scalings.len(), 3);
    }

    #[test]
    fn mi_training_exports_valid_scalings() {
        let (spec, data) = tiny();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 8,
            sgs: SgsConfig {
                refresh_every: 1,
                warmup_epochs: 0,
                ..SgsConfig::default()
            },
            ..TrainingConfig::default()
        };
        let out = train(&spec, &data, &data, &cfg).unwrap();
        assert_eq!(out.scalings.len(), 2);
        assert_eq!(out.dependences.len(), 2);
        for r in &out.scalings {
            let g = r.to_scaling().unwrap();
            assert!(g.min() > 0.0);
        }
    }

    #[test]
    fn shape_mismatch_fails_before_training() {
        let (mut spec, data) = tiny();
        spec.input = (1, 9, 9);
        assert!(train(&spec, &data, &data, &TrainingConfig::default()).is_err());
    }

    #[test]
    fn huge_lr_reports_numeric_failure() {
        let (spec, data) = tiny();
        let cfg = TrainingConfig {
            epochs: 3,
            lr: 1e200,
            sgs: SgsConfig::disabled(),
            ..TrainingConfig::default()
        };
        let err = train(&spec, &data, &data, &cfg).unwrap_err();
        assert!(matches!(err, SgsError::Numeric(_)), "{err}");
    }
}
