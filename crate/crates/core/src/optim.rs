//! First-order optimizers and the point at which spatial gradient scaling
//! enters them.
//!
//! `Sgd` and `SgdMomentum` (with coupled weight decay) are linear in the
//! current and past weights and gradients:
//!
//! ```text
//! v_t     = mu * v_{t-1} + (G * g_t + wd * W_t)
//! W_{t+1} = W_t - lr_t * v_t
//!         = W_t - lr_t * sum_{tau<=t} mu^(t-tau) * (G * g_tau + wd * W_tau)
//! ```
//!
//! `Adam` and `Adagrad` are not, and carry no reparameterization
//! interpretation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};
use crate::tensor::{KernelMatrix, Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
    Adagrad,
}

impl OptimizerKind {
    /// Whether the update is a linear function of past gradients and weights.
    pub fn is_linear(self) -> bool {
        matches!(self, OptimizerKind::Sgd | OptimizerKind::SgdMomentum)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = SgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(SgsError::invalid(format!(
                "unknown optimizer '{other}' (expected sgd, sgd_momentum, adam, adagrad)"
            ))),
        }
    }
}

/// Where the spatial scaling is applied relative to the optimizer's own
/// arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingPosition {
    /// Scale the raw gradient before momentum, weight decay or moments.
    #[default]
    Pre,
    /// Scale the optimizer's final update right before it is subtracted
    /// (the Adagrad* variant).
    Post,
}

impl FromStr for ScalingPosition {
    type Err = SgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(ScalingPosition::Pre),
            "post" => Ok(ScalingPosition::Post),
            other => Err(SgsError::invalid(format!(
                "unknown scaling position '{other}' (expected pre or post)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            weight_decay,
            ..Self::sgd()
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd()
        }
    }

    pub fn adagrad() -> Self {
        Self {
            kind: OptimizerKind::Adagrad,
            eps: 1e-10,
            ..Self::sgd()
        }
    }

    /// Defaults for `kind`, with the given momentum (ignored unless
    /// `SgdMomentum`) and weight decay.
    pub fn for_kind(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::SgdMomentum => Self::sgd_momentum(momentum, weight_decay),
            OptimizerKind::Adam => Self::adam(),
            OptimizerKind::Adagrad => Self::adagrad(),
        }
        .with_weight_decay(weight_decay)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.momentum) || !finite_nonneg(self.weight_decay) {
            return Err(SgsError::invalid(format!(
                "momentum ({}) and weight decay ({}) must be finite and >= 0",
                self.momentum, self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SgsError::invalid("adam betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(SgsError::invalid("eps must be > 0"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd_momentum(0.9, 1e-4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    CosineAnnealing,
}

impl FromStr for ScheduleKind {
    type Err = SgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "cosine" | "cosine_annealing" => Ok(ScheduleKind::CosineAnnealing),
            other => Err(SgsError::invalid(format!(
                "unknown schedule '{other}' (expected constant or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub kind: ScheduleKind,
    pub initial_lr: f64,
    pub total_steps: usize,
}

impl LearningRateSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            initial_lr: lr,
            total_steps: 0,
        }
    }

    pub fn cosine(lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::CosineAnnealing,
            initial_lr: lr,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(SgsError::invalid(format!(
                "learning rate must be > 0, got {}",
                self.initial_lr
            )));
        }
        if self.kind == ScheduleKind::CosineAnnealing && self.total_steps == 0 {
            return Err(SgsError::invalid("cosine schedule needs total_steps >= 1"));
        }
        Ok(())
    }

    /// `lr_t = lr_0 * (1 + cos(pi t / T)) / 2` for the cosine schedule.
    pub fn lr(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.initial_lr,
            ScheduleKind::CosineAnnealing => {
                let t = step.min(self.total_steps) as f64;
                self.initial_lr * (1.0 + (PI * t / self.total_steps as f64).cos()) / 2.0
            }
        }
    }
}

/// Per-parameter optimizer state. Buffers are allocated lazily on the first
/// step and start at zero.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f64> {
    config: OptimizerConfig,
    /// Velocity (sgd_momentum), first moment (adam) or squared-gradient sum
    /// (adagrad).
    first: Option<Tensor4<T>>,
    /// Second moment (adam only).
    second: Option<Tensor4<T>>,
    step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: None,
            second: None,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Velocity / first-moment / accumulator buffer, if any step has run.
    pub fn first_buffer(&self) -> Option<&Tensor4<T>> {
        self.first.as_ref()
    }

    pub fn second_buffer(&self) -> Option<&Tensor4<T>> {
        self.second.as_ref()
    }

    /// One update of `w` from the raw loss gradient `g`.
    ///
    /// `g` must not already contain weight decay. With `Pre`, `scaling`
    /// multiplies `g` before anything else; decay `wd * W` is added after and
    /// is never scaled. With `Post`, the finished update is scaled instead.
    pub fn step(
        &mut self,
        w: &mut Tensor4<T>,
        g: &Tensor4<T>,
        scaling: Option<&KernelMatrix>,
        position: ScalingPosition,
        lr: f64,
    ) -> Result<()> {
        if w.shape() != g.shape() {
            return Err(SgsError::shape(format!(
                "weight {:?} vs gradient {:?}",
                w.shape(),
                g.shape()
            )));
        }
        let factors = match scaling {
            Some(m) => Some(scaling_factors::<T>(m, w)?),
            None => None,
        };
        let plane = w.spatial().0 * w.spatial().1;
        let factor = |i: usize| factors.as_ref().map(|f| f[i % plane]);

        let cfg = self.config;
        let lr = T::of(lr);
        let wd = T::of(cfg.weight_decay);
        self.step_count += 1;

        // effective gradient for element i, scaling applied in pre mode
        let grad = |i: usize, wi: T| -> T {
            let mut gi = g.data()[i];
            if position == ScalingPosition::Pre {
                if let Some(f) = factor(i) {
                    gi *= f;
                }
            }
            gi + wd * wi
        };
        let post = |i: usize, u: T| -> T {
            match (position, factor(i)) {
                (ScalingPosition::Post, Some(f)) => f * u,
                _ => u,
            }
        };

        match cfg.kind {
            OptimizerKind::Sgd => {
                for i in 0..w.len() {
                    let wi = w.data()[i];
                    let u = post(i, grad(i, wi));
                    w.data_mut()[i] = wi - lr * u;
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = T::of(cfg.momentum);
                let v = self.first.get_or_insert_with(|| Tensor4::zeros(g.shape()));
                for i in 0..w.len() {
                    let wi = w.data()[i];
                    let vi = mu * v.data()[i] + grad(i, wi);
                    v.data_mut()[i] = vi;
                    w.data_mut()[i] = wi - lr * post(i, vi);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
                let eps = T::of(cfg.eps);
                let t = self.step_count as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let m = self.first.get_or_insert_with(|| Tensor4::zeros(g.shape()));
                let v = self.second.get_or_insert_with(|| Tensor4::zeros(g.shape()));
                for i in 0..w.len() {
                    let wi = w.data()[i];
                    let gi = grad(i, wi);
                    let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                    let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let u = (mi / c1) / ((vi / c2).sqrt() + eps);
                    w.data_mut()[i] = wi - lr * post(i, u);
                }
            }
            OptimizerKind::Adagrad => {
                let eps = T::of(cfg.eps);
                let acc = self.first.get_or_insert_with(|| Tensor4::zeros(g.shape()));
                for i in 0..w.len() {
                    let wi = w.data()[i];
                    let gi = grad(i, wi);
                    let si = acc.data()[i] + gi * gi;
                    acc.data_mut()[i] = si;
                    let u = gi / (si.sqrt() + eps);
                    w.data_mut()[i] = wi - lr * post(i, u);
                }
            }
        }
        Ok(())
    }

    /// `step` restricted to the adaptive optimizers.
    pub fn adaptive_step(
        &mut self,
        w: &mut Tensor4<T>,
        g: &Tensor4<T>,
        scaling: Option<&KernelMatrix>,
        position: ScalingPosition,
        lr: f64,
    ) -> Result<()> {
        if self.config.kind.is_linear() {
            return Err(SgsError::invalid(format!(
                "adaptive_step called with linear optimizer {}",
                self.config.kind
            )));
        }
        self.step(w, g, scaling, position, lr)
    }
}

fn scaling_factors<T: Scalar>(m: &KernelMatrix, w: &Tensor4<T>) -> Result<Vec<T>> {
    if m.shape() != w.spatial() {
        return Err(SgsError::shape(format!(
            "scaling {:?} does not match kernel {:?}",
            m.shape(),
            w.spatial()
        )));
    }
    if let Some(bad) = m.values().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(SgsError::invalid(format!(
            "scaling entries must be finite and > 0, found {bad}"
        )));
    }
    Ok(m.values().iter().map(|&v| T::of(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::full([1, 1, 1, 1], v)
    }

    fn random(rng: &mut SeededRng, shape: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    /// Toy loss gradient so that g depends on the current weights.
    fn loss_grad(w: &Tensor4<f64>, target: &Tensor4<f64>) -> Tensor4<f64> {
        Tensor4::from_fn(w.shape(), |idx| {
            let d = w.get(idx) - target.get(idx);
            d + 0.3 * d * d * d
        })
    }

    #[test]
    fn sgd_single_scaled_step() {
        let mut w = scalar(1.0);
        let g = scalar(2.0);
        let scale = KernelMatrix::filled(1, 1, 3.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd());
        st.step(&mut w, &g, Some(&scale), ScalingPosition::Pre, 0.1)
            .unwrap();
        approx::assert_abs_diff_eq!(w.data()[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn ones_scaling_is_bitwise_neutral_for_every_optimizer() {
        let mut rng = SeededRng::new(1);
        let configs = [
            OptimizerConfig::sgd().with_weight_decay(1e-3),
            OptimizerConfig::sgd_momentum(0.9, 1e-4),
            OptimizerConfig::adam().with_weight_decay(1e-4),
            OptimizerConfig::adagrad(),
        ];
        for cfg in configs {
            for pos in [ScalingPosition::Pre, ScalingPosition::Post] {
                let w0 = random(&mut rng, [2, 3, 3, 3]);
                let target = random(&mut rng, [2, 3, 3, 3]);
                let (mut a, mut b) = (w0.clone(), w0.clone());
                let mut sa = OptimizerState::new(cfg);
                let mut sb = OptimizerState::new(cfg);
                let ones = KernelMatrix::ones(3, 3);
                for t in 0..5 {
                    let ga = loss_grad(&a, &target);
                    let gb = loss_grad(&b, &target);
                    let lr = 0.05 / (1.0 + t as f64);
                    sa.step(&mut a, &ga, Some(&ones), pos, lr).unwrap();
                    sb.step(&mut b, &gb, None, pos, lr).unwrap();
                }
                assert_eq!(a, b, "{:?} {:?}", cfg.kind, pos);
            }
        }
    }

    /// Explicit evaluation of `W_{t+1} = W_t - lr_t sum_tau mu^(t-tau) (G g_tau + wd W_tau)`.
    fn unrolled(
        w0: &Tensor4<f64>,
        target: &Tensor4<f64>,
        scale: &KernelMatrix,
        mu: f64,
        wd: f64,
        lrs: &[f64],
    ) -> Tensor4<f64> {
        let mut ws = vec![w0.clone()];
        let mut gs: Vec<Tensor4<f64>> = Vec::new();
        for (t, &lr) in lrs.iter().enumerate() {
            gs.push(loss_grad(&ws[t], target));
            let mut next = ws[t].clone();
            for i in 0..next.len() {
                let s = scale.values()[i % scale.values().len()];
                let mut acc = 0.0;
                for tau in 0..=t {
                    let gamma = mu.powi((t - tau) as i32);
                    let zeta = wd * gamma;
                    acc += gamma * s * gs[tau].data()[i] + zeta * ws[tau].data()[i];
                }
                next.data_mut()[i] -= lr * acc;
            }
            ws.push(next);
        }
        ws.pop().unwrap()
    }

    fn rel_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
        let diff = a.sub(b).unwrap().max_abs();
        diff / b.max_abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn momentum_two_steps_match_unrolled_sum() {
        let w0 = Tensor4::from_vec([1, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let target = Tensor4::from_vec([1, 1, 2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let scale = KernelMatrix::new(2, 2, vec![0.5, 1.5, 1.25, 0.75]).unwrap();
        let cfg = OptimizerConfig::sgd_momentum(0.9, 1e-4);
        let lrs = [0.1, 0.1];
        let mut w = w0.clone();
        let mut st = OptimizerState::new(cfg);
        for &lr in &lrs {
            let g = loss_grad(&w, &target);
            st.step(&mut w, &g, Some(&scale), ScalingPosition::Pre, lr)
                .unwrap();
        }
        let oracle = unrolled(&w0, &target, &scale, 0.9, 1e-4, &lrs);
        assert!(rel_diff(&w, &oracle) <= 1e-14, "{}", rel_diff(&w, &oracle));
    }

    #[test]
    fn linear_optimizers_follow_linear_form_for_fifty_steps() {
        let mut rng = SeededRng::new(99);
        for &(mu, wd) in &[(0.0, 0.0), (0.0, 5e-4), (0.9, 0.0), (0.9, 1e-4), (0.5, 1e-2)] {
            let cfg = if mu == 0.0 {
                OptimizerConfig::sgd().with_weight_decay(wd)
            } else {
                OptimizerConfig::sgd_momentum(mu, wd)
            };
            let w0 = random(&mut rng, [2, 2, 3, 3]);
            let target = random(&mut rng, [2, 2, 3, 3]);
            let scale = KernelMatrix::from_fn(3, 3, |_, _| rng.uniform(0.2, 3.0));
            let sched = LearningRateSchedule::cosine(0.05, 50);
            let lrs: Vec<f64> = (0..50).map(|t| sched.lr(t)).collect();
            let mut w = w0.clone();
            let mut st = OptimizerState::new(cfg);
            for &lr in &lrs {
                let g = loss_grad(&w, &target);
                st.step(&mut w, &g, Some(&scale), ScalingPosition::Pre, lr)
                    .unwrap();
            }
            let oracle = unrolled(&w0, &target, &scale, mu, wd, &lrs);
            let d = rel_diff(&w, &oracle);
            assert!(d <= 1e-10, "mu={mu} wd={wd}: {d}");
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut w = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerConfig::adam());
        st.adaptive_step(&mut w, &scalar(1.0), None, ScalingPosition::Pre, 0.1)
            .unwrap();
        // m_hat = v_hat = 1 -> delta = -lr / (1 + eps)
        approx::assert_abs_diff_eq!(w.data()[0], -0.1, epsilon = 1e-6);
    }

    #[test]
    fn adagrad_post_accumulates_unscaled_gradient() {
        let g = Tensor4::from_vec([1, 1, 1, 2], vec![2.0, -3.0]).unwrap();
        let scale = KernelMatrix::new(1, 2, vec![0.5, 1.5]).unwrap();
        let mut w = Tensor4::zeros([1, 1, 1, 2]);
        let mut st = OptimizerState::new(OptimizerConfig::adagrad());
        st.adaptive_step(&mut w, &g, Some(&scale), ScalingPosition::Post, 0.1)
            .unwrap();
        assert_eq!(st.first_buffer().unwrap().data(), &[4.0, 9.0]);

        let mut st_pre = OptimizerState::new(OptimizerConfig::adagrad());
        let mut w2 = Tensor4::zeros([1, 1, 1, 2]);
        st_pre
            .adaptive_step(&mut w2, &g, Some(&scale), ScalingPosition::Pre, 0.1)
            .unwrap();
        assert_eq!(st_pre.first_buffer().unwrap().data(), &[1.0, 20.25]);
        // post: the update g/sqrt(g^2) = sign(g) is scaled afterwards
        approx::assert_abs_diff_eq!(w.data()[0], -0.05, epsilon = 1e-9);
        approx::assert_abs_diff_eq!(w.data()[1], 0.15, epsilon = 1e-9);
    }

    #[test]
    fn adaptive_step_rejects_linear_kinds() {
        let mut st = OptimizerState::<f64>::new(OptimizerConfig::sgd());
        let mut w = scalar(0.0);
        assert!(st
            .adaptive_step(&mut w, &scalar(1.0), None, ScalingPosition::Pre, 0.1)
            .is_err());
    }

    #[test]
    fn post_scaling_scales_the_momentum_update() {
        let mut w = scalar(1.0);
        let scale = KernelMatrix::filled(1, 1, 2.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd_momentum(0.5, 0.0));
        st.step(&mut w, &scalar(1.0), Some(&scale), ScalingPosition::Post, 0.1)
            .unwrap();
        st.step(&mut w, &scalar(1.0), Some(&scale), ScalingPosition::Post, 0.1)
            .unwrap();
        // velocity 1 then 1.5 (unscaled), updates 0.2 then 0.3
        assert_eq!(st.first_buffer().unwrap().data(), &[1.5]);
        approx::assert_abs_diff_eq!(w.data()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn scaling_validation() {
        let mut st = OptimizerState::<f64>::new(OptimizerConfig::sgd());
        let mut w = Tensor4::zeros([1, 1, 2, 2]);
        let g = Tensor4::ones([1, 1, 2, 2]);
        let wrong = KernelMatrix::ones(3, 3);
        assert!(matches!(
            st.step(&mut w, &g, Some(&wrong), ScalingPosition::Pre, 0.1),
            Err(SgsError::Shape(_))
        ));
        let nonpos = KernelMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            st.step(&mut w, &g, Some(&nonpos), ScalingPosition::Pre, 0.1),
            Err(SgsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn cosine_schedule() {
        let s = LearningRateSchedule::cosine(0.1, 100);
        assert_eq!(s.lr(0), 0.1);
        approx::assert_abs_diff_eq!(s.lr(50), 0.05, epsilon = 1e-15);
        assert!((0..100).all(|t| s.lr(t) > 0.0));
        assert_eq!(LearningRateSchedule::constant(0.3).lr(1000), 0.3);
        assert!(LearningRateSchedule::constant(0.0).validate().is_err());
    }
}
