//! Adam with optional decoupled weight decay and global-norm clipping.

use crate::error::{NumError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<F>>,
    second_moment: Vec<Tensor<F>>,
    step_count: u64,
}

/// Norms observed during one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    /// Multiplier applied by clipping (1 when not clipped).
    pub clip_scale: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(Tensor::zeros_like).collect(),
            second_moment: params.iter().map(Tensor::zeros_like).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<F>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<F>] {
        &self.second_moment
    }
}

/// Global L2 norm over the present gradients.
pub fn global_norm<F: Real>(grads: &[Option<Tensor<F>>]) -> f64 {
    grads.iter().flatten().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Applies one update. Parameters whose gradient is `None` are frozen: they
/// are neither decayed nor moved, and their moments stay untouched.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    names: &[String],
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
) -> Result<StepStats> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() || params.len() != names.len() {
        return Err(NumError::OptimizerMismatch(format!(
            "{} params, {} names, {} grads, {} moments",
            params.len(),
            names.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(NumError::OptimizerMismatch(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(NumError::NonFiniteGradient { name: name.clone() });
            }
        }
    }

    let cfg = &state.config;
    let grad_norm = global_norm(grads);
    let clip_scale = match cfg.grad_clip_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (lr, b1, b2, eps) = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let decay: F = lit(1.0 - lr * cfg.weight_decay);
    let (scale, lr_f, eps_f): (F, F, F) = (lit(clip_scale), lit(lr), lit(eps));
    let (b1_f, b2_f, bc1_f, bc2_f): (F, F, F, F) = (lit(b1), lit(b2), lit(bc1), lit(bc2));
    let (ob1, ob2) = (F::one() - b1_f, F::one() - b2_f);

    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j] * scale;
            if cfg.weight_decay != 0.0 {
                p[j] *= decay;
            }
            m[j] = b1_f * m[j] + ob1 * gj;
            v[j] = b2_f * v[j] + ob2 * gj * gj;
            let mhat = m[j] / bc1_f;
            let vhat = v[j] / bc2_f;
            p[j] -= lr_f * mhat / (vhat.sqrt() + eps_f);
        }
    }
    Ok(StepStats { grad_norm, clip_scale })
}
