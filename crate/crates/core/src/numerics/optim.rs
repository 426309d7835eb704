use crate::error::{Error, Result};

use super::{Matrix, Param, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers for one tensor.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One AdamW update of a single tensor; `t` is the 1-based step count.
///
/// Weight decay is decoupled: the parameter is shrunk by `lr · wd` before
/// the bias-corrected Adam step is applied.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut Moments,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    param.same_shape(grad, "adamw_step")?;
    param.same_shape(&state.m, "adamw_step state")?;
    if lr < 0.0 {
        return Err(Error::InvalidParameter(format!("learning rate must be >= 0, got {lr}")));
    }
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        p[i] *= decay;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Floor applied to binarizer scales after every optimizer step.
pub const SCALE_FLOOR: f64 = f64::EPSILON;

/// AdamW over a whole [`ParamStore`].
///
/// Decay applies to weight-like tensors only (see [`ParamKind::decays`]);
/// binarizer scales are clamped to [`SCALE_FLOOR`] after each step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        Self {
            config,
            moments: store.iter().map(|(_, p)| Moments::zeros_like(&p.value)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_where(store, lr, |_| true)
    }

    /// Updates only the parameters selected by `trainable`; the rest are
    /// left untouched, decay included.
    pub fn step_where(&mut self, store: &mut ParamStore, lr: f64, trainable: impl Fn(&Param) -> bool) -> Result<()> {
        // Params added after construction (e.g. a finetuning head) get fresh moments.
        while self.moments.len() < store.len() {
            let p = &store.get(super::ParamId(self.moments.len())).value;
            self.moments.push(Moments::zeros_like(p));
        }
        self.t += 1;
        let c = self.config;
        for (p, st) in store.iter_mut().zip(&mut self.moments) {
            if !trainable(p) {
                continue;
            }
            let wd = if p.kind.decays() { c.weight_decay } else { 0.0 };
            adamw_step(&mut p.value, &p.grad, st, self.t, lr, c.betas, c.eps, wd)?;
            if p.kind == ParamKind::Scale {
                p.value.data_mut().iter_mut().for_each(|a| *a = a.max(SCALE_FLOOR));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn linear_warmup_schedule(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Config(vec![format!(
            "warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})"
        )]));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(peak_lr * (step as f64 / warmup_steps as f64));
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    Ok(peak_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64))
}
