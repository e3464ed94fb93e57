//! Adam, the step-decay learning-rate schedule, and EER early stopping.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, ArrayViewMutD, IxDyn};
use thiserror::Error;

use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("expected {expected} gradient tensors, got {found}")]
    Count { expected: usize, found: usize },
    #[error("tensor {index}: parameter shape {param:?} but gradient shape {grad:?}")]
    Shape { index: usize, param: Vec<usize>, grad: Vec<usize> },
    #[error("non-finite gradient in tensor {0}")]
    NonFinite(usize),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("optimizer state is truncated or malformed")]
    Format,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[ArrayD<T>], &[ArrayD<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update. Validates everything before touching any
    /// parameter, so a failed call leaves params and state unchanged.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: &[ArrayD<T>], lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(OptimError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Count {
                expected: self.m.len(),
                found: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(OptimError::Shape {
                    index: i,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite(i));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2): (T, T) = (cast(c.beta1), cast(c.beta2));
        let eps: T = cast(c.epsilon);
        let bc1: T = cast(1.0 - c.beta1.powi(self.t as i32));
        let bc2: T = cast(1.0 - c.beta2.powi(self.t as i32));
        let lr: T = cast(lr);
        for (((mut p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(self.t)?;
        for x in [self.config.beta1, self.config.beta2, self.config.epsilon] {
            w.write_f64::<LittleEndian>(x)?;
        }
        w.write_u32::<LittleEndian>(self.m.len() as u32)?;
        for t in self.m.iter().chain(&self.v) {
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &x in t.iter() {
                w.write_f64::<LittleEndian>(to_f64(x))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, OptimError> {
        let f = |_| OptimError::Format;
        let t = r.read_u64::<LittleEndian>().map_err(f)?;
        let config = AdamConfig {
            beta1: r.read_f64::<LittleEndian>().map_err(f)?,
            beta2: r.read_f64::<LittleEndian>().map_err(f)?,
            epsilon: r.read_f64::<LittleEndian>().map_err(f)?,
        };
        let n = r.read_u32::<LittleEndian>().map_err(f)? as usize;
        let mut tensors = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let ndim = r.read_u32::<LittleEndian>().map_err(f)? as usize;
            if ndim > 8 {
                return Err(OptimError::Format);
            }
            let dims = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(f)?;
            let len: usize = dims.iter().product();
            let data = (0..len)
                .map(|_| r.read_f64::<LittleEndian>().map(cast::<T>))
                .collect::<Result<Vec<_>, _>>()
                .map_err(f)?;
            tensors.push(ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| OptimError::Format)?);
        }
        let v = tensors.split_off(n);
        Ok(Self { config, m: tensors, v, t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.001,
            decay_factor: 0.95,
            decay_every: 10,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.initial > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return Err(OptimError::Config(
                "schedule needs initial > 0, 0 < decay_factor ≤ 1, decay_every ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// `initial · decay_factor^⌊epoch / decay_every⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.initial * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the eval EER has failed to strictly improve for more than
/// `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn update(&mut self, eer: f64) -> StopDecision {
        match self.best {
            Some(b) if eer >= b || eer.is_nan() => self.since_best += 1,
            _ => {
                self.best = Some(eer);
                self.since_best = 0;
            }
        }
        if self.since_best > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
