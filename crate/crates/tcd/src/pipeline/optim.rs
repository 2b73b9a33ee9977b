//! First-order optimizers over named parameter sets.
//!
//! `step` walks parameters through a caller-supplied visitor (anything that
//! can apply a `FnMut(String, &mut Tensor)` — the model, or a single tensor
//! in tests), clips the *global* gradient norm, and applies either SGD with
//! momentum or Adam. Per-parameter state is keyed by name so it survives
//! checkpointing, and every update is computed in the tensor's own scalar
//! type so a resumed run replays bit-for-bit.

use std::collections::HashMap;

use crate::config::{Config, OptimKind};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone)]
pub struct ParamState<T: Scalar> {
    /// Momentum (SGD) or first-moment (Adam) accumulator.
    pub m: Vec<T>,
    /// Second-moment accumulator; empty under SGD.
    pub v: Vec<T>,
}

// Derived `Default` would demand `T: Default`, which `Scalar` doesn't carry.
impl<T: Scalar> Default for ParamState<T> {
    fn default() -> ParamState<T> {
        ParamState { m: Vec::new(), v: Vec::new() }
    }
}

#[derive(Clone)]
pub struct Optimizer<T: Scalar> {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub step_count: usize,
    pub state: HashMap<String, ParamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &Config) -> Optimizer<T> {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    /// One update over every visited parameter. Returns the pre-clip global
    /// gradient norm. Parameters without a recorded gradient see zero.
    pub fn step<F>(&mut self, mut visit: F) -> Result<f64>
    where
        F: FnMut(&mut dyn FnMut(String, &mut Tensor<T>)),
    {
        let mut entries: Vec<(String, Vec<T>, Vec<T>, Vec<usize>)> = Vec::new();
        visit(&mut |name, t| {
            let g = t.grad().unwrap_or_else(|| vec![T::zero(); t.len()]);
            entries.push((name, t.data().to_vec(), g, t.shape().to_vec()));
        });

        let mut norm_sq = 0.0f64;
        for (_, _, g, _) in &entries {
            for &gi in g {
                let gf = gi.to_f64().unwrap_or(f64::NAN);
                norm_sq += gf * gf;
            }
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                module: "optimizer".into(),
                msg: format!("gradient norm is {norm}"),
            });
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            sc::<T>(self.clip_norm / norm)
        } else {
            T::one()
        };

        self.step_count += 1;
        let lr = sc::<T>(self.lr);
        let mu = sc::<T>(self.momentum);
        let wd = sc::<T>(self.weight_decay);
        let b1 = sc::<T>(ADAM_BETA1);
        let b2 = sc::<T>(ADAM_BETA2);
        let eps = sc::<T>(ADAM_EPS);
        // Bias corrections depend on the global step count.
        let bc1 = T::one() - b1.powi(self.step_count as i32);
        let bc2 = T::one() - b2.powi(self.step_count as i32);

        let mut updates: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, mut data, grad, shape) in entries {
            let n = data.len();
            let st = self.state.entry(name.clone()).or_default();
            if st.m.len() != n {
                st.m = vec![T::zero(); n];
            }
            if self.kind == OptimKind::Adam && st.v.len() != n {
                st.v = vec![T::zero(); n];
            }
            match self.kind {
                OptimKind::Sgd => {
                    for i in 0..n {
                        let g = grad[i] * scale + wd * data[i];
                        st.m[i] = mu * st.m[i] + g;
                        data[i] = data[i] - lr * st.m[i];
                    }
                }
                OptimKind::Adam => {
                    for i in 0..n {
                        let g = grad[i] * scale + wd * data[i];
                        st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                        st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                        let m_hat = st.m[i] / bc1;
                        let v_hat = st.v[i] / bc2;
                        data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if self.lr != 0.0 {
                updates.insert(name, Tensor::parameter(data, &shape)?);
            }
        }

        if !updates.is_empty() {
            visit(&mut |name, t| {
                if let Some(new) = updates.remove(&name) {
                    *t = new;
                }
            });
        }
        Ok(norm)
    }

    /// Accumulator vectors as named rank-1 tensors, sorted, for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let st = &self.state[name];
            let m = Tensor::from_vec(st.m.clone(), &[st.m.len()]).expect("rank-1");
            out.push((format!("optim.m.{name}"), m));
            if !st.v.is_empty() {
                let v = Tensor::from_vec(st.v.clone(), &[st.v.len()]).expect("rank-1");
                out.push((format!("optim.v.{name}"), v));
            }
        }
        out
    }

    /// Restores accumulators written by [`state_tensors`].
    pub fn load_state_tensors(
        &mut self,
        step_count: usize,
        entries: &[(String, Tensor<T>)],
    ) -> Result<()> {
        self.step_count = step_count;
        self.state.clear();
        for (name, t) in entries {
            if let Some(p) = name.strip_prefix("optim.m.") {
                self.state.entry(p.to_string()).or_default().m = t.data().to_vec();
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                self.state.entry(p.to_string()).or_default().v = t.data().to_vec();
            } else {
                return Err(Error::Config(format!("unrecognized optimizer entry {name}")));
            }
        }
        Ok(())
    }
}
