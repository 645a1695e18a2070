//! Adam and learning-rate schedules.

use std::sync::Mutex;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, DType, InplaceOp2, Layout, Tensor, Var};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0) || !self.lr.is_finite() || !betas_ok || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to `min_ratio · lr` at the last step.
    Cosine { min_ratio: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, max_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { min_ratio } => {
                let progress = if max_steps <= 1 {
                    0.0
                } else {
                    (step.min(max_steps - 1) as f64) / ((max_steps - 1) as f64)
                };
                let floor = base * min_ratio;
                floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: usize,
    pub m: ParameterStore,
    pub v: ParameterStore,
}

#[derive(Debug, Clone)]
enum Moments {
    F32 { m: Vec<f32>, v: Vec<f32> },
    F64 { m: Vec<f64>, v: Vec<f64> },
}

impl Moments {
    fn zeros(var: &Var) -> Result<Self> {
        let n = var.elem_count();
        match var.dtype() {
            DType::F32 => Ok(Moments::F32 {
                m: vec![0.0; n],
                v: vec![0.0; n],
            }),
            DType::F64 => Ok(Moments::F64 {
                m: vec![0.0; n],
                v: vec![0.0; n],
            }),
            other => Err(Error::Config(format!(
                "Adam supports f32/f64 parameters, not {other:?}"
            ))),
        }
    }

    fn to_tensors(&self, var: &Var) -> Result<(Tensor, Tensor)> {
        let (shape, dev) = (var.shape(), var.device());
        Ok(match self {
            Moments::F32 { m, v } => (Tensor::from_slice(m, shape, dev)?, Tensor::from_slice(v, shape, dev)?),
            Moments::F64 { m, v } => (Tensor::from_slice(m, shape, dev)?, Tensor::from_slice(v, shape, dev)?),
        })
    }

    fn from_tensors(var: &Var, m: &Tensor, v: &Tensor) -> Result<Self> {
        let flat = |t: &Tensor| t.to_dtype(var.dtype())?.flatten_all();
        Ok(match var.dtype() {
            DType::F32 => Moments::F32 {
                m: flat(m)?.to_vec1()?,
                v: flat(v)?.to_vec1()?,
            },
            _ => Moments::F64 {
                m: flat(m)?.to_vec1()?,
                v: flat(v)?.to_vec1()?,
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Coefficients {
    lr: f64,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
}

/// Single-pass, in-place update of one parameter tensor and its moments.
struct FusedUpdate<'a> {
    moments: Mutex<&'a mut Moments>,
    c: Coefficients,
}

fn update<T: Float>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], c: &Coefficients) {
    let f = |x: f64| T::from(x).expect("representable");
    let (b1, b2, nb1, nb2) = (f(c.beta1), f(c.beta2), f(1.0 - c.beta1), f(1.0 - c.beta2));
    let (bc1, bc2, eps, lr) = (f(c.bc1), f(c.bc2), f(c.eps), f(c.lr));
    for i in 0..p.len() {
        m[i] = b1 * m[i] + nb1 * g[i];
        v[i] = b2 * v[i] + nb2 * g[i] * g[i];
        p[i] = p[i] - lr * ((m[i] / bc1) / ((v[i] / bc2).sqrt() + eps));
    }
}

impl InplaceOp2 for FusedUpdate<'_> {
    fn name(&self) -> &'static str {
        "adam-update"
    }

    fn cpu_fwd(&self, p: &mut CpuStorage, lp: &Layout, g: &CpuStorage, lg: &Layout) -> candle_core::Result<()> {
        let (Some((p0, p1)), Some((g0, g1))) = (lp.contiguous_offsets(), lg.contiguous_offsets()) else {
            candle_core::bail!("adam-update needs contiguous tensors")
        };
        let mut guard = self.moments.lock().expect("moments lock");
        match (p, g, &mut **guard) {
            (CpuStorage::F32(p), CpuStorage::F32(g), Moments::F32 { m, v }) => {
                update(&mut p[p0..p1], &g[g0..g1], m, v, &self.c)
            }
            (CpuStorage::F64(p), CpuStorage::F64(g), Moments::F64 { m, v }) => {
                update(&mut p[p0..p1], &g[g0..g1], m, v, &self.c)
            }
            _ => candle_core::bail!("adam-update: parameter, gradient and moments differ in dtype"),
        }
        Ok(())
    }
}

/// Adam over a fixed, named parameter list. Parameters that receive no
/// gradient in a step are left untouched (their moments too), while the bias
/// correction follows the optimiser-wide step count.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    moments: Vec<Moments>,
    t: usize,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let moments = params
            .iter()
            .map(|(_, p)| Moments::zeros(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam {
            cfg,
            moments,
            params,
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(k, _)| k.as_str())
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = Coefficients {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            bc1: 1.0 - self.cfg.beta1.powi(self.t as i32),
            bc2: 1.0 - self.cfg.beta2.powi(self.t as i32),
            eps: self.cfg.eps,
        };
        for ((_, var), moments) in self.params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.to_dtype(var.dtype())?.contiguous()?;
            let op = FusedUpdate {
                moments: Mutex::new(moments),
                c,
            };
            var.as_tensor().inplace_op2(&g, &op)?;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let mut m = ParameterStore::default();
        let mut v = ParameterStore::default();
        for ((key, var), mo) in self.params.iter().zip(&self.moments) {
            let (tm, tv) = mo.to_tensors(var)?;
            m.insert(key.clone(), tm);
            v.insert(key.clone(), tv);
        }
        Ok(AdamState { t: self.t, m, v })
    }

    /// Restores moments saved by [`Adam::state`] for the same parameter list.
    pub fn load_state(&mut self, state: &AdamState) -> Result<()> {
        let mut restored = Vec::with_capacity(self.params.len());
        for (key, var) in &self.params {
            let fetch = |src: &ParameterStore| -> Result<Tensor> {
                let t = src.get(key).ok_or_else(|| Error::Load {
                    key: key.clone(),
                    reason: "optimizer moment missing".into(),
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::ShapeMismatch {
                        key: key.clone(),
                        expected: var.dims().to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
                Ok(t.clone())
            };
            restored.push(Moments::from_tensors(var, &fetch(&state.m)?, &fetch(&state.v)?)?);
        }
        self.moments = restored;
        self.t = state.t;
        Ok(())
    }
}
