//! Parameter storage, layers and the optimizer shared by every trainable module.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{
    backprop::GradStore, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::instrument;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Namespaced, seed-deterministic parameter registry.
///
/// Every parameter's initial value is derived from the store seed and its
/// full name, so construction order never changes the initialization.
/// A frozen store hands out detached tensors and never records gradients.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
    frozen: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .field("dtype", &self.dtype)
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device,
            seed,
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A copy of this store whose parameters are independent, detached tensors.
    pub fn frozen_copy(&self) -> Result<Self> {
        let map = self.inner.lock().expect("param store poisoned");
        let mut out = BTreeMap::new();
        for (k, v) in map.iter() {
            out.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            inner: Arc::new(Mutex::new(out)),
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            frozen: true,
        })
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .keys()
            .cloned()
            .collect()
    }

    /// All `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .get(name)
            .cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Insert (or overwrite in place) a parameter value, e.g. from a checkpoint.
    pub fn insert(&self, name: &str, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        let mut map = self.inner.lock().expect("param store poisoned");
        match map.get(name) {
            Some(v) if v.shape() == value.shape() => v.set(&value)?,
            _ => {
                map.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut map = self.inner.lock().expect("param store poisoned");
        if let Some(v) = map.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.hand_out(v));
        }
        if self.frozen {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = self.hand_out(&var);
        map.insert(name.to_string(), var);
        Ok(out)
    }

    fn hand_out(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(s.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn no_bias(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn zeros(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[out_dim, in_dim], Init::Zeros)?,
            bias: Some(s.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Validation("rank-0 input to linear".into()))?;
        let rows = x.elem_count() / in_dim.max(1);
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    /// Positively homogeneous: `relu(αx) = α·relu(x)` for `α ≥ 0`.
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Silu => x.silu()?,
            Activation::Relu => x.relu()?,
        })
    }
}

/// Two-layer perceptron, SiLU in between unless configured otherwise.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(s: &Scope, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Self::with_activation(s, in_dim, hidden, out_dim, Activation::Silu)
    }

    pub fn with_activation(s: &Scope, in_dim: usize, hidden: usize, out_dim: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, out_dim)?,
            act,
        })
    }

    /// Output layer starts at zero.
    pub fn zero_out(s: &Scope, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::zeros(&s.pp("fc2"), hidden, out_dim)?,
            act: Activation::Silu,
        })
    }

    pub fn first(&self) -> &Linear {
        &self.fc1
    }

    pub fn second(&self) -> &Linear {
        &self.fc2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Const(1.0))?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

struct SoftmaxOp;

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax-rows"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: candle_core::WithDType + num_traits::Float>(src: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
            let (o1, o2) = layout
                .contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
            let src = &src[o1..o2];
            let n = layout.dims().last().copied().unwrap_or(1).max(1);
            let mut out = vec![<T as num_traits::Zero>::zero(); src.len()];
            for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
                let max = row.iter().copied().fold(<T as num_traits::Float>::neg_infinity(), <T as num_traits::Float>::max);
                let mut sum = <T as num_traits::Zero>::zero();
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = num_traits::Float::exp(s - max);
                    sum = sum + *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / sum;
                }
            }
            Ok(out)
        }
        let shape = layout.shape().clone();
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(run(s, layout)?),
            CpuStorage::F64(s) => CpuStorage::F64(run(s, layout)?),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad_res.broadcast_sub(&dot)?)?))
    }
}

/// Numerically stable softmax over the last dimension, differentiable.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxOp)?)
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

/// Attention output plus the row-stochastic attention weights
/// `(B, heads, N_q, N_kv)`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

impl Attention {
    pub fn new(s: &Scope, q_dim: usize, kv_dim: usize, attn_dim: usize, heads: usize) -> Result<Self> {
        Self::build(s, q_dim, kv_dim, attn_dim, heads, false)
    }

    /// Output projection starts at zero so the block begins as a no-op
    /// under a residual connection.
    pub fn zero_out(s: &Scope, q_dim: usize, kv_dim: usize, attn_dim: usize, heads: usize) -> Result<Self> {
        Self::build(s, q_dim, kv_dim, attn_dim, heads, true)
    }

    fn build(s: &Scope, q_dim: usize, kv_dim: usize, attn_dim: usize, heads: usize, zero: bool) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(Error::Validation(format!(
                "attention dim {attn_dim} not divisible by {heads} heads"
            )));
        }
        let o = if zero {
            Linear::zeros(&s.pp("o"), attn_dim, q_dim)?
        } else {
            Linear::new(&s.pp("o"), attn_dim, q_dim)?
        };
        Ok(Self {
            q: Linear::no_bias(&s.pp("q"), q_dim, attn_dim)?,
            k: Linear::no_bias(&s.pp("k"), kv_dim, attn_dim)?,
            v: Linear::no_bias(&s.pp("v"), kv_dim, attn_dim)?,
            o,
            heads,
            dim: attn_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn value_proj(&self) -> &Linear {
        &self.v
    }

    pub fn out_proj(&self) -> &Linear {
        &self.o
    }

    /// `q`: `(B, N_q, q_dim)`, `kv`: `(B, N_kv, kv_dim)`.
    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, kv)?.output)
    }

    pub fn forward_with_weights(&self, q: &Tensor, kv: &Tensor) -> Result<AttentionOutput> {
        let (b, nq, _) = q.dims3()?;
        let nk = kv.dim(1)?;
        let hd = self.dim / self.heads;
        let split = |x: Tensor, n: usize| -> Result<Tensor> {
            Ok(x.reshape((b, n, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let qh = split(self.q.forward(q)?, nq)?;
        let kh = split(self.k.forward(kv)?, nk)?;
        let vh = split(self.v.forward(kv)?, nk)?;
        let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let ctx = weights
            .matmul(&vh)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.dim))?;
        Ok(AttentionOutput {
            output: self.o.forward(&ctx)?,
            weights,
        })
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Decoupled-weight-decay Adam over every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    pub fn restore(&mut self, step: usize, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update from `grads`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Validation("cannot optimize a frozen parameter store".into()));
        }
        instrument::record_optimizer_step();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = match self.moments.get(&name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let theta = var.as_detached_tensor();
            let decayed = (&theta * (1.0 - self.lr * self.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (decayed - (update * self.lr)?)?;
            var.set(&next)?;
            self.moments.insert(name, (m, v));
        }
        Ok(())
    }
}

/// Reverse pass with the gradient-computation counter incremented.
pub fn backward(loss: &Tensor) -> Result<GradStore> {
    instrument::record_backward();
    Ok(loss.backward()?)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of the scalar `f()` against central
/// differences with step `h`, perturbing up to `max_entries` entries of every
/// variable (evenly strided). Variables are restored afterwards. Relative
/// errors use a floor of `1e-7` in the denominator so entries whose true
/// gradient is zero compare absolutely.
pub fn gradient_check(vars: &[Var], f: impl Fn() -> Result<Tensor>, h: f64, max_entries: usize) -> Result<GradCheck> {
    let grads = f()?.backward()?;
    let eval = || -> Result<f64> { Ok(f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for var in vars {
        let original = var.as_tensor().copy()?;
        let shape = original.shape().clone();
        let base: Vec<f64> = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let stride = (base.len() / max_entries.max(1)).max(1);
        for i in (0..base.len()).step_by(stride).take(max_entries) {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), var.device())?.to_dtype(var.dtype())?)?;
            let up = eval()?;
            probe[i] = base[i] - h;
            var.set(&Tensor::from_vec(probe, shape.clone(), var.device())?.to_dtype(var.dtype())?)?;
            let down = eval()?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
        var.set(&original)?;
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store64() -> ParamStore {
        ParamStore::new(7, DType::F64, Device::Cpu)
    }

    #[test]
    fn init_is_order_independent() {
        let a = store64();
        let b = store64();
        let wa = a.root().get("x.w", &[3, 2], Init::Uniform(1.0)).unwrap();
        let _ = b.root().get("y.w", &[5], Init::Uniform(1.0)).unwrap();
        let wb = b.root().get("x.w", &[3, 2], Init::Uniform(1.0)).unwrap();
        assert_eq!(
            wa.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            wb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_composed_form() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1.0, 0.0, 100.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap();
        let reference = candle_nn::ops::softmax(&x, D::Minus1).unwrap();
        let diff = (y.clone() - reference)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-15);
        for row in y.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let base = [0.3f64, -1.2, 0.7, 2.0];
        let weights = Tensor::new(&[0.5f64, -1.0, 2.0, 0.25], &dev).unwrap();
        let f = |v: &[f64]| -> f64 {
            let x = Tensor::new(v, &dev).unwrap();
            (softmax_last(&x).unwrap() * &weights)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let var = Var::new(&base, &dev).unwrap();
        let loss = (softmax_last(var.as_tensor()).unwrap() * &weights)
            .unwrap()
            .sum_all()
            .unwrap();
        let g = loss.backward().unwrap();
        let analytic = g.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base;
            let mut m = base;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn linear_matches_manual_affine_map() {
        let dev = Device::Cpu;
        let w = Tensor::new(&[[1.0f64, 2.0], [0.0, -1.0], [3.0, 1.0]], &dev).unwrap();
        let b = Tensor::new(&[0.5f64, 0.0, -1.0], &dev).unwrap();
        let lin = Linear::from_parts(w, Some(b));
        let x = Tensor::new(&[[[1.0f64, 1.0]], [[2.0, -1.0]]], &dev).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 1, 3]);
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![3.5, -1.0, 3.0, 0.5, 1.0, 4.0]
        );
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let s = store64();
        assert!(Attention::new(&s.root().pp("a"), 8, 8, 10, 4).is_err());
    }

    #[test]
    fn attention_weights_are_probability_rows() {
        let s = store64();
        let att = Attention::new(&s.root().pp("a"), 8, 6, 8, 2).unwrap();
        let q = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0f64, 1.0, (2, 3, 6), &Device::Cpu).unwrap();
        let out = att.forward_with_weights(&q, &kv).unwrap();
        assert_eq!(out.output.dims(), &[2, 5, 8]);
        assert_eq!(out.weights.dims(), &[2, 2, 5, 3]);
        let sums = out.weights.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let min = out.weights.min_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(min >= 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let s = store64();
        let w = s.root().get("w", &[2], Init::Const(1.0)).unwrap();
        let target = Tensor::new(&[0.0f64, 3.0], &Device::Cpu).unwrap();
        let loss = (w - target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&s, &grads).unwrap();
        let v = s.var("w").unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn frozen_store_is_detached_and_refuses_new_params() {
        let s = store64();
        let _ = s.root().get("w", &[2], Init::Const(1.0)).unwrap();
        let f = s.frozen_copy().unwrap();
        let w = f.root().get("w", &[2], Init::Zeros).unwrap();
        assert!(!w.is_variable());
        assert!(f.root().get("missing", &[1], Init::Zeros).is_err());
    }
}
