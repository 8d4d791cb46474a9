//! Feedforward models with explicit forward/backward passes, plus Adam.
//!
//! Parameters of each network live in one flat vector (per layer: weights
//! `out x in` row-major, then biases), so gradients, optimizer state and
//! checkpoints all share that layout.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

/// Added to the norm before dividing so an all-zero pre-activation maps to
/// zero instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

/// Fully connected network; ReLU between layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer (after the previous layer's activation).
    inputs: Vec<Matrix<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix<T>>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![T::zero(); param_count(dims)],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[1] * w[0] + w[1]] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
            off += w[1] * w[0] + w[1];
        }
        Ok(m)
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(offset of weights, offset of biases)` for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.dims[..=l]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum();
        (off, off + self.dims[l + 1] * self.dims[l])
    }

    /// Mutable view of layer `l`'s weight block (row-major `out x in`) and bias.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (w, b) = self.layer_offsets(l);
        let out = self.dims[l + 1];
        let (head, tail) = self.params.split_at_mut(b);
        (&mut head[w..], &mut tail[..out])
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.cols() });
        }
        let layers = self.dims.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut h = x.clone();
        for l in 0..layers {
            let (wo, bo) = self.layer_offsets(l);
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + fan_out];
            let z = Matrix::from_fn(h.rows(), fan_out, |r, o| {
                dot(h.row(r), &w[o * fan_in..(o + 1) * fan_in]) + b[o]
            });
            let next = if l + 1 < layers { z.map(|v| v.max(T::zero())) } else { z.clone() };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Returns `(parameter gradient, input gradient)`.
    pub fn backward(&self, cache: &MlpCache<T>, grad_out: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        let layers = self.dims.len() - 1;
        if cache.pre.len() != layers || cache.inputs[0].cols() != self.input_dim() {
            return Err(Error::CacheMismatch("cache was produced by a different network".into()));
        }
        let rows = cache.inputs[0].rows();
        if grad_out.shape() != (rows, self.output_dim()) {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                (rows, self.output_dim())
            )));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let mut g = grad_out.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                // ReLU: zero gradient where the pre-activation was not positive.
                let z = &cache.pre[l];
                for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let (wo, bo) = self.layer_offsets(l);
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let x = &cache.inputs[l];
            for r in 0..rows {
                let gr = g.row(r);
                let xr = x.row(r);
                for o in 0..fan_out {
                    let go = gr[o];
                    if go == T::zero() {
                        continue;
                    }
                    let gw = &mut grads[wo + o * fan_in..wo + (o + 1) * fan_in];
                    for (gwi, &xi) in gw.iter_mut().zip(xr) {
                        *gwi += go * xi;
                    }
                    grads[bo + o] += go;
                }
            }
            let w = &self.params[wo..bo];
            let mut gin = Matrix::zeros(rows, fan_in);
            for r in 0..rows {
                let gr = g.row(r).to_vec();
                let dst = gin.row_mut(r);
                for (o, &go) in gr.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    for (d, &wv) in dst.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *d += go * wv;
                    }
                }
            }
            g = gin;
        }
        Ok((grads, g))
    }
}

/// Feature extractor: MLP followed by row-wise L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub net: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    net: MlpCache<T>,
    raw: Matrix<T>,
    norms: Vec<T>,
}

impl<T: Scalar> EncoderModel<T> {
    /// `input_dim -> hidden_dims... -> feature_dim`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dims: &[usize], feature_dim: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(feature_dim);
        Ok(Self { net: Mlp::init(&dims, rng)? })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, EncoderCache<T>)> {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let (raw, net) = self.net.forward(x)?;
        let eps = T::lit(NORM_EPS);
        let norms: Vec<T> = raw.row_iter().map(|r| dot(r, r).sqrt()).collect();
        let out = Matrix::from_fn(raw.rows(), raw.cols(), |i, j| raw[(i, j)] / (norms[i] + eps));
        Ok((out, EncoderCache { net, raw, norms }))
    }

    /// Features only.
    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter gradient given the gradient with respect to the normalized
    /// features. Applies the exact Jacobian of `z / (|z| + eps)`.
    pub fn backward(&self, cache: &EncoderCache<T>, grad_features: &Matrix<T>) -> Result<Vec<T>> {
        if grad_features.shape() != cache.raw.shape() {
            return Err(Error::CacheMismatch(format!(
                "feature gradient {:?} vs cached features {:?}",
                grad_features.shape(),
                cache.raw.shape()
            )));
        }
        let eps = T::lit(NORM_EPS);
        let mut g_raw = Matrix::zeros(cache.raw.rows(), cache.raw.cols());
        for i in 0..cache.raw.rows() {
            let z = cache.raw.row(i);
            let g = grad_features.row(i);
            let n = cache.norms[i];
            let denom = n + eps;
            let dst = g_raw.row_mut(i);
            let radial = if n > T::zero() { dot(z, g) / (denom * denom * n) } else { T::zero() };
            for ((d, &gi), &zi) in dst.iter_mut().zip(g).zip(z) {
                *d = gi / denom - zi * radial;
            }
        }
        Ok(self.net.backward(&cache.net, &g_raw)?.0)
    }
}

/// Domain discriminator: `feature_dim -> hidden -> 1`, ReLU hidden layer,
/// linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> DiscriminatorModel<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::init(&[feature_dim, hidden, 1], rng)? })
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<(Vec<T>, MlpCache<T>)> {
        let (out, cache) = self.net.forward(features)?;
        Ok((out.into_vec(), cache))
    }

    pub fn scores(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.forward(features)?.0)
    }

    /// `(parameter gradient, feature gradient)`.
    pub fn backward(&self, cache: &MlpCache<T>, grad_scores: &[T]) -> Result<(Vec<T>, Matrix<T>)> {
        let g = Matrix::from_vec(grad_scores.len(), 1, grad_scores.to_vec())?;
        self.net.backward(cache, &g)
    }
}

/// Linear identity classifier on top of source features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::init(&[feature_dim, classes], rng)? })
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        self.net.forward(features)
    }

    pub fn backward(&self, cache: &MlpCache<T>, grad_logits: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        self.net.backward(cache, grad_logits)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(num_params: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} params, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let one = T::one();
        let t = self.step as i32;
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Role of a network inside a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Encoder = 0,
    Discriminator = 1,
    Classifier = 2,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Encoder),
            1 => Ok(Self::Discriminator),
            2 => Ok(Self::Classifier),
            t => Err(Error::Format(format!("unknown model tag {t}"))),
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DACK";
const CKPT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): magic `DACK`, `u32` version, `u32`
/// model count; per model a `u8` kind tag, `u32` dim count, `u64` dims,
/// `u64` parameter count, then `f64` parameters in the flat layout.
pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, models: &[(ModelKind, &Mlp<T>)]) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(models.len() as u32).to_le_bytes())?;
    for (kind, net) in models {
        w.write_all(&[*kind as u8])?;
        w.write_all(&(net.dims.len() as u32).to_le_bytes())?;
        for &d in &net.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(net.params.len() as u64).to_le_bytes())?;
        for &p in &net.params {
            w.write_all(&p.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(ModelKind, Mlp<T>)>> {
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32_of(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_of(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = ModelKind::from_tag(tag[0])?;
        let ndims = u32_of(&mut r)? as usize;
        let dims = (0..ndims).map(|_| u64_of(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let np = u64_of(&mut r)? as usize;
        let params = (0..np)
            .map(|_| u64_of(&mut r).map(|b| T::lit(f64::from_bits(b))))
            .collect::<Result<Vec<_>>>()?;
        out.push((kind, Mlp::from_params(&dims, params)?));
    }
    Ok(out)
}
