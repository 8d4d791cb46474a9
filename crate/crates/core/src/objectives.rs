//! Training objectives with closed-form gradients.
//!
//! * global optimization (GO): each live anchor against every cached
//!   positive and negative in the memory bank, with camera-gap weights;
//! * local optimization (LO): every other instance in the batch is a negative;
//! * discriminator / domain-confusion squared-error objectives;
//! * source identity cross-entropy.
//!
//! Similarities are `exp(a·b / beta)`. Everything is evaluated in the log
//! domain so `beta = 0.05` with near-parallel features stays finite.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::camera_weighting::CameraGapTable;
use crate::embedding::FeatureBank;
use crate::error::{Error, Result};
use crate::label_prediction::AnnotationMatrix;
use crate::linalg::{axpy, dot, Matrix};
use crate::scalar::{log_sum_exp, sigmoid, softplus, Scalar};

/// Identifies which input a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Anchors,
    Batch,
    SourceScores,
    TargetScores,
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub gradients: BTreeMap<Block, Matrix<T>>,
}

impl<T: Scalar> LossResult<T> {
    fn new(value: T) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
        }
    }

    fn with(mut self, block: Block, g: Matrix<T>) -> Self {
        self.gradients.insert(block, g);
        self
    }

    pub fn gradient(&self, block: Block) -> Option<&Matrix<T>> {
        self.gradients.get(&block)
    }

    /// Removes and returns a gradient block; panics if the loss never produced it.
    pub fn take(&mut self, block: Block) -> Matrix<T> {
        self.gradients
            .remove(&block)
            .unwrap_or_else(|| panic!("loss has no {block:?} gradient"))
    }
}

fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    if beta > T::zero() && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::BetaNonPositive)
    }
}

/// Decomposition of one anchor's GO gradient: `∂ℓ/∂v = Σ c_k · bank_k`.
///
/// Positive coefficients are pulls (always < 0), negative ones pushes (> 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GoCoefficients<T> {
    pub value: T,
    pub positive: Vec<(usize, T)>,
    pub negative: Vec<(usize, T)>,
}

/// GO loss and gradient coefficients for a single anchor `v` whose own bank
/// row is `own`. The anchor's own row is neither positive nor negative.
pub fn go_anchor_coefficients<T: Scalar>(
    v: &[T],
    own: usize,
    bank: &FeatureBank<T>,
    a: &AnnotationMatrix,
    gaps: &CameraGapTable<T>,
    beta: T,
) -> Result<GoCoefficients<T>> {
    check_beta(beta)?;
    if a.len() != bank.len() {
        return Err(Error::BankMismatch(format!(
            "annotation covers {} samples, bank holds {}",
            a.len(),
            bank.len()
        )));
    }
    if own >= bank.len() {
        return Err(Error::IndexOutOfRange { index: own, len: bank.len() });
    }
    if v.len() != bank.dim() {
        return Err(Error::DimensionMismatch { expected: bank.dim(), got: v.len() });
    }
    let positives = a.positives(own);
    if positives.is_empty() {
        return Ok(GoCoefficients {
            value: T::zero(),
            positive: Vec::new(),
            negative: Vec::new(),
        });
    }
    let cams = bank.camera_ids();
    let logits: Vec<T> = (0..bank.len()).map(|k| dot(v, bank.row(k)) / beta).collect();
    let negatives: Vec<usize> = (0..bank.len())
        .filter(|&k| k != own && !a.is_positive(own, k))
        .collect();
    // log S_n
    let log_sn = log_sum_exp(negatives.iter().map(|&k| logits[k]));
    let scale = T::one() / T::count(positives.len());

    let mut value = T::zero();
    let mut push_total = T::zero();
    let mut positive = Vec::with_capacity(positives.len());
    for &j in positives {
        let w = gaps.pair_weight(cams[own], cams[j]);
        // log(1 + S_n / sim_j) = softplus(log S_n - z_j)
        let r = log_sn - logits[j];
        value += w * softplus(r);
        // S_n / (sim_j + S_n)
        let share = sigmoid(r);
        positive.push((j, -scale * w * share / beta));
        push_total += w * share;
    }
    let negative = if negatives.is_empty() {
        Vec::new()
    } else {
        negatives
            .iter()
            .map(|&k| (k, scale * push_total * (logits[k] - log_sn).exp() / beta))
            .collect()
    };
    Ok(GoCoefficients {
        value: value * scale,
        positive,
        negative,
    })
}

/// Global optimization loss summed over all anchors.
///
/// `anchor_indices[r]` is the bank row of live feature `anchors.row(r)`.
/// Gradients flow to the live anchors only; bank rows are constants. Anchors
/// without positive pairs contribute nothing.
pub fn go_loss<T: Scalar>(
    anchors: &Matrix<T>,
    anchor_indices: &[usize],
    bank: &FeatureBank<T>,
    a: &AnnotationMatrix,
    gaps: &CameraGapTable<T>,
    beta: T,
) -> Result<LossResult<T>> {
    check_beta(beta)?;
    if anchor_indices.len() != anchors.rows() {
        return Err(Error::BankMismatch(format!(
            "{} anchors but {} bank indices",
            anchors.rows(),
            anchor_indices.len()
        )));
    }
    let mut grad = Matrix::zeros(anchors.rows(), bank.dim());
    let mut value = T::zero();
    for (r, &own) in anchor_indices.iter().enumerate() {
        let c = go_anchor_coefficients(anchors.row(r), own, bank, a, gaps, beta)?;
        value += c.value;
        let g = grad.row_mut(r);
        for &(k, coef) in c.positive.iter().chain(&c.negative) {
            axpy(g, coef, bank.row(k));
        }
    }
    Ok(LossResult::new(value).with(Block::Anchors, grad))
}

/// Symmetric K×K mask of pairs that are *not* negatives for LO (the
/// diagonal and augmented siblings of the same instance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    k: usize,
    bits: Vec<bool>,
}

impl PairMask {
    /// Only the diagonal is masked.
    pub fn diagonal(k: usize) -> Self {
        Self::from_instance_ids(&(0..k).collect::<Vec<_>>())
    }

    /// Masks every pair that shares an instance id.
    pub fn from_instance_ids(ids: &[usize]) -> Self {
        let k = ids.len();
        let bits = (0..k * k).map(|x| ids[x / k] == ids[x % k]).collect();
        Self { k, bits }
    }

    pub fn from_bits(k: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != k * k {
            return Err(Error::ShapeMismatch(format!("mask needs {} entries", k * k)));
        }
        for i in 0..k {
            if !bits[i * k + i] {
                return Err(Error::ShapeMismatch("mask diagonal must be true".into()));
            }
            for j in 0..k {
                if bits[i * k + j] != bits[j * k + i] {
                    return Err(Error::ShapeMismatch("mask must be symmetric".into()));
                }
            }
        }
        Ok(Self { k, bits })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    #[inline]
    pub fn masked(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.k + j]
    }

    /// Reorders rows and columns: new index `r` refers to old `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k;
        let bits = (0..k * k).map(|x| self.masked(perm[x / k], perm[x % k])).collect();
        Self { k, bits }
    }
}

/// Per-row LO decomposition: `(value_i, [(j, coef_ij)])` where the push on
/// `v_i` from negative `v_j` is `coef_ij · v_j`.
pub fn lo_row_coefficients<T: Scalar>(batch: &Matrix<T>, mask: &PairMask, i: usize, beta: T) -> (T, Vec<(usize, T)>) {
    let v = batch.row(i);
    let negs: Vec<(usize, T)> = (0..batch.rows())
        .filter(|&j| !mask.masked(i, j))
        .map(|j| (j, dot(v, batch.row(j)) / beta))
        .collect();
    if negs.is_empty() {
        return (T::zero(), Vec::new());
    }
    // log(1 + S_i)
    let log_s = log_sum_exp(negs.iter().map(|&(_, z)| z));
    let log_one_plus = softplus(log_s);
    let coefs = negs
        .into_iter()
        .map(|(j, z)| (j, (z - log_one_plus).exp() / beta))
        .collect();
    (log_one_plus, coefs)
}

/// Local optimization loss: `Σ_i log(1 + Σ_{j unmasked} sim(i, j))`.
///
/// The gradient is the total derivative: each feature collects its push as
/// an anchor and its push as another anchor's negative.
pub fn lo_loss<T: Scalar>(batch: &Matrix<T>, mask: &PairMask, beta: T) -> Result<LossResult<T>> {
    check_beta(beta)?;
    if mask.len() != batch.rows() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {0}x{0}, batch has {1} rows",
            mask.len(),
            batch.rows()
        )));
    }
    let mut grad = Matrix::zeros(batch.rows(), batch.cols());
    let mut value = T::zero();
    for i in 0..batch.rows() {
        let (v, coefs) = lo_row_coefficients(batch, mask, i, beta);
        value += v;
        for (j, c) in coefs {
            let vj = batch.row(j).to_vec();
            axpy(grad.row_mut(i), c, &vj);
            let vi = batch.row(i).to_vec();
            axpy(grad.row_mut(j), c, &vi);
        }
    }
    Ok(LossResult::new(value).with(Block::Batch, grad))
}

fn squared_error_loss<T: Scalar>(src: &[T], tgt: &[T], src_target: T, tgt_target: T) -> Result<LossResult<T>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let two = T::lit(2.0);
    let part = |s: &[T], goal: T| {
        let n = T::count(s.len());
        let value = s.iter().map(|&x| (x - goal) * (x - goal)).sum::<T>() / n;
        let grad = Matrix::from_fn(s.len(), 1, |i, _| two * (s[i] - goal) / n);
        (value, grad)
    };
    let (vs, gs) = part(src, src_target);
    let (vt, gt) = part(tgt, tgt_target);
    Ok(LossResult::new(vs + vt)
        .with(Block::SourceScores, gs)
        .with(Block::TargetScores, gt))
}

/// Discriminator objective: source scores toward 1, target scores toward 0.
pub fn dnet_loss<T: Scalar>(scores_src: &[T], scores_tgt: &[T]) -> Result<LossResult<T>> {
    squared_error_loss(scores_src, scores_tgt, T::one(), T::zero())
}

/// Domain-confusion objective for the encoder: every score toward 0.5.
pub fn dim_loss<T: Scalar>(scores_src: &[T], scores_tgt: &[T]) -> Result<LossResult<T>> {
    let half = T::lit(0.5);
    squared_error_loss(scores_src, scores_tgt, half, half)
}

/// Mean softmax cross-entropy with max-shift stabilization.
pub fn ce_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let (k, m) = logits.shape();
    if labels.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label: bad, classes: m });
    }
    if k == 0 {
        return Ok(LossResult::new(T::zero()).with(Block::Logits, Matrix::zeros(0, m)));
    }
    let inv_k = T::one() / T::count(k);
    let mut grad = Matrix::zeros(k, m);
    let mut value = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        value += lse - row[y];
        let g = grad.row_mut(i);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (row[c] - lse).exp() * inv_k;
        }
        g[y] -= inv_k;
    }
    Ok(LossResult::new(value * inv_k).with(Block::Logits, grad))
}
