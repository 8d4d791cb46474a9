//! Camera-gap estimation and positive-pair weights.
//!
//! The gap between two cameras is the squared maximum mean discrepancy of
//! their feature sets under a Gaussian kernel. Gaps are min-max normalized
//! and every positive pair `(i, j)` is weighted by `gap(cam_i, cam_j) + w`,
//! where `w = 1 - mean gap over positive pairs` makes the average weight 1.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::label_prediction::AnnotationMatrix;
use crate::linalg::{euclidean, Matrix};
use crate::scalar::Scalar;

fn gaussian<T: Scalar>(a: &[T], b: &[T], two_h2: T) -> T {
    let d = euclidean(a, b);
    (-(d * d) / two_h2).exp()
}

/// Mean kernel value within one set; unbiased (off-diagonal) when it has at
/// least two members.
fn within<T: Scalar>(x: &Matrix<T>, two_h2: T) -> T {
    let n = x.rows();
    if n == 1 {
        return gaussian(x.row(0), x.row(0), two_h2);
    }
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += gaussian(x.row(i), x.row(j), two_h2);
            }
        }
    }
    s / T::count(n * (n - 1))
}

/// Squared MMD with kernel `exp(-|a-b|^2 / (2 h^2))`, clamped at zero.
pub fn mmd_gap<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, bandwidth: T) -> Result<T> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptySet);
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), got: b.cols() });
    }
    if !(bandwidth > T::zero()) {
        return Err(Error::InvalidConfig("bandwidth must be positive".into()));
    }
    let two_h2 = T::lit(2.0) * bandwidth * bandwidth;
    let mut cross = T::zero();
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += gaussian(a.row(i), b.row(j), two_h2);
        }
    }
    cross /= T::count(a.rows() * b.rows());
    let v = within(a, two_h2) + within(b, two_h2) - T::lit(2.0) * cross;
    Ok(v.max(T::zero()))
}

/// Median pairwise Euclidean distance. Above `cap` rows a deterministic
/// stride subsample is used.
pub fn median_pairwise_distance<T: Scalar>(x: &Matrix<T>, cap: usize) -> Result<T> {
    if x.rows() < 2 {
        return Err(Error::EmptySet);
    }
    let stride = x.rows().div_ceil(cap.max(2));
    let idx: Vec<usize> = (0..x.rows()).step_by(stride).collect();
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(euclidean(x.row(i), x.row(j)));
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
    Ok(*m)
}

/// Maps off-diagonal entries affinely onto `[0, 1]`; an all-equal table maps
/// to all zeros.
pub fn normalize_gaps<T: Scalar>(raw: &Matrix<T>) -> Result<Matrix<T>> {
    let c = raw.rows();
    if c < 2 || raw.cols() != c {
        return Err(Error::ShapeMismatch(format!("gap table must be CxC with C>=2, got {:?}", raw.shape())));
    }
    let off = || (0..c).flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)));
    let lo = off().map(|(i, j)| raw[(i, j)]).fold(T::infinity(), T::min);
    let hi = off().map(|(i, j)| raw[(i, j)]).fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    Ok(Matrix::from_fn(c, c, |i, j| {
        if i == j || span <= T::zero() {
            T::zero()
        } else {
            (raw[(i, j)] - lo) / span
        }
    }))
}

/// Mean normalized gap over positive pairs.
pub fn mean_positive_gap<T: Scalar>(gaps: &Matrix<T>, a: &AnnotationMatrix, camera_ids: &[usize]) -> Result<T> {
    if camera_ids.len() != a.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: camera_ids.len() });
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (i, j) in a.pairs() {
        sum += gaps[(camera_ids[i], camera_ids[j])];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoPositivePairs);
    }
    Ok(sum / T::count(count))
}

/// `w = 1 - mean positive-pair gap`.
pub fn base_weight<T: Scalar>(gaps: &Matrix<T>, a: &AnnotationMatrix, camera_ids: &[usize]) -> Result<T> {
    Ok(T::one() - mean_positive_gap(gaps, a, camera_ids)?)
}

/// Normalized camera gaps plus the base weight derived from the current
/// annotation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraGapTable<T> {
    pub gap: Matrix<T>,
    pub base_weight: T,
    pub mean_gap: T,
}

impl<T: Scalar> CameraGapTable<T> {
    /// Measures all camera-pair gaps on `features` using a single pooled
    /// median-heuristic bandwidth. `base_weight` starts at 1 until an
    /// annotation is supplied.
    pub fn estimate(features: &Matrix<T>, camera_ids: &[usize], num_cameras: usize) -> Result<Self> {
        if camera_ids.len() != features.rows() {
            return Err(Error::DimensionMismatch { expected: features.rows(), got: camera_ids.len() });
        }
        if num_cameras < 2 {
            return Err(Error::InvalidConfig("need at least two cameras".into()));
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_cameras];
        for (i, &c) in camera_ids.iter().enumerate() {
            if c >= num_cameras {
                return Err(Error::IndexOutOfRange { index: c, len: num_cameras });
            }
            groups[c].push(i);
        }
        let mut bandwidth = median_pairwise_distance(features, 2000)?;
        if !(bandwidth > T::zero()) {
            bandwidth = T::one();
        }
        let sets: Vec<Matrix<T>> = groups.iter().map(|g| features.select_rows(g)).collect();
        let mut raw = Matrix::zeros(num_cameras, num_cameras);
        for a in 0..num_cameras {
            for b in a + 1..num_cameras {
                let g = if sets[a].rows() == 0 || sets[b].rows() == 0 {
                    T::zero()
                } else {
                    mmd_gap(&sets[a], &sets[b], bandwidth)?
                };
                raw[(a, b)] = g;
                raw[(b, a)] = g;
            }
        }
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &Matrix<T>) -> Result<Self> {
        Ok(Self {
            gap: normalize_gaps(raw)?,
            base_weight: T::one(),
            mean_gap: T::zero(),
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.gap.rows()
    }

    /// Recomputes `mean_gap` and `base_weight` for `a`. Without positive pairs
    /// the weighting falls back to uniform (`w = 1`).
    pub fn rebase(&mut self, a: &AnnotationMatrix, camera_ids: &[usize]) -> Result<()> {
        match mean_positive_gap(&self.gap, a, camera_ids) {
            Ok(m) => {
                self.mean_gap = m;
                self.base_weight = T::one() - m;
                Ok(())
            }
            Err(Error::NoPositivePairs) => {
                self.mean_gap = T::zero();
                self.base_weight = T::one();
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Weight `gap(c_i, c_j) + w` for a positive pair across cameras `ci`, `cj`.
    #[inline]
    pub fn pair_weight(&self, ci: usize, cj: usize) -> T {
        self.gap[(ci, cj)] + self.base_weight
    }

    /// CSV: `camera_a,camera_b,gap` per ordered pair, then `base_weight` and
    /// `mean_gap` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["camera_a", "camera_b", "gap"])?;
        for a in 0..self.num_cameras() {
            for b in 0..self.num_cameras() {
                out.write_record([a.to_string(), b.to_string(), self.gap[(a, b)].to_string()])?;
            }
        }
        out.write_record(["base_weight", "", &self.base_weight.to_string()])?;
        out.write_record(["mean_gap", "", &self.mean_gap.to_string()])?;
        out.flush()?;
        Ok(())
    }
}
