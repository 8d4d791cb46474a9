//! Embedding primitives: normalization, the exponential similarity kernel,
//! and the L2-normalized memory bank of target features.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::scalar::Scalar;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Format(format!("unknown domain tag {other:?}"))),
        }
    }
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n.as_f64() < ZERO_NORM {
        return Err(Error::ZeroVector(0));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) -> bool {
    let n = norm(v);
    if n.as_f64() < ZERO_NORM {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Normalizes every row; fails on the first zero row.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        if !normalize_in_place(out.row_mut(i)) {
            return Err(Error::ZeroVector(i));
        }
    }
    Ok(out)
}

/// `exp(a·b / beta)`.
#[inline]
pub fn exp_similarity<T: Scalar>(a: &[T], b: &[T], beta: T) -> T {
    (dot(a, b) / beta).exp()
}

/// All dot products between rows of `a` and rows of `b`.
pub fn pairwise_cosine<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul_t(b)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochClock {
    pub epoch: usize,
    pub iteration: usize,
}

impl EpochClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn tick(&mut self) {
        self.iteration += 1;
    }
}

/// Blend weight for fresh features: `max(0, (100 - epoch) / epoch)`.
pub fn bank_blend_weight(epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::EpochZero);
    }
    Ok(((100.0 - epoch as f64) / epoch as f64).max(0.0))
}

/// Cached unit-norm features for the whole target set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank<T> {
    rows: Matrix<T>,
    camera_ids: Vec<usize>,
    domains: Vec<Domain>,
}

impl<T: Scalar> FeatureBank<T> {
    pub fn new(features: &Matrix<T>, camera_ids: Vec<usize>, domains: Vec<Domain>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        for len in [camera_ids.len(), domains.len()] {
            if len != features.rows() {
                return Err(Error::DimensionMismatch {
                    expected: features.rows(),
                    got: len,
                });
            }
        }
        Ok(Self {
            rows: normalize_rows(features)?,
            camera_ids,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.rows.row(i)
    }

    pub fn camera_ids(&self) -> &[usize] {
        &self.camera_ids
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    /// `row_i <- normalize(row_i + w_e * fresh_i)` for each selected index.
    ///
    /// A weight of zero (epoch >= 100) leaves the bank untouched. The whole
    /// call is validated before any row is written.
    pub fn update(&mut self, indices: &[usize], fresh: &Matrix<T>, clock: &EpochClock) -> Result<()> {
        let w = T::lit(bank_blend_weight(clock.epoch)?);
        if fresh.rows() != indices.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: fresh.rows(),
            });
        }
        if fresh.rows() > 0 && fresh.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: fresh.cols(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        if w == T::zero() {
            return Ok(());
        }
        for (k, &i) in indices.iter().enumerate() {
            let mut blended = self.rows.row(i).to_vec();
            axpy(&mut blended, w, fresh.row(k));
            // An exactly antiparallel fresh row would cancel; keep the old row then.
            if normalize_in_place(&mut blended) {
                self.rows.row_mut(i).copy_from_slice(&blended);
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_features_csv(w, &self.rows, &self.camera_ids, &self.domains)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (m, cams, doms) = read_features_csv(r)?;
        Self::new(&m, cams, doms)
    }
}

const BIN_MAGIC: &[u8; 4] = b"DAFM";

/// Binary layout: magic `DAFM`, little-endian `u64` column count, then
/// row-major little-endian `f64` values. The row count is implied by length.
pub fn write_features_bin<T: Scalar, W: Write>(mut w: W, m: &Matrix<T>) -> Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for &x in m.as_slice() {
        w.write_all(&x.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features_bin<T: Scalar, R: Read>(mut r: R) -> Result<Matrix<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Format("bad feature-matrix magic".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if cols == 0 || body.len() % (8 * cols) != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of {cols}-column rows",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect::<Vec<_>>();
    Matrix::from_vec(data.len() / cols, cols, data)
}

/// CSV with header `camera,domain,f0,f1,...`, one feature per line.
pub fn write_features_csv<T: Scalar, W: Write>(
    w: W,
    m: &Matrix<T>,
    cameras: &[usize],
    domains: &[Domain],
) -> Result<()> {
    if cameras.len() != m.rows() || domains.len() != m.rows() {
        return Err(Error::DimensionMismatch {
            expected: m.rows(),
            got: cameras.len().min(domains.len()),
        });
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["camera".to_string(), "domain".to_string()];
    header.extend((0..m.cols()).map(|j| format!("f{j}")));
    out.write_record(&header)?;
    for i in 0..m.rows() {
        let mut rec = vec![cameras[i].to_string(), domains[i].as_str().to_string()];
        rec.extend(m.row(i).iter().map(|x| format!("{:e}", x.as_f64())));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_features_csv<T: Scalar, R: Read>(r: R) -> Result<(Matrix<T>, Vec<usize>, Vec<Domain>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "camera" || &headers[1] != "domain" {
        return Err(Error::Format("expected header camera,domain,f0,...".into()));
    }
    let cols = headers.len() - 2;
    let mut data = Vec::new();
    let mut cams = Vec::new();
    let mut doms = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        cams.push(
            rec[0]
                .parse()
                .map_err(|e| Error::Format(format!("camera id: {e}")))?,
        );
        doms.push(Domain::parse(&rec[1])?);
        for field in rec.iter().skip(2) {
            let x: f64 = field
                .parse()
                .map_err(|e| Error::Format(format!("feature value: {e}")))?;
            data.push(T::lit(x));
        }
    }
    let m = Matrix::from_vec(cams.len(), cols, data)?;
    Ok((m, cams, doms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn similarity_examples() {
        let beta = 0.05;
        assert_eq!(exp_similarity(&[1.0, 0.0], &[0.0, 1.0], beta), 1.0);
        let same = exp_similarity(&[0.6, 0.8], &[0.6, 0.8], beta);
        assert!((same / 20f64.exp() - 1.0).abs() < 1e-12);
        assert!((same - 4.851652e8).abs() / 4.851652e8 < 1e-6);
        // a·b = 0.05
        let b = [0.05, (1.0f64 - 0.0025).sqrt()];
        let e = exp_similarity(&[1.0, 0.0], &b, beta);
        assert!((e - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn bank_init_examples() {
        let m = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let bank = FeatureBank::new(&m, vec![0, 1, 0], vec![Domain::Target; 3]).unwrap();
        assert_eq!(bank.row(0), &[1.0, 0.0]);
        assert_eq!(bank.row(1), &[0.0, 1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(bank.row(2), &[h, h], 1e-12));

        let empty = Matrix::<f64>::zeros(0, 2);
        assert!(matches!(
            FeatureBank::new(&empty, vec![], vec![]),
            Err(Error::DimensionMismatch { .. })
        ));

        let one = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let bank = FeatureBank::new(&one, vec![0], vec![Domain::Target]).unwrap();
        assert_eq!(bank.row(0), &[1.0, 0.0]);

        let zero_row = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            FeatureBank::new(&zero_row, vec![0, 0], vec![Domain::Target; 2]),
            Err(Error::ZeroVector(1))
        ));
    }

    fn single_row_bank() -> FeatureBank<f64> {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        FeatureBank::new(&m, vec![0, 1], vec![Domain::Target; 2]).unwrap()
    }

    #[test]
    fn bank_update_examples() {
        let fresh = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();

        let mut bank = single_row_bank();
        bank.update(&[0], &fresh, &EpochClock { epoch: 50, iteration: 0 }).unwrap();
        assert!(close(bank.row(0), &[std::f64::consts::FRAC_1_SQRT_2; 2], 1e-8));
        assert_eq!(bank.row(1), &[0.0, 1.0]);

        let mut bank = single_row_bank();
        bank.update(&[0], &fresh, &EpochClock { epoch: 100, iteration: 0 }).unwrap();
        assert_eq!(bank, single_row_bank());

        let mut bank = single_row_bank();
        bank.update(&[0], &fresh, &EpochClock { epoch: 20, iteration: 0 }).unwrap();
        assert!(close(bank.row(0), &[0.24253563, 0.9701425], 1e-7));
    }

    #[test]
    fn bank_update_errors() {
        let fresh = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let mut bank = single_row_bank();
        assert!(matches!(
            bank.update(&[5], &fresh, &EpochClock { epoch: 1, iteration: 0 }),
            Err(Error::IndexOutOfRange { index: 5, len: 2 })
        ));
        assert!(matches!(
            bank.update(&[0], &fresh, &EpochClock::new()),
            Err(Error::EpochZero)
        ));
    }

    #[test]
    fn blend_weight_clamps() {
        assert_eq!(bank_blend_weight(50).unwrap(), 1.0);
        assert_eq!(bank_blend_weight(100).unwrap(), 0.0);
        assert_eq!(bank_blend_weight(150).unwrap(), 0.0);
        assert!((bank_blend_weight(6).unwrap() - 94.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_cosine_examples() {
        let id = Matrix::<f64>::identity(2);
        assert_eq!(pairwise_cosine(&id, &id).unwrap(), id);
        let a: Matrix<f64> = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let b = Matrix::from_rows(&[[-0.6, -0.8]]).unwrap();
        assert!((pairwise_cosine(&a, &b).unwrap()[(0, 0)] + 1.0).abs() < 1e-15);
        let c = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(pairwise_cosine(&a, &c).is_err());
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let m = Matrix::from_rows(&[[0.25, -1.5, 3.0], [1e-300, 2.0, -0.0]]).unwrap();
        let mut buf = Vec::new();
        write_features_bin(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 6 * 8);
        let back: Matrix<f64> = read_features_bin(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(read_features_bin::<f64, _>(&buf[..buf.len() - 3]).is_err());

        let mut text = Vec::new();
        write_features_csv(&mut text, &m, &[2, 0], &[Domain::Source, Domain::Target]).unwrap();
        let s = String::from_utf8(text.clone()).unwrap();
        assert!(s.starts_with("camera,domain,f0,f1,f2\n2,source,"));
        let (back, cams, doms) = read_features_csv::<f64, _>(&text[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(cams, vec![2, 0]);
        assert_eq!(doms, vec![Domain::Source, Domain::Target]);
    }
}
