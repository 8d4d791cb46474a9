//! Central finite-difference gradient checking, and a certification suite
//! that runs it over every hand-derived gradient in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera_weighting::CameraGapTable;
use crate::embedding::{Domain, FeatureBank};
use crate::error::{Error, Result};
use crate::label_prediction::AnnotationMatrix;
use crate::linalg::{dot, Matrix};
use crate::models::{ClassifierHead, DiscriminatorModel, EncoderModel};
use crate::objectives::{ce_loss, dim_loss, dnet_loss, go_anchor_coefficients, go_loss, lo_loss, Block, PairMask};
use crate::scalar::log_sum_exp;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Default pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor for relative errors, so coordinates whose true
/// derivative is (near) zero are judged on absolute error instead of
/// amplifying rounding noise from the difference quotient.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Analytic vs numeric derivative for every coordinate of one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against `(f(x + h e_k) - f(x - h e_k)) / 2h` for every
/// coordinate `k`. `f` is evaluated twice at `point` first; any difference
/// in the result is reported as [`Error::NonDeterministicLoss`].
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::DimensionMismatch { expected: point.len(), got: analytic.len() });
    }
    let first = f(point)?;
    let second = f(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicLoss);
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = f(&x)?;
        x[k] = orig - h;
        let down = f(&x)?;
        x[k] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let (worst_coordinate, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (k, e)| if e > best.1 || e.is_nan() { (k, e) } else { best });
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_error,
        worst_coordinate,
        tolerance: tol,
        pass: max_rel_error < tol,
    })
}

/// Gradients the certification suite covers.
pub const CHECKS: [&str; 9] = [
    "go_loss",
    "lo_loss",
    "dnet_loss",
    "dim_loss",
    "ce_loss",
    "encoder_backward",
    "dnet_backward_params",
    "dnet_backward_inputs",
    "classifier_backward",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Doubles the largest analytic coordinate of every instance of the
    /// named check; used as a negative control.
    pub inject_fault: Option<String>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Report of the instance with the largest error.
    pub worst: GradCheckReport,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certification {
    pub options: CertifyOptions,
    pub checks: Vec<CheckSummary>,
    /// Largest relative error of the GO anchor gradient when the negative-pair
    /// coefficient carries an extra positive-similarity factor,
    /// `Σ_j w_ij sim(i,j) / (sim(i,j) + S_n)`, instead of the exact
    /// derivative `Σ_j w_ij / (sim(i,j) + S_n)` used by [`go_loss`].
    pub go_alternative_negative_form_error: f64,
    pub notes: Vec<String>,
    pub pass: bool,
}

/// One random instance: the function, the point and the analytic gradient.
struct Instance {
    f: Box<dyn Fn(&[f64]) -> Result<f64>>,
    point: Vec<f64>,
    analytic: Vec<f64>,
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix<f64> {
    let mut m = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    m
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

struct GoSetup {
    bank: FeatureBank<f64>,
    a: AnnotationMatrix,
    gaps: CameraGapTable<f64>,
    indices: Vec<usize>,
    anchors: Matrix<f64>,
    beta: f64,
}

fn go_setup(rng: &mut ChaCha8Rng) -> Result<GoSetup> {
    let (k, n, d, cams) = (4, 30, 8, 3);
    let bank_rows = unit_rows(rng, n, d);
    let camera_ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..cams)).collect();
    let bank = FeatureBank::new(&bank_rows, camera_ids.clone(), vec![Domain::Target; n])?;
    // Random clusters with some noise points.
    let labels: Vec<Option<usize>> = (0..n)
        .map(|_| if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..5)) })
        .collect();
    let pairs = (0..n).flat_map(|i| {
        let labels = &labels;
        (i + 1..n).filter_map(move |j| match (labels[i], labels[j]) {
            (Some(x), Some(y)) if x == y => Some((i, j)),
            _ => None,
        })
    });
    let a = AnnotationMatrix::from_pairs(n, pairs.collect::<Vec<_>>())?;
    let mut raw = Matrix::zeros(cams, cams);
    for p in 0..cams {
        for q in p + 1..cams {
            let g = rng.random_range(0.0..1.0);
            raw[(p, q)] = g;
            raw[(q, p)] = g;
        }
    }
    let mut gaps = CameraGapTable::from_raw(&raw)?;
    gaps.rebase(&a, &camera_ids)?;
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(k);
    // Live anchors: a perturbed copy of their bank row, renormalized.
    let mut anchors = bank_rows.select_rows(&indices);
    for r in 0..k {
        let noise = gauss_vec(rng, d);
        let row = anchors.row_mut(r);
        for (x, e) in row.iter_mut().zip(noise) {
            *x += 0.3 * e;
        }
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(GoSetup {
        bank,
        a,
        gaps,
        indices,
        anchors,
        beta: 0.05,
    })
}

fn go_instance(rng: &mut ChaCha8Rng) -> Result<(Instance, GoSetup)> {
    let s = go_setup(rng)?;
    let analytic = go_loss(&s.anchors, &s.indices, &s.bank, &s.a, &s.gaps, s.beta)?
        .take(Block::Anchors)
        .into_vec();
    let (bank, a, gaps, indices, beta) = (s.bank.clone(), s.a.clone(), s.gaps.clone(), s.indices.clone(), s.beta);
    let (k, d) = s.anchors.shape();
    let f = move |x: &[f64]| {
        let m = Matrix::from_vec(k, d, x.to_vec())?;
        Ok(go_loss(&m, &indices, &bank, &a, &gaps, beta)?.value)
    };
    let point = s.anchors.as_slice().to_vec();
    Ok((Instance { f: Box::new(f), point, analytic }, s))
}

/// GO anchor gradient with the extra `sim(i,j)` factor on the negative-pair
/// coefficient, for comparison against the exact derivative.
fn go_alternative_gradient(s: &GoSetup) -> Result<Vec<f64>> {
    let (k, d) = s.anchors.shape();
    let mut out = vec![0.0; k * d];
    let cams = s.bank.camera_ids();
    for (r, &own) in s.indices.iter().enumerate() {
        let v = s.anchors.row(r);
        let exact = go_anchor_coefficients(v, own, &s.bank, &s.a, &s.gaps, s.beta)?;
        let g = &mut out[r * d..(r + 1) * d];
        for &(j, c) in &exact.positive {
            crate::linalg::axpy(g, c, s.bank.row(j));
        }
        if exact.positive.is_empty() || exact.negative.is_empty() {
            continue;
        }
        let z = |j: usize| dot(v, s.bank.row(j)) / s.beta;
        let log_sn = log_sum_exp(exact.negative.iter().map(|&(n, _)| z(n)));
        let positives = s.a.positives(own);
        let scale = 1.0 / positives.len() as f64;
        // Σ_j w_ij s_j / (s_j + S_n), in log space.
        let factor: f64 = positives
            .iter()
            .map(|&j| {
                let zj = z(j);
                s.gaps.pair_weight(cams[own], cams[j]) * (zj - log_sum_exp([zj, log_sn])).exp()
            })
            .sum();
        for &(n, _) in &exact.negative {
            let coef = scale * factor * (z(n) - log_sn).exp() / s.beta;
            crate::linalg::axpy(g, coef, s.bank.row(n));
        }
    }
    Ok(out)
}

fn lo_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (k, d) = (6, 8);
    let batch = unit_rows(rng, k, d);
    // Two originals with one augmented sibling each, plus two singletons.
    let mask = PairMask::from_instance_ids(&[0, 0, 1, 1, 2, 3]);
    let beta = 0.05;
    let analytic = lo_loss(&batch, &mask, beta)?.take(Block::Batch).into_vec();
    let f = move |x: &[f64]| Ok(lo_loss(&Matrix::from_vec(k, d, x.to_vec())?, &mask, beta)?.value);
    Ok(Instance {
        f: Box::new(f),
        point: batch.into_vec(),
        analytic,
    })
}

fn score_instance(rng: &mut ChaCha8Rng, confusion: bool) -> Result<Instance> {
    let ns = rng.random_range(1..6);
    let nt = rng.random_range(1..6);
    let point: Vec<f64> = (0..ns + nt).map(|_| rng.random_range(-0.5..1.5)).collect();
    let loss = move |x: &[f64]| {
        let (s, t) = x.split_at(ns);
        if confusion {
            dim_loss(s, t)
        } else {
            dnet_loss(s, t)
        }
    };
    let mut r = loss(&point)?;
    let mut analytic = r.take(Block::SourceScores).into_vec();
    analytic.extend(r.take(Block::TargetScores).into_vec());
    Ok(Instance {
        f: Box::new(move |x| Ok(loss(x)?.value)),
        point,
        analytic,
    })
}

fn ce_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (k, m) = (5, 7);
    let logits = Matrix::from_fn(k, m, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
    let analytic = ce_loss(&logits, &labels)?.take(Block::Logits).into_vec();
    let f = move |x: &[f64]| Ok(ce_loss(&Matrix::from_vec(k, m, x.to_vec())?, &labels)?.value);
    Ok(Instance {
        f: Box::new(f),
        point: logits.into_vec(),
        analytic,
    })
}

/// Encoder parameters under the linear probe loss `Σ G ⊙ Φ(x)`.
fn encoder_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (b, input, hidden, feature) = (3, 3, 4, 2);
    let enc = EncoderModel::<f64>::init(input, &[hidden], feature, rng)?;
    let x = Matrix::from_fn(b, input, |_, _| rng.sample::<f64, _>(StandardNormal));
    let probe = Matrix::from_fn(b, feature, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (_, cache) = enc.forward(&x)?;
    let analytic = enc.backward(&cache, &probe)?;
    let point = enc.net.params().to_vec();
    let f = move |p: &[f64]| {
        let mut e = enc.clone();
        e.net.params_mut().copy_from_slice(p);
        Ok(dot(e.embed(&x)?.as_slice(), probe.as_slice()))
    };
    Ok(Instance { f: Box::new(f), point, analytic })
}

fn dnet_instance(rng: &mut ChaCha8Rng, inputs: bool) -> Result<Instance> {
    let (b, d, hidden) = (4, 4, 5);
    let dnet = DiscriminatorModel::<f64>::init(d, hidden, rng)?;
    let feats = unit_rows(rng, b, d);
    let probe = gauss_vec(rng, b);
    let (_, cache) = dnet.forward(&feats)?;
    let (pgrad, xgrad) = dnet.backward(&cache, &probe)?;
    if inputs {
        let f = move |x: &[f64]| Ok(dot(&dnet.scores(&Matrix::from_vec(b, d, x.to_vec())?)?, &probe));
        Ok(Instance {
            f: Box::new(f),
            point: feats.into_vec(),
            analytic: xgrad.into_vec(),
        })
    } else {
        let point = dnet.net.params().to_vec();
        let f = move |p: &[f64]| {
            let mut m = dnet.clone();
            m.net.params_mut().copy_from_slice(p);
            Ok(dot(&m.scores(&feats)?, &probe))
        };
        Ok(Instance { f: Box::new(f), point, analytic: pgrad })
    }
}

/// Classifier parameters through the cross-entropy they feed.
fn classifier_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (b, d, m) = (4, 4, 5);
    let head = ClassifierHead::<f64>::init(d, m, rng)?;
    let feats = unit_rows(rng, b, d);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let (logits, cache) = head.forward(&feats)?;
    let g = ce_loss(&logits, &labels)?.take(Block::Logits);
    let (analytic, _) = head.backward(&cache, &g)?;
    let point = head.net.params().to_vec();
    let f = move |p: &[f64]| {
        let mut h = head.clone();
        h.net.params_mut().copy_from_slice(p);
        Ok(ce_loss(&h.forward(&feats)?.0, &labels)?.value)
    };
    Ok(Instance { f: Box::new(f), point, analytic })
}

fn inject(analytic: &mut [f64]) {
    if let Some(k) = (0..analytic.len()).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())) {
        analytic[k] *= 2.0;
    }
}

/// Runs `opts.instances` seeded random instances of every check in [`CHECKS`].
pub fn certify(opts: &CertifyOptions) -> Result<Certification> {
    if let Some(name) = &opts.inject_fault {
        if !CHECKS.contains(&name.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown check {name:?}")));
        }
    }
    let mut checks = Vec::with_capacity(CHECKS.len());
    let mut alt_error: f64 = 0.0;
    for (c, name) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((c as u64 + 1) << 32));
        let mut worst: Option<GradCheckReport> = None;
        let mut failures = 0;
        for _ in 0..opts.instances {
            let mut inst = match *name {
                "go_loss" => {
                    let (inst, setup) = go_instance(&mut rng)?;
                    let alt = go_alternative_gradient(&setup)?;
                    let e = alt
                        .iter()
                        .zip(&inst.analytic)
                        .map(|(&x, &y)| relative_error(x, y))
                        .fold(0.0, f64::max);
                    alt_error = alt_error.max(e);
                    inst
                }
                "lo_loss" => lo_instance(&mut rng)?,
                "dnet_loss" => score_instance(&mut rng, false)?,
                "dim_loss" => score_instance(&mut rng, true)?,
                "ce_loss" => ce_instance(&mut rng)?,
                "encoder_backward" => encoder_instance(&mut rng)?,
                "dnet_backward_params" => dnet_instance(&mut rng, false)?,
                "dnet_backward_inputs" => dnet_instance(&mut rng, true)?,
                "classifier_backward" => classifier_instance(&mut rng)?,
                _ => unreachable!(),
            };
            if opts.inject_fault.as_deref() == Some(*name) {
                inject(&mut inst.analytic);
            }
            let report = finite_diff_check(&inst.f, &inst.point, &inst.analytic, opts.step, opts.tolerance)?;
            if !report.pass {
                failures += 1;
            }
            if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
                worst = Some(report);
            }
        }
        let worst = worst.ok_or_else(|| Error::InvalidConfig("certification needs at least one instance".into()))?;
        checks.push(CheckSummary {
            name: name.to_string(),
            instances: opts.instances,
            failures,
            max_rel_error: worst.max_rel_error,
            worst,
            pass: failures == 0,
        });
    }
    let notes = vec![
        format!(
            "GO negative-pair coefficient is the exact derivative of the loss, Σ_j w_ij/(sim(i,j)+S_n) · sim(i,k)/β. \
             The variant with an extra sim(i,j) factor in the numerator disagrees with finite differences \
             (max relative error {alt_error:.3e}) and is not used."
        ),
        format!("relative error = |a - n| / max(|a|, |n|, {RELATIVE_FLOOR:e})"),
    ];
    let pass = checks.iter().all(|c| c.pass);
    Ok(Certification {
        options: opts.clone(),
        checks,
        go_alternative_negative_form_error: alt_error,
        notes,
        pass,
    })
}
