//! Property checks over the embedding, pseudo-label, weighting, loss and
//! evaluation layers, parameterized so that both proptest and a seeded
//! sweep can drive them.

use dacouple::camera_weighting::{mmd_gap, normalize_gaps, CameraGapTable};
use dacouple::embedding::{exp_similarity, pairwise_cosine, Domain, EpochClock, FeatureBank};
use dacouple::evaluation::{evaluate, ItemMeta};
use dacouple::label_prediction::{select_positive_pairs, AnnotationMatrix, ClusterAssignment, DistanceMatrix};
use dacouple::linalg::Matrix;
use dacouple::objectives::{go_anchor_coefficients, go_loss, lo_loss, lo_row_coefficients, PairMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Annotation grouping samples by `groups`.
fn grouped(groups: &[usize]) -> AnnotationMatrix {
    let n = groups.len();
    let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| groups[i] == groups[j]);
    AnnotationMatrix::from_pairs(n, pairs).unwrap()
}

// ---------------------------------------------------------------------------
// Memory bank

/// Every row stays unit-norm through `updates` random updates, including
/// fresh rows that are exact negatives of the stored row.
pub fn bank_stays_unit(updates: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (40, 8);
    let mut bank = FeatureBank::new(&unit_rows(&mut rng, n, d), vec![0; n], vec![Domain::Target; n]).unwrap();
    let mut clock = EpochClock::new();
    clock.start_epoch();
    for step in 0..updates {
        if step % 50 == 0 {
            clock.start_epoch();
        }
        let k = rng.random_range(1..6);
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        let fresh = Matrix::from_fn(k, d, |r, c| {
            if step % 97 == 0 {
                -bank.row(idx[r])[c]
            } else {
                3.0 * rng.sample::<f64, _>(StandardNormal)
            }
        });
        bank.update(&idx, &fresh, &clock).map_err(|e| format!("step {step}: {e}"))?;
        clock.tick();
        for i in 0..n {
            ensure!((norm(bank.row(i)) - 1.0).abs() < 1e-9, "step {step} row {i}: norm {}", norm(bank.row(i)));
        }
    }
    Ok(())
}

pub fn zero_blend_weight_is_a_no_op(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = FeatureBank::new(&unit_rows(&mut rng, 5, 3), vec![0; 5], vec![Domain::Target; 5]).unwrap();
    let before = bank.features().clone();
    let clock = EpochClock { epoch: 100, ..EpochClock::new() };
    bank.update(&[0, 3], &unit_rows(&mut rng, 2, 3), &clock).map_err(|e| e.to_string())?;
    ensure!(bank.features() == &before, "bank changed at epoch 100");
    Ok(())
}

// ---------------------------------------------------------------------------
// Pseudo-labels and camera weighting

/// A(α) ⊆ A(α + extra), symmetric, no self pairs.
pub fn annotation_grows_with_alpha(seed: u64, n: usize, a1: f64, extra: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = unit_rows(&mut rng, n, 3);
    let dist = DistanceMatrix::euclidean(&x);
    let labels: Vec<i64> = (0..n).map(|_| rng.random_range(-1..3)).collect();
    let clusters = ClusterAssignment { labels };
    let small = select_positive_pairs(&clusters, &dist, a1).map_err(|e| e.to_string())?;
    let large = select_positive_pairs(&clusters, &dist, a1 + extra).map_err(|e| e.to_string())?;
    for (i, j) in small.pairs() {
        ensure!(large.is_positive(i, j), "pair ({i},{j}) lost when alpha grew");
        ensure!(small.is_positive(j, i), "pair ({i},{j}) not symmetric");
        ensure!(i != j, "self pair {i}");
    }
    Ok(())
}

/// Mean of `g(c_i, c_j) + w` over positive pairs is 1 and `w ∈ [0, 1]`.
/// Draws without positive pairs pass vacuously.
pub fn mean_positive_pair_weight_is_one(seed: u64, cams: usize, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::from_fn(cams, cams, |i, j| if i == j { 0.0 } else { ((i * 7 + j * 7) % 5) as f64 + rng.random::<f64>() });
    let raw = Matrix::from_fn(cams, cams, |i, j| if i == j { 0.0 } else { raw[(i.min(j), i.max(j))] });
    let camera_ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..cams)).collect();
    let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let a = grouped(&groups);
    if !a.has_pairs() {
        return Ok(());
    }
    let mut table = CameraGapTable::from_raw(&raw).map_err(|e| e.to_string())?;
    table.rebase(&a, &camera_ids).map_err(|e| e.to_string())?;
    let weights: Vec<f64> = a.pairs().map(|(i, j)| table.pair_weight(camera_ids[i], camera_ids[j])).collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    ensure!((mean - 1.0).abs() < 1e-9, "mean weight {mean}");
    ensure!((0.0..=1.0).contains(&table.base_weight), "base weight {}", table.base_weight);
    Ok(())
}

pub fn normalized_gaps_are_a_fixed_point(seed: u64, cams: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Matrix::zeros(cams, cams);
    for i in 0..cams {
        for j in i + 1..cams {
            let g = rng.random::<f64>();
            raw[(i, j)] = g;
            raw[(j, i)] = g;
        }
    }
    let once = normalize_gaps(&raw).map_err(|e| e.to_string())?;
    ensure!(normalize_gaps(&once).map_err(|e| e.to_string())? == once, "second normalization moved the gaps");
    Ok(())
}

pub fn mmd_is_symmetric_and_zero_on_itself(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = unit_rows(&mut rng, 10, 4);
    let b = unit_rows(&mut rng, 7, 4);
    let gap = |x: &Matrix<f64>, y: &Matrix<f64>| mmd_gap(x, y, 0.7).unwrap();
    ensure!(gap(&a, &a) == 0.0, "MMD(a, a) = {}", gap(&a, &a));
    ensure!((gap(&a, &b) - gap(&b, &a)).abs() < 1e-15, "asymmetric MMD");
    Ok(())
}

// ---------------------------------------------------------------------------
// Similarities

pub fn similarity_is_symmetric_and_cosine_bounded(seed: u64, beta: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = unit_rows(&mut rng, 6, 5);
    ensure!(
        exp_similarity(x.row(0), x.row(1), beta) == exp_similarity(x.row(1), x.row(0), beta),
        "asymmetric similarity"
    );
    let c = pairwise_cosine(&x, &x).map_err(|e| e.to_string())?;
    ensure!(c.as_slice().iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)), "cosine out of [-1, 1]");
    Ok(())
}

// ---------------------------------------------------------------------------
// GO

struct GoInstance {
    bank: FeatureBank<f64>,
    a: AnnotationMatrix,
    gaps: CameraGapTable<f64>,
}

fn go_instance(rows: &Matrix<f64>, groups: &[usize]) -> GoInstance {
    let n = rows.rows();
    let cams: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let a = grouped(groups);
    let raw = Matrix::from_rows(&[[0.0, 0.6], [0.6, 0.0]]).unwrap();
    let mut gaps = CameraGapTable::from_raw(&raw).unwrap();
    gaps.rebase(&a, &cams).unwrap();
    GoInstance { bank: FeatureBank::new(rows, cams, vec![Domain::Target; n]).unwrap(), a, gaps }
}

/// Positive-pair coefficients are negative (pull), negative-pair ones
/// positive (push).
pub fn go_pulls_positives_and_pushes_negatives(seed: u64, beta: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let rows = unit_rows(&mut rng, n, 6);
    let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let g = go_instance(&rows, &groups);
    let v = unit_rows(&mut rng, 1, 6);
    let c = go_anchor_coefficients(v.row(0), 0, &g.bank, &g.a, &g.gaps, beta).map_err(|e| e.to_string())?;
    ensure!(!c.positive.is_empty() && !c.negative.is_empty(), "missing pair kinds");
    ensure!(c.positive.iter().all(|&(_, x)| x < 0.0), "a positive coefficient is >= 0: {:?}", c.positive);
    ensure!(c.negative.iter().all(|&(_, x)| x > 0.0), "a negative coefficient is <= 0: {:?}", c.negative);
    Ok(())
}

/// Embedding the instance one dimension up, `v' = (v cos t, sin t)` and the
/// same for bank rows, adds `sin²t` to every dot product; with
/// `beta' = beta cos²t` every similarity is multiplied by one common factor,
/// which must leave the loss unchanged.
pub fn go_is_invariant_to_a_common_similarity_factor(seed: u64, t: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, beta) = (10, 4, 0.3);
    let rows = unit_rows(&mut rng, n, d);
    let anchors = unit_rows(&mut rng, 3, d);
    let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let lift = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), d + 1, |r, c| if c < d { m[(r, c)] * t.cos() } else { t.sin() });
    let idx = [0, 4, 8];
    let base = go_instance(&rows, &groups);
    let lifted = go_instance(&lift(&rows), &groups);
    let v0 = go_loss(&anchors, &idx, &base.bank, &base.a, &base.gaps, beta).unwrap().value;
    let v1 = go_loss(&lift(&anchors), &idx, &lifted.bank, &lifted.a, &lifted.gaps, beta * t.cos().powi(2))
        .unwrap()
        .value;
    ensure!((v0 - v1).abs() <= 1e-10 * v0.abs().max(1.0), "{v0} vs {v1}");
    Ok(())
}

/// Unit vector in the (e0, e_axis) plane at angle `theta` from e0.
fn at_angle(theta: f64, axis: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = theta.cos();
    v[axis] = theta.sin();
    v
}

/// Easier positives get a weaker pull; harder negatives a stronger push.
pub fn go_attends_to_hard_pairs() -> Result<(), String> {
    let d = 5;
    // Anchor e0; bank row 0 is the anchor, row 1 the moving positive, row 2 a
    // fixed positive, rows 3..5 negatives (row 3 moves in the second sweep).
    let build = |pos: f64, neg: f64| {
        Matrix::from_rows(&[
            at_angle(0.0, 1, d),
            at_angle(pos, 1, d),
            at_angle(0.9, 2, d),
            at_angle(neg, 3, d),
            at_angle(1.4, 4, d),
            at_angle(2.0, 2, d),
        ])
        .unwrap()
    };
    let groups = [0, 0, 0, 1, 2, 3];
    let v = at_angle(0.0, 1, d);
    let coef = |rows: Matrix<f64>| {
        let g = go_instance(&rows, &groups);
        go_anchor_coefficients(&v, 0, &g.bank, &g.a, &g.gaps, 0.1).unwrap()
    };
    let pulls: Vec<f64> = [1.5, 1.2, 0.9, 0.6, 0.3, 0.1]
        .iter()
        .map(|&a| coef(build(a, 1.0)).positive.iter().find(|p| p.0 == 1).unwrap().1.abs())
        .collect();
    ensure!(pulls.windows(2).all(|w| w[1] < w[0]), "pull not decreasing in similarity: {pulls:?}");
    let pushes: Vec<f64> = [1.5, 1.2, 0.9, 0.6, 0.3]
        .iter()
        .map(|&a| coef(build(0.5, a)).negative.iter().find(|p| p.0 == 3).unwrap().1)
        .collect();
    ensure!(pushes.windows(2).all(|w| w[1] > w[0]), "push not increasing in similarity: {pushes:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// LO

pub fn lo_attends_to_hard_pairs() -> Result<(), String> {
    let d = 4;
    let pushes: Vec<f64> = [1.5, 1.0, 0.6, 0.3, 0.1]
        .iter()
        .map(|&a| {
            let batch = Matrix::from_rows(&[at_angle(0.0, 1, d), at_angle(a, 1, d), at_angle(1.2, 2, d), at_angle(2.5, 3, d)])
                .unwrap();
            let (_, coefs) = lo_row_coefficients(&batch, &PairMask::diagonal(4), 0, 0.1);
            coefs.iter().find(|c| c.0 == 1).unwrap().1
        })
        .collect();
    ensure!(pushes.windows(2).all(|w| w[1] > w[0] && w[0] > 0.0), "{pushes:?}");
    Ok(())
}

pub fn lo_ignores_batch_order(seed: u64, k: usize, beta: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = unit_rows(&mut rng, k, 5);
    let ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..k)).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mask = PairMask::from_instance_ids(&ids);
    let v0 = lo_loss(&batch, &mask, beta).unwrap().value;
    let v1 = lo_loss(&batch.select_rows(&perm), &mask.permuted(&perm), beta).unwrap().value;
    ensure!((v0 - v1).abs() <= 1e-12 * v0.abs().max(1.0), "{v0} vs {v1}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

fn random_eval(rng: &mut ChaCha8Rng) -> (Matrix<f64>, Vec<ItemMeta>, Matrix<f64>, Vec<ItemMeta>) {
    let d = rng.random_range(2..6);
    let nq = rng.random_range(2..15);
    let ng = rng.random_range(4..60);
    let mut meta = |n: usize| -> Vec<ItemMeta> {
        (0..n).map(|i| ItemMeta { identity: i % 5, camera: rng.random_range(0..3) }).collect()
    };
    let (qm, gm) = (meta(nq), meta(ng));
    (unit_rows(rng, nq, d), qm, unit_rows(rng, ng, d), gm)
}

pub fn cmc_is_monotone(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, qm, g, gm) = random_eval(&mut rng);
    if let Ok(r) = evaluate(&q, &qm, &g, &gm) {
        ensure!(r.cmc.windows(2).all(|w| w[0] <= w[1]), "CMC decreases: {:?}", r.cmc);
        ensure!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10, "rank order");
        ensure!([r.rank1, r.rank5, r.rank10, r.map].iter().all(|x| (0.0..=1.0).contains(x)), "metric out of [0, 1]");
    }
    Ok(())
}

pub fn common_rotation_leaves_metrics_unchanged(seed: u64, angle: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, qm, g, gm) = random_eval(&mut rng);
    let rot = |m: &Matrix<f64>| {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| match c {
            0 => m[(r, 0)] * angle.cos() - m[(r, 1)] * angle.sin(),
            1 => m[(r, 0)] * angle.sin() + m[(r, 1)] * angle.cos(),
            _ => m[(r, c)],
        })
    };
    if let Ok(a) = evaluate(&q, &qm, &g, &gm) {
        let b = evaluate(&rot(&q), &qm, &rot(&g), &gm).map_err(|e| e.to_string())?;
        ensure!(a.cmc == b.cmc, "CMC changed under rotation");
        ensure!((a.map - b.map).abs() < 1e-12, "mAP changed under rotation");
    }
    Ok(())
}

/// Only Rank-1 survives duplication: a first match at position p moves to
/// 2p - 1, which shifts Rank-k for k > 1 and every AP term.
pub fn duplicated_gallery_keeps_rank1(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, qm, g, gm) = random_eval(&mut rng);
    if let Ok(a) = evaluate(&q, &qm, &g, &gm) {
        let g2 = g.vstack(&g).unwrap();
        let gm2: Vec<ItemMeta> = gm.iter().chain(&gm).copied().collect();
        let b = evaluate(&q, &qm, &g2, &gm2).map_err(|e| e.to_string())?;
        ensure!(a.rank1 == b.rank1, "Rank-1 {} vs {}", a.rank1, b.rank1);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Seeded sweep

/// Runs every check; parameterized ones over `cases` draws from the same
/// ranges the property tests use. Returns the first failure per check.
pub fn sweep(cases: usize, seed: u64) -> Vec<(&'static str, Result<(), String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(&'static str, Result<(), String>)> = vec![
        ("bank unit-norm after 1000 updates", bank_stays_unit(1000, rng.random())),
        ("bank no-op at blend weight 0", zero_blend_weight_is_a_no_op(rng.random())),
        ("MMD symmetric, zero on itself", mmd_is_symmetric_and_zero_on_itself(rng.random())),
        ("GO hardness monotonicity", go_attends_to_hard_pairs()),
        ("LO hardness monotonicity", lo_attends_to_hard_pairs()),
    ];
    type Draw = fn(&mut ChaCha8Rng) -> Result<(), String>;
    let draws: [(&'static str, Draw); 10] = [
        ("A(alpha) monotone", |r| {
            annotation_grows_with_alpha(r.random(), r.random_range(4..30), r.random_range(0.05..1.5), r.random_range(0.0..1.0))
        }),
        ("mean positive-pair weight = 1", |r| {
            mean_positive_pair_weight_is_one(r.random(), r.random_range(2..6), r.random_range(4..40))
        }),
        ("normalized gaps fixed point", |r| normalized_gaps_are_a_fixed_point(r.random(), r.random_range(2..6))),
        ("similarity symmetric, cosine bounded", |r| {
            similarity_is_symmetric_and_cosine_bounded(r.random(), r.random_range(0.01..2.0))
        }),
        ("GO pull/push signs", |r| go_pulls_positives_and_pushes_negatives(r.random(), r.random_range(0.03..1.0))),
        ("GO common-factor invariance", |r| go_is_invariant_to_a_common_similarity_factor(r.random(), r.random_range(0.1..1.2))),
        ("LO permutation invariance", |r| {
            lo_ignores_batch_order(r.random(), r.random_range(2..12), r.random_range(0.03..1.0))
        }),
        ("CMC monotone", |r| cmc_is_monotone(r.random())),
        ("rotation invariance", |r| common_rotation_leaves_metrics_unchanged(r.random(), r.random_range(0.0..std::f64::consts::TAU))),
        ("duplicated gallery keeps Rank-1", |r| duplicated_gallery_keeps_rank1(r.random())),
    ];
    for (name, draw) in draws {
        let result = (0..cases).try_for_each(|case| draw(&mut rng).map_err(|e| format!("case {case}: {e}")));
        out.push((name, result));
    }
    out
}
