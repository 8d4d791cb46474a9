//! Independent brute-force references for the numerical kernels. Each check
//! returns a description of the first mismatch.

use dacouple::camera_weighting::{mmd_gap, CameraGapTable};
use dacouple::embedding::{pairwise_cosine, Domain, FeatureBank};
use dacouple::evaluation::{evaluate, ItemMeta};
use dacouple::label_prediction::{k_reciprocal_distance, AnnotationMatrix};
use dacouple::linalg::Matrix;
use dacouple::objectives::{go_loss, lo_loss, PairMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking, dense textbook form

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + (x - y) * (x - y)).sqrt()
}

/// Everything within the (k+1)-th smallest distance of row i, ascending index.
fn knn(d: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut sorted = d[i].clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[k.min(sorted.len() - 1)];
    (0..d.len()).filter(|&j| d[i][j] <= cut).collect()
}

fn reciprocal(d: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    knn(d, i, k).into_iter().filter(|&j| knn(d, j, k).contains(&i)).collect()
}

fn brute_rerank(x: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { dist(&x[i.min(j)], &x[i.max(j)]) }).collect())
        .collect();
    let half = k1.div_ceil(2);
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let base = reciprocal(&d, i, k1);
        let mut set = base.clone();
        for &c in &base {
            let cand = reciprocal(&d, c, half);
            let common = cand.iter().filter(|x| base.contains(x)).count();
            if 3 * common > 2 * cand.len() {
                set.extend(cand);
            }
        }
        set.sort_unstable();
        set.dedup();
        let w: Vec<f64> = set.iter().map(|&j| (-(d[i][j] * d[i][j])).exp()).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in set.iter().zip(w) {
            v[i][j] = wj / total;
        }
    }
    if k2 > 1 {
        let mut q = vec![vec![0.0; n]; n];
        for (i, qi) in q.iter_mut().enumerate() {
            let nb = knn(&d, i, k2 - 1);
            for c in 0..n {
                let s = nb.iter().fold(0.0, |s, &j| s + v[j][c]);
                qi[c] = s / nb.len() as f64;
            }
        }
        v = q;
    }
    let mass: Vec<f64> = v.iter().map(|r| r.iter().sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = (0..n).fold(0.0, |s, c| s + v[i][c].min(v[j][c]));
            let union = mass[i] + mass[j] - s;
            let jac = if union > 0.0 { (1.0 - s / union).max(0.0) } else { 1.0 };
            out[i][j] = (1.0 - lambda) * jac + lambda * d[i][j];
        }
    }
    out
}

/// Bitwise comparison on `instances` random point sets with N in 8..=50.
pub fn k_reciprocal_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for instance in 0..instances {
        let n = rng.random_range(8..=50);
        let d = rng.random_range(2..=6);
        let mut rows = unit_rows(&mut rng, n, d);
        // Exact duplicates exercise the tie rule.
        if instance % 3 == 0 {
            rows[n - 1] = rows[0].clone();
            rows[n - 2] = rows[1].clone();
        }
        let k1 = rng.random_range(2..=(n / 2).max(2));
        let k2 = rng.random_range(1..=k1.min(6));
        let lambda = [0.0, 0.3, 0.7, 1.0][instance % 4];
        let got = k_reciprocal_distance(&Matrix::from_rows(&rows).unwrap(), k1, k2, lambda).unwrap();
        let want = brute_rerank(&rows, k1, k2, lambda);
        for i in 0..n {
            for j in 0..n {
                ensure!(
                    got.get(i, j).to_bits() == want[i][j].to_bits(),
                    "instance {instance} (n={n}, k1={k1}, k2={k2}) entry ({i},{j}): {} vs {}",
                    got.get(i, j),
                    want[i][j]
                );
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Average precision by exhaustive counting

/// Rank of gallery item `g` counted directly: items scoring higher, or equal
/// with a smaller index, come first.
fn exhaustive_ap(q: &[f64], qm: ItemMeta, g: &[Vec<f64>], gm: &[ItemMeta]) -> Option<f64> {
    let valid: Vec<usize> = (0..g.len())
        .filter(|&k| !(gm[k].identity == qm.identity && gm[k].camera == qm.camera))
        .collect();
    let score = |k: usize| q.iter().zip(&g[k]).fold(0.0, |s, (a, b)| s + a * b);
    let rank = |k: usize| {
        1 + valid
            .iter()
            .filter(|&&o| score(o) > score(k) || (score(o) == score(k) && o < k))
            .count()
    };
    let mut ranks: Vec<usize> = valid.iter().filter(|&&k| gm[k].identity == qm.identity).map(|&k| rank(k)).collect();
    if ranks.is_empty() {
        return None;
    }
    ranks.sort_unstable();
    let sum = ranks.iter().enumerate().map(|(h, &r)| (h + 1) as f64 / r as f64).sum::<f64>();
    Some(sum / ranks.len() as f64)
}

/// Exact comparison of per-query AP, mAP and the skip count.
pub fn average_precision_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for instance in 0..instances {
        let ids = rng.random_range(2..8);
        let cams = rng.random_range(2..4);
        let d = rng.random_range(2..5);
        let nq = rng.random_range(3..12);
        let ng = rng.random_range(5..40);
        let mut meta = |n: usize| -> Vec<ItemMeta> {
            (0..n)
                .map(|_| ItemMeta { identity: rng.random_range(0..ids), camera: rng.random_range(0..cams) })
                .collect()
        };
        let qm = meta(nq);
        let gm = meta(ng);
        let q = unit_rows(&mut rng, nq, d);
        let mut g = unit_rows(&mut rng, ng, d);
        if instance % 2 == 0 {
            // Duplicated gallery rows force score ties.
            g[ng - 1] = g[0].clone();
            g[ng - 2] = q[0].clone();
        }
        let want: Vec<Option<f64>> = (0..nq).map(|k| exhaustive_ap(&q[k], qm[k], &g, &gm)).collect();
        let got = evaluate(&Matrix::from_rows(&q).unwrap(), &qm, &Matrix::from_rows(&g).unwrap(), &gm);
        if want.iter().all(Option::is_none) {
            ensure!(got.is_err(), "instance {instance}: no valid query but evaluate succeeded");
            continue;
        }
        let got = got.map_err(|e| format!("instance {instance}: {e}"))?;
        ensure!(got.per_query_ap == want, "instance {instance}: {:?} vs {:?}", got.per_query_ap, want);
        let valid: Vec<f64> = want.iter().flatten().copied().collect();
        let map = valid.iter().sum::<f64>() / valid.len() as f64;
        ensure!(got.map == map, "instance {instance}: mAP {} vs {map}", got.map);
        ensure!(got.skipped == want.iter().filter(|a| a.is_none()).count(), "instance {instance}: skip count");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Similarities and camera gaps

pub fn pairwise_cosine_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = unit_rows(&mut rng, 7, 5);
    let b = unit_rows(&mut rng, 4, 5);
    let got = pairwise_cosine(&Matrix::from_rows(&a).unwrap(), &Matrix::from_rows(&b).unwrap()).unwrap();
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            let na = ai.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bj.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            ensure!((got[(i, j)] - cos).abs() < 1e-14, "({i},{j}): {} vs {cos}", got[(i, j)]);
        }
    }
    Ok(())
}

/// Unbiased squared MMD from the pooled kernel matrix with signed weights.
fn mmd_reference(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> f64 {
    let pooled: Vec<(&Vec<f64>, bool)> = a.iter().map(|x| (x, true)).chain(b.iter().map(|x| (x, false))).collect();
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut s = 0.0;
    for (i, (x, xa)) in pooled.iter().enumerate() {
        for (j, (y, ya)) in pooled.iter().enumerate() {
            let k = (-dist(x, y).powi(2) / (2.0 * h * h)).exp();
            s += match (xa, ya) {
                _ if i == j => 0.0,
                (true, true) => k / (m * (m - 1.0)),
                (false, false) => k / (n * (n - 1.0)),
                _ => -k / (m * n),
            };
        }
    }
    s.max(0.0)
}

pub fn mmd_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for shift in [0.0, 0.3, 1.0] {
        let a = unit_rows(&mut rng, 12, 4);
        let b: Vec<Vec<f64>> = unit_rows(&mut rng, 9, 4)
            .into_iter()
            .map(|mut v| {
                v[0] += shift;
                v
            })
            .collect();
        let got = mmd_gap(&Matrix::from_rows(&a).unwrap(), &Matrix::from_rows(&b).unwrap(), 0.8).unwrap();
        let want = mmd_reference(&a, &b, 0.8);
        ensure!((got - want).abs() < 1e-12, "shift {shift}: {got} vs {want}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss values from their definitions, without log-sum-exp

pub fn go_value_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, beta) = (14, 5, 0.2);
    let rows = unit_rows(&mut rng, n, d);
    let cams: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let bank = FeatureBank::new(&Matrix::from_rows(&rows).unwrap(), cams.clone(), vec![Domain::Target; n]).unwrap();
    let groups: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| groups[i] == groups[j]);
    let a = AnnotationMatrix::from_pairs(n, pairs).unwrap();
    let raw = Matrix::from_rows(&[[0.0, 0.2, 0.5], [0.2, 0.0, 0.9], [0.5, 0.9, 0.0]]).unwrap();
    let mut gaps = CameraGapTable::from_raw(&raw).unwrap();
    gaps.rebase(&a, &cams).unwrap();
    let idx = [0, 5, 9];
    let anchors = unit_rows(&mut rng, idx.len(), d);
    let got = go_loss(&Matrix::from_rows(&anchors).unwrap(), &idx, &bank, &a, &gaps, beta).unwrap().value;
    let sim = |v: &[f64], k: usize| (v.iter().zip(&rows[k]).map(|(x, y)| x * y).sum::<f64>() / beta).exp();
    let mut want = 0.0;
    for (v, &i) in anchors.iter().zip(&idx) {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && groups[j] == groups[i]).collect();
        let neg: f64 = (0..n).filter(|&k| groups[k] != groups[i]).map(|k| sim(v, k)).sum();
        let l: f64 = pos.iter().map(|&j| gaps.pair_weight(cams[i], cams[j]) * (1.0 + neg / sim(v, j)).ln()).sum();
        want += l / pos.len() as f64;
    }
    ensure!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    Ok(())
}

pub fn lo_value_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = 0.1;
    let ids = [0, 0, 1, 2, 2, 2, 3];
    let rows = unit_rows(&mut rng, ids.len(), 6);
    let got = lo_loss(&Matrix::from_rows(&rows).unwrap(), &PairMask::from_instance_ids(&ids), beta).unwrap().value;
    let want: f64 = (0..ids.len())
        .map(|i| {
            let s: f64 = (0..ids.len())
                .filter(|&j| ids[j] != ids[i])
                .map(|j| (rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum::<f64>() / beta).exp())
                .sum();
            (1.0 + s).ln()
        })
        .sum();
    ensure!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    Ok(())
}
