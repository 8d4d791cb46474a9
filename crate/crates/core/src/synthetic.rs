//! Seeded two-domain benchmarks in embedding space.
//!
//! Each identity has a prototype on the unit sphere of a `latent_dim`
//! subspace of the input space. An observation is
//! `camera_c(shift(prototype + noise + nuisance))`, where both the camera
//! and the domain shift are Cayley rotations of a random skew-symmetric
//! generator plus a bias, so a single scale parameter controls how far each
//! one moves data. The nuisance term is a random offset inside a low-rank
//! subspace drawn per domain, independent of identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{write_features_csv, Domain};
use crate::error::{Error, Result};
use crate::evaluation::ItemMeta;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Transform scale per camera; 0 is the identity map.
    pub camera_scales: Vec<f64>,
    /// Per-coordinate standard deviation of the intra-identity noise.
    pub noise_sigma: f64,
    /// Rank of the shared nuisance subspace (pose, background and the like):
    /// every image gets a random offset inside it, independent of identity.
    pub nuisance_rank: usize,
    /// Per-direction standard deviation of the nuisance offset.
    pub nuisance_sigma: f64,
    /// Scale of the domain-wide rotation; 0 disables it.
    pub shift_rotation: f64,
    /// Length of the domain-wide offset vector.
    pub shift_offset: f64,
    /// Global id of this domain's first identity; keeps domains disjoint.
    pub first_identity: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            identities: 40,
            images_per_identity: 20,
            cameras: 4,
            latent_dim: 16,
            input_dim: 32,
            camera_scales: vec![0.0, 0.2, 0.4, 0.6],
            noise_sigma: 0.08,
            nuisance_rank: 0,
            nuisance_sigma: 0.0,
            shift_rotation: 0.0,
            shift_offset: 0.0,
            first_identity: 0,
        }
    }
}

impl DomainSpec {
    /// Source half of the default benchmark: many identities with few
    /// images each, two cameras and a rank-4 nuisance subspace.
    pub fn default_source() -> Self {
        Self {
            identities: 200,
            images_per_identity: 4,
            cameras: 2,
            camera_scales: vec![0.0, 0.2],
            nuisance_rank: 4,
            nuisance_sigma: 0.3,
            ..Self::default()
        }
    }

    /// Target half of the default benchmark: the source layout moved by a
    /// domain-wide offset, with its own cameras and nuisance directions.
    pub fn default_target() -> Self {
        Self {
            shift_offset: 0.5,
            first_identity: 200,
            ..Self::default_source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.identities < 2 {
            return fail(format!("need at least 2 identities, got {}", self.identities));
        }
        if self.cameras < 2 {
            return fail(format!("need at least 2 cameras, got {}", self.cameras));
        }
        if self.images_per_identity < self.cameras {
            return fail(format!(
                "{} images per identity cannot cover {} cameras",
                self.images_per_identity, self.cameras
            ));
        }
        if self.latent_dim == 0 || self.latent_dim > self.input_dim {
            return fail(format!("latent dim {} must be in 1..={}", self.latent_dim, self.input_dim));
        }
        if self.camera_scales.len() != self.cameras {
            return fail(format!("{} camera scales for {} cameras", self.camera_scales.len(), self.cameras));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !self.camera_scales.iter().all(|&s| finite_nonneg(s)) {
            return fail("camera scales must be finite and >= 0".into());
        }
        if self.nuisance_rank > self.input_dim {
            return fail(format!("nuisance rank {} exceeds input dim {}", self.nuisance_rank, self.input_dim));
        }
        if !finite_nonneg(self.noise_sigma) || !finite_nonneg(self.nuisance_sigma) || !finite_nonneg(self.shift_rotation) || !finite_nonneg(self.shift_offset) {
            return fail("noise sigma and shift parameters must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledDataset {
    pub observations: Matrix<f64>,
    /// Global identity ids.
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    pub domain: Domain,
    pub first_identity: usize,
    pub num_identities: usize,
    pub num_cameras: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Identity ids relative to this dataset, in `[0, num_identities)`.
    pub fn local_labels(&self) -> Vec<usize> {
        self.identities.iter().map(|&i| i - self.first_identity).collect()
    }

    pub fn meta(&self) -> Vec<ItemMeta> {
        self.identities
            .iter()
            .zip(&self.cameras)
            .map(|(&identity, &camera)| ItemMeta { identity, camera })
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            observations: self.observations.select_rows(rows),
            identities: rows.iter().map(|&r| self.identities[r]).collect(),
            cameras: rows.iter().map(|&r| self.cameras[r]).collect(),
            ..self.clone()
        }
    }

    /// Writes the embedding-core feature CSV (`camera,domain,f0,...`).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_features_csv(w, &self.observations, &self.cameras, &vec![self.domain; self.len()])
    }
}

/// Near-identity affine map `x -> Q x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub q: Matrix<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            q: Matrix::identity(dim),
            b: vec![0.0; dim],
        }
    }

    /// `Q = (I - sK)^{-1} (I + sK)` for a random skew-symmetric `K` with
    /// entries of order `1/sqrt(dim)`, and `b = offset · u` for a random
    /// unit vector `u`.
    pub fn random(dim: usize, scale: f64, offset: f64, rng: &mut ChaCha8Rng) -> Self {
        let norm = 1.0 / (dim as f64).sqrt();
        let mut k = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i + 1..dim {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * norm * scale;
                k[(i, j)] = v;
                k[(j, i)] = -v;
            }
        }
        let plus = Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 } + k[(i, j)]);
        let minus = Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 } - k[(i, j)]);
        let q = solve(minus, plus).expect("I - K is invertible for skew-symmetric K");
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x *= offset / un);
        Self { q, b: u }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.q.rows())
            .map(|i| crate::linalg::dot(self.q.row(i), x) + self.b[i])
            .collect()
    }
}

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
fn solve(mut a: Matrix<f64>, mut b: Matrix<f64>) -> Option<Matrix<f64>> {
    let n = a.rows();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))?;
        if a[(pivot, col)].abs() < 1e-300 {
            return None;
        }
        for j in 0..n {
            let t = a[(col, j)];
            a[(col, j)] = a[(pivot, j)];
            a[(pivot, j)] = t;
        }
        for j in 0..b.cols() {
            let t = b[(col, j)];
            b[(col, j)] = b[(pivot, j)];
            b[(pivot, j)] = t;
        }
        let inv = 1.0 / a[(col, col)];
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[(r, col)] * inv;
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(r, j)] -= f * a[(col, j)];
            }
            for j in 0..b.cols() {
                b[(r, j)] -= f * b[(col, j)];
            }
        }
    }
    for r in 0..n {
        let inv = 1.0 / a[(r, r)];
        b.row_mut(r).iter_mut().for_each(|x| *x *= inv);
    }
    Some(b)
}

// Independent streams so that, e.g., the shift parameters never perturb the
// prototypes or the noise.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_CAMERAS: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_NUISANCE: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Camera transforms for `spec`, in camera order.
pub fn camera_transforms(spec: &DomainSpec, seed: u64) -> Vec<AffineMap> {
    let mut rng = stream(seed, STREAM_CAMERAS);
    // Generators are drawn at unit scale and then scaled, so changing one
    // camera's scale leaves the other cameras' maps untouched.
    spec.camera_scales
        .iter()
        .map(|&s| {
            let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
            if s == 0.0 {
                AffineMap::identity(spec.input_dim)
            } else {
                AffineMap::random(spec.input_dim, s, s, &mut sub)
            }
        })
        .collect()
}

/// Draws a labelled dataset. A pure function of `(spec, domain, seed)`;
/// image `k` of every identity is taken by camera `k % cameras`.
pub fn generate_domain(spec: &DomainSpec, domain: Domain, seed: u64) -> Result<LabeledDataset> {
    generate_draw(spec, domain, seed, 0)
}

/// Like [`generate_domain`] but with an independent noise stream per `draw`:
/// same identities, cameras and shift, fresh images. Draw 0 is
/// [`generate_domain`]'s output.
pub fn generate_draw(spec: &DomainSpec, domain: Domain, seed: u64, draw: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut proto_rng = stream(seed, STREAM_PROTOTYPES);
    let prototypes: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| {
            let mut p: Vec<f64> = (0..spec.latent_dim).map(|_| proto_rng.sample(StandardNormal)).collect();
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.iter_mut().for_each(|x| *x /= n);
            p.resize(d, 0.0);
            p
        })
        .collect();
    let cams = camera_transforms(spec, seed);
    let shift = if spec.shift_rotation == 0.0 && spec.shift_offset == 0.0 {
        AffineMap::identity(d)
    } else {
        AffineMap::random(d, spec.shift_rotation, spec.shift_offset, &mut stream(seed, STREAM_SHIFT))
    };
    let loadings = nuisance_basis(d, spec.nuisance_rank, seed);
    let mut noise_rng = stream(seed, STREAM_NOISE + (draw << 8));
    let n = spec.identities * spec.images_per_identity;
    let mut data = Vec::with_capacity(n * d);
    let mut identities = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    for (id, p) in prototypes.iter().enumerate() {
        for k in 0..spec.images_per_identity {
            let c = k % spec.cameras;
            let mut x: Vec<f64> = p
                .iter()
                .map(|&v| v + spec.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            for basis in &loadings {
                let z = spec.nuisance_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                x.iter_mut().zip(basis).for_each(|(v, &b)| *v += z * b);
            }
            data.extend(cams[c].apply(&shift.apply(&x)));
            identities.push(spec.first_identity + id);
            cameras.push(c);
        }
    }
    Ok(LabeledDataset {
        observations: Matrix::from_vec(n, d, data)?,
        identities,
        cameras,
        domain,
        first_identity: spec.first_identity,
        num_identities: spec.identities,
        num_cameras: spec.cameras,
    })
}

/// Orthonormal basis of a random `rank`-dimensional subspace (Gram-Schmidt).
fn nuisance_basis(dim: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, STREAM_NUISANCE);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `extra` identities that [`generate_domain`] never draws but that share the
/// domain's cameras, nuisance subspace and shift. Generation is sequential,
/// so extending the identity count leaves the first `spec.identities`
/// identities untouched; the new ones are returned.
pub fn holdout_identities(spec: &DomainSpec, domain: Domain, seed: u64, extra: usize) -> Result<LabeledDataset> {
    let wide = DomainSpec { identities: spec.identities + extra, ..spec.clone() };
    let all = generate_domain(&wide, domain, seed)?;
    let cut = spec.first_identity + spec.identities;
    let rows: Vec<usize> = (0..all.len()).filter(|&r| all.identities[r] >= cut).collect();
    let mut out = all.select(&rows);
    out.first_identity = cut;
    out.num_identities = extra;
    Ok(out)
}

/// Target evaluation split: one query per (identity, camera), rest gallery.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSplit {
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Benchmark {
    /// Seeds the two domains were generated from (see [`generate_draw`]).
    pub source_seed: u64,
    pub target_seed: u64,
    pub source: LabeledDataset,
    /// Unlabelled training part of the target domain. Identities are kept
    /// for diagnostics (pair precision/recall) only.
    pub target_train: LabeledDataset,
    pub eval: EvalSplit,
}

/// Generates both domains and splits the target identities in half: the
/// first `ceil(M/2)` train, the rest are held out for evaluation.
pub fn make_benchmark(source: &DomainSpec, target: &DomainSpec, seed: u64) -> Result<Benchmark> {
    source.validate()?;
    target.validate()?;
    let disjoint = source.first_identity + source.identities <= target.first_identity
        || target.first_identity + target.identities <= source.first_identity;
    if !disjoint {
        return Err(Error::InvalidSpec("source and target identity ranges overlap".into()));
    }
    if target.identities < 4 {
        return Err(Error::InvalidSpec("target needs at least 4 identities to split".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (source_seed, target_seed) = (seeds.random(), seeds.random());
    let src = generate_domain(source, Domain::Source, source_seed)?;
    let tgt = generate_domain(target, Domain::Target, target_seed)?;
    let train_ids = target.identities.div_ceil(2);
    let cut = target.first_identity + train_ids;
    let train_rows: Vec<usize> = (0..tgt.len()).filter(|&r| tgt.identities[r] < cut).collect();
    let mut query_rows = Vec::new();
    let mut gallery_rows = Vec::new();
    let mut taken = vec![false; target.identities * target.cameras];
    for r in 0..tgt.len() {
        let id = tgt.identities[r];
        if id < cut {
            continue;
        }
        let slot = (id - target.first_identity) * target.cameras + tgt.cameras[r];
        if taken[slot] {
            gallery_rows.push(r);
        } else {
            taken[slot] = true;
            query_rows.push(r);
        }
    }
    let mut query = tgt.select(&query_rows);
    let mut gallery = tgt.select(&gallery_rows);
    for part in [&mut query, &mut gallery] {
        part.first_identity = cut;
        part.num_identities = target.identities - train_ids;
    }
    let mut target_train = tgt.select(&train_rows);
    target_train.num_identities = train_ids;
    Ok(Benchmark {
        source_seed,
        target_seed,
        source: src,
        target_train,
        eval: EvalSplit { query, gallery },
    })
}
