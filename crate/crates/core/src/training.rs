//! The coupling-optimization loop.
//!
//! Every epoch starts with label prediction on the memory bank. Every
//! iteration then takes one Adam step on the discriminator (encoder frozen),
//! one joint step on the encoder and classifier for
//! `CE + λ_DIM·DIM + λ_GO·GO + λ_LO·LO` (discriminator frozen), and blends
//! the live target features into the bank.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera_weighting::CameraGapTable;
use crate::embedding::{Domain, EpochClock, FeatureBank};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult};
use crate::label_prediction::{
    density_cluster, k_reciprocal_distance, pair_metrics, select_positive_pairs, AnnotationMatrix, ClusterAssignment,
};
use crate::linalg::{dot, Matrix};
use crate::models::{AdamState, ClassifierHead, DiscriminatorModel, EncoderModel};
use crate::objectives::{ce_loss, dim_loss, dnet_loss, go_loss, lo_loss, Block, PairMask};
use crate::synthetic::{Benchmark, EvalSplit, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// DIM + GLO with source cross-entropy.
    Adaptive,
    /// Target data and GLO only.
    Unsupervised,
    /// Source cross-entropy only.
    DirectTransfer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::Unsupervised => "unsupervised",
            Mode::DirectTransfer => "direct-transfer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Mode::Adaptive),
            "unsupervised" => Ok(Mode::Unsupervised),
            "direct-transfer" => Ok(Mode::DirectTransfer),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (expected adaptive, unsupervised or direct-transfer)"
            ))),
        }
    }

    fn uses_source(self) -> bool {
        self != Mode::Unsupervised
    }

    fn uses_target(self) -> bool {
        self != Mode::DirectTransfer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Distance threshold on positive pairs.
    pub alpha: f64,
    /// Similarity temperature.
    pub beta: f64,
    pub lambda_go: f64,
    pub lambda_lo: f64,
    pub lambda_dim: f64,
    /// Keep augmented copies of one target image out of each other's LO
    /// negatives; `false` treats every other batch row as a negative.
    pub lo_mask_siblings: bool,
    pub source_batch: usize,
    pub target_batch: usize,
    /// Augmented copies per target image.
    pub augment_copies: usize,
    /// Standard deviation of the input-space augmentation noise.
    pub augment_sigma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// First (1-based) epoch whose loss includes GO.
    pub go_start_epoch: usize,
    /// k-reciprocal neighborhood size; `None` picks `min(20, N/4)`.
    pub k1: Option<usize>,
    /// Query-expansion size; `None` picks `min(6, k1)`.
    pub k2: Option<usize>,
    pub lambda_rr: f64,
    pub min_cluster_size: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub dnet_hidden: usize,
    /// Evaluate on the target eval split every this many epochs; 0 only
    /// evaluates after the last epoch.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Adaptive,
            alpha: 0.5,
            beta: 0.05,
            lambda_go: 0.1,
            lambda_lo: 1.0,
            lambda_dim: 0.05,
            lo_mask_siblings: true,
            source_batch: 32,
            target_batch: 16,
            augment_copies: 3,
            augment_sigma: 0.05,
            epochs: 60,
            lr: 3.5e-4,
            lr_decay: 0.1,
            lr_decay_every: 20,
            go_start_epoch: 6,
            k1: None,
            k2: None,
            lambda_rr: 0.3,
            min_cluster_size: 4,
            hidden_dims: vec![64],
            feature_dim: 64,
            dnet_hidden: 64,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the default synthetic benchmark. GO and LO are sums
    /// over the anchors of a batch while the cross-entropy and domain terms
    /// are means, so at small scale the loss weights need rebalancing; the
    /// shorter schedule with a larger step fits the small encoder.
    pub fn desk() -> Self {
        Self {
            lambda_go: 1.0,
            lambda_lo: 0.01,
            lambda_dim: 50.0,
            epochs: 30,
            lr: 2e-3,
            lr_decay_every: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let lambdas = [self.lambda_go, self.lambda_lo, self.lambda_dim];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return fail("loss weights must be finite and >= 0");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if self.source_batch == 0 || self.target_batch == 0 {
            return fail("batch sizes must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return fail("lr, lr_decay and lr_decay_every must be positive");
        }
        if !(self.augment_sigma >= 0.0 && self.augment_sigma.is_finite()) {
            return fail("augment_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.lambda_rr) {
            return fail("lambda_rr must lie in [0, 1]");
        }
        if self.min_cluster_size < 2 {
            return fail("min_cluster_size must be >= 2");
        }
        if self.feature_dim == 0 || self.dnet_hidden == 0 || self.hidden_dims.contains(&0) {
            return fail("layer sizes must be >= 1");
        }
        Ok(())
    }

    /// Settings actually used for `mode`: unsupervised training has no
    /// source data, so the domain term is forced off.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match c.mode {
            Mode::Unsupervised => c.lambda_dim = 0.0,
            Mode::DirectTransfer => {
                c.lambda_dim = 0.0;
                c.lambda_go = 0.0;
                c.lambda_lo = 0.0;
            }
            Mode::Adaptive => {}
        }
        c
    }

    fn neighborhood(&self, n: usize) -> (usize, usize) {
        let k1 = self.k1.unwrap_or((n / 4).clamp(1, 20)).min(n.saturating_sub(1));
        let k2 = self.k2.unwrap_or(6).min(k1).max(1);
        (k1, k2)
    }
}

/// Learning rate for a zero-based epoch: `lr · decay^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

/// Uniform sampling without replacement within a shuffled pass; a new pass
/// starts when fewer than the requested number of items remain.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n > self.order.len() {
            return Err(Error::BatchLargerThanSet { requested: n, available: self.order.len() });
        }
        if self.cursor + n > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        Ok(out)
    }
}

/// One training batch. Target rows are grouped per instance: the original
/// image, then its augmented copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_rows: Matrix<f64>,
    pub source_labels: Vec<usize>,
    pub target_rows: Matrix<f64>,
    /// Bank row of each target row; shared by an image and its copies.
    pub target_index: Vec<usize>,
    pub target_cameras: Vec<usize>,
    pub target_original: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_rows.rows() + self.target_rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adds `N(0, σ²)` noise to every coordinate and rescales back to the
/// original norm.
pub fn augment<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let norm = dot(x, x).sqrt();
    let mut y: Vec<f64> = x.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let ny = dot(&y, &y).sqrt();
    if ny > 0.0 {
        y.iter_mut().for_each(|v| *v *= norm / ny);
    }
    y
}

/// Draws the next batch from the two samplers. Either set may be absent.
pub fn sample_batch<R: Rng + ?Sized>(
    source: Option<(&LabeledDataset, &mut EpochSampler)>,
    target: Option<(&LabeledDataset, &mut EpochSampler)>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut batch = Batch {
        source_rows: Matrix::zeros(0, 0),
        source_labels: Vec::new(),
        target_rows: Matrix::zeros(0, 0),
        target_index: Vec::new(),
        target_cameras: Vec::new(),
        target_original: Vec::new(),
    };
    if let Some((set, sampler)) = source {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let idx = sampler.next(config.source_batch, rng)?;
        let labels = set.local_labels();
        batch.source_rows = set.observations.select_rows(&idx);
        batch.source_labels = idx.iter().map(|&i| labels[i]).collect();
    }
    if let Some((set, sampler)) = target {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let idx = sampler.next(config.target_batch, rng)?;
        let per = 1 + config.augment_copies;
        let d = set.observations.cols();
        let mut data = Vec::with_capacity(idx.len() * per * d);
        for &i in &idx {
            let x = set.observations.row(i);
            data.extend_from_slice(x);
            for _ in 0..config.augment_copies {
                data.extend(augment(x, config.augment_sigma, rng));
            }
            for c in 0..per {
                batch.target_index.push(i);
                batch.target_cameras.push(set.cameras[i]);
                batch.target_original.push(c == 0);
            }
        }
        batch.target_rows = Matrix::from_vec(idx.len() * per, d, data)?;
    }
    Ok(batch)
}

/// Unweighted loss values of one iteration (or their epoch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub ce: f64,
    pub dim: f64,
    pub dnet: f64,
    pub go: f64,
    pub lo: f64,
    /// Weighted objective the encoder step descended.
    pub total: f64,
}

impl LossValues {
    fn add(&mut self, o: &Self) {
        self.ce += o.ce;
        self.dim += o.dim;
        self.dnet += o.dnet;
        self.go += o.go;
        self.lo += o.lo;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.ce, &mut self.dim, &mut self.dnet, &mut self.go, &mut self.lo, &mut self.total] {
            *v *= s;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub loss_ce: f64,
    pub loss_dim: f64,
    pub loss_dnet: f64,
    pub loss_go: f64,
    pub loss_lo: f64,
    pub loss_total: f64,
    pub clusters: usize,
    pub noise: usize,
    pub predicted_pairs: usize,
    pub pair_precision: Option<f64>,
    pub pair_recall: Option<f64>,
    pub base_weight: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
}

/// Datasets a run draws on. `source`/`target` are required by the modes that
/// use them.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: Option<&'a LabeledDataset>,
    pub target: Option<&'a LabeledDataset>,
    pub eval: Option<&'a EvalSplit>,
}

impl<'a> From<&'a Benchmark> for TrainData<'a> {
    fn from(b: &'a Benchmark) -> Self {
        Self {
            source: Some(&b.source),
            target: Some(&b.target_train),
            eval: Some(&b.eval),
        }
    }
}

/// Gradients of the encoder objective for one batch, before any step.
#[derive(Debug, Clone)]
pub struct EncoderStep {
    pub losses: LossValues,
    pub encoder: Vec<f64>,
    pub classifier: Option<Vec<f64>>,
    /// Weighted GO gradient with respect to the target features (zero when
    /// GO is gated off).
    pub go_feature_grad: Matrix<f64>,
    /// Target features of the forward pass (pre-step).
    pub target_features: Matrix<f64>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: EncoderModel<f64>,
    pub dnet: DiscriminatorModel<f64>,
    pub classifier: Option<ClassifierHead<f64>>,
    pub adam_encoder: AdamState<f64>,
    pub adam_dnet: AdamState<f64>,
    pub adam_classifier: Option<AdamState<f64>>,
    pub bank: Option<FeatureBank<f64>>,
    pub annotation: AnnotationMatrix,
    pub clusters: Option<ClusterAssignment>,
    pub gaps: Option<CameraGapTable<f64>>,
    pub clock: EpochClock,
    annotated_epoch: usize,
    rng: ChaCha8Rng,
    source_sampler: Option<EpochSampler>,
    target_sampler: Option<EpochSampler>,
    pub history: Vec<EpochMetrics>,
}

const STREAM_ENCODER: u64 = 1;
const STREAM_DNET: u64 = 2;
const STREAM_CLASSIFIER: u64 = 3;
const STREAM_BATCHES: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl TrainState {
    /// Builds models, the memory bank (features of the untrained encoder)
    /// and the camera-gap table.
    pub fn init(config: &TrainConfig, data: TrainData<'_>) -> Result<Self> {
        config.validate()?;
        let config = config.effective();
        let mode = config.mode;
        let source = if mode.uses_source() { Some(data.source.ok_or(Error::EmptyDomain)?) } else { None };
        let target = if mode.uses_target() { Some(data.target.ok_or(Error::EmptyDomain)?) } else { None };
        let input_dim = source
            .or(target)
            .map(|s| s.observations.cols())
            .ok_or(Error::EmptyDomain)?;
        if let (Some(s), Some(t)) = (source, target) {
            if s.observations.cols() != t.observations.cols() {
                return Err(Error::DimensionMismatch { expected: s.observations.cols(), got: t.observations.cols() });
            }
        }
        let encoder = EncoderModel::init(input_dim, &config.hidden_dims, config.feature_dim, &mut stream(config.seed, STREAM_ENCODER))?;
        let dnet = DiscriminatorModel::init(config.feature_dim, config.dnet_hidden, &mut stream(config.seed, STREAM_DNET))?;
        let classifier = match source {
            Some(s) => Some(ClassifierHead::init(config.feature_dim, s.num_identities, &mut stream(config.seed, STREAM_CLASSIFIER))?),
            None => None,
        };
        let (bank, gaps) = match target {
            Some(t) => {
                if t.is_empty() {
                    return Err(Error::EmptySet);
                }
                let feats = encoder.embed(&t.observations)?;
                let gaps = CameraGapTable::estimate(&feats, &t.cameras, t.num_cameras)?;
                let bank = FeatureBank::new(&feats, t.cameras.clone(), vec![Domain::Target; t.len()])?;
                (Some(bank), Some(gaps))
            }
            None => (None, None),
        };
        let n_target = target.map_or(0, |t| t.len());
        Ok(Self {
            adam_encoder: AdamState::new(encoder.net.num_params(), config.lr),
            adam_dnet: AdamState::new(dnet.net.num_params(), config.lr),
            adam_classifier: classifier.as_ref().map(|c| AdamState::new(c.net.num_params(), config.lr)),
            encoder,
            dnet,
            classifier,
            bank,
            annotation: AnnotationMatrix::empty(n_target),
            clusters: None,
            gaps,
            clock: EpochClock::new(),
            annotated_epoch: 0,
            rng: stream(config.seed, STREAM_BATCHES),
            source_sampler: source.map(|s| EpochSampler::new(s.len())),
            target_sampler: target.map(|t| EpochSampler::new(t.len())),
            history: Vec::new(),
            config,
        })
    }

    /// Clusters the bank and refreshes the annotation and base weight.
    pub fn predict_labels(&mut self) -> Result<()> {
        let Some(bank) = &self.bank else {
            self.annotated_epoch = self.clock.epoch;
            return Ok(());
        };
        let (k1, k2) = self.config.neighborhood(bank.len());
        let (annotation, clusters) = if bank.len() < 2 || k1 == 0 {
            (AnnotationMatrix::empty(bank.len()), ClusterAssignment { labels: vec![-1; bank.len()] })
        } else {
            let dist = k_reciprocal_distance(bank.features(), k1, k2, self.config.lambda_rr)?;
            let clusters = density_cluster(&dist, self.config.min_cluster_size)?;
            (select_positive_pairs(&clusters, &dist, self.config.alpha)?, clusters)
        };
        if let Some(g) = &mut self.gaps {
            g.rebase(&annotation, bank.camera_ids())?;
        }
        self.annotation = annotation;
        self.clusters = Some(clusters);
        self.annotated_epoch = self.clock.epoch;
        Ok(())
    }

    /// Whether GO contributes in the current epoch.
    pub fn go_active(&self) -> bool {
        self.config.lambda_go > 0.0 && self.clock.epoch >= self.config.go_start_epoch && self.annotation.has_pairs()
    }

    /// Draws the next batch for this state's mode.
    pub fn next_batch(&mut self, data: TrainData<'_>) -> Result<Batch> {
        let source = match (&mut self.source_sampler, data.source) {
            (Some(s), Some(d)) => Some((d, s)),
            _ => None,
        };
        let target = match (&mut self.target_sampler, data.target) {
            (Some(s), Some(d)) => Some((d, s)),
            _ => None,
        };
        sample_batch(source, target, &self.config, &mut self.rng)
    }

    fn check_annotation(&self) -> Result<()> {
        if self.annotated_epoch != self.clock.epoch || self.clock.epoch == 0 {
            return Err(Error::StaleAnnotation { annotated: self.annotated_epoch, current: self.clock.epoch });
        }
        Ok(())
    }

    fn features(&self, batch: &Batch) -> Result<(Matrix<f64>, crate::models::EncoderCache<f64>)> {
        let x = match (batch.source_rows.rows(), batch.target_rows.rows()) {
            (0, _) => batch.target_rows.clone(),
            (_, 0) => batch.source_rows.clone(),
            _ => batch.source_rows.vstack(&batch.target_rows)?,
        };
        self.encoder.forward(&x)
    }

    /// One discriminator step on `features` (source rows first). Returns the
    /// discriminator loss before the step.
    fn dnet_step(&mut self, features: &Matrix<f64>, ns: usize) -> Result<f64> {
        let (scores, cache) = self.dnet.forward(features)?;
        let mut l = dnet_loss(&scores[..ns], &scores[ns..])?;
        let mut g = l.take(Block::SourceScores).into_vec();
        g.extend(l.take(Block::TargetScores).into_vec());
        let (pg, _) = self.dnet.backward(&cache, &g)?;
        self.adam_dnet.step(self.dnet.net.params_mut(), &pg)?;
        Ok(l.value)
    }

    /// Gradients of the encoder/classifier objective on `batch` with the
    /// current (frozen) discriminator.
    pub fn encoder_step(&self, batch: &Batch) -> Result<EncoderStep> {
        let c = &self.config;
        let (feats, cache) = self.features(batch)?;
        let ns = batch.source_rows.rows();
        let nt = batch.target_rows.rows();
        let d = feats.cols();
        let mut grad = Matrix::zeros(feats.rows(), d);
        let mut losses = LossValues::default();
        let source_feats = feats.select_rows(&(0..ns).collect::<Vec<_>>());
        let target_feats = feats.select_rows(&(ns..ns + nt).collect::<Vec<_>>());

        let mut classifier_grad = None;
        if let (Some(head), true) = (&self.classifier, ns > 0) {
            let (logits, hc) = head.forward(&source_feats)?;
            let mut l = ce_loss(&logits, &batch.source_labels)?;
            let (pg, fg) = head.backward(&hc, &l.take(Block::Logits))?;
            for r in 0..ns {
                grad.row_mut(r).copy_from_slice(fg.row(r));
            }
            losses.ce = l.value;
            losses.total += l.value;
            classifier_grad = Some(pg);
        }

        if c.lambda_dim > 0.0 && ns > 0 && nt > 0 {
            let (scores, dc) = self.dnet.forward(&feats)?;
            let mut l = dim_loss(&scores[..ns], &scores[ns..])?;
            let mut g = l.take(Block::SourceScores).into_vec();
            g.extend(l.take(Block::TargetScores).into_vec());
            let (_, fg) = self.dnet.backward(&dc, &g)?;
            grad.add_scaled(&fg, c.lambda_dim)?;
            losses.dim = l.value;
            losses.total += c.lambda_dim * l.value;
        }

        let mut go_feature_grad = Matrix::zeros(nt, d);
        if nt > 0 {
            if let (true, Some(bank), Some(gaps)) = (self.go_active(), &self.bank, &self.gaps) {
                let mut l = go_loss(&target_feats, &batch.target_index, bank, &self.annotation, gaps, c.beta)?;
                go_feature_grad = l.take(Block::Anchors);
                go_feature_grad.scale(c.lambda_go);
                losses.go = l.value;
                losses.total += c.lambda_go * l.value;
            }
            let mut lo_grad = Matrix::zeros(nt, d);
            if c.lambda_lo > 0.0 {
                let mask = if c.lo_mask_siblings {
                    PairMask::from_instance_ids(&batch.target_index)
                } else {
                    PairMask::diagonal(nt)
                };
                let mut l = lo_loss(&target_feats, &mask, c.beta)?;
                lo_grad = l.take(Block::Batch);
                lo_grad.scale(c.lambda_lo);
                losses.lo = l.value;
                losses.total += c.lambda_lo * l.value;
            }
            for r in 0..nt {
                let g = grad.row_mut(ns + r);
                for ((x, &a), &b) in g.iter_mut().zip(go_feature_grad.row(r)).zip(lo_grad.row(r)) {
                    *x += a + b;
                }
            }
        }

        let encoder = self.encoder.backward(&cache, &grad)?;
        Ok(EncoderStep {
            losses,
            encoder,
            classifier: classifier_grad,
            go_feature_grad,
            target_features: target_feats,
        })
    }

    /// One iteration: discriminator step, encoder/classifier step, bank update.
    pub fn train_iteration(&mut self, batch: &Batch) -> Result<LossValues> {
        self.check_annotation()?;
        let ns = batch.source_rows.rows();
        let nt = batch.target_rows.rows();
        let mut dnet_value = 0.0;
        if self.config.mode == Mode::Adaptive && ns > 0 && nt > 0 {
            let (feats, _) = self.features(batch)?;
            dnet_value = self.dnet_step(&feats, ns)?;
        }
        let step = self.encoder_step(batch)?;
        self.adam_encoder.step(self.encoder.net.params_mut(), &step.encoder)?;
        if let (Some(head), Some(adam), Some(g)) = (&mut self.classifier, &mut self.adam_classifier, &step.classifier) {
            adam.step(head.net.params_mut(), g)?;
        }
        if let Some(bank) = &mut self.bank {
            let (idx, fresh) = instance_means(&batch.target_index, &step.target_features)?;
            bank.update(&idx, &fresh, &self.clock)?;
        }
        self.clock.tick();
        Ok(LossValues { dnet: dnet_value, ..step.losses })
    }

    fn set_lr(&mut self, lr: f64) {
        self.adam_encoder.lr = lr;
        self.adam_dnet.lr = lr;
        if let Some(a) = &mut self.adam_classifier {
            a.lr = lr;
        }
    }

    /// Embeds the eval split and scores retrieval.
    pub fn evaluate(&self, split: &EvalSplit) -> Result<EvalResult> {
        let q = self.encoder.embed(&split.query.observations)?;
        let g = self.encoder.embed(&split.gallery.observations)?;
        evaluate(&q, &split.query.meta(), &g, &split.gallery.meta())
    }

    /// Label prediction, then one pass over the driving set.
    pub fn train_epoch(&mut self, data: TrainData<'_>) -> Result<EpochMetrics> {
        self.clock.start_epoch();
        let epoch = self.clock.epoch;
        let lr = lr_schedule(epoch - 1, &self.config);
        self.set_lr(lr);
        self.predict_labels()?;
        let iterations = match (data.target, self.target_sampler.is_some(), data.source) {
            (Some(t), true, _) => t.len() / self.config.target_batch,
            (_, _, Some(s)) => s.len() / self.config.source_batch,
            _ => return Err(Error::EmptyDomain),
        }
        .max(1);
        let mut sum = LossValues::default();
        for _ in 0..iterations {
            let batch = self.next_batch(data)?;
            sum.add(&self.train_iteration(&batch)?);
        }
        let mean = sum.scaled(1.0 / iterations as f64);

        let pairs = match (data.target, self.bank.is_some()) {
            (Some(t), true) => Some(pair_metrics(&self.annotation, &t.identities)?),
            _ => None,
        };
        let last = epoch == self.config.epochs;
        let due = self.config.eval_every > 0 && epoch % self.config.eval_every == 0;
        let eval = match data.eval {
            Some(split) if due || last => Some(self.evaluate(split)?),
            _ => None,
        };
        let clusters = self.clusters.as_ref();
        let m = EpochMetrics {
            epoch,
            lr,
            iterations,
            loss_ce: mean.ce,
            loss_dim: mean.dim,
            loss_dnet: mean.dnet,
            loss_go: mean.go,
            loss_lo: mean.lo,
            loss_total: mean.total,
            clusters: clusters.map_or(0, |c| c.num_clusters()),
            noise: clusters.map_or(0, |c| c.num_noise()),
            predicted_pairs: self.annotation.num_pairs(),
            pair_precision: pairs.map(|p| p.precision),
            pair_recall: pairs.map(|p| p.recall),
            base_weight: self.gaps.as_ref().map(|g| g.base_weight),
            rank1: eval.as_ref().map(|e| e.rank1),
            rank5: eval.as_ref().map(|e| e.rank5),
            rank10: eval.as_ref().map(|e| e.rank10),
            map: eval.as_ref().map(|e| e.map),
        };
        self.history.push(m.clone());
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub final_eval: Option<EvalResult>,
}

/// Runs `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    config: &TrainConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<(TrainState, TrainOutcome)> {
    let mut state = TrainState::init(config, data)?;
    for _ in 0..state.config.epochs {
        let m = state.train_epoch(data)?;
        on_epoch(&state, &m)?;
    }
    let final_eval = match data.eval {
        Some(split) => Some(state.evaluate(split)?),
        None => None,
    };
    let history = state.history.clone();
    Ok((state, TrainOutcome { history, final_eval }))
}

/// Mean `|score - 0.5|` of the discriminator over the given feature sets.
/// Mean live feature per target instance (original and its augmented
/// copies), in order of first appearance.
fn instance_means(index: &[usize], features: &Matrix<f64>) -> Result<(Vec<usize>, Matrix<f64>)> {
    let mut order: Vec<usize> = Vec::new();
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (r, &i) in index.iter().enumerate() {
        let k = match order.iter().position(|&o| o == i) {
            Some(k) => k,
            None => {
                order.push(i);
                sums.push((vec![0.0; features.cols()], 0));
                order.len() - 1
            }
        };
        sums[k].0.iter_mut().zip(features.row(r)).for_each(|(a, &b)| *a += b);
        sums[k].1 += 1;
    }
    let data = sums.into_iter().flat_map(|(v, n)| v.into_iter().map(move |x| x / n as f64)).collect();
    Ok((order.clone(), Matrix::from_vec(order.len(), features.cols(), data)?))
}

pub fn dnet_confusion(dnet: &DiscriminatorModel<f64>, sets: &[&Matrix<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in sets {
        for v in dnet.scores(s)? {
            total += (v - 0.5).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    Ok(total / n as f64)
}

/// Trains a fresh discriminator to separate `train_src` (score 1) from
/// `train_tgt` (score 0) with full-batch Adam, then reports its balanced
/// accuracy (threshold 0.5) on the held-out sets.
pub fn probe_domain_accuracy(
    train_src: &Matrix<f64>,
    train_tgt: &Matrix<f64>,
    held_src: &Matrix<f64>,
    held_tgt: &Matrix<f64>,
    hidden: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut probe = DiscriminatorModel::init(train_src.cols(), hidden, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut adam = AdamState::new(probe.net.num_params(), 1e-2);
    let x = train_src.vstack(train_tgt)?;
    let ns = train_src.rows();
    for _ in 0..steps {
        let (scores, cache) = probe.forward(&x)?;
        let mut l = dnet_loss(&scores[..ns], &scores[ns..])?;
        let mut g = l.take(Block::SourceScores).into_vec();
        g.extend(l.take(Block::TargetScores).into_vec());
        let (pg, _) = probe.backward(&cache, &g)?;
        adam.step(probe.net.params_mut(), &pg)?;
    }
    let acc = |m: &Matrix<f64>, src: bool| -> Result<f64> {
        let s = probe.scores(m)?;
        if s.is_empty() {
            return Err(Error::EmptySet);
        }
        Ok(s.iter().filter(|&&v| (v > 0.5) == src).count() as f64 / s.len() as f64)
    };
    Ok(0.5 * (acc(held_src, true)? + acc(held_tgt, false)?))
}
