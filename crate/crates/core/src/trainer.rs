//! The class-incremental training loop.
//!
//! A run first pretrains the whole detector on the first task with the
//! memory slots left empty, then freezes the backbone. Because the
//! backbone never changes afterwards, encoder features and memory-free
//! proposals are computed once per image and reused by every later step.
//! Each task then trains the class and box heads, the current memory chunk
//! and the ranking head, with future logits masked out, past class rows
//! masked from the update, and (optionally) confident past-class
//! predictions fed back as pseudo-labels.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{iou, Annotation, BBox};
use crate::detector::{
    predictions, CachedImage, Detector, DetectorConfig, Prediction, QueryMode, Retrieval, CLASS_BIAS, CLASS_WEIGHT,
};
use crate::error::{Error, Result};
use crate::localizer::{query_loss_on, RankingHead};
use crate::loss::{detr_loss_on, total_loss_on, LossWeights};
use crate::matching::{hungarian_match, MatchCost};
use crate::memory::{MemoryPool, PoolShape};
use crate::metrics::{class_aps, continual_map, Detection, TaskReport, IOU_THRESHOLD};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::synth::{splitmix64, TaskStream};
use crate::tape::Tape;
use crate::tensor::{GradientMask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate while the whole detector is trained on the first task.
    pub pretrain_lr: f64,
    pub weight_decay: f64,
    pub bbox_lr_factor: f64,
    pub lambda_q: f64,
    pub delta_bt: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// N_m
    pub n_units: usize,
    /// L_m
    pub memory_length: usize,
    pub use_memory: bool,
    pub use_bt: bool,
    pub use_ql: bool,
    /// Pseudo-labels overlapping an existing box above this IoU are dropped.
    /// The boxes here are small, so a mislocalized duplicate of a labelled
    /// object rarely reaches 0.7.
    pub dedup_iou: f64,
    pub seed: u64,
    /// Architecture; `num_classes` and `memory_length` are taken from the
    /// stream and from this config.
    pub detector: DetectorConfig,
    pub match_cost: MatchCost,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            pretrain_lr: 0.001,
            weight_decay: 0.0004,
            bbox_lr_factor: 0.1,
            lambda_q: 0.01,
            delta_bt: 0.65,
            pretrain_epochs: 50,
            epochs: 25,
            batch_size: 8,
            n_units: 100,
            memory_length: 10,
            use_memory: true,
            use_bt: true,
            use_ql: true,
            dedup_iou: 0.3,
            seed: 0,
            detector: DetectorConfig::default(),
            match_cost: MatchCost::default(),
            loss: LossWeights::default(),
        }
    }
}

/// Ablation component sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Components {
    Ft,
    FtMem,
    FtMemBt,
    FtMemQl,
    FtMemBtQl,
}

impl Components {
    pub const ALL: [Components; 5] = [Self::Ft, Self::FtMem, Self::FtMemBt, Self::FtMemQl, Self::FtMemBtQl];

    pub fn label(self) -> &'static str {
        match self {
            Self::Ft => "FT",
            Self::FtMem => "FT+Mem",
            Self::FtMemBt => "FT+Mem+BT",
            Self::FtMemQl => "FT+Mem+QL",
            Self::FtMemBtQl => "FT+Mem+BT+QL",
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        let (m, b, q) = match self {
            Self::Ft => (false, false, false),
            Self::FtMem => (true, false, false),
            Self::FtMemBt => (true, true, false),
            Self::FtMemQl => (true, false, true),
            Self::FtMemBtQl => (true, true, true),
        };
        config.use_memory = m;
        config.use_bt = b;
        config.use_ql = q;
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.delta_bt) {
            return fail(format!("delta_bt {} outside [0, 1]", self.delta_bt));
        }
        if !(self.bbox_lr_factor > 0.0 && self.bbox_lr_factor <= 1.0) {
            return fail(format!("bbox_lr_factor {} outside (0, 1]", self.bbox_lr_factor));
        }
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if !positive(self.lr)
            || !positive(self.pretrain_lr)
            || !non_negative(self.weight_decay)
            || !non_negative(self.lambda_q)
        {
            return fail("learning rates must be positive, decay and lambda_q non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dedup_iou) {
            return fail(format!("dedup_iou {} outside [0, 1]", self.dedup_iou));
        }
        self.detector_config(1).validate()
    }

    /// Architecture with the class count of the stream and this memory length.
    pub fn detector_config(&self, num_classes: usize) -> DetectorConfig {
        DetectorConfig { num_classes, memory_length: self.memory_length, ..self.detector.clone() }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fields that pretraining depends on; runs agreeing on these can share
    /// one pretrained backbone.
    pub fn pretrain_key(&self) -> String {
        let c = TrainConfig {
            seed: self.seed,
            pretrain_lr: self.pretrain_lr,
            weight_decay: self.weight_decay,
            bbox_lr_factor: self.bbox_lr_factor,
            pretrain_epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            memory_length: self.memory_length,
            detector: self.detector.clone(),
            match_cost: self.match_cost,
            loss: self.loss,
            ..TrainConfig::default()
        };
        c.hash()
    }

    pub fn query_mode(&self) -> QueryMode {
        if self.use_ql {
            QueryMode::Localized
        } else {
            QueryMode::Mean
        }
    }
}

/// Object classes of tasks `0..=t`. The background logit is always visible
/// and is not listed.
pub fn visible_logit_set(t: usize, task_classes: &[Vec<usize>]) -> Result<Vec<usize>> {
    if t >= task_classes.len() {
        return Err(Error::Index(format!("task {t} of {}", task_classes.len())));
    }
    let mut v: Vec<usize> = task_classes[..=t].iter().flatten().copied().collect();
    v.sort_unstable();
    Ok(v)
}

pub fn past_classes(t: usize, task_classes: &[Vec<usize>]) -> Vec<usize> {
    let mut v: Vec<usize> = task_classes[..t.min(task_classes.len())].iter().flatten().copied().collect();
    v.sort_unstable();
    v
}

/// Masks for the class-embedding rows (weight and bias) of every class of
/// tasks before `t`. Empty at the first task; the background row is never
/// included.
pub fn past_class_gradient_mask(
    t: usize,
    task_classes: &[Vec<usize>],
    num_classes: usize,
    dim: usize,
) -> Vec<GradientMask> {
    let past = past_classes(t, task_classes);
    if past.is_empty() {
        return Vec::new();
    }
    vec![
        GradientMask::rows(CLASS_WEIGHT, &[num_classes + 1, dim], past.iter().copied()),
        GradientMask::rows(CLASS_BIAS, &[num_classes + 1], past.iter().copied()),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub image: u64,
}

impl PseudoLabel {
    pub fn annotation(&self) -> Annotation {
        Annotation::new(self.class, self.bbox)
    }
}

/// Pseudo-labels from one image's predictions.
///
/// Each proposal is labelled with its highest-scoring visible object class.
/// It is kept when that class is a past class, its score exceeds `delta`,
/// and its box overlaps no existing annotation or already kept pseudo box
/// above `dedup_iou`. Proposals are visited by descending confidence; at
/// most `limit` labels are kept.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_labels(
    predictions: &[Prediction],
    existing: &[Annotation],
    visible: &[usize],
    past: &[usize],
    delta: f64,
    dedup_iou: f64,
    limit: usize,
    image: u64,
) -> Result<Vec<PseudoLabel>> {
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        if let Some((class, score)) = p.best_among(visible) {
            if past.contains(&class) && score > delta {
                candidates.push((i, class, score));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<PseudoLabel> = Vec::new();
    for (i, class, score) in candidates {
        if kept.len() >= limit {
            break;
        }
        let b = predictions[i].bbox;
        if b.validate().is_err() {
            continue;
        }
        let mut clash = false;
        for other in existing.iter().map(|a| a.bbox).chain(kept.iter().map(|k| k.bbox)) {
            if iou(&b, &other)? > dedup_iou {
                clash = true;
                break;
            }
        }
        if !clash {
            kept.push(PseudoLabel { class, bbox: b, confidence: score, image });
        }
    }
    Ok(kept)
}

/// Everything that learns, plus the class universe.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub detector: Detector,
    pub pool: Option<MemoryPool>,
    pub ranker: RankingHead,
    pub task_classes: Vec<Vec<usize>>,
    pub query_mode: QueryMode,
}

impl Model {
    /// Untrained model for a class universe.
    pub fn new(config: &TrainConfig, task_classes: Vec<Vec<usize>>) -> Result<Self> {
        config.validate()?;
        let n: usize = task_classes.iter().map(Vec::len).sum();
        let detector = Detector::new(config.detector_config(n), splitmix64(config.seed))?;
        Self::assemble(detector, config, task_classes)
    }

    /// Attaches a fresh pool and ranking head to a (pretrained) detector.
    pub fn assemble(detector: Detector, config: &TrainConfig, task_classes: Vec<Vec<usize>>) -> Result<Self> {
        let dim = detector.config().dim;
        let pool = if config.use_memory {
            let shape =
                PoolShape { n_units: config.n_units, length: config.memory_length, dim, n_tasks: task_classes.len() };
            Some(MemoryPool::new(shape, splitmix64(config.seed ^ 0x6d65_6d6f_7279))?)
        } else {
            None
        };
        Ok(Self { detector, pool, ranker: RankingHead::new(dim), task_classes, query_mode: config.query_mode() })
    }

    pub fn retrieval(&self) -> Option<Retrieval<'_>> {
        self.pool.as_ref().map(|pool| Retrieval { pool, ranker: &self.ranker, mode: self.query_mode })
    }

    pub fn num_classes(&self) -> usize {
        self.detector.config().num_classes
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![self.detector.store_mut()];
        if let Some(p) = self.pool.as_mut() {
            v.push(p.store_mut());
        }
        v.push(self.ranker.store_mut());
        v
    }

    pub fn predict_cached(&self, cached: &CachedImage, visible: &[usize]) -> Result<Vec<Prediction>> {
        self.detector.forward_cached(cached, self.retrieval(), visible)
    }

    pub fn predict(&self, image: &Tensor, visible: &[usize]) -> Result<Vec<Prediction>> {
        self.detector.forward(image, self.retrieval(), visible)
    }
}

/// Pseudo-labels for a batch of cached training images with the current
/// parameters. Empty at the first task.
pub fn background_threshold(
    model: &Model,
    batch: &[&CachedSample],
    t: usize,
    delta: f64,
    dedup_iou: f64,
) -> Result<Vec<PseudoLabel>> {
    let past = past_classes(t, &model.task_classes);
    if past.is_empty() {
        return Ok(Vec::new());
    }
    let visible = visible_logit_set(t, &model.task_classes)?;
    let p = model.detector.config().proposals;
    let mut out = Vec::new();
    for s in batch {
        let preds = model.predict_cached(&s.cached, &visible)?;
        let limit = p.saturating_sub(s.annotations.len());
        out.extend(pseudo_labels(&preds, &s.annotations, &visible, &past, delta, dedup_iou, limit, s.id)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedSample {
    pub id: u64,
    pub cached: CachedImage,
    pub annotations: Vec<Annotation>,
}

/// Frozen-backbone outputs for every image of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamCache {
    pub train: Vec<Vec<CachedSample>>,
    pub eval: Vec<Vec<CachedSample>>,
}

impl StreamCache {
    pub fn build(detector: &Detector, stream: &TaskStream) -> Result<Self> {
        let (h, w) = (stream.spec.height, stream.spec.width);
        let run = |imgs: &[crate::synth::SynthImage]| -> Result<Vec<CachedSample>> {
            imgs.par_iter()
                .map(|img| {
                    Ok(CachedSample {
                        id: img.id,
                        cached: detector.cache(&img.to_tensor(h, w)?)?,
                        annotations: img.annotations.clone(),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: stream.tasks.iter().map(|t| run(&t.train)).collect::<Result<_>>()?,
            eval: stream.tasks.iter().map(|t| run(&t.eval)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    /// 1-based.
    pub task: usize,
    /// 1-based.
    pub epoch: usize,
    /// Mean total loss per image.
    pub loss: f64,
    /// Mean query loss per image.
    pub l_q: f64,
    pub n_pseudo_labels: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Check the masking and freezing invariants bit-exactly after every
    /// epoch and every prediction.
    pub test_mode: bool,
    /// Record `wall_ms` as 0 so logs are byte-reproducible.
    pub fixed_clock: bool,
}

struct Clock {
    start: Instant,
    fixed: bool,
}

impl Clock {
    fn new(fixed: bool) -> Self {
        Self { start: Instant::now(), fixed }
    }

    fn ms(&self) -> u64 {
        if self.fixed {
            0
        } else {
            self.start.elapsed().as_millis() as u64
        }
    }
}

fn epoch_order(n: usize, seed: u64, phase: Phase, t: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let tag = ((phase == Phase::Pretrain) as u64) << 63 | (t as u64) << 32 | epoch as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    order.shuffle(&mut rng);
    order
}

/// Adam over the detector with the box head at `lr · bbox_lr_factor`.
pub fn optimizer(detector: &Detector, lr: f64, config: &TrainConfig) -> Adam {
    let mut adam = Adam::new(lr, config.weight_decay);
    for id in detector.box_param_ids() {
        adam.set_lr_factor(id, config.bbox_lr_factor);
    }
    adam
}

/// Trains the whole detector on the training images of task 0 with empty
/// memory slots, then freezes the backbone.
pub fn pretrain(
    detector: &mut Detector,
    stream: &TaskStream,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<Vec<EpochLog>> {
    let samples = stream.training_view(0)?;
    let visible = visible_logit_set(0, &stream.task_classes())?;
    detector.unfreeze_backbone();
    let mut adam = optimizer(detector, config.pretrain_lr, config);
    let scale = 1.0 / config.batch_size as f64;
    let mut logs = Vec::new();
    for epoch in 0..config.pretrain_epochs {
        let clock = Clock::new(options.fixed_clock);
        let mut total = 0.0;
        for batch in epoch_order(samples.len(), config.seed, Phase::Pretrain, 0, epoch).chunks(config.batch_size) {
            for &i in batch {
                let s = &samples[i];
                let mut tape = Tape::new();
                let f = detector.encode_on(&mut tape, &s.image)?;
                let z = detector.decode_on(&mut tape, f, None)?;
                let out = detector.heads_on(&mut tape, z, &visible)?;
                let preds = predictions(&tape, out);
                let assignment = hungarian_match(&preds, &s.annotations, &config.match_cost)?;
                let loss = detr_loss_on(&mut tape, out, &s.annotations, &assignment, &config.loss)?.loss;
                total += tape.scalar(loss);
                let loss = tape.scale(loss, scale)?;
                tape.backward(loss, &mut [detector.store_mut()])?;
            }
            adam.step(&mut [detector.store_mut()], &[])?;
        }
        logs.push(EpochLog {
            phase: Phase::Pretrain,
            task: 1,
            epoch: epoch + 1,
            loss: total / samples.len().max(1) as f64,
            l_q: 0.0,
            n_pseudo_labels: 0,
            wall_ms: clock.ms(),
        });
    }
    detector.freeze_backbone();
    Ok(logs)
}

/// Values that must not move while training task `t`.
struct Frozen {
    backbone: BTreeMap<String, Tensor>,
    class_rows: Vec<(usize, Vec<f64>, f64)>,
    pool: Option<Vec<f64>>,
}

fn masked_values(store: &ParamStore, masks: &[GradientMask]) -> Vec<f64> {
    masks
        .iter()
        .filter_map(|m| store.by_name(&m.param).map(|t| m.indices.iter().map(|&i| t.data()[i]).collect::<Vec<_>>()))
        .flatten()
        .collect()
}

impl Frozen {
    fn capture(model: &Model, t: usize) -> Self {
        let store = model.detector.store();
        let backbone =
            store.snapshot().into_iter().filter(|(n, _)| n.starts_with(crate::detector::BACKBONE_PREFIX)).collect();
        let w = store.by_name(CLASS_WEIGHT).expect("class weight");
        let b = store.by_name(CLASS_BIAS).expect("class bias");
        let class_rows =
            past_classes(t, &model.task_classes).into_iter().map(|c| (c, w.row(c).to_vec(), b.data()[c])).collect();
        let pool = model.pool.as_ref().map(|p| masked_values(p.store(), &p.frozen_masks()));
        Self { backbone, class_rows, pool }
    }

    fn verify(&self, model: &Model, t: usize) -> Result<()> {
        let now = Self::capture(model, t);
        if now.backbone != self.backbone {
            return Err(Error::Invariant(format!("frozen backbone changed during task {}", t + 1)));
        }
        for ((c, w0, b0), (_, w1, b1)) in self.class_rows.iter().zip(&now.class_rows) {
            if w0 != w1 || b0.to_bits() != b1.to_bits() {
                return Err(Error::Invariant(format!("class row {c} of a past task changed during task {}", t + 1)));
            }
        }
        if now.pool != self.pool {
            return Err(Error::Invariant(format!("a frozen memory chunk changed during task {}", t + 1)));
        }
        Ok(())
    }
}

/// Trains task `t` (0-based) from the current model state and returns the
/// epoch logs. The backbone must already be frozen.
pub fn train_task(
    model: &mut Model,
    cache: &StreamCache,
    t: usize,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<Vec<EpochLog>> {
    let samples = cache.train.get(t).ok_or_else(|| Error::Index(format!("task {t} of {}", cache.train.len())))?;
    let visible = visible_logit_set(t, &model.task_classes)?;
    let hidden: Vec<usize> = (0..model.num_classes()).filter(|c| !visible.contains(c)).collect();
    let past = past_classes(t, &model.task_classes);
    let c = model.num_classes();
    let dim = model.detector.config().dim;
    let p = model.detector.config().proposals;

    let mut masks = past_class_gradient_mask(t, &model.task_classes, c, dim);
    if let Some(pool) = model.pool.as_mut() {
        pool.freeze_for_task(t)?;
        masks.extend(pool.frozen_masks());
    }
    let mut adam = optimizer(&model.detector, config.lr, config);
    let frozen = options.test_mode.then(|| Frozen::capture(model, t));
    let with_lq = config.use_ql && model.pool.is_some() && config.lambda_q > 0.0;
    let scale = 1.0 / config.batch_size as f64;

    let mut logs = Vec::new();
    for epoch in 0..config.epochs {
        let clock = Clock::new(options.fixed_clock);
        let (mut total, mut total_q, mut n_pseudo) = (0.0, 0.0, 0usize);
        for batch in epoch_order(samples.len(), config.seed, Phase::Train, t, epoch).chunks(config.batch_size) {
            for &i in batch {
                let s = &samples[i];
                let mut tape = Tape::new();
                let (out, read) =
                    model.detector.forward_cached_on(&mut tape, &s.cached, model.retrieval(), &visible)?;
                let preds = predictions(&tape, out);
                if options.test_mode {
                    if let Some(bad) = preds.iter().find(|pr| hidden.iter().any(|&h| pr.scores[h] != 0.0)) {
                        return Err(Error::Invariant(format!(
                            "future class probability {:?} during task {}",
                            hidden.iter().map(|&h| bad.scores[h]).collect::<Vec<_>>(),
                            t + 1
                        )));
                    }
                }
                let mut truth = s.annotations.clone();
                if config.use_bt && !past.is_empty() {
                    // The training forward already holds the current model's
                    // predictions for this image.
                    let limit = p.saturating_sub(truth.len());
                    let labels =
                        pseudo_labels(&preds, &truth, &visible, &past, config.delta_bt, config.dedup_iou, limit, s.id)?;
                    n_pseudo += labels.len();
                    truth.extend(labels.iter().map(PseudoLabel::annotation));
                }
                let assignment = hungarian_match(&preds, &truth, &config.match_cost)?;
                let detr = detr_loss_on(&mut tape, out, &truth, &assignment, &config.loss)?.loss;
                let lq = match read {
                    Some(r) if with_lq && !assignment.is_empty() => {
                        Some(query_loss_on(&mut tape, r.alpha, &assignment.matched_proposals())?)
                    }
                    _ => None,
                };
                if let Some(lq) = lq {
                    total_q += tape.scalar(lq);
                }
                let loss = total_loss_on(&mut tape, detr, lq, config.lambda_q)?;
                total += tape.scalar(loss);
                let loss = tape.scale(loss, scale)?;
                tape.backward(loss, &mut model.stores_mut())?;
            }
            adam.step(&mut model.stores_mut(), &masks)?;
        }
        if let Some(f) = &frozen {
            f.verify(model, t)?;
        }
        let n = samples.len().max(1) as f64;
        logs.push(EpochLog {
            phase: Phase::Train,
            task: t + 1,
            epoch: epoch + 1,
            loss: total / n,
            l_q: total_q / n,
            n_pseudo_labels: n_pseudo,
            wall_ms: clock.ms(),
        });
    }
    Ok(logs)
}

/// mAP splits after task `t` over the evaluation images of tasks `0..=t`,
/// with every seen class visible. Each proposal is a candidate detection
/// for every seen class, scored by that class's probability.
pub fn evaluate(model: &Model, cache: &StreamCache, t: usize) -> Result<TaskReport> {
    let visible = visible_logit_set(t, &model.task_classes)?;
    let images: Vec<&CachedSample> = cache.eval[..=t].iter().flatten().collect();
    let preds: Vec<Vec<Prediction>> =
        images.par_iter().map(|s| model.predict_cached(&s.cached, &visible)).collect::<Result<_>>()?;
    let mut detections = Vec::new();
    for (i, ps) in preds.iter().enumerate() {
        for p in ps {
            for &class in &visible {
                detections.push(Detection { image: i, class, score: p.scores[class], bbox: p.bbox });
            }
        }
    }
    let truth: Vec<Vec<Annotation>> = images.iter().map(|s| s.annotations.clone()).collect();
    let aps = class_aps(&visible, &detections, &truth, IOU_THRESHOLD)?;
    Ok(TaskReport { task: t + 1, map: continual_map(&aps, t, &model.task_classes)?, class_ap: aps })
}

/// A detector after pretraining together with the cached stream.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub detector: Detector,
    pub cache: StreamCache,
    pub logs: Vec<EpochLog>,
}

pub fn pretrain_stream(stream: &TaskStream, config: &TrainConfig, options: RunOptions) -> Result<Pretrained> {
    config.validate()?;
    stream.spec.validate()?;
    let mut detector = Detector::new(config.detector_config(stream.spec.num_classes()), splitmix64(config.seed))?;
    let logs = pretrain(&mut detector, stream, config, options)?;
    let cache = StreamCache::build(&detector, stream)?;
    Ok(Pretrained { detector, cache, logs })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub reports: Vec<TaskReport>,
    pub logs: Vec<EpochLog>,
}

/// Trains tasks `0..n_tasks` in order from a pretrained detector,
/// evaluating after each. `after_task` sees the model and report of each
/// finished task.
pub fn run_from_pretrained(
    pretrained: &Pretrained,
    stream: &TaskStream,
    config: &TrainConfig,
    n_tasks: usize,
    options: RunOptions,
    mut after_task: impl FnMut(usize, &Model, &TaskReport) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    if n_tasks == 0 || n_tasks > stream.n_tasks() {
        return Err(Error::Config(format!("cannot train {n_tasks} of {} tasks", stream.n_tasks())));
    }
    let model = Model::assemble(pretrained.detector.clone(), config, stream.task_classes())?;
    let mut out = run_tasks(model, &pretrained.cache, config, 0..n_tasks, options, &mut after_task)?;
    let mut logs = pretrained.logs.clone();
    logs.append(&mut out.logs);
    out.logs = logs;
    Ok(out)
}

/// Trains and evaluates tasks `tasks` (0-based) in order, starting from
/// `model` as left by the task before `tasks.start`.
pub fn run_tasks(
    mut model: Model,
    cache: &StreamCache,
    config: &TrainConfig,
    tasks: std::ops::Range<usize>,
    options: RunOptions,
    mut after_task: impl FnMut(usize, &Model, &TaskReport) -> Result<()>,
) -> Result<RunOutput> {
    if tasks.end > cache.train.len() {
        return Err(Error::Config(format!("cannot train up to task {} of {}", tasks.end, cache.train.len())));
    }
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    for t in tasks {
        logs.extend(train_task(&mut model, cache, t, config, options)?);
        let report = evaluate(&model, cache, t)?;
        after_task(t, &model, &report)?;
        reports.push(report);
    }
    Ok(RunOutput { model, reports, logs })
}

/// Pretrains, then trains and evaluates every task of the stream.
pub fn run_stream(stream: &TaskStream, config: &TrainConfig, options: RunOptions) -> Result<RunOutput> {
    let pre = pretrain_stream(stream, config, options)?;
    run_from_pretrained(&pre, stream, config, stream.n_tasks(), options, |_, _, _| Ok(()))
}
