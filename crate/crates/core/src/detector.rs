//! A small deformable detector: patch encoder with self-attention, a
//! decoder of learned proposal queries that cross-attend through sampled
//! deformable points plus memory prefix slots, and class and box heads.
//!
//! Parameter names under `backbone.` form the part that is trained once and
//! then frozen. `class_embed.` and `bbox_embed.` stay trainable.

mod attention;

pub use attention::{
    deformable_attention_on, memory_attention_weights, memory_deformable_attention_on, HeadVars, PlainHeadVars,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::localizer::{localized_query_on, RankingHead};
use crate::memory::MemoryPool;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DETECTOR_TAG: u8 = 0;
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const CLASS_WEIGHT: &str = "class_embed.weight";
pub const CLASS_BIAS: &str = "class_embed.bias";
pub const BOX_PREFIX: &str = "bbox_embed.";

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub proposals: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Object classes; the class head has one extra background logit.
    pub num_classes: usize,
    /// Rows of a memory readout (half keys, half values). Zero disables the
    /// memory slots.
    pub memory_length: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            points: 4,
            proposals: 12,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 64,
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 4,
            num_classes: 8,
            memory_length: 10,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.points == 0 || self.proposals == 0 {
            return fail("dim, heads, points and proposals must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch == 0
            || !self.image_height.is_multiple_of(self.patch)
            || !self.image_width.is_multiple_of(self.patch)
        {
            return fail(format!(
                "patch {} must divide the {}×{} image",
                self.patch, self.image_height, self.image_width
            ));
        }
        if self.grid().0 < 2 || self.grid().1 < 2 {
            return fail("feature grid must be at least 2×2".into());
        }
        if !self.memory_length.is_multiple_of(2) {
            return fail(format!("memory length {} is odd", self.memory_length));
        }
        if !self.dim.is_multiple_of(4) {
            return fail(format!("dim {} must be a multiple of 4", self.dim));
        }
        Ok(())
    }

    /// Feature grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct CrossHeadIds {
    offset_w: ParamId,
    offset_b: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    out: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayerIds {
    self_attn: AttnIds,
    cross: Vec<CrossHeadIds>,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    patch_w: ParamId,
    patch_b: ParamId,
    encoder: Vec<(AttnIds, FfnIds)>,
    query_embed: ParamId,
    ref_logits: ParamId,
    decoder: Vec<DecoderLayerIds>,
    class_w: ParamId,
    class_b: ParamId,
    box_w1: ParamId,
    box_b1: ParamId,
    box_w2: ParamId,
    box_b2: ParamId,
}

/// Class probabilities over the object classes plus background (last
/// entry) and a normalized `(cx, cy, w, h)` box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub bbox: BBox,
}

impl Prediction {
    /// Highest-scoring object class among `classes` (background excluded).
    pub fn best_among(&self, classes: &[usize]) -> Option<(usize, f64)> {
        classes.iter().map(|&c| (c, self.scores[c])).fold(None, |best, (c, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((c, s)),
        })
    }
}

/// Memory-free outputs of the frozen part for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedImage {
    /// Encoder feature map, rows × cols × D.
    pub features: Tensor,
    /// Decoder outputs of the memory-free pass, P × D.
    pub proposals: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryMode {
    /// Uniform average of the proposals.
    Mean,
    /// Ranking-head weighted average of the proposals.
    Localized,
}

/// Everything needed to read from memory for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Retrieval<'a> {
    pub pool: &'a MemoryPool,
    pub ranker: &'a RankingHead,
    pub mode: QueryMode,
}

/// Tape values produced by the heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// P × (C+1) probabilities.
    pub scores: Var,
    /// P × 4 boxes.
    pub boxes: Var,
}

/// Tape values of a memory read.
#[derive(Clone, Copy, Debug)]
pub struct MemoryRead {
    pub alpha: Var,
    pub weights: Var,
    pub readout: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    store: ParamStore,
    ids: LayerIds,
    positions: Tensor,
}

impl Parameterized for Detector {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn xavier(store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.add_uniform(name, &[fan_in, fan_out], scale, rng)
}

fn attn_ids(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> AttnIds {
    AttnIds {
        q: xavier(store, format!("{prefix}.q"), d, d, rng),
        k: xavier(store, format!("{prefix}.k"), d, d, rng),
        v: xavier(store, format!("{prefix}.v"), d, d, rng),
        o: xavier(store, format!("{prefix}.o"), d, d, rng),
    }
}

fn ffn_ids(store: &mut ParamStore, prefix: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> FfnIds {
    FfnIds {
        w1: xavier(store, format!("{prefix}.w1"), d, f, rng),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[f])),
        w2: xavier(store, format!("{prefix}.w2"), f, d, rng),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

/// Fixed 2-D sine encoding of a rows × cols grid, (rows·cols) × d.
fn sine_positions(rows: usize, cols: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for (coord, extent) in [(r, rows), (c, cols)] {
                let pos = (coord as f64 + 0.5) / extent as f64 * std::f64::consts::TAU;
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    data.push((pos * freq).sin());
                    data.push((pos * freq).cos());
                }
            }
        }
    }
    Tensor::new(&[rows * cols, d], data).expect("position shape")
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::with_tag(DETECTOR_TAG);
        let d = config.dim;
        let cv = config.head_dim();
        let k = config.points;
        let patch_in = config.patch * config.patch * config.channels;

        let patch_w = xavier(&mut s, "backbone.patch.weight".into(), patch_in, d, &mut rng);
        let patch_b = s.add("backbone.patch.bias", Tensor::zeros(&[d]));
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                (
                    attn_ids(&mut s, &format!("backbone.enc{l}.attn"), d, &mut rng),
                    ffn_ids(&mut s, &format!("backbone.enc{l}.ffn"), d, config.ffn_dim, &mut rng),
                )
            })
            .collect();

        let query_embed = s.add_uniform("backbone.query_embed", &[config.proposals, d], 1.0, &mut rng);
        let p = config.proposals;
        let cols = (p as f64).sqrt().ceil() as usize;
        let rows = p.div_ceil(cols);
        let mut refs = Vec::with_capacity(2 * p);
        for q in 0..p {
            let (r, c) = (q / cols, q % cols);
            refs.push(logit((c as f64 + 0.5) / cols as f64));
            refs.push(logit((r as f64 + 0.5) / rows as f64));
        }
        let ref_logits = s.add("backbone.ref_logits", Tensor::new(&[p, 2], refs)?);

        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let self_attn = attn_ids(&mut s, &format!("backbone.dec{l}.self"), d, &mut rng);
            let mut cross = Vec::new();
            for m in 0..config.heads {
                let pre = format!("backbone.dec{l}.cross.h{m}");
                let mut bias = Vec::with_capacity(2 * k);
                for j in 0..k {
                    let angle = std::f64::consts::TAU * (j as f64 + m as f64 / config.heads as f64) / k as f64;
                    let radius = 1.0 + (j % 2) as f64;
                    bias.push(radius * angle.cos());
                    bias.push(radius * angle.sin());
                }
                cross.push(CrossHeadIds {
                    offset_w: s.add(format!("{pre}.offset_w"), Tensor::zeros(&[d, 2 * k])),
                    offset_b: s.add(format!("{pre}.offset_b"), Tensor::vector(bias)),
                    query: xavier(&mut s, format!("{pre}.query"), d, cv, &mut rng),
                    key: xavier(&mut s, format!("{pre}.key"), d, cv, &mut rng),
                    value: xavier(&mut s, format!("{pre}.value"), d, cv, &mut rng),
                    out: xavier(&mut s, format!("{pre}.out"), cv, d, &mut rng),
                });
            }
            let ffn = ffn_ids(&mut s, &format!("backbone.dec{l}.ffn"), d, config.ffn_dim, &mut rng);
            decoder.push(DecoderLayerIds { self_attn, cross, ffn });
        }

        let c1 = config.num_classes + 1;
        let class_w = s.add_uniform(CLASS_WEIGHT, &[c1, d], (1.0 / d as f64).sqrt(), &mut rng);
        let class_b = s.add(CLASS_BIAS, Tensor::zeros(&[c1]));
        let box_w1 = xavier(&mut s, "bbox_embed.w1".into(), d, d, &mut rng);
        let box_b1 = s.add("bbox_embed.b1", Tensor::zeros(&[d]));
        let box_w2 = s.add("bbox_embed.w2", Tensor::zeros(&[d, 4]));
        let box_b2 = s.add("bbox_embed.b2", Tensor::vector(vec![0.0, 0.0, logit(0.25), logit(0.25)]));

        let (gr, gc) = config.grid();
        Ok(Self {
            positions: sine_positions(gr, gc, d),
            ids: LayerIds {
                patch_w,
                patch_b,
                encoder,
                query_embed,
                ref_logits,
                decoder,
                class_w,
                class_b,
                box_w1,
                box_b1,
                box_w2,
                box_b2,
            },
            store: s,
            config,
        })
    }

    /// Rebuilds a detector and overwrites every parameter from `snapshot`.
    pub fn from_snapshot(
        config: DetectorConfig,
        snapshot: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut det = Self::new(config, 0)?;
        if snapshot.len() != det.store.len() {
            return Err(Error::Compatibility(format!(
                "snapshot has {} detector parameters, expected {}",
                snapshot.len(),
                det.store.len()
            )));
        }
        det.store.load_snapshot(snapshot)?;
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn class_weight_id(&self) -> ParamId {
        self.ids.class_w
    }

    /// Stops gradient flow into every `backbone.` parameter.
    pub fn freeze_backbone(&mut self) {
        self.store.set_trainable(|n| n.starts_with(BACKBONE_PREFIX), false);
    }

    pub fn unfreeze_backbone(&mut self) {
        self.store.set_trainable(|n| n.starts_with(BACKBONE_PREFIX), true);
    }

    pub fn box_param_ids(&self) -> Vec<ParamId> {
        vec![self.ids.box_w1, self.ids.box_b1, self.ids.box_w2, self.ids.box_b2]
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.image_height, c.image_width, c.channels] {
            return Err(Error::Shape(format!(
                "image of shape {:?}, expected {:?}",
                image.shape(),
                [c.image_height, c.image_width, c.channels]
            )));
        }
        Ok(())
    }

    /// Cuts the image into flattened non-overlapping patches, (rows·cols) × (patch²·channels).
    fn patchify(&self, image: &Tensor) -> Tensor {
        let c = &self.config;
        let (gr, gc) = c.grid();
        let pp = c.patch;
        let width = pp * pp * c.channels;
        let mut data = Vec::with_capacity(gr * gc * width);
        let px = image.data();
        for r in 0..gr {
            for col in 0..gc {
                for dy in 0..pp {
                    let y = r * pp + dy;
                    let start = (y * c.image_width + col * pp) * c.channels;
                    data.extend_from_slice(&px[start..start + pp * c.channels]);
                }
            }
        }
        Tensor::new(&[gr * gc, width], data).expect("patch shape")
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(&self.store, w);
        let b = tape.param(&self.store, b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, ids: &FfnIds) -> Result<Var> {
        let h = self.linear(tape, x, ids.w1, ids.b1)?;
        let h = tape.relu(h)?;
        self.linear(tape, h, ids.w2, ids.b2)
    }

    fn self_attention(&self, tape: &mut Tape, x: Var, ids: &AttnIds) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let [wq, wk, wv, wo] = [ids.q, ids.k, ids.v, ids.o].map(|id| tape.param(&self.store, id));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        tape.matmul(cat, wo)
    }

    fn residual_norm(&self, tape: &mut Tape, x: Var, delta: Var) -> Result<Var> {
        let s = tape.add(x, delta)?;
        tape.layer_norm(s, LN_EPS)
    }

    /// Encoder feature map for `image` on `tape`, rows × cols × D.
    pub fn encode_on(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = tape.constant(&self.patchify(image));
        let pos = tape.constant(&self.positions);
        let x = self.linear(tape, patches, self.ids.patch_w, self.ids.patch_b)?;
        let mut x = tape.add(x, pos)?;
        for (attn, ffn) in &self.ids.encoder {
            let a = self.self_attention(tape, x, attn)?;
            x = self.residual_norm(tape, x, a)?;
            let f = self.ffn(tape, x, ffn)?;
            x = self.residual_norm(tape, x, f)?;
        }
        let (gr, gc) = self.config.grid();
        tape.reshape(x, &[gr, gc, self.config.dim])
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.encode_on(&mut tape, image)?;
        Ok(tape.tensor(f))
    }

    /// Reference points of the proposals in normalized coordinates, P × 2.
    pub fn reference_points(&self) -> Vec<[f64; 2]> {
        self.store
            .get(self.ids.ref_logits)
            .data()
            .chunks(2)
            .map(|c| [1.0 / (1.0 + (-c[0]).exp()), 1.0 / (1.0 + (-c[1]).exp())])
            .collect()
    }

    fn cross_heads(&self, tape: &mut Tape, layer: &DecoderLayerIds) -> Vec<HeadVars> {
        layer
            .cross
            .iter()
            .map(|h| HeadVars {
                offset_w: tape.param(&self.store, h.offset_w),
                offset_b: tape.param(&self.store, h.offset_b),
                query: tape.param(&self.store, h.query),
                key: tape.param(&self.store, h.key),
                value: tape.param(&self.store, h.value),
                out: tape.param(&self.store, h.out),
            })
            .collect()
    }

    /// Decoder outputs, P × D. `memory` is an L_m × D readout; `None` fills
    /// the memory slots with zeros.
    pub fn decode_on(&self, tape: &mut Tape, features: Var, memory: Option<Var>) -> Result<Var> {
        let lm = self.config.memory_length;
        let prefix = match memory {
            Some(m) => {
                if lm == 0 {
                    return Err(Error::Config("detector has no memory slots".into()));
                }
                if tape.shape(m) != [lm, self.config.dim] {
                    return Err(Error::Shape(format!(
                        "memory readout of shape {:?}, expected [{lm}, {}]",
                        tape.shape(m),
                        self.config.dim
                    )));
                }
                Some(m)
            }
            None if lm > 0 => Some(tape.constant(&Tensor::zeros(&[lm, self.config.dim]))),
            None => None,
        };
        let ref_logits = tape.param(&self.store, self.ids.ref_logits);
        let reference = tape.sigmoid(ref_logits)?;
        let mut z = tape.param(&self.store, self.ids.query_embed);
        for layer in &self.ids.decoder {
            let a = self.self_attention(tape, z, &layer.self_attn)?;
            z = self.residual_norm(tape, z, a)?;
            let heads = self.cross_heads(tape, layer);
            let c = memory_deformable_attention_on(tape, &heads, z, reference, features, prefix, self.config.points)?;
            z = self.residual_norm(tape, z, c)?;
            let f = self.ffn(tape, z, &layer.ffn)?;
            z = self.residual_norm(tape, z, f)?;
        }
        Ok(z)
    }

    /// Class probabilities with every object class outside `visible` set to
    /// exactly zero, and boxes.
    pub fn heads_on(&self, tape: &mut Tape, hidden: Var, visible: &[usize]) -> Result<HeadOutputs> {
        let c = self.config.num_classes;
        if let Some(&bad) = visible.iter().find(|&&v| v >= c) {
            return Err(Error::Index(format!("visible class {bad} of {c}")));
        }
        let w = tape.param(&self.store, self.ids.class_w);
        let wt = tape.transpose(w)?;
        let b = tape.param(&self.store, self.ids.class_b);
        let logits = tape.matmul(hidden, wt)?;
        let logits = tape.add_row(logits, b)?;
        let hidden_classes: Vec<usize> = (0..c).filter(|k| !visible.contains(k)).collect();
        let logits = if hidden_classes.is_empty() { logits } else { tape.mask_cols(logits, &hidden_classes)? };
        let scores = tape.softmax_rows(logits)?;

        let h = self.linear(tape, hidden, self.ids.box_w1, self.ids.box_b1)?;
        let h = tape.relu(h)?;
        let raw = self.linear(tape, h, self.ids.box_w2, self.ids.box_b2)?;
        let refs = tape.param(&self.store, self.ids.ref_logits);
        let pad = tape.constant(&Tensor::zeros(&[self.config.proposals, 2]));
        let anchor = tape.concat_cols(&[refs, pad])?;
        let raw = tape.add(raw, anchor)?;
        let boxes = tape.sigmoid(raw)?;
        Ok(HeadOutputs { scores, boxes })
    }

    /// Memory-free frozen pass: encoder features and proposal features.
    pub fn cache(&self, image: &Tensor) -> Result<CachedImage> {
        let mut tape = Tape::new();
        let f = self.encode_on(&mut tape, image)?;
        let z = self.decode_on(&mut tape, f, None)?;
        Ok(CachedImage { features: tape.tensor(f), proposals: tape.tensor(z) })
    }

    /// Proposal features of the memory-free pass, P × D.
    pub fn extract_proposals(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.cache(image)?.proposals)
    }

    /// Records the memory read for a cached image: ranking weights, the
    /// pooled query and the retrieved readout.
    pub fn read_memory_on(
        &self,
        tape: &mut Tape,
        cached: &CachedImage,
        retrieval: Retrieval<'_>,
    ) -> Result<MemoryRead> {
        let proposals = tape.constant(&cached.proposals);
        let p = self.config.proposals;
        let alpha = match retrieval.mode {
            QueryMode::Localized => retrieval.ranker.rank_on(tape, proposals)?,
            QueryMode::Mean => tape.constant(&Tensor::full(&[p], 1.0 / p as f64)),
        };
        let query = localized_query_on(tape, proposals, alpha)?;
        let (weights, readout) = retrieval.pool.retrieve_on(tape, query)?;
        Ok(MemoryRead { alpha, weights, readout })
    }

    /// Full forward on a cached image. The decoder is re-run with the
    /// memory readout when `retrieval` is given.
    pub fn forward_cached_on(
        &self,
        tape: &mut Tape,
        cached: &CachedImage,
        retrieval: Option<Retrieval<'_>>,
        visible: &[usize],
    ) -> Result<(HeadOutputs, Option<MemoryRead>)> {
        let (hidden, read) = match retrieval {
            Some(r) => {
                let read = self.read_memory_on(tape, cached, r)?;
                let features = tape.constant(&cached.features);
                (self.decode_on(tape, features, Some(read.readout))?, Some(read))
            }
            None => (tape.constant(&cached.proposals), None),
        };
        Ok((self.heads_on(tape, hidden, visible)?, read))
    }

    pub fn forward_cached(
        &self,
        cached: &CachedImage,
        retrieval: Option<Retrieval<'_>>,
        visible: &[usize],
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_cached_on(&mut tape, cached, retrieval, visible)?;
        Ok(predictions(&tape, out))
    }

    /// Predictions for one image, one per proposal.
    pub fn forward(
        &self,
        image: &Tensor,
        retrieval: Option<Retrieval<'_>>,
        visible: &[usize],
    ) -> Result<Vec<Prediction>> {
        let cached = self.cache(image)?;
        self.forward_cached(&cached, retrieval, visible)
    }

    /// Forward with an explicit readout in place of retrieval.
    pub fn forward_with_readout(
        &self,
        image: &Tensor,
        readout: Option<&Tensor>,
        visible: &[usize],
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let f = self.encode_on(&mut tape, image)?;
        let m = readout.map(|r| tape.constant(r));
        let z = self.decode_on(&mut tape, f, m)?;
        let out = self.heads_on(&mut tape, z, visible)?;
        Ok(predictions(&tape, out))
    }
}

/// Reads head outputs off a tape.
pub fn predictions(tape: &Tape, out: HeadOutputs) -> Vec<Prediction> {
    let c1 = tape.shape(out.scores)[1];
    tape.value(out.scores)
        .chunks(c1)
        .zip(tape.value(out.boxes).chunks(4))
        .map(|(s, b)| Prediction { scores: s.to_vec(), bbox: BBox::new(b[0], b[1], b[2], b[3]) })
        .collect()
}
