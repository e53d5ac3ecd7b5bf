//! Deformable cross-attention, plain and with memory prefix slots.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-head projections of a deformable attention block, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// D × 2K offset predictor (x, y per sampling point, in grid units).
    pub offset_w: Var,
    /// 2K
    pub offset_b: Var,
    /// U_m: D × C_v
    pub query: Var,
    /// V_m: D × C_v
    pub key: Var,
    /// W'_m: D × C_v
    pub value: Var,
    /// W_m: C_v × D
    pub out: Var,
}

/// Per-head weights of the plain (attention-predictor) deformable block.
#[derive(Clone, Copy, Debug)]
pub struct PlainHeadVars {
    pub offset_w: Var,
    pub offset_b: Var,
    /// D × K attention-logit predictor.
    pub attn_w: Var,
    /// K
    pub attn_b: Var,
    /// W'_m: D × C_v
    pub value: Var,
    /// W_m: C_v × D
    pub out: Var,
}

fn grid_extent(tape: &Tape, features: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(features) {
        [h, w, d] => Ok((*h, *w, *d)),
        s => Err(Error::Rank(format!("feature map must be H×W×D, got {s:?}"))),
    }
}

/// Sampling locations for every (query, point): reference point scaled to
/// grid units plus the predicted offset. Returns a (P·K) × 2 matrix.
fn sampling_locations(
    tape: &mut Tape,
    queries: Var,
    reference: Var,
    offset_w: Var,
    offset_b: Var,
    n_points: usize,
    grid: (usize, usize),
) -> Result<Var> {
    let p = tape.shape(queries)[0];
    let (h, w) = grid;
    let scale = tape.constant(&Tensor::vector(vec![(w - 1) as f64, (h - 1) as f64]));
    let ref_grid = tape.mul_row(reference, scale)?;
    let repeat: Vec<usize> = (0..p).flat_map(|q| std::iter::repeat_n(q, n_points)).collect();
    let ref_rep = tape.gather_rows(ref_grid, &repeat)?;
    let off = tape.matmul(queries, offset_w)?;
    let off = tape.add_row(off, offset_b)?;
    let off = tape.reshape(off, &[p * n_points, 2])?;
    tape.add(ref_rep, off)
}

/// Projects an H×W×D map by a D×C matrix into an H×W×C map. Bilinear
/// sampling commutes with the projection, so sampling the projected map
/// equals projecting the sampled features.
fn project_map(tape: &mut Tape, features: Var, proj: Var) -> Result<Var> {
    let (h, w, d) = grid_extent(tape, features)?;
    let flat = tape.reshape(features, &[h * w, d])?;
    let projected = tape.matmul(flat, proj)?;
    let c = tape.shape(projected)[1];
    tape.reshape(projected, &[h, w, c])
}

/// Sums groups of `k` consecutive rows of an (n·k) × c matrix → n × c.
fn sum_row_groups(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let (rows, c) = match tape.shape(x) {
        [r, c] => (*r, *c),
        s => return Err(Error::Rank(format!("expected matrix, got {s:?}"))),
    };
    let n = rows / k;
    let wide = tape.reshape(x, &[n, k * c])?;
    let mut stack = Tensor::zeros(&[k * c, c]);
    for j in 0..k {
        for i in 0..c {
            stack.set(&[j * c + i, i], 1.0);
        }
    }
    let stack = tape.constant(&stack);
    tape.matmul(wide, stack)
}

/// Plain deformable attention:
/// `Σ_m W_m Σ_k A_mqk · W'_m x(p_q + δp_mqk)` with `A_m·q` the softmax over
/// the K points of a linear predictor applied to `z_q`.
///
/// `queries` is P×D, `reference` P×2 in normalized [0,1]² coordinates,
/// `features` H×W×D. Returns P×D.
pub fn deformable_attention_on(
    tape: &mut Tape,
    heads: &[PlainHeadVars],
    queries: Var,
    reference: Var,
    features: Var,
    n_points: usize,
) -> Result<Var> {
    let (h, w, _) = grid_extent(tape, features)?;
    let mut total: Option<Var> = None;
    for head in heads {
        let locs = sampling_locations(tape, queries, reference, head.offset_w, head.offset_b, n_points, (h, w))?;
        let logits = tape.matmul(queries, head.attn_w)?;
        let logits = tape.add_row(logits, head.attn_b)?;
        let attn = tape.softmax_rows(logits)?;
        let p = tape.shape(queries)[0];
        let attn = tape.reshape(attn, &[p * n_points])?;
        let vmap = project_map(tape, features, head.value)?;
        let sampled = tape.bilinear_sample(vmap, locs)?;
        let weighted = tape.mul_col(sampled, attn)?;
        let pooled = sum_row_groups(tape, weighted, n_points)?;
        let out = tape.matmul(pooled, head.out)?;
        total = Some(match total {
            Some(t) => tape.add(t, out)?,
            None => out,
        });
    }
    total.ok_or_else(|| Error::Config("attention with no heads".into()))
}

/// Deformable attention with memory prefix slots.
///
/// For head `m`, the K sampled keys `V_m x(p_q + δp_mqk)` are joined by the
/// head's slice of the first `L_m/2` rows of `prefix`; the query `U_m z_q`
/// is scored against all `K + L_m/2` keys, scaled by `1/√C_v` and normalized
/// jointly. Values are `W'_m x(·)` for sampled slots and the head's slice of
/// the last `L_m/2` prefix rows for memory slots. Heads are combined
/// through `W_m` and summed.
///
/// With `prefix = None` there are no memory slots.
#[allow(clippy::too_many_arguments)]
pub fn memory_deformable_attention_on(
    tape: &mut Tape,
    heads: &[HeadVars],
    queries: Var,
    reference: Var,
    features: Var,
    prefix: Option<Var>,
    n_points: usize,
) -> Result<Var> {
    let (h, w, d) = grid_extent(tape, features)?;
    let p = tape.shape(queries)[0];
    let split = match prefix {
        Some(m) => {
            let (len, width) = match tape.shape(m) {
                [l, c] => (*l, *c),
                s => return Err(Error::Shape(format!("memory readout must be L_m×D, got {s:?}"))),
            };
            if width != d {
                return Err(Error::Shape(format!("memory rows of width {width} vs D = {d}")));
            }
            if len % 2 != 0 {
                return Err(Error::Shape(format!("memory length {len} is odd")));
            }
            let half = len / 2;
            Some((tape.slice_rows(m, 0, half)?, tape.slice_rows(m, half, len)?))
        }
        None => None,
    };
    let mut total: Option<Var> = None;
    for (mi, head) in heads.iter().enumerate() {
        let cv = tape.shape(head.query)[1];
        let scale = 1.0 / (cv as f64).sqrt();
        let locs = sampling_locations(tape, queries, reference, head.offset_w, head.offset_b, n_points, (h, w))?;
        let kmap = project_map(tape, features, head.key)?;
        let vmap = project_map(tape, features, head.value)?;
        let keys = tape.bilinear_sample(kmap, locs)?; // (P·K) × C_v
        let values = tape.bilinear_sample(vmap, locs)?;
        let q = tape.matmul(queries, head.query)?; // P × C_v
        let repeat: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, n_points)).collect();
        let q_rep = tape.gather_rows(q, &repeat)?;
        let qk = tape.mul(q_rep, keys)?;
        let sampled_logits = tape.sum_axis1(qk)?;
        let sampled_logits = tape.reshape(sampled_logits, &[p, n_points])?;

        let (logits, mem_values) = match split {
            Some((mk, mv)) => {
                let (lo, hi) = (mi * cv, (mi + 1) * cv);
                if hi > d {
                    return Err(Error::Shape(format!("{} heads of width {cv} exceed D = {d}", heads.len())));
                }
                let mk = tape.slice_cols(mk, lo, hi)?; // S × C_v
                let mv = tape.slice_cols(mv, lo, hi)?;
                let mk_t = tape.transpose(mk)?;
                let mem_logits = tape.matmul(q, mk_t)?; // P × S
                (tape.concat_cols(&[sampled_logits, mem_logits])?, Some(mv))
            }
            None => (sampled_logits, None),
        };
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        let slots = tape.shape(attn)[1];

        let a_sampled = tape.slice_cols(attn, 0, n_points)?;
        let a_sampled = tape.reshape(a_sampled, &[p * n_points])?;
        let weighted = tape.mul_col(values, a_sampled)?;
        let mut pooled = sum_row_groups(tape, weighted, n_points)?; // P × C_v
        if let Some(mv) = mem_values {
            let a_mem = tape.slice_cols(attn, n_points, slots)?;
            let mem_part = tape.matmul(a_mem, mv)?;
            pooled = tape.add(pooled, mem_part)?;
        }
        let out = tape.matmul(pooled, head.out)?;
        total = Some(match total {
            Some(t) => tape.add(t, out)?,
            None => out,
        });
    }
    total.ok_or_else(|| Error::Config("attention with no heads".into()))
}

/// Attention weights over the K + L_m/2 slots for every head, P × slots
/// each. Used by diagnostics and tests.
pub fn memory_attention_weights(
    tape: &mut Tape,
    heads: &[HeadVars],
    queries: Var,
    reference: Var,
    features: Var,
    prefix: Var,
    n_points: usize,
) -> Result<Vec<Tensor>> {
    let (h, w, _) = grid_extent(tape, features)?;
    let p = tape.shape(queries)[0];
    let len = tape.shape(prefix)[0];
    let mk = tape.slice_rows(prefix, 0, len / 2)?;
    let mut out = Vec::new();
    for (mi, head) in heads.iter().enumerate() {
        let cv = tape.shape(head.query)[1];
        let locs = sampling_locations(tape, queries, reference, head.offset_w, head.offset_b, n_points, (h, w))?;
        let kmap = project_map(tape, features, head.key)?;
        let keys = tape.bilinear_sample(kmap, locs)?;
        let q = tape.matmul(queries, head.query)?;
        let repeat: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, n_points)).collect();
        let q_rep = tape.gather_rows(q, &repeat)?;
        let qk = tape.mul(q_rep, keys)?;
        let sl = tape.sum_axis1(qk)?;
        let sl = tape.reshape(sl, &[p, n_points])?;
        let mkh = tape.slice_cols(mk, mi * cv, (mi + 1) * cv)?;
        let mkt = tape.transpose(mkh)?;
        let ml = tape.matmul(q, mkt)?;
        let logits = tape.concat_cols(&[sl, ml])?;
        let logits = tape.scale(logits, 1.0 / (cv as f64).sqrt())?;
        let attn = tape.softmax_rows(logits)?;
        out.push(tape.tensor(attn));
    }
    Ok(out)
}
