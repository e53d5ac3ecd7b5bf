#![allow(clippy::needless_range_loop)]

use mdcdet_core::detector::{
    deformable_attention_on, memory_attention_weights, memory_deformable_attention_on, Detector, DetectorConfig,
    HeadVars, PlainHeadVars, CLASS_BIAS, CLASS_WEIGHT,
};
use mdcdet_core::gradcheck::{self, DEFAULT_STEP};
use mdcdet_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

// Independent bilinear sampler: clamp to the grid, interpolate the four
// surrounding nodes.
fn sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|k| {
            map.at(&[y0, x0, k]) * (1.0 - fx) * (1.0 - fy)
                + map.at(&[y0, x0 + 1, k]) * fx * (1.0 - fy)
                + map.at(&[y0 + 1, x0, k]) * (1.0 - fx) * fy
                + map.at(&[y0 + 1, x0 + 1, k]) * fx * fy
        })
        .collect()
}

// row-vector × matrix
fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    assert_eq!(v.len(), r);
    (0..c).map(|j| (0..r).map(|i| v[i] * m.at(&[i, j])).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Plain {
    offset_w: Tensor,
    offset_b: Tensor,
    attn_w: Tensor,
    attn_b: Tensor,
    value: Tensor,
    out: Tensor,
}

struct Head {
    offset_w: Tensor,
    offset_b: Tensor,
    query: Tensor,
    key: Tensor,
    value: Tensor,
    out: Tensor,
}

impl Head {
    fn random(rng: &mut ChaCha8Rng, d: usize, cv: usize, k: usize) -> Self {
        Head {
            offset_w: random(rng, &[d, 2 * k], 0.5),
            offset_b: random(rng, &[2 * k], 1.0),
            query: random(rng, &[d, cv], 1.0),
            key: random(rng, &[d, cv], 1.0),
            value: random(rng, &[d, cv], 1.0),
            out: random(rng, &[cv, d], 1.0),
        }
    }

    fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.offset_w.clone(),
            self.offset_b.clone(),
            self.query.clone(),
            self.key.clone(),
            self.value.clone(),
            self.out.clone(),
        ]
    }

    fn vars(vs: &[Var]) -> HeadVars {
        HeadVars { offset_w: vs[0], offset_b: vs[1], query: vs[2], key: vs[3], value: vs[4], out: vs[5] }
    }
}

fn locations(
    z: &[f64],
    reference: [f64; 2],
    offset_w: &Tensor,
    offset_b: &Tensor,
    grid: (usize, usize),
    k: usize,
) -> Vec<(f64, f64)> {
    let off = vecmat(z, offset_w);
    (0..k)
        .map(|j| {
            (
                reference[0] * (grid.1 - 1) as f64 + off[2 * j] + offset_b.data()[2 * j],
                reference[1] * (grid.0 - 1) as f64 + off[2 * j + 1] + offset_b.data()[2 * j + 1],
            )
        })
        .collect()
}

fn plain_oracle(heads: &[Plain], queries: &Tensor, refs: &Tensor, map: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let grid = (map.shape()[0], map.shape()[1]);
    let d = queries.shape()[1];
    (0..queries.shape()[0])
        .map(|q| {
            let z = queries.row(q);
            let mut out = vec![0.0; d];
            for h in heads {
                let locs = locations(z, [refs.at(&[q, 0]), refs.at(&[q, 1])], &h.offset_w, &h.offset_b, grid, k);
                let raw: Vec<f64> = vecmat(z, &h.attn_w).iter().zip(h.attn_b.data()).map(|(a, b)| a + b).collect();
                let z_sum: f64 = raw.iter().map(|x| x.exp()).sum();
                let cv = h.value.shape()[1];
                let mut pooled = vec![0.0; cv];
                for (j, &(x, y)) in locs.iter().enumerate() {
                    let v = vecmat(&sample(map, x, y), &h.value);
                    let a = raw[j].exp() / z_sum;
                    pooled.iter_mut().zip(&v).for_each(|(p, v)| *p += a * v);
                }
                let o = vecmat(&pooled, &h.out);
                out.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            }
            out
        })
        .collect()
}

/// Explicit concatenate-then-softmax oracle. Returns outputs and, per head,
/// the sampled-slot partition function and attention rows.
fn memory_oracle(
    heads: &[Head],
    queries: &Tensor,
    refs: &Tensor,
    map: &Tensor,
    prefix: Option<&Tensor>,
    k: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let grid = (map.shape()[0], map.shape()[1]);
    let d = queries.shape()[1];
    let mut outs = Vec::new();
    let mut attn = vec![Vec::new(); heads.len()];
    for q in 0..queries.shape()[0] {
        let z = queries.row(q);
        let mut out = vec![0.0; d];
        for (m, h) in heads.iter().enumerate() {
            let cv = h.query.shape()[1];
            let uq = vecmat(z, &h.query);
            let locs = locations(z, [refs.at(&[q, 0]), refs.at(&[q, 1])], &h.offset_w, &h.offset_b, grid, k);
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for &(x, y) in &locs {
                let s = sample(map, x, y);
                keys.push(vecmat(&s, &h.key));
                values.push(vecmat(&s, &h.value));
            }
            if let Some(p) = prefix {
                let half = p.shape()[0] / 2;
                for r in 0..half {
                    keys.push(p.row(r)[m * cv..(m + 1) * cv].to_vec());
                    values.push(p.row(half + r)[m * cv..(m + 1) * cv].to_vec());
                }
            }
            let logits: Vec<f64> = keys.iter().map(|key| dot(&uq, key) / (cv as f64).sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / total).collect();
            let mut pooled = vec![0.0; cv];
            for (ai, v) in a.iter().zip(&values) {
                pooled.iter_mut().zip(v).for_each(|(p, v)| *p += ai * v);
            }
            let o = vecmat(&pooled, &h.out);
            out.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            attn[m].push(a);
        }
        outs.push(out);
    }
    (outs, attn)
}

fn run_memory(
    heads: &[Head],
    queries: &Tensor,
    refs: &Tensor,
    map: &Tensor,
    prefix: Option<&Tensor>,
    k: usize,
) -> Tensor {
    let mut tape = Tape::new();
    let hv: Vec<HeadVars> = heads
        .iter()
        .map(|h| {
            let vs: Vec<Var> = h.tensors().iter().map(|t| tape.constant(t)).collect();
            Head::vars(&vs)
        })
        .collect();
    let q = tape.constant(queries);
    let r = tape.constant(refs);
    let f = tape.constant(map);
    let p = prefix.map(|p| tape.constant(p));
    let out = memory_deformable_attention_on(&mut tape, &hv, q, r, f, p, k).unwrap();
    tape.tensor(out)
}

#[test]
fn identity_projections_return_the_sampled_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 3;
    let map = random(&mut rng, &[4, 4, d], 1.0);
    let mut tape = Tape::new();
    let head = PlainHeadVars {
        offset_w: tape.constant(&Tensor::zeros(&[d, 2])),
        offset_b: tape.constant(&Tensor::zeros(&[2])),
        attn_w: tape.constant(&Tensor::zeros(&[d, 1])),
        attn_b: tape.constant(&Tensor::zeros(&[1])),
        value: tape.constant(&Tensor::identity(d)),
        out: tape.constant(&Tensor::identity(d)),
    };
    let q = tape.constant(&random(&mut rng, &[1, d], 1.0));
    // (1/3, 2/3) lands on grid node (x=1, y=2).
    let r = tape.constant(&Tensor::matrix(1, 2, vec![1.0 / 3.0, 2.0 / 3.0]).unwrap());
    let f = tape.constant(&map);
    let out = deformable_attention_on(&mut tape, &[head], q, r, f, 1).unwrap();
    for c in 0..d {
        assert!((tape.value(out)[c] - map.at(&[2, 1, c])).abs() < 1e-12);
    }
}

#[test]
fn zero_feature_map_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, k) = (4, 2);
    let mut tape = Tape::new();
    let heads: Vec<PlainHeadVars> = (0..2)
        .map(|_| PlainHeadVars {
            offset_w: tape.constant(&random(&mut rng, &[d, 2 * k], 1.0)),
            offset_b: tape.constant(&random(&mut rng, &[2 * k], 1.0)),
            attn_w: tape.constant(&random(&mut rng, &[d, k], 1.0)),
            attn_b: tape.constant(&random(&mut rng, &[k], 1.0)),
            value: tape.constant(&random(&mut rng, &[d, 2], 1.0)),
            out: tape.constant(&random(&mut rng, &[2, d], 1.0)),
        })
        .collect();
    let q = tape.constant(&random(&mut rng, &[3, d], 1.0));
    let r = tape.constant(&Tensor::full(&[3, 2], 0.4));
    let f = tape.constant(&Tensor::zeros(&[4, 4, d]));
    let out = deformable_attention_on(&mut tape, &heads, q, r, f, k).unwrap();
    assert!(tape.value(out).iter().all(|&x| x == 0.0));
}

#[test]
fn plain_attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, k, cv, p) = (4, 2, 2, 3);
    let heads: Vec<Plain> = (0..2)
        .map(|_| Plain {
            offset_w: random(&mut rng, &[d, 2 * k], 0.5),
            offset_b: random(&mut rng, &[2 * k], 1.0),
            attn_w: random(&mut rng, &[d, k], 1.0),
            attn_b: random(&mut rng, &[k], 1.0),
            value: random(&mut rng, &[d, cv], 1.0),
            out: random(&mut rng, &[cv, d], 1.0),
        })
        .collect();
    let queries = random(&mut rng, &[p, d], 1.0);
    let refs = Tensor::new(&[p, 2], (0..2 * p).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let map = random(&mut rng, &[4, 4, d], 1.0);

    let mut tape = Tape::new();
    let hv: Vec<PlainHeadVars> = heads
        .iter()
        .map(|h| PlainHeadVars {
            offset_w: tape.constant(&h.offset_w),
            offset_b: tape.constant(&h.offset_b),
            attn_w: tape.constant(&h.attn_w),
            attn_b: tape.constant(&h.attn_b),
            value: tape.constant(&h.value),
            out: tape.constant(&h.out),
        })
        .collect();
    let (q, r, f) = (tape.constant(&queries), tape.constant(&refs), tape.constant(&map));
    let out = deformable_attention_on(&mut tape, &hv, q, r, f, k).unwrap();
    let got = tape.tensor(out);
    let expect = plain_oracle(&heads, &queries, &refs, &map, k);
    for (i, row) in expect.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.at(&[i, j]) - v).abs() < 1e-10);
        }
    }
}

#[test]
fn memory_attention_matches_concatenation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, k, cv, p, lm) = (4, 2, 2, 3, 4);
    for _ in 0..5 {
        let heads: Vec<Head> = (0..2).map(|_| Head::random(&mut rng, d, cv, k)).collect();
        let queries = random(&mut rng, &[p, d], 1.0);
        let refs = Tensor::new(&[p, 2], (0..2 * p).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let map = random(&mut rng, &[4, 4, d], 1.0);
        let prefix = random(&mut rng, &[lm, d], 1.0);
        let got = run_memory(&heads, &queries, &refs, &map, Some(&prefix), k);
        let (expect, _) = memory_oracle(&heads, &queries, &refs, &map, Some(&prefix), k);
        for (i, row) in expect.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((got.at(&[i, j]) - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_memory_renormalizes_sampled_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, k, cv, p, lm) = (4, 3, 2, 2, 6);
    let slots = (lm / 2) as f64;
    let heads: Vec<Head> = (0..2).map(|_| Head::random(&mut rng, d, cv, k)).collect();
    let queries = random(&mut rng, &[p, d], 1.0);
    let refs = Tensor::full(&[p, 2], 0.5);
    let map = random(&mut rng, &[5, 5, d], 1.0);
    let got = run_memory(&heads, &queries, &refs, &map, Some(&Tensor::zeros(&[lm, d])), k);

    // Σ_m scale_m · head_m(no memory), scale = Z/(Z + slots), Z = Σ_k exp(logit_k).
    let mut expect = Tensor::zeros(&[p, d]);
    for head in &heads {
        let alone = run_memory(std::slice::from_ref(head), &queries, &refs, &map, None, k);
        for q in 0..p {
            let z = queries.row(q);
            let uq = vecmat(z, &head.query);
            let locs = locations(z, [0.5, 0.5], &head.offset_w, &head.offset_b, (5, 5), k);
            let partition: f64 = locs
                .iter()
                .map(|&(x, y)| (dot(&uq, &vecmat(&sample(&map, x, y), &head.key)) / (cv as f64).sqrt()).exp())
                .sum();
            let scale = partition / (partition + slots);
            for j in 0..d {
                let v = expect.at(&[q, j]) + scale * alone.at(&[q, j]);
                expect.set(&[q, j], v);
            }
        }
    }
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn saturated_memory_key_selects_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, k, cv) = (4, 2, 2);
    let heads: Vec<Head> = (0..2).map(|_| Head::random(&mut rng, d, cv, k)).collect();
    let queries = random(&mut rng, &[1, d], 1.0);
    let refs = Tensor::full(&[1, 2], 0.3);
    let map = random(&mut rng, &[4, 4, d], 1.0);
    let mut prefix = Tensor::zeros(&[2, d]);
    let value_row = random(&mut rng, &[d], 1.0);
    for (m, h) in heads.iter().enumerate() {
        let uq = vecmat(queries.row(0), &h.query);
        for c in 0..cv {
            prefix.set(&[0, m * cv + c], 1e4 * uq[c]);
            prefix.set(&[1, m * cv + c], value_row.data()[m * cv + c]);
        }
    }
    let got = run_memory(&heads, &queries, &refs, &map, Some(&prefix), k);
    let mut expect = vec![0.0; d];
    for (m, h) in heads.iter().enumerate() {
        let o = vecmat(&value_row.data()[m * cv..(m + 1) * cv], &h.out);
        expect.iter_mut().zip(&o).for_each(|(e, x)| *e += x);
    }
    for (a, b) in got.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn memory_width_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let heads: Vec<Head> = (0..2).map(|_| Head::random(&mut rng, 4, 2, 2)).collect();
    let mut tape = Tape::new();
    let hv: Vec<HeadVars> = heads
        .iter()
        .map(|h| {
            let vs: Vec<Var> = h.tensors().iter().map(|t| tape.constant(t)).collect();
            Head::vars(&vs)
        })
        .collect();
    let q = tape.constant(&random(&mut rng, &[2, 4], 1.0));
    let r = tape.constant(&Tensor::full(&[2, 2], 0.5));
    let f = tape.constant(&random(&mut rng, &[3, 3, 4], 1.0));
    let m = tape.constant(&Tensor::zeros(&[4, 5]));
    assert!(matches!(
        memory_deformable_attention_on(&mut tape, &hv, q, r, f, Some(m), 2),
        Err(mdcdet_core::Error::Shape(_))
    ));
}

#[test]
fn slot_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, k, cv, p, lm) = (4, 2, 2, 3, 4);
    let heads: Vec<Head> = (0..2).map(|_| Head::random(&mut rng, d, cv, k)).collect();
    let queries = random(&mut rng, &[p, d], 1.0);
    let refs = Tensor::full(&[p, 2], 0.6);
    let map = random(&mut rng, &[4, 4, d], 1.0);
    let prefix = random(&mut rng, &[lm, d], 2.0);
    let mut tape = Tape::new();
    let hv: Vec<HeadVars> = heads
        .iter()
        .map(|h| {
            let vs: Vec<Var> = h.tensors().iter().map(|t| tape.constant(t)).collect();
            Head::vars(&vs)
        })
        .collect();
    let (q, r, f, m) = (tape.constant(&queries), tape.constant(&refs), tape.constant(&map), tape.constant(&prefix));
    let weights = memory_attention_weights(&mut tape, &hv, q, r, f, m, k).unwrap();
    let (_, oracle) = memory_oracle(&heads, &queries, &refs, &map, Some(&prefix), k);
    for (w, o) in weights.iter().zip(&oracle) {
        assert_eq!(w.shape(), &[p, k + lm / 2]);
        for row in 0..p {
            assert!((w.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in w.row(row).iter().zip(&o[row]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn memory_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, k, cv, p, lm) = (4, 2, 2, 2, 4);
    for _ in 0..20 {
        let mut inputs = vec![
            random(&mut rng, &[p, d], 1.0),
            Tensor::new(&[p, 2], (0..2 * p).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap(),
            random(&mut rng, &[3, 3, d], 1.0),
            random(&mut rng, &[lm, d], 1.0),
        ];
        for _ in 0..2 {
            inputs.extend(Head::random(&mut rng, d, cv, k).tensors());
        }
        let weight = random(&mut rng, &[p, d], 1.0);
        let err = gradcheck::check(&inputs, DEFAULT_STEP, |t, v| {
            let heads = [Head::vars(&v[4..10]), Head::vars(&v[10..16])];
            let out = memory_deformable_attention_on(t, &heads, v[0], v[1], v[2], Some(v[3]), k)?;
            let w = t.constant(&weight);
            let prod = t.mul(out, w)?;
            t.sum(prod)
        })
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}

#[test]
fn hidden_class_rows_receive_exactly_zero_gradient() {
    let cfg = DetectorConfig {
        dim: 8,
        heads: 2,
        points: 2,
        proposals: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 8,
        image_height: 8,
        image_width: 8,
        channels: 3,
        patch: 4,
        num_classes: 4,
        memory_length: 4,
    };
    let mut det = Detector::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random(&mut rng, &[8, 8, 3], 1.0);
    let visible = [0, 1];
    let mut tape = Tape::new();
    let f = det.encode_on(&mut tape, &img).unwrap();
    let z = det.decode_on(&mut tape, f, None).unwrap();
    let out = det.heads_on(&mut tape, z, &visible).unwrap();
    // Visible targets plus background on the remaining proposals.
    let picked = tape.select(out.scores, &[0, 5 + 1, 2 * 5 + 4]).unwrap();
    let logs = tape.log(picked).unwrap();
    let nll = tape.sum(logs).unwrap();
    let box_sum = tape.sum(out.boxes).unwrap();
    let loss = tape.sub(box_sum, nll).unwrap();
    tape.backward(loss, &mut [det.store_mut()]).unwrap();

    let w = det.store().by_name(CLASS_WEIGHT).unwrap();
    let b = det.store().by_name(CLASS_BIAS).unwrap();
    let (gw, gb) = (w.grad().unwrap(), b.grad().unwrap());
    for hidden in [2, 3] {
        assert!(gw[hidden * cfg.dim..(hidden + 1) * cfg.dim].iter().all(|&g| g == 0.0));
        assert_eq!(gb[hidden], 0.0);
    }
    assert!(gw[..cfg.dim].iter().any(|&g| g != 0.0));
    assert!(gb[cfg.num_classes] != 0.0);
}
