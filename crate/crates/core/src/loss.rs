//! Set-prediction detection loss and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, Annotation, BBox};
use crate::detector::{HeadOutputs, Prediction};
use crate::error::{Error, Result};
use crate::matching::{l1_distance, Assignment};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the background term of unmatched proposals.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 1.0, l1: 5.0, giou: 2.0, background: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLossTerms {
    pub l1: f64,
    /// 1 − GIoU, in [0, 2).
    pub giou: f64,
}

pub fn box_loss(predicted: &BBox, target: &BBox) -> Result<BoxLossTerms> {
    Ok(BoxLossTerms { l1: l1_distance(predicted, target), giou: 1.0 - giou(predicted, target)? })
}

#[derive(Clone, Copy, Debug)]
pub struct DetrLoss {
    pub loss: Var,
    /// Probabilities that fell below the log floor.
    pub clamped: usize,
}

struct Corners {
    x0: Var,
    y0: Var,
    x1: Var,
    y1: Var,
    area: Var,
}

fn corners_on(tape: &mut Tape, b: Var) -> Result<Corners> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 2)?;
    let w = tape.slice_cols(b, 2, 3)?;
    let h = tape.slice_cols(b, 3, 4)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok(Corners {
        x0: tape.sub(cx, hw)?,
        y0: tape.sub(cy, hh)?,
        x1: tape.add(cx, hw)?,
        y1: tape.add(cy, hh)?,
        area: tape.mul(w, h)?,
    })
}

/// Row-wise generalized IoU of two n × 4 box matrices, n × 1.
pub fn giou_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a = corners_on(tape, a)?;
    let b = corners_on(tape, b)?;
    let ix0 = tape.maximum(a.x0, b.x0)?;
    let iy0 = tape.maximum(a.y0, b.y0)?;
    let ix1 = tape.minimum(a.x1, b.x1)?;
    let iy1 = tape.minimum(a.y1, b.y1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let areas = tape.add(a.area, b.area)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex0 = tape.minimum(a.x0, b.x0)?;
    let ey0 = tape.minimum(a.y0, b.y0)?;
    let ex1 = tape.maximum(a.x1, b.x1)?;
    let ey1 = tape.maximum(a.y1, b.y1)?;
    let ew = tape.sub(ex1, ex0)?;
    let eh = tape.sub(ey1, ey0)?;
    let enclosure = tape.mul(ew, eh)?;
    let gap = tape.sub(enclosure, union)?;
    let frac = tape.div(gap, enclosure)?;
    tape.sub(iou, frac)
}

/// Classification terms over every proposal plus box terms over matched
/// proposals:
///
/// `Σ_matched [-log ŝ(class) + l1_w·l1 + giou_w·(1 − GIoU)] + bg_w · Σ_unmatched -log ŝ(background)`
///
/// with the classification part scaled by `class_w`.
pub fn detr_loss_on(
    tape: &mut Tape,
    out: HeadOutputs,
    truth: &[Annotation],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<DetrLoss> {
    let (p, c1) = match tape.shape(out.scores) {
        [p, c] => (*p, *c),
        s => return Err(Error::Shape(format!("scores must be P×(C+1), got {s:?}"))),
    };
    let background = c1 - 1;
    let mut flat = Vec::with_capacity(p);
    let mut coef = Vec::with_capacity(p);
    for &(prop, gt) in &assignment.pairs {
        let a = truth.get(gt).ok_or_else(|| Error::Index(format!("ground truth {gt} of {}", truth.len())))?;
        if prop >= p || a.class >= background {
            return Err(Error::Index(format!("pair ({prop}, class {}) outside {p}×{c1}", a.class)));
        }
        flat.push(prop * c1 + a.class);
        coef.push(-weights.class);
    }
    for prop in assignment.unmatched(p) {
        flat.push(prop * c1 + background);
        coef.push(-weights.class * weights.background);
    }
    let picked = tape.select(out.scores, &flat)?;
    let clamped = tape.value(picked).iter().filter(|&&s| s < PROB_FLOOR).count();
    let picked = tape.clamp_min(picked, PROB_FLOOR)?;
    let logs = tape.log(picked)?;
    let coef = tape.constant(&Tensor::vector(coef));
    let weighted = tape.mul(logs, coef)?;
    let mut loss = tape.sum(weighted)?;

    if !assignment.is_empty() {
        let rows = assignment.matched_proposals();
        let predicted = tape.gather_rows(out.boxes, &rows)?;
        let mut target = Vec::with_capacity(4 * rows.len());
        for &(_, gt) in &assignment.pairs {
            truth[gt].bbox.validate()?;
            target.extend(truth[gt].bbox.as_array());
        }
        let target = tape.constant(&Tensor::new(&[rows.len(), 4], target)?);
        let diff = tape.sub(predicted, target)?;
        let diff = tape.abs(diff)?;
        let l1 = tape.sum(diff)?;
        let l1 = tape.scale(l1, weights.l1)?;
        let g = giou_on(tape, predicted, target)?;
        let g = tape.sum(g)?;
        // Σ (1 − GIoU) = n − Σ GIoU
        let g = tape.scale(g, -weights.giou)?;
        let g = tape.add_scalar(g, weights.giou * rows.len() as f64)?;
        loss = tape.add(loss, l1)?;
        loss = tape.add(loss, g)?;
    }
    Ok(DetrLoss { loss, clamped })
}

/// Loss value for plain predictions.
pub fn detr_loss(
    predictions: &[Prediction],
    truth: &[Annotation],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = constant_outputs(&mut tape, predictions)?;
    let l = detr_loss_on(&mut tape, out, truth, assignment, weights)?;
    Ok(tape.scalar(l.loss))
}

/// Puts predictions on a tape as constant head outputs.
pub fn constant_outputs(tape: &mut Tape, predictions: &[Prediction]) -> Result<HeadOutputs> {
    if predictions.is_empty() {
        return Err(Error::Shape("no predictions".into()));
    }
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.scores.clone()).collect();
    let boxes: Vec<Vec<f64>> = predictions.iter().map(|p| p.bbox.as_array().to_vec()).collect();
    Ok(HeadOutputs {
        scores: tape.constant(&Tensor::from_rows(&scores)?),
        boxes: tape.constant(&Tensor::from_rows(&boxes)?),
    })
}

/// `detr + λ · lq`
pub fn total_loss(detr: f64, lq: f64, lambda: f64) -> f64 {
    detr + lambda * lq
}

pub fn total_loss_on(tape: &mut Tape, detr: Var, lq: Option<Var>, lambda: f64) -> Result<Var> {
    match lq {
        Some(lq) if lambda != 0.0 => {
            let s = tape.scale(lq, lambda)?;
            tape.add(detr, s)
        }
        _ => Ok(detr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{hungarian_match, MatchCost};

    fn pred(scores: Vec<f64>, b: BBox) -> Prediction {
        Prediction { scores, bbox: b }
    }

    #[test]
    fn identical_boxes_have_zero_terms() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        assert_eq!(box_loss(&b, &b).unwrap(), BoxLossTerms { l1: 0.0, giou: 0.0 });
    }

    #[test]
    fn separated_unit_boxes() {
        // Unit squares at x ∈ [0,1] and [2,3]: enclosure 3, union 2, GIoU = -1/3.
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(2.0, 0.0, 3.0, 1.0);
        let t = box_loss(&a, &b).unwrap();
        assert!((t.giou - 4.0 / 3.0).abs() < 1e-12);
        assert!((t.l1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nested_box_at_quarter_overlap() {
        let outer = BBox::new(0.5, 0.5, 0.4, 0.4);
        let inner = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert!((box_loss(&inner, &outer).unwrap().giou - 0.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.2);
        assert!(matches!(box_loss(&a, &a), Err(Error::InvalidBox(_))));
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let preds = [pred(vec![1.0, 0.0, 0.0], b), pred(vec![0.0, 0.0, 1.0], BBox::new(0.7, 0.7, 0.1, 0.1))];
        let gt = [Annotation::new(0, b)];
        let a = hungarian_match(&preds, &gt, &MatchCost::default()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!(detr_loss(&preds, &gt, &a, &LossWeights::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_give_log_class_count() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let c1 = 5;
        let preds = [pred(vec![1.0 / c1 as f64; c1], b)];
        let gt = [Annotation::new(2, b)];
        let a = Assignment { pairs: vec![(0, 0)] };
        let l = detr_loss(&preds, &gt, &a, &LossWeights::default()).unwrap();
        assert!((l - (c1 as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let mut tape = Tape::new();
        let out = constant_outputs(&mut tape, &[pred(vec![0.0, 1.0], b)]).unwrap();
        let gt = [Annotation::new(0, b)];
        let a = Assignment { pairs: vec![(0, 0)] };
        let l = detr_loss_on(&mut tape, out, &gt, &a, &LossWeights::default()).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((tape.scalar(l.loss) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn combined_objective() {
        assert_eq!(total_loss(1.7, 9.0, 0.0), 1.7);
        assert!((total_loss(1.0, 2.0, 0.01) - 1.02).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 3.0, 0.5), 3.5);
    }
}
