//! Detection metrics: per-class average precision at an IoU threshold and
//! the past / current / all-seen class splits of a continual run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::{Annotation, BBox};
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored box on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// All-point interpolated AP of `class`. `truth[i]` holds the annotations of
/// image `i`. `None` when the class has no ground truth.
///
/// Detections are visited by descending score (ties by position in
/// `detections`); each takes the unmatched ground-truth box of its image
/// with the highest IoU, counting as a true positive when that IoU reaches
/// `threshold`.
pub fn average_precision(
    class: usize,
    detections: &[Detection],
    truth: &[Vec<Annotation>],
    threshold: f64,
) -> Result<Option<f64>> {
    let positives: usize = truth.iter().flatten().filter(|a| a.class == class).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    if dets.iter().any(|d| d.score.is_nan()) {
        return Err(Error::NonFinite("detection score"));
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut taken: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for d in dets {
        let boxes = truth
            .get(d.image)
            .ok_or_else(|| Error::Index(format!("detection on image {} of {}", d.image, truth.len())))?;
        let mut best: Option<(usize, f64)> = None;
        for (j, a) in boxes.iter().enumerate() {
            if a.class != class || taken[d.image][j] {
                continue;
            }
            let o = iou(&d.bbox, &a.bbox)?;
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                taken[d.image][j] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    Ok(Some(ap_from_hits(&hits, positives)))
}

/// Area under the precision envelope for a ranked hit list.
pub fn ap_from_hits(hits: &[bool], positives: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP for every class in `classes`.
pub fn class_aps(
    classes: &[usize],
    detections: &[Detection],
    truth: &[Vec<Annotation>],
    threshold: f64,
) -> Result<BTreeMap<usize, Option<f64>>> {
    classes.iter().map(|&c| Ok((c, average_precision(c, detections, truth, threshold)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualMap {
    /// Classes of earlier tasks; undefined at the first task.
    pub map_p: Option<f64>,
    pub map_c: Option<f64>,
    pub map_a: Option<f64>,
}

fn mean_defined<'a>(aps: &BTreeMap<usize, Option<f64>>, classes: impl Iterator<Item = &'a usize>) -> Option<f64> {
    let vals: Vec<f64> = classes.filter_map(|c| aps.get(c).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Means over the past, current and all seen classes at task `t`
/// (0-based), where `splits[k]` lists the classes of task `k`. Classes
/// without a defined AP are left out of every mean.
pub fn continual_map(aps: &BTreeMap<usize, Option<f64>>, t: usize, splits: &[Vec<usize>]) -> Result<ContinualMap> {
    if t >= splits.len() {
        return Err(Error::Index(format!("task {t} of {}", splits.len())));
    }
    let past: Vec<usize> = splits[..t].iter().flatten().copied().collect();
    let current = &splits[t];
    let map_p = if t == 0 { None } else { mean_defined(aps, past.iter()) };
    Ok(ContinualMap {
        map_p,
        map_c: mean_defined(aps, current.iter()),
        map_a: mean_defined(aps, past.iter().chain(current.iter())),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// 1-based task number.
    pub task: usize,
    #[serde(flatten)]
    pub map: ContinualMap,
    pub class_ap: BTreeMap<usize, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `task,metric,value` rows; undefined values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value\n");
        for t in &self.tasks {
            for (name, v) in [("map_p", t.map.map_p), ("map_c", t.map.map_c), ("map_a", t.map.map_a)] {
                let v = v.map(|x| format!("{x:.6}")).unwrap_or_default();
                let _ = writeln!(out, "{},{name},{v}", t.task);
            }
        }
        out
    }

    pub fn last(&self) -> Option<&TaskReport> {
        self.tasks.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, class: usize, score: f64, b: BBox) -> Detection {
        Detection { image, class, score, bbox: b }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(3.0, 0.5, 1.0, 1.0)).unwrap(), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.5, 1.0, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(iou(&a, &BBox::new(0.5, 0.5, -1.0, 1.0)), Err(Error::InvalidBox(_))));
    }

    #[test]
    fn perfect_detector() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let truth = vec![vec![Annotation::new(0, b1)], vec![Annotation::new(0, b2)]];
        let dets = [det(0, 0, 1.0, b1), det(1, 0, 1.0, b2)];
        assert_eq!(average_precision(0, &dets, &truth, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn no_detections_is_zero() {
        let truth = vec![vec![Annotation::new(0, BBox::new(0.3, 0.3, 0.2, 0.2))]];
        assert_eq!(average_precision(0, &[], &truth, 0.5).unwrap(), Some(0.0));
    }

    #[test]
    fn missing_class_is_undefined() {
        let truth = vec![vec![Annotation::new(1, BBox::new(0.3, 0.3, 0.2, 0.2))]];
        assert_eq!(average_precision(0, &[], &truth, 0.5).unwrap(), None);
    }

    #[test]
    fn hit_miss_hit_over_two_objects() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let truth = vec![vec![Annotation::new(0, b1), Annotation::new(0, b2)]];
        let miss = BBox::new(0.5, 0.1, 0.05, 0.05);
        let dets = [det(0, 0, 0.9, b1), det(0, 0, 0.8, miss), det(0, 0, 0.7, b2)];
        let ap = average_precision(0, &dets, &truth, 0.5).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let truth = vec![vec![Annotation::new(0, b)]];
        let dets = [det(0, 0, 0.9, b), det(0, 0, 0.8, b)];
        assert_eq!(average_precision(0, &dets, &truth, 0.5).unwrap(), Some(1.0));
        let dets = [det(0, 0, 0.9, BBox::new(0.8, 0.8, 0.1, 0.1)), det(0, 0, 0.8, b), det(0, 0, 0.7, b)];
        assert!((average_precision(0, &dets, &truth, 0.5).unwrap().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn continual_means() {
        let splits = vec![vec![0], vec![1]];
        let aps: BTreeMap<usize, Option<f64>> = [(0, Some(0.4)), (1, Some(0.6))].into();
        let m = continual_map(&aps, 1, &splits).unwrap();
        assert_eq!(m.map_p, Some(0.4));
        assert_eq!(m.map_c, Some(0.6));
        assert!((m.map_a.unwrap() - 0.5).abs() < 1e-15);
        let first = continual_map(&aps, 0, &splits).unwrap();
        assert_eq!(first.map_p, None);
        assert_eq!(first.map_c, Some(0.4));
        assert_eq!(first.map_a, Some(0.4));
    }

    #[test]
    fn all_mean_is_not_a_mean_of_means() {
        let splits = vec![vec![0, 1, 2], vec![3]];
        let aps: BTreeMap<usize, Option<f64>> = [(0, Some(0.0)), (1, Some(0.0)), (2, Some(0.0)), (3, Some(1.0))].into();
        let m = continual_map(&aps, 1, &splits).unwrap();
        assert_eq!(m.map_a, Some(0.25));
    }

    #[test]
    fn undefined_classes_are_skipped() {
        let splits = vec![vec![0, 1], vec![2]];
        let aps: BTreeMap<usize, Option<f64>> = [(0, Some(0.8)), (1, None), (2, None)].into();
        let m = continual_map(&aps, 1, &splits).unwrap();
        assert_eq!(m.map_p, Some(0.8));
        assert_eq!(m.map_c, None);
        assert_eq!(m.map_a, Some(0.8));
    }

    #[test]
    fn csv_rows() {
        let report = EvalReport {
            tasks: vec![TaskReport {
                task: 1,
                map: ContinualMap { map_p: None, map_c: Some(0.5), map_a: Some(0.5) },
                class_ap: BTreeMap::new(),
            }],
            config_hash: "abc".into(),
            seed: 1,
        };
        assert_eq!(report.to_csv(), "task,metric,value\n1,map_p,\n1,map_c,0.500000\n1,map_a,0.500000\n");
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
