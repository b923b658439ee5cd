//! Mask IoU and COCO-convention average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{rle_decode, rle_encode, BinaryMask, DatasetIndex, Rle};
use crate::error::{Error, Result};

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub image_id: u64,
    pub category: String,
    pub mask: BinaryMask,
    pub score: f64,
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Dimension { what: "mask size".into(), expected: a.height * a.width, found: b.height * b.width });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

struct GtInstance {
    ann_id: u64,
    mask: BinaryMask,
}

/// Ground truth decoded once, grouped by `(class, image)`.
pub struct GroundTruth {
    by_class: BTreeMap<String, BTreeMap<u64, Vec<GtInstance>>>,
}

impl GroundTruth {
    pub fn new(index: &DatasetIndex) -> Result<Self> {
        let mut by_class: BTreeMap<String, BTreeMap<u64, Vec<GtInstance>>> = BTreeMap::new();
        for ann in &index.annotations {
            let name = index.category(ann.category_id).map(|c| c.name.clone()).unwrap_or_default();
            let mask = index.decode_mask(ann)?;
            by_class.entry(name).or_default().entry(ann.image_id).or_default().push(GtInstance { ann_id: ann.id, mask });
        }
        for images in by_class.values_mut() {
            for list in images.values_mut() {
                list.sort_by_key(|g| g.ann_id);
            }
        }
        Ok(Self { by_class })
    }

    pub fn num_instances(&self, class: &str) -> usize {
        self.by_class.get(class).map_or(0, |m| m.values().map(Vec::len).sum())
    }

    /// AP×100 of `class` at each threshold, or `None` without ground truth.
    pub fn class_ap(&self, predictions: &[InstancePrediction], class: &str, thresholds: &[f64]) -> Result<Option<Vec<f64>>> {
        let npos = self.num_instances(class);
        if npos == 0 {
            return Ok(None);
        }
        let empty = BTreeMap::new();
        let gts = self.by_class.get(class).unwrap_or(&empty);
        // Predictions of this class in descending score, ties by input order.
        let mut preds: Vec<(usize, &InstancePrediction)> =
            predictions.iter().enumerate().filter(|(_, p)| p.category == class).collect();
        preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let ious: Vec<Vec<f64>> = preds
            .iter()
            .map(|(_, p)| match gts.get(&p.image_id) {
                Some(list) => list.iter().map(|g| mask_iou(&p.mask, &g.mask)).collect(),
                None => Ok(Vec::new()),
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(thresholds.len());
        for &thr in thresholds {
            let mut used: BTreeMap<u64, Vec<bool>> =
                gts.iter().map(|(&im, list)| (im, vec![false; list.len()])).collect();
            let mut tp = Vec::with_capacity(preds.len());
            for (i, (_, p)) in preds.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                if let Some(flags) = used.get(&p.image_id) {
                    for (j, &iou) in ious[i].iter().enumerate() {
                        if flags[j] || iou < thr {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((j, iou));
                        }
                    }
                }
                if let Some((j, _)) = best {
                    used.get_mut(&p.image_id).expect("checked")[j] = true;
                }
                tp.push(best.is_some());
            }
            out.push(interpolated_ap(&tp, npos));
        }
        Ok(Some(out))
    }
}

/// 101-point interpolated AP×100 from score-ordered hit flags.
pub fn interpolated_ap(tp: &[bool], npos: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut hits, mut seen) = (0usize, 0usize);
    for &t in tp {
        seen += 1;
        hits += usize::from(t);
        recall.push(hits as f64 / npos as f64);
        precision.push(hits as f64 / seen as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    100.0 * total / RECALL_POINTS as f64
}

/// AP×100 for one class at one threshold; `None` when it has no ground truth.
pub fn compute_ap(predictions: &[InstancePrediction], gts: &DatasetIndex, class: &str, iou_threshold: f64) -> Result<Option<f64>> {
    let gt = GroundTruth::new(gts)?;
    Ok(gt.class_ap(predictions, class, &[iou_threshold])?.map(|v| v[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: u64,
    category: String,
    segmentation: Rle,
    score: f64,
}

/// JSON array, one record per instance with an RLE mask.
pub fn predictions_to_json(predictions: &[InstancePrediction]) -> String {
    let recs: Vec<_> = predictions
        .iter()
        .map(|p| PredictionRecord {
            image_id: p.image_id,
            category: p.category.clone(),
            segmentation: rle_encode(&p.mask),
            score: p.score,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("records serialise");
    s.push('\n');
    s
}

pub fn predictions_from_json(text: &str) -> Result<Vec<InstancePrediction>> {
    let recs: Vec<PredictionRecord> =
        serde_json::from_str(text).map_err(|e| Error::Parse { record: "predictions".into(), detail: e.to_string() })?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if !r.score.is_finite() {
                return Err(Error::Parse { record: format!("prediction {i}"), detail: "non-finite score".into() });
            }
            let mask = rle_decode(&r.segmentation).map_err(|d| Error::Parse { record: format!("prediction {i}"), detail: d })?;
            Ok(InstancePrediction { image_id: r.image_id, category: r.category, mask, score: r.score })
        })
        .collect()
}
