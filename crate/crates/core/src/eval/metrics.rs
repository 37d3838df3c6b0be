//! Attack success rate and person-class average precision.

use crate::error::{Error, Result};
use crate::oracle::{iou, Detection};
use crate::patch::MaskBox;

/// True when some person detection with confidence at least `conf_threshold`
/// overlaps `label` by at least `iou_threshold`.
pub fn label_matched(label: &MaskBox, detections: &[Detection], iou_threshold: f64, conf_threshold: f64) -> bool {
    let l = label.corners();
    detections
        .iter()
        .any(|d| d.is_person() && d.confidence >= conf_threshold && iou(d.bbox(), l) >= iou_threshold)
}

/// `1 − survivors / N`, where `baseline[i]` are the labels of image `i` detected
/// without attack (`N` in total) and a label survives when it is still matched
/// in `attacked[i]`.
pub fn asr(
    baseline: &[Vec<MaskBox>],
    attacked: &[Vec<Detection>],
    iou_threshold: f64,
    conf_threshold: f64,
) -> Result<f64> {
    if baseline.len() != attacked.len() {
        return Err(Error::InvalidArgument(format!(
            "{} baseline entries but {} attacked entries",
            baseline.len(),
            attacked.len()
        )));
    }
    let n: usize = baseline.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::UndefinedMetric("ASR needs at least one true positive under no attack".into()));
    }
    let survivors: usize = baseline
        .iter()
        .zip(attacked)
        .map(|(labels, dets)| labels.iter().filter(|l| label_matched(l, dets, iou_threshold, conf_threshold)).count())
        .sum();
    Ok(1.0 - survivors as f64 / n as f64)
}

/// Person-class AP with all-point interpolation.
///
/// Detections from every image are ranked by confidence (stable, so ties keep
/// input order); each is matched to the unmatched ground truth of its image
/// with the highest IoU, if that IoU reaches `iou_threshold`.
pub fn average_precision(detections: &[Vec<Detection>], ground_truth: &[Vec<MaskBox>], iou_threshold: f64) -> Result<f64> {
    if detections.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection entries but {} ground-truth entries",
            detections.len(),
            ground_truth.len()
        )));
    }
    let n_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one ground-truth box".into()));
    }

    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.is_person()).map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut precision = Vec::with_capacity(ranked.len());
    let mut is_tp = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, (img, det)) in ranked.iter().enumerate() {
        let best = ground_truth[*img]
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*img][*j])
            .map(|(j, g)| (j, iou(det.bbox(), g.corners())))
            .filter(|(_, v)| *v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            taken[*img][j] = true;
            tp += 1;
        }
        is_tp.push(best.is_some());
        precision.push(tp as f64 / (rank + 1) as f64);
    }

    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // recall rises by 1/n_gt at every true positive
    let mut ap = 0.0;
    for (p, hit) in precision.iter().zip(&is_tp) {
        if *hit {
            ap += p;
        }
    }
    let ap = ap / n_gt as f64;
    Ok(ap.clamp(0.0, 1.0))
}
