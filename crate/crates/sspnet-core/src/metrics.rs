//! Detection matching, average precision and miss rate over IoU
//! thresholds and object-scale bands.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchors::ScaleBand;
use crate::boxes::{iou, Detection, GtBox};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// Outcome of greedy matching for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetFlag {
    TruePositive,
    FalsePositive,
    /// Matched an ignore-flagged object; dropped from the PR curve.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// Per detection, in the order given (must be score-descending).
    pub flags: Vec<DetFlag>,
    /// Per ground truth: which (non-ignored) objects were found.
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching, highest score first; each object absorbs
/// at most one detection. Real objects are preferred over ignore
/// regions; a detection whose only admissible partner is an ignore
/// region is dropped rather than counted as a false positive.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thr: f64) -> MatchOutcome {
    debug_assert!(
        dets.windows(2).all(|w| w[0].score >= w[1].score),
        "detections must be sorted by descending score"
    );
    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let dbox = det.as_box();
        let mut best_real: Option<(usize, f64)> = None;
        let mut best_ignore: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let v = iou(gt, &dbox);
            if v < iou_thr {
                continue;
            }
            let slot = if gt.ignore {
                &mut best_ignore
            } else {
                &mut best_real
            };
            if slot.map_or(true, |(_, b)| v > b) {
                *slot = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best_real {
            gt_used[gi] = true;
            flags.push(DetFlag::TruePositive);
        } else if let Some((gi, _)) = best_ignore {
            gt_used[gi] = true;
            flags.push(DetFlag::Ignored);
        } else {
            flags.push(DetFlag::FalsePositive);
        }
    }
    let gt_matched = gt_used
        .iter()
        .zip(gts)
        .map(|(&u, g)| u && !g.ignore)
        .collect();
    MatchOutcome { flags, gt_matched }
}

/// Area under the precision-recall curve with the all-points precision
/// envelope. `None` when there are no ground truths to recall.
pub fn average_precision(flags: &[DetFlag], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for f in flags {
        match f {
            DetFlag::TruePositive => tp += 1,
            DetFlag::FalsePositive => fp += 1,
            DetFlag::Ignored => continue,
        }
        points.push((
            tp as f64 / n_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    if points.is_empty() {
        return Some(0.0);
    }
    // precision envelope: running max from the right
    let mut env = points.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &env {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Fraction of ground truths not matched by any detection, over the full
/// detection set (single operating point). `None` without ground truths.
pub fn miss_rate(gt_matched: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let matched = gt_matched.iter().filter(|&&m| m).count();
    Some(1.0 - matched as f64 / n_gt as f64)
}

/// One (threshold, band) cell of the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub ap: Option<f64>,
    pub mr: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Full cross-product report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed by (iou-threshold-in-percent, band name) for stable JSON.
    pub cells: BTreeMap<String, MetricCell>,
}

impl MetricReport {
    pub fn key(iou_thr: f64, band: ScaleBand) -> String {
        format!("{}@{}", band.name(), (iou_thr * 100.0).round() as u32)
    }

    pub fn cell(&self, iou_thr: f64, band: ScaleBand) -> Option<&MetricCell> {
        self.cells.get(&Self::key(iou_thr, band))
    }

    /// Aligned text table, one row per band, one column pair per threshold.
    pub fn to_table(&self, thresholds: &[f64]) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "band"));
        for &t in thresholds {
            out.push_str(&format!(
                "{:>10}{:>10}",
                format!("AP@{}", (t * 100.0) as u32),
                format!("MR@{}", (t * 100.0) as u32)
            ));
        }
        out.push('\n');
        for band in ScaleBand::REPORT_SET {
            out.push_str(&format!("{:<8}", band.name()));
            for &t in thresholds {
                match self.cell(t, band) {
                    Some(c) => {
                        let fmt = |v: Option<f64>| match v {
                            Some(x) => format!("{x:.4}"),
                            None => "-".to_string(),
                        };
                        out.push_str(&format!("{:>10}{:>10}", fmt(c.ap), fmt(c.mr)));
                    }
                    None => out.push_str(&format!("{:>10}{:>10}", "-", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-image inputs to evaluation.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: u64,
    pub gts: Vec<GtBox>,
}

/// Evaluates detections against ground truths for every threshold and
/// scale band. Within a band, out-of-band objects become ignore regions
/// so detections matching them are dropped rather than penalized.
pub fn evaluate(
    dets: &[Detection],
    images: &[ImageEval],
    thresholds: &[f64],
    bands: &[ScaleBand],
) -> Result<MetricReport> {
    let by_image: BTreeMap<u64, &ImageEval> =
        images.iter().map(|im| (im.image_id, im)).collect();
    for d in dets {
        if !by_image.contains_key(&d.image_id) {
            return Err(Error::data(format!(
                "detection references unknown image id {}",
                d.image_id
            )));
        }
    }

    let mut cells = BTreeMap::new();
    for &thr in thresholds {
        for &band in bands {
            let mut flags = Vec::new();
            let mut n_gt = 0usize;
            let mut n_det = 0usize;
            let mut all_scored: Vec<(f64, DetFlag)> = Vec::new();
            let mut miss_acc = (0usize, 0usize); // (matched, total)
            for im in images {
                let banded: Vec<GtBox> = im
                    .gts
                    .iter()
                    .map(|g| {
                        let mut g = *g;
                        if !band.contains(g.scale()) {
                            g.ignore = true;
                        }
                        g
                    })
                    .collect();
                let mut im_dets: Vec<Detection> = dets
                    .iter()
                    .filter(|d| d.image_id == im.image_id)
                    .cloned()
                    .collect();
                im_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
                let outcome = match_detections(&im_dets, &banded, thr);
                let real_count = banded.iter().filter(|g| !g.ignore).count();
                n_gt += real_count;
                n_det += im_dets.len();
                let matched = outcome.gt_matched.iter().filter(|&&m| m).count();
                miss_acc.0 += matched;
                miss_acc.1 += real_count;
                for (d, f) in im_dets.iter().zip(&outcome.flags) {
                    all_scored.push((d.score, *f));
                }
            }
            // merge across images by descending score for the PR curve
            all_scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            flags.extend(all_scored.iter().map(|(_, f)| *f));
            let ap = average_precision(&flags, n_gt);
            let mr = if miss_acc.1 == 0 {
                None
            } else {
                Some(1.0 - miss_acc.0 as f64 / miss_acc.1 as f64)
            };
            cells.insert(
                MetricReport::key(thr, band),
                MetricCell {
                    ap,
                    mr,
                    n_gt,
                    n_det,
                },
            );
        }
    }
    Ok(MetricReport { cells })
}
