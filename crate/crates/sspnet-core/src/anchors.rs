//! Prior-anchor clustering, per-level anchor matching, binary target
//! heatmaps and object-scale partitioning.

use serde::{Deserialize, Serialize};
use tensor_core::Tensor;

use crate::boxes::{iou, shape_iou, GtBox};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-level anchor shapes (one or more (w,h) pairs per level) plus the
/// level strides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Outer index: level (0 = level 2). Inner: anchor shapes in pixels.
    pub shapes: Vec<Vec<(f64, f64)>>,
    pub strides: Vec<usize>,
}

impl AnchorSpec {
    /// Geometric ladder: one square anchor per level, side = stride.
    pub fn geometric(strides: &[usize]) -> Self {
        AnchorSpec {
            shapes: strides.iter().map(|&s| vec![(s as f64, s as f64)]).collect(),
            strides: strides.to_vec(),
        }
    }

    /// One clustered shape per level, sorted by area ascending.
    pub fn from_clusters(mut clusters: Vec<(f64, f64)>, strides: &[usize]) -> Result<Self> {
        if clusters.len() != strides.len() {
            return Err(Error::arg(format!(
                "need {} clusters for {} levels, got {}",
                strides.len(),
                strides.len(),
                clusters.len()
            )));
        }
        clusters.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        Ok(AnchorSpec {
            shapes: clusters.into_iter().map(|c| vec![c]).collect(),
            strides: strides.to_vec(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }
}

/// Result of one Lloyd run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<(f64, f64)>,
    /// Mean best-IoU of the boxes against the final centroids.
    pub mean_best_iou: f64,
    /// Total objective sum(1 - best IoU) after each iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn objective(boxes: &[GtBox], centroids: &[(f64, f64)]) -> f64 {
    boxes
        .iter()
        .map(|b| {
            1.0 - centroids
                .iter()
                .map(|&(w, h)| shape_iou(b.w, b.h, w, h))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Lloyd iterations under the co-centered 1-IoU distance. Assignment
/// picks the nearest centroid; the update step takes each cluster's mean
/// (w,h) but keeps the old centroid whenever the mean would raise that
/// cluster's cost, so the objective never increases.
pub fn kmeans_anchors(boxes: &[GtBox], k: usize, seed: u64) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if boxes.len() < k {
        return Err(Error::arg(format!(
            "k = {k} exceeds {} boxes",
            boxes.len()
        )));
    }
    let mut rng = Rng::new(seed).fork("kmeans");
    let mut centroids: Vec<(f64, f64)> = rng
        .sample_indices(boxes.len(), k)
        .into_iter()
        .map(|i| (boxes[i].w, boxes[i].h))
        .collect();

    let assign = |centroids: &[(f64, f64)]| -> Vec<usize> {
        boxes
            .iter()
            .map(|b| {
                let mut best = 0;
                let mut best_iou = f64::NEG_INFINITY;
                for (ci, &(w, h)) in centroids.iter().enumerate() {
                    let v = shape_iou(b.w, b.h, w, h);
                    if v > best_iou {
                        best_iou = v;
                        best = ci;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignment = assign(&centroids);
    let mut history = vec![objective(boxes, &centroids)];
    let mut iterations = 0;
    for _ in 0..300 {
        iterations += 1;
        // update step with a descent guard per cluster
        for ci in 0..k {
            let members: Vec<&GtBox> = boxes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == ci)
                .map(|(b, _)| b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean = (
                members.iter().map(|b| b.w).sum::<f64>() / members.len() as f64,
                members.iter().map(|b| b.h).sum::<f64>() / members.len() as f64,
            );
            let cost = |c: (f64, f64)| {
                members
                    .iter()
                    .map(|b| 1.0 - shape_iou(b.w, b.h, c.0, c.1))
                    .sum::<f64>()
            };
            if cost(mean) <= cost(centroids[ci]) {
                centroids[ci] = mean;
            }
        }
        let next = assign(&centroids);
        history.push(objective(boxes, &centroids));
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }

    let n = boxes.len() as f64;
    let mean_best_iou = 1.0 - objective(boxes, &centroids) / n;
    Ok(KmeansResult {
        centroids,
        mean_best_iou,
        objective_history: history,
        iterations,
    })
}

/// Mean best-IoU of boxes against a fixed set of anchor shapes.
pub fn mean_best_iou(boxes: &[GtBox], shapes: &[(f64, f64)]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    boxes
        .iter()
        .map(|b| {
            shapes
                .iter()
                .map(|&(w, h)| shape_iou(b.w, b.h, w, h))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / boxes.len() as f64
}

/// One matched (object, level) record.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub gt_index: usize,
    /// Anchor shape index within the level.
    pub anchor: usize,
    /// Grid cell (row, col) holding the object center at this level.
    pub cell: (usize, usize),
    pub iou: f64,
    /// Set when the object matched nowhere and was force-assigned here.
    pub forced: bool,
}

/// Per-level matches plus per-object positive levels.
#[derive(Debug, Clone)]
pub struct LayerAssignment {
    /// Index 0 = level 2.
    pub per_level: Vec<Vec<Match>>,
    /// For each ground-truth box, the levels (0-based index) where it is
    /// positive.
    pub per_gt: Vec<Vec<usize>>,
}

/// Places each level's anchors at the cell under the object center and
/// marks the object positive wherever the best IoU clears `pos_thr`.
/// Objects that match nowhere are force-assigned to their best level.
pub fn match_anchors(gts: &[GtBox], spec: &AnchorSpec, pos_thr: f64) -> Result<LayerAssignment> {
    if !(0.0 < pos_thr && pos_thr < 1.0) {
        return Err(Error::arg(format!("pos_thr {pos_thr} outside (0,1)")));
    }
    let levels = spec.num_levels();
    let mut per_level: Vec<Vec<Match>> = vec![Vec::new(); levels];
    let mut per_gt: Vec<Vec<usize>> = vec![Vec::new(); gts.len()];

    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = gt.center();
        let mut best: Option<(usize, Match)> = None;
        let mut matched_any = false;
        for (li, (shapes, &stride)) in spec.shapes.iter().zip(&spec.strides).enumerate() {
            let cell_col = (cx / stride as f64).floor().max(0.0) as usize;
            let cell_row = (cy / stride as f64).floor().max(0.0) as usize;
            // anchor centered on the cell center
            let (acx, acy) = (
                (cell_col as f64 + 0.5) * stride as f64,
                (cell_row as f64 + 0.5) * stride as f64,
            );
            for (ai, &(aw, ah)) in shapes.iter().enumerate() {
                let anchor = GtBox::new(acx - aw / 2.0, acy - ah / 2.0, aw, ah);
                let v = iou(gt, &anchor);
                let m = Match {
                    gt_index: gi,
                    anchor: ai,
                    cell: (cell_row, cell_col),
                    iou: v,
                    forced: false,
                };
                if v >= pos_thr {
                    matched_any = true;
                    per_level[li].push(m.clone());
                    if per_gt[gi].last() != Some(&li) {
                        per_gt[gi].push(li);
                    }
                }
                if best.as_ref().map_or(true, |(_, b)| v > b.iou) {
                    best = Some((li, m));
                }
            }
        }
        if !matched_any {
            let (li, mut m) = best.expect("at least one level exists");
            m.forced = true;
            per_level[li].push(m);
            per_gt[gi].push(li);
        }
    }
    Ok(LayerAssignment { per_level, per_gt })
}

/// Binary per-level target maps: cell (i,j) of level k is 1 iff the cell
/// rectangle overlaps a ground-truth box positive at level k.
pub fn supervised_heatmaps(
    assignment: &LayerAssignment,
    gts: &[GtBox],
    shapes: &[(usize, usize)],
    strides: &[usize],
) -> Result<Vec<Tensor>> {
    if shapes.len() != assignment.per_level.len() || strides.len() != shapes.len() {
        return Err(Error::arg(format!(
            "heatmaps: {} levels vs {} shapes vs {} strides",
            assignment.per_level.len(),
            shapes.len(),
            strides.len()
        )));
    }
    let mut maps = Vec::with_capacity(shapes.len());
    for (li, (&(h, w), &stride)) in shapes.iter().zip(strides).enumerate() {
        let mut map = Tensor::zeros(vec![1, 1, h, w]);
        for m in &assignment.per_level[li] {
            let gt = &gts[m.gt_index];
            let s = stride as f64;
            let col0 = (gt.x / s).floor().max(0.0) as usize;
            let row0 = (gt.y / s).floor().max(0.0) as usize;
            let col1 = (((gt.x + gt.w) / s).ceil() as usize).min(w);
            let row1 = (((gt.y + gt.h) / s).ceil() as usize).min(h);
            for i in row0..row1 {
                for j in col0..col1 {
                    map.data_mut()[i * w + j] = 1.0;
                }
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

/// Scale partitions of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBand {
    Tiny1,
    Tiny2,
    Tiny3,
    /// Union of the three tiny bands.
    Tiny,
    Small,
    All,
}

impl ScaleBand {
    pub const REPORT_SET: [ScaleBand; 6] = [
        ScaleBand::Tiny1,
        ScaleBand::Tiny2,
        ScaleBand::Tiny3,
        ScaleBand::Tiny,
        ScaleBand::Small,
        ScaleBand::All,
    ];

    /// Closed/half-open bands over scale = sqrt(w*h): tiny1 [2,8],
    /// tiny2 (8,12], tiny3 (12,20], small (20,32]. Shared endpoints
    /// belong to the lower band.
    pub fn contains(&self, scale: f64) -> bool {
        match self {
            ScaleBand::Tiny1 => (2.0..=8.0).contains(&scale),
            ScaleBand::Tiny2 => scale > 8.0 && scale <= 12.0,
            ScaleBand::Tiny3 => scale > 12.0 && scale <= 20.0,
            ScaleBand::Tiny => (2.0..=20.0).contains(&scale),
            ScaleBand::Small => scale > 20.0 && scale <= 32.0,
            ScaleBand::All => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScaleBand::Tiny1 => "tiny1",
            ScaleBand::Tiny2 => "tiny2",
            ScaleBand::Tiny3 => "tiny3",
            ScaleBand::Tiny => "tiny",
            ScaleBand::Small => "small",
            ScaleBand::All => "all",
        }
    }
}

/// Indices of `gts` falling into each band.
#[derive(Debug, Clone, Default)]
pub struct ScalePartition {
    pub tiny1: Vec<usize>,
    pub tiny2: Vec<usize>,
    pub tiny3: Vec<usize>,
    pub tiny: Vec<usize>,
    pub small: Vec<usize>,
}

pub fn partition_by_scale(gts: &[GtBox]) -> ScalePartition {
    let mut p = ScalePartition::default();
    for (i, gt) in gts.iter().enumerate() {
        let s = gt.scale();
        if ScaleBand::Tiny1.contains(s) {
            p.tiny1.push(i);
        } else if ScaleBand::Tiny2.contains(s) {
            p.tiny2.push(i);
        } else if ScaleBand::Tiny3.contains(s) {
            p.tiny3.push(i);
        } else if ScaleBand::Small.contains(s) {
            p.small.push(i);
        }
        if ScaleBand::Tiny.contains(s) {
            p.tiny.push(i);
        }
    }
    p
}
