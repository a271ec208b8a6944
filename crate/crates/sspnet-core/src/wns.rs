//! Weighted negative sampling: fuse detector confidence with foreground
//! coverage into softmax selection probabilities and draw negatives
//! without replacement.

use crate::boxes::{iof, iou, GtBox};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A candidate negative with its fused selection probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub index: usize,
    /// Detector confidence in [0,1].
    pub confidence: f64,
    /// Maximum intersection-over-foreground against any object.
    pub max_iof: f64,
    /// Softmax-fused probability; the pool sums to 1.
    pub fused: f64,
}

/// Softmax over `lambda * confidence + (1 - lambda) * iof` per candidate.
pub fn wns_scores(candidates: &[(f64, f64)], lambda: f64) -> Result<Vec<SampleScore>> {
    if candidates.is_empty() {
        return Err(Error::arg("empty candidate pool"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0,1]")));
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|&(c, i)| lambda * c + (1.0 - lambda) * i)
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(candidates
        .iter()
        .zip(exps)
        .enumerate()
        .map(|(index, (&(confidence, max_iof), e))| SampleScore {
            index,
            confidence,
            max_iof,
            fused: e / z,
        })
        .collect())
}

/// Draws `n` distinct indices, each draw proportional to the remaining
/// fused probabilities. Deterministic for a fixed seed.
pub fn wns_sample(scores: &[SampleScore], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::arg(format!(
            "cannot draw {n} from a pool of {}",
            scores.len()
        )));
    }
    let mut rng = Rng::new(seed).fork("wns");
    let mut remaining: Vec<(usize, f64)> =
        scores.iter().map(|s| (s.index, s.fused)).collect();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = remaining.iter().map(|(_, p)| p).sum();
        let mut u = rng.uniform() * total;
        let mut chosen = remaining.len() - 1;
        for (pos, &(_, p)) in remaining.iter().enumerate() {
            if u < p {
                chosen = pos;
                break;
            }
            u -= p;
        }
        picked.push(remaining.remove(chosen).0);
    }
    Ok(picked)
}

/// A region proposal with an objectness score.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: GtBox,
    pub score: f64,
    /// Pyramid level index (0 = level 2) the proposal came from.
    pub level: usize,
}

/// Negative candidate pool for second-stage sampling: proposals whose
/// best IoU against every object stays under `neg_iou_thr`, scored by
/// (confidence, max IoF over objects).
pub fn candidate_pool(
    proposals: &[Proposal],
    gts: &[GtBox],
    neg_iou_thr: f64,
) -> Result<Vec<(usize, (f64, f64))>> {
    let mut pool = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let best_iou = gts
            .iter()
            .map(|g| iou(g, &p.bbox))
            .fold(0.0f64, f64::max);
        if best_iou >= neg_iou_thr {
            continue;
        }
        let mut max_iof = 0.0f64;
        for g in gts {
            max_iof = max_iof.max(iof(g, &p.bbox)?);
        }
        pool.push((pi, (p.score, max_iof)));
    }
    Ok(pool)
}
