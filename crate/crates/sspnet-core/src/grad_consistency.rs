//! Mechanical verification of how the gated top-down merge reshapes
//! per-level gradient flow.
//!
//! For a location picked in the deepest merged map, each pyramid level
//! gets an independent probe loss at the spatially aligned cell. Reverse
//! mode then recovers (a) each level's local gradient, (b) its
//! contribution arriving back at the deep cell, and (c) the effective
//! gate coefficient along the merge chain, which must equal the closed
//! product of attention values read on that chain.

use serde::Serialize;
use tensor_core::{Tape, Tensor, Var};

use crate::backbone::LEVELS;
use crate::error::{Error, Result};
use crate::losses::bce_with_logits;
use crate::neck::merge_scale_select;
use crate::rng::Rng;

/// Cell of level `level_idx` (0 = level 2) aligned with a deepest-level
/// cell under repeated nearest upsampling.
pub fn aligned_cell(loc5: (usize, usize), level_idx: usize) -> (usize, usize) {
    let f = 1usize << (LEVELS.len() - 1 - level_idx);
    (loc5.0 * f, loc5.1 * f)
}

/// Closed-form gate coefficient for the contribution of the deepest
/// merged map to level `level_idx` at a location: the deepest gate times
/// the level's own gate times the squared gates of every level crossed
/// in between. The deepest level itself has coefficient 1.
pub fn gate_coefficient(
    attention: &[Tensor],
    loc5: (usize, usize),
    level_idx: usize,
) -> Result<f64> {
    let top = LEVELS.len() - 1;
    if level_idx > top {
        return Err(Error::arg(format!("level index {level_idx} out of range")));
    }
    if level_idx == top {
        return Ok(1.0);
    }
    let read = |li: usize| -> Result<f64> {
        let t = &attention[li];
        let (h, w) = (t.shape()[2], t.shape()[3]);
        let (i, j) = aligned_cell(loc5, li);
        if i >= h || j >= w {
            return Err(Error::arg(format!(
                "location {loc5:?} out of bounds at level index {li}"
            )));
        }
        Ok(t.at4(0, 0, i, j))
    };
    let mut coeff = read(top)? * read(level_idx)?;
    for li in level_idx + 1..top {
        let a = read(li)?;
        coeff *= a * a;
    }
    Ok(coeff)
}

/// One level's probe results.
#[derive(Debug, Clone, Serialize)]
pub struct LevelProbe {
    /// Pyramid level number (2..=5).
    pub level: usize,
    /// Probe target: 1.0 where the location counts as an object center.
    pub label: f64,
    /// Channel-mean pre-activation at the aligned cell.
    pub pre_activation: f64,
    /// dL_level / d(pre-activation), from reverse mode.
    pub grad: f64,
    /// The same derivative in closed form (sigmoid(s) - label).
    pub grad_closed_form: f64,
    /// Gate coefficient along the merge chain (1 for the deepest level).
    pub gate: f64,
    /// dL_level / d(deep cell), channel-summed, from reverse mode.
    pub contribution: f64,
}

/// Full decomposition at one location.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub location: (usize, usize),
    pub levels: Vec<LevelProbe>,
    /// d(sum of level losses)/d(deep cell), channel-summed.
    pub autograd_total: f64,
    /// Sum over levels of gate * grad.
    pub decomposed_total: f64,
    pub residual: f64,
    /// Nonzero per-level gradients disagree in sign.
    pub sign_conflict: bool,
}

impl GradReport {
    /// Gradient mass arriving at the deep cell from levels whose probe
    /// label is background.
    pub fn background_mass(&self) -> f64 {
        self.levels
            .iter()
            .filter(|l| l.label == 0.0)
            .map(|l| l.contribution.abs())
            .sum()
    }
}

fn channel_sum_at(map: &Tensor, cell: (usize, usize)) -> f64 {
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    (0..c).map(|ci| map.data()[(ci * h + cell.0) * w + cell.1]).sum()
}

/// Probes every level of a merged pyramid at the cells aligned with
/// `loc5` and decomposes the gradient reaching the deepest map.
///
/// `attention` supplies the closed-form gate values; pass all-ones maps
/// for a plain merge. Labels are per level, index 0 = level 2.
pub fn probe_merged(
    merged: &[Var],
    attention: &[Tensor],
    loc5: (usize, usize),
    labels: &[f64],
) -> Result<GradReport> {
    if merged.len() != LEVELS.len() || labels.len() != LEVELS.len() {
        return Err(Error::arg(format!(
            "expected {} levels, got {} merged / {} labels",
            LEVELS.len(),
            merged.len(),
            labels.len()
        )));
    }
    let deep = &merged[LEVELS.len() - 1];
    let deep_shape = deep.shape();
    if loc5.0 >= deep_shape[2] || loc5.1 >= deep_shape[3] {
        return Err(Error::arg(format!(
            "location {loc5:?} outside deepest map {deep_shape:?}"
        )));
    }

    // per-level channel-mean probes at the aligned cells
    let mut pre_acts = Vec::with_capacity(LEVELS.len());
    let mut losses = Vec::with_capacity(LEVELS.len());
    for (li, m) in merged.iter().enumerate() {
        let shape = m.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let cell = aligned_cell(loc5, li);
        if cell.0 >= h || cell.1 >= w {
            return Err(Error::arg(format!(
                "aligned cell {cell:?} outside level {} map",
                LEVELS[li]
            )));
        }
        let idx: Vec<usize> = (0..c).map(|ci| (ci * h + cell.0) * w + cell.1).collect();
        let s = m.gather(&idx)?.weighted_sum(&vec![1.0 / c as f64; c])?;
        let s1 = s.reshape(&[1])?;
        losses.push(bce_with_logits(&s1, &labels[li..=li])?);
        pre_acts.push(s);
    }

    // per-level backward passes
    let mut levels = Vec::with_capacity(LEVELS.len());
    for (li, loss) in losses.iter().enumerate() {
        loss.backward()?;
        let s_val = pre_acts[li].scalar_value()?;
        let grad = pre_acts[li]
            .grad()
            .map(|g| g.data()[0])
            .unwrap_or(0.0);
        let contribution = deep
            .grad()
            .map(|g| channel_sum_at(&g, loc5))
            .unwrap_or(0.0);
        levels.push(LevelProbe {
            level: LEVELS[li],
            label: labels[li],
            pre_activation: s_val,
            grad,
            grad_closed_form: crate::sigmoid(s_val) - labels[li],
            gate: gate_coefficient(attention, loc5, li)?,
            contribution,
        });
    }

    // joint backward for the total
    let mut total = losses[0].clone();
    for l in &losses[1..] {
        total = total.add(l)?;
    }
    total.backward()?;
    let autograd_total = deep
        .grad()
        .map(|g| channel_sum_at(&g, loc5))
        .unwrap_or(0.0);
    let decomposed_total = levels.iter().map(|l| l.gate * l.grad).sum();

    let signs: Vec<f64> = levels
        .iter()
        .map(|l| l.grad)
        .filter(|g| g.abs() > 1e-12)
        .collect();
    let sign_conflict = signs.iter().any(|&g| g > 0.0) && signs.iter().any(|&g| g < 0.0);

    Ok(GradReport {
        location: loc5,
        levels,
        autograd_total,
        decomposed_total,
        residual: (autograd_total - decomposed_total).abs(),
        sign_conflict,
    })
}

/// Ingredients of a controlled merge graph: the deepest map is a tracked
/// leaf, laterals and attention are constants.
pub struct ControlledGraph {
    pub tape: Tape,
    pub merged: Vec<Var>,
    pub attention_values: Vec<Tensor>,
    pub deep_leaf: Var,
}

/// Builds a single-channel gated merge chain over random inputs with the
/// attention maps detached, the configuration under which the closed
/// gate product is exact.
pub fn controlled_graph(seed: u64, deep_hw: usize, unit_attention: bool) -> ControlledGraph {
    let mut rng = Rng::new(seed).fork("controlled-graph");
    let tape = Tape::new();
    let sizes: Vec<usize> = (0..LEVELS.len())
        .map(|li| deep_hw << (LEVELS.len() - 1 - li))
        .collect();

    let attention_values: Vec<Tensor> = sizes
        .iter()
        .map(|&hw| {
            let data: Vec<f64> = (0..hw * hw)
                .map(|_| {
                    if unit_attention {
                        1.0
                    } else {
                        rng.range_f64(0.05, 0.95)
                    }
                })
                .collect();
            Tensor::new(vec![1, 1, hw, hw], data).expect("shape matches")
        })
        .collect();
    let attention: Vec<Var> = attention_values
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();

    let deep_leaf = tape.leaf(
        Tensor::new(
            vec![1, 1, deep_hw, deep_hw],
            (0..deep_hw * deep_hw).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
        )
        .expect("shape matches")
        .with_grad(),
    );
    let mut laterals: Vec<Var> = sizes[..LEVELS.len() - 1]
        .iter()
        .map(|&hw| {
            tape.constant(
                Tensor::new(
                    vec![1, 1, hw, hw],
                    (0..hw * hw).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
                )
                .expect("shape matches"),
            )
        })
        .collect();
    laterals.push(deep_leaf.clone());

    let merged = merge_scale_select(&laterals, &attention).expect("aligned shapes");
    ControlledGraph {
        tape,
        merged,
        attention_values,
        deep_leaf,
    }
}

/// Aggregate comparison of background gradient mass across locations.
#[derive(Debug, Clone, Serialize)]
pub struct ConflictSummary {
    pub locations: usize,
    pub mean_background_mass_baseline: f64,
    pub mean_background_mass_gated: f64,
    /// Fraction of probed locations where the gated mass is strictly
    /// smaller.
    pub fraction_reduced: f64,
    pub baseline_sign_conflicts: usize,
    pub gated_sign_conflicts: usize,
}

/// Probes the same locations in two merged pyramids (plain and gated)
/// and compares the background-driven gradient mass reaching the deep
/// map.
pub fn conflict_summary(
    baseline_merged: &[Var],
    gated_merged: &[Var],
    gated_attention: &[Tensor],
    probes: &[((usize, usize), Vec<f64>)],
) -> Result<ConflictSummary> {
    if probes.is_empty() {
        return Err(Error::arg("no probe locations"));
    }
    let ones: Vec<Tensor> = baseline_merged
        .iter()
        .map(|m| {
            let s = m.shape();
            Tensor::ones(vec![1, 1, s[2], s[3]])
        })
        .collect();
    let mut mass_base = 0.0;
    let mut mass_gated = 0.0;
    let mut reduced = 0usize;
    let mut conflicts = (0usize, 0usize);
    for (loc, labels) in probes {
        let rb = probe_merged(baseline_merged, &ones, *loc, labels)?;
        let rg = probe_merged(gated_merged, gated_attention, *loc, labels)?;
        let (b, g) = (rb.background_mass(), rg.background_mass());
        mass_base += b;
        mass_gated += g;
        if g < b {
            reduced += 1;
        }
        conflicts.0 += rb.sign_conflict as usize;
        conflicts.1 += rg.sign_conflict as usize;
    }
    let n = probes.len() as f64;
    Ok(ConflictSummary {
        locations: probes.len(),
        mean_background_mass_baseline: mass_base / n,
        mean_background_mass_gated: mass_gated / n,
        fraction_reduced: reduced as f64 / n,
        baseline_sign_conflicts: conflicts.0,
        gated_sign_conflicts: conflicts.1,
    })
}
