//! Residual scale gating, the intersection-gated top-down merge, and the
//! per-level output convolutions feeding the detection heads.

use serde::{Deserialize, Serialize};
use tensor_core::{Tensor, TensorError, Var};

use crate::backbone::{merge_baseline, LEVELS};
use crate::cam::AttentionPyramid;
use crate::error::Result;
use crate::nn::{Binder, BoundConv, Conv};
use crate::rng::Rng;

/// Which merge rule produced a pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeRule {
    /// Plain upsample-and-add.
    Baseline,
    /// Attention-intersection gating on the top-down path.
    ScaleSelect,
}

impl std::str::FromStr for MergeRule {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(MergeRule::Baseline),
            "sspnet" => Ok(MergeRule::ScaleSelect),
            other => Err(crate::Error::arg(format!(
                "unknown neck '{other}', expected baseline|sspnet"
            ))),
        }
    }
}

/// Residual gate: `(1 + a) * f`, `a` broadcast over channels. Leaves the
/// features untouched wherever the map is zero.
pub fn scale_enhance(features: &Var, attention: &Var) -> Result<Var> {
    let fs = features.shape();
    let as_ = attention.shape();
    if as_.len() != 4 || as_[1] != 1 {
        return Err(TensorError::Dimension(format!(
            "attention map must be [N,1,H,W], got {as_:?}"
        ))
        .into());
    }
    if fs[2..] != as_[2..] || fs[0] != as_[0] {
        return Err(TensorError::Dimension(format!(
            "scale_enhance: feature {fs:?} vs attention {as_:?}"
        ))
        .into());
    }
    Ok(features.mul(&attention.affine(1.0, 1.0))?)
}

/// One top-down step: gate the upsampled deeper merged map by the
/// intersection of the adjacent attention maps, then add the shallower
/// lateral.
///
/// Wherever `a_shallow * upsample(a_deep) = 0` the output equals the
/// lateral exactly, and no gradient flows into the deeper map.
pub fn scale_select_merge(
    merged_deep: &Var,
    a_shallow: &Var,
    a_deep: &Var,
    lateral_shallow: &Var,
) -> Result<Var> {
    let gate = a_shallow.mul(&a_deep.upsample_nearest(2)?)?;
    let up = merged_deep.upsample_nearest(2)?;
    gate.mul(&up)?.add(lateral_shallow).map_err(Into::into)
}

/// Full top-down chain from the deepest level. `laterals` are the
/// (already gated, if applicable) per-level inputs, index 0 = level 2.
pub fn merge_scale_select(laterals: &[Var], attention: &[Var]) -> Result<Vec<Var>> {
    if laterals.len() != attention.len() || laterals.is_empty() {
        return Err(TensorError::Dimension(format!(
            "merge: {} laterals vs {} attention maps",
            laterals.len(),
            attention.len()
        ))
        .into());
    }
    let top = laterals.len() - 1;
    let mut merged = vec![laterals[top].clone()];
    for i in (0..top).rev() {
        let prev = merged.last().expect("non-empty");
        merged.push(scale_select_merge(
            prev,
            &attention[i],
            &attention[i + 1],
            &laterals[i],
        )?);
    }
    merged.reverse();
    Ok(merged)
}

/// Per-level 3x3 output convolutions mapping merged maps to head inputs.
#[derive(Debug, Clone)]
pub struct NeckParams {
    pub out_convs: Vec<Conv>,
}

impl NeckParams {
    pub fn init(rng: &mut Rng, channels: usize) -> Self {
        NeckParams {
            out_convs: LEVELS
                .iter()
                .map(|_| Conv::init(rng, channels, channels, 3, 1, 1))
                .collect(),
        }
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundNeck {
        BoundNeck {
            out_convs: self
                .out_convs
                .iter()
                .zip(LEVELS)
                .map(|(c, k)| c.bind(binder, &format!("{prefix}.out{k}")))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (c, k) in self.out_convs.iter().zip(LEVELS) {
            c.visit(&format!("{prefix}.out{k}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (c, k) in self.out_convs.iter_mut().zip(LEVELS) {
            c.visit_mut(&format!("{prefix}.out{k}"), out);
        }
    }
}

pub struct BoundNeck {
    pub out_convs: Vec<BoundConv>,
}

/// Merged pyramid plus provenance.
pub struct NeckOutput {
    /// Head inputs, one 3x3 conv past the merged maps.
    pub outputs: Vec<Var>,
    /// Raw merged maps, the quantity the gradient analysis reads.
    pub merged: Vec<Var>,
    pub attention: Option<AttentionPyramid>,
    pub rule: MergeRule,
}

impl BoundNeck {
    /// Applies the chosen merge rule over the laterals, then the output
    /// convolutions. For [`MergeRule::ScaleSelect`] the caller supplies
    /// attention maps and the laterals are gated residually first.
    pub fn forward(
        &self,
        laterals: &[Var],
        attention: Option<AttentionPyramid>,
        rule: MergeRule,
    ) -> Result<NeckOutput> {
        let merged = match (rule, &attention) {
            (MergeRule::Baseline, _) => merge_baseline(laterals)?,
            (MergeRule::ScaleSelect, Some(att)) => {
                let enhanced = laterals
                    .iter()
                    .zip(&att.maps)
                    .map(|(f, a)| scale_enhance(f, a))
                    .collect::<Result<Vec<Var>>>()?;
                merge_scale_select(&enhanced, &att.maps)?
            }
            (MergeRule::ScaleSelect, None) => {
                return Err(crate::Error::arg(
                    "scale-select merge needs attention maps",
                ));
            }
        };
        let outputs = merged
            .iter()
            .zip(&self.out_convs)
            .map(|(m, c)| c.apply(m))
            .collect::<tensor_core::Result<Vec<Var>>>()?;
        Ok(NeckOutput {
            outputs,
            merged,
            attention,
            rule,
        })
    }
}
