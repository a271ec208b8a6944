//! Context attention: pool every pyramid level to the bottom resolution,
//! mix receptive fields with parallel dilated convolutions, then emit one
//! sigmoid heatmap per level through strided 3x3 gates.

use tensor_core::{Tensor, TensorError, Var};

use crate::backbone::{FeaturePyramid, LEVELS};
use crate::error::Result;
use crate::nn::{Binder, BoundConv, Conv};
use crate::rng::Rng;

/// Per-level single-channel attention maps, each in the open (0,1).
pub struct AttentionPyramid {
    /// Index 0 holds level 2; shapes track the feature pyramid.
    pub maps: Vec<Var>,
    pub strides: Vec<usize>,
}

impl AttentionPyramid {
    pub fn level(&self, k: usize) -> &Var {
        &self.maps[k - LEVELS[0]]
    }
}

/// Parallel multi-rate context mixer: one 3x3 conv per rate
/// (dilation = padding = rate), one 1x1 branch, concatenated and fused
/// back down by a 1x1 conv.
#[derive(Debug, Clone)]
pub struct AsppParams {
    pub rates: Vec<usize>,
    pub branches: Vec<Conv>,
    pub point: Conv,
    pub fuse: Conv,
}

impl AsppParams {
    pub fn init(rng: &mut Rng, in_c: usize, out_c: usize, rates: &[usize]) -> Result<Self> {
        if rates.is_empty() {
            return Err(TensorError::Argument("aspp needs at least one rate".into()).into());
        }
        if let Some(&bad) = rates.iter().find(|&&r| r < 1) {
            return Err(TensorError::Argument(format!("aspp rate {bad} < 1")).into());
        }
        let branches = rates
            .iter()
            .map(|&r| Conv::init_dilated(rng, in_c, out_c, 3, 1, r, r))
            .collect();
        let concat_c = out_c * (rates.len() + 1);
        Ok(AsppParams {
            rates: rates.to_vec(),
            branches,
            point: Conv::init(rng, in_c, out_c, 1, 1, 0),
            fuse: Conv::init(rng, concat_c, out_c, 1, 1, 0),
        })
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundAspp {
        BoundAspp {
            branches: self
                .branches
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(binder, &format!("{prefix}.branch{i}")))
                .collect(),
            point: self.point.bind(binder, &format!("{prefix}.point")),
            fuse: self.fuse.bind(binder, &format!("{prefix}.fuse")),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, c) in self.branches.iter().enumerate() {
            c.visit(&format!("{prefix}.branch{i}"), out);
        }
        self.point.visit(&format!("{prefix}.point"), out);
        self.fuse.visit(&format!("{prefix}.fuse"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, c) in self.branches.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.branch{i}"), out);
        }
        self.point.visit_mut(&format!("{prefix}.point"), out);
        self.fuse.visit_mut(&format!("{prefix}.fuse"), out);
    }
}

pub struct BoundAspp {
    pub branches: Vec<BoundConv>,
    pub point: BoundConv,
    pub fuse: BoundConv,
}

impl BoundAspp {
    /// Output keeps the input's spatial shape for every rate.
    pub fn apply(&self, x: &Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        outs.push(self.point.apply(x)?);
        for b in &self.branches {
            outs.push(b.apply(x)?);
        }
        let cat = Var::concat(&outs, 1)?;
        Ok(self.fuse.apply(&cat)?)
    }
}

/// Gate stack: context mixer plus one strided 3x3 sigmoid gate per level.
#[derive(Debug, Clone)]
pub struct CamParams {
    pub aspp: AsppParams,
    pub gates: Vec<Conv>,
}

impl CamParams {
    /// `in_c` is the total concatenated channel count entering the mixer;
    /// `mid_c` the mixed width feeding the gates.
    pub fn init(rng: &mut Rng, in_c: usize, mid_c: usize, rates: &[usize]) -> Result<Self> {
        let aspp = AsppParams::init(rng, in_c, mid_c, rates)?;
        let gates = LEVELS
            .iter()
            .map(|&k| Conv::init(rng, mid_c, 1, 3, 1 << (k - LEVELS[0]), 1))
            .collect();
        Ok(CamParams { aspp, gates })
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundCam {
        BoundCam {
            aspp: self.aspp.bind(binder, &format!("{prefix}.aspp")),
            gates: self
                .gates
                .iter()
                .zip(LEVELS)
                .map(|(c, k)| c.bind(binder, &format!("{prefix}.gate{k}")))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.aspp.visit(&format!("{prefix}.aspp"), out);
        for (c, k) in self.gates.iter().zip(LEVELS) {
            c.visit(&format!("{prefix}.gate{k}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.aspp.visit_mut(&format!("{prefix}.aspp"), out);
        for (c, k) in self.gates.iter_mut().zip(LEVELS) {
            c.visit_mut(&format!("{prefix}.gate{k}"), out);
        }
    }
}

pub struct BoundCam {
    pub aspp: BoundAspp,
    pub gates: Vec<BoundConv>,
}

impl BoundCam {
    /// Context features followed by the per-level heatmaps.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<(Var, AttentionPyramid)> {
        let context = build_context(pyramid)?;
        let mixed = self.aspp.apply(&context)?;
        let attention = attention_heatmaps(&mixed, &self.gates, &pyramid.strides)?;
        Ok((mixed, attention))
    }
}

/// Upsamples every level to the bottom level's shape and concatenates
/// along channels.
pub fn build_context(pyramid: &FeaturePyramid) -> Result<Var> {
    if pyramid.levels.len() < 2 {
        return Err(TensorError::Argument(format!(
            "context needs at least 2 levels, got {}",
            pyramid.levels.len()
        ))
        .into());
    }
    let base_stride = pyramid.strides[0];
    let mut parts = Vec::with_capacity(pyramid.levels.len());
    for (level, &stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let factor = stride / base_stride;
        parts.push(if factor == 1 {
            level.clone()
        } else {
            level.upsample_nearest(factor)?
        });
    }
    Ok(Var::concat(&parts, 1)?)
}

/// One strided 3x3 conv + sigmoid per level. The stride doubles per level
/// so map k matches feature level k exactly.
pub fn attention_heatmaps(
    context: &Var,
    gates: &[BoundConv],
    strides: &[usize],
) -> Result<AttentionPyramid> {
    let shape = context.shape();
    let down = strides.last().expect("levels present") / strides[0];
    if shape[2] % down != 0 || shape[3] % down != 0 {
        return Err(TensorError::Degenerate(format!(
            "context {}x{} not divisible down to the top level (factor {down})",
            shape[2], shape[3]
        ))
        .into());
    }
    let maps = gates
        .iter()
        .map(|g| g.apply(context).map(|m| m.sigmoid()))
        .collect::<tensor_core::Result<Vec<Var>>>()?;
    Ok(AttentionPyramid {
        maps,
        strides: strides.to_vec(),
    })
}

/// 8-bit grayscale rendering of a single-channel map, values clamped
/// into [0,1]; visualization helper.
pub fn heatmap_to_bytes(map: &Tensor) -> Vec<u8> {
    map.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
