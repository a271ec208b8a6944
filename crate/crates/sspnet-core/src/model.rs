//! Full detector assembly: feature extractor, optional attention stack,
//! merge rule, dense first-stage head and the two-class region head.

use tensor_core::{Tape, Tensor, Var};

use crate::anchors::AnchorSpec;
use crate::backbone::{BackboneParams, BoundBackbone, FeaturePyramid, LEVELS, STRIDES};
use crate::cam::{BoundCam, CamParams};
use crate::error::{Error, Result};
use crate::neck::{BoundNeck, MergeRule, NeckOutput, NeckParams};
use crate::nn::{Binder, BoundConv, Conv};
use crate::rng::Rng;

/// Dense first-stage head: shared 3x3 trunk, then 1x1 objectness and
/// 1x1 box-delta convolutions, applied to every level.
#[derive(Debug, Clone)]
pub struct RpnParams {
    pub trunk: Conv,
    pub cls: Conv,
    pub reg: Conv,
}

impl RpnParams {
    pub fn init(rng: &mut Rng, channels: usize) -> Self {
        RpnParams {
            trunk: Conv::init(rng, channels, channels, 3, 1, 1),
            cls: Conv::init(rng, channels, 1, 1, 1, 0),
            reg: Conv::init(rng, channels, 4, 1, 1, 0),
        }
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundRpn {
        BoundRpn {
            trunk: self.trunk.bind(binder, &format!("{prefix}.trunk")),
            cls: self.cls.bind(binder, &format!("{prefix}.cls")),
            reg: self.reg.bind(binder, &format!("{prefix}.reg")),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.trunk.visit(&format!("{prefix}.trunk"), out);
        self.cls.visit(&format!("{prefix}.cls"), out);
        self.reg.visit(&format!("{prefix}.reg"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.trunk.visit_mut(&format!("{prefix}.trunk"), out);
        self.cls.visit_mut(&format!("{prefix}.cls"), out);
        self.reg.visit_mut(&format!("{prefix}.reg"), out);
    }
}

pub struct BoundRpn {
    pub trunk: BoundConv,
    pub cls: BoundConv,
    pub reg: BoundConv,
}

impl BoundRpn {
    /// Per-level (objectness logits `[1,1,h,w]`, box deltas `[1,4,h,w]`).
    pub fn forward(&self, levels: &[Var]) -> Result<Vec<(Var, Var)>> {
        levels
            .iter()
            .map(|p| {
                let t = self.trunk.apply(p)?.relu();
                Ok((self.cls.apply(&t)?, self.reg.apply(&t)?))
            })
            .collect()
    }
}

/// Two-class region head over 3x3-pooled region features.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc: Conv,
    pub cls: Conv,
    pub reg: Conv,
    pub hidden: usize,
}

impl HeadParams {
    pub fn init(rng: &mut Rng, channels: usize, hidden: usize) -> Self {
        HeadParams {
            fc: Conv::init(rng, channels * 9, hidden, 1, 1, 0),
            cls: Conv::init(rng, hidden, 2, 1, 1, 0),
            reg: Conv::init(rng, hidden, 4, 1, 1, 0),
            hidden,
        }
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundHead {
        BoundHead {
            fc: self.fc.bind(binder, &format!("{prefix}.fc")),
            cls: self.cls.bind(binder, &format!("{prefix}.cls")),
            reg: self.reg.bind(binder, &format!("{prefix}.reg")),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc.visit(&format!("{prefix}.fc"), out);
        self.cls.visit(&format!("{prefix}.cls"), out);
        self.reg.visit(&format!("{prefix}.reg"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc.visit_mut(&format!("{prefix}.fc"), out);
        self.cls.visit_mut(&format!("{prefix}.cls"), out);
        self.reg.visit_mut(&format!("{prefix}.reg"), out);
    }
}

pub struct BoundHead {
    pub fc: BoundConv,
    pub cls: BoundConv,
    pub reg: BoundConv,
}

impl BoundHead {
    /// `features` is `[R, C*9, 1, 1]`; returns class logits `[R, 2]` and
    /// box deltas `[R, 4]`.
    pub fn forward(&self, features: &Var) -> Result<(Var, Var)> {
        let h = self.fc.apply(features)?.relu();
        let n = features.shape()[0];
        let cls = self.cls.apply(&h)?.reshape(&[n, 2])?;
        let reg = self.reg.apply(&h)?.reshape(&[n, 4])?;
        Ok((cls, reg))
    }
}

/// Every parameter of the toy detector plus its structural choices.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    /// Present only when the merge rule needs attention maps.
    pub cam: Option<CamParams>,
    pub neck: NeckParams,
    pub rpn: RpnParams,
    pub head: HeadParams,
    pub rule: MergeRule,
    pub anchors: AnchorSpec,
    pub channels: usize,
}

impl ModelParams {
    /// Initializes with per-component seed streams so both merge rules
    /// share identical weights for every common component.
    pub fn init(
        seed_root: &Rng,
        rule: MergeRule,
        channels: usize,
        aspp_rates: &[usize],
        head_hidden: usize,
        anchors: AnchorSpec,
    ) -> Result<Self> {
        if anchors.num_levels() != LEVELS.len() {
            return Err(Error::arg(format!(
                "anchor table has {} levels, the pyramid has {}",
                anchors.num_levels(),
                LEVELS.len()
            )));
        }
        if anchors.shapes.iter().any(|s| s.len() != 1) {
            return Err(Error::arg(
                "the dense head expects exactly one anchor shape per level",
            ));
        }
        let backbone = BackboneParams::init(&mut seed_root.fork("init.backbone"), channels);
        let cam = match rule {
            MergeRule::ScaleSelect => Some(CamParams::init(
                &mut seed_root.fork("init.cam"),
                channels * LEVELS.len(),
                channels,
                aspp_rates,
            )?),
            MergeRule::Baseline => None,
        };
        let neck = NeckParams::init(&mut seed_root.fork("init.neck"), channels);
        let rpn = RpnParams::init(&mut seed_root.fork("init.rpn"), channels);
        let head = HeadParams::init(&mut seed_root.fork("init.head"), channels, head_hidden);
        Ok(ModelParams {
            backbone,
            cam,
            neck,
            rpn,
            head,
            rule,
            anchors,
            channels,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.backbone.visit("backbone", &mut out);
        if let Some(cam) = &self.cam {
            cam.visit("cam", &mut out);
        }
        self.neck.visit("neck", &mut out);
        self.rpn.visit("rpn", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.backbone.visit_mut("backbone", &mut out);
        if let Some(cam) = &mut self.cam {
            cam.visit_mut("cam", &mut out);
        }
        self.neck.visit_mut("neck", &mut out);
        self.rpn.visit_mut("rpn", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, binder: &mut Binder) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(binder, "backbone"),
            cam: self.cam.as_ref().map(|c| c.bind(binder, "cam")),
            neck: self.neck.bind(binder, "neck"),
            rpn: self.rpn.bind(binder, "rpn"),
            head: self.head.bind(binder, "head"),
            rule: self.rule,
        }
    }
}

pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub cam: Option<BoundCam>,
    pub neck: BoundNeck,
    pub rpn: BoundRpn,
    pub head: BoundHead,
    pub rule: MergeRule,
}

/// Everything a training step or inference pass reads.
pub struct ModelOutputs {
    pub laterals: FeaturePyramid,
    pub neck: NeckOutput,
    /// Per-level (objectness logits, box deltas).
    pub rpn: Vec<(Var, Var)>,
}

impl BoundModel {
    pub fn forward(&self, image: &Var) -> Result<ModelOutputs> {
        let laterals = self.backbone.extract_features(image)?;
        let attention = match (&self.cam, self.rule) {
            (Some(cam), MergeRule::ScaleSelect) => Some(cam.forward(&laterals)?.1),
            (None, MergeRule::Baseline) => None,
            (Some(_), MergeRule::Baseline) => None,
            (None, MergeRule::ScaleSelect) => {
                return Err(Error::arg("scale-select model without attention stack"))
            }
        };
        let neck = self
            .neck
            .forward(&laterals.levels, attention, self.rule)?;
        let rpn = self.rpn.forward(&neck.outputs)?;
        Ok(ModelOutputs {
            laterals,
            neck,
            rpn,
        })
    }
}

/// Binds and runs a model in one call; common in tests and analysis.
pub fn run_model(params: &ModelParams, tape: &Tape, image: &Var, track: bool) -> Result<(ModelOutputs, Binder)> {
    let mut binder = Binder::new(tape, track);
    let bound = params.bind(&mut binder);
    let out = bound.forward(image)?;
    Ok((out, binder))
}
