//! Small strided feature extractor and the plain top-down merge used as
//! the control arm in every comparison.

use tensor_core::{Tape, Tensor, TensorError, Var};

use crate::error::Result;
use crate::nn::{Binder, BoundConv, Conv};
use crate::rng::Rng;

/// Pyramid level numbers; level k has stride 2^k relative to the input.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];
/// Strides of the four retained levels.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Hierarchical features, one tensor per level, uniform channel count.
pub struct FeaturePyramid {
    /// Index 0 holds level 2 (highest resolution).
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn level(&self, k: usize) -> &Var {
        &self.levels[k - LEVELS[0]]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Five stages of (3x3 conv, relu, stride-2 3x3 conv); the last four
/// stage outputs feed 1x1 lateral projections to a uniform width.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub stages: Vec<Stage>,
    pub laterals: Vec<Conv>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl BackboneParams {
    pub fn init(rng: &mut Rng, channels: usize) -> Self {
        let mut stages = Vec::new();
        let mut in_c = 1;
        for _ in 0..5 {
            stages.push(Stage {
                conv_a: Conv::init(rng, in_c, channels, 3, 1, 1),
                conv_b: Conv::init(rng, channels, channels, 3, 2, 1),
            });
            in_c = channels;
        }
        let laterals = (0..LEVELS.len())
            .map(|_| Conv::init(rng, channels, channels, 1, 1, 0))
            .collect();
        BackboneParams {
            stages,
            laterals,
            channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv_a.parameter_count() + s.conv_b.parameter_count())
            .sum::<usize>()
            + self
                .laterals
                .iter()
                .map(Conv::parameter_count)
                .sum::<usize>()
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundBackbone {
        BoundBackbone {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    (
                        s.conv_a.bind(binder, &format!("{prefix}.stage{i}.a")),
                        s.conv_b.bind(binder, &format!("{prefix}.stage{i}.b")),
                    )
                })
                .collect(),
            laterals: self
                .laterals
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(binder, &format!("{prefix}.lateral{i}")))
                .collect(),
            channels: self.channels,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.conv_a.visit(&format!("{prefix}.stage{i}.a"), out);
            s.conv_b.visit(&format!("{prefix}.stage{i}.b"), out);
        }
        for (i, c) in self.laterals.iter().enumerate() {
            c.visit(&format!("{prefix}.lateral{i}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.conv_a.visit_mut(&format!("{prefix}.stage{i}.a"), out);
            s.conv_b.visit_mut(&format!("{prefix}.stage{i}.b"), out);
        }
        for (i, c) in self.laterals.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.lateral{i}"), out);
        }
    }
}

pub struct BoundBackbone {
    stages: Vec<(BoundConv, BoundConv)>,
    laterals: Vec<BoundConv>,
    channels: usize,
}

impl BoundBackbone {
    /// Runs the extractor over a grayscale NCHW image whose spatial dims
    /// are divisible by 32, producing levels 2..=5 with strides 4..=32.
    pub fn extract_features(&self, image: &Var) -> Result<FeaturePyramid> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(TensorError::Dimension(format!(
                "expected [N,1,H,W] grayscale input, got {shape:?}"
            ))
            .into());
        }
        let top_stride = *STRIDES.last().expect("non-empty stride table");
        if shape[2] % top_stride != 0 || shape[3] % top_stride != 0 {
            return Err(TensorError::Argument(format!(
                "input {}x{} not divisible by {top_stride}",
                shape[2], shape[3]
            ))
            .into());
        }
        let mut x = image.clone();
        let mut raw = Vec::new();
        for (i, (a, b)) in self.stages.iter().enumerate() {
            x = a.apply(&x)?.relu();
            x = b.apply(&x)?;
            if i >= 1 {
                raw.push(x.clone());
            }
        }
        let levels = raw
            .iter()
            .zip(&self.laterals)
            .map(|(c, lat)| lat.apply(c))
            .collect::<tensor_core::Result<Vec<Var>>>()?;
        Ok(FeaturePyramid {
            levels,
            strides: STRIDES.to_vec(),
            channels: self.channels,
        })
    }
}

/// Plain top-down merge: copy the deepest level, then repeatedly
/// upsample and add the next lateral. The all-ones-gate limit of the
/// scale-selection merge reduces to exactly this.
pub fn merge_baseline(laterals: &[Var]) -> Result<Vec<Var>> {
    if laterals.is_empty() {
        return Err(TensorError::Argument("empty pyramid".into()).into());
    }
    let mut merged = vec![laterals.last().expect("non-empty").clone()];
    for c in laterals.iter().rev().skip(1) {
        let prev = merged.last().expect("non-empty");
        let up = prev.upsample_nearest(2)?;
        merged.push(up.add(c)?);
    }
    merged.reverse();
    Ok(merged)
}

/// Constant-filled pyramid on a tape; test and analysis helper.
pub fn constant_pyramid(tape: &Tape, channels: usize, base_hw: usize, value: f64) -> Vec<Var> {
    STRIDES
        .iter()
        .map(|&s| {
            let hw = base_hw * STRIDES[0] / s;
            tape.constant(Tensor::full(vec![1, channels, hw, hw], value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensor_core::finite_diff_check;

    fn bound(tape: &Tape, track: bool, channels: usize) -> (BoundBackbone, Binder) {
        let params = BackboneParams::init(&mut Rng::new(11), channels);
        let mut binder = Binder::new(tape, track);
        let b = params.bind(&mut binder, "bb");
        (b, binder)
    }

    #[test]
    fn level_sizes_for_64px_input() {
        let tape = Tape::new();
        let (bb, _) = bound(&tape, false, 4);
        let image = tape.constant(Tensor::ones(vec![1, 1, 64, 64]));
        let pyr = bb.extract_features(&image).unwrap();
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert_eq!(pyr.strides, vec![4, 8, 16, 32]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let tape = Tape::new();
        let (bb, _) = bound(&tape, false, 4);
        let image = tape.constant(Tensor::ones(vec![1, 1, 48, 64]));
        assert!(bb.extract_features(&image).is_err());
    }

    #[test]
    fn zero_image_zero_params_gives_zero_features() {
        let mut params = BackboneParams::init(&mut Rng::new(3), 4);
        let mut named = Vec::new();
        params.visit_mut("bb", &mut named);
        for (_, t) in named {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let mut binder = Binder::new(&tape, false);
        let bb = params.bind(&mut binder, "bb");
        let image = tape.constant(Tensor::zeros(vec![1, 1, 64, 64]));
        let pyr = bb.extract_features(&image).unwrap();
        for level in &pyr.levels {
            assert!(level.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_parameter_count_matches_hand_sum() {
        let params = BackboneParams::init(&mut Rng::new(1), 4);
        // stage 0: (4*1*9 + 4) + (4*4*9 + 4) = 188
        // stages 1..4: (144 + 4) * 2 = 296 each
        // laterals: 4 * (4*4 + 4) = 80
        assert_eq!(params.parameter_count(), 188 + 4 * 296 + 80);
    }

    #[test]
    fn baseline_merge_passthrough_when_deeper_levels_zero() {
        let tape = Tape::new();
        let mut levels = constant_pyramid(&tape, 1, 8, 0.0);
        levels[0] = tape.constant(Tensor::full(vec![1, 1, 8, 8], 2.5));
        let merged = merge_baseline(&levels).unwrap();
        assert_eq!(merged[0].value().data(), levels[0].value().data());
        for m in &merged[1..] {
            assert!(m.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn baseline_merge_telescopes_ones() {
        let tape = Tape::new();
        let levels = constant_pyramid(&tape, 1, 8, 1.0);
        let merged = merge_baseline(&levels).unwrap();
        assert!(merged[0].value().data().iter().all(|&v| v == 4.0));
        assert!(merged[1].value().data().iter().all(|&v| v == 3.0));
        assert!(merged[3].value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn merge_gradient_is_fan_in_per_upsample() {
        // every upsample fans one deep cell into 4 shallow cells, so
        // d(sum P2)/d(P5 cell) = 4^3 across the three top-down steps
        let tape = Tape::new();
        let levels = constant_pyramid(&tape, 1, 8, 1.0);
        let deep = tape.leaf(Tensor::full(vec![1, 1, 1, 1], 0.5).with_grad());
        let mut with_leaf: Vec<Var> = levels[..3].to_vec();
        with_leaf.push(deep.clone());
        let merged = merge_baseline(&with_leaf).unwrap();
        merged[0].sum().backward().unwrap();
        assert!(deep.grad().unwrap().data().iter().all(|&g| g == 64.0));

        // finite differences agree
        let err = finite_diff_check(
            |tape, v| {
                let mut lv = constant_pyramid(tape, 1, 8, 1.0)[..3].to_vec();
                lv.push(v.clone());
                Ok(merge_baseline(&lv).unwrap()[0].sum())
            },
            &Tensor::full(vec![1, 1, 1, 1], 0.5),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn extract_features_differentiable() {
        let tape = Tape::new();
        let (bb, _) = bound(&tape, true, 2);
        let image = tape.constant(Tensor::ones(vec![1, 1, 32, 32]));
        let pyr = bb.extract_features(&image).unwrap();
        // loss mixing all levels
        let mut loss = pyr.levels[0].sigmoid().mean();
        for l in &pyr.levels[1..] {
            loss = loss.add(&l.sigmoid().mean()).unwrap();
        }
        loss.backward().unwrap();

        // spot-check one stage weight against finite differences
        let params = BackboneParams::init(&mut Rng::new(11), 2);
        let w0 = params.stages[0].conv_a.weight.clone();
        let err = finite_diff_check(
            |tape, v| {
                let p = BackboneParams::init(&mut Rng::new(11), 2);
                let mut binder = Binder::new(tape, false);
                let mut bb = p.bind(&mut binder, "bb");
                // splice the probed tensor in as the first stage weight
                bb.stages[0].0.w = v.clone();
                let image = tape.constant(Tensor::ones(vec![1, 1, 32, 32]));
                let pyr = bb.extract_features(&image).unwrap();
                let mut loss = pyr.levels[0].sigmoid().mean();
                for l in &pyr.levels[1..] {
                    loss = loss.add(&l.sigmoid().mean())?;
                }
                Ok(loss)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
