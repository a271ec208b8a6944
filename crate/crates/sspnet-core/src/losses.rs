//! Attention losses (dice + hard-negative-mined BCE), detection losses
//! and the joint objective.

use serde::{Deserialize, Serialize};
use tensor_core::{Tensor, TensorError, Var};

use crate::error::Result;

/// Prediction clamp for log terms.
const BCE_EPS: f64 = 1e-7;
/// Dice smoothing.
const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// BCE attention-loss weight.
    pub alpha: f64,
    /// Dice attention-loss weight.
    pub beta: f64,
    /// Box-regression weight in the first-stage loss.
    pub mu1: f64,
    /// Box-regression weight in the second-stage loss.
    pub mu2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 1.0,
            mu1: 1.0,
            mu2: 1.0,
        }
    }
}

fn check_target(a: &Var, s: &Tensor, what: &str) -> Result<()> {
    if a.shape() != s.shape() {
        return Err(TensorError::Dimension(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.shape(),
            s.shape()
        ))
        .into());
    }
    Ok(())
}

/// Squared-denominator dice with +1 smoothing:
/// `1 - (2 sum(a*s) + 1) / (sum(a^2) + sum(s^2) + 1)`. Stays in [0, 1);
/// exactly 0 when both maps are empty or identical binary.
pub fn dice_loss(a: &Var, s: &Tensor) -> Result<Var> {
    check_target(a, s, "dice_loss")?;
    let s_sq_sum: f64 = s.data().iter().map(|v| v * v).sum();
    let s_const = a.tape().constant(s.clone());
    let num = a.mul(&s_const)?.sum().affine(2.0, DICE_EPS);
    let den = a.mul(a)?.sum().affine(1.0, s_sq_sum + DICE_EPS);
    Ok(num.div(&den)?.affine(-1.0, 1.0))
}

/// Per-cell binary cross entropy of a map in (0,1) against a 0/1 target,
/// with predictions clamped to [1e-7, 1 - 1e-7].
pub fn bce_map(a: &Var, s: &Tensor) -> Result<Var> {
    check_target(a, s, "bce")?;
    let clamped = a.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let s_const = a.tape().constant(s.clone());
    let pos = s_const.mul(&clamped.ln()?)?;
    let one_minus_s = s_const.affine(-1.0, 1.0);
    let neg = one_minus_s.mul(&clamped.affine(-1.0, 1.0).ln()?)?;
    Ok(pos.add(&neg)?.affine(-1.0, 0.0))
}

/// BCE with online hard-negative mining: keeps every positive cell plus
/// the `ratio.1 / ratio.0` hardest negatives per positive, then averages
/// over the kept cells. With no positives, the `max(1, 0.25%)` hardest
/// negatives are kept.
pub fn bce_ohem_loss(a: &Var, s: &Tensor, ratio: (usize, usize)) -> Result<Var> {
    if ratio.0 == 0 {
        return Err(TensorError::Argument("ohem ratio numerator is zero".into()).into());
    }
    let map = bce_map(a, s)?;
    let losses = map.value();
    let mut positives = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, &t) in s.data().iter().enumerate() {
        if t == 1.0 {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    let keep_neg = if positives.is_empty() {
        ((s.len() as f64 * 0.0025).floor() as usize).max(1)
    } else {
        positives.len() * ratio.1 / ratio.0
    };
    // hardest first; ties broken by index for determinism
    negatives.sort_by(|&i, &j| {
        losses.data()[j]
            .total_cmp(&losses.data()[i])
            .then(i.cmp(&j))
    });
    negatives.truncate(keep_neg.min(negatives.len()));

    let kept = positives.len() + negatives.len();
    let mut weights = vec![0.0; s.len()];
    for &i in positives.iter().chain(&negatives) {
        weights[i] = 1.0 / kept as f64;
    }
    Ok(map.weighted_sum(&weights)?)
}

/// Summed per-level attention loss: `alpha * bce_ohem + beta * dice`.
pub fn attention_loss(
    attention: &[Var],
    targets: &[Tensor],
    weights: &LossWeights,
) -> Result<Var> {
    if attention.len() != targets.len() || attention.is_empty() {
        return Err(TensorError::Dimension(format!(
            "attention loss: {} maps vs {} targets",
            attention.len(),
            targets.len()
        ))
        .into());
    }
    let mut total: Option<Var> = None;
    for (a, s) in attention.iter().zip(targets) {
        let bce = bce_ohem_loss(a, s, (1, 3))?.affine(weights.alpha, 0.0);
        let dice = dice_loss(a, s)?.affine(weights.beta, 0.0);
        let level = bce.add(&dice)?;
        total = Some(match total {
            Some(t) => t.add(&level)?,
            None => level,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean smooth-L1 between a prediction and a constant target.
pub fn smooth_l1(pred: &Var, target: &Tensor) -> Result<Var> {
    check_target(pred, target, "smooth_l1")?;
    let t = pred.tape().constant(target.clone());
    Ok(pred.sub(&t)?.huber().mean())
}

/// Mean binary cross entropy of logits against 0/1 labels.
pub fn bce_with_logits(logits: &Var, labels: &[f64]) -> Result<Var> {
    if logits.len() != labels.len() || labels.is_empty() {
        return Err(TensorError::Dimension(format!(
            "bce_with_logits: {} logits vs {} labels",
            logits.len(),
            labels.len()
        ))
        .into());
    }
    let probs = logits.sigmoid();
    let target = Tensor::new(logits.shape(), labels.to_vec())?;
    Ok(bce_map(&probs, &target)?.mean())
}

/// Mean cross entropy of `[R, C]` logits against class indices.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::Dimension(format!(
            "cross_entropy: logits {:?} vs {} labels",
            shape,
            labels.len()
        ))
        .into());
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Argument(format!("label {bad} >= {classes} classes")).into());
    }
    let probs = logits.softmax(1)?.clamp(1e-12, 1.0)?;
    let picked: Vec<usize> = labels.iter().enumerate().map(|(r, &l)| r * classes + l).collect();
    let at_target = probs.gather(&picked)?.ln()?;
    let n = labels.len() as f64;
    Ok(at_target.weighted_sum(&vec![-1.0 / n; labels.len()])?)
}

/// Sampled classification + positive-only regression terms for one stage.
pub struct StageBatch<'a> {
    /// Gathered per-sample logits: `[n]` objectness or `[n, 2]` classes.
    pub cls: Var,
    /// Binary labels for the first stage; class indices for the second.
    pub labels: StageLabels<'a>,
    /// Gathered regression predictions for positive samples, 4 per box.
    pub reg_pred: Option<Var>,
    /// Matching regression targets.
    pub reg_target: Option<Tensor>,
}

pub enum StageLabels<'a> {
    Binary(&'a [f64]),
    Classes(&'a [usize]),
}

/// Stage loss: mean classification over the sampled set plus
/// `mu * mean smooth-L1` over positive boxes (0 when there are none).
pub fn stage_loss(batch: &StageBatch, mu: f64) -> Result<Var> {
    let cls = match &batch.labels {
        StageLabels::Binary(labels) => bce_with_logits(&batch.cls, labels)?,
        StageLabels::Classes(labels) => cross_entropy(&batch.cls, labels)?,
    };
    match (&batch.reg_pred, &batch.reg_target) {
        (Some(pred), Some(target)) => {
            let reg = smooth_l1(pred, target)?.affine(mu, 0.0);
            Ok(cls.add(&reg)?)
        }
        (None, None) => Ok(cls),
        _ => Err(TensorError::Argument(
            "regression prediction and target must come together".into(),
        )
        .into()),
    }
}

/// First- and second-stage losses.
pub fn detection_losses(
    rpn: &StageBatch,
    head: &StageBatch,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    Ok((
        stage_loss(rpn, weights.mu1)?,
        stage_loss(head, weights.mu2)?,
    ))
}

/// Plain sum of the three objectives.
pub fn joint_loss(l_rpn: &Var, l_head: &Var, l_attention: &Var) -> Result<Var> {
    Ok(l_rpn.add(l_head)?.add(l_attention)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensor_core::{finite_diff_check, Tape};

    fn on_tape(tape: &Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn dice_zero_for_identical_binary_maps() {
        let tape = Tape::new();
        let s = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let a = tape.constant(s.clone());
        let loss = dice_loss(&a, &s).unwrap().scalar_value().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn dice_zero_for_empty_maps() {
        let tape = Tape::new();
        let s = Tensor::zeros(vec![1, 1, 2, 2]);
        let a = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert_eq!(dice_loss(&a, &s).unwrap().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn dice_half_map_single_positive() {
        // A = 0.5 over 4 cells, one target cell:
        // 1 - (2*0.5 + 1) / (4*0.25 + 1 + 1) = 1 - 2/3
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let mut s = Tensor::zeros(vec![1, 1, 2, 2]);
        s.data_mut()[0] = 1.0;
        let loss = dice_loss(&a, &s).unwrap().scalar_value().unwrap();
        assert!((loss - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_stays_in_unit_interval_and_rewards_mass_on_target() {
        let tape = Tape::new();
        let mut s = Tensor::zeros(vec![1, 1, 2, 2]);
        s.data_mut()[1] = 1.0;
        let mut prev = f64::INFINITY;
        // shift mass from a background cell to the target cell
        for t in [0.0f64, 0.25, 0.5, 0.75, 0.95] {
            let a = tape.constant(
                Tensor::new(vec![1, 1, 2, 2], vec![0.95 - t * 0.9, 0.05 + t * 0.9, 0.05, 0.05])
                    .unwrap(),
            );
            let loss = dice_loss(&a, &s).unwrap().scalar_value().unwrap();
            assert!((0.0..1.0).contains(&loss));
            assert!(loss < prev, "loss should fall as mass moves onto target");
            prev = loss;
        }
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(dice_loss(&a, &Tensor::zeros(vec![1, 1, 4, 4])).is_err());
    }

    #[test]
    fn ohem_keeps_one_to_three() {
        // 1 positive + 100 negatives with equal losses: exactly 4 cells kept
        let tape = Tape::new();
        let n = 101;
        let mut s = Tensor::zeros(vec![1, 1, 1, n]);
        s.data_mut()[0] = 1.0;
        let mut a_data = vec![0.3; n];
        a_data[0] = 0.6;
        let a = tape.constant(Tensor::new(vec![1, 1, 1, n], a_data).unwrap());
        let loss = bce_ohem_loss(&a, &s, (1, 3)).unwrap();
        // selected mean: (bce(0.6,1) + 3*bce(0.3,0)) / 4
        let expect = (-(0.6f64.ln()) + 3.0 * -(0.7f64.ln())) / 4.0;
        assert!((loss.scalar_value().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ohem_selects_hardest_negatives() {
        let tape = Tape::new();
        let mut s = Tensor::zeros(vec![1, 1, 1, 6]);
        s.data_mut()[0] = 1.0;
        // negative predictions: higher value = harder negative
        let a = tape.constant(
            Tensor::new(vec![1, 1, 1, 6], vec![0.9, 0.9, 0.5, 0.1, 0.05, 0.02]).unwrap(),
        );
        let loss = bce_ohem_loss(&a, &s, (1, 3)).unwrap().scalar_value().unwrap();
        let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        // hardest three negatives are cells 1, 2, 3
        let expect = (bce(0.9, 1.0) + bce(0.9, 0.0) + bce(0.5, 0.0) + bce(0.1, 0.0)) / 4.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn ohem_perfect_prediction_is_tiny() {
        let tape = Tape::new();
        let mut s = Tensor::zeros(vec![1, 1, 2, 2]);
        s.data_mut()[2] = 1.0;
        let a = tape.constant(
            Tensor::new(vec![1, 1, 2, 2], vec![1e-9, 1e-9, 1.0 - 1e-9, 1e-9]).unwrap(),
        );
        let loss = bce_ohem_loss(&a, &s, (1, 3)).unwrap().scalar_value().unwrap();
        assert!(loss < 1e-5, "loss = {loss}");
    }

    #[test]
    fn ohem_no_positives_keeps_fraction() {
        let tape = Tape::new();
        let n = 1000;
        let s = Tensor::zeros(vec![1, 1, 1, n]);
        let mut data = vec![0.1; n];
        data[17] = 0.99; // one glaring false positive
        let a = tape.constant(Tensor::new(vec![1, 1, 1, n], data).unwrap());
        let loss = bce_ohem_loss(&a, &s, (1, 3)).unwrap().scalar_value().unwrap();
        // 0.25% of 1000 = 2 kept cells, the two hardest
        let bce0 = -(0.01f64.ln());
        let bce1 = -(0.9f64.ln());
        assert!((loss - (bce0 + bce1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_zero_weights_zero_value_and_grad() {
        let tape = Tape::new();
        let a = on_tape(&tape, vec![1, 1, 2, 2], vec![0.4, 0.6, 0.2, 0.8]);
        let s = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let att = a.sigmoid();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let loss = attention_loss(&[att], &[s], &w).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), 0.0);
        loss.backward().unwrap();
        assert!(a.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn attention_loss_near_zero_for_perfect_maps() {
        let tape = Tape::new();
        let s = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = tape.constant(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0 - 1e-9, 1e-9, 1e-9, 1.0 - 1e-9]).unwrap(),
        );
        let loss = attention_loss(&[a], &[s], &LossWeights::default())
            .unwrap()
            .scalar_value()
            .unwrap();
        assert!(loss < 1e-4, "loss = {loss}");
    }

    #[test]
    fn attention_loss_gradient_flows_when_wrong() {
        let tape = Tape::new();
        let logits = on_tape(&tape, vec![1, 1, 2, 2], vec![0.3, -0.2, 0.5, -0.1]);
        let a = logits.sigmoid();
        let s = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = attention_loss(&[a], &[s], &LossWeights::default()).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn smooth_l1_pointwise_values() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![3], vec![0.0, 0.5, 2.0]).unwrap());
        let target = Tensor::zeros(vec![3]);
        let loss = smooth_l1(&pred, &target).unwrap().scalar_value().unwrap();
        assert!((loss - (0.0 + 0.125 + 1.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2, 2], vec![0.7, 0.7, -0.3, -0.3]).unwrap());
        let ce = cross_entropy(&logits, &[0, 1]).unwrap().scalar_value().unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn stage_loss_perfect_predictions_vanish() {
        let tape = Tape::new();
        // strongly correct logits
        let cls = tape.constant(Tensor::new(vec![2], vec![14.0, -14.0]).unwrap());
        let batch = StageBatch {
            cls,
            labels: StageLabels::Binary(&[1.0, 0.0]),
            reg_pred: Some(tape.constant(Tensor::zeros(vec![4]))),
            reg_target: Some(Tensor::zeros(vec![4])),
        };
        let loss = stage_loss(&batch, 1.0).unwrap().scalar_value().unwrap();
        assert!(loss < 1e-5, "loss = {loss}");
    }

    #[test]
    fn stage_loss_mu_zero_drops_regression() {
        let tape = Tape::new();
        let cls = tape.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mk = |mu: f64| {
            let batch = StageBatch {
                cls: cls.clone(),
                labels: StageLabels::Binary(&[1.0, 0.0]),
                reg_pred: Some(tape.constant(Tensor::new(vec![4], vec![3.0, 3.0, 3.0, 3.0]).unwrap())),
                reg_target: Some(Tensor::zeros(vec![4])),
            };
            stage_loss(&batch, mu).unwrap().scalar_value().unwrap()
        };
        let pure_cls = {
            let batch = StageBatch {
                cls: cls.clone(),
                labels: StageLabels::Binary(&[1.0, 0.0]),
                reg_pred: None,
                reg_target: None,
            };
            stage_loss(&batch, 1.0).unwrap().scalar_value().unwrap()
        };
        assert!((mk(0.0) - pure_cls).abs() < 1e-15);
        assert!(mk(1.0) > mk(0.0));
    }

    #[test]
    fn joint_loss_is_plain_sum() {
        let tape = Tape::new();
        let a = tape.scalar(1.0);
        let b = tape.scalar(2.0);
        let c = tape.scalar(3.0);
        assert_eq!(joint_loss(&a, &b, &c).unwrap().scalar_value().unwrap(), 6.0);
        let z = tape.scalar(0.0);
        let x = tape.scalar(4.25);
        assert_eq!(joint_loss(&z, &z, &x).unwrap().scalar_value().unwrap(), 4.25);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // dice + ohem-bce through a sigmoid map
        let x0 = Tensor::new(
            vec![1, 1, 3, 3],
            vec![0.4, -0.8, 1.2, 0.1, -0.3, 0.9, -1.1, 0.6, 0.2],
        )
        .unwrap();
        let mut s = Tensor::zeros(vec![1, 1, 3, 3]);
        s.data_mut()[2] = 1.0;
        s.data_mut()[5] = 1.0;
        let s2 = s.clone();
        let err = finite_diff_check(
            move |_, v| {
                let a = v.sigmoid();
                attention_loss(&[a], &[s2.clone()], &LossWeights::default())
                    .map_err(|e| tensor_core::TensorError::Argument(e.to_string()))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "attention loss err = {err}");

        // smooth-l1 (inputs away from the |d| = 1 joints)
        let p0 = Tensor::new(vec![4], vec![0.3, -0.4, 1.6, -2.2]).unwrap();
        let err = finite_diff_check(
            |_, v| {
                smooth_l1(v, &Tensor::zeros(vec![4]))
                    .map_err(|e| tensor_core::TensorError::Argument(e.to_string()))
            },
            &p0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "smooth_l1 err = {err}");

        // cross entropy
        let l0 = Tensor::new(vec![2, 2], vec![0.4, -0.2, -0.9, 1.1]).unwrap();
        let err = finite_diff_check(
            |_, v| {
                cross_entropy(v, &[1, 0])
                    .map_err(|e| tensor_core::TensorError::Argument(e.to_string()))
            },
            &l0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cross_entropy err = {err}");
    }
}
