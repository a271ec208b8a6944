use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the taped gradient of `f` at `x` against central differences.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-12, |numeric|)`. `f` must build a scalar
/// from the supplied tracked input and be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, eps, &coords)
}

/// Same as [`finite_diff_check`] but probes only the given flat coordinates.
/// Useful when the evaluation is expensive and a spot check suffices.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = {
        let tape = Tape::new();
        let var = tape.leaf(x.clone().with_grad());
        let loss = f(&tape, &var)?;
        loss.backward()?;
        var.grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let var = tape.constant(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        f(&tape, &var)?.scalar_value()
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.data().to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
