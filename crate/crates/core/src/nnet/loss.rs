//! Negative log-likelihoods fused with the output nonlinearity, evaluated
//! on logits for numerical stability.

use ndarray::{Array1, Array2};

use super::{sigmoid, softmax_rows, softplus};
use crate::error::{Error, Result};

fn check_targets(logits: &Array2<f64>, targets: &[usize], classes: usize) -> Result<()> {
    if logits.nrows() != targets.len() {
        return Err(Error::shape("target count", logits.nrows(), targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::InvalidArgument(format!("target class {t} outside 0..{classes}")));
    }
    Ok(())
}

/// Bernoulli NLL for a single sigmoid logit per row. Returns the per-row
/// loss and the per-row derivative with respect to the logit.
pub fn bernoulli_nll(logits: &Array2<f64>, targets: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
    if logits.ncols() != 1 {
        return Err(Error::shape("bernoulli logit columns", 1, logits.ncols()));
    }
    check_targets(logits, targets, 2)?;
    let mut nll = Array1::zeros(targets.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        let l = logits[[i, 0]];
        let z = t as f64;
        nll[i] = softplus(l) - z * l;
        grad[[i, 0]] = sigmoid(l) - z;
    }
    Ok((nll, grad))
}

/// Categorical NLL for softmax logits.
pub fn categorical_nll(logits: &Array2<f64>, targets: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
    check_targets(logits, targets, logits.ncols())?;
    let mut grad = softmax_rows(logits);
    let mut nll = Array1::zeros(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        nll[i] = lse - row[t];
        grad[[i, t]] -= 1.0;
    }
    Ok((nll, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_heads() {
        let (nll, _) = bernoulli_nll(&array![[0.0], [0.0]], &[0, 1]).unwrap();
        assert!((nll[0] - 2f64.ln()).abs() < 1e-15 && (nll[1] - 2f64.ln()).abs() < 1e-15);
        let (nll, g) = categorical_nll(&Array2::zeros((1, 10)), &[3]).unwrap();
        assert!((nll[0] - 10f64.ln()).abs() < 1e-15);
        assert!((g[[0, 3]] + 0.9).abs() < 1e-15 && (g[[0, 0]] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let (nll, _) = categorical_nll(&array![[-50.0, 50.0, -50.0]], &[1]).unwrap();
        assert!(nll[0] < 1e-40);
        let (nll, _) = bernoulli_nll(&array![[800.0]], &[1]).unwrap();
        assert_eq!(nll[0], 0.0);
        let (nll, _) = bernoulli_nll(&array![[-800.0]], &[1]).unwrap();
        assert_eq!(nll[0], 800.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = array![[0.3, -1.2, 2.0, 0.1]];
        let (_, g) = categorical_nll(&logits, &[2]).unwrap();
        for j in 0..4 {
            let h = 1e-6;
            let mut up = logits.clone();
            up[[0, j]] += h;
            let mut dn = logits.clone();
            dn[[0, j]] -= h;
            let fd = (categorical_nll(&up, &[2]).unwrap().0[0] - categorical_nll(&dn, &[2]).unwrap().0[0]) / (2.0 * h);
            assert!((fd - g[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(bernoulli_nll(&array![[0.0]], &[2]).is_err());
        assert!(categorical_nll(&array![[0.0, 1.0]], &[0, 1]).is_err());
        assert!(bernoulli_nll(&array![[0.0, 1.0]], &[0]).is_err());
    }
}
