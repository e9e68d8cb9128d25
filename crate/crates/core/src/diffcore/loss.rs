use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before any logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross entropy of a single prediction.
pub fn bce(y: u8, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract_err!("probability {p} outside [0, 1]"));
    }
    if y > 1 {
        return Err(contract_err!("label {y} is not binary"));
    }
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = f64::from(y);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross entropy of a `[n, 1]` column of probabilities.
pub fn bce_mean(tape: &mut Tape, probs: Var, labels: &[u8]) -> Result<Var> {
    let [n, c] = tape.value(probs).shape();
    if c != 1 || n != labels.len() {
        return Err(dim_err!(
            "bce over {:?} predictions with {} labels",
            [n, c],
            labels.len()
        ));
    }
    let y = Tensor::new(n, 1, labels.iter().map(|&l| f64::from(l)).collect())?;
    let not_y = y.map(|v| 1.0 - v);
    let p = tape.clamp(probs, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(p)?;
    let neg_p = tape.neg(p)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul_const(log_p, y)?;
    let b = tape.mul_const(log_q, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean_all(s)?;
    tape.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((bce(1, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(1, 1.0 - BCE_EPS).unwrap() < 1e-6);
        assert!((bce(0, 0.9).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(bce(1, 1.5).is_err());
        assert!(bce(0, -0.1).is_err());
        assert!(bce(1, 0.0).unwrap().is_finite());
    }

    #[test]
    fn tape_mean_matches_scalar() {
        let mut t = Tape::new();
        let p = t.param(Tensor::new(3, 1, vec![0.2, 0.7, 0.9]).unwrap());
        let l = bce_mean(&mut t, p, &[0, 1, 0]).unwrap();
        let want = (bce(0, 0.2).unwrap() + bce(1, 0.7).unwrap() + bce(0, 0.9).unwrap()) / 3.0;
        assert!((t.value(l).item() - want).abs() < 1e-14);
    }
}
