use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-12;

/// `−(1/N)·Σ_i Σ_t log p_i,t[y_i,t]` for scores `[N × T × 2]` and labels
/// flattened row-major `N × T`.
pub fn vad_loss<S: Scalar>(tape: &mut Tape<S>, scores: Var, labels: &[u8]) -> Result<Var> {
    let (n, t) = match *tape.shape(scores) {
        [n, t, 2] => (n, t),
        ref s => {
            return Err(Error::Dimension {
                op: "vad_loss",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    if labels.len() != n * t {
        return Err(Error::Dimension {
            op: "vad_loss",
            lhs: vec![n, t, 2],
            rhs: vec![labels.len()],
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Parameter("frame labels must be 0 or 1".into()));
    }
    let flat = tape.reshape(scores, &[n * t, 2])?;
    let index: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let picked = tape.pick(flat, &index)?;
    let logs = tape.log_clamp(picked, S::lit(LOG_FLOOR));
    let total = tape.sum(logs);
    Ok(tape.scale(total, S::lit(-1.0 / n as f64)))
}

/// `(1/N)·Σ_i ‖d_i − p_i‖²` for predictions `[N × n]` and targets flattened
/// row-major `N × n`.
pub fn domain_loss<S: Scalar>(tape: &mut Tape<S>, preds: Var, targets: &[S]) -> Result<Var> {
    let shape = tape.shape(preds).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::Dimension {
            op: "domain_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    };
    if targets.len() != n * k {
        return Err(Error::Dimension {
            op: "domain_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let d = tape.constant(vec![n, k], targets.to_vec())?;
    let diff = tape.sub(d, preds)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, S::lit(1.0 / n as f64)))
}

/// Row-major `N × n` one-hot encoding of domain indices.
pub fn one_hot<S: Scalar>(domains: &[usize], n: usize) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); domains.len() * n];
    for (i, &d) in domains.iter().enumerate() {
        if d >= n {
            return Err(Error::Dimension {
                op: "one_hot",
                lhs: vec![d],
                rhs: vec![n],
            });
        }
        out[i * n + d] = S::one();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_vad(p: &[f64], shape: [usize; 3], y: &[u8]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(shape.to_vec(), p.to_vec()).unwrap();
        let l = vad_loss(&mut tape, s, y).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn uniform_prediction_costs_t_log_2() {
        let t = 7;
        let l = eval_vad(&vec![0.5; 2 * t], [1, t, 2], &[1, 0, 1, 1, 0, 0, 1]);
        assert!((l - t as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_uniform_pair() {
        let p = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let l = eval_vad(&p, [2, 3, 2], &[1, 0, 1, 0, 1, 1]);
        assert!((l - 3.0 * 2f64.ln() / 2.0).abs() < 1e-12);
        assert!(eval_vad(&p[..6], [1, 3, 2], &[1, 0, 1]).abs() < 1e-12);
    }

    #[test]
    fn uniform_domain_prediction_over_eleven() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(vec![1, 11], vec![1.0 / 11.0; 11]).unwrap();
        let l = domain_loss(&mut tape, p, &one_hot(&[4], 11).unwrap()).unwrap();
        assert!((tape.value(l)[0] - 10.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_dimension_errors() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(vec![2, 3], vec![0.2; 6]).unwrap();
        assert!(matches!(
            domain_loss(&mut tape, p, &[0.0; 4]),
            Err(Error::Dimension { .. })
        ));
        let s = tape.constant(vec![1, 3, 2], vec![0.5; 6]).unwrap();
        assert!(matches!(
            vad_loss(&mut tape, s, &[0, 1]),
            Err(Error::Dimension { .. })
        ));
    }
}
