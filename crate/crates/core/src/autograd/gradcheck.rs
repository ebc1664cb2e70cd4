use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Floor of the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences over every coordinate of every input.
///
/// `f` receives one leaf per input and must build a scalar on the tape.
pub fn finite_difference_check<S, F>(f: F, inputs: &[Tensor<S>], h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<S>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0].to_f64_lossless())
    };

    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let step = S::lit(h);
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let x0 = work[i].data()[j];
            let (xp, xm) = (x0 + step, x0 - step);
            work[i].data_mut()[j] = xp;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = xm;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (xp - xm).to_f64_lossless();
            let a = analytic[i][j].to_f64_lossless();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
