use rand::Rng;

use crate::autograd::{Bound, CustomBackward, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

/// Weights of one LSTM direction. Gates are packed `i, f, g, o` along the
/// columns: `w_ih` is `[D × 4H]`, `w_hh` is `[H × 4H]`, `bias` is `[4H]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new<S: Scalar>(
        name: &str,
        input_size: usize,
        hidden_size: usize,
        params: &mut ParamSet<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::Parameter("LSTM sizes must be positive".into()));
        }
        let h = hidden_size;
        let w_ih = Tensor::uniform(&[input_size, 4 * h], 1.0 / (input_size as f64).sqrt(), rng);
        let w_hh = Tensor::uniform(&[h, 4 * h], 1.0 / (h as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(&[4 * h]);
        bias.data_mut()[h..2 * h]
            .iter_mut()
            .for_each(|b| *b = S::one());
        Ok(LstmCell {
            input_size,
            hidden_size,
            w_ih: params.add(format!("{name}.w_ih"), w_ih),
            w_hh: params.add(format!("{name}.w_hh"), w_hh),
            bias: params.add(format!("{name}.bias"), bias),
        })
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.hidden_size * (self.input_size + self.hidden_size + 1)
    }

    /// Runs the recurrence over a time-major batch `x` of shape
    /// `[T·N × D]` (row `t·N + n`), returning `[T·N × H]`. With
    /// `reverse` the sequence is consumed from the last step.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: Var,
        batch: usize,
        reverse: bool,
    ) -> Result<Var> {
        let (w_ih, w_hh, b) = (
            bound.var(self.w_ih),
            bound.var(self.w_hh),
            bound.var(self.bias),
        );
        lstm_sequence(tape, x, w_ih, w_hh, b, batch, reverse)
    }
}

/// One or two [`LstmCell`]s sharing an input.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub direction: Direction,
    pub cells: Vec<LstmCell>,
}

impl LstmParams {
    pub fn new<S: Scalar>(
        name: &str,
        direction: Direction,
        input_size: usize,
        hidden_size: usize,
        params: &mut ParamSet<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cells = match direction {
            Direction::Forward | Direction::Backward => {
                vec![LstmCell::new(name, input_size, hidden_size, params, rng)?]
            }
            Direction::Bidirectional => vec![
                LstmCell::new(&format!("{name}.fwd"), input_size, hidden_size, params, rng)?,
                LstmCell::new(&format!("{name}.bwd"), input_size, hidden_size, params, rng)?,
            ],
        };
        Ok(LstmParams { direction, cells })
    }

    pub fn output_size(&self) -> usize {
        self.cells.len() * self.cells[0].hidden_size
    }

    pub fn parameter_count(&self) -> usize {
        self.cells.iter().map(LstmCell::parameter_count).sum()
    }

    /// `[T·N × D]` → `[T·N × H]`, or `[T·N × 2H]` (forward ‖ backward).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        match self.direction {
            Direction::Forward => self.cells[0].forward(tape, bound, x, batch, false),
            Direction::Backward => self.cells[0].forward(tape, bound, x, batch, true),
            Direction::Bidirectional => {
                let f = self.cells[0].forward(tape, bound, x, batch, false)?;
                let b = self.cells[1].forward(tape, bound, x, batch, true)?;
                tape.concat_cols(&[f, b])
            }
        }
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// `C[m×n] (+)= A[m×k]·B[k×n]`, all row-major, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    accumulate: bool,
    c: &mut [S],
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm_raw(
        m,
        k,
        n,
        S::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Saved activations of a fused LSTM pass, indexed by processing step.
struct LstmBackward<S> {
    steps: usize,
    batch: usize,
    input: usize,
    hidden: usize,
    reverse: bool,
    /// Post-activation gates `[T·N × 4H]` in time order.
    gates: Vec<S>,
    /// Cell states `[T·N × H]` in time order.
    cells: Vec<S>,
    /// Hidden states `[T·N × H]` in time order (the op's output).
    hiddens: Vec<S>,
}

impl<S: Scalar> LstmBackward<S> {
    /// Time index of the `s`-th processed step.
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }
}

impl<S: Scalar> CustomBackward<S> for LstmBackward<S> {
    fn backward(&self, grad_out: &[S], inputs: &[&[S]], needs: &[bool]) -> Vec<Option<Vec<S>>> {
        let (n, d, h) = (self.batch, self.input, self.hidden);
        let (x, w_ih, w_hh) = (inputs[0], inputs[1], inputs[2]);
        let rows = self.steps * n;
        let mut dz = vec![S::zero(); rows * 4 * h];
        let mut dh_next = vec![S::zero(); n * h];
        let mut dc_next = vec![S::zero(); n * h];
        let mut dw_hh = vec![S::zero(); h * 4 * h];
        for s in (0..self.steps).rev() {
            let t = self.time(s);
            let prev = (s > 0).then(|| self.time(s - 1));
            for b in 0..n {
                let r = t * n + b;
                let gate = &self.gates[r * 4 * h..(r + 1) * 4 * h];
                let dzr = &mut dz[r * 4 * h..(r + 1) * 4 * h];
                for j in 0..h {
                    let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let c = self.cells[r * h + j];
                    let c_prev = prev.map_or(S::zero(), |p| self.cells[(p * n + b) * h + j]);
                    let tc = c.tanh();
                    let dh = grad_out[r * h + j] + dh_next[b * h + j];
                    let dc = dh * o * (S::one() - tc * tc) + dc_next[b * h + j];
                    dzr[j] = dc * g * i * (S::one() - i);
                    dzr[h + j] = dc * c_prev * f * (S::one() - f);
                    dzr[2 * h + j] = dc * i * (S::one() - g * g);
                    dzr[3 * h + j] = dh * tc * o * (S::one() - o);
                    dc_next[b * h + j] = dc * f;
                }
            }
            let dz_t = &dz[t * n * 4 * h..(t + 1) * n * 4 * h];
            gemm(n, 4 * h, h, dz_t, false, w_hh, true, false, &mut dh_next);
            if let Some(p) = prev {
                let h_prev = &self.hiddens[p * n * h..(p + 1) * n * h];
                gemm(h, n, 4 * h, h_prev, true, dz_t, false, true, &mut dw_hh);
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![S::zero(); rows * d];
            gemm(rows, 4 * h, d, &dz, false, w_ih, true, false, &mut dx);
            dx
        });
        let dw_ih = needs[1].then(|| {
            let mut dw = vec![S::zero(); d * 4 * h];
            gemm(d, rows, 4 * h, x, true, &dz, false, false, &mut dw);
            dw
        });
        let db = needs[3].then(|| {
            let mut db = vec![S::zero(); 4 * h];
            for row in dz.chunks(4 * h) {
                db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            db
        });
        vec![dx, dw_ih, needs[2].then_some(dw_hh), db]
    }
}

/// Fused LSTM recurrence with zero initial state, recorded as a single
/// tape node. `x` is time-major `[T·N × D]`.
pub fn lstm_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    batch: usize,
    reverse: bool,
) -> Result<Var> {
    let (rows, d) = match *tape.shape(x) {
        [r, d] => (r, d),
        ref s => {
            return Err(Error::Shape(format!(
                "LSTM input must be [T·N × D], got {s:?}"
            )))
        }
    };
    if rows == 0 || batch == 0 || rows % batch != 0 {
        return Err(Error::InvalidLength(format!(
            "LSTM input of {rows} rows is not a whole number of steps"
        )));
    }
    let four_h = tape.shape(w_hh).get(1).copied().unwrap_or(0);
    let h = four_h / 4;
    if tape.shape(w_ih) != [d, four_h]
        || tape.shape(w_hh) != [h, four_h]
        || tape.shape(bias) != [four_h]
        || h == 0
    {
        return Err(Error::Dimension {
            op: "lstm",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(w_ih).to_vec(),
        });
    }
    let steps = rows / batch;
    let n = batch;
    let mut gates = vec![S::zero(); rows * four_h];
    gemm(
        rows,
        d,
        four_h,
        tape.value(x),
        false,
        tape.value(w_ih),
        false,
        false,
        &mut gates,
    );
    let b = tape.value(bias);
    for row in gates.chunks_mut(four_h) {
        row.iter_mut().zip(b).for_each(|(g, &bv)| *g += bv);
    }
    let w_hh_v = tape.value(w_hh);
    let mut cells = vec![S::zero(); rows * h];
    let mut hiddens = vec![S::zero(); rows * h];
    let mut prev: Option<usize> = None;
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let z = &mut gates[t * n * four_h..(t + 1) * n * four_h];
        if let Some(p) = prev {
            gemm(
                n,
                h,
                four_h,
                &hiddens[p * n * h..(p + 1) * n * h],
                false,
                w_hh_v,
                false,
                true,
                z,
            );
        }
        for bi in 0..n {
            let r = t * n + bi;
            let zr = &mut z[bi * four_h..(bi + 1) * four_h];
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                let c_prev = prev.map_or(S::zero(), |p| cells[(p * n + bi) * h + j]);
                let c = f * c_prev + i * g;
                cells[r * h + j] = c;
                hiddens[r * h + j] = o * c.tanh();
                zr[j] = i;
                zr[h + j] = f;
                zr[2 * h + j] = g;
                zr[3 * h + j] = o;
            }
        }
        prev = Some(t);
    }
    let value = hiddens.clone();
    let rule = LstmBackward {
        steps,
        batch,
        input: d,
        hidden: h,
        reverse,
        gates,
        cells,
        hiddens,
    };
    tape.custom(&[x, w_ih, w_hh, bias], vec![rows, h], value, Box::new(rule))
}
