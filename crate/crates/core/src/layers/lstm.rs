use rand::Rng;

use super::init::xavier;
use crate::error::{Result, WegenError};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// One LSTM direction. Gate blocks are laid out `[input, forget, output, candidate]`
/// along the `4 * hidden` axis.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_input: store.add(format!("{name}.wx"), xavier(&[d_in, 4 * hidden], d_in, hidden, rng), true),
            w_hidden: store.add(format!("{name}.wh"), xavier(&[hidden, 4 * hidden], hidden, hidden, rng), true),
            bias: store.add(
                format!("{name}.b"),
                Tensor::new(&[4 * hidden], bias).expect("bias length"),
                true,
            ),
            d_in,
            hidden,
        }
    }

    /// Input projection `x W_x + b` for a whole sequence.
    pub fn project_inputs(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if width != self.d_in {
            return Err(WegenError::shape("lstm", g.shape(x), &[0, self.d_in]));
        }
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Advances one step from an already projected `[1 × 4h]` input.
    /// `None` is the zero initial state.
    pub fn step_projected(&self, g: &mut Graph<'_>, z: Var, state: Option<LstmState>) -> Result<LstmState> {
        let h = self.hidden;
        let z = match state {
            Some(s) => {
                let wh = g.param(self.w_hidden);
                let rec = g.matmul(s.h, wh)?;
                g.add(z, rec)?
            }
            None => z,
        };
        let i = g.slice(z, 1, 0, h)?;
        let f = g.slice(z, 1, h, h)?;
        let o = g.slice(z, 1, 2 * h, h)?;
        let cand = g.slice(z, 1, 3 * h, h)?;
        let i = g.sigmoid(i);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let write = g.mul(i, cand)?;
        let c = match state {
            Some(s) => {
                let f = g.sigmoid(f);
                let keep = g.mul(f, s.c)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: Option<LstmState>) -> Result<LstmState> {
        let z = self.project_inputs(g, x)?;
        self.step_projected(g, z, state)
    }

    /// Hidden states for every position, `[len × hidden]`, scanning right to
    /// left when `reverse` is set (rows stay in input order).
    pub fn run(&self, g: &mut Graph<'_>, x: Var, reverse: bool) -> Result<Var> {
        let len = g.shape(x)[0];
        if len == 0 {
            return Err(WegenError::Empty("lstm input sequence"));
        }
        let xw = self.project_inputs(g, x)?;
        let mut outputs = vec![None; len];
        let mut state = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let z = g.row(xw, t)?;
            let s = self.step_projected(g, z, state)?;
            outputs[t] = Some(s.h);
            state = Some(s);
        }
        let rows: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        g.concat(&rows, 0)
    }
}

/// Bidirectional LSTM: forward and backward states concatenated per position.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmCell::new(store, &format!("{name}.fwd"), d_in, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), d_in, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let f = self.forward.run(g, x, false)?;
        let b = self.backward.run(g, x, true)?;
        g.concat(&[f, b], 1)
    }
}
