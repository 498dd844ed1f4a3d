//! Layer building blocks expressed with graph primitives.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, &[input, output], bound))?;
        let bias = params.add(format!("{name}.bias"), uniform(rng, &[1, output], bound))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.var(self.weight))?;
        g.add_row(xw, p.var(self.bias))
    }
}

/// Fused LSTM weights, gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Graph handles of an [`LstmCell`]'s weights.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = params.add(format!("{name}.w_input"), uniform(rng, &[input, 4 * hidden], bound))?;
        let w_hidden = params.add(format!("{name}.w_hidden"), uniform(rng, &[hidden, 4 * hidden], bound))?;
        let mut b = uniform(rng, &[1, 4 * hidden], bound);
        // forget gate starts open
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v += 1.0;
        }
        let bias = params.add(format!("{name}.bias"), b)?;
        Ok(Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    pub fn vars(&self, p: &Bound) -> LstmVars {
        LstmVars {
            w_input: p.var(self.w_input),
            w_hidden: p.var(self.w_hidden),
            bias: p.var(self.bias),
            hidden: self.hidden,
        }
    }
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_cell(g: &mut Graph, x: Var, h_prev: Var, c_prev: Var, w: LstmVars) -> Result<(Var, Var)> {
    let n = w.hidden;
    let xi = g.matmul(x, w.w_input)?;
    let hh = g.matmul(h_prev, w.w_hidden)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add_row(pre, w.bias)?;
    let i_pre = g.slice_cols(pre, 0, n)?;
    let f_pre = g.slice_cols(pre, n, n)?;
    let g_pre = g.slice_cols(pre, 2 * n, n)?;
    let o_pre = g.slice_cols(pre, 3 * n, n)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(g_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.hadamard(f, c_prev)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.hadamard(o, tc)?;
    Ok((h, c))
}

/// Gated recurrent update used for running memories.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = params.add(format!("{name}.w_input"), uniform(rng, &[input, 3 * hidden], bound))?;
        let w_hidden = params.add(format!("{name}.w_hidden"), uniform(rng, &[hidden, 3 * hidden], bound))?;
        let bias = params.add(format!("{name}.bias"), uniform(rng, &[1, 3 * hidden], bound))?;
        Ok(Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    /// `z`, `r` gates then `h' = (1 - z) * n + z * h`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let xw = g.matmul(x, p.var(self.w_input))?;
        let xw = g.add_row(xw, p.var(self.bias))?;
        let hu = g.matmul(h, p.var(self.w_hidden))?;
        let xz = g.slice_cols(xw, 0, n)?;
        let hz = g.slice_cols(hu, 0, n)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let xr = g.slice_cols(xw, n, n)?;
        let hr = g.slice_cols(hu, n, n)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let xn = g.slice_cols(xw, 2 * n, n)?;
        let hn = g.slice_cols(hu, 2 * n, n)?;
        let hn = g.hadamard(r, hn)?;
        let cand = g.add(xn, hn)?;
        let cand = g.tanh(cand)?;
        let keep = g.hadamard(z, h)?;
        let one_minus_z = g.one_minus(z)?;
        let write = g.hadamard(one_minus_z, cand)?;
        g.add(keep, write)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_lstm(input: usize, hidden: usize) -> (Graph, LstmVars) {
        let mut g = Graph::new();
        let w = LstmVars {
            w_input: g.param(Tensor::zeros(&[input, 4 * hidden])),
            w_hidden: g.param(Tensor::zeros(&[hidden, 4 * hidden])),
            bias: g.param(Tensor::zeros(&[1, 4 * hidden])),
            hidden,
        };
        (g, w)
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let (mut g, w) = zero_lstm(3, 2);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h0 = g.constant(Tensor::zeros(&[1, 2]));
        let c0 = g.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = lstm_cell(&mut g, x, h0, c0, w).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let hidden = 2;
        let mut g = Graph::new();
        let mut b = vec![0.0; 4 * hidden];
        b[..hidden].fill(-1e3); // input gate closed
        b[hidden..2 * hidden].fill(1e3); // forget gate open
        let w = LstmVars {
            w_input: g.param(Tensor::zeros(&[3, 4 * hidden])),
            w_hidden: g.param(Tensor::zeros(&[hidden, 4 * hidden])),
            bias: g.param(Tensor::row(b)),
            hidden,
        };
        let x = g.constant(Tensor::row(vec![0.3, -0.2, 0.9]));
        let h0 = g.constant(Tensor::row(vec![0.1, 0.4]));
        let c0 = g.constant(Tensor::row(vec![0.7, -1.3]));
        let (_, c) = lstm_cell(&mut g, x, h0, c0, w).unwrap();
        assert_eq!(g.value(c).data(), &[0.7, -1.3]);
    }

    #[test]
    fn lstm_rejects_wrong_input_width() {
        let (mut g, w) = zero_lstm(3, 2);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let h0 = g.constant(Tensor::zeros(&[1, 2]));
        let c0 = g.constant(Tensor::zeros(&[1, 2]));
        assert!(lstm_cell(&mut g, x, h0, c0, w).is_err());
    }

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "lin", 3, 5, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&p);
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 5]);
    }

    #[test]
    fn gru_with_zero_update_gate_input_passes_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let cell = GruCell::new(&mut p, "gru", 2, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&p);
        let x = g.constant(Tensor::row(vec![0.5, -0.5]));
        let h = g.constant(Tensor::zeros(&[1, 3]));
        let out = cell.forward(&mut g, &b, x, h).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 3]);
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
    }
}
