//! Stateless stacked LSTM built from graph primitives.
//!
//! Hidden and cell states start at zero for every call, so each sequence is
//! classified independently of whatever else shares its batch.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::init::xavier_uniform_with;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One LSTM layer: gates are laid out `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

pub struct LstmOutput {
    /// Top-layer hidden state after every time step, each `[N,H]`.
    pub hidden: Vec<Var>,
    /// Top-layer hidden state at each sequence's last valid step.
    pub final_hidden: Var,
}

impl Lstm {
    /// Registers `layers` stacked layers under `prefix`. Weights are
    /// Xavier-uniform, biases zero.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { input } else { hidden };
            let w_ih = store.add(
                &format!("{prefix}.l{l}.w_ih"),
                xavier_uniform_with(&[4 * hidden, d], d, 4 * hidden, rng)?,
                true,
            )?;
            let w_hh = store.add(
                &format!("{prefix}.l{l}.w_hh"),
                xavier_uniform_with(&[4 * hidden, hidden], hidden, 4 * hidden, rng)?,
                true,
            )?;
            let bias = store.add(&format!("{prefix}.l{l}.bias"), Tensor::zeros(&[4 * hidden]), true)?;
            out.push(LstmLayer {
                w_ih,
                w_hh,
                bias,
                input: d,
                hidden,
            });
        }
        Ok(Self { layers: out })
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Number of trainable scalars for the given geometry.
    pub fn param_count(input: usize, hidden: usize, layers: usize) -> usize {
        (0..layers)
            .map(|l| {
                let d = if l == 0 { input } else { hidden };
                4 * hidden * (d + hidden) + 4 * hidden
            })
            .sum()
    }

    /// Runs the stack over `inputs` (one `[N,D]` node per time step).
    ///
    /// With `lengths`, sequence `n` only advances for steps `t < lengths[n]`;
    /// later steps carry its state forward unchanged.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
        lengths: Option<&[usize]>,
    ) -> Result<LstmOutput> {
        let Some(&first) = inputs.first() else {
            return shape_err("lstm: empty input sequence");
        };
        let n = g.value(first).shape()[0];
        if let Some(len) = lengths {
            if len.len() != n || len.iter().any(|&l| l == 0 || l > inputs.len()) {
                return shape_err("lstm: lengths must be in 1..=T for every row");
            }
        }
        let mut xs = inputs.to_vec();
        for layer in &self.layers {
            xs = self.layer_forward(g, store, layer, &xs, n, lengths)?;
        }
        let final_hidden = *xs.last().expect("nonempty");
        Ok(LstmOutput {
            hidden: xs,
            final_hidden,
        })
    }

    fn layer_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: &LstmLayer,
        xs: &[Var],
        n: usize,
        lengths: Option<&[usize]>,
    ) -> Result<Vec<Var>> {
        let h = layer.hidden;
        let w_ih = g.param(store, layer.w_ih);
        let w_hh = g.param(store, layer.w_hh);
        let bias = g.param(store, layer.bias);
        let mut h_prev = g.constant(Tensor::zeros(&[n, h]));
        let mut c_prev = g.constant(Tensor::zeros(&[n, h]));
        let mut out = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let gx = g.linear(x, w_ih, Some(bias))?;
            let gh = g.linear(h_prev, w_hh, None)?;
            let gates = g.add(gx, gh)?;
            let i = g.slice_cols(gates, 0, h)?;
            let f = g.slice_cols(gates, h, h)?;
            let c_hat = g.slice_cols(gates, 2 * h, h)?;
            let o = g.slice_cols(gates, 3 * h, h)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let c_hat = g.tanh(c_hat);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c_prev)?;
            let write = g.mul(i, c_hat)?;
            let mut c = g.add(keep, write)?;
            let tc = g.tanh(c);
            let mut h_new = g.mul(o, tc)?;
            if let Some(len) = lengths {
                if len.iter().any(|&l| t >= l) {
                    let mask: Vec<T> = len
                        .iter()
                        .map(|&l| if t < l { T::one() } else { T::zero() })
                        .collect();
                    h_new = g.blend_rows(h_new, h_prev, mask.clone())?;
                    c = g.blend_rows(c, c_prev, mask)?;
                }
            }
            out.push(h_new);
            h_prev = h_new;
            c_prev = c;
        }
        Ok(out)
    }
}
