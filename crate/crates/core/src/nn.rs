//! Affine layers and feed-forward stacks recorded on a [`Tape`].

use crate::error::Result;
use crate::tensor::{Activation, ParamId, ParamStore, Tape, Var};
use rand::Rng;

/// `y = x·W + b` with `W: fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_weight(rng, format!("{name}.weight"), fan_in, fan_out);
        let bias = store.add_zeros(format!("{name}.bias"), vec![fan_out]);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Feed-forward network. `act` follows every hidden layer, and the output
/// layer too when `act_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
    pub act_output: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        act: Activation,
        act_output: bool,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp {
            layers,
            act,
            act_output,
        }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last || self.act_output {
                h = tape.activation(h, self.act);
            }
        }
        Ok(h)
    }

    /// Output of every layer but the last (the last hidden representation).
    pub fn forward_hidden(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(tape, store, h)?;
            h = tape.activation(h, self.act);
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}
