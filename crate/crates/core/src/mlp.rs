//! Fully connected networks over batches of row vectors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamLeaves, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// `softplus(x) - ln 2`, zero at the origin and 1-Lipschitz.
    SoftplusShifted,
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::SoftplusShifted => {
                let s = g.softplus(x);
                g.add_scalar(s, -std::f64::consts::LN_2)
            }
            Activation::Softplus => g.softplus(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::SoftplusShifted => "softplus-shifted",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus-shifted" => Ok(Activation::SoftplusShifted),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Layout of an MLP whose weights live in a [`ParamStore`] under
/// `{prefix}.W{k}` (`out x in`) and `{prefix}.b{k}` (`1 x out`), `k = 1..`.
/// Hidden layers use `activation`; the last layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("MLP widths {widths:?} need >= 2 positive entries")));
        }
        Ok(Self { prefix: prefix.into(), widths, activation })
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, k: usize) -> String {
        format!("{}.W{k}", self.prefix)
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("{}.b{k}", self.prefix)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        for k in 1..=self.layers() {
            let (fan_in, fan_out) = (self.widths[k - 1], self.widths[k]);
            store.insert(self.weight_name(k), glorot(rng, fan_out, fan_in));
            store.insert(self.bias_name(k), Tensor::zeros(1, fan_out));
        }
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Batch forward: `x` is `rows x input_dim`.
    pub fn build(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> NodeId {
        let mut h = x;
        for k in 1..=self.layers() {
            let lin = g.linear(h, p.get(&self.weight_name(k)));
            let pre = g.add_row_bias(lin, p.get(&self.bias_name(k)));
            h = if k < self.layers() { self.activation.apply(g, pre) } else { pre };
        }
        h
    }

    /// Numeric forward of a batch.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = store.declare(&mut g);
        let out = self.build(&mut g, &leaves, xin);
        let mut b = Bindings::new().with(xin, x);
        leaves.bind(store, &mut b)?;
        let mut vals = g.evaluate(&b, &[out])?;
        Ok(vals.take(out))
    }
}
