//! Projection-based stable baselines: an unconstrained field `f_hat` corrected
//! by a learned Lyapunov function,
//!
//! ```text
//! f = f_hat - grad V * relu(grad V^T f_hat + alpha V) / |grad V|^2
//! ```
//!
//! SD-MLP uses `V = |g(x)|^2` (positive semidefinite only). SD-ICNN uses
//! `V = phi(x) - phi(0) + eps_v |x|^2` with `phi` input-convex.

use rand::Rng;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp};
use crate::params::{glorot, ParamLeaves, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_GRAD_FLOOR: f64 = 1e-8;
pub const DEFAULT_EPS_V: f64 = 0.01;

/// Input-convex network `R^n -> R` with softplus activations.
///
/// Layer `k` computes `softplus(Z_k^2 z_{k-1} + U_k x + b_k)` (no `Z_1`), and the
/// output layer is affine in the same form. `Z_k` is stored raw and squared
/// elementwise at use.
#[derive(Debug, Clone, PartialEq)]
pub struct Icnn {
    pub prefix: String,
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
}

impl Icnn {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("ICNN widths {widths:?} need >= 2 positive entries")));
        }
        Ok(Self { prefix: prefix.into(), widths })
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn u_name(&self, k: usize) -> String {
        format!("{}.U{k}", self.prefix)
    }

    pub fn z_name(&self, k: usize) -> String {
        format!("{}.Z{k}", self.prefix)
    }

    pub fn b_name(&self, k: usize) -> String {
        format!("{}.b{k}", self.prefix)
    }

    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let n = self.widths[0];
        for k in 1..=self.layers() {
            let out = self.widths[k];
            store.insert(self.u_name(k), glorot(rng, out, n));
            if k > 1 {
                store.insert(self.z_name(k), glorot(rng, out, self.widths[k - 1]));
            }
            store.insert(self.b_name(k), Tensor::zeros(1, out));
        }
    }

    pub fn build(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> NodeId {
        let mut z = None;
        for k in 1..=self.layers() {
            let ux = g.linear(x, p.get(&self.u_name(k)));
            let mut pre = g.add_row_bias(ux, p.get(&self.b_name(k)));
            if let Some(prev) = z {
                let zr = g.square(p.get(&self.z_name(k)));
                let zz = g.linear(prev, zr);
                pre = g.add(pre, zz);
            }
            z = Some(if k < self.layers() { g.softplus(pre) } else { pre });
        }
        z.expect("at least one layer")
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = store.declare(&mut g);
        let out = self.build(&mut g, &leaves, xin);
        let mut b = Bindings::new().with(xin, x);
        leaves.bind(store, &mut b)?;
        Ok(g.evaluate(&b, &[out])?.take(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lyapunov {
    /// `V = |g(x)|^2`.
    Mlp(Mlp),
    /// `V = phi(x) - phi(0) + eps_v |x|^2`.
    Icnn { icnn: Icnn, eps_v: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdKind {
    Mlp,
    Icnn,
}

impl SdKind {
    pub fn tag(self) -> &'static str {
        match self {
            SdKind::Mlp => "sd-mlp",
            SdKind::Icnn => "sd-icnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdConfig {
    pub kind: SdKind,
    pub dim: usize,
    pub f_hidden: Vec<usize>,
    pub v_hidden: Vec<usize>,
    pub alpha: f64,
    pub grad_floor: f64,
    pub eps_v: f64,
    pub seed: u64,
}

impl SdConfig {
    /// 4-100-100-4 ReLU `f_hat`; 4-64-64 tanh `g` or 4-64-64-1 ICNN.
    pub fn pendulum_default(kind: SdKind) -> Self {
        Self {
            kind,
            dim: 4,
            f_hidden: vec![100, 100],
            v_hidden: vec![64, 64],
            alpha: DEFAULT_ALPHA,
            grad_floor: DEFAULT_GRAD_FLOOR,
            eps_v: DEFAULT_EPS_V,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdModel {
    pub f_hat: Mlp,
    pub lyapunov: Lyapunov,
    pub alpha: f64,
    pub grad_floor: f64,
    pub store: ParamStore,
}

#[derive(Debug, Clone, Copy)]
pub struct SdNodes {
    pub velocity: NodeId,
    pub f_hat: NodeId,
    /// `rows x 1`.
    pub v: NodeId,
    pub grad_v: NodeId,
    /// `rows x 1`, 1 where `|grad V| > grad_floor`.
    pub mask: NodeId,
}

#[derive(Debug, Clone)]
pub struct SdEval {
    pub velocity: Tensor,
    pub f_hat: Tensor,
    pub v: Tensor,
    pub grad_v: Tensor,
    /// Rows where the gradient floor left `f_hat` uncorrected.
    pub floor_events: usize,
}

impl SdModel {
    pub fn new(config: &SdConfig) -> Result<Self> {
        if !(config.alpha > 0.0 && config.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", config.alpha)));
        }
        if !(config.grad_floor > 0.0 && config.grad_floor.is_finite()) {
            return Err(Error::config(format!("grad_floor must be positive, got {}", config.grad_floor)));
        }
        let n = config.dim;
        let mut fw = vec![n];
        fw.extend_from_slice(&config.f_hidden);
        fw.push(n);
        let f_hat = Mlp::new("f", fw, Activation::Relu)?;
        let mut vw = vec![n];
        vw.extend_from_slice(&config.v_hidden);
        let lyapunov = match config.kind {
            SdKind::Mlp => Lyapunov::Mlp(Mlp::new("v", vw, Activation::Tanh)?),
            SdKind::Icnn => {
                if !(config.eps_v >= 0.0 && config.eps_v.is_finite()) {
                    return Err(Error::config(format!("eps_v must be >= 0, got {}", config.eps_v)));
                }
                vw.push(1);
                Lyapunov::Icnn { icnn: Icnn::new("v", vw)?, eps_v: config.eps_v }
            }
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, Stream::Init);
        f_hat.init(&mut r, &mut store);
        match &lyapunov {
            Lyapunov::Mlp(m) => m.init(&mut r, &mut store),
            Lyapunov::Icnn { icnn, .. } => icnn.init(&mut r, &mut store),
        }
        Ok(Self { f_hat, lyapunov, alpha: config.alpha, grad_floor: config.grad_floor, store })
    }

    pub fn kind(&self) -> SdKind {
        match self.lyapunov {
            Lyapunov::Mlp(_) => SdKind::Mlp,
            Lyapunov::Icnn { .. } => SdKind::Icnn,
        }
    }

    pub fn dim(&self) -> usize {
        self.f_hat.input_dim()
    }

    /// Per-sample `V` as a `rows x 1` column.
    pub fn build_lyapunov(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> NodeId {
        match &self.lyapunov {
            Lyapunov::Mlp(m) => {
                let gx = m.build(g, p, x);
                let sq = g.square(gx);
                g.row_sums(sq)
            }
            Lyapunov::Icnn { icnn, eps_v } => {
                let rows = g.shape(x)[0];
                let phi = icnn.build(g, p, x);
                let zero = g.constant(Tensor::zeros(1, self.dim()));
                let phi0 = icnn.build(g, p, zero);
                let ones = g.ones(rows, 1);
                let phi0b = g.matmul(ones, phi0);
                let shifted = g.sub(phi, phi0b);
                let xsq = g.square(x);
                let xn = g.row_sums(xsq);
                let quad = g.scale(xn, *eps_v);
                g.add(shifted, quad)
            }
        }
    }

    pub fn build_field(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> Result<SdNodes> {
        let n = self.dim();
        let f_hat = self.f_hat.build(g, p, x);
        let v = self.build_lyapunov(g, p, x);
        let total = g.sum(v);
        let grad_v = g.gradient_nodes(total, &[x])?[0];

        let gf = g.mul(grad_v, f_hat);
        let gf = g.row_sums(gf);
        let av = g.scale(v, self.alpha);
        let s = g.add(gf, av);
        let gsq = g.square(grad_v);
        let q = g.row_sums(gsq);
        let q_off = g.add_scalar(q, -self.grad_floor * self.grad_floor);
        let mask = g.step(q_off);
        // denominator is q where the mask is on and 1 elsewhere
        let masked_q = g.mul(q, mask);
        let off = g.scale(mask, -1.0);
        let off = g.add_scalar(off, 1.0);
        let denom = g.add(masked_q, off);
        let inv = g.recip(denom);
        let active = g.relu(s);
        let coef = g.mul(active, mask);
        let coef = g.mul(coef, inv);
        let coef_b = g.broadcast_cols(coef, n);
        let corr = g.mul(grad_v, coef_b);
        let velocity = g.sub(f_hat, corr);
        Ok(SdNodes { velocity, f_hat, v, grad_v, mask })
    }

    pub fn eval_batch(&self, x: &Tensor) -> Result<SdEval> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = self.store.declare(&mut g);
        let nodes = self.build_field(&mut g, &leaves, xin)?;
        let mut b = Bindings::new().with(xin, x);
        leaves.bind(&self.store, &mut b)?;
        let mut vals = g.evaluate(&b, &[nodes.velocity, nodes.f_hat, nodes.v, nodes.grad_v, nodes.mask])?;
        let floor_events = vals.get(nodes.mask).data().iter().filter(|&&m| m == 0.0).count();
        Ok(SdEval {
            velocity: vals.take(nodes.velocity),
            f_hat: vals.take(nodes.f_hat),
            v: vals.take(nodes.v),
            grad_v: vals.take(nodes.grad_v),
            floor_events,
        })
    }

    pub fn field_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_batch(x)?.velocity)
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.field_batch(&Tensor::row(x))?.into_data())
    }

    pub fn lyapunov_value(&self, x: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let xin = g.input("x", 1, x.len());
        let leaves = self.store.declare(&mut g);
        let v = self.build_lyapunov(&mut g, &leaves, xin);
        let xt = Tensor::row(x);
        let mut b = Bindings::new().with(xin, &xt);
        leaves.bind(&self.store, &mut b)?;
        Ok(g.evaluate(&b, &[v])?.get(v).item())
    }

    /// Worst `grad V^T f + alpha V` over rows of `x` where the floor is not hit.
    pub fn projection_audit(&self, x: &Tensor) -> Result<f64> {
        let ev = self.eval_batch(x)?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..x.rows() {
            let gv = ev.grad_v.row_slice(i);
            if crate::tensor::norm(gv) < self.grad_floor {
                continue;
            }
            let s = crate::tensor::dot(gv, ev.velocity.row_slice(i)) + self.alpha * ev.v.get(i, 0);
            worst = worst.max(s);
        }
        Ok(worst)
    }
}

/// Projection formula on explicit values.
pub fn project(f_hat: &[f64], grad_v: &[f64], v: f64, alpha: f64, grad_floor: f64) -> (Vec<f64>, bool) {
    let q = crate::tensor::dot(grad_v, grad_v);
    if q <= grad_floor * grad_floor {
        return (f_hat.to_vec(), true);
    }
    let s = crate::tensor::dot(grad_v, f_hat) + alpha * v;
    let c = s.max(0.0) / q;
    (f_hat.iter().zip(grad_v).map(|(f, g)| f - g * c).collect(), false)
}

pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    Ok(mlp.forward(store, &Tensor::row(x))?.into_data())
}

pub fn lyapunov_value(model: &SdModel, x: &[f64]) -> Result<f64> {
    model.lyapunov_value(x)
}

pub fn projected_field(model: &SdModel, x: &[f64]) -> Result<Vec<f64>> {
    model.field(x)
}
