//! Stable Hamiltonian neural dynamics `x' = (J(x) - R(x)) grad H(x)` and the
//! passive port-Hamiltonian extension.
//!
//! `J = S - S^T` and `R = L^T L + eps I`, where `S` and `L` are the two halves
//! of one MLP output (row-major, `S` first). Along the flow
//! `H' = -grad H^T R grad H <= -eps |grad H|^2`, which with the PLNet bounds
//! gives global exponential stability with overshoot `nu / mu` and rate
//! `eps mu^2`.

use std::sync::Arc;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::bilip::{BiLipConfig, BiLipNet, BiLipParams};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::mlp::{Activation, Mlp};
use crate::params::{AuxInputs, ParamLeaves, ParamStore};
use crate::plnet::{Anchor, HamiltonianNodes, PlnetModel};
use crate::rng::{self, Stream};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Range of states sampled by the audits in this module.
pub const AUDIT_RADIUS: f64 = 3.0;
/// Half-width of the input box sampled by the passivity audit.
pub const AUDIT_INPUT_BOX: f64 = 2.0;

/// The `J`/`R` network: one MLP `R^n -> R^{2 n^2}` plus the damping floor.
#[derive(Debug, Clone, PartialEq)]
pub struct JrNet {
    pub mlp: Mlp,
    pub epsilon: f64,
}

impl JrNet {
    pub fn new(dim: usize, hidden: &[usize], epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * dim * dim);
        Ok(Self { mlp: Mlp::new("jr", widths, Activation::Tanh)?, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// `(J, R)` at one point, computed directly from the MLP output.
    pub fn matrices(&self, store: &ParamStore, x: &[f64]) -> Result<(Tensor, Tensor)> {
        let n = self.dim();
        let out = self.mlp.forward(store, &Tensor::row(x))?;
        let s = Tensor::new(n, n, out.data()[..n * n].to_vec())?;
        let l = Tensor::new(n, n, out.data()[n * n..].to_vec())?;
        let j = s.sub(&s.transpose());
        let mut r = l.transpose().matmul(&l)?;
        for i in 0..n {
            r.set(i, i, r.get(i, i) + self.epsilon);
        }
        Ok((j, r))
    }
}

/// Column index tables for per-row `n x n` matrix algebra on flattened rows.
struct BlockIndex {
    n: usize,
    /// `rep[j n + k] = k`: tiles an `n`-vector `n` times.
    rep: Arc<[usize]>,
    /// `tr[j n + k] = k n + j`: transposes each flattened block.
    tr: Arc<[usize]>,
}

impl BlockIndex {
    fn new(n: usize) -> Self {
        let rep: Vec<usize> = (0..n * n).map(|p| p % n).collect();
        let tr: Vec<usize> = (0..n * n).map(|p| (p % n) * n + p / n).collect();
        Self { n, rep: rep.into(), tr: tr.into() }
    }

    /// Row-wise `M v` for flattened `M` (`rows x n^2`) and `v` (`rows x n`).
    fn mat_vec(&self, g: &mut Graph, m: NodeId, v: NodeId) -> NodeId {
        let vrep = g.gather_cols(v, self.rep.clone());
        let prod = g.mul(m, vrep);
        let sum = g.constant(block_sum_matrix(self.n * self.n, self.n, |p| p / self.n));
        g.matmul(prod, sum)
    }

    fn transpose(&self, g: &mut Graph, m: NodeId) -> NodeId {
        g.gather_cols(m, self.tr.clone())
    }
}

/// 0/1 matrix `cols_in x cols_out` with a one at `(p, target(p))`.
fn block_sum_matrix(cols_in: usize, cols_out: usize, target: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(cols_in, cols_out);
    for p in 0..cols_in {
        t.set(p, target(p), 1.0);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShndConfig {
    pub bilip: BiLipConfig,
    pub jr_hidden: Vec<usize>,
    pub epsilon: f64,
    pub anchor: Anchor,
}

impl ShndConfig {
    /// 4-32-32-4 Hamiltonian with `(mu, nu) = (0.1, 2)`, 4-90-90-32 `J`/`R`
    /// network, `eps = 0.01`, anchored at the origin.
    pub fn pendulum_default() -> Self {
        Self {
            bilip: BiLipConfig::new(4, 0.1, 2.0, vec![32, 32]),
            jr_hidden: vec![90, 90],
            epsilon: DEFAULT_EPSILON,
            anchor: Anchor::KnownEquilibrium(vec![0.0; 4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShndModel {
    /// Hamiltonian; its store also holds the `jr.*` (and `b.*`) weights.
    pub plnet: PlnetModel,
    pub jr: JrNet,
}

/// Graph nodes of a batch SHND field.
#[derive(Debug, Clone, Copy)]
pub struct FieldNodes {
    pub velocity: NodeId,
    pub hamiltonian: HamiltonianNodes,
    pub grad_h: NodeId,
}

impl ShndModel {
    pub fn new(config: &ShndConfig) -> Result<Self> {
        let net = BiLipNet::layout(config.bilip.clone())?;
        let jr = JrNet::new(config.bilip.dim, &config.jr_hidden, config.epsilon)?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.bilip.seed, Stream::Init);
        net.init(&mut r, &mut store);
        jr.mlp.init(&mut r, &mut store);
        let g = BiLipParams::from_parts(net, store)?;
        let plnet = PlnetModel::new(g, config.anchor.clone())?;
        Ok(Self { plnet, jr })
    }

    pub fn from_parts(plnet: PlnetModel, jr: JrNet) -> Result<Self> {
        if jr.dim() != plnet.dim() {
            return Err(Error::config("J/R network and Hamiltonian disagree on dimension"));
        }
        Ok(Self { plnet, jr })
    }

    pub fn dim(&self) -> usize {
        self.plnet.dim()
    }

    pub fn epsilon(&self) -> f64 {
        self.jr.epsilon
    }

    pub fn store(&self) -> &ParamStore {
        &self.plnet.g.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.plnet.g.store
    }

    /// Recompute the bi-Lipschitz rescale after a weight update.
    pub fn refresh(&mut self) -> Result<()> {
        self.plnet.g.certify().map(|_| ())
    }

    /// Values for the auxiliary (non-trainable) inputs the field graph declares.
    pub fn aux_inputs(&self) -> AuxInputs {
        self.plnet.g.net.aux_inputs()
    }

    /// Append the batch field for `x` (`rows x n`).
    pub fn build_field(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> Result<FieldNodes> {
        let n = self.dim();
        let hamiltonian = self.plnet.build(g, p, x, true)?;
        let h = hamiltonian.grad.expect("gradient requested");
        let idx = BlockIndex::new(n);
        let out = self.jr.mlp.build(g, p, x);
        let s = g.slice_cols(out, 0, n * n);
        let l = g.slice_cols(out, n * n, n * n);

        let st = idx.transpose(g, s);
        let j = g.sub(s, st);
        let jh = idx.mat_vec(g, j, h);

        let lh = idx.mat_vec(g, l, h);
        let lt = idx.transpose(g, l);
        let ltlh = idx.mat_vec(g, lt, lh);

        let v = g.sub(jh, ltlh);
        let eh = g.scale(h, self.epsilon());
        let velocity = g.sub(v, eh);
        Ok(FieldNodes { velocity, hamiltonian, grad_h: h })
    }

    /// Field, Hamiltonian and its gradient at every row of `x`.
    pub fn eval_batch(&self, x: &Tensor) -> Result<FieldEval> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = self.store().declare(&mut g);
        let nodes = self.build_field(&mut g, &leaves, xin)?;
        let aux = self.aux_inputs();
        let mut b = Bindings::new().with(xin, x);
        aux.bind(&g, &mut b);
        leaves.bind(self.store(), &mut b)?;
        let mut vals = g.evaluate(&b, &[nodes.velocity, nodes.hamiltonian.per_sample, nodes.grad_h])?;
        Ok(FieldEval {
            velocity: vals.take(nodes.velocity),
            hamiltonian: vals.take(nodes.hamiltonian.per_sample),
            grad_h: vals.take(nodes.grad_h),
        })
    }

    pub fn field_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_batch(x)?.velocity)
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.field_batch(&Tensor::row(x))?.into_data())
    }

    pub fn jr_matrices(&self, x: &[f64]) -> Result<(Tensor, Tensor)> {
        self.jr.matrices(self.store(), x)
    }

    pub fn certificate(&self) -> StabilityCertificate {
        StabilityCertificate::new(self.plnet.mu(), self.plnet.nu(), self.epsilon())
    }

    /// Worst descent slack `max grad H^T f + eps |grad H|^2` over sampled states
    /// (non-positive when the certificate holds).
    pub fn descent_audit(&self, n_samples: usize, radius: f64, seed: u64) -> Result<f64> {
        let x = self.sample_states(n_samples, radius, seed)?;
        let ev = self.eval_batch(&x)?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..x.rows() {
            let h = ev.grad_h.row_slice(i);
            let slack = tensor::dot(h, ev.velocity.row_slice(i)) + self.epsilon() * tensor::dot(h, h);
            worst = worst.max(slack);
        }
        Ok(worst)
    }

    /// Largest `|J + J^T|` entry and smallest `eig(R) - eps` over sampled states.
    pub fn jr_audit(&self, n_samples: usize, radius: f64, seed: u64) -> Result<(f64, f64)> {
        let x = self.sample_states(n_samples, radius, seed)?;
        let mut skew = 0.0_f64;
        let mut eig_margin = f64::INFINITY;
        for row in x.row_iter() {
            let (j, r) = self.jr_matrices(row)?;
            skew = skew.max(j.add(&j.transpose()).max_abs());
            eig_margin = eig_margin.min(symmetric_eigenvalues(&r)[0] - self.epsilon());
        }
        Ok((skew, eig_margin))
    }

    fn sample_states(&self, n_samples: usize, radius: f64, seed: u64) -> Result<Tensor> {
        if n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        let xs = self.plnet.equilibrium()?;
        let mut r = rng::stream(seed, Stream::Probe);
        let rows: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| rng::uniform_ball(&mut r, self.dim(), radius).iter().zip(&xs).map(|(d, c)| c + d).collect())
            .collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Debug, Clone)]
pub struct FieldEval {
    pub velocity: Tensor,
    pub hamiltonian: Tensor,
    pub grad_h: Tensor,
}

/// Constants of the stability guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCertificate {
    /// Overshoot `nu / mu`.
    pub kappa: f64,
    /// Exponential rate `eps mu^2`; zero means stability only.
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

impl StabilityCertificate {
    pub fn new(mu: f64, nu: f64, epsilon: f64) -> Self {
        Self { kappa: nu / mu, lambda: epsilon * mu * mu, mu, nu }
    }

    /// Radius of initial states guaranteed to stay within `eps` of `x*`.
    pub fn delta(&self, eps: f64) -> f64 {
        eps * self.mu / self.nu
    }
}

pub fn jr_matrices(model: &ShndModel, x: &[f64]) -> Result<(Tensor, Tensor)> {
    model.jr_matrices(x)
}

pub fn shnd_field(model: &ShndModel, x: &[f64]) -> Result<Vec<f64>> {
    model.field(x)
}

pub fn stability_certificate(model: &ShndModel) -> StabilityCertificate {
    model.certificate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhsConfig {
    pub shnd: ShndConfig,
    pub input_dim: usize,
    pub b_hidden: Vec<usize>,
}

/// Port-Hamiltonian model `x' = (J - R) grad H + B(x) u`, `y = B(x)^T grad H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhsModel {
    pub shnd: ShndModel,
    /// `R^n -> R^{n m}`, `B(x)` row-major.
    pub b_net: Mlp,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PhsNodes {
    pub field: FieldNodes,
    pub velocity: NodeId,
    pub output: NodeId,
}

impl PhsModel {
    pub fn new(config: &PhsConfig) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::config("port dimension must be positive"));
        }
        let mut shnd = ShndModel::new(&config.shnd)?;
        let n = shnd.dim();
        let mut widths = vec![n];
        widths.extend_from_slice(&config.b_hidden);
        widths.push(n * config.input_dim);
        let b_net = Mlp::new("b", widths, Activation::Tanh)?;
        // separate stream so the SHND part matches an SHND built from the same seed
        let mut r = rng::stream_raw(config.shnd.bilip.seed, 100 + Stream::Init as u64);
        b_net.init(&mut r, shnd.store_mut());
        Ok(Self { shnd, b_net, input_dim: config.input_dim })
    }

    pub fn dim(&self) -> usize {
        self.shnd.dim()
    }

    /// `B(x)` at one point, `n x m`.
    pub fn port_matrix(&self, x: &[f64]) -> Result<Tensor> {
        let out = self.b_net.forward(self.shnd.store(), &Tensor::row(x))?;
        Tensor::new(self.dim(), self.input_dim, out.into_data())
    }

    /// Append the batch port-Hamiltonian field for `x` (`rows x n`) and `u` (`rows x m`).
    pub fn build(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId, u: NodeId) -> Result<PhsNodes> {
        let (n, m) = (self.dim(), self.input_dim);
        if g.shape(u)[1] != m || g.shape(u)[0] != g.shape(x)[0] {
            return Err(Error::Structural {
                node: u.0,
                msg: format!("input shape {:?}, expected {}x{m}", g.shape(u), g.shape(x)[0]),
            });
        }
        let field = self.shnd.build_field(g, p, x)?;
        let b = self.b_net.build(g, p, x);
        // (B u)_i = sum_j B[i m + j] u_j
        let u_rep: Vec<usize> = (0..n * m).map(|q| q % m).collect();
        let ur = g.gather_cols(u, u_rep);
        let bu_terms = g.mul(b, ur);
        let sum_i = g.constant(block_sum_matrix(n * m, n, |q| q / m));
        let bu = g.matmul(bu_terms, sum_i);
        let velocity = g.add(field.velocity, bu);
        // y_j = sum_i B[i m + j] h_i
        let h_rep: Vec<usize> = (0..n * m).map(|q| q / m).collect();
        let hr = g.gather_cols(field.grad_h, h_rep);
        let y_terms = g.mul(b, hr);
        let sum_j = g.constant(block_sum_matrix(n * m, m, |q| q % m));
        let output = g.matmul(y_terms, sum_j);
        Ok(PhsNodes { field, velocity, output })
    }

    /// `(velocity, output, grad H)` for each row of `x`, `u`.
    pub fn eval_batch(&self, x: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if u.cols() != self.input_dim || u.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "input is {:?}, expected {}x{}",
                u.shape(),
                x.rows(),
                self.input_dim
            )));
        }
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let uin = g.input("u", u.rows(), u.cols());
        let leaves = self.shnd.store().declare(&mut g);
        let nodes = self.build(&mut g, &leaves, xin, uin)?;
        let aux = self.shnd.aux_inputs();
        let mut b = Bindings::new().with(xin, x).with(uin, u);
        aux.bind(&g, &mut b);
        leaves.bind(self.shnd.store(), &mut b)?;
        let mut vals = g.evaluate(&b, &[nodes.velocity, nodes.output, nodes.field.grad_h])?;
        Ok((vals.take(nodes.velocity), vals.take(nodes.output), vals.take(nodes.field.grad_h)))
    }

    pub fn field(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (v, y, _) = self.eval_batch(&Tensor::row(x), &Tensor::row(u))?;
        Ok((v.into_data(), y.into_data()))
    }

    /// Worst `H' - u^T y = grad H^T v - u^T y` over random states and inputs.
    pub fn passivity_audit(&self, n_samples: usize, seed: u64) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        let xs = self.shnd.plnet.equilibrium()?;
        let mut r = rng::stream(seed, Stream::Probe);
        let mut xrows = Vec::with_capacity(n_samples);
        let mut urows = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let d = rng::uniform_ball(&mut r, self.dim(), AUDIT_RADIUS);
            xrows.push(d.iter().zip(&xs).map(|(a, c)| a + c).collect::<Vec<_>>());
            urows.push(rng::uniform_box(&mut r, &vec![AUDIT_INPUT_BOX; self.input_dim]));
        }
        let (x, u) = (Tensor::from_rows(&xrows)?, Tensor::from_rows(&urows)?);
        let (v, y, h) = self.eval_batch(&x, &u)?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n_samples {
            let slack = tensor::dot(h.row_slice(i), v.row_slice(i)) - tensor::dot(u.row_slice(i), y.row_slice(i));
            worst = worst.max(slack);
        }
        Ok(worst)
    }
}

pub fn phs_field(model: &PhsModel, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.field(x, u)
}

pub fn passivity_audit(model: &PhsModel, n_samples: usize, seed: u64) -> Result<f64> {
    model.passivity_audit(n_samples, seed)
}
