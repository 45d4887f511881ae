//! Certified bi-Lipschitz maps `g: R^n -> R^n`.
//!
//! ```text
//! z_1 = act(U_1 x + b_1)
//! z_k = act(W_k z_{k-1} + U_k x + b_k)      k = 2..L
//! g(x) = a x + gamma * sum_k Y_k z_k + b_y
//! ```
//!
//! With a 1-Lipschitz activation the residual path `h(x) = sum_k Y_k z_k` is
//! Lipschitz with constant at most `B = sum_k |Y_k| c_k`, where
//! `c_1 = |U_1|` and `c_k = |W_k| c_{k-1} + |U_k|` (spectral norms). Choosing
//! `a = (mu + nu) / 2` and rescaling so `gamma * B <= (nu - mu) / 2` pins every
//! difference quotient of `g` inside `[mu, nu]`.
//!
//! Inside a graph each spectral norm is the differentiable surrogate
//! `u^T W v + off`, with `(u, v)` the power-iteration vectors and `off` chosen
//! so the value matches the certified norm. Its weight gradient is `u v^T`, the
//! gradient of the spectral norm itself, so training sees how `gamma` reacts to
//! the weights. With [`Rescale::Frozen`] the surrogate is a constant and
//! `gamma` carries no gradient.

use rand::Rng;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::spectral_pair;
use crate::mlp::Activation;
use crate::params::{glorot, AuxInputs, ParamLeaves, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::{self, Tensor};

pub const INVERSE_MAX_ITERS: usize = 10_000;

/// Relative inflation of every certified norm, covering rounding in the
/// in-graph surrogate.
pub const NORM_MARGIN: f64 = 1e-12;

/// Whether `gamma` is differentiated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rescale {
    #[default]
    Differentiable,
    Frozen,
}

impl Rescale {
    pub fn as_str(self) -> &'static str {
        match self {
            Rescale::Differentiable => "differentiable",
            Rescale::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "differentiable" => Ok(Rescale::Differentiable),
            "frozen" => Ok(Rescale::Frozen),
            _ => Err(Error::config(format!("unknown rescale mode '{s}' (expected differentiable or frozen)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLipConfig {
    pub dim: usize,
    pub mu: f64,
    pub nu: f64,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub rescale: Rescale,
    pub seed: u64,
}

impl BiLipConfig {
    pub fn new(dim: usize, mu: f64, nu: f64, hidden_widths: Vec<usize>) -> Self {
        Self { dim, mu, nu, hidden_widths, activation: Activation::Tanh, rescale: Rescale::Differentiable, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("bi-Lipschitz dim must be positive"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite() && self.nu.is_finite()) {
            return Err(Error::config(format!("need finite mu > 0, got mu={} nu={}", self.mu, self.nu)));
        }
        if self.nu < self.mu {
            return Err(Error::config(format!("nu ({}) must be >= mu ({})", self.nu, self.mu)));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden_widths must be non-empty and positive"));
        }
        if matches!(self.activation, Activation::Relu | Activation::Softplus) {
            return Err(Error::config("bi-Lipschitz activation must be tanh or softplus-shifted"));
        }
        Ok(())
    }

    /// Identity gain `(mu + nu) / 2`.
    pub fn gain(&self) -> f64 {
        0.5 * (self.mu + self.nu)
    }

    /// Lipschitz budget of the residual path, `(nu - mu) / 2`.
    pub fn residual_budget(&self) -> f64 {
        0.5 * (self.nu - self.mu)
    }
}

/// Certified norm of one weight matrix and the vectors of its surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct NormProbe {
    pub weight: String,
    /// Inflated certified norm.
    pub sigma: f64,
    /// `1 x rows`.
    pub u: Tensor,
    /// `cols x 1`.
    pub v: Tensor,
    pub offset: f64,
}

impl NormProbe {
    fn measure(weight: &str, w: &Tensor, rescale: Rescale) -> Self {
        let p = spectral_pair(w);
        let sigma = p.sigma * (1.0 + NORM_MARGIN);
        if rescale == Rescale::Frozen {
            let (u, v) = (Tensor::zeros(1, w.rows()), Tensor::zeros(w.cols(), 1));
            return Self { weight: weight.to_string(), sigma, u, v, offset: sigma };
        }
        let u = Tensor::row(&p.u);
        let v = Tensor::column(&p.v);
        let uwv = tensor::dot(&p.u, &crate::linalg::mat_vec(w, &p.v));
        Self { weight: weight.to_string(), sigma, u, v, offset: sigma - uwv }
    }

    fn input_names(&self) -> [String; 3] {
        [format!("{}.u", self.weight), format!("{}.v", self.weight), format!("{}.off", self.weight)]
    }

    /// Append `u^T W v + off` (`1 x 1`).
    fn build(&self, g: &mut Graph, p: &ParamLeaves) -> NodeId {
        let [un, vn, on] = self.input_names();
        let u = input_leaf(g, &un, 1, self.u.cols());
        let v = input_leaf(g, &vn, self.v.rows(), 1);
        let off = input_leaf(g, &on, 1, 1);
        let uw = g.matmul(u, p.get(&self.weight));
        let uwv = g.matmul(uw, v);
        g.add(uwv, off)
    }
}

fn input_leaf(g: &mut Graph, name: &str, rows: usize, cols: usize) -> NodeId {
    g.leaf(name).unwrap_or_else(|| g.input(name, rows, cols))
}

/// Layout and certification state of a bi-Lipschitz network. Weights live in
/// a [`ParamStore`] under the `g.` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLipNet {
    pub config: BiLipConfig,
    bound: f64,
    gamma: f64,
    probes: Vec<NormProbe>,
}

impl BiLipNet {
    pub fn layers(&self) -> usize {
        self.config.hidden_widths.len()
    }

    pub fn u_name(k: usize) -> String {
        format!("g.U{k}")
    }

    pub fn w_name(k: usize) -> String {
        format!("g.W{k}")
    }

    pub fn y_name(k: usize) -> String {
        format!("g.Y{k}")
    }

    pub fn b_name(k: usize) -> String {
        format!("g.b{k}")
    }

    pub const BY_NAME: &'static str = "g.by";

    /// Identity gain `a`.
    pub fn gain(&self) -> f64 {
        self.config.gain()
    }

    pub fn residual_budget(&self) -> f64 {
        self.config.residual_budget()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn mu(&self) -> f64 {
        self.config.mu
    }

    pub fn nu(&self) -> f64 {
        self.config.nu
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Layout with no certification computed yet (`gamma = 1`).
    pub fn layout(config: BiLipConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, bound: 0.0, gamma: 1.0, probes: Vec::new() })
    }

    /// Random weights into `store`: Glorot-uniform matrices, zero biases.
    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let n = self.config.dim;
        let mut prev = 0;
        for (i, &h) in self.config.hidden_widths.iter().enumerate() {
            let k = i + 1;
            store.insert(Self::u_name(k), glorot(rng, h, n));
            if k > 1 {
                store.insert(Self::w_name(k), glorot(rng, h, prev));
            }
            store.insert(Self::y_name(k), glorot(rng, n, h));
            store.insert(Self::b_name(k), Tensor::zeros(1, h));
            prev = h;
        }
        store.insert(Self::BY_NAME, Tensor::zeros(1, n));
    }

    /// Recompute `(B, gamma)` from the current weights.
    pub fn certify(&mut self, store: &ParamStore) -> Result<(f64, f64)> {
        let mut probes = Vec::new();
        for k in 1..=self.layers() {
            let mut names = vec![Self::u_name(k)];
            if k > 1 {
                names.push(Self::w_name(k));
            }
            names.push(Self::y_name(k));
            for name in names {
                probes.push(NormProbe::measure(&name, store.expect(&name)?, self.config.rescale));
            }
        }
        self.set_probes(probes);
        Ok((self.bound, self.gamma))
    }

    fn set_probes(&mut self, probes: Vec<NormProbe>) {
        let sigma = |name: &str| probes.iter().find(|p| p.weight == name).map(|p| p.sigma).unwrap_or(0.0);
        let mut c_prev = 0.0;
        let mut bound = 0.0;
        for k in 1..=self.layers() {
            let u = sigma(&Self::u_name(k));
            let c = if k == 1 { u } else { sigma(&Self::w_name(k)) * c_prev + u };
            bound += sigma(&Self::y_name(k)) * c;
            c_prev = c;
        }
        let budget = self.residual_budget();
        self.gamma = if budget == 0.0 { 0.0 } else { budget / (budget + (bound - budget).max(0.0)) };
        self.bound = bound;
        self.probes = probes;
    }

    /// Certified norm of every weight matrix, in certification order.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.probes.iter().map(|p| (p.weight.clone(), p.sigma)).collect()
    }

    /// Reinstate previously certified norms without looking at the weights.
    /// `gamma` is then a constant until the next [`BiLipNet::certify`].
    pub fn restore_norms(&mut self, norms: &[(String, f64)], store: &ParamStore) -> Result<()> {
        let mut probes = Vec::with_capacity(norms.len());
        for (name, sigma) in norms {
            let w = store.expect(name)?;
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Checkpoint(format!("bad norm {sigma} for '{name}'")));
            }
            let (u, v) = (Tensor::zeros(1, w.rows()), Tensor::zeros(w.cols(), 1));
            probes.push(NormProbe { weight: name.clone(), sigma: *sigma, u, v, offset: *sigma });
        }
        let expected = self.layers() * 3 - 1;
        if probes.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} norms, got {}", probes.len())));
        }
        self.set_probes(probes);
        Ok(())
    }

    pub fn probes(&self) -> &[NormProbe] {
        &self.probes
    }

    /// Values for the surrogate inputs declared by [`BiLipNet::gamma_node`].
    pub fn aux_inputs(&self) -> AuxInputs {
        let mut aux = AuxInputs::default();
        for p in &self.probes {
            let [un, vn, on] = p.input_names();
            aux.push(un, p.u.clone());
            aux.push(vn, p.v.clone());
            aux.push(on, Tensor::scalar(p.offset));
        }
        aux
    }

    /// Append `gamma = L / (L + relu(B - L))` as a function of the weights.
    pub fn gamma_node(&self, g: &mut Graph, p: &ParamLeaves) -> NodeId {
        let budget = self.residual_budget();
        if budget == 0.0 {
            return g.constant(Tensor::scalar(0.0));
        }
        assert!(!self.probes.is_empty(), "gamma_node needs a certified network");
        let probe = |name: &str| self.probes.iter().find(|q| q.weight == name).expect("probe for every weight");
        let mut c_prev: Option<NodeId> = None;
        let mut bound: Option<NodeId> = None;
        for k in 1..=self.layers() {
            let u = probe(&Self::u_name(k)).build(g, p);
            let c = match c_prev {
                None => u,
                Some(prev) => {
                    let w = probe(&Self::w_name(k)).build(g, p);
                    let wc = g.mul(w, prev);
                    g.add(wc, u)
                }
            };
            let y = probe(&Self::y_name(k)).build(g, p);
            let term = g.mul(y, c);
            bound = Some(match bound {
                Some(b) => g.add(b, term),
                None => term,
            });
            c_prev = Some(c);
        }
        let excess = g.add_scalar(bound.expect("at least one layer"), -budget);
        let excess = g.relu(excess);
        let denom = g.add_scalar(excess, budget);
        let inv = g.recip(denom);
        g.scale(inv, budget)
    }

    /// Batch forward `rows x n -> rows x n`.
    pub fn build(&self, g: &mut Graph, p: &ParamLeaves, gamma: NodeId, x: NodeId) -> NodeId {
        let rows = g.shape(x)[0];
        let n = self.config.dim;
        let mut z_prev: Option<NodeId> = None;
        let mut residual: Option<NodeId> = None;
        for k in 1..=self.layers() {
            let mut pre = g.linear(x, p.get(&Self::u_name(k)));
            if let Some(z) = z_prev {
                let wz = g.linear(z, p.get(&Self::w_name(k)));
                pre = g.add(pre, wz);
            }
            let pre = g.add_row_bias(pre, p.get(&Self::b_name(k)));
            let z = self.config.activation.apply(g, pre);
            let yz = g.linear(z, p.get(&Self::y_name(k)));
            residual = Some(match residual {
                Some(r) => g.add(r, yz),
                None => yz,
            });
            z_prev = Some(z);
        }
        let residual = residual.expect("at least one hidden layer");
        let ones_col = g.ones(rows, 1);
        let ones_row = g.ones(1, n);
        let gcol = g.matmul(ones_col, gamma);
        let gfull = g.matmul(gcol, ones_row);
        let scaled = g.mul(residual, gfull);
        let ax = g.scale(x, self.gain());
        let y = g.add(ax, scaled);
        g.add_row_bias(y, p.get(Self::BY_NAME))
    }
}

/// Certified residual bound `B` and rescale `gamma = L / max(B, L)`.
pub fn certify_weights(config: &BiLipConfig, store: &ParamStore) -> Result<(f64, f64)> {
    BiLipNet::layout(config.clone())?.certify(store)
}

/// A standalone bi-Lipschitz map: layout plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLipParams {
    pub net: BiLipNet,
    pub store: ParamStore,
}

/// Randomly initialised, already certified network.
pub fn new_bilipschitz(config: BiLipConfig) -> Result<BiLipParams> {
    let mut net = BiLipNet::layout(config)?;
    let mut store = ParamStore::new();
    net.init(&mut rng::stream(net.config.seed, Stream::Init), &mut store);
    net.certify(&store)?;
    Ok(BiLipParams { net, store })
}

impl BiLipParams {
    pub fn from_parts(mut net: BiLipNet, store: ParamStore) -> Result<Self> {
        net.certify(&store)?;
        Ok(Self { net, store })
    }

    pub fn gain(&self) -> f64 {
        self.net.gain()
    }

    pub fn residual_budget(&self) -> f64 {
        self.net.residual_budget()
    }

    pub fn certify(&mut self) -> Result<(f64, f64)> {
        self.net.certify(&self.store)
    }

    /// `g` on every row of `x`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = self.store.declare(&mut g);
        let gamma = self.net.gamma_node(&mut g, &leaves);
        let y = self.net.build(&mut g, &leaves, gamma, xin);
        let aux = self.net.aux_inputs();
        let mut b = Bindings::new().with(xin, x);
        aux.bind(&g, &mut b);
        leaves.bind(&self.store, &mut b)?;
        let mut vals = g.evaluate(&b, &[y])?;
        Ok(vals.take(y))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Tensor::row(x))?.into_data())
    }

    /// Residual path `gamma * sum_k Y_k z_k(x)` at one point.
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward(x)?;
        let by = self.store.expect(BiLipNet::BY_NAME)?;
        let a = self.gain();
        Ok(y.iter().zip(x).zip(by.data()).map(|((yi, xi), bi)| (yi - bi) - a * xi).collect())
    }

    /// Solve `g(x) = y` by the fixed-point iteration
    /// `x <- (y - b_y - h(x)) / a`, a contraction with ratio `L / a < 1`.
    pub fn inverse(&self, y: &[f64], tol: f64) -> Result<Vec<f64>> {
        if !(tol > 0.0) {
            return Err(Error::config(format!("inverse tolerance must be positive, got {tol}")));
        }
        let a = self.gain();
        let by = self.store.expect(BiLipNet::BY_NAME)?.data().to_vec();
        let target: Vec<f64> = y.iter().zip(&by).map(|(yi, bi)| yi - bi).collect();
        let mut x: Vec<f64> = target.iter().map(|t| t / a).collect();
        let mut residual = f64::INFINITY;
        for _ in 0..INVERSE_MAX_ITERS {
            let gx = self.forward(&x)?;
            residual = tensor::distance(&gx, y);
            if residual <= tol {
                return Ok(x);
            }
            // h(x) = g(x) - a x - b_y
            x = x
                .iter()
                .zip(&gx)
                .zip(target.iter().zip(&by))
                .map(|((xi, gi), (ti, bi))| {
                    let h = gi - a * xi - bi;
                    (ti - h) / a
                })
                .collect();
        }
        Err(Error::Convergence { iterations: INVERSE_MAX_ITERS, residual })
    }

    /// Min and max of `|g(x) - g(x')| / |x - x'|` over random pairs in a ball.
    pub fn probe(&self, n_pairs: usize, radius: f64, seed: u64) -> Result<(f64, f64)> {
        if n_pairs == 0 {
            return Err(Error::config("n_pairs must be >= 1"));
        }
        let n = self.net.dim();
        let mut r = rng::stream(seed, Stream::Probe);
        let mut rows = Vec::with_capacity(2 * n_pairs);
        while rows.len() < 2 * n_pairs {
            let x = rng::uniform_ball(&mut r, n, radius);
            let xp = rng::uniform_ball(&mut r, n, radius);
            if tensor::distance(&x, &xp) > 0.0 {
                rows.push(x);
                rows.push(xp);
            }
        }
        let pts = Tensor::from_rows(&rows)?;
        let out = self.forward_batch(&pts)?;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for i in 0..n_pairs {
            let dx = tensor::distance(pts.row_slice(2 * i), pts.row_slice(2 * i + 1));
            let dy = tensor::distance(out.row_slice(2 * i), out.row_slice(2 * i + 1));
            let ratio = dy / dx;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        Ok((lo, hi))
    }
}

/// `g(x)` for a standalone network.
pub fn bilip_forward(params: &BiLipParams, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

pub fn certify_residual(params: &BiLipParams) -> Result<(f64, f64)> {
    certify_weights(&params.net.config, &params.store)
}

pub fn bilip_inverse(params: &BiLipParams, y: &[f64], tol: f64) -> Result<Vec<f64>> {
    params.inverse(y, tol)
}

pub fn empirical_bilip_probe(params: &BiLipParams, n_pairs: usize, radius: f64, seed: u64) -> Result<(f64, f64)> {
    params.probe(n_pairs, radius, seed)
}
