//! Hamiltonians `H(x) = 0.5 |g(x) - r|^2` over a certified bi-Lipschitz `g`.
//!
//! For a `(mu, nu)` map this satisfies the PL inequality
//! `|grad H|^2 >= 2 mu^2 H` and `0.5 mu^2 |x - x*|^2 <= H <= 0.5 nu^2 |x - x*|^2`,
//! with a unique minimiser `x*`. The offset `r` is `g(x*)` when the equilibrium
//! is known and zero otherwise.

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::bilip::BiLipParams;
use crate::error::{Error, Result};
use crate::params::ParamLeaves;
use crate::rng::{self, Stream};
use crate::tensor::{self, Tensor};

/// Inversion tolerance used to locate a free equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Anchor {
    /// `H(x) = 0.5 |g(x) - g(x*)|^2`, minimised exactly at `x*`.
    KnownEquilibrium(Vec<f64>),
    /// `H(x) = 0.5 |g(x)|^2`, minimised at `g^{-1}(0)`.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlnetModel {
    pub g: BiLipParams,
    pub anchor: Anchor,
}

/// Graph nodes of a batch Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianNodes {
    /// `rows x 1`, one value per sample.
    pub per_sample: NodeId,
    /// `1 x 1` sum over the batch; its gradient w.r.t. the batch is the
    /// per-row `grad H`.
    pub total: NodeId,
    /// `rows x n` gradient, if requested.
    pub grad: Option<NodeId>,
}

/// Minimum slack of each PLNet inequality over a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlReport {
    /// `min |grad H|^2 - 2 mu^2 H`
    pub pl_margin_min: f64,
    /// `min H - 0.5 mu^2 |x - x*|^2`
    pub lower_margin_min: f64,
    /// `min 0.5 nu^2 |x - x*|^2 - H`
    pub upper_margin_min: f64,
}

impl PlReport {
    pub fn passes(&self, slack: f64) -> bool {
        self.pl_margin_min >= -slack && self.lower_margin_min >= -slack && self.upper_margin_min >= -slack
    }
}

impl PlnetModel {
    pub fn new(g: BiLipParams, anchor: Anchor) -> Result<Self> {
        if let Anchor::KnownEquilibrium(x) = &anchor {
            if x.len() != g.net.dim() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("anchor {x:?} does not match dim {}", g.net.dim())));
            }
        }
        Ok(Self { g, anchor })
    }

    pub fn dim(&self) -> usize {
        self.g.net.dim()
    }

    pub fn mu(&self) -> f64 {
        self.g.net.mu()
    }

    pub fn nu(&self) -> f64 {
        self.g.net.nu()
    }

    /// PL constant `m = mu^2`.
    pub fn pl_constant(&self) -> f64 {
        self.mu() * self.mu()
    }

    /// Append the batch Hamiltonian for `x` (`rows x n`). With `with_grad`,
    /// also append `grad_x H` as differentiable nodes.
    pub fn build(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId, with_grad: bool) -> Result<HamiltonianNodes> {
        let rows = g.shape(x)[0];
        let n = self.dim();
        let gamma = self.g.net.gamma_node(g, p);
        let gx = self.g.net.build(g, p, gamma, x);
        let diff = match &self.anchor {
            Anchor::KnownEquilibrium(xs) => {
                let xs_node = g.constant(Tensor::row(xs));
                let r = self.g.net.build(g, p, gamma, xs_node);
                let ones = g.ones(rows, 1);
                let rb = g.matmul(ones, r);
                g.sub(gx, rb)
            }
            Anchor::Free => gx,
        };
        let sq = g.square(diff);
        let ones_n = g.ones(n, 1);
        let row_sq = g.matmul(sq, ones_n);
        let per_sample = g.scale(row_sq, 0.5);
        let total = g.sum(per_sample);
        let grad = if with_grad { Some(g.gradient_nodes(total, &[x])?[0]) } else { None };
        Ok(HamiltonianNodes { per_sample, total, grad })
    }

    fn eval_batch(&self, x: &Tensor, with_grad: bool) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let xin = g.input("x", x.rows(), x.cols());
        let leaves = self.g.store.declare(&mut g);
        let nodes = self.build(&mut g, &leaves, xin, with_grad)?;
        let aux = self.g.net.aux_inputs();
        let mut b = Bindings::new().with(xin, x);
        aux.bind(&g, &mut b);
        leaves.bind(&self.g.store, &mut b)?;
        let mut outs = vec![nodes.per_sample];
        outs.extend(nodes.grad);
        let mut vals = g.evaluate(&b, &outs)?;
        let h = vals.take(nodes.per_sample);
        let grad = nodes.grad.map(|id| vals.take(id));
        Ok((h, grad))
    }

    /// `H` at each row of `x`, as an `rows x 1` column.
    pub fn hamiltonian_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_batch(x, false)?.0)
    }

    /// `H` and `grad H` at each row of `x`.
    pub fn hamiltonian_and_grad_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, grad) = self.eval_batch(x, true)?;
        Ok((h, grad.expect("gradient requested")))
    }

    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        Ok(self.hamiltonian_batch(&Tensor::row(x))?.item())
    }

    pub fn grad_hamiltonian(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hamiltonian_and_grad_batch(&Tensor::row(x))?.1.into_data())
    }

    /// The unique minimiser of `H`.
    pub fn equilibrium(&self) -> Result<Vec<f64>> {
        self.equilibrium_with_tol(EQUILIBRIUM_TOL)
    }

    pub fn equilibrium_with_tol(&self, tol: f64) -> Result<Vec<f64>> {
        match &self.anchor {
            Anchor::KnownEquilibrium(x) => Ok(x.clone()),
            Anchor::Free => self.g.inverse(&vec![0.0; self.dim()], tol),
        }
    }

    /// Check the PL inequality and both quadratic bounds at random points in
    /// a ball of `radius` around the equilibrium.
    pub fn verify(&self, n_samples: usize, radius: f64, seed: u64) -> Result<PlReport> {
        if n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        // A free equilibrium is only known to the inversion tolerance; use a
        // tight one so the bound margins are not dominated by it.
        let xs = self.equilibrium_with_tol(1e-13)?;
        let n = self.dim();
        let mut r = rng::stream(seed, Stream::Probe);
        let rows: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| rng::uniform_ball(&mut r, n, radius).iter().zip(&xs).map(|(d, c)| c + d).collect())
            .collect();
        let x = Tensor::from_rows(&rows)?;
        let (h, grad) = self.hamiltonian_and_grad_batch(&x)?;
        let (mu2, nu2) = (self.mu() * self.mu(), self.nu() * self.nu());
        let mut report = PlReport {
            pl_margin_min: f64::INFINITY,
            lower_margin_min: f64::INFINITY,
            upper_margin_min: f64::INFINITY,
        };
        for i in 0..n_samples {
            let hi = h.get(i, 0);
            let gi = grad.row_slice(i);
            let d2 = tensor::distance(x.row_slice(i), &xs).powi(2);
            report.pl_margin_min = report.pl_margin_min.min(tensor::dot(gi, gi) - 2.0 * mu2 * hi);
            report.lower_margin_min = report.lower_margin_min.min(hi - 0.5 * mu2 * d2);
            report.upper_margin_min = report.upper_margin_min.min(0.5 * nu2 * d2 - hi);
        }
        Ok(report)
    }
}

pub fn hamiltonian(model: &PlnetModel, x: &[f64]) -> Result<f64> {
    model.hamiltonian(x)
}

pub fn grad_hamiltonian(model: &PlnetModel, x: &[f64]) -> Result<Vec<f64>> {
    model.grad_hamiltonian(x)
}

pub fn equilibrium(model: &PlnetModel) -> Result<Vec<f64>> {
    model.equilibrium()
}

pub fn verify_plnet(model: &PlnetModel, n_samples: usize, radius: f64, seed: u64) -> Result<PlReport> {
    model.verify(n_samples, radius, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::bilip::{new_bilipschitz, BiLipConfig};

    fn model(seed: u64, anchor: Anchor) -> PlnetModel {
        let g = new_bilipschitz(BiLipConfig { seed, ..BiLipConfig::new(4, 0.1, 2.0, vec![32, 32]) }).unwrap();
        PlnetModel::new(g, anchor).unwrap()
    }

    fn identity_gain_only(anchor: Anchor) -> PlnetModel {
        let mut m = model(9, anchor);
        for (_, t) in m.g.store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        m.g.certify().unwrap();
        m
    }

    #[test]
    fn zero_at_known_equilibrium() {
        let xs = vec![0.3, -0.2, 1.0, 0.0];
        let m = model(1, Anchor::KnownEquilibrium(xs.clone()));
        assert_eq!(m.hamiltonian(&xs).unwrap(), 0.0);
        assert_eq!(m.grad_hamiltonian(&xs).unwrap(), vec![0.0; 4]);
        assert_eq!(m.equilibrium().unwrap(), xs);
    }

    #[test]
    fn quadratic_bounds_on_random_points() {
        let m = model(2, Anchor::KnownEquilibrium(vec![0.0; 4]));
        let mut r = rng::stream(2, Stream::Probe);
        for _ in 0..1000 {
            let x = rng::uniform_ball(&mut r, 4, 4.0);
            let h = m.hamiltonian(&x).unwrap();
            let n2 = tensor::dot(&x, &x);
            assert!(0.5 * 0.01 * n2 <= h + 1e-12 && h <= 0.5 * 4.0 * n2 + 1e-12);
            if n2 > 0.0 {
                assert!(h > 0.0);
            }
        }
    }

    #[test]
    fn identity_gain_free_mode_is_scaled_norm() {
        let m = identity_gain_only(Anchor::Free);
        let x = [1.0, -2.0, 0.5, 3.0];
        let expect = 0.5 * 1.05 * 1.05 * tensor::dot(&x, &x);
        assert!((m.hamiltonian(&x).unwrap() - expect).abs() < 1e-12 * expect);
        let rep = m.verify(100, 3.0, 0).unwrap();
        assert!(rep.passes(0.0), "{rep:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(3, Anchor::KnownEquilibrium(vec![0.1, 0.0, -0.3, 0.2]));
        let mut r = rng::stream(3, Stream::Probe);
        for _ in 0..20 {
            let x = rng::uniform_ball(&mut r, 4, 2.0);
            let ad = m.grad_hamiltonian(&x).unwrap();
            let fd = finite_diff_gradient(|t: &Tensor| m.hamiltonian(t.data()), &Tensor::row(&x), 1e-6).unwrap();
            for (a, f) in ad.iter().zip(fd.data()) {
                assert!((a - f).abs() <= 1e-6 * f.abs().max(1.0), "{a} vs {f}");
            }
        }
    }

    #[test]
    fn pl_inequality_on_random_points() {
        let m = model(4, Anchor::KnownEquilibrium(vec![0.0; 4]));
        let mut r = rng::stream(4, Stream::Probe);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| rng::uniform_ball(&mut r, 4, 4.0)).collect();
        let (h, grad) = m.hamiltonian_and_grad_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for i in 0..1000 {
            let g = grad.row_slice(i);
            assert!(tensor::dot(g, g) >= 2.0 * 0.01 * h.get(i, 0) - 1e-9);
        }
    }

    #[test]
    fn free_equilibrium_is_a_near_zero_minimum() {
        let mut m = model(5, Anchor::Free);
        m.g.store.insert("g.by", Tensor::row(&[0.4, -0.8, 0.1, 1.5]));
        let xs = m.equilibrium().unwrap();
        let tol = EQUILIBRIUM_TOL;
        assert!(m.hamiltonian(&xs).unwrap() <= 0.5 * 4.0 * (tol / 0.1).powi(2));
        assert!(tensor::norm(&m.grad_hamiltonian(&xs).unwrap()) <= 4.0 * tol / 0.1);
    }

    #[test]
    fn anchored_and_free_share_the_certificate() {
        let xs = vec![0.5, 0.5, -0.5, 0.0];
        let anchored = model(6, Anchor::KnownEquilibrium(xs.clone()));
        let free = PlnetModel { anchor: Anchor::Free, ..anchored.clone() };
        assert!(anchored.verify(1000, 3.0, 1).unwrap().passes(1e-9));
        assert!(free.verify(1000, 3.0, 1).unwrap().passes(1e-9));
        // same g: the difference of Hamiltonians is g(x).g(x*) - 0.5 |g(x*)|^2
        let gxs = anchored.g.forward(&xs).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let gx = anchored.g.forward(&x).unwrap();
        let shift = tensor::dot(&gx, &gxs) - 0.5 * tensor::dot(&gxs, &gxs);
        let diff = free.hamiltonian(&x).unwrap() - anchored.hamiltonian(&x).unwrap();
        assert!((diff - shift).abs() < 1e-12);
    }

    #[test]
    fn verify_rejects_zero_samples() {
        assert!(model(7, Anchor::Free).verify(0, 1.0, 0).is_err());
    }

    #[test]
    fn anchor_dimension_checked() {
        let g = new_bilipschitz(BiLipConfig::new(4, 0.1, 2.0, vec![8])).unwrap();
        assert!(PlnetModel::new(g, Anchor::KnownEquilibrium(vec![0.0; 3])).is_err());
    }
}
