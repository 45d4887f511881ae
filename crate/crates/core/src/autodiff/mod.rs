//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Gradients are built symbolically: [`Graph::gradient_nodes`] appends the
//! adjoint computation as ordinary nodes. That is what lets a model use
//! `grad_x H(x)` inside its vector field and still be trained by a second
//! reverse sweep through the whole thing.

mod fd;
mod graph;

use std::collections::HashMap;

pub use fd::{finite_diff_gradient, finite_diff_gradient_scaled};
pub use graph::{Bindings, Graph, LeafKind, Node, NodeId, Op, Values};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluate `graph` and return the value of every node.
pub fn forward(graph: &Graph, bindings: &Bindings<'_>) -> Result<Values> {
    graph.forward(bindings)
}

/// Gradient of a scalar node with respect to every leaf (parameters and inputs).
pub fn backward(graph: &Graph, bindings: &Bindings<'_>, output: NodeId) -> Result<HashMap<NodeId, Tensor>> {
    let leaves: Vec<NodeId> = graph.leaves().map(|(id, _, _)| id).collect();
    let program = GradientProgram::new(graph.clone(), output, &leaves)?;
    let (_, grads) = program.eval(bindings)?;
    Ok(leaves.into_iter().zip(grads).collect())
}

/// A new graph that also computes `d output / d wrt`, where `wrt` is an input
/// leaf. Returns the graph and the gradient node. The gradient nodes stay
/// differentiable with respect to every parameter.
pub fn make_gradient_graph(graph: &Graph, output: NodeId, wrt: NodeId) -> Result<(Graph, NodeId)> {
    if graph.leaf_kind(wrt) != Some(LeafKind::Input) {
        return Err(Error::Structural { node: wrt.0, msg: "gradient target must be an input leaf".into() });
    }
    let mut g = graph.clone();
    let grad = g.gradient_nodes(output, &[wrt])?[0];
    Ok((g, grad))
}

/// A loss graph with its parameter-gradient nodes prebuilt, so repeated
/// evaluations skip graph construction.
#[derive(Debug, Clone)]
pub struct GradientProgram {
    graph: Graph,
    output: NodeId,
    wrt: Vec<NodeId>,
    grads: Vec<NodeId>,
}

impl GradientProgram {
    pub fn new(mut graph: Graph, output: NodeId, wrt: &[NodeId]) -> Result<Self> {
        let grads = graph.gradient_nodes(output, wrt)?;
        Ok(Self { graph, output, wrt: wrt.to_vec(), grads })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn wrt(&self) -> &[NodeId] {
        &self.wrt
    }

    /// Output value and one gradient per `wrt` entry, in order.
    pub fn eval(&self, bindings: &Bindings<'_>) -> Result<(f64, Vec<Tensor>)> {
        let mut targets = Vec::with_capacity(self.grads.len() + 1);
        targets.push(self.output);
        targets.extend_from_slice(&self.grads);
        let mut values = self.graph.evaluate(bindings, &targets)?;
        let out = values.get(self.output).item();
        // the same node can be the gradient of several leaves (shared zero)
        let grads = self.grads.iter().map(|g| values.get(*g).clone()).collect();
        let _ = values.take(self.output);
        Ok((out, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind1<'a>(leaf: NodeId, t: &'a Tensor) -> Bindings<'a> {
        Bindings::new().with(leaf, t)
    }

    #[test]
    fn forward_identity_plus_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 1);
        let z = g.constant(Tensor::zeros(2, 1));
        let y = g.add(x, z);
        let xv = Tensor::column(&[1.0, 2.0]);
        let vals = g.forward(&bind1(x, &xv)).unwrap();
        assert_eq!(vals.get(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_tanh_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let y = g.tanh(x);
        let xv = Tensor::scalar(0.0);
        assert_eq!(g.forward(&bind1(x, &xv)).unwrap().get(y).item(), 0.0);
    }

    #[test]
    fn forward_matvec() {
        let mut g = Graph::new();
        let w = g.parameter("W", 2, 2);
        let x = g.input("x", 2, 1);
        let y = g.matmul(w, x);
        let wv = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let xv = Tensor::column(&[1.0, 1.0]);
        let vals = g.forward(&Bindings::new().with(w, &wv).with(x, &xv)).unwrap();
        assert_eq!(vals.get(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_structural_with_node_id() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 1);
        let b = g.input("b", 3, 1);
        let c = g.add(a, b);
        let (av, bv) = (Tensor::zeros(2, 1), Tensor::zeros(3, 1));
        match g.forward(&Bindings::new().with(a, &av).with(b, &bv)) {
            Err(Error::Structural { node, .. }) => assert_eq!(node, c.0),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn bad_binding_shape_is_structural() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 1);
        let av = Tensor::zeros(3, 1);
        assert!(matches!(g.forward(&bind1(a, &av)), Err(Error::Structural { node: 0, .. })));
    }

    #[test]
    fn unbound_leaf_is_structural() {
        let mut g = Graph::new();
        let _ = g.input("a", 2, 1);
        assert!(matches!(g.forward(&Bindings::new()), Err(Error::Structural { .. })));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let r = g.recip(x);
        let xv = Tensor::scalar(0.0);
        match g.forward(&bind1(x, &xv)) {
            Err(Error::NonFinite { node }) => assert_eq!(node, r.0),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 1);
        let y = g.sum(x);
        let xv = Tensor::column(&[0.3, -1.0, 2.0]);
        let grads = backward(&g, &bind1(x, &xv), y).unwrap();
        assert_eq!(grads[&x].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_half_norm_squared() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 1);
        let sq = g.square(x);
        let s = g.sum(sq);
        let y = g.scale(s, 0.5);
        let xv = Tensor::column(&[3.0, 4.0]);
        let grads = backward(&g, &bind1(x, &xv), y).unwrap();
        assert_eq!(grads[&x].data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_tanh_weight() {
        let mut g = Graph::new();
        let w = g.parameter("w", 1, 1);
        let x = g.input("x", 1, 1);
        let wx = g.mul(w, x);
        let y = g.tanh(wx);
        let (wv, xv) = (Tensor::scalar(0.5), Tensor::scalar(1.0));
        let grads = backward(&g, &Bindings::new().with(w, &wv).with(x, &xv), y).unwrap();
        let fd = finite_diff_gradient(|t: &Tensor| Ok((t.item() * 1.0).tanh()), &wv, 1e-6).unwrap();
        assert!((grads[&w].item() - 0.786448).abs() < 1e-6);
        assert!((grads[&w].item() - fd.item()).abs() < 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 1);
        let y = g.tanh(x);
        let xv = Tensor::zeros(2, 1);
        assert!(matches!(backward(&g, &bind1(x, &xv), y), Err(Error::Structural { .. })));
    }

    #[test]
    fn gradient_graph_of_half_norm_is_identity() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 1);
        let sq = g.square(x);
        let s = g.sum(sq);
        let h = g.scale(s, 0.5);
        let (gg, grad) = make_gradient_graph(&g, h, x).unwrap();
        let xv = Tensor::column(&[0.5, -2.0, 7.0]);
        assert_eq!(gg.forward(&bind1(x, &xv)).unwrap().get(grad).data(), xv.data());
    }

    #[test]
    fn mixed_second_derivative_through_gradient_graph() {
        // H = 0.5 (w x)^2, dH/dx = w^2 x, d/dw sum(dH/dx) = 2 w x = 12 at w=2, x=3.
        let mut g = Graph::new();
        let w = g.parameter("w", 1, 1);
        let x = g.input("x", 1, 1);
        let wx = g.mul(w, x);
        let sq = g.square(wx);
        let s = g.sum(sq);
        let h = g.scale(s, 0.5);
        let (mut gg, grad) = make_gradient_graph(&g, h, x).unwrap();
        let out = gg.sum(grad);
        let (wv, xv) = (Tensor::scalar(2.0), Tensor::scalar(3.0));
        let b = Bindings::new().with(w, &wv).with(x, &xv);
        assert_eq!(gg.forward(&b).unwrap().get(grad).item(), 12.0);
        let grads = backward(&gg, &b, out).unwrap();
        assert_eq!(grads[&w].item(), 12.0);
    }

    #[test]
    fn gradient_graph_requires_input_leaf() {
        let mut g = Graph::new();
        let w = g.parameter("w", 1, 1);
        let s = g.sum(w);
        assert!(make_gradient_graph(&g, s, w).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 1);
        let unused = g.parameter("u", 2, 2);
        let s = g.sum(x);
        let xv = Tensor::column(&[1.0, 2.0]);
        let uv = Tensor::identity(2);
        let grads = backward(&g, &Bindings::new().with(x, &xv).with(unused, &uv), s).unwrap();
        assert_eq!(grads[&unused], Tensor::zeros(2, 2));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 1);
        let r = g.relu(x);
        let s = g.sum(r);
        let xv = Tensor::column(&[-1.0, 0.0, 2.0]);
        let grads = backward(&g, &bind1(x, &xv), s).unwrap();
        assert_eq!(grads[&x].data(), &[0.0, 0.0, 1.0]);
    }
}
