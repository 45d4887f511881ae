//! Finite-difference checks of every graph primitive, shared by the
//! acceptance harness and the property tests.

#![allow(dead_code)]

use shnd_core::autodiff::{finite_diff_gradient, Bindings, GradientProgram, Graph, NodeId};
use shnd_core::tensor::Tensor;

pub type Build = fn(&mut Graph, NodeId, NodeId) -> NodeId;

/// Each case maps two `3 x 4` inputs to some output node.
pub fn primitive_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("matmul+transpose", |g, a, b| {
            let bt = g.transpose(b);
            g.matmul(a, bt)
        }),
        ("scale", |g, a, _| g.scale(a, -1.7)),
        ("add_scalar", |g, a, b| {
            let s = g.add_scalar(a, 0.3);
            g.mul(s, b)
        }),
        ("tanh", |g, a, _| g.tanh(a)),
        ("sigmoid", |g, a, _| g.sigmoid(a)),
        ("softplus", |g, a, _| g.softplus(a)),
        ("relu", |g, a, b| {
            let r = g.relu(a);
            g.mul(r, b)
        }),
        ("step", |g, a, b| {
            let s = g.step(a);
            g.mul(s, b)
        }),
        ("square", |g, a, _| g.square(a)),
        ("recip", |g, a, _| {
            let s = g.square(a);
            let p = g.add_scalar(s, 0.5);
            g.recip(p)
        }),
        ("sum", |g, a, b| {
            let p = g.mul(a, b);
            g.sum(p)
        }),
        ("gather_cols", |g, a, _| g.gather_cols(a, vec![3, 0, 0, 2, 1])),
        ("scatter_cols", |g, a, _| g.scatter_cols(a, vec![1, 4, 1, 0], 5)),
        ("concat", |g, a, b| g.concat_cols(&[a, b, a])),
    ]
}

/// Deterministic `3 x 4` input with entries bounded away from zero.
pub fn input(seed: u64, salt: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(salt * 1442695040888963407 + 1);
    Tensor::from_fn(3, 4, |_, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        let mag = 0.1 + 1.4 * u;
        if (state >> 7) & 1 == 0 { mag } else { -mag }
    })
}

/// `sum(out * w)` for a fixed weight pattern `w`, so every output entry matters.
fn scalarize(g: &mut Graph, out: NodeId) -> NodeId {
    let [r, c] = g.shape(out);
    let w = g.constant(Tensor::from_fn(r, c, |i, j| 0.5 + 0.25 * ((3 * i + 5 * j) % 7) as f64));
    let p = g.mul(out, w);
    g.sum(p)
}

fn max_rel_err(ad: &Tensor, fd: &Tensor) -> f64 {
    let diff = ad.sub(fd).max_abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / fd.max_abs().max(ad.max_abs())
}

/// Worst relative error of reverse-mode gradients against central
/// differences, over both inputs.
pub fn first_order_error(build: Build, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (an, bn) = (g.input("a", 3, 4), g.input("b", 3, 4));
    let out = build(&mut g, an, bn);
    let y = scalarize(&mut g, out);
    let prog = GradientProgram::new(g.clone(), y, &[an, bn]).unwrap();
    let (_, grads) = prog.eval(&Bindings::new().with(an, a).with(bn, b)).unwrap();
    let value = |ta: &Tensor, tb: &Tensor| -> shnd_core::Result<f64> {
        Ok(g.evaluate(&Bindings::new().with(an, ta).with(bn, tb), &[y])?.get(y).item())
    };
    let fa = finite_diff_gradient(|t| value(t, b), a, 1e-6).unwrap();
    let fb = finite_diff_gradient(|t| value(a, t), b, 1e-6).unwrap();
    max_rel_err(&grads[0], &fa).max(max_rel_err(&grads[1], &fb))
}

/// Same check for the gradient of `sum(grad_a * w)`, i.e. second order.
pub fn second_order_error(build: Build, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (an, bn) = (g.input("a", 3, 4), g.input("b", 3, 4));
    let out = build(&mut g, an, bn);
    let y = scalarize(&mut g, out);
    let ga = g.gradient_nodes(y, &[an]).unwrap()[0];
    let z = scalarize(&mut g, ga);
    let prog = GradientProgram::new(g.clone(), z, &[an]).unwrap();
    let (_, grads) = prog.eval(&Bindings::new().with(an, a).with(bn, b)).unwrap();
    let value = |ta: &Tensor| -> shnd_core::Result<f64> {
        Ok(g.evaluate(&Bindings::new().with(an, ta).with(bn, b), &[z])?.get(z).item())
    };
    let fa = finite_diff_gradient(value, a, 1e-5).unwrap();
    max_rel_err(&grads[0], &fa)
}
