//! Learned continuous-time dynamics with built-in stability guarantees.
//!
//! The central model is `x' = (J(x) - R(x)) grad H(x)`, where `H` is built
//! from a certified bi-Lipschitz network and therefore satisfies a
//! Polyak-Lojasiewicz inequality plus quadratic upper and lower bounds,
//! `J` is skew-symmetric and `R >= eps I`. Such a field is globally
//! exponentially stable at the minimiser of `H` for every parameter value.
//! A port-Hamiltonian extension adds `B(x) u` with output `y = B(x)^T grad H`
//! and is passive with storage `H`.
//!
//! Also included: projection-based stable baselines, a damped double
//! pendulum ground truth, a fixed-step RK4 integrator with stability audits,
//! an Adam/cosine training loop and the experiment drivers used by the CLI.

pub mod autodiff;
pub mod baselines;
pub mod bilip;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod ode;
pub mod par;
pub mod params;
pub mod pendulum;
pub mod plnet;
pub mod rng;
pub mod shnd;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
