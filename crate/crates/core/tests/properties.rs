mod common;

use proptest::prelude::*;
use shnd_core::bilip::BiLipConfig;
use shnd_core::ode;
use shnd_core::params::ParamStore;
use shnd_core::pendulum::PendulumParams;
use shnd_core::plnet::Anchor;
use shnd_core::shnd::{ShndConfig, ShndModel};
use shnd_core::tensor::{distance, dot, Tensor};
use shnd_core::training::{cosine_lr, AdamState, ADAM_EPS};

fn shnd_strategy() -> impl Strategy<Value = (ShndModel, f64)> {
    (
        2usize..=4,
        prop::collection::vec(2usize..=8, 1..=2),
        0.05f64..0.5,
        1.5f64..20.0,
        0.001f64..0.1,
        any::<u64>(),
        0.2f64..5.0,
    )
        .prop_map(|(dim, hidden, mu, spread, epsilon, seed, weight_scale)| {
            let mut bilip = BiLipConfig::new(dim, mu, mu * spread, hidden);
            bilip.seed = seed;
            let cfg = ShndConfig { bilip, jr_hidden: vec![6], epsilon, anchor: Anchor::KnownEquilibrium(vec![0.0; dim]) };
            let mut m = ShndModel::new(&cfg).unwrap();
            for (_, w) in m.store_mut().iter_mut() {
                *w = w.scale(weight_scale);
            }
            m.refresh().unwrap();
            (m, epsilon)
        })
}

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primitive_gradients_match_differences(seed in any::<u64>()) {
        let (a, b) = (common::input(seed, 1), common::input(seed, 2));
        for (name, build) in common::primitive_cases() {
            let e1 = common::first_order_error(build, &a, &b);
            prop_assert!(e1 <= 1e-6, "{name}: first order {e1:e}");
            let e2 = common::second_order_error(build, &a, &b);
            prop_assert!(e2 <= 1e-6, "{name}: second order {e2:e}");
        }
    }

    #[test]
    fn certified_map_is_bilipschitz(
        (m, _) in shnd_strategy(),
        pts in prop::collection::vec((point(4), point(4)), 20),
    ) {
        let g = &m.plnet.g;
        let (mu, nu) = (g.net.mu(), g.net.nu());
        let n = m.dim();
        for (x, y) in pts {
            let (x, y) = (&x[..n], &y[..n]);
            let d_in = distance(x, y);
            prop_assume!(d_in > 1e-6);
            let d_out = distance(&g.forward(x).unwrap(), &g.forward(y).unwrap());
            prop_assert!(d_out >= mu * d_in * (1.0 - 1e-9), "{d_out} < {mu} * {d_in}");
            prop_assert!(d_out <= nu * d_in * (1.0 + 1e-9), "{d_out} > {nu} * {d_in}");
        }
    }

    #[test]
    fn field_descends_hamiltonian((m, eps) in shnd_strategy(), pts in prop::collection::vec(point(4), 20)) {
        let n = m.dim();
        for x in pts {
            let x = &x[..n];
            let grad_h = m.plnet.grad_hamiltonian(x).unwrap();
            let f = m.field(x).unwrap();
            let lhs = dot(&grad_h, &f);
            prop_assert!(lhs <= -eps * dot(&grad_h, &grad_h) + 1e-9, "dH/dt = {lhs}");
        }
    }

    #[test]
    fn interconnection_is_skew_and_damping_floored((m, eps) in shnd_strategy(), x in point(4)) {
        let n = m.dim();
        let (j, r) = m.jr_matrices(&x[..n]).unwrap();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(j.get(a, b), -j.get(b, a));
            }
        }
        let eig = nalgebra::DMatrix::from_row_slice(n, n, r.data()).symmetric_eigenvalues();
        prop_assert!(eig.min() >= eps - 1e-12, "min eig {}", eig.min());
    }

    #[test]
    fn cosine_schedule_decays_within_bounds(total in 1usize..5000, lr0 in 1e-5f64..1.0) {
        prop_assert_eq!(cosine_lr(0, total, lr0), lr0);
        prop_assert!(cosine_lr(total, total, lr0).abs() <= lr0 * 1e-15);
        let mut prev = lr0;
        for step in (0..=total).step_by((total / 50).max(1)) {
            let lr = cosine_lr(step, total, lr0);
            prop_assert!((0.0..=lr0).contains(&lr) && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_adam_step_is_normalised(g in prop::collection::vec(-10.0f64..10.0, 6), lr in 1e-4f64..0.1) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(2, 3));
        let mut adam = AdamState::new(&store);
        let grad = Tensor::new(2, 3, g.clone()).unwrap();
        adam.step(&mut store, &[grad], lr).unwrap();
        for (w, gi) in store.get("w").unwrap().data().iter().zip(&g) {
            let expect = -lr * gi / (gi.abs() + ADAM_EPS);
            prop_assert!((w - expect).abs() <= 1e-12 * lr.max(expect.abs()), "{w} vs {expect}");
        }
    }

    #[test]
    fn rk4_step_is_quartic_taylor(a in -5.0f64..5.0, x0 in -10.0f64..10.0, dt in 1e-3f64..0.2) {
        let x1 = ode::rk4_step(|x: &[f64]| Ok(vec![a * x[0]]), &[x0], dt).unwrap()[0];
        let z = a * dt;
        let expect = x0 * (1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0);
        prop_assert!((x1 - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn pendulum_energy_never_grows(
        th in prop::collection::vec(-3.0f64..3.0, 2),
        w in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let p = PendulumParams::default();
        let x0 = [th[0], th[1], w[0], w[1]];
        let traj = ode::simulate(|x: &[f64]| Ok(p.field(x).to_vec()), &x0, 0.005, 2.0).unwrap();
        let e0 = p.energy(&x0);
        prop_assert!(p.energy(traj.last()) <= e0 + 1e-6);
    }
}
