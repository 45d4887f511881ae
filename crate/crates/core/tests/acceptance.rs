//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --release --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use shnd_core::bilip::BiLipConfig;
use shnd_core::config::ExperimentConfig;
use shnd_core::experiments::{self, audit_model, ComparisonRun};
use shnd_core::model::{Model, ModelKind};
use shnd_core::ode;
use shnd_core::plnet::Anchor;
use shnd_core::rng::{self, Stream};
use shnd_core::shnd::{ShndConfig, ShndModel};
use shnd_core::tensor::{dot, Tensor};
use shnd_core::training::{loss_and_gradient, mse};
use shnd_core::Result as CoreResult;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

const SEEDS: [u64; 3] = [0, 1, 2];
const KINDS: [ModelKind; 3] = [ModelKind::Shnd, ModelKind::SdMlp, ModelKind::SdIcnn];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn report(n: usize, title: &str, budget: Option<Duration>, run: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let out = run().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let took = start.elapsed();
    let in_time = budget.is_none_or(|b| took <= b);
    let pass = out.pass && in_time;
    let budget_note = budget.map_or(String::new(), |b| format!(" / budget {:.0}s", b.as_secs_f64()));
    println!(
        "{} criterion {n}: {title}: {} [{:.1}s{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn pendulum_cfg() -> ExperimentConfig {
    ExperimentConfig { train_size: 500, epochs: 200, seeds: SEEDS.to_vec(), ..ExperimentConfig::default() }
}

fn certificate_suite(trained: &Model) -> Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let untrained = cfg.build_model(ModelKind::Shnd, 0)?;
    let mut failed = Vec::new();
    for (label, m) in [("untrained", &untrained), ("trained", trained)] {
        let rep = audit_model(m, &cfg, 0)?;
        for line in rep.lines.iter().filter(|l| l.status == experiments::AuditStatus::Fail) {
            failed.push(format!("{label} {}: {}", line.name, line.detail));
        }
        if !m.shnd().is_some_and(|s| s.plnet.g.net.mu() == 0.1 && s.plnet.g.net.nu() == 2.0 && s.epsilon() == 0.01) {
            failed.push(format!("{label}: unexpected (mu, nu, eps)"));
        }
    }
    Ok(if failed.is_empty() {
        Outcome::new(true, "untrained and trained SHND pass all certificate checks")
    } else {
        Outcome::new(false, failed.join("; "))
    })
}

fn toy_shnd() -> Result<Model> {
    let cfg = ShndConfig {
        bilip: BiLipConfig::new(2, 0.1, 2.0, vec![8, 8]),
        jr_hidden: vec![8],
        epsilon: 0.01,
        anchor: Anchor::KnownEquilibrium(vec![0.0; 2]),
    };
    Ok(Model::Shnd(ShndModel::new(&cfg)?))
}

fn gradient_oracle() -> Result<Outcome> {
    let model = toy_shnd()?;
    let x = Tensor::from_fn(6, 2, |i, j| ((i * 2 + j) as f64 * 0.77).sin() * 1.5);
    let v = Tensor::from_fn(6, 2, |i, j| ((i + 3 * j) as f64 * 0.41).cos());
    let (_, grads) = loss_and_gradient(&model, &x, &v)?;
    let names: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
    let (mut diff, mut scale) = (0.0_f64, 0.0_f64);
    // weights are perturbed directly, so the norm probes stay those of the base model
    for (name, grad) in names.iter().zip(&grads) {
        let base = model.store().get(name).unwrap().clone();
        for i in 0..base.len() {
            let h = 1e-6 * base.data()[i].abs().max(1.0);
            let loss = |delta: f64| -> CoreResult<f64> {
                let mut m = model.clone();
                m.store_mut().get_mut(name).unwrap().data_mut()[i] += delta;
                Ok(mse(&m.field_batch(&x)?, &v))
            };
            let fd = (loss(h)? - loss(-h)?) / (2.0 * h);
            diff = diff.max((grad.data()[i] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    let rel = diff / scale;

    let mut prim_worst = (0.0_f64, "");
    for seed in 0..3 {
        let (a, b) = (common::input(seed, 1), common::input(seed, 2));
        for (name, build) in common::primitive_cases() {
            let e = common::first_order_error(build, &a, &b).max(common::second_order_error(build, &a, &b));
            if e > prim_worst.0 {
                prim_worst = (e, name);
            }
        }
    }
    Ok(Outcome::new(
        rel <= 1e-5 && prim_worst.0 <= 1e-6,
        format!(
            "loss gradient rel err {rel:.2e} (<= 1e-5, {} params); worst primitive rel err {:.2e} ({}, <= 1e-6)",
            model.store().scalar_count(),
            prim_worst.0,
            prim_worst.1
        ),
    ))
}

fn stability_audit(trained: &Model) -> Result<Outcome> {
    let m = trained.shnd().expect("shnd");
    let x0 = experiments::sim_initial_states(100, std::f64::consts::FRAC_PI_2, 3)?;
    let well_formed = x0.row_iter().all(|r| r[0].abs() <= std::f64::consts::FRAC_PI_2 && r[1].abs() <= std::f64::consts::FRAC_PI_2 && r[2] == 0.0 && r[3] == 0.0);
    let run = experiments::stability_run(m, &x0, 0.01, 20.0)?;
    Ok(Outcome::new(
        well_formed && run.trajectories == 100 && run.violations() == 0,
        format!(
            "{} trajectories: {} decay-bound, {} containment, {} H-increase violations",
            run.trajectories, run.exponential, run.containment, run.h_increase
        ),
    ))
}

fn passivity() -> Result<Outcome> {
    let cfg = ExperimentConfig { seed: 7, ..ExperimentConfig::default() };
    let Model::Phs(p) = cfg.build_model(ModelKind::Phs, 7)? else { unreachable!() };
    let mut r = rng::stream(11, Stream::Probe);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let x = rng::uniform_ball(&mut r, p.dim(), 3.0);
        let u = rng::uniform_box(&mut r, &vec![2.0; p.input_dim]);
        let (xdot, y) = p.field(&x, &u)?;
        let grad_h = p.shnd.plnet.grad_hamiltonian(&x)?;
        worst = worst.max(dot(&grad_h, &xdot) - dot(&u, &y));
    }
    let lib = p.passivity_audit(1000, 7)?;
    Ok(Outcome::new(
        worst <= 1e-9 && lib <= 1e-9,
        format!("max H' - u^T y = {worst:.3e} (library audit {lib:.3e}), need <= 1e-9"),
    ))
}

fn projection() -> Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let mut r = rng::stream(5, Stream::Probe);
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| rng::uniform_box(&mut r, &cfg.data_box())).collect();
    let x = Tensor::from_rows(&rows)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [ModelKind::SdMlp, ModelKind::SdIcnn] {
        let Model::Sd(sd) = cfg.build_model(kind, 0)? else { unreachable!() };
        let worst = sd.projection_audit(&x)?;
        pass &= worst <= 1e-9;
        parts.push(format!("{kind}: max grad V^T f + alpha V = {worst:.3e}"));
    }
    Ok(Outcome::new(pass, format!("{} (<= 1e-9)", parts.join(", "))))
}

fn comparison(runs: &[ComparisonRun]) -> Result<Outcome> {
    let Some(curve) = experiments::mean_error_curve(runs, ModelKind::Shnd) else {
        return Ok(Outcome::new(false, "an SHND simulation diverged"));
    };
    let ratio = experiments::decay_ratio(&curve);
    let per_seed: Vec<String> = runs
        .iter()
        .filter(|r| r.kind == ModelKind::Shnd)
        .map(|r| match &r.sim {
            Ok(rep) => format!("seed {} {:.3}", r.seed, experiments::decay_ratio(&rep.mean_err)),
            Err(_) => format!("seed {} diverged", r.seed),
        })
        .collect();
    let losses: Vec<String> =
        KINDS.iter().map(|&k| format!("{k} {:.4}", experiments::mean_final_test_loss(runs, k))).collect();
    let shnd_loss = experiments::mean_final_test_loss(runs, ModelKind::Shnd);
    let mlp_loss = experiments::mean_final_test_loss(runs, ModelKind::SdMlp);
    let seed_sensitive = SEEDS.iter().any(|&s| {
        let of = |k| runs.iter().find(|r| r.kind == k && r.seed == s).and_then(|r| r.history.final_test_loss());
        match (of(ModelKind::Shnd), of(ModelKind::SdMlp)) {
            (Some(a), Some(b)) => (a <= b) != (shnd_loss <= mlp_loss),
            _ => true,
        }
    });
    let loss_ok = shnd_loss <= mlp_loss;
    let pass = ratio <= 0.1 && (loss_ok || seed_sensitive);
    Ok(Outcome::new(
        pass,
        format!(
            "seed-mean SHND error t=20 / peak = {ratio:.4} (<= 0.1; per seed: {}); mean final test loss {}; SHND <= SD-MLP: {loss_ok}{}",
            per_seed.join(", "),
            losses.join(", "),
            if seed_sensitive { " (seed-sensitive, informational)" } else { "" }
        ),
    ))
}

fn rk4_order() -> Result<Outcome> {
    let dts = [0.1, 0.05, 0.025, 0.0125];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let traj = ode::simulate(|x: &[f64]| Ok(vec![-x[0]]), &[1.0], dt, 1.0)?;
            Ok((traj.last()[0] - (-1.0_f64).exp()).abs())
        })
        .collect::<CoreResult<_>>()?;
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let fit = ode::rk4_order_on_linear_decay()?;
    let ok = (3.9..=4.1).contains(&fit) && orders.iter().all(|p| (3.9..=4.1).contains(p));
    Ok(Outcome::new(ok, format!("fitted order {fit:.4}, pairwise {orders:.4?} (in [3.9, 4.1])")))
}

fn dissipation() -> Result<Outcome> {
    let p = ExperimentConfig::default().pendulum;
    let mut r = rng::stream(9, Stream::Probe);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let x = rng::uniform_box(&mut r, &[std::f64::consts::PI, std::f64::consts::PI, 3.0, 3.0]);
        let [th1, th2, w1, w2] = [x[0], x[1], x[2], x[3]];
        let (s, c) = (th1 - th2).sin_cos();
        let k = p.m2 * p.l1 * p.l2;
        let grad = [
            -k * s * w1 * w2 + (p.m1 + p.m2) * p.g_acc * p.l1 * th1.sin(),
            k * s * w1 * w2 + p.m2 * p.g_acc * p.l2 * th2.sin(),
            (p.m1 + p.m2) * p.l1 * p.l1 * w1 + k * c * w2,
            p.m2 * p.l2 * p.l2 * w2 + k * c * w1,
        ];
        let e_dot = dot(&grad, &p.field(&x));
        worst = worst.max((e_dot + p.b1 * w1 * w1 + p.b2 * w2 * w2).abs());
    }
    Ok(Outcome::new(worst <= 1e-9, format!("max |E' + b1 w1^2 + b2 w2^2| = {worst:.3e} over 100 states (<= 1e-9)")))
}

fn comparison_bytes(runs: &[ComparisonRun]) -> Result<Vec<(String, Vec<u8>)>> {
    let dir = tempfile::tempdir()?;
    experiments::write_comparison(runs, dir.path())?
        .into_iter()
        .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p)?)))
        .collect()
}

fn main() {
    let mut all = true;
    let cfg = pendulum_cfg();
    let mut trained = None;
    all &= report(1, "certificate suite", Some(Duration::from_secs(60)), || {
        let quick = ExperimentConfig { epochs: 20, ..cfg.clone() };
        let (model, _) = experiments::train_model(&quick, ModelKind::Shnd, cfg.nu, 0, 500)?;
        let out = certificate_suite(&model);
        trained = Some(model);
        out
    });
    all &= report(2, "gradient oracle", Some(Duration::from_secs(60)), gradient_oracle);
    all &= report(3, "stability audit", Some(Duration::from_secs(300)), || match trained.as_ref() {
        Some(m) => stability_audit(m),
        None => Ok(Outcome::new(false, "no trained model from criterion 1")),
    });
    all &= report(4, "passivity audit", None, passivity);
    all &= report(5, "projection identity", None, projection);

    let mut first = None;
    all &= report(6, "scaled pendulum comparison", Some(Duration::from_secs(1800)), || {
        let runs = experiments::run_comparison(&cfg, &KINDS, &SEEDS)?;
        let out = comparison(&runs);
        first = Some(runs);
        out
    });
    all &= report(7, "RK4 order", None, rk4_order);
    all &= report(8, "pendulum dissipation", None, dissipation);
    all &= report(9, "determinism", None, || {
        let Some(first) = first.as_ref() else {
            return Ok(Outcome::new(false, "criterion 6 produced no runs"));
        };
        let again = experiments::run_comparison(&cfg, &KINDS, &SEEDS)?;
        let (a, b) = (comparison_bytes(first)?, comparison_bytes(&again)?);
        let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
        Ok(Outcome::new(
            a.len() == b.len() && differing.is_empty(),
            format!("{} CSVs compared, {} differ {:?}", a.len(), differing.len(), differing),
        ))
    });
    if !all {
        std::process::exit(1);
    }
}
