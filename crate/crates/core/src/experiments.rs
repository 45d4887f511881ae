//! Experiment drivers behind the command-line subcommands. Each `cmd_*`
//! function is a pure function of its configuration and input files and
//! writes its outputs under `out_dir`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::ode::{self, fmt17, write_file, SimReport};
use crate::par;
use crate::rng::{self, Stream};
use crate::shnd::{ShndModel, AUDIT_RADIUS};
use crate::tensor::Tensor;
use crate::training::{self, gen_dataset, Dataset, History};

/// Pairs, points and states sampled by every audit.
pub const AUDIT_SAMPLES: usize = 1000;
pub const AUDIT_SLACK: f64 = 1e-9;
pub const EIG_SLACK: f64 = 1e-12;
/// Trajectories written per simulation (model and ground truth each).
pub const SAMPLE_TRAJECTORIES: usize = 2;

/// Note written next to sweep outputs.
const SUBSTITUTE_GRID_NOTE: &str = "grid: substitute values chosen to span the range; the reference grid is not published";

/// `{kind}-seed{seed}`, the stem of every per-run output file.
pub fn run_stem(kind: ModelKind, seed: u64) -> String {
    format!("{kind}-seed{seed}")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, kind: ModelKind, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("{}.ckpt", run_stem(kind, seed)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Ground-truth train and test sets for `seed`.
pub fn datasets(cfg: &ExperimentConfig, seed: u64, train_size: usize) -> Result<(Dataset, Dataset)> {
    let truth = |x: &Tensor| cfg.pendulum.field_batch(x);
    let half = cfg.data_box();
    let train = gen_dataset(truth, train_size, &half, seed, Stream::TrainData)?;
    let test = gen_dataset(truth, cfg.test_size, &half, seed, Stream::TestData)?;
    Ok((train, test))
}

/// `n` rest states `[th1, th2, 0, 0]` with `|th_i| <= theta_max`.
pub fn sim_initial_states(n: usize, theta_max: f64, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, Stream::SimInit);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let th = rng::uniform_box(&mut r, &[theta_max, theta_max]);
            vec![th[0], th[1], 0.0, 0.0]
        })
        .collect();
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataOutput> {
    ensure_dir(&cfg.out_dir)?;
    let (train, test) = datasets(cfg, cfg.seed, cfg.train_size)?;
    let train_path = cfg.out_dir.join("train.csv");
    let test_path = cfg.out_dir.join("test.csv");
    train.save_csv(&train_path)?;
    test.save_csv(&test_path)?;
    Ok(GenDataOutput { train_path, test_path, train_rows: train.len(), test_rows: test.len() })
}

/// Train a fresh model without touching the filesystem.
pub fn train_model(cfg: &ExperimentConfig, kind: ModelKind, nu: f64, seed: u64, train_size: usize) -> Result<(Model, History)> {
    let (train, test) = datasets(cfg, seed, train_size)?;
    let mut model = cfg.build_model_with_nu(kind, nu, seed)?;
    let history = training::train(&mut model, &train, &test, &cfg.train_config(seed, train.len()))?;
    Ok((model, history))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub history: History,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let kind = cfg.kind()?;
    let (model, history) = train_model(cfg, kind, cfg.nu, cfg.seed, cfg.train_size)?;
    ensure_dir(&cfg.out_dir)?;
    let checkpoint = checkpoint_path(cfg, kind, cfg.seed);
    let log = cfg.out_dir.join(format!("{}-log.csv", run_stem(kind, cfg.seed)));
    checkpoint::save(&model, &checkpoint)?;
    history.save_csv(&log)?;
    Ok(TrainOutput { model, history, checkpoint, log })
}

/// Learned and true simulations from the same initial batch.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub model_states: Vec<Tensor>,
    pub true_states: Vec<Tensor>,
    pub report: SimReport,
}

pub fn simulate_against_truth(model: &Model, cfg: &ExperimentConfig, seed: u64) -> Result<SimRun> {
    let x0 = sim_initial_states(cfg.sim_batch, cfg.sim_theta_max, seed)?;
    let field = model.compile(x0.rows())?;
    let model_states = ode::simulate_batch(|x| field.eval(model, x), &x0, cfg.dt, cfg.horizon)
        .map_err(|e| Error::Numeric(format!("{} simulation: {e}", model.kind())))?;
    let true_states = ode::simulate_batch(|x| Ok(cfg.pendulum.field_batch(x)), &x0, cfg.dt, cfg.horizon)?;
    let report = SimReport::from_states(&model_states, &true_states, cfg.dt)?;
    Ok(SimRun { model_states, true_states, report })
}

/// Stability audit of a simulated batch of a certified model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StabilityRun {
    pub trajectories: usize,
    pub exponential: usize,
    pub containment: usize,
    /// Steps where `H` rose by more than the integration slack.
    pub h_increase: usize,
}

impl StabilityRun {
    pub fn violations(&self) -> usize {
        self.exponential + self.containment + self.h_increase
    }
}

/// Audit exponential decay and monotone `H` on already simulated states.
pub fn audit_simulation(m: &ShndModel, states: &[Tensor], dt: f64) -> Result<StabilityRun> {
    let cert = m.certificate();
    let xs = m.plnet.equilibrium()?;
    let mut run = StabilityRun { trajectories: states.first().map_or(0, Tensor::rows), ..Default::default() };
    for traj in ode::unbatch(states, dt) {
        let a = ode::audit_stability(&traj, &xs, cert.kappa, cert.lambda);
        run.exponential += a.exponential;
        run.containment += a.containment;
    }
    let field = |x: &Tensor| m.field_batch(x);
    let observe = |x: &Tensor| Ok(m.plnet.hamiltonian_batch(x)?.into_data());
    let stride = (states.len() / 10).max(1);
    let mut c = 0.0_f64;
    for s in states.iter().step_by(stride) {
        c = c.max(ode::richardson_constant(&field, &observe, s, dt)?);
    }
    let h: Vec<Vec<f64>> = states.iter().map(|s| observe(s)).collect::<Result<_>>()?;
    for i in 0..run.trajectories {
        let series: Vec<f64> = h.iter().map(|row| row[i]).collect();
        run.h_increase += ode::monotone_violations(&series, c, dt);
    }
    Ok(run)
}

pub fn stability_run(m: &ShndModel, x0: &Tensor, dt: f64, t_end: f64) -> Result<StabilityRun> {
    let model = Model::Shnd(m.clone());
    let field = model.compile(x0.rows())?;
    let states = ode::simulate_batch(|x| field.eval(&model, x), x0, dt, t_end)?;
    audit_simulation(m, &states, dt)
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimReport,
    pub stability: Option<StabilityRun>,
    pub report_path: PathBuf,
    pub trajectory_paths: Vec<PathBuf>,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SimOutput> {
    let kind = cfg.kind()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg, kind, cfg.seed));
    let model = checkpoint::load(&path)?;
    let run = simulate_against_truth(&model, cfg, cfg.seed)?;
    let mut report = run.report.clone();
    let stability = match model.shnd() {
        Some(m) => Some(audit_simulation(m, &run.model_states, cfg.dt)?),
        None => None,
    };
    report.violations = stability.map_or(0, |s| s.violations());

    ensure_dir(&cfg.out_dir)?;
    let stem = run_stem(model.kind(), cfg.seed);
    let report_path = cfg.out_dir.join(format!("{stem}-sim.csv"));
    report.save_csv(&report_path)?;
    let mut trajectory_paths = Vec::new();
    let model_trajs = ode::unbatch(&run.model_states, cfg.dt);
    let true_trajs = ode::unbatch(&run.true_states, cfg.dt);
    for i in 0..SAMPLE_TRAJECTORIES.min(model_trajs.len()) {
        for (label, t) in [("model", &model_trajs[i]), ("true", &true_trajs[i])] {
            let p = cfg.out_dir.join(format!("{stem}-traj{i}-{label}.csv"));
            t.save_csv(&p)?;
            trajectory_paths.push(p);
        }
    }
    Ok(SimOutput { report, stability, report_path, trajectory_paths })
}

/// One trained point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub kind: ModelKind,
    pub x: f64,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
}

fn final_losses(h: &History) -> (f64, f64) {
    h.records.last().map_or((f64::NAN, f64::NAN), |r| (r.train_loss, r.test_loss))
}

fn run_sweep<F>(jobs: &[(ModelKind, f64, u64)], train: F) -> Result<Vec<SweepPoint>>
where
    F: Fn(ModelKind, f64, u64) -> Result<History> + Sync + Send,
{
    par::map_slice(jobs, |&(kind, x, seed)| {
        let (train_loss, test_loss) = final_losses(&train(kind, x, seed)?);
        Ok(SweepPoint { kind, x, seed, train_loss, test_loss })
    })
    .into_iter()
    .collect()
}

fn write_sweep(dir: &Path, name: &str, x_header: &str, points: &[SweepPoint], extra: impl Fn(f64) -> String) -> Result<[PathBuf; 3]> {
    ensure_dir(dir)?;
    let extra_header = if extra(1.0).is_empty() { String::new() } else { ",ratio".to_string() };
    let cell = |x: f64| if extra_header.is_empty() { String::new() } else { format!(",{}", extra(x)) };
    let raw = dir.join(format!("{name}.csv"));
    write_file(&raw, |w| {
        writeln!(w, "model,{x_header}{extra_header},seed,train_loss,test_loss")?;
        for p in points {
            writeln!(w, "{},{}{},{},{},{}", p.kind, p.x, cell(p.x), p.seed, fmt17(p.train_loss), fmt17(p.test_loss))?;
        }
        Ok(())
    })?;
    let mut groups: Vec<(ModelKind, f64, Vec<&SweepPoint>)> = Vec::new();
    for p in points {
        match groups.iter_mut().find(|(k, x, _)| *k == p.kind && *x == p.x) {
            Some(g) => g.2.push(p),
            None => groups.push((p.kind, p.x, vec![p])),
        }
    }
    let mean = dir.join(format!("{name}-mean.csv"));
    write_file(&mean, |w| {
        writeln!(w, "model,{x_header}{extra_header},seeds,train_loss_mean,test_loss_mean")?;
        for (kind, x, ps) in &groups {
            let n = ps.len() as f64;
            let tr = ps.iter().map(|p| p.train_loss).sum::<f64>() / n;
            let te = ps.iter().map(|p| p.test_loss).sum::<f64>() / n;
            writeln!(w, "{kind},{x}{},{},{},{}", cell(*x), ps.len(), fmt17(tr), fmt17(te))?;
        }
        Ok(())
    })?;
    let meta = dir.join(format!("{name}.meta.txt"));
    write_file(&meta, |w| writeln!(w, "{SUBSTITUTE_GRID_NOTE}"))?;
    Ok([raw, mean, meta])
}

/// Final losses against training-set size, one fixed test set per seed.
pub fn sweep_datasize(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let mut jobs = Vec::new();
    for kind in cfg.sweep_kinds()? {
        for &size in &cfg.sweep_sizes {
            for &seed in &cfg.seeds {
                jobs.push((kind, size as f64, seed));
            }
        }
    }
    run_sweep(&jobs, |kind, size, seed| Ok(train_model(cfg, kind, cfg.nu, seed, size as usize)?.1))
}

pub fn cmd_sweep_datasize(cfg: &ExperimentConfig) -> Result<[PathBuf; 3]> {
    let points = sweep_datasize(cfg)?;
    write_sweep(&cfg.out_dir, "sweep-datasize", "train_size", &points, |_| String::new())
}

/// Final SHND losses against `nu` at the configured `mu`.
pub fn sweep_ratio(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let mut jobs = Vec::new();
    for &nu in &cfg.sweep_nus {
        for &seed in &cfg.seeds {
            jobs.push((ModelKind::Shnd, nu, seed));
        }
    }
    run_sweep(&jobs, |kind, nu, seed| Ok(train_model(cfg, kind, nu, seed, cfg.train_size)?.1))
}

pub fn cmd_sweep_ratio(cfg: &ExperimentConfig) -> Result<[PathBuf; 3]> {
    let points = sweep_ratio(cfg)?;
    let mu = cfg.mu;
    write_sweep(&cfg.out_dir, "sweep-ratio", "nu", &points, move |nu| fmt17(nu / mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditLine {
    pub name: &'static str,
    pub status: AuditStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<AuditLine>,
}

impl CheckReport {
    fn push(&mut self, name: &'static str, ok: bool, detail: String) {
        let status = if ok { AuditStatus::Pass } else { AuditStatus::Fail };
        self.lines.push(AuditLine { name, status, detail });
    }

    fn not_applicable(&mut self, name: &'static str, why: &str) {
        self.lines.push(AuditLine { name, status: AuditStatus::NotApplicable, detail: why.to_string() });
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.status != AuditStatus::Fail)
    }

    pub fn status(&self, name: &str) -> Option<AuditStatus> {
        self.lines.iter().find(|l| l.name == name).map(|l| l.status)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let tag = match l.status {
                AuditStatus::Pass => "PASS",
                AuditStatus::Fail => "FAIL",
                AuditStatus::NotApplicable => "N/A ",
            };
            writeln!(f, "{tag} {:<22} {}", l.name, l.detail)?;
        }
        write!(f, "{}", if self.passed() { "all applicable audits passed" } else { "audit FAILED" })
    }
}

pub const CHECK_CERTIFICATE: &str = "certificate";
pub const CHECK_BILIP: &str = "bilipschitz-probe";
pub const CHECK_PL: &str = "pl-inequality";
pub const CHECK_QUADRATIC: &str = "quadratic-bounds";
pub const CHECK_SKEW: &str = "j-skew";
pub const CHECK_DAMPING: &str = "r-floor";
pub const CHECK_DESCENT: &str = "descent";
pub const CHECK_STABILITY: &str = "trajectory-stability";
pub const CHECK_PASSIVITY: &str = "passivity";
pub const CHECK_PROJECTION: &str = "projection";

/// Every audit that applies to `model`. Certified models are audited with
/// the norms they carry, so weights edited after certification fail.
pub fn audit_model(model: &Model, cfg: &ExperimentConfig, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::default();
    let certified_checks =
        [CHECK_CERTIFICATE, CHECK_BILIP, CHECK_PL, CHECK_QUADRATIC, CHECK_SKEW, CHECK_DAMPING, CHECK_DESCENT, CHECK_STABILITY];
    match model.shnd() {
        Some(m) => {
            let net = &m.plnet.g.net;
            let (bound, _) = crate::bilip::certify_weights(&net.config, &m.plnet.g.store)?;
            rep.push(
                CHECK_CERTIFICATE,
                bound <= net.bound() * (1.0 + AUDIT_SLACK) || net.gamma() * bound <= net.residual_budget() * (1.0 + AUDIT_SLACK),
                format!("recomputed B={bound:.6e}, certified B={:.6e}, gamma={:.6e}", net.bound(), net.gamma()),
            );
            let (lo, hi) = m.plnet.g.probe(AUDIT_SAMPLES, AUDIT_RADIUS, seed)?;
            rep.push(
                CHECK_BILIP,
                lo >= net.mu() - AUDIT_SLACK && hi <= net.nu() + AUDIT_SLACK,
                format!("ratios in [{lo:.6}, {hi:.6}], need [{}, {}]", net.mu(), net.nu()),
            );
            let pl = m.plnet.verify(AUDIT_SAMPLES, AUDIT_RADIUS, seed)?;
            rep.push(CHECK_PL, pl.pl_margin_min >= -AUDIT_SLACK, format!("min |grad H|^2 - 2 mu^2 H = {:.3e}", pl.pl_margin_min));
            rep.push(
                CHECK_QUADRATIC,
                pl.lower_margin_min >= -AUDIT_SLACK && pl.upper_margin_min >= -AUDIT_SLACK,
                format!("lower margin {:.3e}, upper margin {:.3e}", pl.lower_margin_min, pl.upper_margin_min),
            );
            let (skew, eig) = m.jr_audit(AUDIT_SAMPLES, AUDIT_RADIUS, seed)?;
            rep.push(CHECK_SKEW, skew == 0.0, format!("max |J + J^T| = {skew:e}"));
            rep.push(CHECK_DAMPING, eig >= -EIG_SLACK, format!("min eig(R) - eps = {eig:.3e}"));
            let descent = m.descent_audit(AUDIT_SAMPLES, AUDIT_RADIUS, seed)?;
            rep.push(CHECK_DESCENT, descent <= AUDIT_SLACK, format!("max grad H^T f + eps |grad H|^2 = {descent:.3e}"));
            let x0 = sim_initial_states(cfg.sim_batch, cfg.sim_theta_max, seed)?;
            let run = stability_run(m, &x0, cfg.dt, cfg.horizon)?;
            rep.push(
                CHECK_STABILITY,
                run.violations() == 0,
                format!(
                    "{} trajectories: {} decay, {} containment, {} H-increase violations",
                    run.trajectories, run.exponential, run.containment, run.h_increase
                ),
            );
        }
        None => {
            for name in certified_checks {
                rep.not_applicable(name, "model carries no stability certificate");
            }
        }
    }
    match model {
        Model::Phs(p) => {
            let worst = p.passivity_audit(AUDIT_SAMPLES, seed)?;
            rep.push(CHECK_PASSIVITY, worst <= AUDIT_SLACK, format!("max H' - u^T y = {worst:.3e}"));
        }
        _ => rep.not_applicable(CHECK_PASSIVITY, "model has no input port"),
    }
    match model {
        Model::Sd(sd) => {
            let mut r = rng::stream(seed, Stream::Probe);
            let rows: Vec<Vec<f64>> = (0..AUDIT_SAMPLES).map(|_| rng::uniform_box(&mut r, &cfg.data_box())).collect();
            let worst = sd.projection_audit(&Tensor::from_rows(&rows)?)?;
            rep.push(CHECK_PROJECTION, worst <= AUDIT_SLACK, format!("max grad V^T f + alpha V = {worst:.3e}"));
        }
        _ => rep.not_applicable(CHECK_PROJECTION, "model is not projection-based"),
    }
    Ok(rep)
}

pub fn cmd_check(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<CheckReport> {
    let kind = cfg.kind()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg, kind, cfg.seed));
    let model = checkpoint::load(&path)?;
    audit_model(&model, cfg, cfg.seed)
}

/// One model/seed of a train-and-simulate comparison.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub kind: ModelKind,
    pub seed: u64,
    pub history: History,
    /// `Err` text when the learned simulation blew up.
    pub sim: std::result::Result<SimReport, String>,
    pub stability: Option<StabilityRun>,
}

/// Train every `kind` on every seed and simulate against the pendulum.
pub fn run_comparison(cfg: &ExperimentConfig, kinds: &[ModelKind], seeds: &[u64]) -> Result<Vec<ComparisonRun>> {
    let jobs: Vec<(ModelKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    par::map_slice(&jobs, |&(kind, seed)| {
        let (model, history) = train_model(cfg, kind, cfg.nu, seed, cfg.train_size)?;
        let (sim, stability) = match simulate_against_truth(&model, cfg, seed) {
            Ok(run) => {
                let stab = model.shnd().map(|m| audit_simulation(m, &run.model_states, cfg.dt)).transpose()?;
                (Ok(run.report), stab)
            }
            Err(e) => (Err(e.to_string()), None),
        };
        Ok(ComparisonRun { kind, seed, history, sim, stability })
    })
    .into_iter()
    .collect()
}

/// Training logs and simulation reports, one file pair per run.
pub fn write_comparison(runs: &[ComparisonRun], dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut paths = Vec::new();
    for r in runs {
        let stem = run_stem(r.kind, r.seed);
        let log = dir.join(format!("{stem}-log.csv"));
        r.history.save_csv(&log)?;
        paths.push(log);
        let sim = dir.join(format!("{stem}-sim.csv"));
        match &r.sim {
            Ok(rep) => rep.save_csv(&sim)?,
            Err(msg) => write_file(&sim, |w| writeln!(w, "diverged: {msg}"))?,
        }
        paths.push(sim);
    }
    Ok(paths)
}

/// Mean over seeds of the final test loss for `kind`.
pub fn mean_final_test_loss(runs: &[ComparisonRun], kind: ModelKind) -> f64 {
    let losses: Vec<f64> = runs.iter().filter(|r| r.kind == kind).map(|r| final_losses(&r.history).1).collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Seed-averaged batch-mean simulation error curve for `kind`, if every
/// seed simulated to completion.
pub fn mean_error_curve(runs: &[ComparisonRun], kind: ModelKind) -> Option<Vec<f64>> {
    let reports: Vec<&SimReport> = runs.iter().filter(|r| r.kind == kind).map(|r| r.sim.as_ref().ok()).collect::<Option<_>>()?;
    let first = reports.first()?;
    let n = reports.len() as f64;
    Some((0..first.mean_err.len()).map(|k| reports.iter().map(|r| r.mean_err[k]).sum::<f64>() / n).collect())
}

/// `curve[last] / max(curve)`.
pub fn decay_ratio(curve: &[f64]) -> f64 {
    let peak = curve.iter().copied().fold(0.0, f64::max);
    curve.last().copied().unwrap_or(f64::NAN) / peak
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: dir.to_path_buf(),
            train_size: 40,
            test_size: 20,
            epochs: 2,
            batch_size: 20,
            g_hidden: vec![6],
            jr_hidden: vec![6],
            b_hidden: vec![4],
            sd_f_hidden: vec![8],
            sd_v_hidden: vec![6],
            sim_batch: 4,
            horizon: 0.5,
            seeds: vec![0, 1],
            sweep_sizes: vec![20, 40],
            sweep_nus: vec![0.5, 1.0],
            ..Default::default()
        }
    }

    #[test]
    fn initial_states_are_at_rest_inside_the_box() {
        let x = sim_initial_states(100, 1.0, 3).unwrap();
        for i in 0..100 {
            let r = x.row_slice(i);
            assert!(r[0].abs() <= 1.0 && r[1].abs() <= 1.0 && r[2] == 0.0 && r[3] == 0.0);
        }
        assert_eq!(x, sim_initial_states(100, 1.0, 3).unwrap());
        assert_ne!(x, sim_initial_states(100, 1.0, 4).unwrap());
    }

    #[test]
    fn gen_data_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = cmd_gen_data(&cfg).unwrap();
        assert_eq!((out.train_rows, out.test_rows), (40, 20));
        let first = std::fs::read(&out.train_path).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert!(text.starts_with("th1,th2,w1,w2,v1,v2,v3,v4\n"));
        cmd_gen_data(&cfg).unwrap();
        assert_eq!(std::fs::read(&out.train_path).unwrap(), first);
    }

    #[test]
    fn train_simulate_check_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let t = cmd_train(&cfg).unwrap();
        assert_eq!(t.history.records.len(), 2);
        let log = std::fs::read_to_string(&t.log).unwrap();
        assert!(log.starts_with("epoch,train_loss,test_loss,lr,wall_ms\n"));
        let sim = cmd_simulate(&cfg, None).unwrap();
        assert_eq!(sim.report.mean_err.len(), 51);
        assert_eq!(sim.report.mean_err[0], 0.0);
        assert_eq!(sim.stability.unwrap().violations(), 0);
        assert_eq!(sim.trajectory_paths.len(), 4);
        let rep = cmd_check(&cfg, None).unwrap();
        assert!(rep.passed(), "{rep}");
        assert_eq!(rep.status(CHECK_PASSIVITY), Some(AuditStatus::NotApplicable));
    }

    #[test]
    fn corrupted_checkpoint_fails_the_probe() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { g_hidden: vec![16, 16], ..tiny(dir.path()) };
        let mut model = cfg.build_model(ModelKind::Shnd, 0).unwrap();
        for name in checkpoint::y_weight_names(&model) {
            model.store_mut().get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let path = dir.path().join("bad.ckpt");
        checkpoint::save(&model, &path).unwrap();
        let rep = cmd_check(&cfg, Some(&path)).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.status(CHECK_CERTIFICATE), Some(AuditStatus::Fail), "{rep}");
        assert_eq!(rep.status(CHECK_BILIP), Some(AuditStatus::Fail), "{rep}");
    }

    #[test]
    fn baseline_certificate_checks_not_applicable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        for kind in [ModelKind::SdMlp, ModelKind::SdIcnn] {
            let rep = audit_model(&cfg.build_model(kind, 0).unwrap(), &cfg, 0).unwrap();
            assert!(rep.passed(), "{rep}");
            assert_eq!(rep.status(CHECK_BILIP), Some(AuditStatus::NotApplicable));
            assert_eq!(rep.status(CHECK_PROJECTION), Some(AuditStatus::Pass));
        }
        let rep = audit_model(&cfg.build_model(ModelKind::Phs, 0).unwrap(), &cfg, 0).unwrap();
        assert!(rep.passed(), "{rep}");
        assert_eq!(rep.status(CHECK_PASSIVITY), Some(AuditStatus::Pass));
    }

    #[test]
    fn sweeps_write_grids_and_means() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { sweep_models: vec!["shnd".into(), "sd-mlp".into()], ..tiny(dir.path()) };
        let [raw, mean, meta] = cmd_sweep_datasize(&cfg).unwrap();
        let raw = std::fs::read_to_string(raw).unwrap();
        assert_eq!(raw.lines().count(), 1 + 2 * 2 * 2);
        assert!(raw.starts_with("model,train_size,seed,train_loss,test_loss\n"));
        assert_eq!(std::fs::read_to_string(mean).unwrap().lines().count(), 1 + 4);
        assert!(std::fs::read_to_string(meta).unwrap().contains("substitute"));

        let [raw, mean, _] = cmd_sweep_ratio(&cfg).unwrap();
        let raw = std::fs::read_to_string(raw).unwrap();
        assert!(raw.starts_with("model,nu,ratio,seed,train_loss,test_loss\n"));
        assert!(raw.lines().nth(1).unwrap().starts_with("shnd,0.5,5.0000000000000000e0,0,"));
        let mean = std::fs::read_to_string(mean).unwrap();
        assert_eq!(mean.lines().count(), 3);
    }

    #[test]
    fn comparison_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let kinds = [ModelKind::Shnd, ModelKind::SdIcnn];
        let a = write_comparison(&run_comparison(&cfg, &kinds, &[0, 1]).unwrap(), &dir.path().join("a")).unwrap();
        let b = write_comparison(&run_comparison(&cfg, &kinds, &[0, 1]).unwrap(), &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 8);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap(), "{}", pa.display());
        }
    }

    #[test]
    fn decay_ratio_of_a_curve() {
        assert_eq!(decay_ratio(&[0.0, 2.0, 1.0, 0.5]), 0.25);
    }
}
