//! Fixed-step RK4, batch simulation, trajectory error metrics and audits.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_T_END: f64 = 20.0;
/// Relative slack on the exponential bound, for integration error.
pub const STABILITY_SLACK: f64 = 1e-6;
/// Absolute slack on per-step Hamiltonian increases, before the `C dt^5` term.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// States on a uniform time grid starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// `t,x1,...,xn`, 17 significant digits.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, s) in self.states.iter().enumerate() {
            write!(w, "{}", fmt17(self.time(k)))?;
            for v in s {
                write!(w, ",{}", fmt17(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |w| self.write_csv(w))
    }
}

pub(crate) fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Shortest-roundtrip-safe decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Number of steps to cover `[0, t_end]`: `ceil(t_end / dt)`, ignoring
/// round-off just above an integer.
pub fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::config(format!("t_end must be >= 0, got {t_end}")));
    }
    let r = t_end / dt;
    Ok((r - 1e-9 * r.max(1.0)).ceil().max(0.0) as usize)
}

fn check_stage(v: &[f64], stage: usize, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite RK4 stage {stage} at step {step}")))
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn rk4_combine(x: &[f64], dt: f64, k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

fn rk4_step_at<F>(field: &F, x: &[f64], dt: f64, step: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = field(x)?;
    check_stage(&k1, 1, step)?;
    let k2 = field(&axpy(x, 0.5 * dt, &k1))?;
    check_stage(&k2, 2, step)?;
    let k3 = field(&axpy(x, 0.5 * dt, &k2))?;
    check_stage(&k3, 3, step)?;
    let k4 = field(&axpy(x, dt, &k3))?;
    check_stage(&k4, 4, step)?;
    Ok(rk4_combine(x, dt, &k1, &k2, &k3, &k4))
}

pub fn rk4_step<F>(field: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::config(format!("dt must be positive, got {dt}")));
    }
    rk4_step_at(&field, x, dt, 0)
}

pub fn simulate<F>(field: F, x0: &[f64], dt: f64, t_end: f64) -> Result<Trajectory>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let steps = step_count(dt, t_end)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for k in 0..steps {
        let next = rk4_step_at(&field, &states[k], dt, k)?;
        states.push(next);
    }
    Ok(Trajectory { t0: 0.0, dt, states })
}

fn check_batch_stage(t: &Tensor, stage: usize, step: usize) -> Result<()> {
    check_stage(t.data(), stage, step)
}

/// One RK4 step for every row of `x`, with one field call per stage.
pub fn rk4_step_batch<F>(field: &F, x: &Tensor, dt: f64, step: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let shift = |base: &Tensor, k: &Tensor, a: f64| base.zip_map(k, |b, v| b + a * v);
    let k1 = field(x)?;
    check_batch_stage(&k1, 1, step)?;
    let k2 = field(&shift(x, &k1, 0.5 * dt))?;
    check_batch_stage(&k2, 2, step)?;
    let k3 = field(&shift(x, &k2, 0.5 * dt))?;
    check_batch_stage(&k3, 3, step)?;
    let k4 = field(&shift(x, &k3, dt))?;
    check_batch_stage(&k4, 4, step)?;
    let data = rk4_combine(x.data(), dt, k1.data(), k2.data(), k3.data(), k4.data());
    Tensor::new(x.rows(), x.cols(), data)
}

/// Simulate every row of `x0`; returns the state batch at each grid point.
pub fn simulate_batch<F>(field: F, x0: &Tensor, dt: f64, t_end: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let steps = step_count(dt, t_end)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    for k in 0..steps {
        let next = rk4_step_batch(&field, &out[k], dt, k)?;
        out.push(next);
    }
    Ok(out)
}

/// Split a batch simulation into per-member trajectories.
pub fn unbatch(states: &[Tensor], dt: f64) -> Vec<Trajectory> {
    let rows = states.first().map_or(0, Tensor::rows);
    (0..rows)
        .map(|i| Trajectory { t0: 0.0, dt, states: states.iter().map(|s| s.row_slice(i).to_vec()).collect() })
        .collect()
}

/// Per-step batch error statistics between two simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub dt: f64,
    pub mean_err: Vec<f64>,
    pub max_err: Vec<f64>,
    /// Stability-bound violations, when audited.
    pub violations: usize,
}

impl SimReport {
    pub fn from_states(a: &[Tensor], b: &[Tensor], dt: f64) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Shape(format!("trajectory lengths {} and {}", a.len(), b.len())));
        }
        let mut mean_err = Vec::with_capacity(a.len());
        let mut max_err = Vec::with_capacity(a.len());
        for (sa, sb) in a.iter().zip(b) {
            if sa.shape() != sb.shape() || sa.rows() == 0 {
                return Err(Error::Shape(format!("batch shapes {:?} and {:?}", sa.shape(), sb.shape())));
            }
            let errs: Vec<f64> = (0..sa.rows()).map(|i| tensor::distance(sa.row_slice(i), sb.row_slice(i))).collect();
            mean_err.push(errs.iter().sum::<f64>() / errs.len() as f64);
            max_err.push(errs.iter().copied().fold(0.0, f64::max));
        }
        Ok(Self { dt, mean_err, max_err, violations: 0 })
    }

    pub fn final_mean(&self) -> f64 {
        *self.mean_err.last().expect("nonempty report")
    }

    pub fn peak_mean(&self) -> f64 {
        self.mean_err.iter().copied().fold(0.0, f64::max)
    }

    /// `t,mean_err,max_err`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,mean_err,max_err")?;
        for (k, (m, x)) in self.mean_err.iter().zip(&self.max_err).enumerate() {
            writeln!(w, "{},{},{}", fmt17(k as f64 * self.dt), fmt17(*m), fmt17(*x))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |w| self.write_csv(w))
    }
}

pub fn batch_sim_error<A, B>(field_a: A, field_b: B, initial_states: &Tensor, dt: f64, t_end: f64) -> Result<SimReport>
where
    A: Fn(&Tensor) -> Result<Tensor>,
    B: Fn(&Tensor) -> Result<Tensor>,
{
    if initial_states.rows() == 0 {
        return Err(Error::config("empty initial-state batch"));
    }
    let a = simulate_batch(field_a, initial_states, dt, t_end)?;
    let b = simulate_batch(field_b, initial_states, dt, t_end)?;
    SimReport::from_states(&a, &b, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StabilityAudit {
    /// Steps with `|x(t) - x*| > kappa e^{-lambda t} |x(0) - x*| (1 + slack)`.
    pub exponential: usize,
    /// Steps with `|x(t) - x*| > kappa |x(0) - x*| (1 + slack)`.
    pub containment: usize,
}

impl StabilityAudit {
    pub fn total(&self) -> usize {
        self.exponential + self.containment
    }
}

pub fn audit_stability(traj: &Trajectory, x_star: &[f64], kappa: f64, lambda: f64) -> StabilityAudit {
    let mut audit = StabilityAudit::default();
    let Some(first) = traj.states.first() else { return audit };
    let r0 = tensor::distance(first, x_star);
    for (k, s) in traj.states.iter().enumerate() {
        let r = tensor::distance(s, x_star);
        let bound = kappa * r0 * (1.0 + STABILITY_SLACK);
        if r > bound * (-lambda * traj.time(k)).exp() {
            audit.exponential += 1;
        }
        if r > bound {
            audit.containment += 1;
        }
    }
    audit
}

/// Local-error constant `C` with `|err| ~ C dt^5` for a scalar observable of
/// one RK4 step, from a single Richardson comparison (one step of `dt` against
/// two of `dt / 2`). Returns the largest value over the rows of `x0`.
pub fn richardson_constant<F, H>(field: &F, observe: &H, x0: &Tensor, dt: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    H: Fn(&Tensor) -> Result<Vec<f64>>,
{
    let coarse = rk4_step_batch(field, x0, dt, 0)?;
    let half = rk4_step_batch(field, x0, 0.5 * dt, 0)?;
    let fine = rk4_step_batch(field, &half, 0.5 * dt, 1)?;
    let (hc, hf) = (observe(&coarse)?, observe(&fine)?);
    let worst = hc.iter().zip(&hf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(worst * 16.0 / 15.0 / dt.powi(5))
}

/// Steps where `h[k+1] > h[k] + MONOTONE_SLACK + c dt^5`.
pub fn monotone_violations(h: &[f64], c: f64, dt: f64) -> usize {
    let slack = MONOTONE_SLACK + c * dt.powi(5);
    h.windows(2).filter(|w| w[1] > w[0] + slack).count()
}

/// Least-squares slope of `log err` against `log dt`.
pub fn convergence_order(dts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Empirical RK4 order on `x' = -x` over `[0, 1]`.
pub fn rk4_order_on_linear_decay() -> Result<f64> {
    let dts = [0.1, 0.05, 0.025, 0.0125];
    let mut errs = Vec::new();
    for &dt in &dts {
        let traj = simulate(|x: &[f64]| Ok(vec![-x[0]]), &[1.0], dt, 1.0)?;
        errs.push((traj.last()[0] - (-1.0_f64).exp()).abs());
    }
    Ok(convergence_order(&dts, &errs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| -v).collect())
    }

    #[test]
    fn zero_field_freezes_state() {
        let x = [1.5, -2.0];
        assert_eq!(rk4_step(|x: &[f64]| Ok(vec![0.0; x.len()]), &x, 0.1).unwrap(), x.to_vec());
    }

    #[test]
    fn one_step_matches_taylor_polynomial() {
        let dt: f64 = 0.01;
        let expect = 1.0 - dt + dt.powi(2) / 2.0 - dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
        let x = rk4_step(decay, &[1.0], dt).unwrap()[0];
        assert!((x - expect).abs() < 1e-15);
        assert!((x - 0.9900498337).abs() < 1e-10);
    }

    #[test]
    fn fourth_order_convergence() {
        let p = rk4_order_on_linear_decay().unwrap();
        assert!((3.9..=4.1).contains(&p), "{p}");
    }

    #[test]
    fn linear_decay_closed_form() {
        let traj = simulate(decay, &[1.0], 0.01, 10.0).unwrap();
        assert_eq!(traj.len(), 1001);
        for (k, s) in traj.states.iter().enumerate() {
            assert!((s[0] - (-traj.time(k)).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn step_count_rounds_up() {
        assert_eq!(step_count(0.01, 20.0).unwrap(), 2000);
        assert_eq!(step_count(0.3, 1.0).unwrap(), 4);
        assert_eq!(step_count(0.1, 0.0).unwrap(), 0);
        assert!(step_count(0.0, 1.0).is_err());
        assert!(step_count(0.1, -1.0).is_err());
    }

    #[test]
    fn nonfinite_stage_reports_step() {
        let blowup = |x: &[f64]| Ok(vec![if x[0] > 1.05 { f64::NAN } else { 1.0 }]);
        let err = simulate(blowup, &[1.0], 0.01, 1.0).unwrap_err().to_string();
        assert!(err.contains("step 5"), "{err}");
    }

    #[test]
    fn batch_agrees_with_pointwise() {
        let field = |x: &[f64]| Ok(vec![x[1], -x[0].sin() - 0.3 * x[1]]);
        let x0 = Tensor::from_rows(&[vec![1.0, 0.0], vec![-0.5, 2.0]]).unwrap();
        let batch = simulate_batch(
            |t: &Tensor| {
                let rows: Vec<Vec<f64>> = t.row_iter().map(|r| field(r).unwrap()).collect();
                Tensor::from_rows(&rows)
            },
            &x0,
            0.01,
            2.0,
        )
        .unwrap();
        let trajs = unbatch(&batch, 0.01);
        for (i, traj) in trajs.iter().enumerate() {
            assert_eq!(traj, &simulate(field, x0.row_slice(i), 0.01, 2.0).unwrap());
        }
    }

    #[test]
    fn identical_fields_have_zero_error() {
        let f = |t: &Tensor| Ok(t.scale(-1.0));
        let x0 = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let r = batch_sim_error(f, f, &x0, 0.1, 1.0).unwrap();
        assert!(r.mean_err.iter().chain(&r.max_err).all(|e| *e == 0.0));
        assert!(batch_sim_error(f, f, &Tensor::zeros(0, 1), 0.1, 1.0).is_err());
    }

    #[test]
    fn errors_are_permutation_invariant() {
        let fa = |t: &Tensor| Ok(t.scale(-1.0));
        let fb = |t: &Tensor| Ok(t.scale(-1.2));
        let x0 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![-2.0, 1.0]]).unwrap();
        let xp = Tensor::from_rows(&[vec![-2.0, 1.0], vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let a = batch_sim_error(fa, fb, &x0, 0.1, 1.0).unwrap();
        let b = batch_sim_error(fa, fb, &xp, 0.1, 1.0).unwrap();
        assert_eq!(a.max_err, b.max_err);
        for (x, y) in a.mean_err.iter().zip(&b.mean_err) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn stability_audit_cases() {
        let frozen = Trajectory { t0: 0.0, dt: 0.1, states: vec![vec![0.0, 0.0]; 5] };
        assert_eq!(audit_stability(&frozen, &[0.0, 0.0], 20.0, 1e-4).total(), 0);
        let decay_traj = simulate(decay, &[1.0, -1.0], 0.01, 5.0).unwrap();
        assert_eq!(audit_stability(&decay_traj, &[0.0, 0.0], 1.0, 1.0).total(), 0);
        assert!(audit_stability(&decay_traj, &[0.0, 0.0], 1.0, 1.5).exponential > 0);
        let grow = Trajectory { t0: 0.0, dt: 1.0, states: vec![vec![1.0], vec![1.5], vec![3.0]] };
        let a = audit_stability(&grow, &[0.0], 2.0, 0.0);
        assert_eq!(a, StabilityAudit { exponential: 1, containment: 1 });
    }

    #[test]
    fn monotone_audit() {
        assert_eq!(monotone_violations(&[3.0, 2.0, 2.0, 1.0], 0.0, 0.01), 0);
        assert_eq!(monotone_violations(&[3.0, 3.1, 1.0], 0.0, 0.01), 1);
        assert_eq!(monotone_violations(&[1.0, 1.0 + 1e-10], 0.0, 0.01), 0);
    }

    #[test]
    fn richardson_constant_for_linear_decay() {
        // local error of RK4 on x' = -x is x dt^5 / 120
        let x0 = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let c = richardson_constant(&|t: &Tensor| Ok(t.scale(-1.0)), &|t: &Tensor| Ok(t.data().to_vec()), &x0, 0.1)
            .unwrap();
        assert!((c - 2.0 / 120.0).abs() < 0.1 * 2.0 / 120.0, "{c}");
    }

    #[test]
    fn csv_formats() {
        let traj = Trajectory { t0: 0.0, dt: 0.5, states: vec![vec![1.0, 0.1], vec![0.5, 0.2]] };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,x1,x2");
        let v: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(v, vec![0.0, 1.0, 0.1]);
        let rep = SimReport { dt: 0.5, mean_err: vec![0.0, 1.0], max_err: vec![0.0, 2.0], violations: 0 };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,mean_err,max_err\n"));
    }
}
