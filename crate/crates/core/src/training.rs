//! Datasets, the mean-square field loss, Adam with a cosine schedule, and the
//! deterministic training loop.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Bindings, Graph, GradientProgram, NodeId};
use crate::error::{Error, Result};
use crate::model::{CompiledField, Model};
use crate::ode::{fmt17, write_file};
use crate::params::{ParamLeaves, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 1000;
pub const DEFAULT_BATCH_SIZE: usize = 200;
pub const DEFAULT_LR0: f64 = 0.01;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Samples `(x_i, v_i)` of a vector field, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub v: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, v: Tensor) -> Result<Self> {
        if x.shape() != v.shape() {
            return Err(Error::Shape(format!("states {:?} vs velocities {:?}", x.shape(), v.shape())));
        }
        Ok(Self { x, v })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let pick = |t: &Tensor| {
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(idx.len(), t.cols(), data).expect("row gather keeps shape")
        };
        (pick(&self.x), pick(&self.v))
    }

    fn header(&self) -> Vec<String> {
        let n = self.dim();
        if n == 4 {
            ["th1", "th2", "w1", "w2"].iter().map(|s| s.to_string()).chain((1..=4).map(|i| format!("v{i}"))).collect()
        } else {
            (1..=n).map(|i| format!("x{i}")).chain((1..=n).map(|i| format!("v{i}"))).collect()
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", self.header().join(","))?;
        for i in 0..self.len() {
            let cells: Vec<String> = self.x.row_slice(i).iter().chain(self.v.row_slice(i)).map(|v| fmt17(*v)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |w| self.write_csv(w))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines.next().transpose().map_err(|e| Error::io(path, e))?.unwrap_or_default();
        let cols = header.split(',').count();
        if cols < 2 || cols % 2 != 0 {
            return Err(Error::config(format!("{}: bad dataset header '{header}'", path.display())));
        }
        let n = cols / 2;
        let (mut xs, mut vs) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), k + 2)))?;
            if vals.len() != cols {
                return Err(Error::config(format!("{}:{}: expected {cols} fields", path.display(), k + 2)));
            }
            xs.extend_from_slice(&vals[..n]);
            vs.extend_from_slice(&vals[n..]);
        }
        let rows = xs.len() / n;
        Dataset::new(Tensor::new(rows, n, xs)?, Tensor::new(rows, n, vs)?)
    }
}

/// `n` states uniform on the box `[-h, h]` (per coordinate) and their
/// velocities under `field`.
pub fn gen_dataset<F>(field: F, n: usize, half_widths: &[f64], seed: u64, stream: Stream) -> Result<Dataset>
where
    F: Fn(&Tensor) -> Tensor,
{
    if n == 0 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    let mut r = rng::stream(seed, stream);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| rng::uniform_box(&mut r, half_widths)).collect();
    let x = Tensor::from_rows(&rows)?;
    let v = field(&x);
    Dataset::new(x, v)
}

/// Append `sum_i |v_i - f_i|^2 / rows`.
pub fn build_mse(g: &mut Graph, prediction: NodeId, target: NodeId) -> NodeId {
    let rows = g.shape(prediction)[0];
    let d = g.sub(prediction, target);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / rows as f64)
}

/// Mean squared residual of `prediction` against `target`.
pub fn mse(prediction: &Tensor, target: &Tensor) -> f64 {
    let d = prediction.sub(target);
    d.dot(&d) / prediction.rows() as f64
}

pub fn mse_loss(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("empty batch"));
    }
    Ok(mse(&model.field_batch(&data.x)?, &data.v))
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Bias-corrected Adam moments, in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (k, ((_, p), g)) in store.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let (mh, vh) = (*mi / c1, *vi / c2);
                *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
    state.step(store, grads, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Record elapsed milliseconds per epoch; otherwise the column is 0 so
    /// logs are reproducible byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: DEFAULT_EPOCHS, batch_size: DEFAULT_BATCH_SIZE, lr0: DEFAULT_LR0, seed: 0, log_wall_time: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn final_test_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_loss)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,test_loss,lr,wall_ms")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.epoch, fmt17(r.train_loss), fmt17(r.test_loss), fmt17(r.lr), r.wall_ms)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |w| self.write_csv(w))
    }
}

/// Loss-and-gradient graph for one minibatch size.
struct LossProgram {
    program: GradientProgram,
    x: NodeId,
    target: NodeId,
    leaves: ParamLeaves,
}

impl LossProgram {
    fn new(model: &Model, rows: usize) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.input("x", rows, model.dim());
        let target = g.input("v", rows, model.dim());
        let leaves = model.store().declare(&mut g);
        let velocity = model.build_velocity(&mut g, &leaves, x)?;
        let loss = build_mse(&mut g, velocity, target);
        let program = GradientProgram::new(g, loss, &leaves.ids())?;
        Ok(Self { program, x, target, leaves })
    }

    fn eval(&self, model: &Model, x: &Tensor, v: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let aux = model.aux_inputs();
        let mut b = Bindings::new().with(self.x, x).with(self.target, v);
        aux.bind(self.program.graph(), &mut b);
        self.leaves.bind(model.store(), &mut b)?;
        self.program.eval(&b)
    }
}

/// Full-batch loss with the field graph compiled once.
pub struct LossEvaluator {
    field: CompiledField,
}

impl LossEvaluator {
    pub fn new(model: &Model, rows: usize) -> Result<Self> {
        Ok(Self { field: model.compile(rows)? })
    }

    pub fn loss(&self, model: &Model, data: &Dataset) -> Result<f64> {
        Ok(mse(&self.field.eval(model, &data.x)?, &data.v))
    }
}

/// Loss value and parameter gradients on one batch (store order).
pub fn loss_and_gradient(model: &Model, x: &Tensor, v: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    LossProgram::new(model, x.rows())?.eval(model, x, v)
}

pub fn train(model: &mut Model, train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<History> {
    train_with(model, train_set, test_set, config, |_, _| Ok(()))
}

/// Train, calling `after_step(global_step, model)` after every optimizer step
/// (after the model has been refreshed).
pub fn train_with<F>(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut after_step: F,
) -> Result<History>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if config.batch_size > train_set.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds training set size {}",
            config.batch_size,
            train_set.len()
        )));
    }
    if !(config.lr0 >= 0.0 && config.lr0.is_finite()) {
        return Err(Error::config(format!("lr0 must be finite and >= 0, got {}", config.lr0)));
    }
    if test_set.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let n = train_set.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let mut adam = AdamState::new(model.store());
    let mut programs: HashMap<usize, LossProgram> = HashMap::new();
    let test_eval = LossEvaluator::new(model, test_set.len())?;
    let mut shuffle = rng::stream(config.seed, Stream::Shuffle);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = rng::permutation(&mut shuffle, n);
        let (mut weighted, mut lr) = (0.0, config.lr0);
        for chunk in order.chunks(config.batch_size) {
            let (x, v) = train_set.select(chunk);
            if !programs.contains_key(&chunk.len()) {
                programs.insert(chunk.len(), LossProgram::new(model, chunk.len())?);
            }
            let (loss, grads) = programs[&chunk.len()]
                .eval(model, &x, &v)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch} step {step}: loss is {loss}")));
            }
            lr = cosine_lr(step, total, config.lr0);
            adam.step(model.store_mut(), &grads, lr)?;
            model.refresh().map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            weighted += loss * chunk.len() as f64;
            step += 1;
            after_step(step, model)?;
        }
        let test_loss = test_eval
            .loss(model, test_set)
            .map_err(|e| Error::Numeric(format!("epoch {epoch} test evaluation: {e}")))?;
        let wall_ms = if config.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        history.records.push(EpochRecord { epoch, train_loss: weighted / n as f64, test_loss, lr, wall_ms });
    }
    Ok(history)
}
