//! Experiment configuration: a flat TOML table, every key optional.
//!
//! ```toml
//! model = "shnd"          # shnd | phs | sd-mlp | sd-icnn
//! seed = 0
//! seeds = [0, 1, 2]       # used by sweeps
//! out_dir = "out"
//! train_size = 2000
//! test_size = 500
//! epochs = 1000
//! batch_size = 200
//! lr0 = 0.01
//! mu = 0.1
//! nu = 2.0
//! epsilon = 0.01
//! ```
//!
//! Unknown keys are rejected. Command-line flags override file values, which
//! override the defaults below.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{SdConfig, SdKind, SdModel};
use crate::bilip::{BiLipConfig, Rescale};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::pendulum::PendulumParams;
use crate::plnet::Anchor;
use crate::shnd::{PhsConfig, PhsModel, ShndConfig, ShndModel};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,

    pub train_size: usize,
    pub test_size: usize,
    pub theta_max: f64,
    pub omega_max: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Record wall-clock milliseconds in the training log (breaks byte-identical reruns).
    pub log_wall_time: bool,

    pub mu: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub g_hidden: Vec<usize>,
    pub jr_hidden: Vec<usize>,
    /// `"origin"` anchors `H` at the known equilibrium `0`; `"free"` uses `0.5 |g(x)|^2`.
    pub anchor: String,
    pub rescale: String,
    pub input_dim: usize,
    pub b_hidden: Vec<usize>,

    pub sd_f_hidden: Vec<usize>,
    pub sd_v_hidden: Vec<usize>,
    pub sd_alpha: f64,
    pub sd_grad_floor: f64,
    pub sd_eps_v: f64,

    pub pendulum: PendulumParams,

    pub sim_batch: usize,
    pub sim_theta_max: f64,
    pub dt: f64,
    pub horizon: f64,

    pub sweep_sizes: Vec<usize>,
    pub sweep_nus: Vec<f64>,
    /// Models compared by the data-size sweep.
    pub sweep_models: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "shnd".into(),
            seed: 0,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            train_size: 2000,
            test_size: 500,
            theta_max: PI,
            omega_max: PI,
            epochs: crate::training::DEFAULT_EPOCHS,
            batch_size: crate::training::DEFAULT_BATCH_SIZE,
            lr0: crate::training::DEFAULT_LR0,
            log_wall_time: false,
            mu: 0.1,
            nu: 2.0,
            epsilon: crate::shnd::DEFAULT_EPSILON,
            g_hidden: vec![32, 32],
            jr_hidden: vec![90, 90],
            anchor: "origin".into(),
            rescale: Rescale::default().as_str().into(),
            input_dim: 2,
            b_hidden: vec![32],
            sd_f_hidden: vec![100, 100],
            sd_v_hidden: vec![64, 64],
            sd_alpha: crate::baselines::DEFAULT_ALPHA,
            sd_grad_floor: crate::baselines::DEFAULT_GRAD_FLOOR,
            sd_eps_v: crate::baselines::DEFAULT_EPS_V,
            pendulum: PendulumParams::default(),
            sim_batch: 100,
            sim_theta_max: PI / 2.0,
            dt: crate::ode::DEFAULT_DT,
            horizon: crate::ode::DEFAULT_T_END,
            sweep_sizes: vec![250, 500, 1000, 2000],
            sweep_nus: vec![0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
            sweep_models: vec!["shnd".into(), "sd-mlp".into(), "sd-icnn".into()],
        }
    }
}

/// Values given on the command line; `None` keeps the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Also replaces `sweep_models` with `[model]`.
    pub model: Option<String>,
    /// Also replaces `seeds` with `[seed]`.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub epochs: Option<usize>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// File (if any) then overrides, validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.model {
            self.model = m.clone();
            self.sweep_models = vec![m.clone()];
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.seeds = vec![s];
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(n) = o.train_size {
            self.train_size = n;
        }
        if let Some(n) = o.test_size {
            self.test_size = n;
        }
        if let Some(n) = o.epochs {
            self.epochs = n;
        }
        if let Some(h) = o.horizon {
            self.horizon = h;
        }
        if let Some(dt) = o.dt {
            self.dt = dt;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        self.rescale_mode()?;
        self.anchor_mode()?;
        self.pendulum.validate()?;
        let positive = [
            ("train_size", self.train_size),
            ("test_size", self.test_size),
            ("batch_size", self.batch_size),
            ("input_dim", self.input_dim),
            ("sim_batch", self.sim_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let finite_positive = [
            ("theta_max", self.theta_max),
            ("omega_max", self.omega_max),
            ("lr0", self.lr0),
            ("sim_theta_max", self.sim_theta_max),
            ("dt", self.dt),
            ("horizon", self.horizon),
            ("sd_alpha", self.sd_alpha),
            ("sd_grad_floor", self.sd_grad_floor),
        ];
        for (name, v) in finite_positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        self.sweep_kinds()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.sweep_sizes.contains(&0) {
            return Err(Error::config("sweep_sizes must be positive"));
        }
        if self.sweep_nus.iter().any(|&nu| nu < self.mu) {
            return Err(Error::config("every sweep_nus entry must be >= mu"));
        }
        self.bilip(self.nu, self.seed).validate()
    }

    pub fn kind(&self) -> Result<ModelKind> {
        self.model.parse()
    }

    pub fn sweep_kinds(&self) -> Result<Vec<ModelKind>> {
        if self.sweep_models.is_empty() {
            return Err(Error::config("sweep_models must not be empty"));
        }
        self.sweep_models.iter().map(|m| m.parse()).collect()
    }

    pub fn rescale_mode(&self) -> Result<Rescale> {
        Rescale::parse(&self.rescale)
    }

    pub fn anchor_mode(&self) -> Result<Anchor> {
        match self.anchor.as_str() {
            "origin" => Ok(Anchor::KnownEquilibrium(vec![0.0; 4])),
            "free" => Ok(Anchor::Free),
            other => Err(Error::config(format!("unknown anchor '{other}' (expected origin or free)"))),
        }
    }

    /// Half-widths of the training-data box `[th1, th2, w1, w2]`.
    pub fn data_box(&self) -> [f64; 4] {
        [self.theta_max, self.theta_max, self.omega_max, self.omega_max]
    }

    fn bilip(&self, nu: f64, seed: u64) -> BiLipConfig {
        BiLipConfig {
            rescale: Rescale::parse(&self.rescale).unwrap_or_default(),
            seed,
            ..BiLipConfig::new(4, self.mu, nu, self.g_hidden.clone())
        }
    }

    pub fn shnd_config(&self, nu: f64, seed: u64) -> Result<ShndConfig> {
        Ok(ShndConfig {
            bilip: self.bilip(nu, seed),
            jr_hidden: self.jr_hidden.clone(),
            epsilon: self.epsilon,
            anchor: self.anchor_mode()?,
        })
    }

    pub fn sd_config(&self, kind: SdKind, seed: u64) -> SdConfig {
        SdConfig {
            kind,
            dim: 4,
            f_hidden: self.sd_f_hidden.clone(),
            v_hidden: self.sd_v_hidden.clone(),
            alpha: self.sd_alpha,
            grad_floor: self.sd_grad_floor,
            eps_v: self.sd_eps_v,
            seed,
        }
    }

    /// Fresh model of the given kind, with `nu` overriding the configured value.
    pub fn build_model_with_nu(&self, kind: ModelKind, nu: f64, seed: u64) -> Result<Model> {
        Ok(match kind {
            ModelKind::Shnd => Model::Shnd(ShndModel::new(&self.shnd_config(nu, seed)?)?),
            ModelKind::Phs => Model::Phs(PhsModel::new(&PhsConfig {
                shnd: self.shnd_config(nu, seed)?,
                input_dim: self.input_dim,
                b_hidden: self.b_hidden.clone(),
            })?),
            ModelKind::SdMlp => Model::Sd(SdModel::new(&self.sd_config(SdKind::Mlp, seed))?),
            ModelKind::SdIcnn => Model::Sd(SdModel::new(&self.sd_config(SdKind::Icnn, seed))?),
        })
    }

    pub fn build_model(&self, kind: ModelKind, seed: u64) -> Result<Model> {
        self.build_model_with_nu(kind, self.nu, seed)
    }

    pub fn train_config(&self, seed: u64, train_len: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size.min(train_len),
            lr0: self.lr0,
            seed,
            log_wall_time: self.log_wall_time,
        }
    }
}
