//! One handle over every learnable vector field, plus a compiled batch
//! evaluator that builds the field graph once per batch size.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::baselines::{SdKind, SdModel};
use crate::error::{Error, Result};
use crate::params::{AuxInputs, ParamLeaves, ParamStore};
use crate::shnd::{PhsModel, ShndModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Shnd,
    Phs,
    SdMlp,
    SdIcnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Shnd, ModelKind::Phs, ModelKind::SdMlp, ModelKind::SdIcnn];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Shnd => "shnd",
            ModelKind::Phs => "phs",
            ModelKind::SdMlp => "sd-mlp",
            ModelKind::SdIcnn => "sd-icnn",
        }
    }

    pub fn is_certified(self) -> bool {
        matches!(self, ModelKind::Shnd | ModelKind::Phs)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind '{s}' (expected shnd, phs, sd-mlp or sd-icnn)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Shnd(ShndModel),
    /// Trained and simulated with zero input.
    Phs(PhsModel),
    Sd(SdModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Shnd(_) => ModelKind::Shnd,
            Model::Phs(_) => ModelKind::Phs,
            Model::Sd(m) => match m.kind() {
                SdKind::Mlp => ModelKind::SdMlp,
                SdKind::Icnn => ModelKind::SdIcnn,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Shnd(m) => m.dim(),
            Model::Phs(m) => m.dim(),
            Model::Sd(m) => m.dim(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Shnd(m) => m.store(),
            Model::Phs(m) => m.shnd.store(),
            Model::Sd(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Shnd(m) => m.store_mut(),
            Model::Phs(m) => m.shnd.store_mut(),
            Model::Sd(m) => &mut m.store,
        }
    }

    pub fn shnd(&self) -> Option<&ShndModel> {
        match self {
            Model::Shnd(m) => Some(m),
            Model::Phs(m) => Some(&m.shnd),
            Model::Sd(_) => None,
        }
    }

    /// Re-derive quantities that depend on the weights but are not trained.
    pub fn refresh(&mut self) -> Result<()> {
        match self {
            Model::Shnd(m) => m.refresh(),
            Model::Phs(m) => m.shnd.refresh(),
            Model::Sd(_) => Ok(()),
        }
    }

    pub fn aux_inputs(&self) -> AuxInputs {
        self.shnd().map(|m| m.aux_inputs()).unwrap_or_default()
    }

    /// The model's equilibrium: `x*` for SHND models, the origin otherwise.
    pub fn equilibrium(&self) -> Result<Vec<f64>> {
        match self.shnd() {
            Some(m) => m.plnet.equilibrium(),
            None => Ok(vec![0.0; self.dim()]),
        }
    }

    pub fn build_velocity(&self, g: &mut Graph, p: &ParamLeaves, x: NodeId) -> Result<NodeId> {
        match self {
            Model::Shnd(m) => Ok(m.build_field(g, p, x)?.velocity),
            Model::Phs(m) => {
                let rows = g.shape(x)[0];
                let u = g.constant(Tensor::zeros(rows, m.input_dim));
                Ok(m.build(g, p, x, u)?.velocity)
            }
            Model::Sd(m) => Ok(m.build_field(g, p, x)?.velocity),
        }
    }

    pub fn compile(&self, rows: usize) -> Result<CompiledField> {
        CompiledField::new(self, rows)
    }

    pub fn field_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.compile(x.rows())?.eval(self, x)
    }

    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.field_batch(&Tensor::row(x))?.into_data())
    }
}

/// A model's batch field graph for a fixed number of rows.
#[derive(Debug, Clone)]
pub struct CompiledField {
    graph: Graph,
    x: NodeId,
    velocity: NodeId,
    leaves: ParamLeaves,
    rows: usize,
}

impl CompiledField {
    pub fn new(model: &Model, rows: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let x = graph.input("x", rows, model.dim());
        let leaves = model.store().declare(&mut graph);
        let velocity = model.build_velocity(&mut graph, &leaves, x)?;
        graph.validate()?;
        Ok(Self { graph, x, velocity, leaves, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Evaluate with the model's current weights (which may have changed
    /// since compilation, as long as the layout did not).
    pub fn eval(&self, model: &Model, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.rows, model.dim()] {
            return Err(Error::Shape(format!("field compiled for {}x{}, got {:?}", self.rows, model.dim(), x.shape())));
        }
        let aux = model.aux_inputs();
        let mut b = Bindings::new().with(self.x, x);
        aux.bind(&self.graph, &mut b);
        self.leaves.bind(model.store(), &mut b)?;
        Ok(self.graph.evaluate(&b, &[self.velocity])?.take(self.velocity))
    }
}
