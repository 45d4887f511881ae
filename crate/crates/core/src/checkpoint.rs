//! Model checkpoints: a text manifest followed by a little-endian f64 payload.
//!
//! ```text
//! SHND-CHECKPOINT v1
//! kind shnd
//! meta mu f:3fb999999999999a
//! meta g_hidden l:32,32
//! anchor point 0000000000000000,...
//! norm g.U1 3ff4...
//! tensor g.U1 32 4 0
//! end
//! <payload bytes>
//! ```
//!
//! Floats in the manifest are written as IEEE-754 bit patterns, so a
//! save/load cycle is bit-exact. Certified models keep the norms they were
//! certified with; loading does not recertify, so weights edited after
//! certification are caught by the audits rather than silently re-scaled.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::baselines::{Lyapunov, SdConfig, SdKind, SdModel};
use crate::bilip::{BiLipConfig, BiLipNet, Rescale};
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::model::{Model, ModelKind};
use crate::params::ParamStore;
use crate::plnet::Anchor;
use crate::shnd::{PhsConfig, PhsModel, ShndConfig, ShndModel};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SHND-CHECKPOINT v1";
const END: &[u8] = b"\nend\n";

enum Meta {
    F(f64),
    U(usize),
    L(Vec<usize>),
    S(String),
}

fn fmt_bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad float bits '{s}'")))
}

fn hidden(widths: &[usize]) -> Vec<usize> {
    widths[1..widths.len() - 1].to_vec()
}

fn activation_from(s: &str) -> Result<Activation> {
    [Activation::Tanh, Activation::SoftplusShifted, Activation::Softplus, Activation::Relu]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation '{s}'")))
}

fn shnd_meta(m: &ShndModel, meta: &mut Vec<(&'static str, Meta)>) {
    let c = &m.plnet.g.net.config;
    meta.push(("dim", Meta::U(c.dim)));
    meta.push(("mu", Meta::F(c.mu)));
    meta.push(("nu", Meta::F(c.nu)));
    meta.push(("g_hidden", Meta::L(c.hidden_widths.clone())));
    meta.push(("activation", Meta::S(c.activation.as_str().into())));
    meta.push(("rescale", Meta::S(c.rescale.as_str().into())));
    meta.push(("seed", Meta::U(c.seed as usize)));
    meta.push(("epsilon", Meta::F(m.epsilon())));
    meta.push(("jr_hidden", Meta::L(hidden(&m.jr.mlp.widths))));
}

/// Serialize `model` to bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut meta = Vec::new();
    match model {
        Model::Shnd(m) => shnd_meta(m, &mut meta),
        Model::Phs(m) => {
            shnd_meta(&m.shnd, &mut meta);
            meta.push(("input_dim", Meta::U(m.input_dim)));
            meta.push(("b_hidden", Meta::L(hidden(&m.b_net.widths))));
        }
        Model::Sd(m) => {
            meta.push(("dim", Meta::U(m.dim())));
            meta.push(("f_hidden", Meta::L(hidden(&m.f_hat.widths))));
            let (v_hidden, eps_v) = match &m.lyapunov {
                Lyapunov::Mlp(v) => (v.widths[1..].to_vec(), 0.0),
                Lyapunov::Icnn { icnn, eps_v } => (hidden(&icnn.widths), *eps_v),
            };
            meta.push(("v_hidden", Meta::L(v_hidden)));
            meta.push(("alpha", Meta::F(m.alpha)));
            meta.push(("grad_floor", Meta::F(m.grad_floor)));
            meta.push(("eps_v", Meta::F(eps_v)));
        }
    }

    let mut text = String::new();
    writeln!(text, "{MAGIC}").unwrap();
    writeln!(text, "kind {}", model.kind()).unwrap();
    for (key, value) in &meta {
        let v = match value {
            Meta::F(f) => format!("f:{}", fmt_bits(*f)),
            Meta::U(u) => format!("u:{u}"),
            Meta::L(l) => format!("l:{}", l.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            Meta::S(s) => format!("s:{s}"),
        };
        writeln!(text, "meta {key} {v}").unwrap();
    }
    if let Some(m) = model.shnd() {
        match &m.plnet.anchor {
            Anchor::KnownEquilibrium(x) => {
                let bits: Vec<String> = x.iter().map(|v| fmt_bits(*v)).collect();
                writeln!(text, "anchor point {}", bits.join(",")).unwrap();
            }
            Anchor::Free => writeln!(text, "anchor free").unwrap(),
        }
        for (name, sigma) in m.plnet.g.net.norms() {
            writeln!(text, "norm {name} {}", fmt_bits(sigma)).unwrap();
        }
    }
    let mut offset = 0;
    for (name, t) in model.store().iter() {
        writeln!(text, "tensor {name} {} {} {offset}", t.rows(), t.cols()).unwrap();
        offset += t.len() * 8;
    }
    text.push_str("end\n");

    let mut bytes = text.into_bytes();
    bytes.reserve(offset);
    for (_, t) in model.store().iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

struct Manifest {
    kind: ModelKind,
    meta: HashMap<String, String>,
    anchor: Option<Anchor>,
    norms: Vec<(String, f64)>,
    tensors: Vec<(String, usize, usize, usize)>,
}

impl Manifest {
    fn raw(&self, key: &str, tag: &str) -> Result<&str> {
        let v = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing meta '{key}'")))?;
        v.strip_prefix(tag)
            .and_then(|v| v.strip_prefix(':'))
            .ok_or_else(|| Error::Checkpoint(format!("meta '{key}' is not of type {tag}")))
    }

    fn f(&self, key: &str) -> Result<f64> {
        parse_bits(self.raw(key, "f")?)
    }

    fn u(&self, key: &str) -> Result<usize> {
        self.raw(key, "u")?.parse().map_err(|_| Error::Checkpoint(format!("bad integer for '{key}'")))
    }

    fn l(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key, "l")?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad list for '{key}'"))))
            .collect()
    }

    fn s(&self, key: &str) -> Result<&str> {
        self.raw(key, "s")
    }

    fn shnd_config(&self) -> Result<ShndConfig> {
        let bilip = BiLipConfig {
            activation: activation_from(self.s("activation")?)?,
            rescale: Rescale::parse(self.s("rescale")?)?,
            seed: self.u("seed")? as u64,
            ..BiLipConfig::new(self.u("dim")?, self.f("mu")?, self.f("nu")?, self.l("g_hidden")?)
        };
        Ok(ShndConfig {
            bilip,
            jr_hidden: self.l("jr_hidden")?,
            epsilon: self.f("epsilon")?,
            anchor: self.anchor.clone().ok_or_else(|| Error::Checkpoint("missing anchor record".into()))?,
        })
    }

    /// A model with the right layout; weights are overwritten afterwards.
    fn skeleton(&self) -> Result<Model> {
        Ok(match self.kind {
            ModelKind::Shnd => Model::Shnd(ShndModel::new(&self.shnd_config()?)?),
            ModelKind::Phs => Model::Phs(PhsModel::new(&PhsConfig {
                shnd: self.shnd_config()?,
                input_dim: self.u("input_dim")?,
                b_hidden: self.l("b_hidden")?,
            })?),
            ModelKind::SdMlp | ModelKind::SdIcnn => {
                let kind = if self.kind == ModelKind::SdMlp { SdKind::Mlp } else { SdKind::Icnn };
                Model::Sd(SdModel::new(&SdConfig {
                    kind,
                    dim: self.u("dim")?,
                    f_hidden: self.l("f_hidden")?,
                    v_hidden: self.l("v_hidden")?,
                    alpha: self.f("alpha")?,
                    grad_floor: self.f("grad_floor")?,
                    eps_v: self.f("eps_v")?,
                    seed: 0,
                })?)
            }
        })
    }
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let bad = |line: &str| Error::Checkpoint(format!("malformed line '{line}'"));
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint(format!("missing '{MAGIC}' header")));
    }
    let kind_line = lines.next().unwrap_or_default();
    let kind: ModelKind = kind_line.strip_prefix("kind ").ok_or_else(|| bad(kind_line))?.parse()?;
    let mut m = Manifest { kind, meta: HashMap::new(), anchor: None, norms: Vec::new(), tensors: Vec::new() };
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["meta", key, value] => {
                m.meta.insert(key.to_string(), value.to_string());
            }
            ["anchor", "free"] => m.anchor = Some(Anchor::Free),
            ["anchor", "point", xs] => {
                let x = xs.split(',').map(parse_bits).collect::<Result<Vec<_>>>()?;
                m.anchor = Some(Anchor::KnownEquilibrium(x));
            }
            ["norm", name, bits] => m.norms.push((name.to_string(), parse_bits(bits)?)),
            ["tensor", name, rows, cols, offset] => {
                let n = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
                m.tensors.push((name.to_string(), n(rows)?, n(cols)?, n(offset)?));
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(m)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Checkpoint("manifest has no 'end' line".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let payload = &bytes[split + END.len()..];
    let manifest = parse_manifest(text)?;
    let mut model = manifest.skeleton()?;

    let expected: Vec<(String, usize, usize)> =
        model.store().iter().map(|(n, t)| (n.to_string(), t.rows(), t.cols())).collect();
    let found: Vec<(String, usize, usize)> = manifest.tensors.iter().map(|(n, r, c, _)| (n.clone(), *r, *c)).collect();
    if expected != found {
        return Err(Error::Checkpoint(format!("tensor layout does not match a {} model", manifest.kind)));
    }
    let mut store = ParamStore::new();
    let mut end = 0;
    for (name, rows, cols, offset) in &manifest.tensors {
        let len = rows * cols * 8;
        let chunk = payload
            .get(*offset..offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for '{name}'")))?;
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        store.insert(name.clone(), Tensor::new(*rows, *cols, data)?);
        end = end.max(offset + len);
    }
    if end != payload.len() {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - end)));
    }
    *model.store_mut() = store;
    let shnd = match &mut model {
        Model::Shnd(m) => Some(m),
        Model::Phs(m) => Some(&mut m.shnd),
        Model::Sd(_) => None,
    };
    if let Some(m) = shnd {
        let g = &mut m.plnet.g;
        g.net.restore_norms(&manifest.norms, &g.store)?;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Layout names used by a bi-Lipschitz `Y` weight, for tooling that edits checkpoints.
pub fn y_weight_names(model: &Model) -> Vec<String> {
    match model.shnd() {
        Some(m) => (1..=m.plnet.g.net.layers()).map(BiLipNet::y_name).collect(),
        None => Vec::new(),
    }
}
