use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamSlot {
    fn fresh(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Named parameter tensors with their optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    params: BTreeMap<String, Tensor>,
    adam: BTreeMap<String, AdamSlot>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::InconsistentSpec(format!("duplicate parameter `{path}`")));
        }
        self.adam.insert(path.clone(), AdamSlot::fresh(value.len()));
        self.params.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn adam_slot(&self, path: &str) -> Option<&AdamSlot> {
        self.adam.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_out(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Writes the checkpoint entries of this tree with every path prefixed.
    pub fn write_into(&self, prefix: &str, ck: &mut Checkpoint) {
        for (path, t) in &self.params {
            let full = format!("{prefix}{path}");
            ck.names.push(CheckpointEntry {
                path: full.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
            ck.adam_state.insert(full, self.adam[path].clone());
        }
    }

    /// Collects the checkpoint entries under `prefix`, stripping it from the paths.
    pub fn read_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let mut tree = ParamTree::new();
        for e in &ck.names {
            let Some(rest) = e.path.strip_prefix(prefix) else { continue };
            let t = Tensor::new(e.shape.clone(), e.data.clone())?;
            tree.insert(rest, t)?;
            if let Some(slot) = ck.adam_state.get(&e.path) {
                if slot.m.len() != e.data.len() || slot.v.len() != e.data.len() {
                    return Err(Error::ShapeMismatch(format!("optimizer state for `{}`", e.path)));
                }
                tree.adam.insert(rest.to_string(), slot.clone());
            }
        }
        Ok(tree)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_into("", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_version()?;
        Self::read_from("", ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON document holding parameters and optimizer state, optionally with
/// extra model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub names: Vec<CheckpointEntry>,
    pub adam_state: BTreeMap<String, AdamSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            names: Vec::new(),
            adam_state: BTreeMap::new(),
            config: None,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        ck.check_version()?;
        Ok(ck)
    }
}

/// Adam with the default moments and bias correction.
pub fn adam_step(params: &mut ParamTree, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    adam_step_with(params, grads, lr, &AdamConfig::default())
}

/// One Adam update of every parameter; a parameter without a gradient is
/// treated as having a zero gradient.
pub fn adam_step_with(
    params: &mut ParamTree,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.params.get(name) {
            None => return Err(Error::ShapeMismatch(format!("gradient for unknown parameter `{name}`"))),
            Some(p) if p.shape() != g.shape() => {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    for (name, p) in params.params.iter_mut() {
        let slot = params.adam.get_mut(name).expect("slot per parameter");
        slot.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(slot.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(slot.step as i32);
        let g = grads.get(name).map(Tensor::data);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = if c1 > 0.0 { slot.m[i] / c1 } else { slot.m[i] };
            let v_hat = if c2 > 0.0 { slot.v[i] / c2 } else { slot.v[i] };
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
