//! Checkpoint files: one JSON document holding a format version, the run
//! configuration, the step count, every layer's parameter arrays in
//! declaration order and, for manifold models, the prior factor `A`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::prior::ManifoldPrior;
use crate::train::ExperimentConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Volume-preserving flow with a learned degenerate prior.
    Manifold,
    /// Flow with a fixed standard normal prior.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub step: usize,
    pub config: ExperimentConfig,
    pub flow: FlowModel,
    #[serde(default)]
    pub prior: Option<ManifoldPrior>,
}

impl Checkpoint {
    pub fn manifold(config: &ExperimentConfig, step: usize, flow: &FlowModel, prior: &ManifoldPrior) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Manifold,
            step,
            config: config.clone(),
            flow: flow.clone(),
            prior: Some(prior.clone()),
        }
    }

    pub fn baseline(config: &ExperimentConfig, step: usize, flow: &FlowModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Baseline,
            step,
            config: config.clone(),
            flow: flow.clone(),
            prior: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        self.flow.validate()?;
        match (self.kind, &self.prior) {
            (ModelKind::Manifold, Some(p)) => {
                p.validate()?;
                if p.dim() != self.flow.dim() {
                    return Err(Error::invalid(format!(
                        "prior dimension {} does not match flow dimension {}",
                        p.dim(),
                        self.flow.dim()
                    )));
                }
                Ok(())
            }
            (ModelKind::Manifold, None) => Err(Error::invalid("manifold checkpoint without a prior")),
            (ModelKind::Baseline, Some(_)) => Err(Error::invalid("baseline checkpoint carries a prior")),
            (ModelKind::Baseline, None) => Ok(()),
        }
    }

    pub fn prior(&self) -> Result<&ManifoldPrior> {
        self.prior
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint holds a fixed-prior baseline, not a manifold model"))
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::FormatVersion(v.min(u32::MAX as u64) as u32)),
            None => return Err(Error::invalid(format!("{}: missing format_version", path.display()))),
        }
        let ck: Self = serde_json::from_value(raw)?;
        ck.validate()?;
        Ok(ck)
    }
}
