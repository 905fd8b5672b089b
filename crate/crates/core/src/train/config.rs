use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowSpec, LayerSpec, Mask};
use crate::objective::ObjectiveMode;
use crate::prior::DEFAULT_SIGMA_Z;

fn default_sigma_z() -> f64 {
    DEFAULT_SIGMA_Z
}

fn default_metrics_interval() -> usize {
    100
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub flow: FlowSpec,
    #[serde(default)]
    pub mode: ObjectiveMode,
    #[serde(default = "default_sigma_z")]
    pub sigma_z: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: Schedule,
    /// L2 decay on flow weights only; the prior factor is never decayed.
    #[serde(default)]
    pub weight_decay: f64,
    /// Data smoothing noise; absent means none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x: Option<Schedule>,
    /// Global gradient norm clip; absent means off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Iterations between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default = "default_metrics_interval")]
    pub metrics_interval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let d = self.dataset.dim();
        if self.flow.dim != d {
            return Err(Error::config(
                "flow.dim",
                format!("flow width {} does not match dataset dimension {d}", self.flow.dim),
            ));
        }
        self.flow
            .build(&mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::config("flow.layers", e.to_string()))?;
        if !(self.sigma_z > 0.0) || !self.sigma_z.is_finite() {
            return Err(Error::config("sigma_z", format!("must be positive, got {}", self.sigma_z)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        self.lr.validate("lr")?;
        if !(self.lr.base > 0.0) {
            return Err(Error::config("lr", "base learning rate must be positive"));
        }
        if let Some(f) = self.lr.floor {
            if !(f > 0.0) {
                return Err(Error::config("lr", "learning rate floor must be positive"));
            }
        }
        if let Some(s) = &self.sigma_x {
            s.validate("sigma_x")?;
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config(
                "weight_decay",
                format!("must be finite and non-negative, got {}", self.weight_decay),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", format!("must be positive, got {c}")));
            }
        }
        if self.metrics_interval == 0 {
            return Err(Error::config("metrics_interval", "must be at least 1"));
        }
        Ok(())
    }

    /// Named configuration; see [`PRESETS`].
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let hidden = [24, 24, 24];
        let toy = |kind: DatasetKind, name: &str| Self {
            name: name.into(),
            seed,
            dataset: DatasetSpec::new(kind, 20_000, seed),
            flow: FlowSpec::alternating(2, 2, 1, &hidden),
            mode: ObjectiveMode::UpperBound,
            sigma_z: DEFAULT_SIGMA_Z,
            iterations: 10_000,
            batch_size: 100,
            lr: Schedule::constant(3e-4),
            weight_decay: 0.0,
            sigma_x: None,
            grad_clip: None,
            checkpoint_interval: 0,
            metrics_interval: 100,
            out_dir: None,
        };
        let cfg = match name {
            "toy-sin" => toy(DatasetKind::Sin2d, name),
            "toy-line" => toy(DatasetKind::Line2d, name),
            "s-curve" => Self {
                dataset: DatasetSpec::new(DatasetKind::Scurve3d, 20_000, seed),
                flow: FlowSpec::alternating(3, 6, 1, &hidden),
                iterations: 50_000,
                batch_size: 500,
                lr: Schedule::step_decay(5e-4, 0.9, 10_000),
                ..toy(DatasetKind::Scurve3d, name)
            },
            "fading-squares-16" => fading_squares(name, seed, 16, 4, 5_000),
            "fading-squares-32" => fading_squares(name, seed, 32, 6, 20_000),
            _ => match name.strip_prefix("known-rank-").map(str::parse::<usize>) {
                Some(Ok(rank)) if (1..=8).contains(&rank) => Self {
                    dataset: DatasetSpec::new(DatasetKind::KnownRankFlow { dim: 8, rank }, 20_000, seed),
                    flow: FlowSpec::alternating(8, 4, 4, &hidden),
                    sigma_z: 1e-2,
                    lr: Schedule::step_decay(1e-3, 0.9, 1_000),
                    // keeps the couplings from contracting the manifold
                    weight_decay: 1.0,
                    ..toy(DatasetKind::Sin2d, name)
                },
                _ => {
                    return Err(Error::config(
                        "preset",
                        format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")),
                    ))
                }
            },
        };
        Ok(cfg)
    }
}

/// Names accepted by [`ExperimentConfig::preset`]; `known-rank-K` takes any K in 1..=8.
pub const PRESETS: &[&str] = &[
    "toy-sin",
    "toy-line",
    "s-curve",
    "fading-squares-16",
    "fading-squares-32",
    "known-rank-1",
    "known-rank-2",
    "known-rank-4",
];

/// Squeeze, two couplings, squeeze, two couplings, flatten, two couplings.
/// Channel permutations follow every coupling block except the last.
fn fading_squares_flow(image: usize) -> FlowSpec {
    let hidden = vec![24, 24, 24];
    let d = image * image;
    let coupling = |flip: bool| LayerSpec::Coupling {
        mask: Mask::new(d / 2, flip),
        hidden: hidden.clone(),
    };
    let layers = vec![
        LayerSpec::Squeeze {
            channels: 1,
            height: image,
            width: image,
        },
        coupling(false),
        LayerSpec::Permutation { channels: Some(4) },
        coupling(true),
        LayerSpec::Permutation { channels: Some(4) },
        LayerSpec::Squeeze {
            channels: 4,
            height: image / 2,
            width: image / 2,
        },
        coupling(false),
        LayerSpec::Permutation { channels: Some(16) },
        coupling(true),
        LayerSpec::Permutation { channels: Some(16) },
        LayerSpec::Flatten,
        coupling(false),
        LayerSpec::Permutation { channels: None },
        coupling(true),
    ];
    FlowSpec {
        dim: d,
        layers,
        volume_preserving: true,
        slope: crate::flow::DEFAULT_SLOPE,
    }
}

fn fading_squares(
    name: &str,
    seed: u64,
    image: usize,
    square: usize,
    iterations: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed,
        dataset: DatasetSpec::new(
            DatasetKind::FadingSquares {
                image_size: image,
                square_size: square,
            },
            10_000,
            seed,
        ),
        flow: fading_squares_flow(image),
        mode: ObjectiveMode::UpperBound,
        // at 1e-4 the ill-conditioned noisy covariance stalls A in 256+ dimensions
        sigma_z: 5e-2,
        iterations,
        batch_size: 100,
        lr: Schedule::step_decay(5e-4, 0.9, 1_000),
        weight_decay: 0.1,
        sigma_x: None,
        grad_clip: None,
        checkpoint_interval: 0,
        metrics_interval: 100,
        out_dir: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name, 1).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::preset("s-curve", 3).unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn mismatched_dims_name_the_field() {
        let mut cfg = ExperimentConfig::preset("toy-sin", 0).unwrap();
        cfg.flow = FlowSpec::alternating(3, 2, 1, &[8]);
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "flow.dim"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::preset("toy-sin", 0).unwrap().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn unknown_preset() {
        assert!(ExperimentConfig::preset("mnist", 0).is_err());
        assert!(ExperimentConfig::preset("known-rank-9", 0).is_err());
    }
}
