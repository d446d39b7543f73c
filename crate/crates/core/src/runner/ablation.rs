use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{run_pipeline, AxisValue, RunRecord};
use crate::adapt::DistillTarget;
use crate::error::{Error, Result};
use crate::metatrain::TrainScheme;
use crate::nets::AggregatorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NumExperts,
    AggregatorKind,
    DistillTarget,
    TrainScheme,
    MaskOverlap,
    NSu,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::NumExperts => "num_experts",
            Axis::AggregatorKind => "aggregator_kind",
            Axis::DistillTarget => "distill_target",
            Axis::TrainScheme => "train_scheme",
            Axis::MaskOverlap => "mask_overlap",
            Axis::NSu => "n_su",
        }
    }

    pub fn parse(s: &str) -> Result<Axis> {
        let all = [
            Axis::NumExperts,
            Axis::AggregatorKind,
            Axis::DistillTarget,
            Axis::TrainScheme,
            Axis::MaskOverlap,
            Axis::NSu,
        ];
        all.into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation axis {s:?}")))
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(&self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = |what: &str| Error::InvalidConfig(format!("invalid {what} value {value:?}"));
        let from_json = |v: &str| serde_json::Value::String(v.to_string());
        match self {
            Axis::NumExperts => {
                cfg.experts.num_experts = value.parse().map_err(|_| bad("num_experts"))?
            }
            Axis::NSu => cfg.adapt.n_su = value.parse().map_err(|_| bad("n_su"))?,
            Axis::MaskOverlap => {
                cfg.meta.mask_overlap = value.parse().map_err(|_| bad("mask_overlap"))?
            }
            Axis::TrainScheme => cfg.meta.scheme = TrainScheme::parse(value)?,
            Axis::AggregatorKind => {
                cfg.aggregator.kind = serde_json::from_value::<AggregatorKind>(from_json(value))
                    .map_err(|_| bad("aggregator_kind"))?
            }
            Axis::DistillTarget => {
                cfg.adapt.distill_target = serde_json::from_value::<DistillTarget>(from_json(value))
                    .map_err(|_| bad("distill_target"))?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    /// Seeds `base.seed .. base.seed + repeats`.
    pub repeats: usize,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.repeats == 0 {
            return Err(Error::InvalidConfig(
                "ablation needs values and repeats >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Every (value, seed) cell in run order.
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<(String, u64)> {
        self.values
            .iter()
            .flat_map(|v| (0..self.repeats as u64).map(move |r| (v.clone(), base.seed + r)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AblationResult {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
}

/// One pipeline run per (value, seed). Failed cells are recorded and the
/// sweep continues.
pub fn run_ablation(spec: &AblationSpec, base: &ExperimentConfig) -> Result<AblationResult> {
    spec.validate()?;
    let mut out = AblationResult::default();
    for (value, seed) in spec.cells(base) {
        let run = spec.axis.apply(base, &value).and_then(|mut cfg| {
            cfg.seed = seed;
            run_pipeline(&cfg)
        });
        match run {
            Ok(o) => {
                let mut r = o.record;
                r.axis = Some(AxisValue {
                    axis: spec.axis.name().into(),
                    value: value.clone(),
                });
                log::info!("ablation {}={} seed {} done", spec.axis.name(), value, seed);
                out.records.push(r);
            }
            Err(e) => {
                log::warn!(
                    "ablation cell {}={} seed {} failed: {e}",
                    spec.axis.name(),
                    value,
                    seed
                );
                out.failures.push(CellFailure {
                    axis: spec.axis.name().into(),
                    value,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_enumerate_values_times_seeds() {
        let spec = AblationSpec {
            axis: Axis::NumExperts,
            values: ["1", "2", "4", "8"].map(String::from).to_vec(),
            repeats: 3,
        };
        let base = ExperimentConfig {
            seed: 10,
            ..Default::default()
        };
        let cells = spec.cells(&base);
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0], ("1".to_string(), 10));
        assert_eq!(cells[11], ("8".to_string(), 12));
    }

    #[test]
    fn apply_each_axis() {
        let base = ExperimentConfig::default();
        assert_eq!(
            Axis::NumExperts
                .apply(&base, "2")
                .unwrap()
                .experts
                .num_experts,
            2
        );
        assert_eq!(Axis::NSu.apply(&base, "8").unwrap().adapt.n_su, 8);
        assert!(
            !Axis::MaskOverlap
                .apply(&base, "false")
                .unwrap()
                .meta
                .mask_overlap
        );
        assert_eq!(
            Axis::AggregatorKind
                .apply(&base, "mlp_ws")
                .unwrap()
                .aggregator
                .kind,
            AggregatorKind::MlpWs
        );
        assert_eq!(
            Axis::DistillTarget
                .apply(&base, "both")
                .unwrap()
                .adapt
                .distill_target,
            DistillTarget::Both
        );
        assert_eq!(
            Axis::TrainScheme
                .apply(&base, "pretrain/meta")
                .unwrap()
                .meta
                .scheme
                .label(),
            "pretrain/meta"
        );
        assert!(Axis::NumExperts.apply(&base, "x").is_err());
        assert!(Axis::NumExperts.apply(&base, "100").is_err());
        assert_eq!(Axis::parse("n_su").unwrap(), Axis::NSu);
    }
}
