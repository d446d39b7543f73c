use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::evalkit::Method;
use crate::metatrain::{ExpertDataMode, MetaConfig, PretrainConfig, SupervisedConfig};
use crate::nets::{Activation, AggregatorConfig, AggregatorKind, StudentConfig};
use crate::seeds;
use crate::synthdata::{BenchmarkSpec, ClusterStrategy, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertsSection {
    pub num_experts: usize,
    pub clustering: ClusterStrategy,
    pub data_mode: ExpertDataMode,
    /// Expert architecture; the student's when absent.
    pub hidden_dims: Option<Vec<usize>>,
    pub feature_dim: Option<usize>,
    pub train: SupervisedConfig,
}

impl Default for ExpertsSection {
    fn default() -> Self {
        ExpertsSection {
            num_experts: 5,
            clustering: ClusterStrategy::RoundRobin,
            data_mode: ExpertDataMode::Redistribute,
            hidden_dims: None,
            feature_dim: None,
            train: SupervisedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSection {
    pub kind: AggregatorKind,
    pub heads: usize,
    pub head_dim: Option<usize>,
    pub inner_dim: Option<usize>,
    /// Token width; the expert feature width when absent.
    pub dim: Option<usize>,
}

impl Default for AggregatorSection {
    fn default() -> Self {
        AggregatorSection {
            kind: AggregatorKind::Transformer,
            heads: 4,
            head_dim: None,
            inner_dim: None,
            dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub max_scored: Option<usize>,
    pub strict: bool,
    /// Dump adapted and unadapted target features.
    pub embeddings: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: Method::all().to_vec(),
            max_scored: None,
            strict: false,
            embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub fraction_private: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            fraction_private: 0.5,
        }
    }
}

/// Full experiment configuration. `data.seed` is ignored: every phase seed
/// is derived from the root `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: BenchmarkSpec,
    pub experts: ExpertsSection,
    pub student: StudentSection,
    pub aggregator: AggregatorSection,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub meta: MetaConfig,
    pub eval: EvalSection,
    pub privacy: PrivacySection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.adapt.validate()?;
        self.meta.validate()?;
        self.experts.train.validate()?;
        if self.experts.num_experts == 0 || self.experts.num_experts > self.data.num_source_domains
        {
            return Err(Error::InvalidConfig(format!(
                "num_experts must lie in 1..={}",
                self.data.num_source_domains
            )));
        }
        if !(self.privacy.fraction_private > 0.0 && self.privacy.fraction_private < 1.0) {
            return Err(Error::InvalidConfig(
                "privacy.fraction_private must lie in (0, 1)".into(),
            ));
        }
        self.student_config()?;
        self.expert_config()?;
        self.aggregator_config()?.validate()
    }

    /// Canonical JSON (sorted keys) of the whole configuration.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&v).expect("value serialises")
    }

    /// SHA-256 of the canonical form; independent of field order in the
    /// source text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn phase_seed(&self, phase: &str) -> u64 {
        seeds::derive(self.seed, phase, 0)
    }

    /// Benchmark spec with the derived data seed.
    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            seed: self.phase_seed("data"),
            ..self.data.clone()
        }
    }

    fn task(&self) -> Task {
        self.data.task()
    }

    pub fn student_config(&self) -> Result<StudentConfig> {
        let mut s = StudentConfig::new(
            self.data.input_dim,
            self.student.hidden_dims.clone(),
            self.student.feature_dim,
            self.task(),
        )?;
        s.activation = self.student.activation;
        Ok(s)
    }

    pub fn expert_config(&self) -> Result<StudentConfig> {
        let mut s = StudentConfig::new(
            self.data.input_dim,
            self.experts
                .hidden_dims
                .clone()
                .unwrap_or_else(|| self.student.hidden_dims.clone()),
            self.experts.feature_dim.unwrap_or(self.student.feature_dim),
            self.task(),
        )?;
        s.activation = self.student.activation;
        Ok(s)
    }

    pub fn aggregator_config(&self) -> Result<AggregatorConfig> {
        let expert_dim = self.experts.feature_dim.unwrap_or(self.student.feature_dim);
        let dim = self.aggregator.dim.unwrap_or(expert_dim);
        let cfg = AggregatorConfig {
            kind: self.aggregator.kind,
            num_experts: self.experts.num_experts,
            dim,
            heads: self.aggregator.heads,
            head_dim: self.aggregator.head_dim,
            inner_dim: self.aggregator.inner_dim,
            expert_dim: (expert_dim != dim).then_some(expert_dim),
            output_dim: (self.student.feature_dim != dim).then_some(self.student.feature_dim),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
