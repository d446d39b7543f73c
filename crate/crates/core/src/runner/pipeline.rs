use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::adapt::ModelState;
use crate::checkpoint::{self, Groups};
use crate::error::{Error, Result};
use crate::evalkit::{
    embedding_dump, evaluate_method, train_arm_bn, Baseline, EmbeddingDump, EvalConfig, Method,
    MethodState, MetricReport,
};
use crate::metatrain::{
    meta_train, pretrain_aggregator, pretrain_student, train_experts, Counters, CurveRow,
    MaskLogEntry, StudentScheme, TrainState,
};
use crate::nets::{ExpertSet, ParamStore};
use crate::privacy::AccessRecord;
use crate::seeds;
use crate::synthdata::{
    cluster_ids, generate_benchmark, DomainId, DomainRegistry, DomainSource, SuperDomainMap,
};

pub const CODE_VERSION: &str = concat!("metadmoe ", env!("CARGO_PKG_VERSION"));

/// Wall-clock seconds per named phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes(pub BTreeMap<String, f64>);

impl PhaseTimes {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        *self.0.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisValue {
    pub axis: String,
    pub value: String,
}

/// Persisted result of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub axis: Option<AxisValue>,
    pub train_scheme: String,
    pub second_order: bool,
    pub expert_data_mode: String,
    pub phase_seconds: PhaseTimes,
    pub reports: BTreeMap<String, MetricReport>,
    pub counters: Counters,
    pub best_epoch: Option<usize>,
    pub curve: Vec<CurveRow>,
    pub mask_log: Vec<MaskLogEntry>,
    pub audit_log: Vec<AccessRecord>,
    pub adapted_digests: BTreeMap<DomainId, String>,
    pub checkpoint_hash: String,
}

impl RunRecord {
    pub fn report(&self, method: Method) -> Option<&MetricReport> {
        self.reports.get(method.name())
    }

    pub fn metric(&self, method: Method, name: &str) -> Option<f64> {
        self.report(method).and_then(|r| r.metric(name))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("run record: {e}")))
    }
}

/// Parameter groups of a full model, as stored in checkpoints.
pub fn model_groups(model: &ModelState) -> Groups {
    let mut g = Groups::new();
    g.insert("theta_e".into(), model.theta_e.clone());
    g.insert("theta_c".into(), model.theta_c.clone());
    g.insert("phi".into(), model.phi.clone());
    for (i, (e, c)) in model
        .experts
        .extractors
        .iter()
        .zip(&model.experts.heads)
        .enumerate()
    {
        g.insert(format!("expert{i:03}_e"), e.clone());
        g.insert(format!("expert{i:03}_c"), c.clone());
    }
    g
}

pub fn expert_groups(experts: &ExpertSet) -> Groups {
    let mut g = Groups::new();
    for (i, (e, c)) in experts.extractors.iter().zip(&experts.heads).enumerate() {
        g.insert(format!("expert{i:03}_e"), e.clone());
        g.insert(format!("expert{i:03}_c"), c.clone());
    }
    g
}

pub fn experts_from_groups(cfg: &ExperimentConfig, groups: &Groups) -> Result<ExpertSet> {
    let mut extractors = Vec::new();
    let mut heads = Vec::new();
    for i in 0.. {
        match (
            groups.get(&format!("expert{i:03}_e")),
            groups.get(&format!("expert{i:03}_c")),
        ) {
            (Some(e), Some(c)) => {
                extractors.push(e.clone());
                heads.push(c.clone());
            }
            _ => break,
        }
    }
    ExpertSet::new(cfg.expert_config()?, extractors, heads)
}

pub fn model_from_groups(cfg: &ExperimentConfig, groups: &Groups) -> Result<ModelState> {
    let get = |k: &str| {
        groups
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks group {k}")))
    };
    let model = ModelState {
        student: cfg.student_config()?,
        aggregator: cfg.aggregator_config()?,
        theta_e: get("theta_e")?,
        theta_c: get("theta_c")?,
        phi: groups.get("phi").cloned().unwrap_or_default(),
        experts: experts_from_groups(cfg, groups)?,
    };
    model.check()?;
    Ok(model)
}

pub fn checkpoint_hash(model: &ModelState) -> String {
    checkpoint::groups_hash(&model_groups(model))
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<DomainRegistry> {
    generate_benchmark(&cfg.benchmark_spec())
}

/// Clusters `ids` and trains one expert per super-domain.
pub fn build_experts(
    cfg: &ExperimentConfig,
    registry: &DomainRegistry,
    source: &dyn DomainSource,
    ids: &[DomainId],
) -> Result<(SuperDomainMap, ExpertSet)> {
    let map = cluster_ids(
        registry,
        ids,
        cfg.experts.num_experts,
        &cfg.experts.clustering,
    )?;
    let experts = train_experts(
        source,
        &map,
        &cfg.expert_config()?,
        &cfg.experts.train,
        cfg.experts.data_mode,
        cfg.phase_seed("experts"),
    )?;
    Ok((map, experts))
}

/// Warm start for meta-training plus the ERM baseline when it comes for free.
pub struct WarmStart {
    pub model: ModelState,
    pub erm: Option<Baseline>,
}

/// ERM student (or a random one, per scheme) and a supervised aggregator.
pub fn warm_start(
    cfg: &ExperimentConfig,
    source: &dyn DomainSource,
    ids: &[DomainId],
    experts: ExpertSet,
    mask_map: Option<&SuperDomainMap>,
) -> Result<WarmStart> {
    let student = cfg.student_config()?;
    let aggregator = cfg.aggregator_config()?;
    let seed = cfg.phase_seed("pretrain");
    let (erm, theta_e, theta_c) = match cfg.meta.scheme.student {
        StudentScheme::Meta => {
            let (e, c) = pretrain_student(source, ids, &student, &cfg.pretrain.student, seed)?;
            let b = Baseline {
                cfg: student.clone(),
                theta_e: e.clone(),
                theta_c: c.clone(),
            };
            (Some(b), e, c)
        }
        StudentScheme::Random => {
            let (e, c) = student.init_params(seeds::derive(seed, "random-student", 0))?;
            (None, e, c)
        }
    };
    let phi = pretrain_aggregator(
        source,
        ids,
        &experts,
        &aggregator,
        student.num_outputs(),
        if cfg.meta.mask_overlap {
            mask_map
        } else {
            None
        },
        &cfg.pretrain.aggregator,
        seed,
    )?;
    let model = ModelState {
        student,
        aggregator,
        theta_e,
        theta_c,
        phi,
        experts,
    };
    model.check()?;
    Ok(WarmStart { model, erm })
}

pub fn erm_baseline(
    cfg: &ExperimentConfig,
    source: &dyn DomainSource,
    ids: &[DomainId],
) -> Result<Baseline> {
    let student = cfg.student_config()?;
    let (e, c) = pretrain_student(
        source,
        ids,
        &student,
        &cfg.pretrain.student,
        cfg.phase_seed("pretrain"),
    )?;
    Ok(Baseline {
        cfg: student,
        theta_e: e,
        theta_c: c,
    })
}

pub fn arm_bn_baseline(
    cfg: &ExperimentConfig,
    source: &dyn DomainSource,
    ids: &[DomainId],
) -> Result<Baseline> {
    train_arm_bn(
        source,
        ids,
        &cfg.student_config()?,
        &cfg.pretrain.student,
        cfg.phase_seed("arm-bn"),
    )
}

pub fn eval_config(cfg: &ExperimentConfig, phase: &str) -> EvalConfig {
    EvalConfig {
        seed: cfg.phase_seed(phase),
        strict: cfg.eval.strict,
        max_scored: cfg.eval.max_scored,
    }
}

/// Meta-training with early stopping on the validation domains.
pub fn meta_stage(
    cfg: &ExperimentConfig,
    source: &dyn DomainSource,
    ids: &[DomainId],
    super_map: Option<&SuperDomainMap>,
    model: ModelState,
    val_ids: &[DomainId],
) -> Result<TrainState> {
    let state = TrainState::new(model, cfg.phase_seed("meta"))?;
    let mut meta = cfg.meta.clone();
    if meta.scheme.student == StudentScheme::Random && !meta.update_aggregator() {
        meta.epochs = 0;
    }
    let val_cfg = eval_config(cfg, "val");
    let mut validator = |m: &ModelState| -> Result<f64> {
        let r = evaluate_method(
            Method::MetaDmoe,
            MethodState::Meta(m),
            source,
            val_ids,
            &cfg.adapt,
            &val_cfg,
        )?;
        Ok(r.selection_metric())
    };
    let use_val = meta.early_stopping && !val_ids.is_empty();
    meta_train(
        source,
        ids,
        super_map,
        state,
        &meta,
        &cfg.adapt,
        if use_val { Some(&mut validator) } else { None },
    )
}

/// Reports for every configured method on `test_ids`.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    source: &dyn DomainSource,
    test_ids: &[DomainId],
    model: &ModelState,
    erm: Option<&Baseline>,
    arm_bn: Option<&Baseline>,
) -> Result<BTreeMap<String, MetricReport>> {
    let ecfg = eval_config(cfg, "eval");
    let mut out = BTreeMap::new();
    for &method in &cfg.eval.methods {
        let state = match method {
            Method::MetaDmoe | Method::MetaDmoeNoAdapt => MethodState::Meta(model),
            Method::Erm => MethodState::Student(
                erm.ok_or_else(|| Error::InvalidArgument("no ERM baseline".into()))?,
            ),
            Method::ArmBn => MethodState::Student(
                arm_bn.ok_or_else(|| Error::InvalidArgument("no ARM-BN baseline".into()))?,
            ),
        };
        let report = evaluate_method(method, state, source, test_ids, &cfg.adapt, &ecfg)?;
        out.insert(method.name().to_string(), report);
    }
    Ok(out)
}

/// Everything a pipeline run produces.
pub struct PipelineOutput {
    pub record: RunRecord,
    pub super_map: SuperDomainMap,
    pub model: ModelState,
    pub erm: Option<Baseline>,
    pub arm_bn: Option<Baseline>,
    pub embeddings: Option<EmbeddingDump>,
}

fn adapted_digests(reports: &BTreeMap<String, MetricReport>) -> BTreeMap<DomainId, String> {
    reports
        .get(Method::MetaDmoe.name())
        .map(|r| {
            r.per_domain
                .iter()
                .filter_map(|d| d.adapted_digest.clone().map(|h| (d.domain_id, h)))
                .collect()
        })
        .unwrap_or_default()
}

/// Empty record stamped with the configuration and code version.
pub fn new_record(cfg: &ExperimentConfig, kind: &str) -> RunRecord {
    RunRecord {
        kind: kind.to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        code_version: CODE_VERSION.to_string(),
        axis: None,
        train_scheme: cfg.meta.scheme.label(),
        second_order: cfg.adapt.second_order,
        expert_data_mode: match cfg.experts.data_mode {
            crate::metatrain::ExpertDataMode::Redistribute => "redistribute".into(),
            crate::metatrain::ExpertDataMode::Subsample { total } => format!("subsample:{total}"),
        },
        phase_seconds: PhaseTimes::default(),
        reports: BTreeMap::new(),
        counters: Counters::default(),
        best_epoch: None,
        curve: Vec::new(),
        mask_log: Vec::new(),
        audit_log: Vec::new(),
        adapted_digests: BTreeMap::new(),
        checkpoint_hash: String::new(),
    }
}

/// Full run on an existing registry: experts, warm start, meta-training and
/// evaluation of every configured method on the test targets.
pub fn run_pipeline_on(
    cfg: &ExperimentConfig,
    registry: &DomainRegistry,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut times = PhaseTimes::default();
    let src = registry.source_ids();
    let (super_map, experts) =
        times.time("experts", || build_experts(cfg, registry, registry, &src))?;
    let warm = times.time("pretrain", || {
        warm_start(cfg, registry, &src, experts, Some(&super_map))
    })?;
    let state = times.time("meta", || {
        meta_stage(
            cfg,
            registry,
            &src,
            Some(&super_map),
            warm.model,
            &registry.val_ids(),
        )
    })?;
    let needs = |m: Method| cfg.eval.methods.contains(&m);
    let erm = match warm.erm {
        Some(b) => Some(b),
        None if needs(Method::Erm) => {
            Some(times.time("baselines", || erm_baseline(cfg, registry, &src))?)
        }
        None => None,
    };
    let arm_bn = if needs(Method::ArmBn) {
        Some(times.time("baselines", || arm_bn_baseline(cfg, registry, &src))?)
    } else {
        None
    };
    let test_ids = registry.test_ids();
    let reports = times.time("eval", || {
        evaluate_all(
            cfg,
            registry,
            &test_ids,
            &state.model,
            erm.as_ref(),
            arm_bn.as_ref(),
        )
    })?;
    let embeddings = if cfg.eval.embeddings {
        Some(embedding_dump(
            &state.model,
            registry,
            &test_ids,
            &cfg.adapt,
            &eval_config(cfg, "eval"),
        )?)
    } else {
        None
    };
    let mut record = new_record(cfg, "pipeline");
    record.adapted_digests = adapted_digests(&reports);
    record.reports = reports;
    record.counters = state.counters.clone();
    record.best_epoch = state.best_epoch;
    record.curve = state.curve.clone();
    record.mask_log = state.mask_log.clone();
    record.checkpoint_hash = checkpoint_hash(&state.model);
    record.phase_seconds = times;
    Ok(PipelineOutput {
        record,
        super_map,
        model: state.model,
        erm,
        arm_bn,
        embeddings,
    })
}

/// Generates the benchmark from the config and runs the full pipeline.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let mut times = PhaseTimes::default();
    let registry = times.time("data", || generate_data(cfg))?;
    let mut out = run_pipeline_on(cfg, &registry)?;
    out.record.phase_seconds.0.extend(times.0);
    Ok(out)
}

/// Saves a model checkpoint with the configuration needed to reload it.
pub fn save_model(
    dir: &std::path::Path,
    cfg: &ExperimentConfig,
    model: &ModelState,
    step: u64,
) -> Result<String> {
    let config = serde_json::to_value(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let m = checkpoint::save(
        dir,
        "meta_dmoe",
        cfg.seed,
        step,
        config,
        &model_groups(model),
    )?;
    Ok(m.content_hash)
}

pub fn load_model(dir: &std::path::Path) -> Result<(ExperimentConfig, ModelState)> {
    let (manifest, groups) = checkpoint::load(dir)?;
    let cfg: ExperimentConfig = serde_json::from_value(manifest.config)
        .map_err(|e| Error::format(dir.join(checkpoint::MANIFEST), e.to_string()))?;
    let model = model_from_groups(&cfg, &groups)?;
    Ok((cfg, model))
}

pub fn baseline_groups(b: &Baseline) -> Groups {
    let mut g = Groups::new();
    g.insert("theta_e".into(), b.theta_e.clone());
    g.insert("theta_c".into(), b.theta_c.clone());
    g
}

pub fn baseline_from_groups(cfg: crate::nets::StudentConfig, groups: &Groups) -> Result<Baseline> {
    let get = |k: &str| -> Result<ParamStore> {
        groups
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks group {k}")))
    };
    let b = Baseline {
        theta_e: get("theta_e")?,
        theta_c: get("theta_c")?,
        cfg,
    };
    b.cfg.check_params(&b.theta_e, Some(&b.theta_c))?;
    Ok(b)
}
