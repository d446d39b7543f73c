//! Privacy-regulated setting: experts see private domains only, everything
//! else sees public domains only, enforced through an auditing data proxy.

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::ModelState;
use crate::error::{Error, Result};
use crate::evalkit::{Method, MetricReport};
use crate::runner::{
    arm_bn_baseline, build_experts, checkpoint_hash, erm_baseline, evaluate_all, meta_stage,
    new_record, warm_start, ExperimentConfig, PhaseTimes, RunRecord,
};
use crate::synthdata::{DomainDataset, DomainId, DomainRegistry, DomainSource, Task};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacySplit {
    pub private_ids: Vec<DomainId>,
    pub public_ids: Vec<DomainId>,
}

impl PrivacySplit {
    pub fn is_private(&self, id: DomainId) -> bool {
        self.private_ids.binary_search(&id).is_ok()
    }
}

/// Random split of the source domains into private and public halves.
pub fn split_privacy(
    registry: &DomainRegistry,
    fraction_private: f64,
    seed: u64,
) -> Result<PrivacySplit> {
    if !(fraction_private > 0.0 && fraction_private < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction_private must lie in (0, 1), got {fraction_private}"
        )));
    }
    let mut ids = registry.source_ids();
    let n = ids.len();
    let k = (fraction_private * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction_private} of {n} source domains leaves one side empty"
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut private_ids = ids[..k].to_vec();
    let mut public_ids = ids[k..].to_vec();
    private_ids.sort_unstable();
    public_ids.sort_unstable();
    Ok(PrivacySplit {
        private_ids,
        public_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ExpertPretraining,
    MetaTraining,
    Baselines,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub phase: Phase,
    pub domain_id: DomainId,
    pub private: bool,
    pub allowed: bool,
}

/// Registry proxy logging every read. Private domains may only be read
/// during expert pretraining; any other private read fails.
pub struct AuditedSource<'a> {
    inner: &'a DomainRegistry,
    private: BTreeSet<DomainId>,
    phase: Cell<Phase>,
    log: RefCell<Vec<AccessRecord>>,
}

impl<'a> AuditedSource<'a> {
    pub fn new(inner: &'a DomainRegistry, split: &PrivacySplit) -> Self {
        AuditedSource {
            inner,
            private: split.private_ids.iter().copied().collect(),
            phase: Cell::new(Phase::ExpertPretraining),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.set(phase);
    }

    pub fn phase(&self) -> Phase {
        self.phase.get()
    }

    pub fn log(&self) -> Vec<AccessRecord> {
        self.log.borrow().clone()
    }

    /// Private reads outside expert pretraining (attempted or not).
    pub fn violations(&self) -> Vec<AccessRecord> {
        self.log
            .borrow()
            .iter()
            .filter(|r| r.private && r.phase != Phase::ExpertPretraining)
            .cloned()
            .collect()
    }
}

impl DomainSource for AuditedSource<'_> {
    fn task(&self) -> Task {
        self.inner.task
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    fn fetch(&self, id: DomainId) -> Result<&DomainDataset> {
        let phase = self.phase.get();
        let private = self.private.contains(&id);
        let allowed = !private || phase == Phase::ExpertPretraining;
        self.log.borrow_mut().push(AccessRecord {
            phase,
            domain_id: id,
            private,
            allowed,
        });
        if !allowed {
            return Err(Error::AuditViolation(format!(
                "private domain {id} read during {phase:?}"
            )));
        }
        self.inner.domain(id)
    }
}

/// Outcome of a privacy-regulated run.
pub struct PrivacyOutcome {
    pub record: RunRecord,
    pub split: PrivacySplit,
    pub model: ModelState,
}

impl PrivacyOutcome {
    /// Meta-DMoE and public-only ERM reports on the target domains.
    pub fn pair(&self) -> Option<(&MetricReport, &MetricReport)> {
        Some((
            self.record.report(Method::MetaDmoe)?,
            self.record.report(Method::Erm)?,
        ))
    }
}

/// Experts on private domains, everything else on public domains with
/// masking disabled. Every read goes through an [`AuditedSource`]; any private
/// read after expert pretraining aborts the run.
pub fn run_privacy_experiment(
    registry: &DomainRegistry,
    split: &PrivacySplit,
    cfg: &ExperimentConfig,
) -> Result<PrivacyOutcome> {
    let mut cfg = cfg.clone();
    cfg.meta.mask_overlap = false;
    if !cfg.eval.methods.contains(&Method::Erm) {
        cfg.eval.methods.push(Method::Erm);
    }
    cfg.validate()?;
    let src = AuditedSource::new(registry, split);
    let mut times = PhaseTimes::default();

    src.set_phase(Phase::ExpertPretraining);
    let (_, experts) = times.time("experts", || {
        build_experts(&cfg, registry, &src, &split.private_ids)
    })?;

    src.set_phase(Phase::MetaTraining);
    let public = &split.public_ids;
    let warm = times.time("pretrain", || warm_start(&cfg, &src, public, experts, None))?;
    let state = times.time("meta", || {
        meta_stage(&cfg, &src, public, None, warm.model, &registry.val_ids())
    })?;

    src.set_phase(Phase::Baselines);
    let erm = match warm.erm {
        Some(b) => b,
        None => times.time("baselines", || erm_baseline(&cfg, &src, public))?,
    };
    let arm_bn = if cfg.eval.methods.contains(&Method::ArmBn) {
        Some(times.time("baselines", || arm_bn_baseline(&cfg, &src, public))?)
    } else {
        None
    };

    src.set_phase(Phase::Evaluation);
    let test_ids = registry.test_ids();
    let reports = times.time("eval", || {
        evaluate_all(
            &cfg,
            &src,
            &test_ids,
            &state.model,
            Some(&erm),
            arm_bn.as_ref(),
        )
    })?;

    let violations = src.violations();
    if !violations.is_empty() {
        return Err(Error::AuditViolation(format!(
            "{} private reads after expert pretraining",
            violations.len()
        )));
    }
    let mut record = new_record(&cfg, "privacy");
    record.reports = reports;
    record.counters = state.counters.clone();
    record.best_epoch = state.best_epoch;
    record.curve = state.curve.clone();
    record.mask_log = state.mask_log.clone();
    record.audit_log = src.log();
    record.checkpoint_hash = checkpoint_hash(&state.model);
    record.phase_seconds = times;
    Ok(PrivacyOutcome {
        record,
        split: split.clone(),
        model: state.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_benchmark, BenchmarkSpec};

    fn registry() -> DomainRegistry {
        generate_benchmark(&BenchmarkSpec {
            samples_per_domain_range: (30, 40),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let reg = registry();
        let s = split_privacy(&reg, 0.5, 4).unwrap();
        assert_eq!((s.private_ids.len(), s.public_ids.len()), (10, 10));
        assert!(s.private_ids.iter().all(|i| !s.public_ids.contains(i)));
        assert_eq!(s, split_privacy(&reg, 0.5, 4).unwrap());
        assert!(split_privacy(&reg, 0.0, 4).is_err());
        assert!(split_privacy(&reg, 1.0, 4).is_err());
        assert!(split_privacy(&reg, 0.01, 4).is_err());
    }

    #[test]
    fn private_reads_fail_after_pretraining() {
        let reg = registry();
        let s = split_privacy(&reg, 0.5, 1).unwrap();
        let src = AuditedSource::new(&reg, &s);
        assert!(src.fetch(s.private_ids[0]).is_ok());
        src.set_phase(Phase::MetaTraining);
        assert!(src.fetch(s.public_ids[0]).is_ok());
        let err = src.fetch(s.private_ids[0]).unwrap_err();
        assert!(matches!(err, Error::AuditViolation(_)));
        assert_eq!(src.violations().len(), 1);
        assert_eq!(src.log().len(), 3);
    }
}
