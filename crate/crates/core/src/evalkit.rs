//! Metrics, the target-domain evaluation protocol and baseline methods.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{test_time_adapt, AdaptConfig, ModelState};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::metatrain::{SupervisedConfig, CLASSIFIER_NAMES};
use crate::nets::{supervised_loss, ParamStore, StudentConfig};
use crate::optim::{adam_minimize, Adam};
use crate::seeds;
use crate::synthdata::{select_rows, DomainDataset, DomainId, DomainSource, Labels, Task};

pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            context: "predictions vs labels",
            expected: b.to_string(),
            got: a.to_string(),
        });
    }
    if a == 0 {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

/// Unweighted mean of per-class F1. Classes absent from both predictions and
/// labels are left out of the mean.
pub fn macro_f1(predictions: &[u32], labels: &[u32], num_classes: usize) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let (p, y) = (p as usize, y as usize);
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fne[y] += 1;
        }
    }
    let scores: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fne[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fne[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn worst_case_metric(per_group: &[f64]) -> Result<f64> {
    per_group
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or(Error::Empty("worst-case metric groups"))
}

pub fn pearson_r(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), targets.len())?;
    if predictions.len() < 2 {
        return Err(Error::Undefined("Pearson r needs at least two samples"));
    }
    let n = predictions.len() as f64;
    let mx = predictions.iter().sum::<f64>() / n;
    let my = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in predictions.iter().zip(targets) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Pearson r with zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn argmax_rows(m: &Mat) -> Vec<u32> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MetaDmoe,
    MetaDmoeNoAdapt,
    Erm,
    ArmBn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MetaDmoe => "meta_dmoe",
            Method::MetaDmoeNoAdapt => "meta_dmoe_no_adapt",
            Method::Erm => "erm",
            Method::ArmBn => "arm_bn",
        }
    }

    pub fn all() -> [Method; 4] {
        [
            Method::MetaDmoe,
            Method::MetaDmoeNoAdapt,
            Method::Erm,
            Method::ArmBn,
        ]
    }
}

/// A plain student used by the ERM and ARM-BN baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub cfg: StudentConfig,
    pub theta_e: ParamStore,
    pub theta_c: ParamStore,
}

impl Baseline {
    pub fn digest(&self) -> String {
        format!("{}{}", self.theta_e.digest(), self.theta_c.digest())
    }
}

pub enum MethodState<'a> {
    Meta(&'a ModelState),
    Student(&'a Baseline),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain_id: DomainId,
    pub num_scored: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub pearson_r: Option<f64>,
    pub adaptation_updates: u64,
    pub gradient_updates: u64,
    pub adapted_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub num_scored: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub worst_case_accuracy: Option<f64>,
    pub pearson_r: Option<f64>,
    pub worst_case_pearson_r: Option<f64>,
    pub per_domain: Vec<DomainMetrics>,
    pub adaptation_update_count: u64,
    pub gradient_update_count: u64,
    pub skipped_domains: Vec<DomainId>,
    /// Groups fell back to domain ids because group tags were missing.
    pub group_fallback: bool,
}

impl MetricReport {
    /// Named headline metric, if present.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "macro_f1" => self.macro_f1,
            "worst_case_accuracy" => self.worst_case_accuracy,
            "pearson_r" => self.pearson_r,
            "worst_case_pearson_r" => self.worst_case_pearson_r,
            _ => None,
        }
    }

    pub const METRICS: [&'static str; 5] = [
        "accuracy",
        "macro_f1",
        "worst_case_accuracy",
        "pearson_r",
        "worst_case_pearson_r",
    ];

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Validation metric: macro-F1 for classification, Pearson r otherwise.
    pub fn selection_metric(&self) -> f64 {
        self.macro_f1
            .or(self.pearson_r)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub strict: bool,
    /// Cap on scored samples per domain (`None` scores the whole remainder).
    pub max_scored: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            strict: false,
            max_scored: None,
        }
    }
}

/// Support/scored split of one target domain: `n_su` support indices drawn
/// from the evaluation seed, the rest scored.
pub fn split_domain(
    domain: &DomainDataset,
    n_su: usize,
    cfg: &EvalConfig,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = domain.num_samples();
    if n < n_su + 1 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        cfg.seed,
        "eval-support",
        domain.domain_id as u64,
    ));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let support = idx[..n_su].to_vec();
    let mut scored = idx[n_su..].to_vec();
    scored.sort_unstable();
    if let Some(cap) = cfg.max_scored {
        scored.truncate(cap.max(1));
    }
    Some((support, scored))
}

struct Scored {
    outputs: Mat,
    labels: Labels,
    groups: Vec<u32>,
}

/// Evaluates `method` over `target_ids`. Adaptation works on copies; the
/// supplied state is never modified.
pub fn evaluate_method(
    method: Method,
    state: MethodState<'_>,
    source: &dyn DomainSource,
    target_ids: &[DomainId],
    adapt: &AdaptConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    adapt.validate()?;
    let task = source.task();
    let mut per_domain = Vec::new();
    let mut skipped = Vec::new();
    let mut scored_all: Vec<Scored> = Vec::new();
    let mut group_fallback = false;
    let mut total_adapt = 0u64;
    for &id in target_ids {
        let domain = source.fetch(id)?;
        let Some((support, scored)) = split_domain(domain, adapt.n_su, cfg) else {
            let msg = format!(
                "target domain {id} has {} samples, needs n_su + 1",
                domain.num_samples()
            );
            if cfg.strict {
                return Err(Error::InsufficientSamples {
                    domain_id: id,
                    available: domain.num_samples(),
                    requested: adapt.n_su + 1,
                });
            }
            log::warn!("{msg}; skipped");
            skipped.push(id);
            continue;
        };
        let support_x = domain.select_inputs(&support);
        let x = domain.select_inputs(&scored);
        let mut counter = 0u64;
        let mut digest = None;
        let outputs = match (method, &state) {
            (Method::MetaDmoe, MethodState::Meta(m)) => {
                let a = test_time_adapt(m, &support_x, adapt, cfg.strict, &mut counter)?;
                digest = Some(a.theta_e.digest());
                m.student.predict(&a.theta_e, &a.theta_c, &x)?
            }
            (Method::MetaDmoeNoAdapt, MethodState::Meta(m)) => {
                m.student.predict(&m.theta_e, &m.theta_c, &x)?
            }
            (Method::Erm, MethodState::Student(b)) => b.cfg.predict(&b.theta_e, &b.theta_c, &x)?,
            (Method::ArmBn, MethodState::Student(b)) => {
                let stats = b.cfg.norm_stats(&b.theta_e, &support_x)?;
                b.cfg
                    .predict_with_stats(&b.theta_e, &b.theta_c, &x, &stats)?
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "state does not match method {}",
                    method.name()
                )))
            }
        };
        total_adapt += counter;
        let labels = domain.labels.select(&scored);
        let groups = match &domain.group_tags {
            Some(tags) => scored.iter().map(|&i| tags[i]).collect(),
            None => {
                group_fallback = true;
                vec![id; scored.len()]
            }
        };
        let dm = domain_metrics(task, id, &outputs, &labels)?;
        per_domain.push(DomainMetrics {
            adaptation_updates: counter,
            gradient_updates: counter,
            adapted_digest: digest,
            ..dm
        });
        scored_all.push(Scored {
            outputs,
            labels,
            groups,
        });
    }
    if group_fallback {
        log::warn!("missing group tags; worst-case metrics grouped by domain");
    }
    if scored_all.is_empty() {
        return Err(Error::Empty("evaluable target domains"));
    }
    let mut report = summarize(task, &scored_all)?;
    report.method = method;
    report.per_domain = per_domain;
    report.adaptation_update_count = total_adapt;
    report.gradient_update_count = total_adapt;
    report.skipped_domains = skipped;
    report.group_fallback = group_fallback;
    Ok(report)
}

fn domain_metrics(
    task: Task,
    id: DomainId,
    outputs: &Mat,
    labels: &Labels,
) -> Result<DomainMetrics> {
    let mut dm = DomainMetrics {
        domain_id: id,
        num_scored: labels.len(),
        accuracy: None,
        macro_f1: None,
        pearson_r: None,
        adaptation_updates: 0,
        gradient_updates: 0,
        adapted_digest: None,
    };
    match (task, labels) {
        (Task::Classification { num_classes }, Labels::Classes(ys)) => {
            let preds = argmax_rows(outputs);
            dm.accuracy = Some(accuracy(&preds, ys)?);
            dm.macro_f1 = Some(macro_f1(&preds, ys, num_classes)?);
        }
        (Task::Regression, Labels::Values(ys)) => {
            let preds: Vec<f64> = outputs.column(0).to_vec();
            dm.pearson_r = pearson_r(&preds, ys).ok();
        }
        _ => return Err(Error::InvalidArgument("labels do not match task".into())),
    }
    Ok(dm)
}

fn summarize(task: Task, parts: &[Scored]) -> Result<MetricReport> {
    let mut report = MetricReport {
        method: Method::Erm,
        num_scored: parts.iter().map(|p| p.labels.len()).sum(),
        accuracy: None,
        macro_f1: None,
        worst_case_accuracy: None,
        pearson_r: None,
        worst_case_pearson_r: None,
        per_domain: Vec::new(),
        adaptation_update_count: 0,
        gradient_update_count: 0,
        skipped_domains: Vec::new(),
        group_fallback: false,
    };
    let groups: Vec<u32> = parts
        .iter()
        .flat_map(|p| p.groups.iter().copied())
        .collect();
    match task {
        Task::Classification { num_classes } => {
            let mut preds = Vec::new();
            let mut ys = Vec::new();
            for p in parts {
                preds.extend(argmax_rows(&p.outputs));
                let Labels::Classes(y) = &p.labels else {
                    return Err(Error::InvalidArgument("labels do not match task".into()));
                };
                ys.extend_from_slice(y);
            }
            report.accuracy = Some(accuracy(&preds, &ys)?);
            report.macro_f1 = Some(macro_f1(&preds, &ys, num_classes)?);
            let mut by_group: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
            for ((p, y), g) in preds.iter().zip(&ys).zip(&groups) {
                let e = by_group.entry(*g).or_default();
                e.0 += (p == y) as usize;
                e.1 += 1;
            }
            let accs: Vec<f64> = by_group
                .values()
                .map(|(h, n)| *h as f64 / *n as f64)
                .collect();
            report.worst_case_accuracy = Some(worst_case_metric(&accs)?);
        }
        Task::Regression => {
            let mut preds = Vec::new();
            let mut ys = Vec::new();
            for p in parts {
                preds.extend(p.outputs.column(0).iter().copied());
                let Labels::Values(y) = &p.labels else {
                    return Err(Error::InvalidArgument("labels do not match task".into()));
                };
                ys.extend_from_slice(y);
            }
            report.pearson_r = pearson_r(&preds, &ys).ok();
            let mut by_group: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for ((p, y), g) in preds.iter().zip(&ys).zip(&groups) {
                let e = by_group.entry(*g).or_default();
                e.0.push(*p);
                e.1.push(*y);
            }
            let rs: Vec<f64> = by_group
                .values()
                .filter_map(|(p, y)| pearson_r(p, y).ok())
                .collect();
            report.worst_case_pearson_r = worst_case_metric(&rs).ok();
        }
    }
    Ok(report)
}

/// Trains the ARM-BN analogue: a normalised student whose batches each come
/// from a single domain, so normalisation statistics are domain statistics.
pub fn train_arm_bn(
    source: &dyn DomainSource,
    ids: &[DomainId],
    cfg: &StudentConfig,
    tcfg: &SupervisedConfig,
    seed: u64,
) -> Result<Baseline> {
    let mut cfg = cfg.clone();
    cfg.normalize = true;
    tcfg.validate()?;
    let (e, c) = cfg.init_params(seeds::derive(seed, "arm-bn-init", 0))?;
    let mut params = e.merged(&c)?;
    let mut opt = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "arm-bn-batches", 0));
    let data = ids
        .iter()
        .map(|&id| source.fetch(id))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..tcfg.epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (k, d) in data.iter().enumerate() {
            let mut idx: Vec<usize> = (0..d.num_samples()).collect();
            idx.shuffle(&mut rng);
            batches.extend(
                idx.chunks(tcfg.batch_size)
                    .filter(|c| c.len() > 1)
                    .map(|c| (k, c.to_vec())),
            );
        }
        batches.shuffle(&mut rng);
        adam_minimize(
            &mut params,
            &mut opt,
            tcfg.lr,
            batches.len(),
            |tape, p, b| {
                let (k, rows) = &batches[b];
                let x = tape.constant(select_rows(&data[*k].inputs, rows));
                supervised_loss(cfg.logits(p, p, x)?, &data[*k].labels.select(rows))
            },
        )?;
    }
    let names = cfg.extractor_names();
    Ok(Baseline {
        theta_e: params.subset(names.iter().map(String::as_str))?,
        theta_c: params.subset(CLASSIFIER_NAMES)?,
        cfg,
    })
}

/// Student features of scored target samples before and after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub domain_ids: Vec<DomainId>,
    pub labels: Vec<f64>,
    pub unadapted: Mat,
    pub adapted: Mat,
}

pub fn embedding_dump(
    state: &ModelState,
    source: &dyn DomainSource,
    target_ids: &[DomainId],
    adapt: &AdaptConfig,
    cfg: &EvalConfig,
) -> Result<EmbeddingDump> {
    let d = state.student.feature_dim;
    let mut dump = EmbeddingDump {
        domain_ids: Vec::new(),
        labels: Vec::new(),
        unadapted: Mat::zeros((0, d)),
        adapted: Mat::zeros((0, d)),
    };
    for &id in target_ids {
        let domain = source.fetch(id)?;
        let Some((support, scored)) = split_domain(domain, adapt.n_su, cfg) else {
            continue;
        };
        let mut counter = 0;
        let a = test_time_adapt(
            state,
            &domain.select_inputs(&support),
            adapt,
            false,
            &mut counter,
        )?;
        let x = domain.select_inputs(&scored);
        let before = state.student.features_of(&state.theta_e, &x)?;
        let after = state.student.features_of(&a.theta_e, &x)?;
        dump.unadapted = ndarray::concatenate![ndarray::Axis(0), dump.unadapted, before];
        dump.adapted = ndarray::concatenate![ndarray::Axis(0), dump.adapted, after];
        dump.domain_ids
            .extend(std::iter::repeat_n(id, scored.len()));
        match domain.labels.select(&scored) {
            Labels::Classes(v) => dump.labels.extend(v.iter().map(|&y| y as f64)),
            Labels::Values(v) => dump.labels.extend(v),
        }
    }
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[1, 1], &[1, 1], 4).unwrap(), 1.0);
        assert!(macro_f1(&[], &[], 2).is_err());
    }

    #[test]
    fn worst_case_examples() {
        assert_eq!(worst_case_metric(&[0.9, 0.7, 0.8]).unwrap(), 0.7);
        assert_eq!(worst_case_metric(&[0.4]).unwrap(), 0.4);
        assert!(worst_case_metric(&[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson_r(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Undefined(_))
        ));
    }

    proptest! {
        #[test]
        fn macro_f1_is_relabel_invariant(
            pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..60),
            perm in Just(vec![0u32, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, y): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let pp: Vec<u32> = p.iter().map(|&c| perm[c as usize]).collect();
            let yy: Vec<u32> = y.iter().map(|&c| perm[c as usize]).collect();
            let a = macro_f1(&p, &y, 4).unwrap();
            let b = macro_f1(&pp, &yy, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
