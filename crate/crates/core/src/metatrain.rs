//! Expert pretraining, ERM warm start and episodic meta-training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{dist_update_on, teacher_features, AdaptConfig, MaskSpec, ModelState};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{
    aggregate, linear, push_linear, supervised_loss, AggregatorConfig, ExpertSet, ParamStore,
    StudentConfig,
};
use crate::optim::{adam_minimize, Adam};
use crate::seeds;
use crate::synthdata::{
    pool_domains, sample_episode, select_rows, subsample_rows, DomainId, DomainSource, Episode,
    Labels, SuperDomainMap,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 20,
            lr: 3e-3,
            batch_size: 64,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(
                "batch_size >= 1 and lr > 0 required".into(),
            ));
        }
        Ok(())
    }
}

fn minibatches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) const CLASSIFIER_NAMES: [&str; 2] = ["cls.w", "cls.b"];

/// Minibatch Adam on the full student from the given initialisation.
pub fn train_supervised(
    cfg: &StudentConfig,
    theta_e: &ParamStore,
    theta_c: &ParamStore,
    x: &Mat,
    y: &Labels,
    tcfg: &SupervisedConfig,
    rng: &mut impl Rng,
) -> Result<(ParamStore, ParamStore)> {
    tcfg.validate()?;
    cfg.check_params(theta_e, Some(theta_c))?;
    if x.nrows() == 0 {
        return Err(Error::Empty("training data"));
    }
    let mut params = theta_e.merged(theta_c)?;
    let mut opt = Adam::new(&params);
    for _ in 0..tcfg.epochs {
        let batches = minibatches(x.nrows(), tcfg.batch_size, rng);
        adam_minimize(
            &mut params,
            &mut opt,
            tcfg.lr,
            batches.len(),
            |tape, p, b| {
                let xb = tape.constant(select_rows(x, &batches[b]));
                supervised_loss(cfg.logits(p, p, xb)?, &y.select(&batches[b]))
            },
        )?;
    }
    let names = cfg.extractor_names();
    Ok((
        params.subset(names.iter().map(String::as_str))?,
        params.subset(CLASSIFIER_NAMES)?,
    ))
}

/// Supervised training of one expert on the union of its domains.
pub fn train_expert(
    cfg: &StudentConfig,
    data: &[&crate::synthdata::DomainDataset],
    tcfg: &SupervisedConfig,
    seed: u64,
) -> Result<(ParamStore, ParamStore)> {
    let (x, y) = pool_domains(data)?;
    let (e, c) = cfg.init_params(seed)?;
    if tcfg.epochs == 0 {
        return Ok((e, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "expert-batches", 0));
    train_supervised(cfg, &e, &c, &x, &y, tcfg, &mut rng)
}

/// How expert training data is formed as the number of experts varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ExpertDataMode {
    /// Every source sample goes to the expert of its super-domain.
    #[default]
    Redistribute,
    /// A fixed total budget split evenly: each expert draws `total / N`
    /// samples from its super-domain.
    Subsample { total: usize },
}

/// Trains one expert per super-domain.
pub fn train_experts(
    source: &dyn DomainSource,
    super_map: &SuperDomainMap,
    cfg: &StudentConfig,
    tcfg: &SupervisedConfig,
    mode: ExpertDataMode,
    seed: u64,
) -> Result<ExpertSet> {
    let n = super_map.num_experts;
    let mut extractors = Vec::with_capacity(n);
    let mut heads = Vec::with_capacity(n);
    for i in 0..n {
        let members = super_map.members(i);
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("expert {i} has no domains")));
        }
        let data = members
            .iter()
            .map(|&id| source.fetch(id))
            .collect::<Result<Vec<_>>>()?;
        let expert_seed = seeds::derive(seed, "expert", i as u64);
        let (e, c) = match mode {
            ExpertDataMode::Redistribute => train_expert(cfg, &data, tcfg, expert_seed)?,
            ExpertDataMode::Subsample { total } => {
                let (x, y) = pool_domains(&data)?;
                let keep = (total / n).max(1).min(x.nrows());
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(expert_seed, "subsample", 0));
                let (x, y) = subsample_rows(&x, &y, keep, &mut rng);
                let (e, c) = cfg.init_params(expert_seed)?;
                if tcfg.epochs == 0 {
                    (e, c)
                } else {
                    train_supervised(cfg, &e, &c, &x, &y, tcfg, &mut rng)?
                }
            }
        };
        log::debug!("expert {i}: {} domains", members.len());
        extractors.push(e);
        heads.push(c);
    }
    ExpertSet::new(cfg.clone(), extractors, heads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub student: SupervisedConfig,
    pub aggregator: SupervisedConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            student: SupervisedConfig::default(),
            aggregator: SupervisedConfig {
                epochs: 10,
                ..Default::default()
            },
        }
    }
}

/// ERM training of a fresh student on the pooled domains.
pub fn pretrain_student(
    source: &dyn DomainSource,
    ids: &[DomainId],
    cfg: &StudentConfig,
    tcfg: &SupervisedConfig,
    seed: u64,
) -> Result<(ParamStore, ParamStore)> {
    let data = ids
        .iter()
        .map(|&id| source.fetch(id))
        .collect::<Result<Vec<_>>>()?;
    let (x, y) = pool_domains(&data)?;
    let (e, c) = cfg.init_params(seeds::derive(seed, "student-init", 0))?;
    if tcfg.epochs == 0 {
        return Ok((e, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "student-batches", 0));
    train_supervised(cfg, &e, &c, &x, &y, tcfg, &mut rng)
}

/// Expert features of every sample of every listed domain.
pub fn expert_feature_cache(
    source: &dyn DomainSource,
    ids: &[DomainId],
    experts: &ExpertSet,
) -> Result<BTreeMap<DomainId, Vec<Mat>>> {
    ids.iter()
        .map(|&id| Ok((id, experts.features(&source.fetch(id)?.inputs)?)))
        .collect()
}

/// Supervised training of the aggregator through a temporary prediction
/// head on its output, which is discarded afterwards. Batches are drawn from
/// one domain at a time so the overlapping expert can be masked.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_aggregator(
    source: &dyn DomainSource,
    ids: &[DomainId],
    experts: &ExpertSet,
    agg: &AggregatorConfig,
    num_outputs: usize,
    mask_map: Option<&SuperDomainMap>,
    tcfg: &SupervisedConfig,
    seed: u64,
) -> Result<ParamStore> {
    let phi = agg.init_params(seeds::derive(seed, "aggregator-init", 0))?;
    if phi.is_empty() || tcfg.epochs == 0 {
        return Ok(phi);
    }
    tcfg.validate()?;
    let cache = expert_feature_cache(source, ids, experts)?;
    let labels: BTreeMap<DomainId, Labels> = ids
        .iter()
        .map(|&id| Ok((id, source.fetch(id)?.labels.clone())))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "aggregator-batches", 0));
    let mut params = phi.clone();
    push_linear(
        &mut params,
        &mut rng,
        "tmp_head",
        agg.out_dim(),
        num_outputs,
    )?;
    let mut opt = Adam::new(&params);
    for _ in 0..tcfg.epochs {
        let mut batches: Vec<(DomainId, Vec<usize>)> = Vec::new();
        for &id in ids {
            let n = labels[&id].len();
            batches.extend(
                minibatches(n, tcfg.batch_size, &mut rng)
                    .into_iter()
                    .map(|b| (id, b)),
            );
        }
        batches.shuffle(&mut rng);
        adam_minimize(
            &mut params,
            &mut opt,
            tcfg.lr,
            batches.len(),
            |tape, p, b| {
                let (id, rows) = &batches[b];
                let feats: Vec<Var<'_>> = cache[id]
                    .iter()
                    .map(|f| tape.constant(select_rows(f, rows)))
                    .collect();
                let mask = match mask_map {
                    Some(m) => MaskSpec {
                        masked_expert: m.expert_of(*id),
                    },
                    None => MaskSpec::none(),
                };
                let feats = crate::adapt::mask_expert_vars(&feats, mask)?;
                let out = linear(p, "tmp_head", aggregate(agg, p, &feats)?)?;
                supervised_loss(out, &labels[id].select(rows))
            },
        )?;
    }
    params.subset(phi.names())
}

/// Which parts are meta-trained (Table-6 style training schemes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorScheme {
    /// ERM-pretrained and then frozen.
    Pretrain,
    /// ERM-pretrained, then meta-trained.
    #[default]
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentScheme {
    /// Randomly initialised and never trained before test-time adaptation.
    Random,
    /// ERM-pretrained, then meta-trained.
    #[default]
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainScheme {
    pub aggregator: AggregatorScheme,
    pub student: StudentScheme,
}

impl TrainScheme {
    pub fn label(&self) -> String {
        let a = match self.aggregator {
            AggregatorScheme::Pretrain => "pretrain",
            AggregatorScheme::Meta => "meta",
        };
        let s = match self.student {
            StudentScheme::Random => "random",
            StudentScheme::Meta => "meta",
        };
        format!("{a}/{s}")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (a, st) = s.split_once('/').ok_or_else(|| {
            Error::InvalidConfig(format!("train scheme {s:?} is not aggregator/student"))
        })?;
        let aggregator = match a {
            "pretrain" => AggregatorScheme::Pretrain,
            "meta" => AggregatorScheme::Meta,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown aggregator scheme {a:?}"
                )))
            }
        };
        let student = match st {
            "random" => StudentScheme::Random,
            "meta" => StudentScheme::Meta,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown student scheme {st:?}"
                )))
            }
        };
        Ok(TrainScheme {
            aggregator,
            student,
        })
    }

    /// The four rows of the training-scheme ablation.
    pub fn all() -> [TrainScheme; 4] {
        [
            TrainScheme::parse("pretrain/random").expect("valid"),
            TrainScheme::parse("meta/random").expect("valid"),
            TrainScheme::parse("pretrain/meta").expect("valid"),
            TrainScheme::parse("meta/meta").expect("valid"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Episodes (source domains) per meta batch.
    pub batch_size: usize,
    pub beta_s: f64,
    pub beta_a: f64,
    pub epochs: usize,
    /// Meta steps per epoch; by default enough batches to cover the source
    /// samples once.
    pub steps_per_epoch: Option<usize>,
    pub lr_decay_per_epoch: f64,
    /// Labelled query samples per episode.
    pub n_q: usize,
    pub mask_overlap: bool,
    pub early_stopping: bool,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    pub scheme: TrainScheme,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            batch_size: 4,
            beta_s: 1e-3,
            beta_a: 1e-3,
            epochs: 15,
            steps_per_epoch: None,
            lr_decay_per_epoch: 0.98,
            n_q: 16,
            mask_overlap: true,
            early_stopping: true,
            patience: None,
            scheme: TrainScheme::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("meta batch_size must be >= 1");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be >= 1");
        }
        if !(self.beta_s > 0.0 && self.beta_a > 0.0) {
            return bad("beta_s and beta_a must be > 0");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad("lr_decay_per_epoch must lie in (0, 1]");
        }
        if self.n_q == 0 {
            return bad("n_q must be >= 1");
        }
        Ok(())
    }

    pub fn update_aggregator(&self) -> bool {
        self.scheme.aggregator == AggregatorScheme::Meta
    }

    pub fn update_student(&self) -> bool {
        self.scheme.student == StudentScheme::Meta
    }

    /// Learning-rate multiplier after `epoch` completed epochs.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLogEntry {
    pub step: u64,
    pub domain_id: DomainId,
    pub super_domain: Option<usize>,
    pub masked_expert: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_metric: Option<f64>,
    pub beta_a: f64,
    pub beta_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub meta_steps: u64,
    pub episodes: u64,
    pub inner_updates: u64,
    /// Inner adaptations after which the classifier was verified unchanged.
    pub boil_checks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: ModelState,
    pub opt_phi: Adam,
    pub opt_theta: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub counters: Counters,
    pub mask_log: Vec<MaskLogEntry>,
    pub curve: Vec<CurveRow>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(model: ModelState, seed: u64) -> Result<Self> {
        model.check()?;
        let theta = model.theta_e.merged(&model.theta_c)?;
        Ok(TrainState {
            opt_phi: Adam::new(&model.phi),
            opt_theta: Adam::new(&theta),
            model,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: Counters::default(),
            mask_log: Vec::new(),
            curve: Vec::new(),
            best_val: None,
            best_epoch: None,
        })
    }
}

/// Masks for a batch of episodes: the expert whose super-domain contains the
/// episode's domain, when `mask_overlap` is on.
pub fn episode_masks(
    episodes: &[Episode],
    super_map: Option<&SuperDomainMap>,
    mask_overlap: bool,
) -> Result<Vec<MaskSpec>> {
    episodes
        .iter()
        .map(|ep| {
            if !mask_overlap {
                return Ok(MaskSpec::none());
            }
            let map = super_map.ok_or_else(|| {
                Error::InvalidArgument("masking requires a super-domain map".into())
            })?;
            let expert = map.expert_of(ep.domain_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "episode domain {} is not in the super-domain map",
                    ep.domain_id
                ))
            })?;
            Ok(MaskSpec::expert(expert))
        })
        .collect()
}

/// Gradients of the accumulated query loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGrads {
    pub loss: f64,
    pub phi: ParamStore,
    pub theta_e: ParamStore,
    pub theta_c: ParamStore,
    /// Inner adaptations for which the classifier stayed bit-identical.
    pub boil_checks: u64,
}

fn meta_objective<'t>(
    tape: &'t Tape,
    model: &ModelState,
    episodes: &[Episode],
    masks: &[MaskSpec],
    adapt: &AdaptConfig,
    binds: (
        &crate::nets::Bound<'t>,
        &crate::nets::Bound<'t>,
        &crate::nets::Bound<'t>,
    ),
    boil_checks: &mut u64,
) -> Result<Var<'t>> {
    let (phi, theta_e, theta_c) = binds;
    if episodes.is_empty() {
        return Err(Error::Empty("meta batch"));
    }
    let mut total: Option<Var<'t>> = None;
    for (ep, &mask) in episodes.iter().zip(masks) {
        let feats = model.experts.features_on(tape, &ep.support_x)?;
        let teacher = teacher_features(&model.aggregator, phi, &feats, mask)?;
        let sx = tape.constant(ep.support_x.clone());
        let adapted = dist_update_on(&model.student, adapt, theta_e, theta_c, teacher, sx)?;
        if theta_c.to_store() == model.theta_c {
            *boil_checks += 1;
        }
        let qx = tape.constant(ep.query_x.clone());
        let loss = supervised_loss(model.student.logits(&adapted, theta_c, qx)?, &ep.query_y)?;
        total = Some(match total {
            Some(t) => t + loss,
            None => loss,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Accumulated post-adaptation query loss over a meta batch.
pub fn meta_batch_loss(
    model: &ModelState,
    episodes: &[Episode],
    masks: &[MaskSpec],
    adapt: &AdaptConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let phi = model.phi.bind(&tape, false);
    let e = model.theta_e.bind(&tape, true);
    let c = model.theta_c.bind(&tape, false);
    let first_order = AdaptConfig {
        second_order: false,
        ..adapt.clone()
    };
    let mut checks = 0;
    Ok(meta_objective(
        &tape,
        model,
        episodes,
        masks,
        &first_order,
        (&phi, &e, &c),
        &mut checks,
    )?
    .item())
}

/// Meta-gradients of the accumulated query loss with respect to the
/// aggregator, extractor and classifier.
pub fn meta_batch_grads(
    model: &ModelState,
    episodes: &[Episode],
    masks: &[MaskSpec],
    adapt: &AdaptConfig,
) -> Result<MetaGrads> {
    let tape = Tape::new();
    let phi = model.phi.bind(&tape, true);
    let e = model.theta_e.bind(&tape, true);
    let c = model.theta_c.bind(&tape, true);
    let mut boil_checks = 0;
    let total = meta_objective(
        &tape,
        model,
        episodes,
        masks,
        adapt,
        (&phi, &e, &c),
        &mut boil_checks,
    )?;
    let loss = total.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "meta batch loss".into(),
            diagnostic: format!(
                "value {loss}; consider lowering alpha ({}) or the meta learning rates",
                adapt.alpha
            ),
        });
    }
    let mut wrt = phi.vars();
    wrt.extend(e.vars());
    wrt.extend(c.vars());
    let grads = tape.grad(total, &wrt, false);
    let (gp, rest) = grads.split_at(phi.len());
    let (ge, gc) = rest.split_at(e.len());
    Ok(MetaGrads {
        loss,
        phi: phi.store_from(gp),
        theta_e: e.store_from(ge),
        theta_c: c.store_from(gc),
        boil_checks,
    })
}

/// One outer update from a batch of episodes. Returns the batch loss.
pub fn meta_step(
    state: &mut TrainState,
    episodes: &[Episode],
    super_map: Option<&SuperDomainMap>,
    cfg: &MetaConfig,
    adapt: &AdaptConfig,
) -> Result<f64> {
    let masks = episode_masks(episodes, super_map, cfg.mask_overlap)?;
    let grads = meta_batch_grads(&state.model, episodes, &masks, adapt)?;
    for (ep, m) in episodes.iter().zip(&masks) {
        state.mask_log.push(MaskLogEntry {
            step: state.counters.meta_steps,
            domain_id: ep.domain_id,
            super_domain: super_map.and_then(|s| s.expert_of(ep.domain_id)),
            masked_expert: m.masked_expert,
        });
    }
    let factor = cfg.lr_factor(state.epoch);
    if cfg.update_aggregator() && !state.model.phi.is_empty() {
        state
            .opt_phi
            .step(&mut state.model.phi, &grads.phi, cfg.beta_a * factor)?;
    }
    if cfg.update_student() {
        let mut theta = state.model.theta_e.merged(&state.model.theta_c)?;
        let g = grads.theta_e.merged(&grads.theta_c)?;
        state.opt_theta.step(&mut theta, &g, cfg.beta_s * factor)?;
        state.model.theta_e = theta.subset(state.model.theta_e.names())?;
        state.model.theta_c = theta.subset(CLASSIFIER_NAMES)?;
    }
    state.counters.meta_steps += 1;
    state.counters.episodes += episodes.len() as u64;
    state.counters.inner_updates += (episodes.len() * adapt.num_inner_steps) as u64;
    state.counters.boil_checks += grads.boil_checks;
    Ok(grads.loss)
}

/// Validation callback: higher is better.
pub type Validator<'a> = dyn FnMut(&ModelState) -> Result<f64> + 'a;

/// Meta steps per epoch: `ceil(total samples / (B * (n_su + n_q)))` unless
/// fixed in the config.
pub fn steps_per_epoch(
    source: &dyn DomainSource,
    ids: &[DomainId],
    cfg: &MetaConfig,
    adapt: &AdaptConfig,
) -> Result<usize> {
    if let Some(s) = cfg.steps_per_epoch {
        return Ok(s);
    }
    let mut total = 0;
    for &id in ids {
        total += source.fetch(id)?.num_samples();
    }
    Ok(total
        .div_ceil(cfg.batch_size * (adapt.n_su + cfg.n_q))
        .max(1))
}

/// Episodic meta-training over uniformly sampled source domains; with early
/// stopping the best validated model is returned.
pub fn meta_train(
    source: &dyn DomainSource,
    ids: &[DomainId],
    super_map: Option<&SuperDomainMap>,
    mut state: TrainState,
    cfg: &MetaConfig,
    adapt: &AdaptConfig,
    mut validate: Option<&mut Validator<'_>>,
) -> Result<TrainState> {
    cfg.validate()?;
    adapt.validate()?;
    if ids.is_empty() {
        return Err(Error::Empty("meta-training domains"));
    }
    let steps = steps_per_epoch(source, ids, cfg, adapt)?;
    let mut best_model: Option<ModelState> = None;
    let mut since_best = 0;
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let picks: Vec<DomainId> = if cfg.batch_size <= ids.len() {
                rand::seq::index::sample(&mut state.rng, ids.len(), cfg.batch_size)
                    .into_iter()
                    .map(|i| ids[i])
                    .collect()
            } else {
                (0..cfg.batch_size)
                    .map(|_| ids[state.rng.random_range(0..ids.len())])
                    .collect()
            };
            let mut episodes = Vec::with_capacity(picks.len());
            for id in picks {
                episodes.push(sample_episode(
                    source.fetch(id)?,
                    adapt.n_su,
                    cfg.n_q,
                    &mut state.rng,
                )?);
            }
            loss_sum +=
                meta_step(&mut state, &episodes, super_map, cfg, adapt)? / episodes.len() as f64;
        }
        let factor = cfg.lr_factor(state.epoch);
        let val_metric = match validate.as_mut() {
            Some(v) => Some(v(&state.model)?),
            None => None,
        };
        state.curve.push(CurveRow {
            epoch: state.epoch + 1,
            mean_loss: loss_sum / steps as f64,
            val_metric,
            beta_a: cfg.beta_a * factor,
            beta_s: cfg.beta_s * factor,
        });
        log::info!(
            "epoch {} loss {:.4} val {:?}",
            state.epoch + 1,
            loss_sum / steps as f64,
            val_metric
        );
        state.epoch += 1;
        if let Some(m) = val_metric {
            if state.best_val.is_none_or(|b| m > b) {
                state.best_val = Some(m);
                state.best_epoch = Some(state.epoch);
                best_model = Some(state.model.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best > p) {
                    break;
                }
            }
        }
    }
    if cfg.early_stopping {
        if let Some(best) = best_model {
            state.model = best;
        }
    }
    Ok(state)
}

/// Writes the training curve as CSV.
pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut s = String::from("epoch,mean_loss,val_metric,beta_a,beta_s\n");
    for r in curve {
        let val = r.val_metric.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{},{:.8},{:.8}\n",
            r.epoch, r.mean_loss, val, r.beta_a, r.beta_s
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::AggregatorKind;
    use crate::synthdata::{
        cluster_domains, generate_benchmark, BenchmarkSpec, ClusterStrategy, DomainRegistry, Task,
    };

    fn tiny_registry() -> DomainRegistry {
        generate_benchmark(&BenchmarkSpec {
            num_source_domains: 6,
            num_val_domains: 1,
            num_target_domains: 2,
            num_classes: 3,
            input_dim: 4,
            samples_per_domain_range: (60, 80),
            num_families: 3,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model(reg: &DomainRegistry, n: usize) -> (ModelState, SuperDomainMap) {
        let student = StudentConfig::new(4, vec![8], 8, reg.task).unwrap();
        let map = cluster_domains(reg, n, &ClusterStrategy::RoundRobin).unwrap();
        let tcfg = SupervisedConfig {
            epochs: 2,
            ..Default::default()
        };
        let experts =
            train_experts(reg, &map, &student, &tcfg, ExpertDataMode::Redistribute, 1).unwrap();
        let (theta_e, theta_c) = student.init_params(2).unwrap();
        let aggregator = AggregatorConfig::new(AggregatorKind::Transformer, n, 8, 2);
        let phi = aggregator.init_params(3).unwrap();
        (
            ModelState {
                student,
                aggregator,
                theta_e,
                theta_c,
                phi,
                experts,
            },
            map,
        )
    }

    #[test]
    fn lr_schedule_decay() {
        let cfg = MetaConfig::default();
        assert!((cfg.lr_factor(2) - 0.9604).abs() < 1e-12);
        assert_eq!(cfg.lr_factor(0), 1.0);
    }

    #[test]
    fn train_scheme_labels_round_trip() {
        for s in TrainScheme::all() {
            assert_eq!(TrainScheme::parse(&s.label()).unwrap(), s);
        }
        assert!(TrainScheme::parse("meta").is_err());
    }

    #[test]
    fn expert_epochs_zero_returns_init() {
        let reg = tiny_registry();
        let student = StudentConfig::new(4, vec![8], 8, reg.task).unwrap();
        let d = reg.domain(0).unwrap();
        let tcfg = SupervisedConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(
            train_expert(&student, &[d], &tcfg, 5).unwrap(),
            student.init_params(5).unwrap()
        );
    }

    #[test]
    fn experts_with_distinct_seeds_differ() {
        let reg = tiny_registry();
        let (model, _) = tiny_model(&reg, 3);
        let digests: std::collections::BTreeSet<_> = model
            .experts
            .extractors
            .iter()
            .map(|e| e.digest())
            .collect();
        assert_eq!(digests.len(), 3);
    }

    #[test]
    fn alpha_zero_meta_gradient_is_erm_and_phi_untouched() {
        let reg = tiny_registry();
        let (model, map) = tiny_model(&reg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(reg.domain(0).unwrap(), 8, 8, &mut rng).unwrap();
        let adapt = AdaptConfig {
            alpha: 0.0,
            n_su: 8,
            ..Default::default()
        };
        let masks = episode_masks(std::slice::from_ref(&ep), Some(&map), true).unwrap();
        let g = meta_batch_grads(&model, std::slice::from_ref(&ep), &masks, &adapt).unwrap();
        assert_eq!(g.phi.sq_norm(), 0.0);
        // Plain ERM gradient of the query loss.
        let tape = Tape::new();
        let e = model.theta_e.bind(&tape, true);
        let c = model.theta_c.bind(&tape, true);
        let l = supervised_loss(
            model
                .student
                .logits(&e, &c, tape.constant(ep.query_x.clone()))
                .unwrap(),
            &ep.query_y,
        )
        .unwrap();
        let ge = e.store_from(&tape.grad(l, &e.vars(), false));
        assert_eq!(ge, g.theta_e);
    }

    #[test]
    fn batch_loss_matches_gradient_pass() {
        let reg = tiny_registry();
        let (model, map) = tiny_model(&reg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps: Vec<_> = [0, 1]
            .iter()
            .map(|&i| sample_episode(reg.domain(i).unwrap(), 6, 6, &mut rng).unwrap())
            .collect();
        let masks = episode_masks(&eps, Some(&map), true).unwrap();
        let adapt = AdaptConfig {
            alpha: 0.2,
            n_su: 6,
            ..Default::default()
        };
        let g = meta_batch_grads(&model, &eps, &masks, &adapt).unwrap();
        let l = meta_batch_loss(&model, &eps, &masks, &adapt).unwrap();
        assert!((g.loss - l).abs() < 1e-12);
        let frozen = AdaptConfig {
            alpha: 0.0,
            ..adapt
        };
        assert_ne!(meta_batch_loss(&model, &eps, &masks, &frozen).unwrap(), l);
    }

    #[test]
    fn masks_follow_super_domains() {
        let reg = tiny_registry();
        let (model, map) = tiny_model(&reg, 3);
        let mut state = TrainState::new(model, 0).unwrap();
        let cfg = MetaConfig {
            epochs: 2,
            early_stopping: false,
            n_q: 8,
            ..Default::default()
        };
        let adapt = AdaptConfig {
            n_su: 8,
            ..Default::default()
        };
        let total = reg.total_samples(&reg.source_ids()).unwrap();
        let steps = total.div_ceil(4 * 16);
        assert_eq!(
            steps_per_epoch(&reg, &reg.source_ids(), &cfg, &adapt).unwrap(),
            steps
        );
        let experts_before = state.model.experts.clone();
        state = meta_train(
            &reg,
            &reg.source_ids(),
            Some(&map),
            state,
            &cfg,
            &adapt,
            None,
        )
        .unwrap();
        assert_eq!(state.model.experts, experts_before);
        assert_eq!(state.counters.meta_steps as usize, 2 * steps);
        assert_eq!(state.mask_log.len(), 2 * steps * 4);
        for entry in &state.mask_log {
            assert_eq!(entry.masked_expert, map.expert_of(entry.domain_id));
        }
        assert_eq!(state.counters.boil_checks, state.counters.episodes);
        assert_eq!(state.curve.len(), 2);
    }

    #[test]
    fn meta_train_zero_epochs_is_identity() {
        let reg = tiny_registry();
        let (model, map) = tiny_model(&reg, 3);
        let state = TrainState::new(model.clone(), 0).unwrap();
        let cfg = MetaConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = meta_train(
            &reg,
            &reg.source_ids(),
            Some(&map),
            state,
            &cfg,
            &AdaptConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn masking_requires_membership() {
        let reg = tiny_registry();
        let map = cluster_domains(&reg, 2, &ClusterStrategy::RoundRobin).unwrap();
        let target = reg.target_ids()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(reg.domain(target).unwrap(), 4, 4, &mut rng).unwrap();
        assert!(episode_masks(&[ep], Some(&map), true).is_err());
    }

    #[test]
    fn separable_two_class_expert_fits() {
        // Two well separated Gaussian blobs; a linear separator exists.
        let spec = BenchmarkSpec {
            num_source_domains: 1,
            num_val_domains: 0,
            num_target_domains: 1,
            num_classes: 2,
            input_dim: 4,
            class_separation: 4.0,
            noise_std: 0.3,
            samples_per_domain_range: (200, 200),
            seed: 11,
            ..Default::default()
        };
        let reg = generate_benchmark(&spec).unwrap();
        let d = reg.domain(0).unwrap();
        let cfg =
            StudentConfig::new(4, vec![16], 8, Task::Classification { num_classes: 2 }).unwrap();
        let (e, c) = train_expert(&cfg, &[d], &SupervisedConfig::default(), 0).unwrap();
        let out = cfg.predict(&e, &c, &d.inputs).unwrap();
        let Labels::Classes(ys) = &d.labels else {
            panic!()
        };
        let correct = ys
            .iter()
            .enumerate()
            .filter(|(r, &y)| {
                let pred = if out[[*r, 1]] > out[[*r, 0]] { 1 } else { 0 };
                pred == y
            })
            .count();
        assert!(correct as f64 / ys.len() as f64 >= 0.95);
    }
}
