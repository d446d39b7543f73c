//! Inner-loop distillation (DIST), expert masking and test-time adaptation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{aggregate, AggregatorConfig, Bound, ExpertSet, ParamStore, StudentConfig};
use crate::synthdata::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillTarget {
    #[default]
    Features,
    Logits,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    MeanSquared,
    /// Literal per-sample L2 distance, averaged over the batch.
    L2Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub num_inner_steps: usize,
    pub distill_target: DistillTarget,
    pub loss_form: LossForm,
    pub second_order: bool,
    pub temperature: f64,
    /// Unlabeled samples used per adaptation.
    pub n_su: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.005,
            num_inner_steps: 1,
            distill_target: DistillTarget::Features,
            loss_form: LossForm::MeanSquared,
            second_order: true,
            temperature: 1.0,
            n_su: 24,
        }
    }
}

impl AdaptConfig {
    /// `alpha = 0` is accepted so the no-update limit can be exercised.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.num_inner_steps == 0 {
            return Err(Error::InvalidConfig("num_inner_steps must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if self.n_su == 0 {
            return Err(Error::InvalidConfig("n_su must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MaskSpec {
    pub masked_expert: Option<usize>,
}

impl MaskSpec {
    pub fn none() -> Self {
        MaskSpec {
            masked_expert: None,
        }
    }

    pub fn expert(i: usize) -> Self {
        MaskSpec {
            masked_expert: Some(i),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self.masked_expert {
            Some(b) if b >= n => Err(Error::InvalidArgument(format!(
                "masked expert {b} out of range for {n} experts"
            ))),
            _ => Ok(()),
        }
    }
}

/// Zeroes the masked expert's features; the zero token is kept.
pub fn mask_experts(expert_feats: &[Mat], mask: MaskSpec) -> Result<Vec<Mat>> {
    mask.check(expert_feats.len())?;
    Ok(expert_feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if mask.masked_expert == Some(i) {
                Mat::zeros(f.dim())
            } else {
                f.clone()
            }
        })
        .collect())
}

/// Tape version of [`mask_experts`]: the masked token is replaced by a
/// constant zero, cutting every dependence on that expert.
pub fn mask_expert_vars<'t>(expert_feats: &[Var<'t>], mask: MaskSpec) -> Result<Vec<Var<'t>>> {
    mask.check(expert_feats.len())?;
    Ok(expert_feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if mask.masked_expert == Some(i) {
                f.tape().zeros(f.rows(), f.cols())
            } else {
                *f
            }
        })
        .collect())
}

/// Everything needed to adapt and run the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub student: StudentConfig,
    pub aggregator: AggregatorConfig,
    pub theta_e: ParamStore,
    pub theta_c: ParamStore,
    pub phi: ParamStore,
    pub experts: ExpertSet,
}

impl ModelState {
    pub fn check(&self) -> Result<()> {
        self.student
            .check_params(&self.theta_e, Some(&self.theta_c))?;
        if self.aggregator.num_experts != self.experts.len() {
            return Err(Error::InvalidConfig(format!(
                "aggregator expects {} experts, {} provided",
                self.aggregator.num_experts,
                self.experts.len()
            )));
        }
        if self.aggregator.input_dim() != self.experts.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "expert feature dim {} does not match aggregator input dim {}",
                self.experts.feature_dim(),
                self.aggregator.input_dim()
            )));
        }
        if self.aggregator.out_dim() != self.student.feature_dim {
            return Err(Error::InvalidConfig(format!(
                "aggregator output dim {} does not match student feature dim {}",
                self.aggregator.out_dim(),
                self.student.feature_dim
            )));
        }
        Ok(())
    }

    /// Digest over every parameter store.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in [&self.theta_e, &self.theta_c, &self.phi] {
            h.update(s.digest());
        }
        h.update(self.experts.digest());
        hex::encode(h.finalize())
    }
}

/// Aggregated teacher features after masking.
pub fn teacher_features<'t>(
    agg: &AggregatorConfig,
    phi: &Bound<'t>,
    expert_feats: &[Var<'t>],
    mask: MaskSpec,
) -> Result<Var<'t>> {
    let masked = mask_expert_vars(expert_feats, mask)?;
    aggregate(agg, phi, &masked)
}

/// Distillation loss between the teacher features and the student on `x`.
pub fn distill_loss<'t>(
    student: &StudentConfig,
    cfg: &AdaptConfig,
    theta_e: &Bound<'t>,
    theta_c: &Bound<'t>,
    teacher: Var<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let f = student.features(theta_e, x)?;
    if f.shape() != teacher.shape() {
        return Err(Error::Shape {
            context: "teacher features",
            expected: format!("{:?}", f.shape()),
            got: format!("{:?}", teacher.shape()),
        });
    }
    let feat_loss = || match cfg.loss_form {
        LossForm::MeanSquared => (teacher - f).square().mean_all(),
        LossForm::L2Norm => (teacher - f)
            .square()
            .sum_cols()
            .sqrt_safe()
            .sum_all()
            .scale(1.0 / f.rows() as f64),
    };
    let logit_loss = || -> Result<Var<'t>> {
        let t_out = student.head(theta_c, teacher)?;
        let s_out = student.head(theta_c, f)?;
        Ok(match student.task {
            Task::Classification { .. } => {
                let tau = cfg.temperature;
                let p_t = t_out.scale(1.0 / tau).softmax_rows();
                let log_p_s = s_out.scale(1.0 / tau).log_softmax_rows();
                (p_t * log_p_s)
                    .sum_all()
                    .scale(-tau * tau / f.rows() as f64)
            }
            Task::Regression => (t_out - s_out).square().mean_all(),
        })
    };
    match cfg.distill_target {
        DistillTarget::Features => Ok(feat_loss()),
        DistillTarget::Logits => logit_loss(),
        DistillTarget::Both => Ok(feat_loss() + logit_loss()?),
    }
}

/// `num_inner_steps` plain gradient steps of the distillation loss on the
/// tape. With `second_order` the result stays differentiable in `theta_e`,
/// `theta_c` and the teacher.
pub fn dist_update_on<'t>(
    student: &StudentConfig,
    cfg: &AdaptConfig,
    theta_e: &Bound<'t>,
    theta_c: &Bound<'t>,
    teacher: Var<'t>,
    support_x: Var<'t>,
) -> Result<Bound<'t>> {
    cfg.validate()?;
    if support_x.rows() == 0 {
        return Err(Error::Empty("support set"));
    }
    if cfg.alpha == 0.0 {
        return Ok(theta_e.clone());
    }
    let tape = support_x.tape();
    let mut cur = theta_e.clone();
    for step in 0..cfg.num_inner_steps {
        let loss = distill_loss(student, cfg, &cur, theta_c, teacher, support_x)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "distillation loss".into(),
                diagnostic: format!(
                    "value {value} at inner step {step} with alpha {}",
                    cfg.alpha
                ),
            });
        }
        let vars = cur.vars();
        let grads = tape.grad(loss, &vars, cfg.second_order);
        let next = vars
            .iter()
            .zip(grads)
            .map(|(&p, g)| p - g.scale(cfg.alpha))
            .collect();
        cur = cur.with_vars(next);
    }
    Ok(cur)
}

/// Value-level DIST update: returns the adapted extractor, leaving the
/// inputs untouched.
pub fn dist_update(
    state: &ModelState,
    support_x: &Mat,
    mask: MaskSpec,
    cfg: &AdaptConfig,
) -> Result<ParamStore> {
    cfg.validate()?;
    if support_x.nrows() == 0 {
        return Err(Error::Empty("support set"));
    }
    if cfg.alpha == 0.0 {
        return Ok(state.theta_e.clone());
    }
    let tape = Tape::new();
    let theta_e = state.theta_e.bind(&tape, true);
    let theta_c = state.theta_c.bind(&tape, false);
    let phi = state.phi.bind(&tape, false);
    let feats = state.experts.features_on(&tape, support_x)?;
    let teacher = teacher_features(&state.aggregator, &phi, &feats, mask)?;
    let x = tape.constant(support_x.clone());
    let first_order = AdaptConfig {
        second_order: false,
        ..cfg.clone()
    };
    Ok(dist_update_on(&state.student, &first_order, &theta_e, &theta_c, teacher, x)?.to_store())
}

/// Adapted student ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedStudent {
    pub theta_e: ParamStore,
    pub theta_c: ParamStore,
    pub updates: usize,
}

/// One adaptation per target domain from unlabeled samples. Adds
/// `num_inner_steps` to `counter`.
pub fn test_time_adapt(
    state: &ModelState,
    unlabeled_x: &Mat,
    cfg: &AdaptConfig,
    strict: bool,
    counter: &mut u64,
) -> Result<AdaptedStudent> {
    let n = unlabeled_x.nrows();
    if n < cfg.n_su {
        let msg = format!(
            "adaptation batch has {n} samples, configured n_su is {}",
            cfg.n_su
        );
        if strict || n == 0 {
            return Err(Error::InvalidArgument(msg));
        }
        log::warn!("{msg}; proceeding");
    }
    let theta_e = dist_update(state, unlabeled_x, MaskSpec::none(), cfg)?;
    *counter += cfg.num_inner_steps as u64;
    Ok(AdaptedStudent {
        theta_e,
        theta_c: state.theta_c.clone(),
        updates: cfg.num_inner_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::AggregatorKind;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn classification(c: usize) -> Task {
        Task::Classification { num_classes: c }
    }

    fn small_state(kind: AggregatorKind, seed: u64) -> ModelState {
        let student = StudentConfig::new(4, vec![6], 8, classification(3)).unwrap();
        let (theta_e, theta_c) = student.init_params(seed).unwrap();
        let aggregator = AggregatorConfig::new(kind, 3, 8, 2);
        let phi = aggregator.init_params(seed + 1).unwrap();
        let (ex, hx): (Vec<_>, Vec<_>) = (0..3)
            .map(|i| student.init_params(seed + 10 + i).unwrap())
            .unzip();
        let experts = ExpertSet::new(student.clone(), ex, hx).unwrap();
        ModelState {
            student,
            aggregator,
            theta_e,
            theta_c,
            phi,
            experts,
        }
    }

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mask_zeroes_only_the_selected_row() {
        let feats = vec![array![[1.0, 2.0]], array![[3.0, 4.0]]];
        let out = mask_experts(&feats, MaskSpec::expert(0)).unwrap();
        assert_eq!(out, vec![array![[0.0, 0.0]], array![[3.0, 4.0]]]);
        assert_eq!(mask_experts(&feats, MaskSpec::none()).unwrap(), feats);
        assert!(mask_experts(&feats, MaskSpec::expert(2)).is_err());
    }

    #[test]
    fn alpha_zero_returns_identical_extractor() {
        let state = small_state(AggregatorKind::Transformer, 0);
        let x = rand_mat(&mut ChaCha8Rng::seed_from_u64(1), 5, 4);
        let cfg = AdaptConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(
            dist_update(&state, &x, MaskSpec::none(), &cfg).unwrap(),
            state.theta_e
        );
    }

    /// Student f(x) = w·x + b against a single expert with fixed output.
    fn scalar_state(w: f64, b: f64, expert_w: f64, expert_b: f64) -> ModelState {
        let mut student = StudentConfig::new(1, vec![], 1, classification(2)).unwrap();
        student.activation = crate::nets::Activation::Linear;
        let mut theta_e = ParamStore::new();
        theta_e.insert("enc0.w", array![[w]]).unwrap();
        theta_e.insert("enc0.b", array![[b]]).unwrap();
        let mut ex = ParamStore::new();
        ex.insert("enc0.w", array![[expert_w]]).unwrap();
        ex.insert("enc0.b", array![[expert_b]]).unwrap();
        let (_, theta_c) = student.init_params(0).unwrap();
        let experts = ExpertSet::new(student.clone(), vec![ex], vec![theta_c.clone()]).unwrap();
        ModelState {
            aggregator: AggregatorConfig::new(AggregatorKind::Avg, 1, 1, 1),
            phi: ParamStore::new(),
            student,
            theta_e,
            theta_c,
            experts,
        }
    }

    #[test]
    fn inner_step_matches_hand_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (w, b, ew, eb, x) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let alpha = 0.3;
            let state = scalar_state(w, b, ew, eb);
            let cfg = AdaptConfig {
                alpha,
                n_su: 1,
                ..Default::default()
            };
            let out = dist_update(&state, &array![[x]], MaskSpec::none(), &cfg).unwrap();
            // L = (F - w x - b)^2, dL/dw = -2 x r, dL/db = -2 r.
            let r = (ew * x + eb) - (w * x + b);
            let w1 = w + alpha * 2.0 * x * r;
            let b1 = b + alpha * 2.0 * r;
            assert!((out.get("enc0.w").unwrap()[[0, 0]] - w1).abs() < 1e-10);
            assert!((out.get("enc0.b").unwrap()[[0, 0]] - b1).abs() < 1e-10);
        }
    }

    #[test]
    fn l2_norm_form_matches_hand_derivative_and_is_flat_at_zero() {
        let state = scalar_state(0.5, 0.0, 1.5, 1.0);
        let cfg = AdaptConfig {
            alpha: 0.1,
            loss_form: LossForm::L2Norm,
            n_su: 1,
            ..Default::default()
        };
        let out = dist_update(&state, &array![[2.0]], MaskSpec::none(), &cfg).unwrap();
        // r = 4 - 1 = 3 > 0, L = |r|, dL/dw = -x, dL/db = -1.
        assert!((out.get("enc0.w").unwrap()[[0, 0]] - 0.7).abs() < 1e-12);
        assert!((out.get("enc0.b").unwrap()[[0, 0]] - 0.1).abs() < 1e-12);
        let still = scalar_state(1.5, 1.0, 1.5, 1.0);
        assert_eq!(
            dist_update(&still, &array![[2.0]], MaskSpec::none(), &cfg).unwrap(),
            still.theta_e
        );
    }

    #[test]
    fn zero_residual_is_stationary() {
        let state = scalar_state(0.7, -0.2, 0.7, -0.2);
        let cfg = AdaptConfig {
            alpha: 1.0,
            n_su: 3,
            ..Default::default()
        };
        let out = dist_update(
            &state,
            &array![[1.0], [2.0], [-3.0]],
            MaskSpec::none(),
            &cfg,
        )
        .unwrap();
        assert_eq!(out, state.theta_e);
    }

    #[test]
    fn descent_with_step_halving() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for inst in 0..50 {
            let state = small_state(AggregatorKind::Transformer, inst);
            let x = rand_mat(&mut rng, 6, 4);
            let loss_at = |theta_e: &ParamStore| {
                let tape = Tape::new();
                let e = theta_e.bind(&tape, false);
                let c = state.theta_c.bind(&tape, false);
                let phi = state.phi.bind(&tape, false);
                let feats = state.experts.features_on(&tape, &x).unwrap();
                let t =
                    teacher_features(&state.aggregator, &phi, &feats, MaskSpec::none()).unwrap();
                distill_loss(
                    &state.student,
                    &AdaptConfig::default(),
                    &e,
                    &c,
                    t,
                    tape.constant(x.clone()),
                )
                .unwrap()
                .item()
            };
            let before = loss_at(&state.theta_e);
            let mut alpha = 1.0;
            let mut ok = false;
            for _ in 0..=10 {
                let cfg = AdaptConfig {
                    alpha,
                    ..Default::default()
                };
                let after = loss_at(&dist_update(&state, &x, MaskSpec::none(), &cfg).unwrap());
                if after <= before {
                    ok = true;
                    break;
                }
                alpha /= 2.0;
            }
            assert!(ok, "instance {inst}");
        }
    }

    #[test]
    fn masked_expert_parameters_do_not_matter() {
        let mut state = small_state(AggregatorKind::Transformer, 3);
        let x = rand_mat(&mut ChaCha8Rng::seed_from_u64(4), 5, 4);
        let cfg = AdaptConfig::default();
        for target in [
            DistillTarget::Features,
            DistillTarget::Logits,
            DistillTarget::Both,
        ] {
            let cfg = AdaptConfig {
                distill_target: target,
                ..cfg.clone()
            };
            let base = dist_update(&state, &x, MaskSpec::expert(1), &cfg).unwrap();
            for s in 0..5 {
                let (e, h) = state.student.init_params(1000 + s).unwrap();
                state.experts.extractors[1] = e;
                state.experts.heads[1] = h;
                assert_eq!(
                    dist_update(&state, &x, MaskSpec::expert(1), &cfg).unwrap(),
                    base
                );
            }
            let unmasked = dist_update(&state, &x, MaskSpec::none(), &cfg).unwrap();
            assert_ne!(unmasked, base);
        }
    }

    #[test]
    fn masked_expert_receives_zero_gradient() {
        let state = small_state(AggregatorKind::Transformer, 2);
        let x = rand_mat(&mut ChaCha8Rng::seed_from_u64(7), 5, 4);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let (feats, bound) = state.experts.features_tracked(&tape, xv).unwrap();
        let phi = state.phi.bind(&tape, true);
        let teacher =
            teacher_features(&state.aggregator, &phi, &feats, MaskSpec::expert(2)).unwrap();
        let e = state.theta_e.bind(&tape, true);
        let c = state.theta_c.bind(&tape, true);
        let adapted =
            dist_update_on(&state.student, &AdaptConfig::default(), &e, &c, teacher, xv).unwrap();
        let loss = state
            .student
            .logits(&adapted, &c, xv)
            .unwrap()
            .square()
            .mean_all();
        let all: Vec<_> = bound.iter().flat_map(|b| b.vars()).collect();
        let grads = tape.grad(loss, &all, false);
        let per = bound[0].len();
        for (k, g) in grads.iter().enumerate() {
            let norm: f64 = g.value().iter().map(|v| v * v).sum();
            if k / per == 2 {
                assert_eq!(norm, 0.0);
            }
        }
        let live: f64 = grads[..per]
            .iter()
            .map(|g| g.value().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(live > 0.0);
    }

    #[test]
    fn test_time_adapt_counts_and_keeps_classifier() {
        let state = small_state(AggregatorKind::Transformer, 1);
        let x = rand_mat(&mut ChaCha8Rng::seed_from_u64(2), 24, 4);
        let cfg = AdaptConfig {
            num_inner_steps: 2,
            ..Default::default()
        };
        let mut counter = 0;
        let a = test_time_adapt(&state, &x, &cfg, true, &mut counter).unwrap();
        assert_eq!(counter, 2);
        assert_eq!(a.theta_c, state.theta_c);
        assert_ne!(a.theta_e, state.theta_e);
        let small = rand_mat(&mut ChaCha8Rng::seed_from_u64(2), 5, 4);
        assert!(test_time_adapt(&state, &small, &cfg, true, &mut counter).is_err());
        assert!(test_time_adapt(&state, &small, &cfg, false, &mut counter).is_ok());
        assert_eq!(counter, 4);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut state = scalar_state(0.5, 0.0, 1.5, 1.0);
        state.experts.extractors[0]
            .set("enc0.b", array![[f64::NAN]])
            .unwrap();
        let cfg = AdaptConfig {
            n_su: 1,
            ..Default::default()
        };
        let err = dist_update(&state, &array![[1.0]], MaskSpec::none(), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
