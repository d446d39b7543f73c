use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{linear, push_linear, Bound, ParamStore};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::synthdata::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

/// Architecture of a student (or same-shaped expert): an MLP feature
/// extractor ending in a linear `feature_dim` layer, followed by an affine
/// prediction head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub task: Task,
    #[serde(default)]
    pub activation: Activation,
    /// Per-feature normalisation after every hidden layer, with statistics
    /// taken from the current batch (or supplied explicitly).
    #[serde(default)]
    pub normalize: bool,
}

/// Mean and variance of every normalised hidden layer.
pub type NormStats = Vec<(Mat, Mat)>;

const NORM_EPS: f64 = 1e-5;

enum Norm<'a> {
    Batch,
    Fixed(&'a NormStats),
    Collect(&'a mut NormStats),
}

impl StudentConfig {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        feature_dim: usize,
        task: Task,
    ) -> Result<Self> {
        let cfg = StudentConfig {
            input_dim,
            hidden_dims,
            feature_dim,
            task,
            activation: Activation::Relu,
            normalize: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "student input_dim and feature_dim must be > 0".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer of width 0".into()));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::InvalidConfig(format!(
                    "classification head needs at least 2 classes, got {num_classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_outputs(&self) -> usize {
        self.task.output_dim()
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    /// Names of the extractor parameters, in layer order.
    pub fn extractor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..=self.hidden_dims.len() {
            names.push(format!("enc{i}.w"));
            names.push(format!("enc{i}.b"));
            if self.normalize && i < self.hidden_dims.len() {
                names.push(format!("norm{i}.g"));
                names.push(format!("norm{i}.b"));
            }
        }
        names
    }

    /// Fresh `(extractor, classifier)` parameters.
    pub fn init_params(&self, seed: u64) -> Result<(ParamStore, ParamStore)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.layer_dims();
        let mut enc = ParamStore::new();
        for i in 0..dims.len() - 1 {
            push_linear(&mut enc, &mut rng, &format!("enc{i}"), dims[i], dims[i + 1])?;
            if self.normalize && i < self.hidden_dims.len() {
                super::push_layernorm(&mut enc, &format!("norm{i}"), dims[i + 1])?;
            }
        }
        let mut cls = ParamStore::new();
        push_linear(
            &mut cls,
            &mut rng,
            "cls",
            self.feature_dim,
            self.num_outputs(),
        )?;
        Ok((enc, cls))
    }

    /// Checks that stores carry exactly the expected names and shapes.
    pub fn check_params(
        &self,
        extractor: &ParamStore,
        classifier: Option<&ParamStore>,
    ) -> Result<()> {
        let (e, c) = self.init_params(0)?;
        if !extractor.same_layout(&e) {
            return Err(Error::Shape {
                context: "extractor parameters",
                expected: format!("{:?}", e.names().collect::<Vec<_>>()),
                got: format!("{:?}", extractor.names().collect::<Vec<_>>()),
            });
        }
        if let Some(cls) = classifier {
            if !cls.same_layout(&c) {
                return Err(Error::Shape {
                    context: "classifier parameters",
                    expected: "cls.w, cls.b".into(),
                    got: format!("{:?}", cls.names().collect::<Vec<_>>()),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, x: Var<'_>) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                context: "student input",
                expected: format!("{} columns", self.input_dim),
                got: x.cols().to_string(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::Empty("student input batch"));
        }
        Ok(())
    }

    fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>, mut norm: Norm<'_>) -> Result<Var<'t>> {
        self.check_input(x)?;
        let hidden = self.hidden_dims.len();
        let mut h = x;
        for i in 0..=hidden {
            h = linear(p, &format!("enc{i}"), h)?;
            if i < hidden {
                if self.normalize {
                    h = self.normalize_layer(p, i, h, &mut norm)?;
                }
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }

    fn normalize_layer<'t>(
        &self,
        p: &Bound<'t>,
        i: usize,
        h: Var<'t>,
        norm: &mut Norm<'_>,
    ) -> Result<Var<'t>> {
        let tape = h.tape();
        let n = h.rows() as f64;
        let (mean, var) = match norm {
            Norm::Fixed(stats) => {
                let (m, v) = stats.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("missing norm stats for layer {i}"))
                })?;
                (tape.constant(m.clone()), tape.constant(v.clone()))
            }
            Norm::Batch | Norm::Collect(_) => {
                let mean = h.sum_rows().scale(1.0 / n);
                let c = h - mean.broadcast_rows(h.rows());
                let var = c.square().sum_rows().scale(1.0 / n);
                if let Norm::Collect(out) = norm {
                    out.push((mean.to_mat(), var.to_mat()));
                }
                (mean, var)
            }
        };
        let centered = h - mean.broadcast_rows(h.rows());
        let inv = var.add_scalar(NORM_EPS).powf(-0.5);
        let g = p.get(&format!("norm{i}.g"))?;
        let b = p.get(&format!("norm{i}.b"))?;
        Ok(centered.mul_row(inv).mul_row(g).add_row(b))
    }

    /// Extractor output `[batch × feature_dim]`; normalised layers use the
    /// statistics of `x` itself.
    pub fn features<'t>(&self, theta_e: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.run(theta_e, x, Norm::Batch)
    }

    /// Extractor output with externally supplied normalisation statistics.
    pub fn features_with_stats<'t>(
        &self,
        theta_e: &Bound<'t>,
        x: Var<'t>,
        stats: &NormStats,
    ) -> Result<Var<'t>> {
        self.run(theta_e, x, Norm::Fixed(stats))
    }

    pub fn head<'t>(&self, theta_c: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        if features.cols() != self.feature_dim {
            return Err(Error::Shape {
                context: "classifier input",
                expected: format!("{} columns", self.feature_dim),
                got: features.cols().to_string(),
            });
        }
        linear(theta_c, "cls", features)
    }

    pub fn logits<'t>(
        &self,
        theta_e: &Bound<'t>,
        theta_c: &Bound<'t>,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let f = self.features(theta_e, x)?;
        self.head(theta_c, f)
    }

    /// Value-level feature extraction.
    pub fn features_of(&self, theta_e: &ParamStore, x: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let p = theta_e.bind(&tape, false);
        Ok(self.features(&p, tape.constant(x.clone()))?.to_mat())
    }

    /// Value-level predictions (logits or regression outputs).
    pub fn predict(&self, theta_e: &ParamStore, theta_c: &ParamStore, x: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let e = theta_e.bind(&tape, false);
        let c = theta_c.bind(&tape, false);
        Ok(self.logits(&e, &c, tape.constant(x.clone()))?.to_mat())
    }

    /// Predictions with normalisation statistics fixed to `stats`.
    pub fn predict_with_stats(
        &self,
        theta_e: &ParamStore,
        theta_c: &ParamStore,
        x: &Mat,
        stats: &NormStats,
    ) -> Result<Mat> {
        let tape = Tape::new();
        let e = theta_e.bind(&tape, false);
        let c = theta_c.bind(&tape, false);
        let f = self.features_with_stats(&e, tape.constant(x.clone()), stats)?;
        Ok(self.head(&c, f)?.to_mat())
    }

    /// Normalisation statistics measured on `x`; empty when `normalize` is off.
    pub fn norm_stats(&self, theta_e: &ParamStore, x: &Mat) -> Result<NormStats> {
        let mut stats = Vec::new();
        if self.normalize {
            let tape = Tape::new();
            let p = theta_e.bind(&tape, false);
            self.run(&p, tape.constant(x.clone()), Norm::Collect(&mut stats))?;
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn task(c: usize) -> Task {
        Task::Classification { num_classes: c }
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let cfg = StudentConfig::new(3, vec![4], 2, task(3)).unwrap();
        let (e, _) = cfg.init_params(1).unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let f = cfg.features_of(&e.zeros_like(), &x).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let mut cfg = StudentConfig::new(2, vec![], 2, task(2)).unwrap();
        cfg.activation = Activation::Linear;
        let mut e = ParamStore::new();
        e.insert("enc0.w", Mat::eye(2)).unwrap();
        e.insert("enc0.b", Mat::zeros((1, 2))).unwrap();
        assert_eq!(
            cfg.features_of(&e, &array![[1.0, 2.0]]).unwrap(),
            array![[1.0, 2.0]]
        );
    }

    #[test]
    fn zero_classifier_outputs_bias() {
        let cfg = StudentConfig::new(3, vec![5], 4, task(3)).unwrap();
        let (e, mut c) = cfg.init_params(2).unwrap();
        c.set("cls.w", Mat::zeros((4, 3))).unwrap();
        c.set("cls.b", array![[0.1, -0.2, 0.3]]).unwrap();
        let x = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let out = cfg.predict(&e, &c, &x).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row.to_vec(), vec![0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn single_class_rejected() {
        assert!(StudentConfig::new(3, vec![4], 2, task(1)).is_err());
        assert!(StudentConfig::new(3, vec![4], 2, Task::Regression).is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = StudentConfig::new(3, vec![4], 2, task(2)).unwrap();
        let (e, _) = cfg.init_params(0).unwrap();
        assert!(matches!(
            cfg.features_of(&e, &Mat::zeros((2, 4))),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = StudentConfig::new(16, vec![64, 64], 32, task(5)).unwrap();
        let a = cfg.init_params(0).unwrap();
        let b = cfg.init_params(0).unwrap();
        assert_eq!(a, b);
        assert!(a.0.all_finite() && a.1.all_finite());
        assert_ne!(a.0.digest(), cfg.init_params(1).unwrap().0.digest());
    }

    #[test]
    fn features_jacobian_matches_central_differences() {
        let mut cfg = StudentConfig::new(3, vec![5, 4], 3, task(2)).unwrap();
        cfg.activation = Activation::Tanh;
        let (e, _) = cfg.init_params(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Mat::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        // Jacobian row by row: gradient of each output coordinate.
        for (oi, oj) in [(0, 0), (1, 2), (0, 1)] {
            let tape = Tape::new();
            let p = e.bind(&tape, true);
            let f = cfg.features(&p, tape.constant(x.clone())).unwrap();
            let mut sel = Mat::zeros(f.shape());
            sel[[oi, oj]] = 1.0;
            let y = (f * tape.constant(sel)).sum_all();
            let grads = p.store_from(&tape.grad(y, &p.vars(), false));
            let eps = 1e-6;
            for (name, m) in e.iter() {
                for k in 0..m.len() {
                    let bump = |d: f64| {
                        let mut q = e.clone();
                        let mut mm = m.clone();
                        mm.as_slice_mut().unwrap()[k] += d;
                        q.set(name, mm).unwrap();
                        cfg.features_of(&q, &x).unwrap()[[oi, oj]]
                    };
                    let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let ad = grads.get(name).unwrap().as_slice().unwrap()[k];
                    let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                    assert!(rel < 1e-5, "{name}[{k}] fd={fd} ad={ad}");
                }
            }
        }
    }

    #[test]
    fn normalized_variant_uses_supplied_stats() {
        let mut cfg = StudentConfig::new(3, vec![4], 2, task(2)).unwrap();
        cfg.normalize = true;
        let (e, c) = cfg.init_params(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let stats = cfg.norm_stats(&e, &x).unwrap();
        assert_eq!(stats.len(), 1);
        let batch = cfg.predict(&e, &c, &x).unwrap();
        let fixed = cfg.predict_with_stats(&e, &c, &x, &stats).unwrap();
        for (a, b) in batch.iter().zip(fixed.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
