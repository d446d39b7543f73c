//! Differentiable models: the student (extractor + classifier), experts, and
//! the knowledge aggregators, all parameterised through [`ParamStore`].

mod aggregator;
mod experts;
mod student;

pub use aggregator::{
    aggregate, aggregate_values, interleave_tokens, AggregatorConfig, AggregatorKind,
};
pub use experts::ExpertSet;
pub use student::{Activation, NormStats, StudentConfig};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::synthdata::Labels;

/// Named 2-D parameter arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name:?}"
            )));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|m| m.iter().copied())
            .collect()
    }

    /// Store with this store's names and shapes filled from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                context: "unflatten",
                expected: self.num_scalars().to_string(),
                got: flat.len().to_string(),
            });
        }
        let mut out = ParamStore::new();
        let mut at = 0;
        for (name, m) in &self.entries {
            let chunk = flat[at..at + m.len()].to_vec();
            at += m.len();
            out.entries.insert(
                name.clone(),
                Mat::from_shape_vec(m.dim(), chunk).expect("shape checked"),
            );
        }
        Ok(out)
    }

    /// Replaces values, keeping names and shapes fixed.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))?;
        if slot.dim() != value.dim() {
            return Err(Error::Shape {
                context: "ParamStore::set",
                expected: format!("{:?}", slot.dim()),
                got: format!("{:?}", value.dim()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ma), (b, mb))| a == b && ma.dim() == mb.dim())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|m| m.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Hex SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every array onto `tape`, as parameters or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    /// Keeps only the named entries, in the given order.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for n in names {
            out.insert(n, self.get(n)?.clone())?;
        }
        Ok(out)
    }

    /// Union of two stores with disjoint names.
    pub fn merged(&self, other: &ParamStore) -> Result<ParamStore> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k, v.clone())?;
        }
        Ok(out)
    }
}

/// A [`ParamStore`] living on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Same names, new variables (in order).
    pub fn with_vars(&self, vars: Vec<Var<'t>>) -> Bound<'t> {
        assert_eq!(vars.len(), self.vars.len());
        Bound {
            vars: self.vars.keys().cloned().zip(vars).collect(),
        }
    }

    /// Current values as a store.
    pub fn to_store(&self) -> ParamStore {
        ParamStore {
            entries: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), v.to_mat()))
                .collect(),
        }
    }

    /// Store built from gradient vars aligned with this binding.
    pub fn store_from(&self, vars: &[Var<'t>]) -> ParamStore {
        ParamStore {
            entries: self
                .vars
                .keys()
                .cloned()
                .zip(vars.iter().map(|v| v.to_mat()))
                .collect(),
        }
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`.
pub(crate) fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Adds a fan-in-scaled affine layer `name.w`, `name.b`.
pub(crate) fn push_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        fan_in_uniform(rng, fan_in, fan_in, fan_out),
    )?;
    store.insert(format!("{name}.b"), fan_in_uniform(rng, fan_in, 1, fan_out))
}

pub(crate) fn push_layernorm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Mat::ones((1, dim)))?;
    store.insert(format!("{name}.b"), Mat::zeros((1, dim)))
}

pub(crate) fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            context: "linear layer input",
            expected: format!("{} columns for {name}", w.rows()),
            got: x.cols().to_string(),
        });
    }
    Ok(x.matmul(w).add_row(b))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Row-wise layer normalisation with learnable gain and bias.
pub(crate) fn layernorm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    let d = x.cols() as f64;
    let mean = x.sum_cols().scale(1.0 / d);
    let centered = x - mean.broadcast_cols(x.cols());
    let var = centered.square().sum_cols().scale(1.0 / d);
    let inv = var.add_scalar(LAYERNORM_EPS).powf(-0.5);
    Ok(centered.mul_col(inv).mul_row(g).add_row(b))
}

/// Mean cross-entropy against class labels, or mean squared error against
/// real targets (single-output models).
pub fn supervised_loss<'t>(outputs: Var<'t>, labels: &Labels) -> Result<Var<'t>> {
    let tape = outputs.tape();
    let n = outputs.rows();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "labels",
            expected: n.to_string(),
            got: labels.len().to_string(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("loss batch"));
    }
    match labels {
        Labels::Classes(ys) => {
            let c = outputs.cols();
            let mut onehot = Mat::zeros((n, c));
            for (r, &y) in ys.iter().enumerate() {
                if y as usize >= c {
                    return Err(Error::InvalidArgument(format!(
                        "label {y} out of range for {c} classes"
                    )));
                }
                onehot[[r, y as usize]] = 1.0;
            }
            Ok((outputs.log_softmax_rows() * tape.constant(onehot))
                .sum_all()
                .scale(-1.0 / n as f64))
        }
        Labels::Values(vs) => {
            if outputs.cols() != 1 {
                return Err(Error::Shape {
                    context: "regression outputs",
                    expected: "1 column".into(),
                    got: outputs.cols().to_string(),
                });
            }
            let target = Mat::from_shape_vec((n, 1), vs.clone()).expect("n values");
            Ok((outputs - tape.constant(target)).square().mean_all())
        }
    }
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: Var<'_>) -> Var<'_> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = (x + x.powf(3.0).scale(0.044715)).scale(C);
    (x * inner.tanh().add_scalar(1.0)).scale(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn insert_rejects_duplicates() {
        let mut p = ParamStore::new();
        p.insert("a", array![[1.0]]).unwrap();
        assert!(p.insert("a", array![[2.0]]).is_err());
    }

    #[test]
    fn digest_depends_on_values_and_names() {
        let mut a = ParamStore::new();
        a.insert("w", array![[1.0, 2.0]]).unwrap();
        let mut b = ParamStore::new();
        b.insert("v", array![[1.0, 2.0]]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let tape = Tape::new();
        let out = tape.constant(Mat::zeros((4, 5)));
        let l = supervised_loss(out, &Labels::Classes(vec![0, 1, 4, 2])).unwrap();
        assert!((l.item() - 5f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 12)) {
            let mut p = ParamStore::new();
            p.insert("a", Mat::from_shape_vec((2, 3), vals[..6].to_vec()).unwrap()).unwrap();
            p.insert("b", Mat::from_shape_vec((6, 1), vals[6..].to_vec()).unwrap()).unwrap();
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
