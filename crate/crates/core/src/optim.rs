//! Adam and a small minimisation loop over [`ParamStore`]s.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::InvalidArgument(
                "Adam: parameter/gradient layout mismatch".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name)?;
            let mut m = self.m.get(&name)?.clone();
            let mut v = self.v.get(&name)?.clone();
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut p = params.get(&name)?.clone();
            ndarray::Zip::from(&mut p)
                .and(&m)
                .and(&v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
            params.set(&name, p)?;
            self.m.set(&name, m)?;
            self.v.set(&name, v)?;
        }
        Ok(())
    }
}

/// Runs one Adam step per batch index, differentiating `loss` with respect to
/// every entry of `params`. Returns the mean loss.
pub fn adam_minimize<F>(
    params: &mut ParamStore,
    opt: &mut Adam,
    lr: f64,
    batches: usize,
    mut loss: F,
) -> Result<f64>
where
    F: for<'t> FnMut(&'t Tape, &Bound<'t>, usize) -> Result<Var<'t>>,
{
    let mut total = 0.0;
    for b in 0..batches {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let l = loss(&tape, &bound, b)?;
        let value = l.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
                diagnostic: format!(
                    "value {value} at batch {b} with learning rate {lr}; try a smaller lr"
                ),
            });
        }
        let grads = bound.store_from(&tape.grad(l, &bound.vars(), false));
        opt.step(params, &grads, lr)?;
        total += value;
    }
    Ok(if batches > 0 {
        total / batches as f64
    } else {
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", array![[1.0, -1.0]]).unwrap();
        let mut g = ParamStore::new();
        g.insert("w", array![[3.0, -0.5]]).unwrap();
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", array![[4.0, -3.0]]).unwrap();
        let mut opt = Adam::new(&p);
        let target = array![[1.0, 2.0]];
        adam_minimize(&mut p, &mut opt, 0.05, 2000, |tape, b, _| {
            Ok((b.get("w")? - tape.constant(target.clone()))
                .square()
                .sum_all())
        })
        .unwrap();
        let w = p.get("w").unwrap();
        assert!((w - &target).iter().all(|d| d.abs() < 1e-3));
    }
}
