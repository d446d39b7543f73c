use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Bound, ParamStore, StudentConfig};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Frozen domain experts sharing one architecture. Only their feature
/// extractors are used after pretraining; classifier heads are kept for
/// reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    pub cfg: StudentConfig,
    pub extractors: Vec<ParamStore>,
    pub heads: Vec<ParamStore>,
}

impl ExpertSet {
    pub fn new(
        cfg: StudentConfig,
        extractors: Vec<ParamStore>,
        heads: Vec<ParamStore>,
    ) -> Result<Self> {
        if extractors.is_empty() {
            return Err(Error::Empty("expert set"));
        }
        if heads.len() != extractors.len() {
            return Err(Error::InvalidArgument(
                "one head per expert required".into(),
            ));
        }
        for (e, h) in extractors.iter().zip(&heads) {
            cfg.check_params(e, Some(h))?;
        }
        Ok(ExpertSet {
            cfg,
            extractors,
            heads,
        })
    }

    pub fn len(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extractors.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// Features of every expert on `x`.
    pub fn features(&self, x: &Mat) -> Result<Vec<Mat>> {
        self.extractors
            .iter()
            .map(|e| self.cfg.features_of(e, x))
            .collect()
    }

    /// Features as tape constants.
    pub fn features_on<'t>(&self, tape: &'t Tape, x: &Mat) -> Result<Vec<Var<'t>>> {
        Ok(self
            .features(x)?
            .into_iter()
            .map(|m| tape.constant(m))
            .collect())
    }

    /// Features with every expert's extractor bound as a trainable parameter,
    /// for checking that no gradient reaches frozen experts.
    pub fn features_tracked<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<(Vec<Var<'t>>, Vec<Bound<'t>>)> {
        let mut feats = Vec::with_capacity(self.len());
        let mut bound = Vec::with_capacity(self.len());
        for e in &self.extractors {
            let b = e.bind(tape, true);
            feats.push(self.cfg.features(&b, x)?);
            bound.push(b);
        }
        Ok((feats, bound))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (e, c) in self.extractors.iter().zip(&self.heads) {
            h.update(e.digest());
            h.update(c.digest());
        }
        hex::encode(h.finalize())
    }
}
