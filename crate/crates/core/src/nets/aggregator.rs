//! Knowledge aggregators mixing `N` expert feature tokens into one feature
//! per input sample.
//!
//! Tokens are laid out sample-major: row `s * N + i` holds expert `i`'s
//! features for sample `s`. Attention is computed independently inside each
//! block of `N` rows, so a batch of samples is processed in one pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gelu, layernorm, linear, push_layernorm, push_linear, Bound, ParamStore};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Transformer,
    Max,
    Avg,
    MlpWs,
    MlpP,
}

impl AggregatorKind {
    pub fn is_parameter_free(&self) -> bool {
        matches!(self, AggregatorKind::Max | AggregatorKind::Avg)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Transformer => "transformer",
            AggregatorKind::Max => "max",
            AggregatorKind::Avg => "avg",
            AggregatorKind::MlpWs => "mlp_ws",
            AggregatorKind::MlpP => "mlp_p",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub num_experts: usize,
    /// Token width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Per-head width; `dim / heads` when absent.
    #[serde(default)]
    pub head_dim: Option<usize>,
    /// MLP hidden width; `2 * dim` when absent.
    #[serde(default)]
    pub inner_dim: Option<usize>,
    /// Expert feature width when it differs from `dim` (adds an input adapter).
    #[serde(default)]
    pub expert_dim: Option<usize>,
    /// Output width when it differs from `dim` (adds LayerNorm + projection).
    #[serde(default)]
    pub output_dim: Option<usize>,
}

impl AggregatorConfig {
    pub fn new(kind: AggregatorKind, num_experts: usize, dim: usize, heads: usize) -> Self {
        AggregatorConfig {
            kind,
            num_experts,
            dim,
            heads,
            head_dim: None,
            inner_dim: None,
            expert_dim: None,
            output_dim: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.dim / self.heads.max(1))
    }

    pub fn inner_dim(&self) -> usize {
        self.inner_dim.unwrap_or(2 * self.dim)
    }

    pub fn input_dim(&self) -> usize {
        self.expert_dim.unwrap_or(self.dim)
    }

    pub fn out_dim(&self) -> usize {
        self.output_dim.unwrap_or(self.dim)
    }

    fn has_adapter(&self) -> bool {
        self.input_dim() != self.dim
    }

    fn has_projection(&self) -> bool {
        self.out_dim() != self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_experts == 0 || self.dim == 0 {
            return bad("aggregator needs num_experts >= 1 and dim >= 1".into());
        }
        if self.kind.is_parameter_free() && (self.has_adapter() || self.has_projection()) {
            return bad(format!(
                "{} aggregator is parameter-free: expert_dim and output_dim must equal dim",
                self.kind.name()
            ));
        }
        if self.kind == AggregatorKind::Transformer {
            if self.heads == 0 {
                return bad("transformer aggregator needs at least one head".into());
            }
            if self.head_dim.is_none() && self.dim % self.heads != 0 {
                return bad(format!(
                    "dim {} not divisible by {} heads",
                    self.dim, self.heads
                ));
            }
            if self.head_dim() == 0 || self.heads * self.head_dim() > 16 * self.dim {
                return bad("unreasonable heads × head_dim".into());
            }
        }
        if self.inner_dim() == 0 {
            return bad("inner_dim must be > 0".into());
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = self.dim;
        if self.has_adapter() && !self.kind.is_parameter_free() {
            push_linear(&mut p, &mut rng, "adapter", self.input_dim(), d)?;
        }
        match self.kind {
            AggregatorKind::Max | AggregatorKind::Avg => {}
            AggregatorKind::Transformer => {
                let width = self.heads * self.head_dim();
                push_layernorm(&mut p, "ln1", d)?;
                p.insert("qkv.w", super::fan_in_uniform(&mut rng, d, d, 3 * width))?;
                push_linear(&mut p, &mut rng, "attn_out", width, d)?;
                push_layernorm(&mut p, "ln2", d)?;
                push_linear(&mut p, &mut rng, "mlp1", d, self.inner_dim())?;
                push_linear(&mut p, &mut rng, "mlp2", self.inner_dim(), d)?;
            }
            AggregatorKind::MlpWs => {
                push_linear(&mut p, &mut rng, "score1", d, d)?;
                push_linear(&mut p, &mut rng, "score2", d, 1)?;
            }
            AggregatorKind::MlpP => {
                push_linear(&mut p, &mut rng, "proj1", self.num_experts * d, d)?;
                push_linear(&mut p, &mut rng, "proj2", d, d)?;
            }
        }
        if self.has_projection() {
            push_layernorm(&mut p, "out_ln", d)?;
            push_linear(&mut p, &mut rng, "out", d, self.out_dim())?;
        }
        Ok(p)
    }
}

/// Interleaves `N` per-expert `[n × d]` feature matrices into `[n·N × d]`
/// sample-major tokens.
pub fn interleave_tokens<'t>(feats: &[Var<'t>]) -> Result<Var<'t>> {
    let first = feats.first().ok_or(Error::Empty("no expert features"))?;
    let (n, d) = first.shape();
    let k = feats.len();
    let mut acc: Option<Var<'t>> = None;
    for (i, f) in feats.iter().enumerate() {
        if f.shape() != (n, d) {
            return Err(Error::Shape {
                context: "expert features",
                expected: format!("{n}×{d}"),
                got: format!("{:?}", f.shape()),
            });
        }
        let placed = f.scatter_rows(k, i, n * k);
        acc = Some(match acc {
            Some(a) => a + placed,
            None => placed,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Aggregates `expert_feats` (one `[n × d_e]` matrix per expert) into
/// `[n × out_dim]`.
pub fn aggregate<'t>(
    cfg: &AggregatorConfig,
    phi: &Bound<'t>,
    expert_feats: &[Var<'t>],
) -> Result<Var<'t>> {
    if expert_feats.len() != cfg.num_experts {
        return Err(Error::Shape {
            context: "aggregator experts",
            expected: cfg.num_experts.to_string(),
            got: expert_feats.len().to_string(),
        });
    }
    let width = expert_feats[0].cols();
    if width != cfg.input_dim() {
        return Err(Error::Shape {
            context: "expert feature width (configure expert_dim for an adapter)",
            expected: cfg.input_dim().to_string(),
            got: width.to_string(),
        });
    }
    let tokens = interleave_tokens(expert_feats)?;
    aggregate_tokens(cfg, phi, tokens)
}

fn aggregate_tokens<'t>(
    cfg: &AggregatorConfig,
    phi: &Bound<'t>,
    tokens: Var<'t>,
) -> Result<Var<'t>> {
    let n_tok = cfg.num_experts;
    let mut z = tokens;
    if cfg.has_adapter() {
        z = linear(phi, "adapter", z)?;
    }
    let pooled = match cfg.kind {
        AggregatorKind::Avg => z.pool_rows(n_tok).scale(1.0 / n_tok as f64),
        AggregatorKind::Max => {
            let mask = block_argmax_mask(&z.value(), n_tok);
            (z * z.tape().constant(mask)).pool_rows(n_tok)
        }
        AggregatorKind::Transformer => {
            let z_out = encoder_layer(cfg, phi, z)?;
            z_out.pool_rows(n_tok).scale(1.0 / n_tok as f64)
        }
        AggregatorKind::MlpWs => {
            let h = linear(phi, "score1", z)?.relu();
            let scores = linear(phi, "score2", h)?;
            let samples = z.rows() / n_tok;
            let weights = scores
                .reshape(samples, n_tok)
                .softmax_rows()
                .reshape(samples * n_tok, 1);
            z.mul_col(weights).pool_rows(n_tok)
        }
        AggregatorKind::MlpP => {
            let samples = z.rows() / n_tok;
            let flat = z.reshape(samples, n_tok * z.cols());
            let h = linear(phi, "proj1", flat)?.relu();
            linear(phi, "proj2", h)?
        }
    };
    if cfg.has_projection() {
        let normed = layernorm(phi, "out_ln", pooled)?;
        return linear(phi, "out", normed);
    }
    Ok(pooled)
}

/// Pre-LN transformer encoder layer over blocks of `num_experts` tokens.
fn encoder_layer<'t>(cfg: &AggregatorConfig, phi: &Bound<'t>, z0: Var<'t>) -> Result<Var<'t>> {
    let n_tok = cfg.num_experts;
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let width = heads * dk;
    let a = layernorm(phi, "ln1", z0)?;
    let qkv = a.matmul(phi.get("qkv.w")?);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat: Option<Var<'t>> = None;
    for h in 0..heads {
        let q = qkv.slice_cols(h * dk, dk);
        let k = qkv.slice_cols(width + h * dk, dk);
        let v = qkv.slice_cols(2 * width + h * dk, dk);
        let attn = q.block_qkt(k, n_tok).scale(scale).softmax_rows();
        let out = attn.block_av(v, n_tok).pad_cols(h * dk, width);
        concat = Some(match concat {
            Some(c) => c + out,
            None => out,
        });
    }
    let msa = linear(phi, "attn_out", concat.expect("heads >= 1"))?;
    let z1 = msa + z0;
    let b = layernorm(phi, "ln2", z1)?;
    let m = linear(phi, "mlp2", gelu(linear(phi, "mlp1", b)?))?;
    Ok(m + z1)
}

/// One-hot mask selecting, per block and column, the first maximal row.
fn block_argmax_mask(z: &Mat, n_tok: usize) -> Mat {
    let mut mask = Mat::zeros(z.dim());
    for b in 0..z.nrows() / n_tok {
        for c in 0..z.ncols() {
            let mut best = b * n_tok;
            for r in b * n_tok + 1..(b + 1) * n_tok {
                if z[[r, c]] > z[[best, c]] {
                    best = r;
                }
            }
            mask[[best, c]] = 1.0;
        }
    }
    mask
}

/// Value-level aggregation of constant expert features.
pub fn aggregate_values(
    cfg: &AggregatorConfig,
    phi: &ParamStore,
    expert_feats: &[Mat],
) -> Result<Mat> {
    let tape = Tape::new();
    let p = phi.bind(&tape, false);
    let feats: Vec<Var<'_>> = expert_feats
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    Ok(aggregate(cfg, &p, &feats)?.to_mat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::LAYERNORM_EPS;
    use ndarray::{array, Axis};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn avg_and_max_closed_form() {
        let avg = AggregatorConfig::new(AggregatorKind::Avg, 2, 2, 1);
        let phi = avg.init_params(0).unwrap();
        assert!(phi.is_empty());
        let out = aggregate_values(&avg, &phi, &[array![[1.0, 2.0]], array![[3.0, 4.0]]]).unwrap();
        assert_eq!(out, array![[2.0, 3.0]]);

        let max = AggregatorConfig::new(AggregatorKind::Max, 2, 2, 1);
        assert!(max.init_params(0).unwrap().is_empty());
        let out = aggregate_values(
            &max,
            &ParamStore::new(),
            &[array![[1.0, 5.0]], array![[3.0, 4.0]]],
        )
        .unwrap();
        assert_eq!(out, array![[3.0, 5.0]]);
    }

    #[test]
    fn expert_count_mismatch_is_an_error() {
        let cfg = AggregatorConfig::new(AggregatorKind::Avg, 3, 2, 1);
        let err = aggregate_values(&cfg, &ParamStore::new(), &[array![[1.0, 2.0]]]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn width_mismatch_without_adapter_is_an_error() {
        let cfg = AggregatorConfig::new(AggregatorKind::Transformer, 1, 4, 2);
        let phi = cfg.init_params(0).unwrap();
        assert!(aggregate_values(&cfg, &phi, &[Mat::zeros((1, 6))]).is_err());
        let with_adapter = AggregatorConfig {
            expert_dim: Some(6),
            ..cfg
        };
        let phi = with_adapter.init_params(0).unwrap();
        assert_eq!(
            aggregate_values(&with_adapter, &phi, &[Mat::zeros((2, 6))])
                .unwrap()
                .dim(),
            (2, 4)
        );
    }

    #[test]
    fn projection_changes_output_width() {
        for kind in [
            AggregatorKind::Transformer,
            AggregatorKind::MlpWs,
            AggregatorKind::MlpP,
        ] {
            let cfg = AggregatorConfig {
                output_dim: Some(3),
                ..AggregatorConfig::new(kind, 2, 4, 2)
            };
            let phi = cfg.init_params(1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let feats = vec![rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4)];
            assert_eq!(aggregate_values(&cfg, &phi, &feats).unwrap().dim(), (5, 3));
        }
    }

    #[test]
    fn transformer_is_permutation_invariant() {
        let cfg = AggregatorConfig::new(AggregatorKind::Transformer, 5, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let phi = cfg.init_params(trial).unwrap();
            let feats: Vec<Mat> = (0..5).map(|_| rand_mat(&mut rng, 3, 8)).collect();
            let base = aggregate_values(&cfg, &phi, &feats).unwrap();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Mat> = perm.iter().map(|&i| feats[i].clone()).collect();
            let out = aggregate_values(&cfg, &phi, &shuffled).unwrap();
            let diff = (&out - &base)
                .mapv(f64::abs)
                .fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff <= 1e-6, "trial {trial}: {diff}");
        }
    }

    #[test]
    fn samples_are_aggregated_independently() {
        let cfg = AggregatorConfig::new(AggregatorKind::Transformer, 3, 4, 2);
        let phi = cfg.init_params(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 4)).collect();
        let batch = aggregate_values(&cfg, &phi, &feats).unwrap();
        for s in 0..4 {
            let single: Vec<Mat> = feats.iter().map(|f| f.select(Axis(0), &[s])).collect();
            let one = aggregate_values(&cfg, &phi, &single).unwrap();
            for c in 0..4 {
                assert!((one[[0, c]] - batch[[s, c]]).abs() < 1e-12);
            }
        }
    }

    fn ln_oracle(x: &[f64], g: &Mat, b: &Mat) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + LAYERNORM_EPS).sqrt() * g[[0, j]] + b[[0, j]])
            .collect()
    }

    fn affine_oracle(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
        (0..w.ncols())
            .map(|j| {
                b[[0, j]]
                    + x.iter()
                        .enumerate()
                        .map(|(i, v)| v * w[[i, j]])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Straight-line single-token encoder: softmax over one key is exactly 1,
    /// so each head returns its own value vector.
    fn single_token_oracle(cfg: &AggregatorConfig, phi: &ParamStore, z0: &[f64]) -> Vec<f64> {
        let g = |n: &str| phi.get(n).unwrap();
        let a = ln_oracle(z0, g("ln1.g"), g("ln1.b"));
        let width = cfg.heads * cfg.head_dim();
        let wqkv = g("qkv.w");
        let v: Vec<f64> = (0..width)
            .map(|j| {
                a.iter()
                    .enumerate()
                    .map(|(i, x)| x * wqkv[[i, 2 * width + j]])
                    .sum()
            })
            .collect();
        let msa = affine_oracle(&v, g("attn_out.w"), g("attn_out.b"));
        let z1: Vec<f64> = msa.iter().zip(z0).map(|(m, z)| m + z).collect();
        let b = ln_oracle(&z1, g("ln2.g"), g("ln2.b"));
        let h: Vec<f64> = affine_oracle(&b, g("mlp1.w"), g("mlp1.b"))
            .into_iter()
            .map(|x| {
                0.5 * x
                    * (1.0
                        + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
            })
            .collect();
        let m = affine_oracle(&h, g("mlp2.w"), g("mlp2.b"));
        m.iter().zip(&z1).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn single_expert_transformer_matches_oracle() {
        let cfg = AggregatorConfig::new(AggregatorKind::Transformer, 1, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let mut phi = cfg.init_params(seed).unwrap();
            // Non-trivial LayerNorm affine parameters.
            for n in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
                phi.set(n, rand_mat(&mut rng, 1, 8)).unwrap();
            }
            let x = rand_mat(&mut rng, 2, 8);
            let out = aggregate_values(&cfg, &phi, &[x.clone()]).unwrap();
            for s in 0..2 {
                let expect = single_token_oracle(&cfg, &phi, x.row(s).as_slice().unwrap());
                for (j, e) in expect.iter().enumerate() {
                    assert!((out[[s, j]] - e).abs() <= 1e-6, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn aggregator_gradients_match_central_differences() {
        for kind in [
            AggregatorKind::Transformer,
            AggregatorKind::MlpWs,
            AggregatorKind::MlpP,
        ] {
            let cfg = AggregatorConfig::new(kind, 3, 8, 2);
            let phi = cfg.init_params(11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let feats: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 2, 8)).collect();
            let weight = rand_mat(&mut rng, 2, 8);
            let loss = |p: &ParamStore| {
                let out = aggregate_values(&cfg, p, &feats).unwrap();
                (&out * &weight).sum()
            };
            let tape = Tape::new();
            let bound = phi.bind(&tape, true);
            let fs: Vec<_> = feats.iter().map(|m| tape.constant(m.clone())).collect();
            let out = aggregate(&cfg, &bound, &fs).unwrap();
            let l = (out * tape.constant(weight.clone())).sum_all();
            let g = bound.store_from(&tape.grad(l, &bound.vars(), false));
            let flat = phi.flatten();
            let gflat = g.flatten();
            let eps = 1e-6;
            for k in (0..flat.len()).step_by(7) {
                let mut up = flat.clone();
                up[k] += eps;
                let mut dn = flat.clone();
                dn[k] -= eps;
                let fd = (loss(&phi.unflatten(&up).unwrap()) - loss(&phi.unflatten(&dn).unwrap()))
                    / (2.0 * eps);
                let rel = (fd - gflat[k]).abs() / fd.abs().max(gflat[k].abs()).max(1e-4);
                assert!(rel < 1e-5, "{kind:?} param {k}: fd={fd} ad={}", gflat[k]);
            }
        }
    }

    #[test]
    fn transformer_validation() {
        let bad = AggregatorConfig::new(AggregatorKind::Transformer, 2, 10, 4);
        assert!(bad.validate().is_err());
        let ok = AggregatorConfig {
            head_dim: Some(3),
            ..bad
        };
        assert!(ok.validate().is_ok());
        let zero_heads = AggregatorConfig::new(AggregatorKind::Transformer, 2, 8, 0);
        assert!(zero_heads.validate().is_err());
    }
}
