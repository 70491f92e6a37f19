//! A small pre-norm decoder-only transformer with hand-written gradients.
//!
//! Per block: `x += proj(attn(ln1(x)))`, then `x += mlp(ln2(x))`, with a
//! 4× GELU MLP. Positions come either from a learned table or from ALiBi
//! biases on the attention scores. The language-model head is untied.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Scalar};
use super::TrainError;
use crate::data::TokenBatch;
use crate::params::{LayoutManifest, ParamVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyLMConfig {
    pub vocab_size: usize,
    /// Maximum number of input positions per sequence.
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub use_alibi: bool,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for TinyLMConfig {
    fn default() -> Self {
        Self { vocab_size: 256, context_len: 64, n_layers: 2, d_model: 64, n_heads: 4, use_alibi: true, seed: 0 }
    }
}

impl TinyLMConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.context_len < 2 {
            return bad(format!("context_len must be at least 2, got {}", self.context_len));
        }
        for (name, v) in [("n_layers", self.n_layers), ("d_model", self.d_model), ("n_heads", self.n_heads)] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        Ok(())
    }
}

/// ALiBi slope of head `h` (0-based): `2^(-8 (h + 1) / n_heads)`.
pub fn alibi_slope(h: usize, n_heads: usize) -> f64 {
    2f64.powf(-8.0 * (h + 1) as f64 / n_heads as f64)
}

/// Per-head `t×t` additive attention bias, row-major. Row `i` is the query
/// position; keys after the query are masked with `-inf`.
pub fn alibi_bias(n_heads: usize, t: usize) -> Vec<Vec<f64>> {
    (0..n_heads)
        .map(|h| {
            let slope = alibi_slope(h, n_heads);
            let mut m = vec![f64::NEG_INFINITY; t * t];
            for i in 0..t {
                for j in 0..=i {
                    m[i * t + j] = -slope * (i - j) as f64;
                }
            }
            m
        })
        .collect()
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln1_w: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    proj_w: Range<usize>,
    proj_b: Range<usize>,
    ln2_w: Range<usize>,
    ln2_b: Range<usize>,
    fc_w: Range<usize>,
    fc_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct TinyLM {
    config: TinyLMConfig,
    manifest: LayoutManifest,
    wte: Range<usize>,
    wpe: Option<Range<usize>>,
    blocks: Vec<BlockLayout>,
    lnf_w: Range<usize>,
    lnf_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

struct BlockCache<F> {
    x_in: Vec<F>,
    ln1: ops::LayerNormCache<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    ln2: ops::LayerNormCache<F>,
    a2: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

impl TinyLM {
    pub fn new(config: TinyLMConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (v, d, c) = (config.vocab_size, config.d_model, config.context_len);
        let mut m = LayoutManifest::new();
        let wte = m.push("wte", &[v, d]);
        let wpe = (!config.use_alibi).then(|| m.push("wpe", &[c, d]));
        let blocks = (0..config.n_layers)
            .map(|l| BlockLayout {
                ln1_w: m.push(format!("h{l}.ln1.w"), &[d]),
                ln1_b: m.push(format!("h{l}.ln1.b"), &[d]),
                qkv_w: m.push(format!("h{l}.attn.qkv.w"), &[d, 3 * d]),
                qkv_b: m.push(format!("h{l}.attn.qkv.b"), &[3 * d]),
                proj_w: m.push(format!("h{l}.attn.proj.w"), &[d, d]),
                proj_b: m.push(format!("h{l}.attn.proj.b"), &[d]),
                ln2_w: m.push(format!("h{l}.ln2.w"), &[d]),
                ln2_b: m.push(format!("h{l}.ln2.b"), &[d]),
                fc_w: m.push(format!("h{l}.mlp.fc.w"), &[d, 4 * d]),
                fc_b: m.push(format!("h{l}.mlp.fc.b"), &[4 * d]),
                out_w: m.push(format!("h{l}.mlp.proj.w"), &[4 * d, d]),
                out_b: m.push(format!("h{l}.mlp.proj.b"), &[d]),
            })
            .collect();
        let lnf_w = m.push("lnf.w", &[d]);
        let lnf_b = m.push("lnf.b", &[d]);
        let head_w = m.push("head.w", &[d, v]);
        let head_b = m.push("head.b", &[v]);
        Ok(Self { config, manifest: m, wte, wpe, blocks, lnf_w, lnf_b, head_w, head_b })
    }

    pub fn config(&self) -> &TinyLMConfig {
        &self.config
    }

    pub fn manifest(&self) -> &LayoutManifest {
        &self.manifest
    }

    pub fn num_params(&self) -> usize {
        self.manifest.total_len()
    }

    /// Seeded initialization: N(0, 0.02) weights, with residual output
    /// projections scaled down to N(0, 0.02 / sqrt(2 n_layers)); layer-norm
    /// gains 1 and every bias 0.
    pub fn init_params(&self) -> ParamVector {
        let mut p = vec![0f32; self.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * self.config.n_layers as f64).sqrt();
        let mut fill = |r: &Range<usize>, s: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, s).unwrap();
            for v in &mut p[r.clone()] {
                *v = normal.sample(rng) as f32;
            }
        };
        fill(&self.wte, std, &mut rng);
        if let Some(wpe) = &self.wpe {
            fill(wpe, std, &mut rng);
        }
        for b in &self.blocks {
            fill(&b.qkv_w, std, &mut rng);
            fill(&b.proj_w, resid_std, &mut rng);
            fill(&b.fc_w, std, &mut rng);
            fill(&b.out_w, resid_std, &mut rng);
        }
        fill(&self.head_w, std, &mut rng);
        for r in self.blocks.iter().flat_map(|b| [&b.ln1_w, &b.ln2_w]).chain([&self.lnf_w]) {
            p[r.clone()].fill(1.0);
        }
        ParamVector::new(p).expect("finite initialization")
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(), TrainError> {
        if batch.batch_size() == 0 || batch.seq_len() < 2 {
            return Err(TrainError::Config("batch needs at least one row of two tokens".into()));
        }
        let positions = batch.seq_len() - 1;
        if positions > self.config.context_len {
            return Err(TrainError::TooLong { positions, context_len: self.config.context_len });
        }
        for b in 0..batch.batch_size() {
            if let Some((pos, &token)) =
                batch.row(b).iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size)
            {
                return Err(TrainError::TokenOutOfRange { row: b, position: pos, token });
            }
        }
        Ok(())
    }

    /// Mean next-token cross-entropy over all `B·(T-1)` positions.
    pub fn loss<F: Scalar>(&self, params: &[F], batch: &TokenBatch) -> Result<f64, TrainError> {
        self.run(params, batch, false).map(|(loss, _)| loss)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn forward_backward<F: Scalar>(&self, params: &[F], batch: &TokenBatch) -> Result<(f64, Vec<F>), TrainError> {
        self.run(params, batch, true).map(|(loss, g)| (loss, g.expect("gradient requested")))
    }

    /// `f32` entry point: loss plus gradients aligned with [`TinyLM::manifest`].
    pub fn forward_loss(&self, params: &ParamVector, batch: &TokenBatch) -> Result<(f64, ParamVector), TrainError> {
        let (loss, grad) = self.forward_backward(params.as_slice(), batch)?;
        Ok((loss, ParamVector::new(grad)?))
    }

    fn run<F: Scalar>(&self, p: &[F], batch: &TokenBatch, want_grad: bool) -> Result<(f64, Option<Vec<F>>), TrainError> {
        if p.len() != self.num_params() {
            return Err(TrainError::LengthMismatch { expected: self.num_params(), got: p.len() });
        }
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let bsz = batch.batch_size();
        let len = batch.seq_len() - 1;
        let n = bsz * len;

        // Embeddings.
        let mut x = vec![F::zero(); n * d];
        for b in 0..bsz {
            for (t, &tok) in batch.inputs(b).iter().enumerate() {
                let row = &mut x[(b * len + t) * d..(b * len + t + 1) * d];
                row.copy_from_slice(&p[self.wte.start + tok as usize * d..][..d]);
                if let Some(wpe) = &self.wpe {
                    for (r, &e) in row.iter_mut().zip(&p[wpe.start + t * d..][..d]) {
                        *r += e;
                    }
                }
            }
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (x_next, cache) = self.block_forward(p, blk, x, bsz, len);
            x = x_next;
            caches.push(cache);
        }

        let (af, lnf_cache) = ops::layer_norm(&x, &p[self.lnf_w.clone()], &p[self.lnf_b.clone()], d);
        let mut logits = vec![F::zero(); n * v];
        ops::matmul(&af, &p[self.head_w.clone()], &mut logits, n, d, v);
        ops::add_bias(&mut logits, &p[self.head_b.clone()]);

        // Softmax cross-entropy; logits become d(loss)/d(logits) in place.
        let mut total = 0f64;
        let inv_n = F::c(1.0 / n as f64);
        for b in 0..bsz {
            for (t, &target) in batch.targets(b).iter().enumerate() {
                let row = &mut logits[(b * len + t) * v..(b * len + t + 1) * v];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for z in row.iter_mut() {
                    *z = (*z - max).exp();
                    sum += *z;
                }
                let p_target = row[target as usize] / sum;
                total -= p_target.to_f64().ln();
                if want_grad {
                    let inv = F::one() / sum;
                    for z in row.iter_mut() {
                        *z = *z * inv * inv_n;
                    }
                    row[target as usize] -= inv_n;
                }
            }
        }
        let loss = total / n as f64;
        if !want_grad {
            return Ok((loss, None));
        }
        let dlogits = logits;

        let mut g = vec![F::zero(); p.len()];
        ops::matmul_at_acc(&af, &dlogits, &mut g[self.head_w.clone()], n, d, v);
        ops::col_sum_acc(&dlogits, &mut g[self.head_b.clone()]);
        let mut daf = vec![F::zero(); n * d];
        ops::matmul_bt(&dlogits, &p[self.head_w.clone()], &mut daf, n, v, d);
        let mut dx = {
            let (gw, gb) = split_pair(&mut g, &self.lnf_w, &self.lnf_b);
            ops::layer_norm_backward(&daf, &lnf_cache, &p[self.lnf_w.clone()], gw, gb, d)
        };

        for (blk, cache) in self.blocks.iter().zip(caches).rev() {
            dx = self.block_backward(p, blk, cache, dx, &mut g, bsz, len);
        }

        for b in 0..bsz {
            for (t, &tok) in batch.inputs(b).iter().enumerate() {
                let src = &dx[(b * len + t) * d..(b * len + t + 1) * d];
                let dst = &mut g[self.wte.start + tok as usize * d..][..d];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s;
                }
                if let Some(wpe) = &self.wpe {
                    let dst = &mut g[wpe.start + t * d..][..d];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        Ok((loss, Some(g)))
    }

    fn block_forward<F: Scalar>(
        &self,
        p: &[F],
        blk: &BlockLayout,
        x: Vec<F>,
        bsz: usize,
        len: usize,
    ) -> (Vec<F>, BlockCache<F>) {
        let d = self.config.d_model;
        let n = bsz * len;
        let (a1, ln1) = ops::layer_norm(&x, &p[blk.ln1_w.clone()], &p[blk.ln1_b.clone()], d);
        let mut qkv = vec![F::zero(); n * 3 * d];
        ops::matmul(&a1, &p[blk.qkv_w.clone()], &mut qkv, n, d, 3 * d);
        ops::add_bias(&mut qkv, &p[blk.qkv_b.clone()]);
        let (att, probs) = self.attention(&qkv, bsz, len);
        let mut y = vec![F::zero(); n * d];
        ops::matmul(&att, &p[blk.proj_w.clone()], &mut y, n, d, d);
        ops::add_bias(&mut y, &p[blk.proj_b.clone()]);
        let mut x_mid = x.clone();
        for (a, b) in x_mid.iter_mut().zip(&y) {
            *a += *b;
        }
        let (a2, ln2) = ops::layer_norm(&x_mid, &p[blk.ln2_w.clone()], &p[blk.ln2_b.clone()], d);
        let mut pre = vec![F::zero(); n * 4 * d];
        ops::matmul(&a2, &p[blk.fc_w.clone()], &mut pre, n, d, 4 * d);
        ops::add_bias(&mut pre, &p[blk.fc_b.clone()]);
        let act: Vec<F> = pre.iter().map(|&z| ops::gelu(z)).collect();
        let mut m = vec![F::zero(); n * d];
        ops::matmul(&act, &p[blk.out_w.clone()], &mut m, n, 4 * d, d);
        ops::add_bias(&mut m, &p[blk.out_b.clone()]);
        let mut x_out = x_mid;
        for (a, b) in x_out.iter_mut().zip(&m) {
            *a += *b;
        }
        (x_out, BlockCache { x_in: x, ln1, a1, qkv, probs, att, ln2, a2, pre, act })
    }

    /// Causal multi-head attention over `qkv` rows laid out as `[q | k | v]`.
    /// Returns the concatenated head outputs and the attention probabilities
    /// (`bsz × heads × len × len`, zero above the diagonal).
    fn attention<F: Scalar>(&self, qkv: &[F], bsz: usize, len: usize) -> (Vec<F>, Vec<F>) {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); bsz * len * d];
        let mut probs = vec![F::zero(); bsz * heads * len * len];
        let mut scores = vec![F::zero(); len];
        for b in 0..bsz {
            for h in 0..heads {
                let slope = F::c(if self.config.use_alibi { alibi_slope(h, heads) } else { 0.0 });
                let pbase = (b * heads + h) * len * len;
                for i in 0..len {
                    let q = &qkv[(b * len + i) * 3 * d + h * dh..][..dh];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let k = &qkv[(b * len + j) * 3 * d + d + h * dh..][..dh];
                        let s = dot(q, k) * scale - slope * F::c((i - j) as f64);
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = F::zero();
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = F::one() / sum;
                    let o = &mut out[(b * len + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let pij = scores[j] * inv;
                        probs[pbase + i * len + j] = pij;
                        let vj = &qkv[(b * len + j) * 3 * d + 2 * d + h * dh..][..dh];
                        for (oe, &ve) in o.iter_mut().zip(vj) {
                            *oe += pij * ve;
                        }
                    }
                }
            }
        }
        (out, probs)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<F: Scalar>(
        &self,
        p: &[F],
        blk: &BlockLayout,
        c: BlockCache<F>,
        dx_out: Vec<F>,
        g: &mut [F],
        bsz: usize,
        len: usize,
    ) -> Vec<F> {
        let d = self.config.d_model;
        let n = bsz * len;

        // MLP branch.
        let dm = &dx_out;
        ops::matmul_at_acc(&c.act, dm, &mut g[blk.out_w.clone()], n, 4 * d, d);
        ops::col_sum_acc(dm, &mut g[blk.out_b.clone()]);
        let mut dpre = vec![F::zero(); n * 4 * d];
        ops::matmul_bt(dm, &p[blk.out_w.clone()], &mut dpre, n, d, 4 * d);
        for (dz, &z) in dpre.iter_mut().zip(&c.pre) {
            *dz *= ops::gelu_grad(z);
        }
        ops::matmul_at_acc(&c.a2, &dpre, &mut g[blk.fc_w.clone()], n, d, 4 * d);
        ops::col_sum_acc(&dpre, &mut g[blk.fc_b.clone()]);
        let mut da2 = vec![F::zero(); n * d];
        ops::matmul_bt(&dpre, &p[blk.fc_w.clone()], &mut da2, n, 4 * d, d);
        let dmid_ln = {
            let (gw, gb) = split_pair(g, &blk.ln2_w, &blk.ln2_b);
            ops::layer_norm_backward(&da2, &c.ln2, &p[blk.ln2_w.clone()], gw, gb, d)
        };
        let mut dmid = dx_out;
        for (a, b) in dmid.iter_mut().zip(&dmid_ln) {
            *a += *b;
        }

        // Attention branch.
        ops::matmul_at_acc(&c.att, &dmid, &mut g[blk.proj_w.clone()], n, d, d);
        ops::col_sum_acc(&dmid, &mut g[blk.proj_b.clone()]);
        let mut datt = vec![F::zero(); n * d];
        ops::matmul_bt(&dmid, &p[blk.proj_w.clone()], &mut datt, n, d, d);
        let dqkv = self.attention_backward(&c.qkv, &c.probs, &datt, bsz, len);
        ops::matmul_at_acc(&c.a1, &dqkv, &mut g[blk.qkv_w.clone()], n, d, 3 * d);
        ops::col_sum_acc(&dqkv, &mut g[blk.qkv_b.clone()]);
        let mut da1 = vec![F::zero(); n * d];
        ops::matmul_bt(&dqkv, &p[blk.qkv_w.clone()], &mut da1, n, 3 * d, d);
        let dx_ln = {
            let (gw, gb) = split_pair(g, &blk.ln1_w, &blk.ln1_b);
            ops::layer_norm_backward(&da1, &c.ln1, &p[blk.ln1_w.clone()], gw, gb, d)
        };
        debug_assert_eq!(c.x_in.len(), dmid.len());
        let mut dx = dmid;
        for (a, b) in dx.iter_mut().zip(&dx_ln) {
            *a += *b;
        }
        dx
    }

    fn attention_backward<F: Scalar>(&self, qkv: &[F], probs: &[F], dout: &[F], bsz: usize, len: usize) -> Vec<F> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut dqkv = vec![F::zero(); qkv.len()];
        let mut dp = vec![F::zero(); len];
        for b in 0..bsz {
            for h in 0..heads {
                let pbase = (b * heads + h) * len * len;
                for i in 0..len {
                    let do_i = &dout[(b * len + i) * d + h * dh..][..dh];
                    let prow = &probs[pbase + i * len..][..len];
                    let mut weighted = F::zero();
                    for j in 0..=i {
                        let vj = &qkv[(b * len + j) * 3 * d + 2 * d + h * dh..][..dh];
                        dp[j] = dot(do_i, vj);
                        weighted += prow[j] * dp[j];
                        let dvj = &mut dqkv[(b * len + j) * 3 * d + 2 * d + h * dh..][..dh];
                        for (dv, &o) in dvj.iter_mut().zip(do_i) {
                            *dv += prow[j] * o;
                        }
                    }
                    let qi_off = (b * len + i) * 3 * d + h * dh;
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        let kj_off = (b * len + j) * 3 * d + d + h * dh;
                        for e in 0..dh {
                            let kje = qkv[kj_off + e];
                            let qie = qkv[qi_off + e];
                            dqkv[qi_off + e] += ds * kje;
                            dqkv[kj_off + e] += ds * qie;
                        }
                    }
                }
            }
        }
        dqkv
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Two disjoint mutable slices of `g`; `a` must precede `b`.
fn split_pair<'a, F>(g: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(use_alibi: bool) -> TinyLM {
        TinyLM::new(TinyLMConfig {
            vocab_size: 256,
            context_len: 16,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            use_alibi,
            seed: 3,
        })
        .unwrap()
    }

    fn batch(rows: &[&[u32]]) -> TokenBatch {
        TokenBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = TinyLM::new(TinyLMConfig::default()).unwrap();
        let params = model.init_params();
        let rows: Vec<Vec<u32>> = (0..4).map(|r| (0..65).map(|t| ((t * 31 + r * 7) % 256) as u32).collect()).collect();
        let loss = model.loss(params.as_slice(), &TokenBatch::from_rows(&rows)).unwrap();
        assert!((loss - 256f64.ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn identical_rows_match_single_row() {
        let model = tiny(true);
        let params = model.init_params();
        let row: &[u32] = &[1, 5, 9, 200, 3, 3, 77];
        let one = model.loss(params.as_slice(), &batch(&[row])).unwrap();
        let three = model.loss(params.as_slice(), &batch(&[row, row, row])).unwrap();
        assert!((one - three).abs() < 1e-6);
    }

    #[test]
    fn manifest_matches_layout() {
        for alibi in [true, false] {
            let model = tiny(alibi);
            model.manifest().validate(model.num_params()).unwrap();
            assert_eq!(model.manifest().get("wpe").is_some(), !alibi);
        }
        let default = TinyLM::new(TinyLMConfig::default()).unwrap();
        assert_eq!(default.num_params(), 2 * 256 * 64 + 256 + 2 * 64 + 2 * (12 * 64 * 64 + 13 * 64));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let model = tiny(true);
        let params = model.init_params();
        let err = model.loss(params.as_slice(), &batch(&[&[1, 2, 3], &[4, 256, 5]])).unwrap_err();
        assert!(matches!(err, TrainError::TokenOutOfRange { row: 1, position: 1, token: 256 }));
        let long: Vec<u32> = vec![1; 18];
        assert!(matches!(
            model.loss(params.as_slice(), &TokenBatch::from_rows(&[long])),
            Err(TrainError::TooLong { positions: 17, context_len: 16 })
        ));
        assert!(TinyLM::new(TinyLMConfig { d_model: 10, n_heads: 4, ..TinyLMConfig::default() }).is_err());
        assert!(TinyLM::new(TinyLMConfig { context_len: 1, ..TinyLMConfig::default() }).is_err());
    }

    #[test]
    fn alibi_examples() {
        assert_eq!(alibi_slope(0, 8), 0.5);
        let bias = alibi_bias(4, 6);
        for head in &bias {
            for i in 0..6 {
                assert_eq!(head[i * 6 + i], 0.0);
                for j in i + 1..6 {
                    assert_eq!(head[i * 6 + j], f64::NEG_INFINITY);
                }
            }
        }
        // Direct formula: slope = 2^(-8*4/4) = 2^-8, bias = -(5-2) * 2^-8.
        let oracle = -3.0 * 2f64.powi(-8);
        assert_eq!(bias[3][5 * 6 + 2], oracle);
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let model = tiny(false);
        let p32 = model.init_params();
        let p64 = p32.to_f64();
        let b = batch(&[&[1, 2, 3, 4, 5, 6], &[9, 8, 7, 6, 5, 4]]);
        let (l32, g32) = model.forward_backward(p32.as_slice(), &b).unwrap();
        let (l64, g64) = model.forward_backward(&p64, &b).unwrap();
        assert!((l32 - l64).abs() < 1e-5);
        let max = g64.iter().fold(0f64, |m, x| m.max(x.abs()));
        assert!(g32.iter().zip(&g64).all(|(a, b)| (*a as f64 - b).abs() < 1e-4 * max));
    }
}
