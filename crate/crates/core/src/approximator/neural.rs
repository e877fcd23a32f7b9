//! Residual token network with time/condition modulation of its layer norms
//! and bottleneck cross-attention adapters over the condition features.
//!
//! Block layout (pre-norm, residual):
//!
//! ```text
//! a   = LN(h) * (gamma + dgamma_e) + (beta + dbeta_e)     modulated norm
//! h  += W2 gelu(W1 [a_{i-1}, a_i, a_{i+1}] + b1) + b2      local mixing MLP
//! h  += W_up gelu(W_down h + W_o xattn(q = W_q W_down h, kv = s))
//! ```
//!
//! `(dgamma, dbeta)` come from `W_mod silu(c) + b_mod` with
//! `c = W_t time(t) + b_t + W_p mean(s)`. `W_mod`, `b_mod` and `W_up` start
//! at zero, so an untouched conditioning path leaves the base network's
//! output bit-for-bit unchanged.
//!
//! Gradients are written out by hand and checked against central
//! differences in [`super::finite_difference_check`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    column_sums, gelu, gelu_grad, init_matrix, layer_norm, layer_norm_backward, silu, silu_grad, softmax_rows,
};
use super::{Approximator, ConditioningBundle, ProbTable, TIME_FEATURES};
use crate::error::{ensure, Result};
use crate::sequence::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    /// Width of the time + pooled-condition vector feeding the modulators.
    pub cond_dim: usize,
    pub adapter_dim: usize,
    pub heads: usize,
    /// Cross-attention reaches condition rows at most this far away.
    pub attn_radius: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            model_dim: 48,
            hidden_dim: 128,
            blocks: 2,
            cond_dim: 32,
            adapter_dim: 32,
            heads: 4,
            attn_radius: 2,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.model_dim >= 2, "model_dim must be at least 2");
        ensure!(self.hidden_dim >= 1 && self.blocks >= 1, "empty network");
        ensure!(self.cond_dim >= 1, "cond_dim must be positive");
        ensure!(
            self.heads >= 1 && self.adapter_dim.is_multiple_of(self.heads),
            "adapter_dim {} must be a positive multiple of heads {}",
            self.adapter_dim,
            self.heads
        );
        Ok(())
    }

    fn window(&self) -> usize {
        2 * self.attn_radius + 1
    }
}

/// Which optimizer phase owns a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// The token network proper: embedding, norms, mixing MLPs, output head.
    Base,
    /// Time/condition embedding, norm modulators and adapters.
    Conditioning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub mix_w: Array2<f64>,
    pub mix_b: Array2<f64>,
    pub mlp_w: Array2<f64>,
    pub mlp_b: Array2<f64>,
    pub mod_w: Array2<f64>,
    pub mod_b: Array2<f64>,
    pub down_w: Array2<f64>,
    pub q_w: Array2<f64>,
    pub k_w: Array2<f64>,
    pub v_w: Array2<f64>,
    pub rel_bias: Array2<f64>,
    pub o_w: Array2<f64>,
    pub up_w: Array2<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralParams {
    pub embed: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Array2<f64>,
    pub final_beta: Array2<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array2<f64>,
    pub pool_w: Array2<f64>,
}

pub type Gradients = NeuralParams;

impl NeuralParams {
    fn init<R: Rng + ?Sized>(cfg: &NeuralConfig, vocab: usize, feat: usize, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let r = cfg.adapter_dim;
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                gamma: Array2::ones((1, d)),
                beta: Array2::zeros((1, d)),
                mix_w: init_matrix(3 * d, cfg.hidden_dim, rng),
                mix_b: Array2::zeros((1, cfg.hidden_dim)),
                mlp_w: init_matrix(cfg.hidden_dim, d, rng),
                mlp_b: Array2::zeros((1, d)),
                mod_w: Array2::zeros((cfg.cond_dim, 2 * d)),
                mod_b: Array2::zeros((1, 2 * d)),
                down_w: init_matrix(d, r, rng),
                q_w: init_matrix(r, r, rng),
                k_w: init_matrix(feat, r, rng),
                v_w: init_matrix(feat, r, rng),
                rel_bias: Array2::zeros((cfg.heads, cfg.window())),
                o_w: init_matrix(r, r, rng),
                up_w: Array2::zeros((r, d)),
            })
            .collect();
        Self {
            embed: init_matrix(vocab, d, rng),
            blocks,
            final_gamma: Array2::ones((1, d)),
            final_beta: Array2::zeros((1, d)),
            out_w: init_matrix(d, vocab, rng),
            out_b: Array2::zeros((1, vocab)),
            time_w: init_matrix(TIME_FEATURES, cfg.cond_dim, rng),
            time_b: Array2::zeros((1, cfg.cond_dim)),
            pool_w: init_matrix(feat, cfg.cond_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Array2<f64>)> {
        use ParamGroup::*;
        let mut out = vec![("embed".to_string(), Base, &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            let named: [(&str, ParamGroup, &Array2<f64>); 15] = [
                ("gamma", Base, &b.gamma),
                ("beta", Base, &b.beta),
                ("mix_w", Base, &b.mix_w),
                ("mix_b", Base, &b.mix_b),
                ("mlp_w", Base, &b.mlp_w),
                ("mlp_b", Base, &b.mlp_b),
                ("mod_w", Conditioning, &b.mod_w),
                ("mod_b", Conditioning, &b.mod_b),
                ("down_w", Conditioning, &b.down_w),
                ("q_w", Conditioning, &b.q_w),
                ("k_w", Conditioning, &b.k_w),
                ("v_w", Conditioning, &b.v_w),
                ("rel_bias", Conditioning, &b.rel_bias),
                ("o_w", Conditioning, &b.o_w),
                ("up_w", Conditioning, &b.up_w),
            ];
            out.extend(named.into_iter().map(|(n, g, t)| (format!("block{i}.{n}"), g, t)));
        }
        out.push(("final_gamma".into(), Base, &self.final_gamma));
        out.push(("final_beta".into(), Base, &self.final_beta));
        out.push(("out_w".into(), Base, &self.out_w));
        out.push(("out_b".into(), Base, &self.out_b));
        out.push(("time_w".into(), Conditioning, &self.time_w));
        out.push(("time_b".into(), Conditioning, &self.time_b));
        out.push(("pool_w".into(), Conditioning, &self.pool_w));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Array2<f64>)> {
        use ParamGroup::*;
        let mut out = vec![("embed".to_string(), Base, &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let named: [(&str, ParamGroup, &mut Array2<f64>); 15] = [
                ("gamma", Base, &mut b.gamma),
                ("beta", Base, &mut b.beta),
                ("mix_w", Base, &mut b.mix_w),
                ("mix_b", Base, &mut b.mix_b),
                ("mlp_w", Base, &mut b.mlp_w),
                ("mlp_b", Base, &mut b.mlp_b),
                ("mod_w", Conditioning, &mut b.mod_w),
                ("mod_b", Conditioning, &mut b.mod_b),
                ("down_w", Conditioning, &mut b.down_w),
                ("q_w", Conditioning, &mut b.q_w),
                ("k_w", Conditioning, &mut b.k_w),
                ("v_w", Conditioning, &mut b.v_w),
                ("rel_bias", Conditioning, &mut b.rel_bias),
                ("o_w", Conditioning, &mut b.o_w),
                ("up_w", Conditioning, &mut b.up_w),
            ];
            out.extend(named.into_iter().map(|(n, g, t)| (format!("block{i}.{n}"), g, t)));
        }
        out.push(("final_gamma".into(), Base, &mut self.final_gamma));
        out.push(("final_beta".into(), Base, &mut self.final_beta));
        out.push(("out_w".into(), Base, &mut self.out_w));
        out.push(("out_b".into(), Base, &mut self.out_b));
        out.push(("time_w".into(), Conditioning, &mut self.time_w));
        out.push(("time_b".into(), Conditioning, &mut self.time_b));
        out.push(("pool_w".into(), Conditioning, &mut self.pool_w));
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, _, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Several sequences concatenated row-wise, with their conditioning.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    tokens: Vec<usize>,
    mask: Vec<bool>,
    seg: Vec<usize>,
    starts: Vec<usize>,
    s_features: Array2<f64>,
    t_embed: Array2<f64>,
    s_pooled: Array2<f64>,
}

impl PackedBatch {
    pub fn new(items: &[(&TokenSequence, &ConditioningBundle)]) -> Result<Self> {
        ensure!(!items.is_empty(), "empty batch");
        let feat = items[0].1.s_features.ncols();
        let rows: usize = items.iter().map(|(z, _)| z.len()).sum();
        let mut tokens = Vec::with_capacity(rows);
        let mut mask = Vec::with_capacity(rows);
        let mut seg = Vec::with_capacity(rows);
        let mut starts = vec![0];
        let mut s_features = Array2::zeros((rows, feat));
        let mut t_embed = Array2::zeros((items.len(), TIME_FEATURES));
        let mut s_pooled = Array2::zeros((items.len(), feat));
        let mut row = 0;
        for (e, (z, c)) in items.iter().enumerate() {
            ensure!(
                z.len() == c.len(),
                "conditioning length {} vs sequence {}",
                c.len(),
                z.len()
            );
            ensure!(
                z.mask() == c.mask.as_slice(),
                "conditioning mask differs from sequence mask"
            );
            ensure!(c.s_features.ncols() == feat, "condition width differs within batch");
            for i in 0..z.len() {
                let real = z.is_real(i);
                tokens.push(if real { z.get(i) } else { 0 });
                mask.push(real);
                seg.push(e);
            }
            s_features.slice_mut(s![row..row + z.len(), ..]).assign(&c.s_features);
            t_embed.row_mut(e).assign(&Array1::from(c.t_embed.clone()));
            s_pooled.row_mut(e).assign(&Array1::from(c.s_pooled.clone()));
            row += z.len();
            starts.push(row);
        }
        Ok(Self {
            tokens,
            mask,
            seg,
            starts,
            s_features,
            t_embed,
            s_pooled,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn examples(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn example_rows(&self, e: usize) -> std::ops::Range<usize> {
        self.starts[e]..self.starts[e + 1]
    }

    pub fn is_real(&self, row: usize) -> bool {
        self.mask[row]
    }

    /// Row `r + offset` if it belongs to the same sequence and is real.
    fn neighbor(&self, r: usize, offset: isize) -> Option<usize> {
        let j = r as isize + offset;
        if j < 0 {
            return None;
        }
        let j = j as usize;
        let e = self.seg[r];
        (j >= self.starts[e] && j < self.starts[e + 1] && self.mask[j]).then_some(j)
    }
}

struct AdapterCache {
    down: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<f64>,
    ctx: Array2<f64>,
    bneck: Array2<f64>,
    act: Array2<f64>,
}

struct BlockCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    scale: Array2<f64>,
    window: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    mid: Array2<f64>,
    adapter: Option<AdapterCache>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct ForwardCache {
    cond_pre: Option<Array2<f64>>,
    cond_act: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_xhat: Array2<f64>,
    final_inv: Array1<f64>,
    final_out: Array2<f64>,
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralApproximator {
    config: NeuralConfig,
    vocab: usize,
    feature_dim: usize,
    pub params: NeuralParams,
}

impl NeuralApproximator {
    pub fn new<R: Rng + ?Sized>(config: NeuralConfig, vocab: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        ensure!(vocab >= 2, "vocabulary must have at least 2 tokens");
        ensure!(feature_dim >= 1, "condition features must be non-empty");
        let params = NeuralParams::init(&config, vocab, feature_dim, rng);
        Ok(Self {
            config,
            vocab,
            feature_dim,
            params,
        })
    }

    pub fn from_params(config: NeuralConfig, vocab: usize, feature_dim: usize, params: NeuralParams) -> Result<Self> {
        config.validate()?;
        let expected = NeuralParams::init(
            &config,
            vocab,
            feature_dim,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        let want = expected.tensors();
        let got = params.tensors();
        ensure!(want.len() == got.len(), "parameter count mismatch");
        for ((wn, _, wt), (gn, _, gt)) in want.iter().zip(&got) {
            ensure!(
                wn == gn && wt.dim() == gt.dim(),
                "tensor {gn} has shape {:?}, expected {:?}",
                gt.dim(),
                wt.dim()
            );
        }
        Ok(Self {
            config,
            vocab,
            feature_dim,
            params,
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Replaces the zero-initialized conditioning outputs with random values
    /// of the given scale (the non-transparent initialization).
    pub fn randomize_conditioning<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for b in &mut self.params.blocks {
            for t in [&mut b.mod_w, &mut b.mod_b, &mut b.up_w, &mut b.rel_bias] {
                t.mapv_inplace(|_| rng.gen_range(-scale..scale));
            }
        }
    }

    /// Forward pass. With `conditioned == false` the modulators and adapters
    /// are skipped entirely, giving the bare base network.
    pub fn forward(&self, batch: &PackedBatch, conditioned: bool) -> Result<ForwardCache> {
        ensure!(
            batch.s_features.ncols() == self.feature_dim,
            "condition width {} does not match model width {}",
            batch.s_features.ncols(),
            self.feature_dim
        );
        ensure!(
            batch.tokens.iter().all(|&t| t < self.vocab),
            "token outside model vocabulary {}",
            self.vocab
        );
        let p = &self.params;
        let d = self.config.model_dim;
        let n = batch.rows();

        let (cond_pre, cond_act) = if conditioned {
            let pre = batch.t_embed.dot(&p.time_w) + &p.time_b + batch.s_pooled.dot(&p.pool_w);
            let act = pre.mapv(silu);
            (Some(pre), Some(act))
        } else {
            (None, None)
        };

        let mut h = Array2::zeros((n, d));
        for (r, &tok) in batch.tokens.iter().enumerate() {
            h.row_mut(r).assign(&p.embed.row(tok));
        }

        let mut caches = Vec::with_capacity(p.blocks.len());
        for bp in &p.blocks {
            let (xhat, inv_std) = layer_norm(&h);
            let (scale, shift) = match &cond_act {
                Some(act) => {
                    let modulation = act.dot(&bp.mod_w) + &bp.mod_b;
                    let mut scale = Array2::zeros((n, d));
                    let mut shift = Array2::zeros((n, d));
                    for r in 0..n {
                        let m = modulation.row(batch.seg[r]);
                        for c in 0..d {
                            scale[[r, c]] = bp.gamma[[0, c]] + m[c];
                            shift[[r, c]] = bp.beta[[0, c]] + m[d + c];
                        }
                    }
                    (scale, shift)
                }
                None => (
                    bp.gamma.broadcast((n, d)).unwrap().to_owned(),
                    bp.beta.broadcast((n, d)).unwrap().to_owned(),
                ),
            };
            let normed = &xhat * &scale + &shift;
            let window = self.window(batch, &normed);
            let pre = window.dot(&bp.mix_w) + &bp.mix_b;
            let act = pre.mapv(gelu);
            let mid = &h + &act.dot(&bp.mlp_w) + &bp.mlp_b;
            let (out, adapter) = if conditioned {
                let (delta, cache) = self.adapter_forward(bp, batch, &mid);
                (&mid + &delta, Some(cache))
            } else {
                (mid.clone(), None)
            };
            caches.push(BlockCache {
                xhat,
                inv_std,
                scale,
                window,
                pre,
                act,
                mid,
                adapter,
            });
            h = out;
        }

        let (final_xhat, final_inv) = layer_norm(&h);
        let final_out = &final_xhat * &p.final_gamma + &p.final_beta;
        let logits = final_out.dot(&p.out_w) + &p.out_b;
        let probs = softmax_rows(&logits);
        Ok(ForwardCache {
            cond_pre,
            cond_act,
            blocks: caches,
            final_xhat,
            final_inv,
            final_out,
            probs,
        })
    }

    fn window(&self, batch: &PackedBatch, a: &Array2<f64>) -> Array2<f64> {
        let d = self.config.model_dim;
        let n = batch.rows();
        let mut w = Array2::zeros((n, 3 * d));
        for r in 0..n {
            for (slot, off) in [-1isize, 0, 1].into_iter().enumerate() {
                let src = if off == 0 { Some(r) } else { batch.neighbor(r, off) };
                if let Some(j) = src {
                    w.slice_mut(s![r, slot * d..(slot + 1) * d]).assign(&a.row(j));
                }
            }
        }
        w
    }

    fn adapter_forward(&self, bp: &BlockParams, batch: &PackedBatch, h: &Array2<f64>) -> (Array2<f64>, AdapterCache) {
        let cfg = &self.config;
        let n = batch.rows();
        let heads = cfg.heads;
        let dh = cfg.adapter_dim / heads;
        let width = cfg.window();
        let radius = cfg.attn_radius as isize;
        let scale = 1.0 / (dh as f64).sqrt();

        let down = h.dot(&bp.down_w);
        let q = down.dot(&bp.q_w);
        let k = batch.s_features.dot(&bp.k_w);
        let v = batch.s_features.dot(&bp.v_w);
        let mut attn = vec![0.0; n * heads * width];
        let mut ctx = Array2::zeros((n, cfg.adapter_dim));
        let mut scores = vec![f64::NEG_INFINITY; width];
        for i in 0..n {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for w in 0..width {
                    scores[w] = f64::NEG_INFINITY;
                    if let Some(j) = batch.neighbor(i, w as isize - radius) {
                        let dot: f64 = q
                            .slice(s![i, cols.clone()])
                            .iter()
                            .zip(k.slice(s![j, cols.clone()]))
                            .map(|(a, b)| a * b)
                            .sum();
                        scores[w] = dot * scale + bp.rel_bias[[hd, w]];
                        max = max.max(scores[w]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let base = (i * heads + hd) * width;
                let mut total = 0.0;
                for w in 0..width {
                    if scores[w] > f64::NEG_INFINITY {
                        let e = (scores[w] - max).exp();
                        attn[base + w] = e;
                        total += e;
                    }
                }
                for w in 0..width {
                    attn[base + w] /= total;
                    let a = attn[base + w];
                    if a > 0.0 {
                        let j = (i as isize + w as isize - radius) as usize;
                        for c in cols.clone() {
                            ctx[[i, c]] += a * v[[j, c]];
                        }
                    }
                }
            }
        }
        let bneck = &down + &ctx.dot(&bp.o_w);
        let act = bneck.mapv(gelu);
        let delta = act.dot(&bp.up_w);
        (
            delta,
            AdapterCache {
                down,
                q,
                k,
                v,
                attn,
                ctx,
                bneck,
                act,
            },
        )
    }

    /// Gradients of a loss given its gradient at the output probabilities.
    pub fn backward(&self, batch: &PackedBatch, cache: &ForwardCache, dprobs: &Array2<f64>) -> Gradients {
        let p = &self.params;
        let mut g = p.zeros_like();
        let d = self.config.model_dim;
        let n = batch.rows();

        let dlogits = super::nn::softmax_backward(&cache.probs, dprobs);
        g.out_w = cache.final_out.t().dot(&dlogits);
        g.out_b = column_sums(&dlogits);
        let dfinal = dlogits.dot(&p.out_w.t());
        g.final_gamma = column_sums(&(&dfinal * &cache.final_xhat));
        g.final_beta = column_sums(&dfinal);
        let mut dh = layer_norm_backward(&(&dfinal * &p.final_gamma), &cache.final_xhat, &cache.final_inv);

        let mut dcond_act = cache.cond_act.as_ref().map(|a| Array2::<f64>::zeros(a.raw_dim()));

        for (bi, (bp, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            let mut dmid = dh.clone();
            if let Some(ac) = &bc.adapter {
                dmid += &self.adapter_backward(bp, gb, batch, &bc.mid, ac, &dh);
            }
            // local mixing MLP
            gb.mlp_w = bc.act.t().dot(&dmid);
            gb.mlp_b = column_sums(&dmid);
            let mut dpre = dmid.dot(&bp.mlp_w.t());
            dpre.zip_mut_with(&bc.pre, |g, &x| *g *= gelu_grad(x));
            gb.mix_w = bc.window.t().dot(&dpre);
            gb.mix_b = column_sums(&dpre);
            let dwindow = dpre.dot(&bp.mix_w.t());
            let mut dnormed = Array2::<f64>::zeros((n, d));
            for r in 0..n {
                for (slot, off) in [-1isize, 0, 1].into_iter().enumerate() {
                    let src = if off == 0 { Some(r) } else { batch.neighbor(r, off) };
                    if let Some(j) = src {
                        let mut row = dnormed.row_mut(j);
                        row += &dwindow.slice(s![r, slot * d..(slot + 1) * d]);
                    }
                }
            }
            // modulated norm
            let dn_xhat = &dnormed * &bc.xhat;
            gb.gamma = column_sums(&dn_xhat);
            gb.beta = column_sums(&dnormed);
            if let (Some(dact), Some(act)) = (dcond_act.as_mut(), cache.cond_act.as_ref()) {
                let mut dmod = Array2::<f64>::zeros((batch.examples(), 2 * d));
                for r in 0..n {
                    let e = batch.seg[r];
                    for c in 0..d {
                        dmod[[e, c]] += dn_xhat[[r, c]];
                        dmod[[e, d + c]] += dnormed[[r, c]];
                    }
                }
                gb.mod_w = act.t().dot(&dmod);
                gb.mod_b = column_sums(&dmod);
                *dact += &dmod.dot(&bp.mod_w.t());
            }
            let dxhat = &dnormed * &bc.scale;
            dh = dmid + layer_norm_backward(&dxhat, &bc.xhat, &bc.inv_std);
        }

        for (r, &tok) in batch.tokens.iter().enumerate() {
            let mut row = g.embed.row_mut(tok);
            row += &dh.row(r);
        }

        if let (Some(dact), Some(pre)) = (dcond_act, cache.cond_pre.as_ref()) {
            let mut dpre = dact;
            dpre.zip_mut_with(pre, |g, &x| *g *= silu_grad(x));
            g.time_w = batch.t_embed.t().dot(&dpre);
            g.time_b = column_sums(&dpre);
            g.pool_w = batch.s_pooled.t().dot(&dpre);
        }
        g
    }

    fn adapter_backward(
        &self,
        bp: &BlockParams,
        gb: &mut BlockParams,
        batch: &PackedBatch,
        h: &Array2<f64>,
        ac: &AdapterCache,
        dout: &Array2<f64>,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let n = batch.rows();
        let heads = cfg.heads;
        let dh = cfg.adapter_dim / heads;
        let width = cfg.window();
        let radius = cfg.attn_radius as isize;
        let scale = 1.0 / (dh as f64).sqrt();

        gb.up_w = ac.act.t().dot(dout);
        let mut dbneck = dout.dot(&bp.up_w.t());
        dbneck.zip_mut_with(&ac.bneck, |g, &x| *g *= gelu_grad(x));
        gb.o_w = ac.ctx.t().dot(&dbneck);
        let dctx = dbneck.dot(&bp.o_w.t());
        let mut ddown = dbneck;

        let mut dq = Array2::<f64>::zeros(ac.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(ac.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(ac.v.raw_dim());
        let mut drel = Array2::<f64>::zeros(bp.rel_bias.raw_dim());
        let mut dalpha = vec![0.0; width];
        for i in 0..n {
            for hd in 0..heads {
                let base = (i * heads + hd) * width;
                let cols = hd * dh..(hd + 1) * dh;
                let mut dot_sum = 0.0;
                for w in 0..width {
                    dalpha[w] = 0.0;
                    let a = ac.attn[base + w];
                    if a > 0.0 {
                        let j = (i as isize + w as isize - radius) as usize;
                        let mut s_ = 0.0;
                        for c in cols.clone() {
                            s_ += dctx[[i, c]] * ac.v[[j, c]];
                            dv[[j, c]] += a * dctx[[i, c]];
                        }
                        dalpha[w] = s_;
                        dot_sum += a * s_;
                    }
                }
                for w in 0..width {
                    let a = ac.attn[base + w];
                    if a > 0.0 {
                        let j = (i as isize + w as isize - radius) as usize;
                        let ds = a * (dalpha[w] - dot_sum);
                        drel[[hd, w]] += ds;
                        for c in cols.clone() {
                            dq[[i, c]] += ds * ac.k[[j, c]] * scale;
                            dk[[j, c]] += ds * ac.q[[i, c]] * scale;
                        }
                    }
                }
            }
        }
        gb.rel_bias = drel;
        gb.q_w = ac.down.t().dot(&dq);
        ddown += &dq.dot(&bp.q_w.t());
        gb.k_w = batch.s_features.t().dot(&dk);
        gb.v_w = batch.s_features.t().dot(&dv);
        gb.down_w = h.t().dot(&ddown);
        ddown.dot(&bp.down_w.t())
    }

    /// Largest output logit of a forward pass.
    pub fn max_logit(&self, cache: &ForwardCache) -> f64 {
        let logits = cache.final_out.dot(&self.params.out_w) + &self.params.out_b;
        logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Unconditioned base-network prediction.
    pub fn predict_base(&self, z: &TokenSequence, cond: &ConditioningBundle) -> Result<ProbTable> {
        let batch = PackedBatch::new(&[(z, cond)])?;
        Ok(ProbTable::from_raw(self.forward(&batch, false)?.probs))
    }

    /// Predictions for several sequences in one packed pass.
    pub fn predict_packed(&self, batch: &PackedBatch) -> Result<Vec<ProbTable>> {
        let probs = self.forward(batch, true)?.probs;
        Ok(split_rows(batch, probs.view()))
    }
}

pub(crate) fn split_rows(batch: &PackedBatch, probs: ArrayView2<f64>) -> Vec<ProbTable> {
    (0..batch.examples())
        .map(|e| ProbTable::from_raw(probs.slice_axis(Axis(0), batch.example_rows(e).into()).to_owned()))
        .collect()
}

impl Approximator for NeuralApproximator {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, z: &TokenSequence, cond: &ConditioningBundle, _t: usize) -> Result<ProbTable> {
        ensure!(
            z.vocab_size() == self.vocab,
            "sequence vocabulary {} vs model {}",
            z.vocab_size(),
            self.vocab
        );
        let batch = PackedBatch::new(&[(z, cond)])?;
        Ok(ProbTable::from_raw(self.forward(&batch, true)?.probs))
    }

    fn predict_many(&self, items: &[(&TokenSequence, &ConditioningBundle)], _t: usize) -> Result<Vec<ProbTable>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        self.predict_packed(&PackedBatch::new(items)?)
    }
}
