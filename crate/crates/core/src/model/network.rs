//! Forward and backward passes for one example.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::{LayerIdx, MlpIdx, RuleIdx};
use super::linalg::{
    add_row_bias, col_sums_into, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, mm, mm_nt, mm_tn,
    softmax_in_place, LnCache,
};
use super::{Model, RuleOutput};

/// Fault injection for verifying the gradient checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardFault {
    #[default]
    None,
    /// Drop the softmax Jacobian correction in encoder self-attention.
    AttentionSoftmax,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MlpCache {
    u1: Vec<f64>,
    g1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    u2: Vec<f64>,
    g2: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// attention probabilities, heads x L x L
    p: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    a2: Vec<f64>,
    u: Vec<f64>,
    gu: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct RuleCache {
    k: Vec<f64>,
    v: Vec<f64>,
    alpha: Vec<f64>,
    c: Vec<f64>,
    cls: MlpCache,
    fc: MlpCache,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Cache {
    xn: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    zf: Vec<f64>,
    rules: Vec<RuleCache>,
}

/// Gradient of the loss w.r.t. one rule's outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct RuleGrad {
    pub dlogits: [f64; 3],
    /// w.r.t. the standardized forecast
    pub dforecast: f64,
}

/// Dropout state for a training forward pass.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
    }
}

impl Model {
    #[inline]
    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    fn mlp_forward(&self, x: &[f64], idx: &MlpIdx, dropout: &mut Option<Dropout<'_>>) -> (Vec<f64>, MlpCache) {
        let i = x.len();
        let h = self.config.head_hidden;
        let mut u1 = self.p(idx.b1, h).to_vec();
        mm(x, self.p(idx.w1, i * h), &mut u1, 1, i, h, true);
        let mut g1: Vec<f64> = u1.iter().map(|&v| gelu(v)).collect();
        let mask1 = dropout.as_mut().map(|d| d.mask(h));
        if let Some(m) = &mask1 {
            g1.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        let mut u2 = self.p(idx.b2, h).to_vec();
        mm(&g1, self.p(idx.w2, h * h), &mut u2, 1, h, h, true);
        let mut g2: Vec<f64> = u2.iter().map(|&v| gelu(v)).collect();
        let mask2 = dropout.as_mut().map(|d| d.mask(h));
        if let Some(m) = &mask2 {
            g2.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        let mut y = self.p(idx.b3, idx.out).to_vec();
        mm(&g2, self.p(idx.w3, h * idx.out), &mut y, 1, h, idx.out, true);
        (y, MlpCache { u1, g1, mask1, u2, g2, mask2 })
    }

    fn mlp_backward(&self, dy: &[f64], x: &[f64], cache: &MlpCache, idx: &MlpIdx, grads: &mut [f64]) -> Vec<f64> {
        let i = x.len();
        let h = self.config.head_hidden;
        let o = idx.out;
        mm_tn(&cache.g2, dy, &mut grads[idx.w3..idx.w3 + h * o], 1, h, o, true);
        col_sums_into(dy, &mut grads[idx.b3..idx.b3 + o]);
        let mut du2 = vec![0.0; h];
        mm_nt(dy, self.p(idx.w3, h * o), &mut du2, 1, o, h, false);
        for j in 0..h {
            let m = cache.mask2.as_ref().map_or(1.0, |m| m[j]);
            du2[j] *= m * gelu_grad(cache.u2[j]);
        }
        mm_tn(&cache.g1, &du2, &mut grads[idx.w2..idx.w2 + h * h], 1, h, h, true);
        col_sums_into(&du2, &mut grads[idx.b2..idx.b2 + h]);
        let mut du1 = vec![0.0; h];
        mm_nt(&du2, self.p(idx.w2, h * h), &mut du1, 1, h, h, false);
        for j in 0..h {
            let m = cache.mask1.as_ref().map_or(1.0, |m| m[j]);
            du1[j] *= m * gelu_grad(cache.u1[j]);
        }
        mm_tn(x, &du1, &mut grads[idx.w1..idx.w1 + i * h], 1, i, h, true);
        col_sums_into(&du1, &mut grads[idx.b1..idx.b1 + h]);
        let mut dx = vec![0.0; i];
        mm_nt(&du1, self.p(idx.w1, i * h), &mut dx, 1, h, i, false);
        dx
    }

    /// `x @ W + b` for `x: rows x d_in`.
    fn affine(&self, x: &[f64], w: usize, b: usize, d_in: usize, d_out: usize) -> Vec<f64> {
        let rows = x.len() / d_in;
        let mut y = vec![0.0; rows * d_out];
        mm(x, self.p(w, d_in * d_out), &mut y, rows, d_in, d_out, false);
        add_row_bias(&mut y, self.p(b, d_out));
        y
    }

    /// Accumulate `dW += x^T dy`, `db += colsum(dy)` and return `dy W^T`.
    #[allow(clippy::too_many_arguments)]
    fn affine_backward(
        &self,
        dy: &[f64],
        x: &[f64],
        w: usize,
        b: usize,
        d_in: usize,
        d_out: usize,
        grads: &mut [f64],
        dx: &mut [f64],
        accumulate_dx: bool,
    ) {
        let rows = x.len() / d_in;
        mm_tn(x, dy, &mut grads[w..w + d_in * d_out], rows, d_in, d_out, true);
        col_sums_into(dy, &mut grads[b..b + d_out]);
        mm_nt(dy, self.p(w, d_in * d_out), dx, rows, d_out, d_in, accumulate_dx);
    }

    fn layer_forward(&self, h: &mut [f64], idx: &LayerIdx) -> LayerCache {
        let d = self.config.d_model;
        let l = h.len() / d;
        let heads = self.config.n_backbone_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = layer_norm(h, self.p(idx.ln1_g, d), self.p(idx.ln1_b, d));
        let q = self.affine(&a, idx.wq, idx.bq, d, d);
        let k = self.affine(&a, idx.wk, idx.bk, d, d);
        let v = self.affine(&a, idx.wv, idx.bv, d, d);
        let mut p = vec![0.0; heads * l * l];
        let mut o = vec![0.0; l * d];
        for hh in 0..heads {
            let off = hh * dh;
            let ph = &mut p[hh * l * l..(hh + 1) * l * l];
            gemm(l, dh, l, scale, &q[off..], d, 1, &k[off..], 1, d, 0.0, ph, l, 1);
            for row in ph.chunks_exact_mut(l) {
                softmax_in_place(row);
            }
            gemm(l, l, dh, 1.0, ph, l, 1, &v[off..], d, 1, 0.0, &mut o[off..], d, 1);
        }
        let y = self.affine(&o, idx.wo, idx.bo, d, d);
        h.iter_mut().zip(&y).for_each(|(h, y)| *h += y);

        let f = self.config.ffn_width;
        let (a2, ln2) = layer_norm(h, self.p(idx.ln2_g, d), self.p(idx.ln2_b, d));
        let u = self.affine(&a2, idx.w1, idx.b1, d, f);
        let gu: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let z = self.affine(&gu, idx.w2, idx.b2, f, d);
        h.iter_mut().zip(&z).for_each(|(h, z)| *h += z);

        LayerCache { ln1, a, q, k, v, p, o, ln2, a2, u, gu }
    }

    /// Backward through one encoder layer; `dh` holds the gradient w.r.t.
    /// the layer output on entry and w.r.t. its input on exit.
    fn layer_backward(&self, dh: &mut [f64], c: &LayerCache, idx: &LayerIdx, grads: &mut [f64], fault: BackwardFault) {
        let d = self.config.d_model;
        let l = dh.len() / d;
        let f = self.config.ffn_width;
        let heads = self.config.n_backbone_heads;
        let dh_width = d / heads;
        let scale = 1.0 / (dh_width as f64).sqrt();

        // feed-forward residual branch
        let mut dgu = vec![0.0; l * f];
        self.affine_backward(dh, &c.gu, idx.w2, idx.b2, f, d, grads, &mut dgu, false);
        for (g, &u) in dgu.iter_mut().zip(&c.u) {
            *g *= gelu_grad(u);
        }
        let mut da2 = vec![0.0; l * d];
        self.affine_backward(&dgu, &c.a2, idx.w1, idx.b1, d, f, grads, &mut da2, false);
        let (dg, db) = split_pair(grads, idx.ln2_g, idx.ln2_b, d);
        let dx = layer_norm_backward(&da2, &c.ln2, self.p(idx.ln2_g, d), dg, db);
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);

        // attention residual branch
        let mut d_o = vec![0.0; l * d];
        self.affine_backward(dh, &c.o, idx.wo, idx.bo, d, d, grads, &mut d_o, false);
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dp = vec![0.0; l * l];
        for hh in 0..heads {
            let off = hh * dh_width;
            let ph = &c.p[hh * l * l..(hh + 1) * l * l];
            gemm(l, dh_width, l, 1.0, &d_o[off..], d, 1, &c.v[off..], 1, d, 0.0, &mut dp, l, 1);
            gemm(l, l, dh_width, 1.0, ph, 1, l, &d_o[off..], d, 1, 0.0, &mut dv[off..], d, 1);
            for (prow, dprow) in ph.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                let inner = match fault {
                    BackwardFault::AttentionSoftmax => 0.0,
                    BackwardFault::None => prow.iter().zip(dprow.iter()).map(|(p, g)| p * g).sum(),
                };
                for (g, &p) in dprow.iter_mut().zip(prow) {
                    *g = p * (*g - inner) * scale;
                }
            }
            gemm(l, l, dh_width, 1.0, &dp, l, 1, &c.k[off..], d, 1, 0.0, &mut dq[off..], d, 1);
            gemm(l, l, dh_width, 1.0, &dp, 1, l, &c.q[off..], d, 1, 0.0, &mut dk[off..], d, 1);
        }
        let mut da = vec![0.0; l * d];
        self.affine_backward(&dq, &c.a, idx.wq, idx.bq, d, d, grads, &mut da, false);
        self.affine_backward(&dk, &c.a, idx.wk, idx.bk, d, d, grads, &mut da, true);
        self.affine_backward(&dv, &c.a, idx.wv, idx.bv, d, d, grads, &mut da, true);
        let (dg, db) = split_pair(grads, idx.ln1_g, idx.ln1_b, d);
        let dx = layer_norm_backward(&da, &c.ln1, self.p(idx.ln1_g, d), dg, db);
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }

    fn rule_forward(&self, zf: &[f64], idx: &RuleIdx, dropout: &mut Option<Dropout<'_>>) -> (RuleOutput, f64, RuleCache) {
        let d = self.config.d_model;
        let l = zf.len() / d;
        let scale = 1.0 / (d as f64).sqrt();
        let k = self.affine(zf, idx.wk, idx.bk, d, d);
        let v = self.affine(zf, idx.wv, idx.bv, d, d);
        let mut alpha = vec![0.0; l];
        gemm(l, d, 1, scale, &k, d, 1, self.p(idx.query, d), 1, 1, 0.0, &mut alpha, 1, 1);
        softmax_in_place(&mut alpha);
        let mut c = vec![0.0; d];
        gemm(1, l, d, 1.0, &alpha, l, 1, &v, d, 1, 0.0, &mut c, d, 1);
        let (logits, cls) = self.mlp_forward(&c, &idx.classifier, dropout);
        let (fc_out, fc) = self.mlp_forward(&c, &idx.forecaster, dropout);
        let logits = [logits[0], logits[1], logits[2]];
        let mut probs = logits;
        softmax_in_place(&mut probs);
        let forecast_std = fc_out[0];
        let rule = self.rule_position(idx);
        let forecast = self.normalizer.denormalize_target(rule, forecast_std);
        (RuleOutput { logits, probs, forecast }, forecast_std, RuleCache { k, v, alpha, c, cls, fc })
    }

    fn rule_position(&self, idx: &RuleIdx) -> usize {
        self.layout.index.rules.iter().position(|r| r == idx).expect("rule index belongs to layout")
    }

    fn rule_backward(&self, g: &RuleGrad, zf: &[f64], c: &RuleCache, idx: &RuleIdx, grads: &mut [f64], dzf: &mut [f64]) {
        let d = self.config.d_model;
        let l = zf.len() / d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dc = self.mlp_backward(&g.dlogits, &c.c, &c.cls, &idx.classifier, grads);
        let dc_fc = self.mlp_backward(&[g.dforecast], &c.c, &c.fc, &idx.forecaster, grads);
        dc.iter_mut().zip(&dc_fc).for_each(|(a, b)| *a += b);

        // c = sum_t alpha_t v_t
        let mut dalpha = vec![0.0; l];
        gemm(l, d, 1, 1.0, &c.v, d, 1, &dc, 1, 1, 0.0, &mut dalpha, 1, 1);
        let mut dv = vec![0.0; l * d];
        gemm(l, 1, d, 1.0, &c.alpha, 1, 1, &dc, d, 1, 0.0, &mut dv, d, 1);
        let inner: f64 = c.alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
        let ds: Vec<f64> = c.alpha.iter().zip(&dalpha).map(|(a, g)| a * (g - inner) * scale).collect();
        // s_t = scale * k_t . query
        let mut dk = vec![0.0; l * d];
        gemm(l, 1, d, 1.0, &ds, 1, 1, self.p(idx.query, d), d, 1, 0.0, &mut dk, d, 1);
        gemm(d, l, 1, 1.0, &c.k, 1, d, &ds, 1, 1, 1.0, &mut grads[idx.query..idx.query + d], 1, 1);
        self.affine_backward(&dk, zf, idx.wk, idx.bk, d, d, grads, dzf, true);
        self.affine_backward(&dv, zf, idx.wv, idx.bv, d, d, grads, dzf, true);
    }

    /// Forward pass for one standardized-or-raw lookback (`L x channels`,
    /// row-major). Returns per-rule outputs, the standardized forecasts and
    /// the cache for [`Model::backward_example`].
    pub(crate) fn forward_example(
        &self,
        x: &[f64],
        mut dropout: Option<Dropout<'_>>,
    ) -> (Vec<RuleOutput>, Vec<f64>, Cache) {
        let d = self.config.d_model;
        let ch = self.config.channels;
        let l = x.len() / ch;
        let idx = &self.layout.index;

        let xn = self.normalizer.normalize_input(x, ch);
        let mut h = self.affine(&xn, idx.embed_w, idx.embed_b, ch, d);
        h.iter_mut().zip(&self.positional).for_each(|(h, p)| *h += p);

        let layers: Vec<LayerCache> = idx.layers.iter().map(|li| self.layer_forward(&mut h, li)).collect();
        let (zf, lnf) = layer_norm(&h, self.p(idx.lnf_g, d), self.p(idx.lnf_b, d));
        debug_assert_eq!(zf.len(), l * d);

        let mut outputs = Vec::with_capacity(idx.rules.len());
        let mut forecasts_std = Vec::with_capacity(idx.rules.len());
        let mut rules = Vec::with_capacity(idx.rules.len());
        for ri in &idx.rules {
            let (out, fstd, rc) = self.rule_forward(&zf, ri, &mut dropout);
            outputs.push(out);
            forecasts_std.push(fstd);
            rules.push(rc);
        }
        (outputs, forecasts_std, Cache { xn, layers, lnf, zf, rules })
    }

    /// Accumulate parameter gradients for one example into `grads`.
    pub(crate) fn backward_example(&self, cache: &Cache, rule_grads: &[RuleGrad], grads: &mut [f64], fault: BackwardFault) {
        let d = self.config.d_model;
        let ch = self.config.channels;
        let idx = &self.layout.index;
        let mut dzf = vec![0.0; cache.zf.len()];
        for ((g, rc), ri) in rule_grads.iter().zip(&cache.rules).zip(&idx.rules) {
            self.rule_backward(g, &cache.zf, rc, ri, grads, &mut dzf);
        }
        let (dg, db) = split_pair(grads, idx.lnf_g, idx.lnf_b, d);
        let mut dh = layer_norm_backward(&dzf, &cache.lnf, self.p(idx.lnf_g, d), dg, db);
        for (lc, li) in cache.layers.iter().zip(&idx.layers).rev() {
            self.layer_backward(&mut dh, lc, li, grads, fault);
        }
        let rows = cache.xn.len() / ch;
        mm_tn(&cache.xn, &dh, &mut grads[idx.embed_w..idx.embed_w + ch * d], rows, ch, d, true);
        col_sums_into(&dh, &mut grads[idx.embed_b..idx.embed_b + d]);
    }
}

/// Two disjoint mutable windows of `grads` (gain, bias) of width `d`.
fn split_pair(grads: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a + d <= b, "gain precedes bias in the layout");
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

/// Sinusoidal positional encoding, `L x d` row-major.
pub(crate) fn positional_encoding(l: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; l * d];
    for t in 0..l {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
