//! Pre-LN decoder-only transformer with a top-k mixture-of-experts
//! feed-forward block, hand-differentiated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::tokenize::VocabLayout;

use super::layout::{seq_len_for_frames, TokenSequence};
use super::ops::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_in_place,
};
use super::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Expert hidden width is `ffn_mult × d_model`.
    pub ffn_mult: usize,
    /// Layers with `l % moe_every == 0` route over experts; others use one dense block.
    pub moe_every: usize,
    pub vocab: VocabLayout,
    pub history: usize,
    pub bev_tokens_per_frame: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DapError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return err("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return err(format!(
                "top_k {} must lie in 1..={} experts",
                self.top_k, self.n_experts
            ));
        }
        if self.moe_every == 0 {
            return err("moe_every must be at least 1".into());
        }
        let min_len = seq_len_for_frames(self.history + 1, self.bev_tokens_per_frame);
        if self.max_seq_len < min_len {
            return err(format!(
                "max_seq_len {} is shorter than one context of {min_len} tokens",
                self.max_seq_len
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return err("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn experts_in_layer(&self, l: usize) -> usize {
        if l.is_multiple_of(self.moe_every) {
            self.n_experts
        } else {
            1
        }
    }

    pub fn top_k_in_layer(&self, l: usize) -> usize {
        self.top_k.min(self.experts_in_layer(l))
    }

    /// Whole frames that fit into `max_seq_len`.
    pub fn max_frames(&self) -> usize {
        (self.max_seq_len - 1) / (self.bev_tokens_per_frame + 1)
    }
}

#[derive(Clone, Debug)]
struct ExpertIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    gate: Option<(usize, usize)>,
    experts: Vec<ExpertIdx>,
}

#[derive(Clone, Debug)]
struct Idx {
    tok: usize,
    pos: usize,
    typ: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    idx: Idx,
}

/// Cached activations for one expert over the tokens routed to it.
#[derive(Clone, Debug, Default)]
struct ExpertCache {
    tokens: Vec<usize>,
    weights: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    gate_probs: Vec<f64>,
    selected: Vec<Vec<usize>>,
    experts: Vec<ExpertCache>,
    route_frac: Vec<f64>,
}

/// Activations of one full forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    types: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Final normalized hidden states, `T × d`.
    pub hidden: Vec<f64>,
    /// `T × V_all`.
    pub logits: Vec<f64>,
    /// Sum over MoE layers of the load-balance statistic.
    pub aux_loss: f64,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits_at(&self, pos: usize, v: usize) -> &[f64] {
        &self.logits[pos * v..(pos + 1) * v]
    }

    pub fn hidden_at(&self, pos: usize, d: usize) -> &[f64] {
        &self.hidden[pos * d..(pos + 1) * d]
    }
}

/// Top-k expert indices by gate logit, ties to the lowest index, in index order.
pub fn select_top_k(z: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // Stable sort keeps lower indices first among equal logits.
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Gate weights renormalized over the selected experts.
pub fn renormalized_weights(z: &[f64], selected: &[usize]) -> Vec<f64> {
    let mut w: Vec<f64> = selected.iter().map(|&e| z[e]).collect();
    softmax_in_place(&mut w);
    w
}

impl Model {
    /// Deterministic initialization for `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let (mut params, idx) = Self::allocate(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        for s in params.specs.clone() {
            let n = s.len();
            let last = s.name.rsplit('.').next().unwrap_or("");
            match last {
                "g" => params.fill(s.offset, n, 1.0),
                "w_o" | "w2" => params.fill_normal(s.offset, n, proj_std, &mut rng),
                _ if s.shape.len() == 2 => params.fill_normal(s.offset, n, std, &mut rng),
                _ => params.fill(s.offset, n, 0.0),
            }
        }
        Ok(Model {
            config,
            params,
            idx,
        })
    }

    /// Rebuilds a model around existing parameter values.
    pub fn from_params(config: ModelConfig, data: Vec<f64>) -> Result<Model> {
        config.validate()?;
        let (mut params, idx) = Self::allocate(&config);
        if data.len() != params.len() {
            return Err(DapError::Config(format!(
                "parameter vector has {} values, model needs {}",
                data.len(),
                params.len()
            )));
        }
        params.data = data;
        Ok(Model {
            config,
            params,
            idx,
        })
    }

    fn allocate(c: &ModelConfig) -> (ParamStore, Idx) {
        let (d, v, f) = (c.d_model, c.vocab.total(), c.ffn_dim());
        let mut p = ParamStore::new();
        let tok = p.add("tok_emb", &[v, d]);
        let pos = p.add("pos_emb", &[c.max_seq_len, d]);
        let typ = p.add("type_emb", &[3, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            let ln1_g = p.add(n("ln1.g"), &[d]);
            let ln1_b = p.add(n("ln1.b"), &[d]);
            let w_qkv = p.add(n("attn.w_qkv"), &[d, 3 * d]);
            let b_qkv = p.add(n("attn.b_qkv"), &[3 * d]);
            let w_o = p.add(n("attn.w_o"), &[d, d]);
            let b_o = p.add(n("attn.b_o"), &[d]);
            let ln2_g = p.add(n("ln2.g"), &[d]);
            let ln2_b = p.add(n("ln2.b"), &[d]);
            let ne = c.experts_in_layer(l);
            let gate = (ne > 1).then(|| (p.add(n("gate.w"), &[d, ne]), p.add(n("gate.b"), &[ne])));
            let experts = (0..ne)
                .map(|e| ExpertIdx {
                    w1: p.add(n(&format!("expert{e}.w1")), &[d, f]),
                    b1: p.add(n(&format!("expert{e}.b1")), &[f]),
                    w2: p.add(n(&format!("expert{e}.w2")), &[f, d]),
                    b2: p.add(n(&format!("expert{e}.b2")), &[d]),
                })
                .collect();
            layers.push(LayerIdx {
                ln1_g,
                ln1_b,
                w_qkv,
                b_qkv,
                w_o,
                b_o,
                ln2_g,
                ln2_b,
                gate,
                experts,
            });
        }
        let lnf_g = p.add("lnf.g", &[d]);
        let lnf_b = p.add("lnf.b", &[d]);
        let w_out = p.add("head.w_out", &[d, v]);
        let b_out = p.add("head.b_out", &[v]);
        (
            p,
            Idx {
                tok,
                pos,
                typ,
                layers,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
            },
        )
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab.total()
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params.data[off..off + len]
    }

    /// Offset and length of the output head (`w_out` then `b_out`).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.idx.w_out..self.idx.b_out + self.vocab_size()
    }

    fn embed_into(&self, token: u32, ty: usize, pos: usize, out: &mut [f64]) {
        let d = self.config.d_model;
        let t = token as usize;
        out.copy_from_slice(self.p(self.idx.tok + t * d, d));
        axpy(1.0, self.p(self.idx.pos + pos * d, d), out);
        axpy(1.0, self.p(self.idx.typ + ty * d, d), out);
    }

    /// Full causal forward over a validated sequence.
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardCache> {
        if seq.bev_per_frame != self.config.bev_tokens_per_frame {
            return Err(DapError::Sequence(
                "sequence BEV width does not match model".into(),
            ));
        }
        seq.validate(&self.config.vocab, self.config.max_seq_len)?;
        Ok(self.forward_unchecked(&seq.tokens, &seq.type_ids()))
    }

    pub(crate) fn forward_unchecked(&self, tokens: &[u32], types: &[usize]) -> ForwardCache {
        let c = &self.config;
        let (d, t_len, v) = (c.d_model, tokens.len(), self.vocab_size());
        let mut x = vec![0.0; t_len * d];
        for (p, (&tok, &ty)) in tokens.iter().zip(types).enumerate() {
            self.embed_into(tok, ty, p, &mut x[p * d..(p + 1) * d]);
        }
        let mut layers = Vec::with_capacity(c.n_layers);
        let mut aux_loss = 0.0;
        for (l, li) in self.idx.layers.iter().enumerate() {
            let (lc, aux) = self.layer_forward(l, li, &mut x);
            aux_loss += aux;
            layers.push(lc);
        }
        let mut hidden = vec![0.0; t_len * d];
        let mut lnf_xhat = vec![0.0; t_len * d];
        let mut lnf_rstd = vec![0.0; t_len];
        layer_norm(
            &x,
            self.p(self.idx.lnf_g, d),
            self.p(self.idx.lnf_b, d),
            d,
            &mut hidden,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        let mut logits = vec![0.0; t_len * v];
        linear(
            &hidden,
            self.p(self.idx.w_out, d * v),
            Some(self.p(self.idx.b_out, v)),
            d,
            v,
            &mut logits,
        );
        ForwardCache {
            tokens: tokens.to_vec(),
            types: types.to_vec(),
            layers,
            lnf_xhat,
            lnf_rstd,
            hidden,
            logits,
            aux_loss,
        }
    }

    fn layer_forward(&self, l: usize, li: &LayerIdx, x: &mut [f64]) -> (LayerCache, f64) {
        let c = &self.config;
        let d = c.d_model;
        let t_len = x.len() / d;
        let (nh, dh) = (c.n_heads, c.head_dim());
        let mut h1 = vec![0.0; t_len * d];
        let mut ln1_xhat = vec![0.0; t_len * d];
        let mut ln1_rstd = vec![0.0; t_len];
        layer_norm(
            x,
            self.p(li.ln1_g, d),
            self.p(li.ln1_b, d),
            d,
            &mut h1,
            &mut ln1_xhat,
            &mut ln1_rstd,
        );
        let mut qkv = vec![0.0; t_len * 3 * d];
        linear(
            &h1,
            self.p(li.w_qkv, 3 * d * d),
            Some(self.p(li.b_qkv, 3 * d)),
            d,
            3 * d,
            &mut qkv,
        );

        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nh * t_len * t_len];
        let mut attn = vec![0.0; t_len * d];
        for h in 0..nh {
            for t in 0..t_len {
                let q = &qkv[t * 3 * d + h * dh..t * 3 * d + (h + 1) * dh];
                let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = scale
                        * dot(
                            q,
                            &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh],
                        );
                }
                softmax_in_place(row);
                let out = &mut attn[t * d + h * dh..t * d + (h + 1) * dh];
                for (j, &pj) in row.iter().enumerate() {
                    axpy(
                        pj,
                        &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh],
                        out,
                    );
                }
            }
        }
        let mut o = vec![0.0; t_len * d];
        linear(
            &attn,
            self.p(li.w_o, d * d),
            Some(self.p(li.b_o, d)),
            d,
            d,
            &mut o,
        );
        axpy(1.0, &o, x);

        let mut h2 = vec![0.0; t_len * d];
        let mut ln2_xhat = vec![0.0; t_len * d];
        let mut ln2_rstd = vec![0.0; t_len];
        layer_norm(
            x,
            self.p(li.ln2_g, d),
            self.p(li.ln2_b, d),
            d,
            &mut h2,
            &mut ln2_xhat,
            &mut ln2_rstd,
        );
        let (y, gate_probs, selected, experts, route_frac, aux) = self.moe_forward(l, li, &h2);
        axpy(1.0, &y, x);
        (
            LayerCache {
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv,
                probs,
                attn,
                ln2_xhat,
                ln2_rstd,
                h2,
                gate_probs,
                selected,
                experts,
                route_frac,
            },
            aux,
        )
    }

    #[allow(clippy::type_complexity)]
    fn moe_forward(
        &self,
        l: usize,
        li: &LayerIdx,
        h2: &[f64],
    ) -> (
        Vec<f64>,
        Vec<f64>,
        Vec<Vec<usize>>,
        Vec<ExpertCache>,
        Vec<f64>,
        f64,
    ) {
        let c = &self.config;
        let (d, f) = (c.d_model, c.ffn_dim());
        let t_len = h2.len() / d;
        let ne = li.experts.len();
        let k = c.top_k_in_layer(l);
        let mut experts = vec![ExpertCache::default(); ne];
        let mut gate_probs = Vec::new();
        let mut selected = Vec::with_capacity(t_len);
        let mut route_frac = vec![0.0; ne];
        let mut aux = 0.0;
        match li.gate {
            Some((gw, gb)) => {
                let mut z = vec![0.0; t_len * ne];
                linear(h2, self.p(gw, d * ne), Some(self.p(gb, ne)), d, ne, &mut z);
                gate_probs = z.clone();
                for t in 0..t_len {
                    let zt = &z[t * ne..(t + 1) * ne];
                    let sel = select_top_k(zt, k);
                    let w = renormalized_weights(zt, &sel);
                    for (&e, &we) in sel.iter().zip(&w) {
                        experts[e].tokens.push(t);
                        experts[e].weights.push(we);
                        route_frac[e] += 1.0 / (t_len * k) as f64;
                    }
                    softmax_in_place(&mut gate_probs[t * ne..(t + 1) * ne]);
                    selected.push(sel);
                }
                for e in 0..ne {
                    let mean_p =
                        (0..t_len).map(|t| gate_probs[t * ne + e]).sum::<f64>() / t_len as f64;
                    aux += ne as f64 * route_frac[e] * mean_p;
                }
            }
            None => {
                experts[0].tokens = (0..t_len).collect();
                experts[0].weights = vec![1.0; t_len];
                selected = vec![vec![0]; t_len];
            }
        }
        let mut y = vec![0.0; t_len * d];
        for (e, ec) in experts.iter_mut().enumerate() {
            let n = ec.tokens.len();
            if n == 0 {
                continue;
            }
            let ei = &li.experts[e];
            let mut xe = vec![0.0; n * d];
            for (r, &t) in ec.tokens.iter().enumerate() {
                xe[r * d..(r + 1) * d].copy_from_slice(&h2[t * d..(t + 1) * d]);
            }
            ec.pre = vec![0.0; n * f];
            linear(
                &xe,
                self.p(ei.w1, d * f),
                Some(self.p(ei.b1, f)),
                d,
                f,
                &mut ec.pre,
            );
            ec.act = ec.pre.iter().map(|&u| gelu(u)).collect();
            ec.out = vec![0.0; n * d];
            linear(
                &ec.act,
                self.p(ei.w2, f * d),
                Some(self.p(ei.b2, d)),
                f,
                d,
                &mut ec.out,
            );
            for (r, &t) in ec.tokens.iter().enumerate() {
                axpy(
                    ec.weights[r],
                    &ec.out[r * d..(r + 1) * d],
                    &mut y[t * d..(t + 1) * d],
                );
            }
        }
        (y, gate_probs, selected, experts, route_frac, aux)
    }

    /// Accumulates parameter gradients of `Σ dlogits·logits + aux_coef·aux_loss`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        aux_coef: f64,
        grads: &mut [f64],
    ) {
        self.backward_with_hidden(cache, dlogits, None, aux_coef, grads)
    }

    /// As [`Model::backward`], with an optional extra gradient on the final hidden states.
    pub fn backward_with_hidden(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        dhidden_extra: Option<&[f64]>,
        aux_coef: f64,
        grads: &mut [f64],
    ) {
        let c = &self.config;
        let (d, v) = (c.d_model, self.vocab_size());
        let t_len = cache.len();
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(dlogits.len(), t_len * v);

        let mut dhidden = vec![0.0; t_len * d];
        {
            let (lo, hi) = grads.split_at_mut(self.idx.b_out);
            linear_backward(
                &cache.hidden,
                self.p(self.idx.w_out, d * v),
                dlogits,
                d,
                v,
                Some(&mut dhidden),
                &mut lo[self.idx.w_out..self.idx.w_out + d * v],
                Some(&mut hi[..v]),
            );
        }
        if let Some(extra) = dhidden_extra {
            axpy(1.0, extra, &mut dhidden);
        }
        let mut dx = vec![0.0; t_len * d];
        {
            let (dg, db) = two_slices(grads, self.idx.lnf_g, self.idx.lnf_b, d);
            layer_norm_backward(
                &cache.lnf_xhat,
                &cache.lnf_rstd,
                self.p(self.idx.lnf_g, d),
                &dhidden,
                d,
                &mut dx,
                dg,
                db,
            );
        }
        for l in (0..c.n_layers).rev() {
            self.layer_backward(
                &self.idx.layers[l],
                &cache.layers[l],
                &mut dx,
                aux_coef,
                grads,
            );
        }
        for (p, (&tok, &ty)) in cache.tokens.iter().zip(&cache.types).enumerate() {
            let g = &dx[p * d..(p + 1) * d];
            let t = tok as usize;
            axpy(
                1.0,
                g,
                &mut grads[self.idx.tok + t * d..self.idx.tok + (t + 1) * d],
            );
            axpy(
                1.0,
                g,
                &mut grads[self.idx.pos + p * d..self.idx.pos + (p + 1) * d],
            );
            axpy(
                1.0,
                g,
                &mut grads[self.idx.typ + ty * d..self.idx.typ + (ty + 1) * d],
            );
        }
    }

    fn layer_backward(
        &self,
        li: &LayerIdx,
        lc: &LayerCache,
        dx: &mut [f64],
        aux_coef: f64,
        grads: &mut [f64],
    ) {
        let c = &self.config;
        let (d, f) = (c.d_model, c.ffn_dim());
        let t_len = dx.len() / d;
        let (nh, dh) = (c.n_heads, c.head_dim());

        // Mixture-of-experts block: dx carries dy of the residual branch.
        let mut dh2 = vec![0.0; t_len * d];
        let ne = li.experts.len();
        let mut dw_sel: Vec<Vec<f64>> = lc.selected.iter().map(|s| vec![0.0; s.len()]).collect();
        for (e, ec) in lc.experts.iter().enumerate() {
            let n = ec.tokens.len();
            if n == 0 {
                continue;
            }
            let ei = &li.experts[e];
            let mut dout = vec![0.0; n * d];
            for (r, &t) in ec.tokens.iter().enumerate() {
                let dyt = &dx[t * d..(t + 1) * d];
                let slot = lc.selected[t].iter().position(|&s| s == e).unwrap();
                dw_sel[t][slot] = dot(dyt, &ec.out[r * d..(r + 1) * d]);
                axpy(ec.weights[r], dyt, &mut dout[r * d..(r + 1) * d]);
            }
            let mut dact = vec![0.0; n * f];
            {
                let (dw2, db2) = two_slices(grads, ei.w2, ei.b2, f * d);
                linear_backward(
                    &ec.act,
                    self.p(ei.w2, f * d),
                    &dout,
                    f,
                    d,
                    Some(&mut dact),
                    dw2,
                    Some(&mut db2[..d]),
                );
            }
            for (g, &u) in dact.iter_mut().zip(&ec.pre) {
                *g *= gelu_grad(u);
            }
            let mut xe = vec![0.0; n * d];
            for (r, &t) in ec.tokens.iter().enumerate() {
                xe[r * d..(r + 1) * d].copy_from_slice(&lc.h2[t * d..(t + 1) * d]);
            }
            let mut dxe = vec![0.0; n * d];
            {
                let (dw1, db1) = two_slices(grads, ei.w1, ei.b1, d * f);
                linear_backward(
                    &xe,
                    self.p(ei.w1, d * f),
                    &dact,
                    d,
                    f,
                    Some(&mut dxe),
                    dw1,
                    Some(&mut db1[..f]),
                );
            }
            for (r, &t) in ec.tokens.iter().enumerate() {
                axpy(1.0, &dxe[r * d..(r + 1) * d], &mut dh2[t * d..(t + 1) * d]);
            }
        }
        if let Some((gw, gb)) = li.gate {
            let mut dz = vec![0.0; t_len * ne];
            for t in 0..t_len {
                let sel = &lc.selected[t];
                let w: Vec<f64> = sel
                    .iter()
                    .map(|&e| {
                        let r = lc.experts[e].tokens.binary_search(&t).unwrap();
                        lc.experts[e].weights[r]
                    })
                    .collect();
                let mean: f64 = w.iter().zip(&dw_sel[t]).map(|(a, b)| a * b).sum();
                for (i, &e) in sel.iter().enumerate() {
                    dz[t * ne + e] += w[i] * (dw_sel[t][i] - mean);
                }
                if aux_coef != 0.0 {
                    let g = &lc.gate_probs[t * ne..(t + 1) * ne];
                    let dg: Vec<f64> = (0..ne)
                        .map(|e| aux_coef * ne as f64 * lc.route_frac[e] / t_len as f64)
                        .collect();
                    let m = dot(g, &dg);
                    for e in 0..ne {
                        dz[t * ne + e] += g[e] * (dg[e] - m);
                    }
                }
            }
            let (dgw, dgb) = two_slices(grads, gw, gb, d * ne);
            linear_backward(
                &lc.h2,
                self.p(gw, d * ne),
                &dz,
                d,
                ne,
                Some(&mut dh2),
                dgw,
                Some(&mut dgb[..ne]),
            );
        }
        let mut dmid = vec![0.0; t_len * d];
        {
            let (dg, db) = two_slices(grads, li.ln2_g, li.ln2_b, d);
            layer_norm_backward(
                &lc.ln2_xhat,
                &lc.ln2_rstd,
                self.p(li.ln2_g, d),
                &dh2,
                d,
                &mut dmid,
                dg,
                db,
            );
        }
        axpy(1.0, &dmid, dx);

        // Attention block.
        let mut dattn = vec![0.0; t_len * d];
        {
            let (dwo, dbo) = two_slices(grads, li.w_o, li.b_o, d * d);
            linear_backward(
                &lc.attn,
                self.p(li.w_o, d * d),
                dx,
                d,
                d,
                Some(&mut dattn),
                dwo,
                Some(&mut dbo[..d]),
            );
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; t_len * 3 * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..nh {
            for t in 0..t_len {
                let row = &lc.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let dout = &dattn[t * d + h * dh..t * d + (h + 1) * dh];
                let mut s = 0.0;
                for (j, &pj) in row.iter().enumerate() {
                    let vj = j * 3 * d + 2 * d + h * dh;
                    dp[j] = dot(dout, &lc.qkv[vj..vj + dh]);
                    s += pj * dp[j];
                    axpy(pj, dout, &mut dqkv[vj..vj + dh]);
                }
                let qt = t * 3 * d + h * dh;
                for (j, &pj) in row.iter().enumerate() {
                    let ds = pj * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = j * 3 * d + d + h * dh;
                    let (lo, hi) = dqkv.split_at_mut(kj.max(qt));
                    if kj > qt {
                        axpy(ds, &lc.qkv[kj..kj + dh], &mut lo[qt..qt + dh]);
                        axpy(ds, &lc.qkv[qt..qt + dh], &mut hi[..dh]);
                    } else {
                        axpy(ds, &lc.qkv[kj..kj + dh], &mut hi[..dh]);
                        axpy(ds, &lc.qkv[qt..qt + dh], &mut lo[kj..kj + dh]);
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; t_len * d];
        {
            let (dw, db) = two_slices(grads, li.w_qkv, li.b_qkv, 3 * d * d);
            linear_backward(
                &lc.h1,
                self.p(li.w_qkv, 3 * d * d),
                &dqkv,
                d,
                3 * d,
                Some(&mut dh1),
                dw,
                Some(&mut db[..3 * d]),
            );
        }
        let mut dres = vec![0.0; t_len * d];
        {
            let (dg, db) = two_slices(grads, li.ln1_g, li.ln1_b, d);
            layer_norm_backward(
                &lc.ln1_xhat,
                &lc.ln1_rstd,
                self.p(li.ln1_g, d),
                &dh1,
                d,
                &mut dres,
                dg,
                db,
            );
        }
        axpy(1.0, &dres, dx);
    }

    /// Empty key/value cache for incremental decoding.
    pub fn new_state(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
            hidden: vec![0.0; self.config.d_model],
        }
    }

    /// Appends one token and returns the final normalized hidden state at it.
    pub fn step<'s>(&self, state: &'s mut DecodeState, token: u32, ty: usize) -> Result<&'s [f64]> {
        let c = &self.config;
        if state.len >= c.max_seq_len {
            return Err(DapError::Sequence(format!(
                "decode position {} exceeds maximum {}",
                state.len, c.max_seq_len
            )));
        }
        if token as usize >= self.vocab_size() {
            return Err(DapError::Sequence(format!(
                "token {token} outside vocabulary"
            )));
        }
        let (d, nh, dh) = (c.d_model, c.n_heads, c.head_dim());
        let pos = state.len;
        let mut x = vec![0.0; d];
        self.embed_into(token, ty, pos, &mut x);
        let mut xhat = vec![0.0; d];
        let mut rstd = [0.0];
        for (l, li) in self.idx.layers.iter().enumerate() {
            let mut h1 = vec![0.0; d];
            layer_norm(
                &x,
                self.p(li.ln1_g, d),
                self.p(li.ln1_b, d),
                d,
                &mut h1,
                &mut xhat,
                &mut rstd,
            );
            let mut qkv = vec![0.0; 3 * d];
            linear(
                &h1,
                self.p(li.w_qkv, 3 * d * d),
                Some(self.p(li.b_qkv, 3 * d)),
                d,
                3 * d,
                &mut qkv,
            );
            state.keys[l].extend_from_slice(&qkv[d..2 * d]);
            state.values[l].extend_from_slice(&qkv[2 * d..]);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut attn = vec![0.0; d];
            let mut row = vec![0.0; pos + 1];
            for h in 0..nh {
                let q = &qkv[h * dh..(h + 1) * dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = scale * dot(q, &state.keys[l][j * d + h * dh..j * d + (h + 1) * dh]);
                }
                softmax_in_place(&mut row);
                let out = &mut attn[h * dh..(h + 1) * dh];
                for (j, &pj) in row.iter().enumerate() {
                    axpy(
                        pj,
                        &state.values[l][j * d + h * dh..j * d + (h + 1) * dh],
                        out,
                    );
                }
            }
            let mut o = vec![0.0; d];
            linear(
                &attn,
                self.p(li.w_o, d * d),
                Some(self.p(li.b_o, d)),
                d,
                d,
                &mut o,
            );
            axpy(1.0, &o, &mut x);
            let mut h2 = vec![0.0; d];
            layer_norm(
                &x,
                self.p(li.ln2_g, d),
                self.p(li.ln2_b, d),
                d,
                &mut h2,
                &mut xhat,
                &mut rstd,
            );
            let (y, ..) = self.moe_forward(l, li, &h2);
            axpy(1.0, &y, &mut x);
        }
        layer_norm(
            &x,
            self.p(self.idx.lnf_g, d),
            self.p(self.idx.lnf_b, d),
            d,
            &mut state.hidden,
            &mut xhat,
            &mut rstd,
        );
        state.len += 1;
        Ok(&state.hidden)
    }

    /// Logits for global ids in `range` from a final hidden state.
    pub fn logits_range(&self, hidden: &[f64], range: std::ops::Range<usize>) -> Vec<f64> {
        let (d, v) = (self.config.d_model, self.vocab_size());
        let w = self.p(self.idx.w_out, d * v);
        let mut out = self.p(self.idx.b_out + range.start, range.len()).to_vec();
        for (k, &h) in hidden.iter().enumerate() {
            axpy(h, &w[k * v + range.start..k * v + range.end], &mut out);
        }
        out
    }
}

/// Incremental decoding state (per-layer keys and values).
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pub len: usize,
    hidden: Vec<f64>,
}

impl DecodeState {
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

/// Two disjoint mutable windows `[a, a+la)` and `[b, …)` of `grads`, `a < b`.
fn two_slices(grads: &mut [f64], a: usize, b: usize, la: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + la <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + la], hi)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::armodel::layout::modality_at;
    use crate::tokenize::Modality;
    use rand::Rng;

    pub fn tiny_config(d: usize, layers: usize, experts: usize, top_k: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: 4,
            n_experts: experts,
            top_k,
            ffn_mult: 2,
            moe_every: 1,
            vocab: VocabLayout::new(3, 6, 10).unwrap(),
            history: 1,
            bev_tokens_per_frame: 2,
            max_seq_len: 16,
            init_std: 0.3,
        }
    }

    pub fn random_seq(c: &ModelConfig, len: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = c.bev_tokens_per_frame;
        let tokens = (0..len)
            .map(|p| {
                let r = c.vocab.range(modality_at(p, m));
                rng.gen_range(r) as u32
            })
            .collect();
        TokenSequence {
            tokens,
            bev_per_frame: m,
        }
    }

    fn closed_form_count(c: &ModelConfig) -> usize {
        let (d, v, t, f, e) = (
            c.d_model,
            c.vocab.total(),
            c.max_seq_len,
            c.ffn_dim(),
            c.n_experts,
        );
        let attn = 2 * d + 3 * d * d + 3 * d + d * d + d;
        let moe = 2 * d + d * e + e + e * (d * f + f + f * d + d);
        v * d + t * d + 3 * d + c.n_layers * (attn + moe) + 2 * d + d * v + v
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let mut c = tiny_config(64, 2, 4, 2);
        c.ffn_mult = 4;
        let a = Model::init(c.clone(), 7).unwrap();
        let b = Model::init(c.clone(), 7).unwrap();
        assert_eq!(a.params.data, b.params.data);
        assert_eq!(a.param_count(), closed_form_count(&c));
        let other = Model::init(c.clone(), 8).unwrap();
        assert_ne!(a.params.data, other.params.data);
        c.d_model = 63;
        assert!(matches!(Model::init(c, 0), Err(DapError::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config(8, 1, 2, 3);
        assert!(c.validate().is_err());
        c.top_k = 1;
        c.max_seq_len = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn causality_under_perturbation() {
        let c = tiny_config(8, 2, 4, 2);
        let m = Model::init(c.clone(), 1).unwrap();
        let seq = random_seq(&c, 13, 3);
        let base = m.forward(&seq).unwrap();
        let v = m.vocab_size();
        for p in 1..seq.len() {
            let mut s2 = seq.clone();
            let r = c.vocab.range(s2.modality(p));
            s2.tokens[p] = (r.start + (s2.tokens[p] as usize - r.start + 1) % r.len()) as u32;
            let pert = m.forward(&s2).unwrap();
            assert_eq!(&base.logits[..p * v], &pert.logits[..p * v]);
            assert_ne!(&base.logits[p * v..], &pert.logits[p * v..]);
        }
    }

    #[test]
    fn single_token_shape() {
        let c = tiny_config(8, 1, 2, 1);
        let m = Model::init(c.clone(), 1).unwrap();
        let seq = random_seq(&c, 1, 0);
        assert_eq!(m.forward(&seq).unwrap().logits.len(), m.vocab_size());
        let long = random_seq(&c, 17, 0);
        assert!(matches!(m.forward(&long), Err(DapError::Sequence(_))));
    }

    #[test]
    fn tie_broken_gate_selects_lowest_experts() {
        let z = [0.3, 0.3, 0.3, 0.3];
        let sel = select_top_k(&z, 2);
        assert_eq!(sel, vec![0, 1]);
        assert_eq!(renormalized_weights(&z, &sel), vec![0.5, 0.5]);
        assert_eq!(select_top_k(&[0.1, 0.9, 0.5, 0.9], 2), vec![1, 3]);
        let w = renormalized_weights(&[0.1, 2.0, -1.0], &[0, 1, 2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    /// Dense mixture reference: every expert evaluated, weighted by the full gate softmax.
    fn dense_reference(m: &Model, seq: &TokenSequence) -> Vec<f64> {
        let c = &m.config;
        let (d, f) = (c.d_model, c.ffn_dim());
        let v = m.vocab_size();
        let t_len = seq.len();
        let types = seq.type_ids();
        let p = |o: usize, n: usize| &m.params.data[o..o + n];
        let mut x = vec![0.0; t_len * d];
        for (i, (&tok, &ty)) in seq.tokens.iter().zip(&types).enumerate() {
            m.embed_into(tok, ty, i, &mut x[i * d..(i + 1) * d]);
        }
        let norm = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|k| (row[k] - mean) / (var + 1e-5).sqrt() * g[k] + b[k])
                .collect()
        };
        let mat = |xv: &[f64], w: &[f64], b: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .map(|j| b[j] + (0..xv.len()).map(|k| xv[k] * w[k * n + j]).sum::<f64>())
                .collect()
        };
        for li in &m.idx.layers {
            let mut qkv = Vec::new();
            for t in 0..t_len {
                let h = norm(&x[t * d..(t + 1) * d], p(li.ln1_g, d), p(li.ln1_b, d));
                qkv.push(mat(&h, p(li.w_qkv, 3 * d * d), p(li.b_qkv, 3 * d), 3 * d));
            }
            let dh = c.head_dim();
            for t in 0..t_len {
                let mut att = vec![0.0; d];
                for hd in 0..c.n_heads {
                    let s: Vec<f64> = (0..=t)
                        .map(|j| {
                            (0..dh)
                                .map(|k| qkv[t][hd * dh + k] * qkv[j][d + hd * dh + k])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=t {
                        for k in 0..dh {
                            att[hd * dh + k] += e[j] / z * qkv[j][2 * d + hd * dh + k];
                        }
                    }
                }
                let o = mat(&att, p(li.w_o, d * d), p(li.b_o, d), d);
                for k in 0..d {
                    x[t * d + k] += o[k];
                }
            }
            for t in 0..t_len {
                let h = norm(&x[t * d..(t + 1) * d], p(li.ln2_g, d), p(li.ln2_b, d));
                let ne = li.experts.len();
                let (gw, gb) = li.gate.unwrap();
                let mut g = mat(&h, p(gw, d * ne), p(gb, ne), ne);
                softmax_in_place(&mut g);
                for (e, ei) in li.experts.iter().enumerate() {
                    let u = mat(&h, p(ei.w1, d * f), p(ei.b1, f), f);
                    let a: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
                    let o = mat(&a, p(ei.w2, f * d), p(ei.b2, d), d);
                    for k in 0..d {
                        x[t * d + k] += g[e] * o[k];
                    }
                }
            }
        }
        let mut out = Vec::new();
        for t in 0..t_len {
            let h = norm(&x[t * d..(t + 1) * d], p(m.idx.lnf_g, d), p(m.idx.lnf_b, d));
            out.extend(mat(&h, p(m.idx.w_out, d * v), p(m.idx.b_out, v), v));
        }
        out
    }

    #[test]
    fn full_top_k_matches_dense_mixture() {
        let c = tiny_config(16, 2, 4, 4);
        let m = Model::init(c.clone(), 11).unwrap();
        let seq = random_seq(&c, 10, 5);
        let got = m.forward(&seq).unwrap().logits;
        let want = dense_reference(&m, &seq);
        let err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn single_expert_is_plain_feed_forward() {
        let mut c = tiny_config(8, 1, 1, 1);
        let m = Model::init(c.clone(), 2).unwrap();
        assert!(m.params.spec("layer0.gate.w").is_none());
        // A dense layer built through moe_every matches.
        c.n_experts = 3;
        c.moe_every = 2;
        c.n_layers = 2;
        let m2 = Model::init(c, 2).unwrap();
        assert!(m2.params.spec("layer1.gate.w").is_none());
        assert!(m2.params.spec("layer0.gate.w").is_some());
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let c = tiny_config(8, 2, 4, 2);
        let m = Model::init(c.clone(), 4).unwrap();
        let seq = random_seq(&c, 16, 9);
        let full = m.forward(&seq).unwrap();
        let mut st = m.new_state();
        let v = m.vocab_size();
        for (p, (&t, ty)) in seq.tokens.iter().zip(seq.type_ids()).enumerate() {
            let h = m.step(&mut st, t, ty).unwrap().to_vec();
            let lg = m.logits_range(&h, 0..v);
            for (a, b) in lg.iter().zip(full.logits_at(p, v)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(modality_at(p, 2) == Modality::Command, p == 0);
        }
        assert!(m.step(&mut st, 0, 0).is_err());
    }
}
