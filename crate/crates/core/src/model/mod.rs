//! Protocol encoder, image adapter, fusion, and heads.

mod fusion;
mod provider;
mod translator;

pub use fusion::Fused;
pub use provider::{FileProvider, ImageFeatureProvider, ImageFeatures, ProviderError, SyntheticProvider};
pub use translator::P2pOutput;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{GenomeSequence, GenomeVocab, FIELD_SEP, UNK};
use crate::numeric::{Graph, ParamStore, ShapeMismatch, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub sin_width: usize,
    pub proj_dim: usize,
    pub fusion_layers: usize,
    pub clin_dim: usize,
    pub n_classes: usize,
    pub n_adv_classes: usize,
    pub p2p_layers: usize,
    pub d_img: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            sin_width: 16,
            proj_dim: 32,
            fusion_layers: 2,
            clin_dim: 32,
            n_classes: 2,
            n_adv_classes: 2,
            p2p_layers: 1,
            d_img: 32,
            init_seed: 0,
        }
    }
}

/// Sizes taken from the vocabulary that fix the model's tables and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub learned_size: usize,
    pub bin_base: usize,
    pub total_bins: usize,
    pub n_fields: usize,
    /// Regression column per field (continuous fields only).
    pub cont_column: Vec<Option<usize>>,
    /// (mean, std) per regression column.
    pub cont_stats: Vec<(f64, f64)>,
}

impl VocabLayout {
    pub fn from_vocab(v: &GenomeVocab) -> Self {
        let mut cont_column = Vec::new();
        let mut cont_stats = Vec::new();
        for f in &v.fields {
            match &f.bins {
                Some(b) => {
                    cont_column.push(Some(cont_stats.len()));
                    cont_stats.push((b.mean, b.std));
                }
                None => cont_column.push(None),
            }
        }
        VocabLayout {
            vocab_size: v.size() as usize,
            learned_size: v.learned_size() as usize,
            bin_base: v.bin_base() as usize,
            total_bins: v.total_bins() as usize,
            n_fields: v.fields.len(),
            cont_column,
            cont_stats,
        }
    }

    pub fn n_cont(&self) -> usize {
        self.cont_stats.len()
    }

    /// Categorical prediction class: learned ids as-is, hash buckets as [UNK].
    pub fn cat_class(&self, tok: u32) -> usize {
        let t = tok as usize;
        if t < self.learned_size {
            t
        } else {
            UNK as usize
        }
    }

    /// Translator output class covering learned ids then every bin token.
    pub fn p2p_class(&self, tok: u32) -> usize {
        let t = tok as usize;
        if t < self.learned_size {
            t
        } else if t >= self.bin_base && t < self.bin_base + self.total_bins {
            self.learned_size + (t - self.bin_base)
        } else {
            UNK as usize
        }
    }

    pub fn p2p_classes(&self) -> usize {
        self.learned_size + self.total_bins
    }

    pub fn class_to_token(&self, class: usize) -> u32 {
        if class < self.learned_size {
            class as u32
        } else {
            (self.bin_base + class - self.learned_size) as u32
        }
    }

    pub fn standardize(&self, col: usize, v: f64) -> f64 {
        let (m, s) = self.cont_stats[col];
        (v - m) / s
    }

    pub fn destandardize(&self, col: usize, z: f64) -> f64 {
        let (m, s) = self.cont_stats[col];
        z * s + m
    }
}

/// Pairs (sin(v/w^k), cos(v/w^k)) with w = 10000^(2/width).
pub fn sinusoidal_project(value: f64, width: usize) -> Vec<f64> {
    assert!(width % 2 == 0, "sinusoidal width must be even");
    let omega = 10000f64.powf(2.0 / width as f64);
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let x = value / omega.powi(k as i32);
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

fn positional(pos: usize, width: usize) -> Vec<f64> {
    sinusoidal_project(pos as f64, width)
}

pub struct Encoded {
    pub states: Var,
    pub offsets: Vec<usize>,
    pub pooled: Var,
}

pub struct ImageEncoded {
    pub tokens: Var,
    pub offsets: Vec<usize>,
    pub pooled: Var,
}

pub struct ProtocolModel {
    pub config: ModelConfig,
    pub layout: VocabLayout,
    pub params: ParamStore,
}

pub(crate) fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, ShapeMismatch> {
    let w = g.p(&format!("{prefix}.w"));
    let b = g.p(&format!("{prefix}.b"));
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, ShapeMismatch> {
    let gm = g.p(&format!("{prefix}.g"));
    let b = g.p(&format!("{prefix}.b"));
    g.layer_norm(x, gm, b)
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn linear(&mut self, s: &mut ParamStore, prefix: &str, din: usize, dout: usize) {
        let std = 1.0 / (din as f64).sqrt();
        s.add(format!("{prefix}.w"), Tensor::randn(din, dout, std, &mut self.rng));
        s.add(format!("{prefix}.b"), Tensor::zeros(1, dout));
    }

    fn zero_linear(&mut self, s: &mut ParamStore, prefix: &str, din: usize, dout: usize) {
        s.add(format!("{prefix}.w"), Tensor::zeros(din, dout));
        s.add(format!("{prefix}.b"), Tensor::zeros(1, dout));
    }

    fn ln(&mut self, s: &mut ParamStore, prefix: &str, d: usize) {
        s.add(format!("{prefix}.g"), Tensor::filled(1, d, 1.0));
        s.add(format!("{prefix}.b"), Tensor::zeros(1, d));
    }

    fn attn(&mut self, s: &mut ParamStore, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(s, &format!("{prefix}.{p}"), d, d);
        }
    }

    fn block(&mut self, s: &mut ParamStore, prefix: &str, d: usize, dff: usize, cross: bool) {
        self.ln(s, &format!("{prefix}.ln1"), d);
        self.attn(s, &format!("{prefix}.attn"), d);
        if cross {
            self.ln(s, &format!("{prefix}.ln_x"), d);
            self.ln(s, &format!("{prefix}.ln_mem"), d);
            self.attn(s, &format!("{prefix}.xattn"), d);
        }
        self.ln(s, &format!("{prefix}.ln2"), d);
        self.linear(s, &format!("{prefix}.ff1"), d, dff);
        self.linear(s, &format!("{prefix}.ff2"), dff, d);
    }
}

impl ProtocolModel {
    pub fn new(config: ModelConfig, layout: VocabLayout) -> Self {
        assert!(config.d_model % config.heads == 0, "heads must divide d_model");
        let mut s = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let d = config.d_model;
        let r = &mut init.rng;
        s.add("enc.tok_emb", Tensor::randn(layout.vocab_size, d, 0.1, r));
        s.add("enc.field_emb", Tensor::randn(layout.n_fields.max(1), d, 0.1, r));
        s.add(
            "enc.sin_w",
            Tensor::randn(config.sin_width, d, 1.0 / (config.sin_width as f64).sqrt(), r),
        );
        for l in 0..config.layers {
            init.block(&mut s, &format!("enc.l{l}"), d, config.d_ff, false);
        }
        init.ln(&mut s, "enc.ln_f", d);

        init.linear(&mut s, "img.adapter", config.d_img, d);
        init.linear(&mut s, "proj_img.l1", d, d);
        init.linear(&mut s, "proj_img.l2", d, config.proj_dim);
        init.linear(&mut s, "proj_hdr.l1", d, d);
        init.linear(&mut s, "proj_hdr.l2", d, config.proj_dim);

        for l in 0..config.fusion_layers {
            init.ln(&mut s, &format!("fuse.l{l}.ln_q"), d);
            init.ln(&mut s, &format!("fuse.l{l}.ln_mem"), d);
            init.attn(&mut s, &format!("fuse.l{l}.xattn"), d);
        }
        init.linear(&mut s, "fuse.film.l1", d, d);
        // Zero output layer: FiLM starts as the identity map.
        init.zero_linear(&mut s, "fuse.film.gamma", d, d);
        init.zero_linear(&mut s, "fuse.film.beta", d, d);

        init.linear(&mut s, "clin.embed", d, config.clin_dim);
        init.linear(&mut s, "clin.head", config.clin_dim, config.n_classes);
        init.linear(&mut s, "adv.head", config.clin_dim, config.n_adv_classes.max(1));

        init.ln(&mut s, "mpm.ln_x", d);
        init.ln(&mut s, "mpm.ln_mem", d);
        init.attn(&mut s, "mpm.xattn", d);
        init.ln(&mut s, "mpm.ln_out", d);
        init.linear(&mut s, "mpm.cat", d, layout.learned_size);
        init.linear(&mut s, "mpm.num", d, layout.n_cont().max(1));

        for l in 0..config.p2p_layers {
            init.block(&mut s, &format!("p2p.l{l}"), d, config.d_ff, true);
        }
        init.ln(&mut s, "p2p.ln_f", d);
        init.linear(&mut s, "p2p.cls", d, layout.p2p_classes());
        init.linear(&mut s, "p2p.reg", d, layout.n_cont().max(1));

        ProtocolModel {
            config,
            layout,
            params: s,
        }
    }

    /// Parameter name prefix of the protocol encoder.
    pub const ENCODER_PREFIX: &'static str = "enc.";

    /// Multi-head attention sublayer; returns the output projection.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn mha(
        &self,
        g: &mut Graph<'_>,
        prefix: &str,
        x: Var,
        mem: Var,
        q_off: &[usize],
        k_off: &[usize],
        causal: bool,
    ) -> Result<Var, ShapeMismatch> {
        let q = linear(g, x, &format!("{prefix}.q"))?;
        let k = linear(g, mem, &format!("{prefix}.k"))?;
        let v = linear(g, mem, &format!("{prefix}.v"))?;
        let a = g.attention(q, k, v, q_off, k_off, self.config.heads, causal)?;
        linear(g, a, &format!("{prefix}.o"))
    }

    pub(crate) fn feed_forward(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, ShapeMismatch> {
        let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let h = linear(g, h, &format!("{prefix}.ff1"))?;
        let h = g.gelu(h);
        let h = linear(g, h, &format!("{prefix}.ff2"))?;
        g.add(x, h)
    }

    /// Input embedding for each position of each sequence, stacked.
    fn embed(&self, g: &mut Graph<'_>, seqs: &[&GenomeSequence]) -> Result<(Var, Vec<usize>), ShapeMismatch> {
        let d = self.config.d_model;
        let sw = self.config.sin_width;
        let mut offsets = vec![0];
        let (mut tok, mut blend, mut w, mut wb, mut field) = (vec![], vec![], vec![], vec![], vec![]);
        let mut sin = Vec::new();
        let mut pe = Vec::new();
        for s in seqs {
            for i in 0..s.len() {
                tok.push((s.token_ids[i] as usize).min(self.layout.vocab_size - 1));
                blend.push((s.blend_ids[i] as usize).min(self.layout.vocab_size - 1));
                w.push(s.interp_weights[i]);
                wb.push(1.0 - s.interp_weights[i]);
                field.push((s.field_ids[i] as usize).min(self.layout.n_fields.max(1) - 1));
                let raw = if s.missing_mask[i] { 0.0 } else { s.raw_values[i] };
                sin.extend(sinusoidal_project(raw, sw));
                pe.extend(positional(i, d));
            }
            offsets.push(tok.len());
        }
        let n = tok.len();
        let table = g.p("enc.tok_emb");
        let e_tok = g.gather_rows(table, &tok)?;
        let e_blend = g.gather_rows(table, &blend)?;
        let wv = g.constant(Tensor::col(w));
        let wbv = g.constant(Tensor::col(wb));
        let a = g.mul_col(e_tok, wv)?;
        let b = g.mul_col(e_blend, wbv)?;
        let x = g.add(a, b)?;
        let ftab = g.p("enc.field_emb");
        let f = g.gather_rows(ftab, &field)?;
        let x = g.add(x, f)?;
        let sinv = g.constant(Tensor::new(n, sw, sin));
        let sw_p = g.p("enc.sin_w");
        let s = g.matmul(sinv, sw_p)?;
        let x = g.add(x, s)?;
        let pev = g.constant(Tensor::new(n, d, pe));
        let x = g.add(x, pev)?;
        Ok((x, offsets))
    }

    /// Transformer encoding of a batch of sequences; pooled is the mean
    /// over each sequence's positions.
    pub fn encode(&self, g: &mut Graph<'_>, seqs: &[&GenomeSequence]) -> Result<Encoded, ShapeMismatch> {
        let (mut x, offsets) = self.embed(g, seqs)?;
        for l in 0..self.config.layers {
            let p = format!("enc.l{l}");
            let h = layer_norm(g, x, &format!("{p}.ln1"))?;
            let a = self.mha(g, &format!("{p}.attn"), h, h, &offsets, &offsets, false)?;
            x = g.add(x, a)?;
            x = self.feed_forward(g, x, &p)?;
        }
        let states = layer_norm(g, x, "enc.ln_f")?;
        let pooled = g.segment_mean(states, &offsets)?;
        Ok(Encoded {
            states,
            offsets,
            pooled,
        })
    }

    /// Image tokens through the trainable adapter. `jitter` holds optional
    /// per-token additive noise of matching shape.
    pub fn encode_image(
        &self,
        g: &mut Graph<'_>,
        feats: &[&ImageFeatures],
        jitter: Option<&[Tensor]>,
    ) -> Result<ImageEncoded, ShapeMismatch> {
        let mut offsets = vec![0];
        let mut data = Vec::new();
        for (i, f) in feats.iter().enumerate() {
            if f.tokens.cols != self.config.d_img {
                return Err(ShapeMismatch {
                    op: "encode_image",
                    lhs: f.tokens.shape(),
                    rhs: (0, self.config.d_img),
                });
            }
            match jitter.and_then(|j| j.get(i)) {
                Some(j) => data.extend(f.tokens.data.iter().zip(&j.data).map(|(a, b)| a + b)),
                None => data.extend_from_slice(&f.tokens.data),
            }
            offsets.push(offsets.last().unwrap() + f.tokens.rows);
        }
        let n = *offsets.last().unwrap();
        let x = g.constant(Tensor::new(n, self.config.d_img, data));
        let tokens = linear(g, x, "img.adapter")?;
        let pooled = g.segment_mean(tokens, &offsets)?;
        Ok(ImageEncoded {
            tokens,
            offsets,
            pooled,
        })
    }

    fn mlp2(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, ShapeMismatch> {
        let h = linear(g, x, &format!("{prefix}.l1"))?;
        let h = g.gelu(h);
        linear(g, h, &format!("{prefix}.l2"))
    }

    /// Contrastive projection of pooled image features (z).
    pub fn project_image(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var, ShapeMismatch> {
        self.mlp2(g, pooled, "proj_img")
    }

    /// Contrastive projection of pooled protocol embeddings (u).
    pub fn project_protocol(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var, ShapeMismatch> {
        self.mlp2(g, pooled, "proj_hdr")
    }

    /// Clinical embedding v and task logits.
    pub fn clinical(&self, g: &mut Graph<'_>, fused: Var) -> Result<(Var, Var), ShapeMismatch> {
        let v = linear(g, fused, "clin.embed")?;
        let v = g.tanh(v);
        let logits = linear(g, v, "clin.head")?;
        Ok((v, logits))
    }

    /// Encoder, image adapter, fusion and clinical head in one pass.
    /// Returns (v, logits).
    pub fn forward_clinical(
        &self,
        g: &mut Graph<'_>,
        seqs: &[&GenomeSequence],
        feats: &[&ImageFeatures],
    ) -> Result<(Var, Var), ShapeMismatch> {
        let enc = self.encode(g, seqs)?;
        let img = self.encode_image(g, feats, None)?;
        let f = self.fuse(g, &img, &enc)?;
        self.clinical(g, f.fused)
    }

    /// Adversary logits on v behind gradient reversal.
    pub fn adversary(&self, g: &mut Graph<'_>, v: Var, lambda_adv: f64) -> Result<Var, ShapeMismatch> {
        let r = g.grl(v, lambda_adv);
        linear(g, r, "adv.head")
    }

    /// Masked-modeling decoder: one cross-attention layer from masked
    /// encoder states to image tokens. Returns per-position states.
    pub fn mpm_decode(&self, g: &mut Graph<'_>, enc: &Encoded, img: &ImageEncoded) -> Result<Var, ShapeMismatch> {
        let q = layer_norm(g, enc.states, "mpm.ln_x")?;
        let m = layer_norm(g, img.tokens, "mpm.ln_mem")?;
        let a = self.mha(g, "mpm.xattn", q, m, &enc.offsets, &img.offsets, false)?;
        let x = g.add(enc.states, a)?;
        layer_norm(g, x, "mpm.ln_out")
    }

    /// Categorical logits and standardized numeric predictions at rows.
    pub fn mpm_heads(&self, g: &mut Graph<'_>, states: Var, rows: &[usize]) -> Result<(Var, Var), ShapeMismatch> {
        let s = g.gather_rows(states, rows)?;
        let cat = linear(g, s, "mpm.cat")?;
        let num = linear(g, s, "mpm.num")?;
        Ok((cat, num))
    }

    pub fn field_count(&self, s: &GenomeSequence) -> usize {
        if s.is_empty() {
            return 0;
        }
        1 + s.token_ids.iter().filter(|&&t| t == FIELD_SEP).count()
    }
}

#[cfg(test)]
pub(crate) mod tests;
