use super::{layer_norm, linear, Encoded, ImageEncoded, ProtocolModel};
use crate::numeric::{Graph, ShapeMismatch, Var};

pub struct Fused {
    /// Pooled fused feature per item (B×d).
    pub fused: Var,
    /// FiLM-modulated image tokens before pooling.
    pub film_tokens: Var,
    /// Protocol states after cross-attention.
    pub cross: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ProtocolModel {
    /// Protocol positions attend over image tokens; image channels are
    /// modulated by (gamma, beta) generated from the pooled protocol
    /// embedding. Both branches are mean-pooled and summed.
    pub fn fuse(&self, g: &mut Graph<'_>, img: &ImageEncoded, enc: &Encoded) -> Result<Fused, ShapeMismatch> {
        if img.offsets.len() != enc.offsets.len() {
            return Err(ShapeMismatch {
                op: "fuse",
                lhs: (img.offsets.len() - 1, 0),
                rhs: (enc.offsets.len() - 1, 0),
            });
        }
        let mut x = enc.states;
        for l in 0..self.config.fusion_layers {
            let p = format!("fuse.l{l}");
            let q = layer_norm(g, x, &format!("{p}.ln_q"))?;
            let m = layer_norm(g, img.tokens, &format!("{p}.ln_mem"))?;
            let a = self.mha(g, &format!("{p}.xattn"), q, m, &enc.offsets, &img.offsets, false)?;
            x = g.add(x, a)?;
        }
        let cross_pooled = g.segment_mean(x, &enc.offsets)?;

        let h = linear(g, enc.pooled, "fuse.film.l1")?;
        let h = g.tanh(h);
        let dg = linear(g, h, "fuse.film.gamma")?;
        let gamma = g.add_scalar(dg, 1.0);
        let beta = linear(g, h, "fuse.film.beta")?;
        let film_tokens = self.film(g, img.tokens, &img.offsets, gamma, beta)?;
        let film_pooled = g.segment_mean(film_tokens, &img.offsets)?;
        let fused = g.add(film_pooled, cross_pooled)?;
        Ok(Fused {
            fused,
            film_tokens,
            cross: x,
            gamma,
            beta,
        })
    }

    /// y = gamma ⊙ x + beta with one (gamma, beta) row per segment.
    pub fn film(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        offsets: &[usize],
        gamma: Var,
        beta: Var,
    ) -> Result<Var, ShapeMismatch> {
        let ge = g.segment_expand(gamma, offsets)?;
        let be = g.segment_expand(beta, offsets)?;
        let y = g.mul(tokens, ge)?;
        g.add(y, be)
    }
}
