use super::{layer_norm, linear, positional, Encoded, ProtocolModel};
use crate::dicom::FieldKind;
use crate::genome::{GenomeSequence, GenomeVocab, PositionKind, FIELD_SEP, MISSING, N_SPECIAL, PAD, UNK};
use crate::numeric::{Graph, ShapeMismatch, Tensor, Var};

/// Words emitted per categorical field before the decoder must close it.
pub const MAX_FIELD_WORDS: usize = 8;

pub struct P2pOutput {
    /// Class scores per target position plus one end position (T×C).
    pub logits: Var,
    /// Standardized regression per continuous field at each position.
    pub reg: Var,
    pub offsets: Vec<usize>,
    /// Class per row; the final row of each item is the end marker.
    pub classes: Vec<usize>,
}

impl ProtocolModel {
    fn p2p_decode(
        &self,
        g: &mut Graph<'_>,
        src: &Encoded,
        inputs: &[Vec<u32>],
    ) -> Result<(Var, Var, Vec<usize>), ShapeMismatch> {
        let d = self.config.d_model;
        let mut offsets = vec![0];
        let mut ids = Vec::new();
        let mut pe = Vec::new();
        for seq in inputs {
            for (i, &t) in seq.iter().enumerate() {
                ids.push((t as usize).min(self.layout.vocab_size - 1));
                pe.extend(positional(i, d));
            }
            offsets.push(ids.len());
        }
        let table = g.p("enc.tok_emb");
        let e = g.gather_rows(table, &ids)?;
        let pev = g.constant(Tensor::new(ids.len(), d, pe));
        let mut x = g.add(e, pev)?;
        let mem = src.states;
        for l in 0..self.config.p2p_layers {
            let p = format!("p2p.l{l}");
            let h = layer_norm(g, x, &format!("{p}.ln1"))?;
            let a = self.mha(g, &format!("{p}.attn"), h, h, &offsets, &offsets, true)?;
            x = g.add(x, a)?;
            let q = layer_norm(g, x, &format!("{p}.ln_x"))?;
            let m = layer_norm(g, mem, &format!("{p}.ln_mem"))?;
            let a = self.mha(g, &format!("{p}.xattn"), q, m, &offsets, &src.offsets, false)?;
            x = g.add(x, a)?;
            x = self.feed_forward(g, x, &p)?;
        }
        let h = layer_norm(g, x, "p2p.ln_f")?;
        let logits = linear(g, h, "p2p.cls")?;
        let reg = linear(g, h, "p2p.reg")?;
        Ok((logits, reg, offsets))
    }

    /// Teacher-forced translation of `targets` conditioned on `src`.
    pub fn p2p_forward(
        &self,
        g: &mut Graph<'_>,
        src: &Encoded,
        targets: &[&GenomeSequence],
    ) -> Result<P2pOutput, ShapeMismatch> {
        let mut inputs = Vec::with_capacity(targets.len());
        let mut classes = Vec::new();
        for t in targets {
            let mut inp = Vec::with_capacity(t.len() + 1);
            inp.push(PAD);
            inp.extend_from_slice(&t.token_ids);
            inputs.push(inp);
            classes.extend(t.token_ids.iter().map(|&x| self.layout.p2p_class(x)));
            classes.push(PAD as usize);
        }
        let (logits, reg, offsets) = self.p2p_decode(g, src, &inputs)?;
        Ok(P2pOutput {
            logits,
            reg,
            offsets,
            classes,
        })
    }

    /// Greedy decoding constrained to the schema's field structure.
    pub fn translate(&self, src: &GenomeSequence, vocab: &GenomeVocab) -> Result<GenomeSequence, ShapeMismatch> {
        let nf = vocab.fields.len();
        let learned = self.layout.learned_size as u32;
        let is_word = |t: u32| t == UNK || (N_SPECIAL..learned).contains(&t);
        let mut toks: Vec<u32> = vec![PAD];
        let mut out = GenomeSequence::with_capacity(3 * nf);
        let mut field = 0usize;
        let mut in_field = 0usize;
        while field < nf {
            let mut g = Graph::new(&self.params);
            let enc = self.encode(&mut g, &[src])?;
            let (logits, reg, _) = self.p2p_decode(&mut g, &enc, &[toks.clone()])?;
            let last = toks.len() - 1;
            let row = g.value(logits).row_slice(last).to_vec();
            let entry = &vocab.fields[field];
            let end_tok = if field + 1 == nf { PAD } else { FIELD_SEP };
            let prev = *toks.last().unwrap();
            let allowed = |tok: u32| match (entry.kind, in_field) {
                (_, n) if n >= MAX_FIELD_WORDS => tok == end_tok,
                (FieldKind::Continuous, 0) => {
                    let n = entry.bins.as_ref().map_or(0, |b| b.n_bins()) as u32;
                    tok == MISSING || (entry.bin_token_base..entry.bin_token_base + n).contains(&tok)
                }
                (FieldKind::Continuous, _) => tok == end_tok,
                (FieldKind::Categorical, 0) => tok == MISSING || is_word(tok),
                (FieldKind::Categorical, _) if prev == MISSING => tok == end_tok,
                (FieldKind::Categorical, _) => tok == end_tok || is_word(tok),
            };
            let best = (0..row.len())
                .filter(|&c| allowed(self.layout.class_to_token(c)))
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(PAD as usize);
            let tok = self.layout.class_to_token(best);
            if tok == PAD {
                break;
            }
            toks.push(tok);
            let fid = field as u32;
            if tok == FIELD_SEP {
                out.push(FIELD_SEP, fid, -1, 0.0, false, 1.0, FIELD_SEP, PositionKind::Separator);
                field += 1;
                in_field = 0;
                continue;
            }
            in_field += 1;
            match (entry.kind, entry.bins.as_ref()) {
                (FieldKind::Continuous, Some(bins)) if tok != MISSING => {
                    let b = (tok - entry.bin_token_base) as usize;
                    let col = self.layout.cont_column[field].expect("regression column");
                    let z = g.value(reg).at(last, col);
                    let (lo, hi) = (bins.edges[b], bins.edges[b + 1]);
                    let v = self.layout.destandardize(col, z).clamp(lo, hi - (hi - lo) * 1e-9);
                    let (bb, nb, w) = bins.locate(v);
                    out.push(
                        entry.bin_token_base + bb as u32,
                        fid,
                        bb as i32,
                        v,
                        false,
                        w,
                        entry.bin_token_base + nb as u32,
                        PositionKind::Numeric,
                    );
                }
                (FieldKind::Continuous, bins) => {
                    let k = bins.map_or(0, |b| b.n_bins()) as i32;
                    out.push(MISSING, fid, k, 0.0, true, 1.0, MISSING, PositionKind::Numeric);
                }
                (FieldKind::Categorical, _) => {
                    out.push(tok, fid, -1, 0.0, tok == MISSING, 1.0, tok, PositionKind::Categorical);
                }
            }
        }
        Ok(out)
    }
}
