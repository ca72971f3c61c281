use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::dicom::{FieldKind, HeaderField, ProtocolHeader};
use crate::genome::{tokenize, GenomeVocab};
use crate::model::{ImageFeatures, ProtocolModel};
use crate::numeric::Graph;

pub const MISSING_VALUE: &str = "[MISSING]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub value: String,
    /// Change in the clinical score against the unmodified header.
    pub delta: f64,
}

// Binary: logit margin of the positive class. Otherwise the logit of the
// class predicted at baseline.
fn score(logits: &[f64], class: usize) -> f64 {
    if logits.len() == 2 {
        logits[1] - logits[0]
    } else {
        logits[class]
    }
}

fn clinical_logits(
    model: &ProtocolModel,
    vocab: &GenomeVocab,
    h: &ProtocolHeader,
    feats: &ImageFeatures,
) -> Result<Vec<f64>, StatsError> {
    let seq = tokenize(h, vocab).map_err(|e| StatsError::Model(e.to_string()))?;
    let mut g = Graph::new(&model.params);
    let (_, logits) = model
        .forward_clinical(&mut g, &[&seq], &[feats])
        .map_err(|e| StatsError::Model(e.to_string()))?;
    Ok(g.value(logits).data.clone())
}

/// Swaps `field` for every vocabulary value (bin centres for continuous
/// fields) and for missing, recording the clinical score change. Sorted by
/// descending |delta|.
pub fn protocol_sensitivity(
    model: &ProtocolModel,
    vocab: &GenomeVocab,
    header: &ProtocolHeader,
    feats: &ImageFeatures,
    field: &str,
) -> Result<Vec<SensitivityEntry>, StatsError> {
    let idx = vocab
        .field_index(field)
        .ok_or_else(|| StatsError::UnknownField(field.to_string()))?;
    let entry = &vocab.fields[idx];
    let base = clinical_logits(model, vocab, header, feats)?;
    let class = (0..base.len()).fold(0, |b, c| if base[c] > base[b] { c } else { b });
    let base_score = score(&base, class);
    let unit = vocab.schema.fields[idx].unit.clone();
    let mut candidates: Vec<(String, HeaderField)> = match (entry.kind, &entry.bins) {
        (FieldKind::Continuous, Some(bins)) => bins
            .centers
            .iter()
            .map(|&c| {
                (
                    format!("{c}"),
                    HeaderField::Continuous {
                        name: field.to_string(),
                        value: c,
                        unit: unit.clone(),
                    },
                )
            })
            .collect(),
        _ => entry
            .observed_values
            .iter()
            .map(|t| {
                (
                    t.clone(),
                    HeaderField::Categorical {
                        name: field.to_string(),
                        text: t.clone(),
                    },
                )
            })
            .collect(),
    };
    candidates.push((
        MISSING_VALUE.to_string(),
        HeaderField::Missing {
            name: field.to_string(),
        },
    ));
    let mut out = Vec::with_capacity(candidates.len());
    for (value, f) in candidates {
        let mut h = header.clone();
        match h.field_mut(field) {
            Some(slot) => *slot = f,
            None => h.fields.push(f),
        }
        let logits = clinical_logits(model, vocab, &h, feats)?;
        out.push(SensitivityEntry {
            value,
            delta: score(&logits, class) - base_score,
        });
    }
    out.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()));
    Ok(out)
}
