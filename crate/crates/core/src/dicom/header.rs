//! Typed acquisition-protocol fields extracted from a header.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataSet, Tag, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub tag: Tag,
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl FieldSpec {
    fn new(g: u16, e: u16, name: &str, kind: FieldKind, unit: Option<&str>) -> Self {
        FieldSpec {
            tag: Tag::new(g, e),
            name: name.to_string(),
            kind,
            unit: unit.map(str::to_string),
        }
    }
}

/// Ordered list of header fields forming the protocol genome, plus the
/// attributes that label where an acquisition came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
    #[serde(default = "default_vendor_tag")]
    pub vendor_tag: Tag,
    #[serde(default = "default_model_tag")]
    pub model_tag: Tag,
    /// Attribute holding the site label when the caller does not supply one.
    #[serde(default = "default_site_tag")]
    pub site_tag: Tag,
}

fn default_vendor_tag() -> Tag {
    Tag::new(0x0008, 0x0070)
}
fn default_model_tag() -> Tag {
    Tag::new(0x0008, 0x1090)
}
fn default_site_tag() -> Tag {
    Tag::new(0x0008, 0x0080)
}

impl Default for FieldSchema {
    /// The shipped field set. Coil information uses ReceiveCoilName; extend
    /// the JSON config for other receiver attributes.
    fn default() -> Self {
        use FieldKind::{Categorical as Cat, Continuous as Num};
        FieldSchema {
            fields: vec![
                FieldSpec::new(0x0018, 0x1030, "ProtocolName", Cat, None),
                FieldSpec::new(0x0008, 0x103E, "SeriesDescription", Cat, None),
                FieldSpec::new(0x0008, 0x0070, "Manufacturer", Cat, None),
                FieldSpec::new(0x0008, 0x1090, "ManufacturerModelName", Cat, None),
                FieldSpec::new(0x0018, 0x0060, "KVP", Num, Some("kV")),
                FieldSpec::new(0x0018, 0x1151, "XRayTubeCurrent", Num, Some("mA")),
                FieldSpec::new(0x0018, 0x0080, "RepetitionTime", Num, Some("ms")),
                FieldSpec::new(0x0018, 0x0081, "EchoTime", Num, Some("ms")),
                FieldSpec::new(0x0018, 0x1310, "AcquisitionMatrix", Cat, None),
                FieldSpec::new(0x0018, 0x0050, "SliceThickness", Num, Some("mm")),
                FieldSpec::new(0x0018, 0x1210, "ConvolutionKernel", Cat, None),
                FieldSpec::new(0x0018, 0x9315, "ReconstructionAlgorithm", Cat, None),
                FieldSpec::new(0x0018, 0x9345, "CTDIvol", Num, Some("mGy")),
                FieldSpec::new(0x0018, 0x1250, "ReceiveCoilName", Cat, None),
                FieldSpec::new(0x0018, 0x0010, "ContrastBolusAgent", Cat, None),
            ],
            vendor_tag: default_vendor_tag(),
            model_tag: default_model_tag(),
            site_tag: default_site_tag(),
        }
    }
}

impl FieldSchema {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// SHA-256 over the canonical JSON form; embedded in vocab files.
    pub fn hash(&self) -> [u8; 32] {
        let canon = serde_json::to_vec(self).expect("schema serializes");
        Sha256::digest(&canon).into()
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.fields.iter().map(|f| f.tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeaderField {
    Categorical {
        name: String,
        text: String,
    },
    Continuous {
        name: String,
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Missing {
        name: String,
    },
}

impl HeaderField {
    pub fn name(&self) -> &str {
        match self {
            HeaderField::Categorical { name, .. }
            | HeaderField::Continuous { name, .. }
            | HeaderField::Missing { name } => name,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, HeaderField::Missing { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolHeader {
    pub fields: Vec<HeaderField>,
    #[serde(default)]
    pub study_uid: String,
    #[serde(default)]
    pub series_uid: String,
    #[serde(default)]
    pub site: String,
    #[serde(default)]
    pub vendor: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ProtocolHeader {
    pub fn field(&self, name: &str) -> Option<&HeaderField> {
        self.fields.iter().find(|f| f.name() == name)
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut HeaderField> {
        self.fields.iter_mut().find(|f| f.name() == name)
    }

    /// Textual value of a categorical field, if present.
    pub fn text(&self, name: &str) -> Option<&str> {
        match self.field(name)? {
            HeaderField::Categorical { text, .. } => Some(text),
            _ => None,
        }
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.field(name)? {
            HeaderField::Continuous { value, .. } => Some(*value),
            _ => None,
        }
    }

    /// All-missing header for a schema.
    pub fn empty(schema: &FieldSchema) -> Self {
        ProtocolHeader {
            fields: schema
                .fields
                .iter()
                .map(|f| HeaderField::Missing {
                    name: f.name.clone(),
                })
                .collect(),
            ..Default::default()
        }
    }
}

const STUDY_UID: Tag = Tag::new(0x0020, 0x000D);
const SERIES_UID: Tag = Tag::new(0x0020, 0x000E);

/// Pulls every schema field out of `ds`. Absent or empty elements become
/// `Missing`; a continuous field with non-numeric text is recorded as
/// missing with a warning.
pub fn extract_protocol_header(ds: &DataSet, schema: &FieldSchema) -> ProtocolHeader {
    let mut warnings = Vec::new();
    let fields = schema
        .fields
        .iter()
        .map(|spec| {
            let missing = HeaderField::Missing {
                name: spec.name.clone(),
            };
            let Some(e) = ds.get(spec.tag).filter(|e| !e.value.is_empty()) else {
                return missing;
            };
            match spec.kind {
                FieldKind::Continuous => match e.as_f64s().and_then(|v| v.first().copied()) {
                    Some(v) if v.is_finite() => HeaderField::Continuous {
                        name: spec.name.clone(),
                        value: v,
                        unit: spec.unit.clone(),
                    },
                    _ => {
                        warnings.push(format!(
                            "{} ({}): non-numeric value in continuous field",
                            spec.name, spec.tag
                        ));
                        missing
                    }
                },
                FieldKind::Categorical => match categorical_text(&e.value) {
                    Some(text) => HeaderField::Categorical {
                        name: spec.name.clone(),
                        text,
                    },
                    None => missing,
                },
            }
        })
        .collect();
    let text_of = |tag: Tag| {
        ds.get(tag)
            .and_then(|e| categorical_text(&e.value))
            .unwrap_or_default()
    };
    ProtocolHeader {
        fields,
        study_uid: text_of(STUDY_UID),
        series_uid: text_of(SERIES_UID),
        site: text_of(schema.site_tag),
        vendor: text_of(schema.vendor_tag),
        model: text_of(schema.model_tag),
        warnings,
    }
}

/// Text rendering of a value for categorical use. Multi-valued numbers
/// (AcquisitionMatrix) render their nonzero entries joined by `x`.
fn categorical_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::Text(t) => t
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join("\\"),
        Value::Integer(n) => join_numbers(n.iter().map(|&i| i as f64)),
        Value::Decimal(n) => join_numbers(n.iter().copied()),
        _ => return None,
    };
    (!s.trim().is_empty()).then_some(s)
}

fn join_numbers(it: impl Iterator<Item = f64>) -> String {
    let all: Vec<f64> = it.collect();
    let nonzero: Vec<f64> = all.iter().copied().filter(|v| *v != 0.0).collect();
    let chosen = if nonzero.is_empty() { all } else { nonzero };
    chosen
        .iter()
        .map(|v| {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                format!("{}", *v as i64)
            } else {
                format!("{v}")
            }
        })
        .collect::<Vec<_>>()
        .join("x")
}
