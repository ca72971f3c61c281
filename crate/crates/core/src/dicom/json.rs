//! DICOM-JSON (PS3.18 Annex F) reading and writing.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{Map, Value as Json};

use super::{parse_decimal, DataSet, DicomError, Element, Tag, Value, Vr};

/// Non-fatal observation made while reading a document.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub tag: Tag,
    pub message: String,
}

pub fn parse_dicom_json(text: &str) -> Result<DataSet, DicomError> {
    parse_dicom_json_with_diagnostics(text).map(|(ds, _)| ds)
}

pub fn parse_dicom_json_with_diagnostics(
    text: &str,
) -> Result<(DataSet, Vec<Diagnostic>), DicomError> {
    let root: Json =
        serde_json::from_str(text).map_err(|e| DicomError::MalformedJson(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| DicomError::MalformedJson("top level must be an object".into()))?;
    let mut diags = Vec::new();
    let ds = dataset_from_object(obj, &mut diags, 0)?;
    Ok((ds, diags))
}

/// Parses a QIDO-RS style response: an array of data set objects.
pub fn parse_dicom_json_list(text: &str) -> Result<Vec<DataSet>, DicomError> {
    let root: Json =
        serde_json::from_str(text).map_err(|e| DicomError::MalformedJson(e.to_string()))?;
    let mut diags = Vec::new();
    match root {
        Json::Array(items) => items
            .iter()
            .map(|item| {
                let obj = item.as_object().ok_or_else(|| {
                    DicomError::MalformedJson("array entries must be objects".into())
                })?;
                dataset_from_object(obj, &mut diags, 0)
            })
            .collect(),
        Json::Object(obj) => Ok(vec![dataset_from_object(&obj, &mut diags, 0)?]),
        _ => Err(DicomError::MalformedJson(
            "expected an array of data sets".into(),
        )),
    }
}

const MAX_DEPTH: usize = 16;

fn dataset_from_object(
    obj: &Map<String, Json>,
    diags: &mut Vec<Diagnostic>,
    depth: usize,
) -> Result<DataSet, DicomError> {
    if depth > MAX_DEPTH {
        return Err(DicomError::MalformedJson("sequence nesting too deep".into()));
    }
    let mut elements = Vec::with_capacity(obj.len());
    for (key, member) in obj {
        let tag = Tag::parse_json_key(key)
            .map_err(|_| DicomError::MalformedJson(format!("bad tag key {key:?}")))?;
        let m = member
            .as_object()
            .ok_or_else(|| DicomError::MalformedJson(format!("{key}: member must be an object")))?;
        let vr_text = m
            .get("vr")
            .and_then(Json::as_str)
            .ok_or_else(|| DicomError::MalformedJson(format!("{key}: missing \"vr\"")))?;
        let vr: Vr = vr_text
            .parse()
            .map_err(|_| DicomError::MalformedJson(format!("{key}: bad vr {vr_text:?}")))?;
        let value = if !vr.is_known() {
            diags.push(Diagnostic {
                tag,
                message: format!("unknown VR {vr}; value kept opaque"),
            });
            Value::Bytes(serde_json::to_vec(member).unwrap_or_default())
        } else {
            decode_member(tag, vr, m, diags, depth)?
        };
        elements.push(Element::new(tag, vr, value));
    }
    DataSet::from_elements(elements).map_err(|e| DicomError::MalformedJson(e.to_string()))
}

fn decode_member(
    tag: Tag,
    vr: Vr,
    m: &Map<String, Json>,
    diags: &mut Vec<Diagnostic>,
    depth: usize,
) -> Result<Value, DicomError> {
    let bad = |what: &str| DicomError::MalformedJson(format!("{}: {what}", tag.json_key()));
    if let Some(b64) = m.get("InlineBinary") {
        let s = b64.as_str().ok_or_else(|| bad("InlineBinary must be a string"))?;
        let bytes = B64.decode(s).map_err(|_| bad("invalid base64"))?;
        return Ok(Value::Bytes(bytes));
    }
    if m.contains_key("BulkDataURI") {
        diags.push(Diagnostic {
            tag,
            message: "BulkDataURI not retrieved".into(),
        });
        return Ok(Value::Bytes(Vec::new()));
    }
    let values = match m.get("Value") {
        None | Some(Json::Null) => return Ok(empty_value(vr)),
        Some(Json::Array(v)) => v,
        Some(_) => return Err(bad("Value must be an array")),
    };
    match vr.as_str() {
        "SQ" => {
            let mut items = Vec::with_capacity(values.len());
            for v in values {
                let obj = v.as_object().ok_or_else(|| bad("sequence items must be objects"))?;
                items.push(dataset_from_object(obj, diags, depth + 1)?);
            }
            Ok(Value::Sequence(items))
        }
        "PN" => values
            .iter()
            .map(|v| match v {
                Json::Null => Ok(String::new()),
                Json::String(s) => Ok(s.clone()),
                Json::Object(o) => {
                    let groups: Vec<&str> = ["Alphabetic", "Ideographic", "Phonetic"]
                        .iter()
                        .map(|k| o.get(*k).and_then(Json::as_str).unwrap_or(""))
                        .collect();
                    let joined = groups.join("=");
                    Ok(joined.trim_end_matches('=').to_string())
                }
                _ => Err(bad("PN values must be objects")),
            })
            .collect::<Result<_, _>>()
            .map(Value::Text),
        "DS" | "FL" | "FD" => {
            let nums: Option<Vec<f64>> = values
                .iter()
                .map(|v| match v {
                    Json::Number(n) => n.as_f64(),
                    Json::String(s) => parse_decimal(s),
                    _ => None,
                })
                .collect();
            match nums {
                Some(n) => Ok(Value::Decimal(n)),
                None if vr == Vr::DS => Ok(Value::Text(texts(values))),
                None => Err(bad("non-numeric value")),
            }
        }
        "IS" | "US" | "SS" | "UL" | "SL" | "SV" | "UV" => {
            let nums: Option<Vec<i64>> = values
                .iter()
                .map(|v| match v {
                    Json::Number(n) => n.as_i64().or_else(|| n.as_u64().map(|u| u as i64)),
                    Json::String(s) => s.trim().parse().ok(),
                    _ => None,
                })
                .collect();
            match nums {
                Some(n) => Ok(Value::Integer(n)),
                None if vr == Vr::IS => Ok(Value::Text(texts(values))),
                None => Err(bad("non-integer value")),
            }
        }
        _ => Ok(Value::Text(texts(values))),
    }
}

fn texts(values: &[Json]) -> Vec<String> {
    values
        .iter()
        .map(|v| match v {
            Json::String(s) => s.clone(),
            Json::Null => String::new(),
            other => other.to_string(),
        })
        .collect()
}

fn empty_value(vr: Vr) -> Value {
    match vr.as_str() {
        "SQ" => Value::Sequence(Vec::new()),
        "DS" | "FL" | "FD" => Value::Decimal(Vec::new()),
        "IS" | "US" | "SS" | "UL" | "SL" | "SV" | "UV" => Value::Integer(Vec::new()),
        _ if vr.is_bytes() => Value::Bytes(Vec::new()),
        _ => Value::Text(Vec::new()),
    }
}

pub fn serialize_dicom_json(ds: &DataSet) -> String {
    serde_json::to_string(&dataset_to_json(ds)).expect("JSON values always serialize")
}

pub fn serialize_dicom_json_pretty(ds: &DataSet) -> String {
    serde_json::to_string_pretty(&dataset_to_json(ds)).expect("JSON values always serialize")
}

pub fn dataset_to_json(ds: &DataSet) -> Json {
    let mut obj = Map::new();
    for e in ds.elements() {
        obj.insert(e.tag.json_key(), element_to_json(e));
    }
    Json::Object(obj)
}

fn element_to_json(e: &Element) -> Json {
    let mut m = Map::new();
    m.insert("vr".into(), Json::String(e.vr.to_string()));
    if !e.vr.is_known() {
        if let Value::Bytes(raw) = &e.value {
            if let Ok(Json::Object(orig)) = serde_json::from_slice::<Json>(raw) {
                for (k, v) in orig {
                    if k != "vr" {
                        m.insert(k, v);
                    }
                }
            }
        }
        return Json::Object(m);
    }
    let values: Option<Vec<Json>> = match &e.value {
        Value::Text(v) if v.is_empty() => None,
        Value::Text(v) if e.vr == Vr::PN => Some(
            v.iter()
                .map(|s| {
                    let mut o = Map::new();
                    o.insert("Alphabetic".into(), Json::String(s.clone()));
                    Json::Object(o)
                })
                .collect(),
        ),
        Value::Text(v) => Some(v.iter().map(|s| Json::String(s.clone())).collect()),
        Value::Decimal(v) if v.is_empty() => None,
        Value::Decimal(v) => Some(
            v.iter()
                .map(|x| serde_json::Number::from_f64(*x).map_or(Json::Null, Json::Number))
                .collect(),
        ),
        Value::Integer(v) if v.is_empty() => None,
        Value::Integer(v) => Some(v.iter().map(|x| Json::Number((*x).into())).collect()),
        Value::Sequence(items) => Some(items.iter().map(dataset_to_json).collect()),
        Value::Bytes(b) => {
            if !b.is_empty() {
                m.insert("InlineBinary".into(), Json::String(B64.encode(b)));
            }
            None
        }
        Value::Skipped(_) => None,
    };
    if let Some(v) = values {
        m.insert("Value".into(), Json::Array(v));
    }
    Json::Object(m)
}
