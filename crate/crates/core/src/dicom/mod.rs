//! DICOM data model and readers.
//!
//! Two input paths share one [`DataSet`] type: Part 10 binaries in either
//! Little Endian transfer syntax ([`part10`]) and DICOM-JSON documents as
//! returned by QIDO-RS ([`json`]). [`header`] extracts the typed
//! acquisition-protocol fields from a parsed data set.

pub mod dictionary;
pub mod header;
pub mod json;
pub mod part10;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use header::{
    extract_protocol_header, FieldKind, FieldSchema, FieldSpec, HeaderField, ProtocolHeader,
};
pub use json::{parse_dicom_json, parse_dicom_json_with_diagnostics, serialize_dicom_json};
pub use part10::{parse_dataset, parse_part10, read_part10_file, ParseOptions};

#[derive(Debug, Error, PartialEq)]
pub enum DicomError {
    #[error("truncated input at offset {offset}: need {needed} bytes, {available} available")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing DICM magic after preamble")]
    MissingMagic,
    #[error("malformed element at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("malformed DICOM-JSON: {0}")]
    MalformedJson(String),
    #[error("invalid tag literal {0:?}")]
    InvalidTag(String),
    #[error("tag {0} out of order or duplicated")]
    TagOrder(Tag),
}

/// A (group, element) attribute tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Tag { group, element }
    }

    pub const fn as_u32(self) -> u32 {
        ((self.group as u32) << 16) | self.element as u32
    }

    pub const fn from_u32(v: u32) -> Self {
        Tag::new((v >> 16) as u16, v as u16)
    }

    /// Odd groups hold private attributes.
    pub fn is_private(self) -> bool {
        self.group % 2 == 1
    }

    /// The 8-hex-digit key used by DICOM-JSON (`"00180080"`).
    pub fn json_key(self) -> String {
        format!("{:04X}{:04X}", self.group, self.element)
    }

    pub fn parse_json_key(key: &str) -> Result<Tag, DicomError> {
        if key.len() != 8 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(DicomError::InvalidTag(key.to_string()));
        }
        let v = u32::from_str_radix(key, 16).map_err(|_| DicomError::InvalidTag(key.to_string()))?;
        Ok(Tag::from_u32(v))
    }

    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);
    pub const ITEM: Tag = Tag::new(0xFFFE, 0xE000);
    pub const ITEM_DELIMITATION: Tag = Tag::new(0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITATION: Tag = Tag::new(0xFFFE, 0xE0DD);
    pub const TRANSFER_SYNTAX_UID: Tag = Tag::new(0x0002, 0x0010);
    pub const FILE_META_GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X},{:04X}", self.group, self.element)
    }
}

/// Accepts `GGGG,EEEE`, `(GGGG,EEEE)` and `GGGGEEEE`.
impl FromStr for Tag {
    type Err = DicomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        let compact: String = t.chars().filter(|c| *c != ',').collect();
        if compact.len() != 8 || t.len() - compact.len() > 1 {
            return Err(DicomError::InvalidTag(s.to_string()));
        }
        Tag::parse_json_key(&compact).map_err(|_| DicomError::InvalidTag(s.to_string()))
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Value representation code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vr([u8; 2]);

impl Vr {
    pub const fn from_bytes(b: [u8; 2]) -> Self {
        Vr(b)
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("??")
    }

    pub fn bytes(&self) -> [u8; 2] {
        self.0
    }

    pub fn is_known(&self) -> bool {
        KNOWN_VRS.contains(&self.as_str())
    }

    /// Explicit VR encodings with a 2-byte reserved field and 32-bit length.
    pub fn has_long_length(&self) -> bool {
        matches!(
            self.as_str(),
            "OB" | "OD" | "OF" | "OL" | "OV" | "OW" | "SQ" | "SV" | "UC" | "UN" | "UR" | "UT" | "UV"
        )
    }

    pub fn is_text(&self) -> bool {
        matches!(
            self.as_str(),
            "AE" | "AS" | "CS" | "DA" | "DT" | "LO" | "LT" | "PN" | "SH" | "ST" | "TM" | "UC" | "UI"
                | "UR" | "UT"
        )
    }

    /// Text VRs that never carry backslash multiplicity.
    pub fn is_single_valued_text(&self) -> bool {
        matches!(self.as_str(), "LT" | "ST" | "UT" | "UR")
    }

    pub fn is_bytes(&self) -> bool {
        matches!(self.as_str(), "OB" | "OD" | "OF" | "OL" | "OV" | "OW" | "UN")
    }

    pub const AE: Vr = Vr(*b"AE");
    pub const AS: Vr = Vr(*b"AS");
    pub const AT: Vr = Vr(*b"AT");
    pub const CS: Vr = Vr(*b"CS");
    pub const DA: Vr = Vr(*b"DA");
    pub const DS: Vr = Vr(*b"DS");
    pub const DT: Vr = Vr(*b"DT");
    pub const FD: Vr = Vr(*b"FD");
    pub const FL: Vr = Vr(*b"FL");
    pub const IS: Vr = Vr(*b"IS");
    pub const LO: Vr = Vr(*b"LO");
    pub const LT: Vr = Vr(*b"LT");
    pub const OB: Vr = Vr(*b"OB");
    pub const OW: Vr = Vr(*b"OW");
    pub const PN: Vr = Vr(*b"PN");
    pub const SH: Vr = Vr(*b"SH");
    pub const SL: Vr = Vr(*b"SL");
    pub const SQ: Vr = Vr(*b"SQ");
    pub const SS: Vr = Vr(*b"SS");
    pub const ST: Vr = Vr(*b"ST");
    pub const TM: Vr = Vr(*b"TM");
    pub const UI: Vr = Vr(*b"UI");
    pub const UL: Vr = Vr(*b"UL");
    pub const UN: Vr = Vr(*b"UN");
    pub const US: Vr = Vr(*b"US");
    pub const UT: Vr = Vr(*b"UT");
}

const KNOWN_VRS: &[&str] = &[
    "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FD", "FL", "IS", "LO", "LT", "OB", "OD", "OF", "OL",
    "OV", "OW", "PN", "SH", "SL", "SQ", "SS", "ST", "SV", "TM", "UC", "UI", "UL", "UN", "UR", "US",
    "UT", "UV",
];

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vr {
    type Err = DicomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 || !b.iter().all(|c| c.is_ascii_uppercase()) {
            return Err(DicomError::Malformed {
                offset: 0,
                reason: format!("bad VR {s:?}"),
            });
        }
        Ok(Vr([b[0], b[1]]))
    }
}

/// Decoded element value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Text(Vec<String>),
    Decimal(Vec<f64>),
    Integer(Vec<i64>),
    Bytes(Vec<u8>),
    Sequence(Vec<DataSet>),
    /// PixelData seen but not loaded; carries the declared length.
    Skipped(u64),
}

impl Value {
    pub fn is_empty(&self) -> bool {
        match self {
            Value::Text(v) => v.iter().all(|s| s.is_empty()),
            Value::Decimal(v) => v.is_empty(),
            Value::Integer(v) => v.is_empty(),
            Value::Bytes(v) => v.is_empty(),
            Value::Sequence(v) => v.is_empty(),
            Value::Skipped(_) => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub tag: Tag,
    pub vr: Vr,
    pub value: Value,
}

impl Element {
    pub fn new(tag: Tag, vr: Vr, value: Value) -> Self {
        Element { tag, vr, value }
    }

    pub fn text(tag: Tag, vr: Vr, s: &str) -> Self {
        Element::new(tag, vr, Value::Text(vec![s.to_string()]))
    }

    /// First text value, if the value is textual.
    pub fn as_str(&self) -> Option<&str> {
        match &self.value {
            Value::Text(v) => v.first().map(String::as_str),
            _ => None,
        }
    }

    /// Numeric view of the value: decimals, integers, or text parsed with
    /// a locale-independent decimal point.
    pub fn as_f64s(&self) -> Option<Vec<f64>> {
        match &self.value {
            Value::Decimal(v) => Some(v.clone()),
            Value::Integer(v) => Some(v.iter().map(|&i| i as f64).collect()),
            Value::Text(v) => v.iter().map(|s| parse_decimal(s)).collect(),
            _ => None,
        }
    }
}

/// Parses a DS/IS style number. Rejects non-finite results.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    let ok = t
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
    if !ok {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Tag-ordered element collection for one header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSet {
    elements: Vec<Element>,
    pub transfer_syntax: String,
}

impl DataSet {
    pub fn new() -> Self {
        DataSet::default()
    }

    pub fn with_transfer_syntax(ts: &str) -> Self {
        DataSet {
            elements: Vec::new(),
            transfer_syntax: ts.to_string(),
        }
    }

    /// Builds from an element list, sorting by tag. Duplicates are rejected.
    pub fn from_elements(mut elements: Vec<Element>) -> Result<Self, DicomError> {
        elements.sort_by_key(|e| e.tag);
        if let Some(w) = elements.windows(2).find(|w| w[0].tag == w[1].tag) {
            return Err(DicomError::TagOrder(w[1].tag));
        }
        Ok(DataSet {
            elements,
            transfer_syntax: String::new(),
        })
    }

    /// Appends an element that must sort after every existing one.
    pub fn push(&mut self, e: Element) -> Result<(), DicomError> {
        if let Some(last) = self.elements.last() {
            if last.tag >= e.tag {
                return Err(DicomError::TagOrder(e.tag));
            }
        }
        self.elements.push(e);
        Ok(())
    }

    /// Inserts or replaces, keeping tag order.
    pub fn put(&mut self, e: Element) {
        match self.elements.binary_search_by_key(&e.tag, |x| x.tag) {
            Ok(i) => self.elements[i] = e,
            Err(i) => self.elements.insert(i, e),
        }
    }

    pub fn get(&self, tag: Tag) -> Option<&Element> {
        self.elements
            .binary_search_by_key(&tag, |x| x.tag)
            .ok()
            .map(|i| &self.elements[i])
    }

    pub fn remove(&mut self, tag: Tag) -> Option<Element> {
        self.elements
            .binary_search_by_key(&tag, |x| x.tag)
            .ok()
            .map(|i| self.elements.remove(i))
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn elements_mut(&mut self) -> &mut [Element] {
        &mut self.elements
    }

    pub fn into_elements(self) -> Vec<Element> {
        self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn retain(&mut self, f: impl FnMut(&Element) -> bool) {
        self.elements.retain(f)
    }

    /// Equality of element content, ignoring the transfer syntax label.
    pub fn same_content(&self, other: &DataSet) -> bool {
        self.elements == other.elements
    }
}

/// The two supported encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferSyntax {
    ImplicitVrLittleEndian,
    ExplicitVrLittleEndian,
}

impl TransferSyntax {
    pub const IMPLICIT_LE_UID: &'static str = "1.2.840.10008.1.2";
    pub const EXPLICIT_LE_UID: &'static str = "1.2.840.10008.1.2.1";

    pub fn from_uid(uid: &str) -> Result<Self, DicomError> {
        match uid.trim_end_matches(['\0', ' ']) {
            Self::IMPLICIT_LE_UID => Ok(TransferSyntax::ImplicitVrLittleEndian),
            Self::EXPLICIT_LE_UID => Ok(TransferSyntax::ExplicitVrLittleEndian),
            other => Err(DicomError::UnsupportedTransferSyntax(other.to_string())),
        }
    }

    pub fn uid(self) -> &'static str {
        match self {
            TransferSyntax::ImplicitVrLittleEndian => Self::IMPLICIT_LE_UID,
            TransferSyntax::ExplicitVrLittleEndian => Self::EXPLICIT_LE_UID,
        }
    }
}
