//! De-identification: identifier removal, per-patient date shifting, keyed
//! UID remapping, and a PHI audit.
//!
//! The default policy is fail-closed: attributes not named in the policy
//! are removed. Protocol fields of the genome schema are kept verbatim.

mod audit;
mod uidmap;

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::dicom::{DataSet, Element, FieldSchema, Tag, Value, Vr};

pub use audit::{audit_phi, Violation, PHI_BLOCKLIST};
pub use uidmap::{UidMapLog, UidMapRecord};

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error)]
pub enum DeidError {
    #[error("policy maps {tag} to both {first:?} and {second:?}")]
    PolicyConflict {
        tag: Tag,
        first: DeidAction,
        second: DeidAction,
    },
    #[error("empty UID")]
    EmptyUid,
    #[error("UID longer than 64 characters")]
    UidTooLong,
    #[error("invalid policy file: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeidAction {
    #[serde(alias = "Remove")]
    Remove,
    #[serde(alias = "Keep")]
    Keep,
    #[serde(alias = "ShiftDate")]
    ShiftDate,
    #[serde(alias = "RemapUid")]
    RemapUid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultAction {
    #[default]
    #[serde(alias = "Remove")]
    Remove,
    #[serde(alias = "Keep")]
    Keep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub tag: Tag,
    pub action: DeidAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeidPolicy {
    actions: BTreeMap<Tag, DeidAction>,
    pub default_action: DefaultAction,
}

/// Markers written once a data set has been processed.
pub const PATIENT_IDENTITY_REMOVED: Tag = Tag::new(0x0012, 0x0062);
pub const DEIDENTIFICATION_METHOD: Tag = Tag::new(0x0012, 0x0063);
pub const TEMPORAL_INFO_MODIFIED: Tag = Tag::new(0x0028, 0x0303);
pub const PROFILE_ID: &str = "PG-DEID-1";

impl DeidPolicy {
    pub fn from_entries(
        entries: impl IntoIterator<Item = PolicyEntry>,
        default_action: DefaultAction,
    ) -> Result<Self, DeidError> {
        let mut actions = BTreeMap::new();
        for PolicyEntry { tag, action } in entries {
            if let Some(&first) = actions.get(&tag) {
                if first != action {
                    return Err(DeidError::PolicyConflict {
                        tag,
                        first,
                        second: action,
                    });
                }
            }
            actions.insert(tag, action);
        }
        for marker in [PATIENT_IDENTITY_REMOVED, DEIDENTIFICATION_METHOD, TEMPORAL_INFO_MODIFIED] {
            actions.entry(marker).or_insert(DeidAction::Keep);
        }
        Ok(DeidPolicy {
            actions,
            default_action,
        })
    }

    /// Reads a policy file: either a JSON list of `{tag, action}` or an
    /// object `{"default_action": .., "actions": [..]}`.
    pub fn from_json(text: &str) -> Result<Self, DeidError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            List(Vec<PolicyEntry>),
            Full {
                #[serde(default)]
                default_action: DefaultAction,
                actions: Vec<PolicyEntry>,
            },
        }
        let f: File =
            serde_json::from_str(text).map_err(|e| DeidError::InvalidPolicy(e.to_string()))?;
        match f {
            File::List(entries) => DeidPolicy::from_entries(entries, DefaultAction::Remove),
            File::Full {
                default_action,
                actions,
            } => DeidPolicy::from_entries(actions, default_action),
        }
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PolicyEntry> = self
            .actions
            .iter()
            .map(|(&tag, &action)| PolicyEntry { tag, action })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "default_action": self.default_action,
            "actions": entries,
        }))
        .expect("policy serializes")
    }

    /// Shipped profile: schema fields kept, direct identifiers removed,
    /// dates shifted, instance UIDs remapped.
    pub fn default_profile(schema: &FieldSchema) -> Self {
        use DeidAction::*;
        let mut entries: Vec<PolicyEntry> = schema
            .tags()
            .map(|tag| PolicyEntry { tag, action: Keep })
            .collect();
        let fixed: &[(u16, u16, DeidAction)] = &[
            (0x0008, 0x0005, Keep),     // SpecificCharacterSet
            (0x0008, 0x0008, Keep),     // ImageType
            (0x0008, 0x0016, Keep),     // SOPClassUID
            (0x0008, 0x0018, RemapUid), // SOPInstanceUID
            (0x0008, 0x0020, ShiftDate),
            (0x0008, 0x0021, ShiftDate),
            (0x0008, 0x0022, ShiftDate),
            (0x0008, 0x0023, ShiftDate),
            (0x0008, 0x002A, ShiftDate),
            (0x0008, 0x0060, Keep), // Modality
            (0x0010, 0x0040, Keep), // PatientSex
            (0x0010, 0x1010, Keep), // PatientAge
            (0x0020, 0x000D, RemapUid),
            (0x0020, 0x000E, RemapUid),
            (0x0020, 0x0011, Keep), // SeriesNumber
            (0x0020, 0x0052, RemapUid),
            (0x0028, 0x0010, Keep),
            (0x0028, 0x0011, Keep),
        ];
        entries.extend(fixed.iter().map(|&(g, e, action)| PolicyEntry {
            tag: Tag::new(g, e),
            action,
        }));
        for &tag in PHI_BLOCKLIST {
            entries.retain(|p| p.tag != tag);
            entries.push(PolicyEntry { tag, action: Remove });
        }
        DeidPolicy::from_entries(entries, DefaultAction::Remove)
            .expect("shipped profile has no conflicts")
    }

    pub fn action(&self, tag: Tag) -> DeidAction {
        self.actions.get(&tag).copied().unwrap_or(match self.default_action {
            DefaultAction::Remove => DeidAction::Remove,
            DefaultAction::Keep => DeidAction::Keep,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (Tag, DeidAction)> + '_ {
        self.actions.iter().map(|(&t, &a)| (t, a))
    }
}

/// Per-patient key material.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientKey {
    pub patient_hash: String,
    pub date_offset_days: i32,
    pub uid_secret: Vec<u8>,
}

impl PatientKey {
    /// Derives the key for a patient identifier. The offset is uniform over
    /// [-365, -1] and [1, 365] days and depends only on (patient, secret).
    pub fn derive(patient_id: &str, secret: &[u8]) -> Self {
        let digest = keyed_digest(secret, format!("patient:{patient_id}").as_bytes());
        let k = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]) % 730;
        let offset = if k < 365 { -(k as i32 + 1) } else { k as i32 - 364 };
        PatientKey {
            patient_hash: hex::encode(&digest[..16]),
            date_offset_days: offset,
            uid_secret: secret.to_vec(),
        }
    }
}

fn keyed_digest(secret: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

/// Exact calendar shift.
pub fn shift_date(date: NaiveDate, offset_days: i64) -> NaiveDate {
    date + Duration::days(offset_days)
}

/// Parses a DA value (`YYYYMMDD`).
pub fn parse_da(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y%m%d").ok()
}

fn format_da(d: NaiveDate) -> String {
    d.format("%Y%m%d").to_string()
}

/// Keyed UID remapping into the `2.25.<integer>` arc.
pub fn remap_uid(uid: &str, secret: &[u8]) -> Result<String, DeidError> {
    let uid = uid.trim_end_matches(['\0', ' ']);
    if uid.is_empty() {
        return Err(DeidError::EmptyUid);
    }
    if uid.len() > 64 {
        return Err(DeidError::UidTooLong);
    }
    let d = keyed_digest(secret, format!("uid:{uid}").as_bytes());
    let mut b = [0u8; 16];
    b.copy_from_slice(&d[..16]);
    Ok(format!("2.25.{}", u128::from_be_bytes(b)))
}

/// Hex digest identifying the input UID in the reversibility log.
pub fn uid_input_hash(uid: &str, secret: &[u8]) -> String {
    hex::encode(keyed_digest(secret, format!("uid-log:{uid}").as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditNote {
    pub tag: Tag,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct DeidOutcome {
    pub dataset: DataSet,
    pub notes: Vec<AuditNote>,
    /// (input original UID, remapped UID) pairs for the reversibility log.
    pub remapped: Vec<(String, String)>,
}

impl DeidOutcome {
    pub fn map_records(&self, secret: &[u8]) -> Vec<UidMapRecord> {
        self.remapped
            .iter()
            .map(|(input, output)| UidMapRecord {
                input_hash: uid_input_hash(input, secret),
                output_uid: output.clone(),
            })
            .collect()
    }
}

/// True when the data set carries this profile's completion markers.
pub fn already_processed(ds: &DataSet) -> bool {
    let is = |tag, want: &str| ds.get(tag).and_then(Element::as_str) == Some(want);
    is(PATIENT_IDENTITY_REMOVED, "YES") && is(DEIDENTIFICATION_METHOD, PROFILE_ID)
}

/// Applies `policy` to `ds`. Pure; the remapped UID pairs are returned for
/// the caller to log. Applying the result a second time is a no-op.
pub fn apply_policy(ds: &DataSet, policy: &DeidPolicy, key: &PatientKey) -> DeidOutcome {
    let transform = !already_processed(ds);
    let mut st = State {
        policy,
        key,
        transform,
        notes: Vec::new(),
        remapped: Vec::new(),
        changed: false,
        shifted: false,
    };
    let mut out = st.apply(ds);
    if st.changed && transform {
        out.put(Element::text(PATIENT_IDENTITY_REMOVED, Vr::CS, "YES"));
        out.put(Element::text(DEIDENTIFICATION_METHOD, Vr::LO, PROFILE_ID));
        if st.shifted {
            out.put(Element::text(TEMPORAL_INFO_MODIFIED, Vr::CS, "MODIFIED"));
        }
    }
    out.transfer_syntax = ds.transfer_syntax.clone();
    DeidOutcome {
        dataset: out,
        notes: st.notes,
        remapped: st.remapped,
    }
}

struct State<'a> {
    policy: &'a DeidPolicy,
    key: &'a PatientKey,
    transform: bool,
    notes: Vec<AuditNote>,
    remapped: Vec<(String, String)>,
    changed: bool,
    shifted: bool,
}

impl State<'_> {
    fn apply(&mut self, ds: &DataSet) -> DataSet {
        let mut out = DataSet::new();
        for e in ds.elements() {
            let action = self.policy.action(e.tag);
            let kept = match action {
                DeidAction::Remove => None,
                DeidAction::Keep => Some(self.keep(e)),
                DeidAction::ShiftDate if self.transform => self.shift(e),
                DeidAction::RemapUid if self.transform => Some(self.remap(e)),
                DeidAction::ShiftDate | DeidAction::RemapUid => Some(e.clone()),
            };
            match kept {
                Some(k) => {
                    if k != *e {
                        self.changed = true;
                    }
                    out.push(k).expect("input order is preserved");
                }
                None => self.changed = true,
            }
        }
        out
    }

    fn keep(&mut self, e: &Element) -> Element {
        match &e.value {
            Value::Sequence(items) => {
                let items = items.iter().map(|it| self.apply(it)).collect();
                Element::new(e.tag, e.vr, Value::Sequence(items))
            }
            _ => e.clone(),
        }
    }

    fn shift(&mut self, e: &Element) -> Option<Element> {
        let offset = self.key.date_offset_days as i64;
        let Value::Text(vals) = &e.value else {
            return Some(e.clone());
        };
        let shifted: Option<Vec<String>> = match e.vr.as_str() {
            "DA" => vals
                .iter()
                .map(|v| parse_da(v).map(|d| format_da(shift_date(d, offset))))
                .collect(),
            "DT" => vals
                .iter()
                .map(|v| {
                    let date = parse_da(v.get(..8)?)?;
                    Some(format!("{}{}", format_da(shift_date(date, offset)), &v[8..]))
                })
                .collect(),
            _ => return Some(e.clone()),
        };
        match shifted {
            Some(v) => {
                self.shifted = true;
                Some(Element::new(e.tag, e.vr, Value::Text(v)))
            }
            None => {
                self.notes.push(AuditNote {
                    tag: e.tag,
                    message: format!("unparsable date {vals:?}; element removed"),
                });
                None
            }
        }
    }

    fn remap(&mut self, e: &Element) -> Element {
        if e.vr != Vr::UI {
            return e.clone();
        }
        let Value::Text(vals) = &e.value else {
            return e.clone();
        };
        let mapped = vals
            .iter()
            .map(|v| match remap_uid(v, &self.key.uid_secret) {
                Ok(m) => {
                    self.remapped.push((v.clone(), m.clone()));
                    m
                }
                Err(_) => String::new(),
            })
            .collect();
        Element::new(e.tag, e.vr, Value::Text(mapped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn shift_across_leap_february() {
        assert_eq!(shift_date(d(2020, 3, 10), -31), d(2020, 2, 8));
        assert_eq!(shift_date(d(2021, 7, 4), 0), d(2021, 7, 4));
    }

    #[test]
    fn offsets_are_nonzero_and_bounded() {
        for i in 0..500 {
            let k = PatientKey::derive(&format!("P{i}"), b"secret");
            assert!(k.date_offset_days != 0 && k.date_offset_days.abs() <= 365);
            assert_eq!(k, PatientKey::derive(&format!("P{i}"), b"secret"));
        }
    }

    #[test]
    fn uid_format() {
        let a = remap_uid("1.2.840.113619.2.55.3", b"k").unwrap();
        assert_eq!(a, remap_uid("1.2.840.113619.2.55.3", b"k").unwrap());
        assert!(a.starts_with("2.25.") && a.len() <= 64);
        assert!(a[5..].bytes().all(|b| b.is_ascii_digit()));
        assert_ne!(a, remap_uid("1.2.840.113619.2.55.3", b"other").unwrap());
        assert!(matches!(remap_uid("", b"k"), Err(DeidError::EmptyUid)));
        assert!(matches!(remap_uid(&"1".repeat(65), b"k"), Err(DeidError::UidTooLong)));
    }

    #[test]
    fn conflict_detected() {
        let entries = vec![
            PolicyEntry {
                tag: Tag::new(0x0010, 0x0010),
                action: DeidAction::Keep,
            },
            PolicyEntry {
                tag: Tag::new(0x0010, 0x0010),
                action: DeidAction::Remove,
            },
        ];
        assert!(matches!(
            DeidPolicy::from_entries(entries, DefaultAction::Remove),
            Err(DeidError::PolicyConflict { .. })
        ));
    }

    #[test]
    fn policy_file_forms() {
        let p = DeidPolicy::from_json(r#"[{"tag":"0010,0010","action":"remove"}]"#).unwrap();
        assert_eq!(p.action(Tag::new(0x0010, 0x0010)), DeidAction::Remove);
        assert_eq!(p.default_action, DefaultAction::Remove);
        let p = DeidPolicy::from_json(
            r#"{"default_action":"keep","actions":[{"tag":"0008,0020","action":"ShiftDate"}]}"#,
        )
        .unwrap();
        assert_eq!(p.action(Tag::new(0x0009, 0x0001)), DeidAction::Keep);
        let again = DeidPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(again, p);
        assert!(DeidPolicy::from_json("{").is_err());
    }

    #[test]
    fn default_profile_invariants() {
        let schema = FieldSchema::default();
        let p = DeidPolicy::default_profile(&schema);
        for tag in schema.tags() {
            assert_eq!(p.action(tag), DeidAction::Keep, "{tag}");
        }
        assert_eq!(p.action(Tag::new(0x0010, 0x0010)), DeidAction::Remove);
        assert_eq!(p.action(Tag::new(0x0008, 0x0050)), DeidAction::Remove);
        assert_eq!(p.action(Tag::new(0x0009, 0x1010)), DeidAction::Remove);
    }

    #[test]
    fn unparsable_date_removed_with_note() {
        let schema = FieldSchema::default();
        let p = DeidPolicy::default_profile(&schema);
        let k = PatientKey::derive("P1", b"s");
        let ds = DataSet::from_elements(vec![Element::text(Tag::new(0x0008, 0x0020), Vr::DA, "2020")])
            .unwrap();
        let out = apply_policy(&ds, &p, &k);
        assert!(out.dataset.get(Tag::new(0x0008, 0x0020)).is_none());
        assert_eq!(out.notes.len(), 1);
    }

    #[test]
    fn datetime_shift_keeps_time() {
        let schema = FieldSchema::default();
        let p = DeidPolicy::default_profile(&schema);
        let mut k = PatientKey::derive("P1", b"s");
        k.date_offset_days = -31;
        let ds = DataSet::from_elements(vec![Element::text(
            Tag::new(0x0008, 0x002A),
            Vr::DT,
            "20200310123000.5",
        )])
        .unwrap();
        let out = apply_policy(&ds, &p, &k);
        assert_eq!(
            out.dataset.get(Tag::new(0x0008, 0x002A)).unwrap().as_str(),
            Some("20200208123000.5")
        );
    }
}
