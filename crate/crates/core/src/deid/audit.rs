use crate::dicom::{DataSet, Tag, Value, Vr};

use super::{parse_da, TEMPORAL_INFO_MODIFIED};

/// Attributes that identify a patient, a clinician, or an institution.
pub const PHI_BLOCKLIST: &[Tag] = &[
    Tag::new(0x0008, 0x0050), // AccessionNumber
    Tag::new(0x0008, 0x0080), // InstitutionName
    Tag::new(0x0008, 0x0081), // InstitutionAddress
    Tag::new(0x0008, 0x0090), // ReferringPhysicianName
    Tag::new(0x0008, 0x1010), // StationName
    Tag::new(0x0008, 0x1040), // InstitutionalDepartmentName
    Tag::new(0x0008, 0x1050), // PerformingPhysicianName
    Tag::new(0x0008, 0x1070), // OperatorsName
    Tag::new(0x0010, 0x0010), // PatientName
    Tag::new(0x0010, 0x0020), // PatientID
    Tag::new(0x0010, 0x0030), // PatientBirthDate
    Tag::new(0x0010, 0x1000), // OtherPatientIDs
    Tag::new(0x0010, 0x1040), // PatientAddress
    Tag::new(0x0010, 0x2154), // PatientTelephoneNumbers
    Tag::new(0x0018, 0x1000), // DeviceSerialNumber
    Tag::new(0x0020, 0x0010), // StudyID
];

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub tag: Tag,
    pub reason: String,
}

/// Lists every element that is blocklisted or looks like a name or an
/// unshifted date. An empty result means the data set passes.
pub fn audit_phi(ds: &DataSet) -> Vec<Violation> {
    let dates_shifted = ds
        .get(TEMPORAL_INFO_MODIFIED)
        .and_then(|e| e.as_str())
        .is_some_and(|v| v == "MODIFIED");
    let mut out = Vec::new();
    walk(ds, dates_shifted, &mut out);
    out
}

fn walk(ds: &DataSet, dates_shifted: bool, out: &mut Vec<Violation>) {
    for e in ds.elements() {
        if PHI_BLOCKLIST.contains(&e.tag) {
            out.push(Violation {
                tag: e.tag,
                reason: "direct identifier present".into(),
            });
            continue;
        }
        match &e.value {
            Value::Sequence(items) => {
                for it in items {
                    walk(it, dates_shifted, out);
                }
            }
            Value::Text(vals) => {
                if e.vr == Vr::PN && vals.iter().any(|v| !v.is_empty()) {
                    out.push(Violation {
                        tag: e.tag,
                        reason: "person name value".into(),
                    });
                } else if matches!(e.vr.as_str(), "DA" | "DT") {
                    if !dates_shifted || e.tag.is_private() {
                        out.push(Violation {
                            tag: e.tag,
                            reason: "date not covered by a shift".into(),
                        });
                    }
                } else if e.vr != Vr::UI && vals.iter().any(|v| looks_like_date(v)) {
                    out.push(Violation {
                        tag: e.tag,
                        reason: "text value resembles a date".into(),
                    });
                } else if e.tag.is_private() && vals.iter().any(|v| looks_like_name(v)) {
                    out.push(Violation {
                        tag: e.tag,
                        reason: "text value resembles a person name".into(),
                    });
                }
            }
            _ => {}
        }
    }
}

fn looks_like_date(v: &str) -> bool {
    let v = v.trim();
    if parse_da(v).is_some_and(|d| (1900..=2100).contains(&chrono::Datelike::year(&d))) {
        return true;
    }
    // ISO form with separators
    v.len() == 10
        && matches!(v.as_bytes()[4], b'-' | b'/' | b'.')
        && v.as_bytes()[4] == v.as_bytes()[7]
        && parse_da(&v.replace(['-', '/', '.'], "")).is_some()
}

/// `FAMILY^GIVEN` component layout.
fn looks_like_name(v: &str) -> bool {
    let mut parts = v.split('^');
    let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
        return false;
    };
    [a, b]
        .iter()
        .all(|p| !p.is_empty() && p.chars().all(|c| c.is_alphabetic() || c == '-' || c == ' '))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::Element;

    #[test]
    fn accession_number_flagged() {
        let ds = DataSet::from_elements(vec![
            Element::text(Tag::new(0x0008, 0x0050), Vr::SH, "A12345"),
            Element::text(Tag::new(0x0018, 0x1030), Vr::LO, "CHEST"),
        ])
        .unwrap();
        let v = audit_phi(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].tag, Tag::new(0x0008, 0x0050));
    }

    #[test]
    fn private_date_flagged() {
        let ds = DataSet::from_elements(vec![Element::text(
            Tag::new(0x0009, 0x1001),
            Vr::DA,
            "20191231",
        )])
        .unwrap();
        assert_eq!(audit_phi(&ds).len(), 1);
        let ds = DataSet::from_elements(vec![Element::text(
            Tag::new(0x0009, 0x1001),
            Vr::LO,
            "2019-12-31",
        )])
        .unwrap();
        assert_eq!(audit_phi(&ds).len(), 1);
    }

    #[test]
    fn heuristics_leave_protocol_text_alone() {
        let ds = DataSet::from_elements(vec![
            Element::text(Tag::new(0x0018, 0x1030), Vr::LO, "CHEST_PE_PROTOCOL (HIGH RES)"),
            Element::text(Tag::new(0x0018, 0x1210), Vr::SH, "B31f"),
            Element::text(Tag::new(0x0020, 0x000D), Vr::UI, "2.25.20200101"),
        ])
        .unwrap();
        assert!(audit_phi(&ds).is_empty());
        assert!(looks_like_name("DOE^JANE"));
        assert!(!looks_like_name("T2^"));
    }
}
