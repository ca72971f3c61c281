//! Parses a hand-built Part 10 file, audits it for identifiers, applies the
//! default de-identification profile and audits again.

use protocol_genome::deid::{apply_policy, audit_phi, DeidPolicy, PatientKey};
use protocol_genome::dicom::{extract_protocol_header, parse_part10, serialize_dicom_json, FieldSchema};

fn element(group: u16, elem: u16, vr: &str, value: &[u8]) -> Vec<u8> {
    let mut v = value.to_vec();
    if v.len() % 2 == 1 {
        v.push(if vr == "UI" { 0 } else { b' ' });
    }
    let mut out = Vec::new();
    out.extend(group.to_le_bytes());
    out.extend(elem.to_le_bytes());
    out.extend(vr.as_bytes());
    out.extend((v.len() as u16).to_le_bytes());
    out.extend(v);
    out
}

fn part10() -> Vec<u8> {
    let ts = element(0x0002, 0x0010, "UI", b"1.2.840.10008.1.2.1");
    let mut out = vec![0u8; 128];
    out.extend(b"DICM");
    out.extend(element(0x0002, 0x0000, "UL", &(ts.len() as u32).to_le_bytes()));
    out.extend(ts);
    for e in [
        element(0x0008, 0x0020, "DA", b"20210314"),
        element(0x0008, 0x0060, "CS", b"CT"),
        element(0x0008, 0x0070, "LO", b"SIEMENS"),
        element(0x0008, 0x0080, "LO", b"General Hospital"),
        element(0x0008, 0x103E, "LO", b"AXIAL THIN"),
        element(0x0010, 0x0010, "PN", b"DOE^JANE"),
        element(0x0010, 0x0020, "LO", b"MRN-0042"),
        element(0x0018, 0x0050, "DS", b"1.25"),
        element(0x0018, 0x0060, "DS", b"120"),
        element(0x0018, 0x1210, "SH", b"B30f"),
        element(0x0020, 0x000D, "UI", b"1.2.826.0.1.3680043.9.1"),
        element(0x0020, 0x000E, "UI", b"1.2.826.0.1.3680043.9.1.1"),
    ] {
        out.extend(e);
    }
    out
}

fn main() {
    let ds = parse_part10(&part10()).expect("well-formed file");
    println!("parsed {} elements", ds.len());
    println!("{}", serialize_dicom_json(&ds));
    for v in audit_phi(&ds) {
        println!("before: {} {}", v.tag, v.reason);
    }
    let schema = FieldSchema::default();
    let policy = DeidPolicy::default_profile(&schema);
    let key = PatientKey::derive("MRN-0042", b"example-site-secret");
    let out = apply_policy(&ds, &policy, &key);
    println!("after: {} violation(s)", audit_phi(&out.dataset).len());
    for (from, to) in &out.remapped {
        println!("uid {from} -> {to}");
    }
    let h = extract_protocol_header(&out.dataset, &schema);
    for f in h.fields.iter().filter(|f| !f.is_missing()) {
        println!("  {f:?}");
    }
}
