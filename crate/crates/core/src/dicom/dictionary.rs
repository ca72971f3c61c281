//! A small attribute dictionary: enough to resolve VRs under Implicit VR
//! Little Endian for the attributes this crate reads or de-identifies.

use super::{Tag, Vr};

pub struct Entry {
    pub tag: Tag,
    pub vr: Vr,
    pub keyword: &'static str,
}

macro_rules! entries {
    ($(($g:expr, $e:expr, $vr:ident, $kw:expr)),* $(,)?) => {
        &[$(Entry { tag: Tag::new($g, $e), vr: Vr::$vr, keyword: $kw }),*]
    };
}

// Sorted by tag; `lookup` binary-searches.
static ENTRIES: &[Entry] = entries![
    (0x0002, 0x0000, UL, "FileMetaInformationGroupLength"),
    (0x0002, 0x0001, OB, "FileMetaInformationVersion"),
    (0x0002, 0x0002, UI, "MediaStorageSOPClassUID"),
    (0x0002, 0x0003, UI, "MediaStorageSOPInstanceUID"),
    (0x0002, 0x0010, UI, "TransferSyntaxUID"),
    (0x0002, 0x0012, UI, "ImplementationClassUID"),
    (0x0008, 0x0005, CS, "SpecificCharacterSet"),
    (0x0008, 0x0008, CS, "ImageType"),
    (0x0008, 0x0012, DA, "InstanceCreationDate"),
    (0x0008, 0x0016, UI, "SOPClassUID"),
    (0x0008, 0x0018, UI, "SOPInstanceUID"),
    (0x0008, 0x0020, DA, "StudyDate"),
    (0x0008, 0x0021, DA, "SeriesDate"),
    (0x0008, 0x0022, DA, "AcquisitionDate"),
    (0x0008, 0x0023, DA, "ContentDate"),
    (0x0008, 0x002A, DT, "AcquisitionDateTime"),
    (0x0008, 0x0030, TM, "StudyTime"),
    (0x0008, 0x0031, TM, "SeriesTime"),
    (0x0008, 0x0050, SH, "AccessionNumber"),
    (0x0008, 0x0060, CS, "Modality"),
    (0x0008, 0x0070, LO, "Manufacturer"),
    (0x0008, 0x0080, LO, "InstitutionName"),
    (0x0008, 0x0081, ST, "InstitutionAddress"),
    (0x0008, 0x0090, PN, "ReferringPhysicianName"),
    (0x0008, 0x1010, SH, "StationName"),
    (0x0008, 0x1030, LO, "StudyDescription"),
    (0x0008, 0x103E, LO, "SeriesDescription"),
    (0x0008, 0x1040, LO, "InstitutionalDepartmentName"),
    (0x0008, 0x1050, PN, "PerformingPhysicianName"),
    (0x0008, 0x1070, PN, "OperatorsName"),
    (0x0008, 0x1090, LO, "ManufacturerModelName"),
    (0x0010, 0x0010, PN, "PatientName"),
    (0x0010, 0x0020, LO, "PatientID"),
    (0x0010, 0x0030, DA, "PatientBirthDate"),
    (0x0010, 0x0040, CS, "PatientSex"),
    (0x0010, 0x1000, LO, "OtherPatientIDs"),
    (0x0010, 0x1010, AS, "PatientAge"),
    (0x0010, 0x1040, LO, "PatientAddress"),
    (0x0010, 0x2154, SH, "PatientTelephoneNumbers"),
    (0x0012, 0x0062, CS, "PatientIdentityRemoved"),
    (0x0012, 0x0063, LO, "DeidentificationMethod"),
    (0x0018, 0x0010, LO, "ContrastBolusAgent"),
    (0x0018, 0x0050, DS, "SliceThickness"),
    (0x0018, 0x0060, DS, "KVP"),
    (0x0018, 0x0080, DS, "RepetitionTime"),
    (0x0018, 0x0081, DS, "EchoTime"),
    (0x0018, 0x0087, DS, "MagneticFieldStrength"),
    (0x0018, 0x1000, LO, "DeviceSerialNumber"),
    (0x0018, 0x1020, LO, "SoftwareVersions"),
    (0x0018, 0x1030, LO, "ProtocolName"),
    (0x0018, 0x1151, IS, "XRayTubeCurrent"),
    (0x0018, 0x1210, SH, "ConvolutionKernel"),
    (0x0018, 0x1250, SH, "ReceiveCoilName"),
    (0x0018, 0x1251, SH, "TransmitCoilName"),
    (0x0018, 0x1310, US, "AcquisitionMatrix"),
    (0x0018, 0x1314, DS, "FlipAngle"),
    (0x0018, 0x9315, CS, "ReconstructionAlgorithm"),
    (0x0018, 0x9345, FD, "CTDIvol"),
    (0x0020, 0x000D, UI, "StudyInstanceUID"),
    (0x0020, 0x000E, UI, "SeriesInstanceUID"),
    (0x0020, 0x0010, SH, "StudyID"),
    (0x0020, 0x0011, IS, "SeriesNumber"),
    (0x0020, 0x0013, IS, "InstanceNumber"),
    (0x0020, 0x0052, UI, "FrameOfReferenceUID"),
    (0x0028, 0x0010, US, "Rows"),
    (0x0028, 0x0011, US, "Columns"),
    (0x0028, 0x0303, CS, "LongitudinalTemporalInformationModified"),
    (0x0032, 0x1060, LO, "RequestedProcedureDescription"),
    (0x0040, 0x0244, DA, "PerformedProcedureStepStartDate"),
    (0x0040, 0x0260, SQ, "PerformedProtocolCodeSequence"),
    (0x7FE0, 0x0010, OW, "PixelData"),
];

pub fn lookup(tag: Tag) -> Option<&'static Entry> {
    ENTRIES
        .binary_search_by_key(&tag, |e| e.tag)
        .ok()
        .map(|i| &ENTRIES[i])
}

/// VR implied for a tag when the encoding does not carry it.
pub fn implicit_vr(tag: Tag) -> Vr {
    if tag.element == 0x0000 {
        return Vr::UL;
    }
    lookup(tag).map(|e| e.vr).unwrap_or(Vr::UN)
}

pub fn keyword(tag: Tag) -> Option<&'static str> {
    lookup(tag).map(|e| e.keyword)
}

pub fn by_keyword(kw: &str) -> Option<Tag> {
    ENTRIES.iter().find(|e| e.keyword == kw).map(|e| e.tag)
}
