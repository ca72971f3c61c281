//! Deterministic synthetic studies: headers, image features and labels
//! with tunable protocol-image alignment and vendor-label confounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dicom::dictionary::{self, by_keyword};
use crate::dicom::json::{parse_dicom_json, serialize_dicom_json_pretty};
use crate::dicom::{extract_protocol_header, DataSet, Element, FieldKind, FieldSchema, HeaderField, ProtocolHeader, Tag, Value, Vr};
use crate::genome::split_text;
use crate::model::SyntheticProvider;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_studies: usize,
    pub n_sites: usize,
    pub n_vendors: usize,
    pub models_per_vendor: usize,
    pub series_min: usize,
    pub series_max: usize,
    /// Share of CT studies; the rest are MR.
    pub ct_fraction: f64,
    /// Weight of the protocol signal in image features.
    pub alignment: f64,
    /// Vendor leakage into the label.
    pub confounding: f64,
    pub label_noise: f64,
    pub prevalence: f64,
    /// Shift along a fixed direction added to features of diseased studies.
    pub disease_strength: f64,
    pub d_img: usize,
    pub token_count: usize,
    pub token_jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_studies: 512,
            n_sites: 2,
            n_vendors: 4,
            models_per_vendor: 2,
            series_min: 2,
            series_max: 3,
            ct_fraction: 0.6,
            alignment: 0.9,
            confounding: 0.0,
            label_noise: 0.0,
            prevalence: 0.3,
            disease_strength: 3.0,
            d_img: 32,
            token_count: 4,
            token_jitter: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let s: CorpusSpec = serde_json::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        for (name, p) in [
            ("ct_fraction", self.ct_fraction),
            ("alignment", self.alignment),
            ("confounding", self.confounding),
            ("label_noise", self.label_noise),
            ("prevalence", self.prevalence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.n_studies == 0 || self.n_sites == 0 {
            return bad("need at least one study and one site");
        }
        if !(1..=VENDORS.len()).contains(&self.n_vendors) {
            return bad(&format!("n_vendors must be 1..={}", VENDORS.len()));
        }
        if !(1..=3).contains(&self.models_per_vendor) {
            return bad("models_per_vendor must be 1..=3");
        }
        if self.series_min == 0 || self.series_min > self.series_max {
            return bad("series range must satisfy 1 <= min <= max");
        }
        if self.d_img == 0 || self.token_count == 0 {
            return bad("feature dimensions must be positive");
        }
        if !self.disease_strength.is_finite() || !(self.token_jitter >= 0.0) {
            return bad("disease_strength and token_jitter must be finite, jitter non-negative");
        }
        Ok(())
    }
}

struct Vendor {
    name: &'static str,
    models: [&'static str; 3],
    kernels: [&'static str; 4],
    recon: [&'static str; 2],
    coils: [&'static str; 2],
}

const VENDORS: [Vendor; 4] = [
    Vendor {
        name: "GE MEDICAL SYSTEMS",
        models: ["Revolution CT", "Optima 660", "Discovery 750"],
        kernels: ["STANDARD", "BONE", "LUNG", "SOFT"],
        recon: ["ASIR-V", "FBP"],
        coils: ["HNS Head", "8HRBRAIN"],
    },
    Vendor {
        name: "SIEMENS",
        models: ["SOMATOM Force", "SOMATOM Definition", "Skyra"],
        kernels: ["B30f", "B70f", "I40f", "Br40"],
        recon: ["ADMIRE", "SAFIRE"],
        coils: ["HeadNeck_20", "Body_18"],
    },
    Vendor {
        name: "PHILIPS",
        models: ["Ingenuity CT", "iCT 256", "Ingenia"],
        kernels: ["B", "C", "YB", "L"],
        recon: ["iDose4", "IMR"],
        coils: ["dS Head 32ch", "dS Torso"],
    },
    Vendor {
        name: "CANON",
        models: ["Aquilion ONE", "Aquilion Prime", "Vantage Orian"],
        kernels: ["FC08", "FC52", "FC13", "FC30"],
        recon: ["AIDR3D", "FIRST"],
        coils: ["Atlas Head", "Atlas Body"],
    },
];

const CT_REGIONS: [&str; 6] = ["CHEST", "ABDOMEN", "HEAD", "PELVIS", "SPINE", "NECK"];
const CT_VARIANTS: [&str; 6] = ["ROUTINE", "LOW DOSE", "PE", "ANGIO", "W CONTRAST", "WO CONTRAST"];
const CT_SERIES: [&str; 6] = ["AXIAL 5MM", "AXIAL THIN", "COR MPR", "SAG MPR", "LUNG WINDOW", "BONE WINDOW"];
const MR_REGIONS: [&str; 5] = ["BRAIN", "KNEE", "SPINE", "PROSTATE", "SHOULDER"];
const MR_VARIANTS: [&str; 4] = ["ROUTINE", "W WO CONTRAST", "SCREENING", "MSK"];
const MR_SERIES: [&str; 7] = ["T1 AX", "T2 AX", "FLAIR", "DWI", "T1 POST", "T2 COR", "STIR"];
const KVP: [f64; 4] = [80.0, 100.0, 120.0, 140.0];
const CURRENT: [i64; 7] = [100, 150, 200, 250, 300, 350, 400];
const CT_THICK: [f64; 4] = [0.625, 1.25, 2.5, 5.0];
const MR_THICK: [f64; 4] = [1.0, 3.0, 4.0, 5.0];
const TR: [f64; 5] = [500.0, 2000.0, 4000.0, 6000.0, 9000.0];
const TE: [f64; 5] = [10.0, 30.0, 80.0, 100.0, 120.0];
const MR_MATRIX: [[i64; 2]; 3] = [[256, 256], [320, 320], [384, 288]];
const CT_CONTRAST: &str = "IOHEXOL";
const MR_CONTRAST: &str = "GADOBUTROL";

/// Fixed (mean, scale) per continuous field for the feature encoding.
fn cont_scale(name: &str) -> (f64, f64) {
    match name {
        "KVP" => (110.0, 25.0),
        "XRayTubeCurrent" => (250.0, 100.0),
        "RepetitionTime" => (4300.0, 3000.0),
        "EchoTime" => (68.0, 42.0),
        "SliceThickness" => (2.5, 1.7),
        "CTDIvol" => (12.0, 8.0),
        _ => (0.0, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSeries {
    pub series_uid: String,
    pub header: ProtocolHeader,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudy {
    pub study_uid: String,
    pub patient_id: String,
    pub patient_name: String,
    pub birth_date: String,
    pub study_date: String,
    pub modality: String,
    pub site: String,
    pub vendor: String,
    pub model: String,
    pub age_band: String,
    pub sex: String,
    pub disease: bool,
    pub label: usize,
    pub series: Vec<SyntheticSeries>,
}

/// Words (categorical) or standardized values (continuous) per schema
/// field, flattened into the encoding the feature stub mixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingCatalogue {
    pub schema: FieldSchema,
    pub offsets: Vec<usize>,
    pub words: Vec<Vec<String>>,
    pub dim: usize,
}

impl EncodingCatalogue {
    fn build(schema: &FieldSchema) -> Self {
        let mut words: Vec<BTreeSet<String>> = vec![BTreeSet::new(); schema.fields.len()];
        let mut add = |field: &str, text: &str| {
            if let Some(i) = schema.index_of(field) {
                words[i].extend(split_text(text));
            }
        };
        for r in CT_REGIONS.iter().chain(&MR_REGIONS) {
            for v in CT_VARIANTS.iter().chain(&MR_VARIANTS) {
                add("ProtocolName", &format!("{r} {v}"));
            }
        }
        for s in CT_SERIES.iter().chain(&MR_SERIES) {
            add("SeriesDescription", s);
        }
        for v in &VENDORS {
            add("Manufacturer", v.name);
            v.models.iter().for_each(|m| add("ManufacturerModelName", m));
            v.kernels.iter().for_each(|k| add("ConvolutionKernel", k));
            v.recon.iter().for_each(|k| add("ReconstructionAlgorithm", k));
            v.coils.iter().for_each(|k| add("ReceiveCoilName", k));
        }
        add("AcquisitionMatrix", "512x512");
        for m in MR_MATRIX {
            add("AcquisitionMatrix", &format!("{}x{}", m[0], m[1]));
        }
        add("ContrastBolusAgent", CT_CONTRAST);
        add("ContrastBolusAgent", MR_CONTRAST);
        let mut offsets = Vec::with_capacity(schema.fields.len() + 1);
        let mut dim = 0;
        let mut out = Vec::with_capacity(schema.fields.len());
        for (spec, w) in schema.fields.iter().zip(words) {
            offsets.push(dim);
            let w: Vec<String> = w.into_iter().collect();
            dim += match spec.kind {
                FieldKind::Continuous => 1,
                FieldKind::Categorical => w.len(),
            };
            out.push(w);
        }
        offsets.push(dim);
        EncodingCatalogue {
            schema: schema.clone(),
            offsets,
            words: out,
            dim,
        }
    }

    /// Bag-of-words indicators for categorical fields and standardized
    /// values for continuous ones. Missing fields contribute zeros.
    pub fn encode(&self, h: &ProtocolHeader) -> Vec<f64> {
        let mut e = vec![0.0; self.dim];
        for (i, spec) in self.schema.fields.iter().enumerate() {
            match h.field(&spec.name) {
                Some(HeaderField::Categorical { text, .. }) => {
                    for w in split_text(text) {
                        if let Ok(j) = self.words[i].binary_search(&w) {
                            e[self.offsets[i] + j] = 1.0;
                        }
                    }
                }
                Some(HeaderField::Continuous { value, .. }) => {
                    let (m, s) = cont_scale(&spec.name);
                    e[self.offsets[i]] = (value - m) / s;
                }
                _ => {}
            }
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub studies: Vec<SyntheticStudy>,
    pub provider: SyntheticProvider,
    pub catalogue: EncodingCatalogue,
    /// Unit direction carrying the disease signal in image features.
    pub disease_direction: Vec<f64>,
}

fn rng_for(seed: u64, stream: &str, idx: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"pg-synth");
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update((idx as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn cat(name: &str, text: impl Into<String>) -> HeaderField {
    HeaderField::Categorical {
        name: name.into(),
        text: text.into(),
    }
}

fn num(schema: &FieldSchema, name: &str, value: f64) -> HeaderField {
    let unit = schema.index_of(name).and_then(|i| schema.fields[i].unit.clone());
    HeaderField::Continuous {
        name: name.into(),
        value,
        unit,
    }
}

fn round_to(v: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (v * f).round() / f
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty table")
}

struct StudyPlan<'a> {
    ct: bool,
    vendor: &'a Vendor,
    model: &'a str,
    protocol: String,
    contrast: bool,
}

fn series_header(schema: &FieldSchema, plan: &StudyPlan<'_>, rng: &mut ChaCha8Rng) -> ProtocolHeader {
    let mut h = ProtocolHeader::empty(schema);
    let mut set = |f: HeaderField| {
        if let Some(slot) = h.field_mut(f.name()) {
            *slot = f;
        }
    };
    set(cat("ProtocolName", plan.protocol.clone()));
    set(cat("Manufacturer", plan.vendor.name));
    set(cat("ManufacturerModelName", plan.model));
    if plan.ct {
        set(cat("SeriesDescription", *pick(rng, &CT_SERIES)));
        let kvp = *pick(rng, &KVP);
        let ma = *pick(rng, &CURRENT);
        set(num(schema, "KVP", kvp));
        set(num(schema, "XRayTubeCurrent", ma as f64));
        set(num(schema, "SliceThickness", *pick(rng, &CT_THICK)));
        set(cat("AcquisitionMatrix", "512x512"));
        set(cat("ConvolutionKernel", *pick(rng, &plan.vendor.kernels)));
        set(cat("ReconstructionAlgorithm", *pick(rng, &plan.vendor.recon)));
        let ctdi = (kvp / 120.0).powi(2) * ma as f64 / 25.0 * rng.random_range(0.8..1.2);
        set(num(schema, "CTDIvol", round_to(ctdi, 2)));
        if plan.contrast {
            set(cat("ContrastBolusAgent", CT_CONTRAST));
        }
    } else {
        let desc = *pick(rng, &MR_SERIES);
        set(cat("SeriesDescription", desc));
        let tr = *pick(rng, &TR) * rng.random_range(0.9..1.1);
        set(num(schema, "RepetitionTime", round_to(tr, 1)));
        set(num(schema, "EchoTime", *pick(rng, &TE)));
        set(num(schema, "SliceThickness", *pick(rng, &MR_THICK)));
        let m = pick(rng, &MR_MATRIX);
        set(cat("AcquisitionMatrix", format!("{}x{}", m[0], m[1])));
        set(cat("ReceiveCoilName", *pick(rng, &plan.vendor.coils)));
        if plan.contrast && desc.contains("POST") {
            set(cat("ContrastBolusAgent", MR_CONTRAST));
        }
    }
    h
}

/// Builds the corpus described by `spec`. Each study draws from its own
/// seeded stream, so output depends only on the `CorpusSpec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus, SynthError> {
    spec.validate()?;
    let schema = FieldSchema::default();
    let catalogue = EncodingCatalogue::build(&schema);
    let base_date = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let mut studies = Vec::with_capacity(spec.n_studies);
    for s in 0..spec.n_studies {
        let mut rng = rng_for(spec.seed, "study", s);
        let ct = rng.random::<f64>() < spec.ct_fraction;
        let vi = rng.random_range(0..spec.n_vendors);
        let vendor = &VENDORS[vi];
        let model = vendor.models[rng.random_range(0..spec.models_per_vendor)];
        let site = format!("SITE{}", rng.random_range(0..spec.n_sites) + 1);
        let (region, variant) = if ct {
            (*pick(&mut rng, &CT_REGIONS), *pick(&mut rng, &CT_VARIANTS))
        } else {
            (*pick(&mut rng, &MR_REGIONS), *pick(&mut rng, &MR_VARIANTS))
        };
        let plan = StudyPlan {
            ct,
            vendor,
            model,
            protocol: format!("{region} {variant}"),
            contrast: variant.contains("CONTRAST") && !variant.starts_with("WO") || variant == "PE" || variant == "ANGIO",
        };
        let disease = rng.random::<f64>() < spec.prevalence;
        let mut label = usize::from(disease);
        // Even-indexed vendors pull labels toward positive, odd toward negative.
        if rng.random::<f64>() < spec.confounding * 0.5 {
            label = usize::from(vi % 2 == 0);
        }
        if rng.random::<f64>() < spec.label_noise {
            label = 1 - label;
        }
        let n_series = rng.random_range(spec.series_min..=spec.series_max);
        let study_uid = format!("1.2.826.0.1.3680043.10.543.{}.{}", spec.seed, s + 1);
        let series = (0..n_series)
            .map(|k| SyntheticSeries {
                series_uid: format!("{study_uid}.{}", k + 1),
                header: {
                    let mut h = series_header(&schema, &plan, &mut rng);
                    h.study_uid = study_uid.clone();
                    h.series_uid = format!("{study_uid}.{}", k + 1);
                    h.site = site.clone();
                    h.vendor = vendor.name.to_string();
                    h.model = model.to_string();
                    h
                },
            })
            .collect();
        let age: u32 = rng.random_range(18..90);
        let birth = base_date - Duration::days(age as i64 * 365 + rng.random_range(0..365));
        let date = base_date + Duration::days(rng.random_range(0..1000));
        studies.push(SyntheticStudy {
            study_uid,
            patient_id: format!("PID{:06}", rng.random_range(0..(spec.n_studies * 4 / 5).max(1))),
            patient_name: format!("DOE^PATIENT{s:05}"),
            birth_date: birth.format("%Y%m%d").to_string(),
            study_date: date.format("%Y%m%d").to_string(),
            modality: if ct { "CT" } else { "MR" }.to_string(),
            site,
            vendor: vendor.name.to_string(),
            model: model.to_string(),
            age_band: format!("{}-{}", age / 20 * 20, age / 20 * 20 + 19),
            sex: if rng.random::<bool>() { "F" } else { "M" }.to_string(),
            disease,
            label,
            series,
        });
    }
    let encodings: Vec<Vec<f64>> = studies
        .iter()
        .flat_map(|st| st.series.iter().map(|se| catalogue.encode(&se.header)))
        .collect();
    let active = encodings.iter().map(|e| e.iter().filter(|&&x| x != 0.0).count()).sum::<usize>()
        / encodings.len().max(1);
    let mut provider = SyntheticProvider::new(
        spec.d_img,
        catalogue.dim,
        active,
        spec.alignment,
        spec.token_jitter,
        spec.token_count,
        spec.seed,
    );
    let mut drng = rng_for(spec.seed, "disease", 0);
    let mut dir: Vec<f64> = (0..spec.d_img).map(|_| StandardNormal.sample(&mut drng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= norm);
    let mut enc = encodings.into_iter();
    for st in &studies {
        let extra: Vec<f64> = if st.disease {
            dir.iter().map(|d| d * spec.disease_strength).collect()
        } else {
            Vec::new()
        };
        for se in &st.series {
            let e = enc.next().expect("one encoding per series");
            let f = provider.generate(&se.series_uid, &e, &extra);
            provider.register(&se.series_uid, f);
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        studies,
        provider,
        catalogue,
        disease_direction: dir,
    })
}

fn tag(kw: &str) -> Tag {
    by_keyword(kw).unwrap_or_else(|| panic!("{kw} missing from dictionary"))
}

fn text_el(kw: &str, vr: Vr, v: &str) -> Element {
    Element::text(tag(kw), vr, v)
}

impl SyntheticStudy {
    /// One DICOM dataset per series, with patient identifiers included so
    /// the output exercises de-identification.
    pub fn datasets(&self, schema: &FieldSchema) -> Vec<DataSet> {
        self.series
            .iter()
            .map(|se| {
                let mut ds = DataSet::new();
                ds.put(text_el("StudyDate", Vr::DA, &self.study_date));
                ds.put(text_el("Modality", Vr::CS, &self.modality));
                ds.put(text_el("InstitutionName", Vr::LO, &self.site));
                ds.put(text_el("PatientName", Vr::PN, &self.patient_name));
                ds.put(text_el("PatientID", Vr::LO, &self.patient_id));
                ds.put(text_el("PatientBirthDate", Vr::DA, &self.birth_date));
                ds.put(text_el("PatientSex", Vr::CS, &self.sex));
                ds.put(text_el("StudyInstanceUID", Vr::UI, &self.study_uid));
                ds.put(text_el("SeriesInstanceUID", Vr::UI, &se.series_uid));
                for spec in &schema.fields {
                    let vr = dictionary::lookup(spec.tag).map(|e| e.vr).unwrap_or(match spec.kind {
                        FieldKind::Continuous => Vr::DS,
                        FieldKind::Categorical => Vr::LO,
                    });
                    match se.header.field(&spec.name) {
                        Some(HeaderField::Categorical { text, .. }) if spec.name == "AcquisitionMatrix" => {
                            let dims: Vec<i64> = text.split('x').filter_map(|d| d.parse().ok()).collect();
                            if dims.len() == 2 {
                                ds.put(Element::new(spec.tag, Vr::US, Value::Integer(vec![0, dims[0], dims[1], 0])));
                            }
                        }
                        Some(HeaderField::Categorical { text, .. }) => ds.put(Element::text(spec.tag, vr, text)),
                        Some(HeaderField::Continuous { value, .. }) => {
                            let v = if vr == Vr::IS {
                                Value::Integer(vec![value.round() as i64])
                            } else {
                                Value::Decimal(vec![*value])
                            };
                            ds.put(Element::new(spec.tag, vr, v));
                        }
                        _ => {}
                    }
                }
                ds
            })
            .collect()
    }
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    site: &'a str,
    study_uid: &'a str,
    series_uid: &'a str,
    patient_id: &'a str,
    vendor: &'a str,
    model: &'a str,
    modality: &'a str,
    label: usize,
    path: String,
    age_band: &'a str,
    sex: &'a str,
}

/// One manifest row of an on-disk corpus, with its header extracted.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct TreeSeries {
    pub site: String,
    pub study_uid: String,
    pub series_uid: String,
    pub patient_id: String,
    pub vendor: String,
    pub model: String,
    pub modality: String,
    pub label: Option<usize>,
    pub path: String,
    #[serde(default)]
    pub age_band: String,
    #[serde(default)]
    pub sex: String,
    #[serde(skip)]
    pub header: ProtocolHeader,
}

/// Reads a corpus directory laid out by [`SyntheticCorpus::write_tree`]
/// (or any directory with the same `manifest.csv` columns).
pub fn read_tree(dir: &Path, schema: &FieldSchema) -> Result<Vec<TreeSeries>, SynthError> {
    let mut rd = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let mut row: TreeSeries = row?;
        let text = fs::read_to_string(dir.join(&row.path))?;
        let ds = parse_dicom_json(&text)
            .map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", row.path)))?;
        let mut h = extract_protocol_header(&ds, schema);
        h.site.clone_from(&row.site);
        h.vendor.clone_from(&row.vendor);
        h.model.clone_from(&row.model);
        h.study_uid.clone_from(&row.study_uid);
        h.series_uid.clone_from(&row.series_uid);
        row.header = h;
        out.push(row);
    }
    Ok(out)
}

impl SyntheticCorpus {
    /// SHA-256 over the canonical JSON of the corpus.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_vec(self).expect("corpus serializes");
        hex::encode(Sha256::digest(&text))
    }

    pub fn series_count(&self) -> usize {
        self.studies.iter().map(|s| s.series.len()).sum()
    }

    /// Writes `site/study/series.json` DICOM-JSON files, `manifest.csv`,
    /// and `features.json` holding the image feature tokens.
    pub fn write_tree(&self, dir: &Path) -> Result<usize, SynthError> {
        let schema = FieldSchema::default();
        fs::create_dir_all(dir)?;
        let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
        let mut n = 0;
        for st in &self.studies {
            let study_dir = dir.join(&st.site).join(&st.study_uid);
            fs::create_dir_all(&study_dir)?;
            for (se, ds) in st.series.iter().zip(st.datasets(&schema)) {
                let rel = format!("{}/{}/{}.json", st.site, st.study_uid, se.series_uid);
                fs::write(dir.join(&rel), serialize_dicom_json_pretty(&ds))?;
                manifest.serialize(ManifestRow {
                    site: &st.site,
                    study_uid: &st.study_uid,
                    series_uid: &se.series_uid,
                    patient_id: &st.patient_id,
                    vendor: &st.vendor,
                    model: &st.model,
                    modality: &st.modality,
                    label: st.label,
                    path: rel,
                    age_band: &st.age_band,
                    sex: &st.sex,
                })?;
                n += 1;
            }
        }
        manifest.flush()?;
        let feats = crate::model::FileProvider::from_features(
            self.spec.d_img,
            self.provider.items().iter().map(|(k, v)| (k.as_str(), v)),
        );
        feats
            .save(&dir.join("features.json"))
            .map_err(|e| SynthError::Io(std::io::Error::other(e.to_string())))?;
        Ok(n)
    }

    /// Study labels keyed by study uid.
    pub fn labels(&self) -> BTreeMap<&str, usize> {
        self.studies.iter().map(|s| (s.study_uid.as_str(), s.label)).collect()
    }
}

#[cfg(test)]
mod tests;
