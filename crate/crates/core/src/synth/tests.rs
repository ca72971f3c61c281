use super::*;
use crate::dicom::{extract_protocol_header, parse_dicom_json};
use crate::model::ImageFeatureProvider;
use crate::stats::mutual_information;

fn small(seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_studies: 40,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_spec_same_corpus() {
    let a = generate_corpus(&small(7)).unwrap();
    let b = generate_corpus(&small(7)).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a, b);
    let c = generate_corpus(&small(8)).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn spec_validation() {
    for bad in [
        CorpusSpec { alignment: 1.5, ..Default::default() },
        CorpusSpec { n_vendors: 5, ..Default::default() },
        CorpusSpec { series_min: 3, series_max: 2, ..Default::default() },
        CorpusSpec { n_studies: 0, ..Default::default() },
    ] {
        assert!(matches!(generate_corpus(&bad), Err(SynthError::InvalidSpec(_))));
    }
    assert!(CorpusSpec::from_json(r#"{"n_studies": 3, "confounding": 0.5}"#).is_ok());
    assert!(CorpusSpec::from_json(r#"{"prevalence": -1}"#).is_err());
}

#[test]
fn headers_survive_dicom_json() {
    let c = generate_corpus(&small(1)).unwrap();
    let schema = FieldSchema::default();
    for st in &c.studies {
        assert!((2..=3).contains(&st.series.len()));
        for (se, ds) in st.series.iter().zip(st.datasets(&schema)) {
            let text = serialize_dicom_json_pretty(&ds);
            let back = extract_protocol_header(&parse_dicom_json(&text).unwrap(), &schema);
            assert_eq!(back.fields, se.header.fields, "{}", se.series_uid);
            assert_eq!(back.series_uid, se.series_uid);
            assert_eq!(back.site, st.site);
            assert!(ds.get(tag("PatientName")).is_some());
        }
    }
}

#[test]
fn features_registered_for_every_series() {
    let c = generate_corpus(&small(2)).unwrap();
    assert_eq!(c.provider.items().len(), c.series_count());
    assert_eq!(c.provider.dims(), (4, 32));
    let id = &c.studies[0].series[0].series_uid;
    assert!(c.provider.features(id).is_ok());
}

#[test]
fn full_alignment_features_follow_protocol() {
    let spec = CorpusSpec {
        n_studies: 60,
        alignment: 1.0,
        disease_strength: 0.0,
        ..Default::default()
    };
    let c = generate_corpus(&spec).unwrap();
    for st in &c.studies {
        for se in &st.series {
            let f = c.provider.features(&se.series_uid).unwrap().pooled();
            let e = c.catalogue.encode(&se.header);
            let clean = c.provider.generate("other", &e, &[]).pooled();
            for (x, y) in f.iter().zip(&clean) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

fn vendor_label_mi(rho: f64, n: usize) -> f64 {
    let c = generate_corpus(&CorpusSpec {
        n_studies: n,
        n_vendors: 2,
        confounding: rho,
        prevalence: 0.5,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let v: Vec<&str> = c.studies.iter().map(|s| s.vendor.as_str()).collect();
    let y: Vec<usize> = c.studies.iter().map(|s| s.label).collect();
    mutual_information(&v, &y)
}

#[test]
fn confounding_controls_vendor_label_dependence() {
    assert!(vendor_label_mi(0.0, 10_000) <= 0.01);
    let mis: Vec<f64> = [0.0, 0.3, 0.6, 0.9].iter().map(|&r| vendor_label_mi(r, 4000)).collect();
    assert!(mis.windows(2).all(|w| w[0] < w[1]), "{mis:?}");
}

#[test]
fn tree_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&CorpusSpec { n_studies: 5, ..Default::default() }).unwrap();
    let n = c.write_tree(dir.path()).unwrap();
    assert_eq!(n, c.series_count());
    let mut rd = csv::Reader::from_path(dir.path().join("manifest.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), n);
    let path = dir.path().join(&rows[0][8]);
    assert!(parse_dicom_json(&std::fs::read_to_string(path).unwrap()).is_ok());
    let fp = crate::model::FileProvider::load(&dir.path().join("features.json")).unwrap();
    assert_eq!(fp.items.len(), n);

    let back = read_tree(dir.path(), &FieldSchema::default()).unwrap();
    let orig: Vec<&SyntheticSeries> = c.studies.iter().flat_map(|s| s.series.iter()).collect();
    assert_eq!(back.len(), n);
    for (b, o) in back.iter().zip(orig) {
        assert_eq!(b.series_uid, o.series_uid);
        assert_eq!(b.header.fields, o.header.fields);
        assert_eq!(b.header.vendor, o.header.vendor);
    }
    assert_eq!(back[0].label, Some(c.studies[0].label));
    assert_eq!(back[0].sex, c.studies[0].sex);
}
