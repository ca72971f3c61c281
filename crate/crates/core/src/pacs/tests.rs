use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::*;
use crate::dicom::header::FieldSchema;

type Handler = Box<dyn Fn(&str) -> (u16, String) + Send>;

/// Serves `n` connections, one request each, then closes the port.
struct Mock {
    base: String,
    requests: Arc<Mutex<Vec<String>>>,
    handle: JoinHandle<()>,
}

fn serve(n: usize, handler: Handler) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/dicomweb", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    let handle = std::thread::spawn(move || {
        for _ in 0..n {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            let line = line.trim_end().to_string();
            let target = line.split(' ').nth(1).unwrap_or("").to_string();
            seen.lock().unwrap().push(line);
            let (status, body) = handler(&target);
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/dicom+json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Mock {
        base,
        requests,
        handle,
    }
}

fn entry(uid: &str, modality: &str) -> String {
    format!(
        r#"{{"0020000D":{{"vr":"UI","Value":["{uid}"]}},"00080060":{{"vr":"CS","Value":["{modality}"]}},"00081030":{{"vr":"LO","Value":["CHEST"]}}}}"#
    )
}

fn two_entries() -> String {
    format!("[{},{}]", entry("1.2.3.1", "CT"), entry("1.2.3.2", "MR"))
}

fn client() -> QidoClient {
    QidoClient::new(ClientConfig {
        requests_per_second: 0.0,
        timeout: Duration::from_secs(5),
        ..ClientConfig::default()
    })
}

fn query(base: &str) -> QidoQuery {
    QidoQuery::new(base, QueryLevel::Studies).filter("Modality", "CT").unwrap()
}

#[test]
fn two_entry_array_gives_two_datasets() {
    let m = serve(1, Box::new(|_| (200, two_entries())));
    let out = client().qido_search(&query(&m.base)).unwrap();
    m.handle.join().unwrap();
    assert_eq!(out.len(), 2);
    let uid = out[1].get(Tag::new(0x0020, 0x000D)).and_then(|e| e.as_str());
    assert_eq!(uid, Some("1.2.3.2"));
    let req = &m.requests.lock().unwrap()[0];
    assert!(req.starts_with("GET /dicomweb/studies?"), "{req}");
    assert!(req.contains("00080060=CT"), "{req}");
    assert!(req.contains("limit=100"), "{req}");
}

#[test]
fn empty_array_and_no_content() {
    let m = serve(2, Box::new(|t| if t.contains("00080060=CT") { (200, "[]".into()) } else { (204, String::new()) }));
    let c = client();
    assert!(c.qido_search(&query(&m.base)).unwrap().is_empty());
    let q = QidoQuery::new(&m.base, QueryLevel::Series);
    assert!(c.qido_search(&q).unwrap().is_empty());
    m.handle.join().unwrap();
}

#[test]
fn http_errors_return_no_partial_results() {
    let m = serve(1, Box::new(|_| (404, "not found".into())));
    match client().qido_search(&query(&m.base)) {
        Err(PacsError::HttpError(404)) => {}
        other => panic!("{other:?}"),
    }
    m.handle.join().unwrap();

    // first page fine, second page fails: the whole search fails
    let m = serve(2, Box::new(|t| {
        if t.contains("offset=0") {
            (200, two_entries())
        } else {
            (503, String::new())
        }
    }));
    let mut q = query(&m.base);
    q.limit = 2;
    assert!(matches!(client().qido_search(&q), Err(PacsError::HttpError(503))));
    m.handle.join().unwrap();
}

#[test]
fn malformed_body_is_reported() {
    let m = serve(1, Box::new(|_| (200, r#"{"not":"an array"}"#.into())));
    assert!(matches!(
        client().qido_search(&query(&m.base)),
        Err(PacsError::MalformedResponse(_))
    ));
    m.handle.join().unwrap();
}

#[test]
fn paging_follows_offsets_until_short_page() {
    let m = serve(3, Box::new(|t| {
        let body = if t.contains("offset=0") {
            two_entries()
        } else if t.contains("offset=2") {
            format!("[{},{}]", entry("1.2.3.3", "CT"), entry("1.2.3.4", "CT"))
        } else {
            format!("[{}]", entry("1.2.3.5", "CT"))
        };
        (200, body)
    }));
    let mut q = query(&m.base);
    q.limit = 2;
    let out = client().qido_search(&q).unwrap();
    m.handle.join().unwrap();
    assert_eq!(out.len(), 5);
    let reqs = m.requests.lock().unwrap();
    assert!(reqs[2].contains("offset=4"));
    assert!(reqs.iter().all(|r| r.starts_with("GET ")));
}

#[test]
fn paging_stops_at_total_cap() {
    let m = serve(2, Box::new(|_| (200, two_entries())));
    let c = QidoClient::new(ClientConfig {
        max_total: 3,
        requests_per_second: 0.0,
        ..ClientConfig::default()
    });
    let mut q = query(&m.base);
    q.limit = 2;
    let out = c.qido_search(&q).unwrap();
    m.handle.join().unwrap();
    assert_eq!(out.len(), 3);
    assert!(m.requests.lock().unwrap()[1].contains("limit=1"));
}

#[test]
fn query_validation() {
    assert!(QidoQuery::new("http://x", QueryLevel::Studies).filter("NoSuchKeyword", "1").is_err());
    assert!(QidoQuery::new("http://x", QueryLevel::Studies).filter("00100020", "1").is_ok());
    let mut q = QidoQuery::new("http://x", QueryLevel::Studies);
    q.limit = 5000;
    assert!(matches!(client().qido_search(&q), Err(PacsError::InvalidQuery(_))));
    let q = QidoQuery::new("ftp://x", QueryLevel::Studies);
    assert!(q.validate(1000).is_err());
}

#[test]
fn timeout_is_reported() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hold = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_millis(1500));
        drop(s);
    });
    let c = QidoClient::new(ClientConfig {
        timeout: Duration::from_millis(300),
        requests_per_second: 0.0,
        ..ClientConfig::default()
    });
    assert!(matches!(c.qido_search(&query(&base)), Err(PacsError::Timeout)));
    hold.join().unwrap();
    assert_eq!(ClientConfig::default().timeout, Duration::from_secs(30));
}

#[test]
fn cache_hit_needs_no_server() {
    let dir = tempfile::tempdir().unwrap();
    let m = serve(1, Box::new(|_| (200, two_entries())));
    let c = client();
    let q = query(&m.base);
    let first = c.cached_search(&q, dir.path()).unwrap();
    m.handle.join().unwrap();
    // the port is closed now
    let second = c.cached_search(&q, dir.path()).unwrap();
    assert_eq!(first.len(), 2);
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert!(a.same_content(b));
    }
    assert!(c.qido_search(&q).is_err());
}

#[test]
fn cache_keys_follow_query_content() {
    let a = query("http://h");
    let b = QidoQuery::new("http://h", QueryLevel::Studies).filter("Modality", "MR").unwrap();
    assert_ne!(a.hash(), b.hash());
    let x = QidoQuery::new("http://h/", QueryLevel::Studies)
        .include("StudyDescription")
        .unwrap()
        .include("Modality")
        .unwrap();
    let y = QidoQuery::new("http://h", QueryLevel::Studies)
        .include("Modality")
        .unwrap()
        .include("StudyDescription")
        .unwrap();
    assert_eq!(x.hash(), y.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn corrupt_cache_entry_is_refetched_and_replaced() {
    let dir = tempfile::tempdir().unwrap();
    let m = serve(1, Box::new(|_| (200, two_entries())));
    let q = query(&m.base);
    let path = cache_path(dir.path(), &q.hash());
    fs::write(&path, b"{ truncated").unwrap();
    assert!(matches!(cache_lookup(&q, dir.path()), Err(PacsError::CacheCorrupt(_))));
    let out = client().cached_search(&q, dir.path()).unwrap();
    m.handle.join().unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(m.requests.lock().unwrap().len(), 1);
    let again = cache_lookup(&q, dir.path()).unwrap().unwrap();
    assert_eq!(again.len(), 2);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp."))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn phi_gate_blocks_persisting() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"[{"00100010":{"vr":"PN","Value":[{"Alphabetic":"DOE^JANE"}]},"0020000D":{"vr":"UI","Value":["1.2.3"]}}]"#;
    let m = serve(1, Box::new(move |_| (200, body.to_string())));
    let q = query(&m.base);
    let err = client().cached_search(&q, dir.path()).unwrap_err();
    m.handle.join().unwrap();
    assert!(matches!(err, PacsError::PhiDetected { .. }), "{err:?}");
    assert!(cache_lookup(&q, dir.path()).unwrap().is_none());
}

#[test]
fn deidentify_gate_persists_clean_payload() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"[{"00080020":{"vr":"DA","Value":["20200115"]},"00100010":{"vr":"PN","Value":[{"Alphabetic":"DOE^JANE"}]},"00100020":{"vr":"LO","Value":["P1"]},"0020000D":{"vr":"UI","Value":["1.2.3"]}}]"#;
    let m = serve(1, Box::new(move |_| (200, body.to_string())));
    let log = dir.path().join("uidmap.ndjson");
    let c = QidoClient::new(ClientConfig {
        requests_per_second: 0.0,
        gate: PhiGate::Deidentify {
            policy: DeidPolicy::default_profile(&FieldSchema::default()),
            secret: b"site-secret".to_vec(),
            uid_log: Some(log.clone()),
        },
        ..ClientConfig::default()
    });
    let q = query(&m.base);
    let out = c.cached_search(&q, &dir.path().join("cache")).unwrap();
    m.handle.join().unwrap();
    assert!(audit_phi(&out[0]).is_empty());
    assert!(out[0].get(Tag::new(0x0010, 0x0010)).is_none());
    let uid = out[0].get(Tag::new(0x0020, 0x000D)).and_then(|e| e.as_str()).unwrap();
    assert_ne!(uid, "1.2.3");
    assert_eq!(UidMapLog::new(&log).read_all().unwrap().len(), 1);
    let cached = fs::read_to_string(cache_path(&dir.path().join("cache"), &q.hash())).unwrap();
    assert!(!cached.contains("DOE"));
}

#[test]
fn access_log_records_each_search() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("access.ndjson");
    let m = serve(1, Box::new(|_| (200, two_entries())));
    let c = QidoClient::new(ClientConfig {
        requests_per_second: 0.0,
        access_log: Some(log.clone()),
        ..ClientConfig::default()
    });
    let q = query(&m.base);
    c.cached_search(&q, &dir.path().join("cache")).unwrap();
    c.cached_search(&q, &dir.path().join("cache")).unwrap();
    m.handle.join().unwrap();
    let recs: Vec<AccessRecord> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].source, Source::Network);
    assert_eq!(recs[1].source, Source::Cache);
    assert!(recs.iter().all(|r| r.query_hash == q.hash() && r.result_count == 2));
    assert!(chrono::DateTime::parse_from_rfc3339(&recs[0].timestamp).is_ok());
}

#[test]
fn rate_limit_spaces_requests_per_endpoint() {
    let m = serve(3, Box::new(|_| (200, "[]".into())));
    let c = QidoClient::new(ClientConfig {
        requests_per_second: 5.0,
        ..ClientConfig::default()
    });
    let q = query(&m.base);
    let t = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..3 {
            s.spawn(|| c.qido_search(&q).unwrap());
        }
    });
    assert!(t.elapsed() >= Duration::from_millis(390), "{:?}", t.elapsed());
    m.handle.join().unwrap();
}

#[test]
fn wado_metadata_through_the_same_interface() {
    let m = serve(1, Box::new(|t| {
        assert_eq!(t, "/dicomweb/studies/1.2.3/metadata");
        (200, format!("[{}]", entry("1.2.3", "CT")))
    }));
    let c = client();
    let src: &dyn HeaderSource = &c;
    assert_eq!(src.metadata(&m.base, "1.2.3").unwrap().len(), 1);
    m.handle.join().unwrap();
    assert!(src.metadata(&m.base, "../etc").is_err());
}
