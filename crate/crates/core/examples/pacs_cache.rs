//! Queries a DICOMweb endpoint through the on-disk cache. Without an
//! argument a local fixture server answers one request, so the second
//! search is served from the cache.
//!
//! `cargo run --example pacs_cache [base_url]`

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use protocol_genome::pacs::{ClientConfig, QidoClient, QidoQuery, QueryLevel};

fn fixture_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let base = format!("http://{}/dicomweb", listener.local_addr().expect("addr"));
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().expect("accept");
        let mut r = BufReader::new(stream);
        let mut head = String::new();
        while r.read_line(&mut head).expect("read") > 0 && !head.ends_with("\r\n\r\n") {}
        let body = r#"[{"0020000D":{"vr":"UI","Value":["1.2.3.1"]},"00080060":{"vr":"CS","Value":["CT"]},"00081030":{"vr":"LO","Value":["CHEST ROUTINE"]}},
{"0020000D":{"vr":"UI","Value":["1.2.3.2"]},"00080060":{"vr":"CS","Value":["CT"]},"00081030":{"vr":"LO","Value":["ABDOMEN"]}}]"#;
        let mut s = r.into_inner();
        let _ = write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/dicom+json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
    });
    base
}

fn main() {
    let base = std::env::args().nth(1).unwrap_or_else(fixture_server);
    let cache = tempfile_dir();
    let client = QidoClient::new(ClientConfig {
        access_log: Some(cache.join("access.ndjson")),
        ..ClientConfig::default()
    });
    let q = QidoQuery::new(&base, QueryLevel::Studies)
        .filter("Modality", "CT")
        .and_then(|q| q.include("StudyDescription"))
        .expect("known attributes");
    println!("cache key {}", q.hash());
    for pass in 0..2 {
        match client.cached_search(&q, &cache) {
            Ok(found) => println!("pass {pass}: {} data set(s)", found.len()),
            Err(e) => println!("pass {pass}: {e}"),
        }
    }
    print!("{}", std::fs::read_to_string(cache.join("access.ndjson")).unwrap_or_default());
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("pg-pacs-example-{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("cache dir");
    d
}
