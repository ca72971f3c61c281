use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protocol_genome::model::ModelConfig;
use protocol_genome::stats::{read_predictions_csv, subgroup_report, ReportOptions};
use protocol_genome::synth::CorpusSpec;
use protocol_genome::trainer::{RunConfig, RunManifest};

fn pg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pg")).args(args).output().expect("pg runs")
}

fn ok(args: &[&str]) -> String {
    let o = pg(args);
    assert!(
        o.status.success(),
        "pg {args:?} exited {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_run_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 12,
            sin_width: 4,
            proj_dim: 4,
            fusion_layers: 1,
            clin_dim: 4,
            d_img: 6,
            ..ModelConfig::default()
        },
        epochs: 2,
        batch_size: 8,
        warmup_steps: 2,
        finetune_epochs: 2,
        finetune_batch_size: 8,
        lr: 1e-3,
        ..RunConfig::default()
    }
}

fn write_inputs(dir: &Path) {
    let spec = CorpusSpec {
        n_studies: 30,
        n_vendors: 2,
        d_img: 6,
        ..CorpusSpec::default()
    };
    fs::write(dir.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    fs::write(dir.join("run.toml"), tiny_run_config().to_toml()).unwrap();
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_inputs(d);
    let corpus = d.join("corpus");
    let vocab = d.join("vocab.bin");
    let cfg = d.join("run.toml");
    ok(&["synth", "--spec", s(&d.join("spec.json")), "--out", s(&corpus)]);
    ok(&["vocab", "build", "--in", s(&corpus), "--out", s(&vocab)]);
    assert!(vocab.exists());
    assert!(d.join("vocab.bin.manifest.json").exists());

    // tokenize prints a sequence for one series file
    let rows = protocol_genome::synth::read_tree(&corpus, &Default::default()).unwrap();
    let header_file = corpus.join(&rows[0].path);
    let seq: serde_json::Value = serde_json::from_str(&ok(&["tokenize", "--in", s(&header_file), "--vocab", s(&vocab)])).unwrap();
    assert!(seq["token_ids"].as_array().is_some_and(|t| !t.is_empty()), "{seq}");

    // pretrain twice, second time from the first run's manifest
    let run1 = d.join("pre1");
    let run2 = d.join("pre2");
    let corpus_before = fs::read(corpus.join("manifest.csv")).unwrap();
    ok(&["pretrain", "--in", s(&corpus), "--vocab", s(&vocab), "--config", s(&cfg), "--out", s(&run1)]);
    ok(&["pretrain", "--manifest", s(&run1.join("manifest.json")), "--out", s(&run2)]);
    let log1 = fs::read(run1.join("metrics.ndjson")).unwrap();
    assert!(!log1.is_empty());
    assert_eq!(log1, fs::read(run2.join("metrics.ndjson")).unwrap());
    assert_eq!(corpus_before, fs::read(corpus.join("manifest.csv")).unwrap());
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(run1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config_hash, tiny_run_config().hash());
    assert_eq!(m.command, "pretrain");

    let ft = d.join("ft");
    ok(&[
        "finetune",
        "--in",
        s(&corpus),
        "--vocab",
        s(&vocab),
        "--config",
        s(&cfg),
        "--pretrained",
        s(&run1.join("model.ckpt")),
        "--out",
        s(&ft),
    ]);
    assert!(ft.join("model.ckpt").exists());
    let ev = d.join("eval");
    ok(&[
        "eval",
        "--in",
        s(&corpus),
        "--vocab",
        s(&vocab),
        "--config",
        s(&cfg),
        "--model",
        s(&ft.join("model.ckpt")),
        "--replicates",
        "50",
        "--out",
        s(&ev),
    ]);
    let preds = ev.join("predictions.csv");
    let header = fs::read_to_string(&preds).unwrap();
    assert!(header.starts_with("item_id,score,label,site,vendor,model,age_band,sex,protocol_key\n"));

    let rep = d.join("report");
    ok(&["report", "--pred", s(&preds), "--manifest", s(&ft.join("manifest.json")), "--replicates", "50", "--out", s(&rep)]);
    for f in ["report.json", "subgroups.csv", "roc.csv", "reliability.csv", "model_card.md", "manifest.json"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let card = fs::read_to_string(rep.join("model_card.md")).unwrap();
    assert!(card.contains(&m.corpus_hash) || card.contains("corpus hash"));
    assert!(card.contains("## Subgroups"));

    let alerts: serde_json::Value =
        serde_json::from_str(&ok(&["monitor", "--reference", s(&preds), "--current", s(&preds)])).unwrap();
    assert!(alerts.as_array().unwrap().iter().all(|a| a["kind"] != "auroc_drop" && a["kind"] != "psi"));
}

#[test]
fn eval_by_vendor_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("preds.csv");
    let mut text = String::from("item_id,score,label,site,vendor,model,age_band,sex,protocol_key\n");
    for i in 0..60 {
        let label = i % 3 == 0;
        let score = ((i * 37) % 100) as f64 / 100.0 * 0.6 + if label { 0.35 } else { 0.0 };
        let vendor = ["GE", "SIEMENS", "PHILIPS"][i % 3 / 2 + (i % 5 == 0) as usize];
        text.push_str(&format!("s{i},{score},{},SITE{},{vendor},m,40-59,F,CT|CHEST\n", label as u8, i % 2 + 1));
    }
    fs::write(&preds, &text).unwrap();
    let out = ok(&["eval", "--pred", s(&preds), "--by", "vendor"]);
    let records = read_predictions_csv(fs::File::open(&preds).unwrap()).unwrap();
    let direct = subgroup_report(&records, &["vendor"], &ReportOptions::default()).to_json();
    assert_eq!(out.trim_end(), direct);
}

#[test]
fn audit_and_deid_on_a_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = CorpusSpec {
        n_studies: 4,
        ..CorpusSpec::default()
    };
    fs::write(d.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let corpus = d.join("corpus");
    ok(&["synth", "--spec", s(&d.join("spec.json")), "--out", s(&corpus)]);
    let a = pg(&["audit", "--in", s(&corpus)]);
    assert_eq!(a.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&a.stdout).contains("direct identifier present"));

    fs::write(d.join("secret"), "a-long-site-secret-value\n").unwrap();
    let clean = d.join("clean");
    let n: usize = ok(&["deid", "--in", s(&corpus), "--out", s(&clean), "--secret-file", s(&d.join("secret"))])
        .trim()
        .parse()
        .unwrap();
    assert_eq!(n, protocol_genome::synth::read_tree(&corpus, &Default::default()).unwrap().len());
    ok(&["audit", "--in", s(&clean)]);
    assert!(clean.join("uidmap.ndjson").exists());
    assert!(clean.join("manifest.json").exists());
}

#[test]
fn bad_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "lr = -1.0\n").unwrap();
    let o = pg(&["pretrain", "--in", "x", "--vocab", "y", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "validation");
}

#[test]
fn fetch_uses_the_cache_dir() {
    use std::io::{BufRead, BufReader, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/qido", listener.local_addr().unwrap());
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut r = BufReader::new(stream);
        let mut line = String::new();
        while r.read_line(&mut line).unwrap() > 0 && !line.ends_with("\r\n\r\n") {}
        let body = r#"[{"0020000D":{"vr":"UI","Value":["1.2.9"]},"00080060":{"vr":"CS","Value":["CT"]}}]"#;
        let mut s = r.into_inner();
        write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
    });
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_pg"))
            .env("PG_CACHE_DIR", &cache)
            .args(["fetch", "--base", &base, "--filter", "Modality=CT", "--out", s(out)])
            .output()
            .unwrap()
    };
    let a = run(&tmp.path().join("a"));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    server.join().unwrap();
    // second run is served from the cache with the server gone
    let b = run(&tmp.path().join("b"));
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(String::from_utf8_lossy(&b.stdout).trim(), "1");
    assert_eq!(
        fs::read(tmp.path().join("a/000000.json")).unwrap(),
        fs::read(tmp.path().join("b/000000.json")).unwrap()
    );
    let bad = pg(&["fetch", "--base", &base, "--filter", "NotAnAttribute=1", "--out", s(tmp.path())]);
    assert_eq!(bad.status.code(), Some(1));
}
