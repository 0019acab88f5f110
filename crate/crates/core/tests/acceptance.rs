//! Acceptance suite. Runs every primary criterion, prints one PASS/FAIL line
//! per criterion and exits non-zero when any of them fails.
//!
//! Expected values come from fixture oracles written at generation time
//! (plaintext each TLS endpoint wrote, the model each manifest was encoded
//! from) or from independent re-implementations in this file and in
//! `common`.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::{rngs::StdRng, Rng, SeedableRng};
use serde_json::{json, Value};

use common::*;
use privlens_core::capture::har::{export_har, import_har};
use privlens_core::capture::ingest::ingest_pcap;
use privlens_core::capture::keylog::load_keylog;
use privlens_core::capture::model::Source;
use privlens_core::decoder::{decode, DecodedNode, DecoderLimits, Encoding, LayerParams, NodeValue};
use privlens_core::package::parse_package;
use privlens_core::package::trackers::{match_trackers, TrackerDb};
use privlens_core::sensitive::adapters::AdapterRegistry;
use privlens_core::sensitive::{DeviceProfile, Location};
use privlens_core::service::{router, AppState, Settings};
use privlens_core::session::config::{AnalysisConfig, DeviceChoice, DeviceKind, EnrichmentSettings, RecordingMethod};
use privlens_core::session::modules::Routine;
use privlens_core::session::pipeline::scan_traffic;
use privlens_core::session::{Environment, Session, SessionError, State};
use privlens_core::store::Store;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const TLS_FIXTURES: [&str; 5] = [
    "tls12_aes128gcm",
    "tls12_aes256gcm",
    "tls13_aes128gcm",
    "tls13_aes256gcm",
    "tls13_chacha20",
];

fn main() {
    let _ = env_logger::builder().is_test(true).filter_level(log::LevelFilter::Error).try_init();
    let criteria: Vec<Criterion> = vec![
        ("tls-decryption-oracle", tls_decryption_oracle),
        ("tls-fail-closed", tls_fail_closed),
        ("static-oracle", static_oracle),
        ("decoder-roundtrip-termination", decoder_roundtrip_termination),
        ("planted-leak-recall", planted_leak_recall),
        ("orchestrator-lifo-state-safety", orchestrator_lifo),
        ("e2e-replay-determinism", e2e_replay_determinism),
        ("enrichment-offline-invariance", enrichment_offline_invariance),
        ("har-conformance", har_conformance),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, run) in criteria {
        let t0 = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => writeln!(out, "PASS {name} ({secs:.1} s): {detail}").unwrap(),
            Err(why) => {
                failed += 1;
                writeln!(out, "FAIL {name} ({secs:.1} s): {why}").unwrap();
            }
        }
    }
    writeln!(out, "acceptance: {} failed", failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}

fn tls_expected(stem: &str) -> Value {
    serde_json::from_slice(&read(&format!("tls/{stem}.expected.json"))).unwrap()
}

fn tls_ingest(pcap: &[u8], stem: &str) -> Result<privlens_core::capture::model::TrafficLog, String> {
    // captures without a keylog are ingested metadata-only
    let path = fixtures().join(format!("tls/{stem}.keylog"));
    let secrets = std::fs::read_to_string(path).ok().map(|k| load_keylog(&k).0);
    ingest_pcap(pcap, secrets.as_ref()).map_err(|e| format!("{stem}: {e}"))
}

fn har_body(v: &Value, encoding_key: &str) -> Vec<u8> {
    let text = v["text"].as_str().unwrap_or_default();
    if v[encoding_key] == "base64" {
        b64(text)
    } else {
        text.as_bytes().to_vec()
    }
}

fn har_headers(v: &Value) -> Vec<(String, String)> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|h| (h["name"].as_str().unwrap().to_string(), h["value"].as_str().unwrap().to_string()))
        .collect()
}

/// Path and query of an absolute URL.
fn request_target(url: &str) -> String {
    let after_scheme = url.split_once("://").map(|(_, r)| r).unwrap_or(url);
    match after_scheme.find('/') {
        Some(i) => after_scheme[i..].to_string(),
        None => "/".into(),
    }
}

// ---------------------------------------------------------------------------

fn tls_decryption_oracle() -> Verdict {
    let mut checked = 0;
    for stem in TLS_FIXTURES {
        let expected = tls_expected(stem);
        let pcap = read(&format!("tls/{}", expected["capture"].as_str().unwrap()));
        let t0 = Instant::now();
        let log = tls_ingest(&pcap, stem)?;
        let har = export_har(&log);
        let elapsed = t0.elapsed();
        ensure!(elapsed < Duration::from_secs(10), "{stem} took {elapsed:?}");

        let client = b64(expected["client_plaintext_b64"].as_str().unwrap());
        let server = b64(expected["server_plaintext_b64"].as_str().unwrap());
        let responses = split_messages(&server);
        let entries = har["log"]["entries"].as_array().unwrap();
        ensure!(
            entries.len() == responses.len(),
            "{stem}: {} HAR entries, {} exchanges in the oracle",
            entries.len(),
            responses.len()
        );

        // Requests carry no transfer coding, so the serialized HAR requests
        // must reproduce the client's byte stream exactly.
        let mut rebuilt = Vec::new();
        for e in entries {
            let r = &e["request"];
            rebuilt.extend_from_slice(
                format!(
                    "{} {} {}\r\n",
                    r["method"].as_str().unwrap(),
                    request_target(r["url"].as_str().unwrap()),
                    r["httpVersion"].as_str().unwrap()
                )
                .as_bytes(),
            );
            for (n, v) in har_headers(&r["headers"]) {
                rebuilt.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
            }
            rebuilt.extend_from_slice(b"\r\n");
            if r.get("postData").is_some() {
                rebuilt.extend_from_slice(&har_body(&r["postData"], "_encoding"));
            }
        }
        ensure!(rebuilt == client, "{stem}: request bytes differ from the client plaintext");

        for (i, (e, want)) in entries.iter().zip(&responses).enumerate() {
            let r = &e["response"];
            let line = format!(
                "{} {} {}",
                r["httpVersion"].as_str().unwrap(),
                r["status"],
                r["statusText"].as_str().unwrap()
            );
            ensure!(line == want.start_line, "{stem} #{i}: status line {line:?} vs {:?}", want.start_line);
            ensure!(har_headers(&r["headers"]) == want.headers, "{stem} #{i}: response headers differ");
            ensure!(har_body(&r["content"], "encoding") == want.body, "{stem} #{i}: response body differs");
        }
        checked += entries.len();
    }
    Ok(format!("{} fixtures, {checked} exchanges byte-identical", TLS_FIXTURES.len()))
}

/// Offsets of TLS application-data record headers (type 23, version 3.3)
/// inside the capture file.
fn app_data_offsets(file: &[u8]) -> Vec<usize> {
    file.windows(5)
        .enumerate()
        .filter(|(_, w)| w[0] == 23 && w[1] == 3 && w[2] == 3 && u16::from_be_bytes([w[3], w[4]]) as usize > 16)
        .map(|(i, _)| i)
        .collect()
}

fn tls_fail_closed() -> Verdict {
    let mut trials = 0;
    for stem in TLS_FIXTURES {
        let expected = tls_expected(stem);
        let pcap = read(&format!("tls/{}", expected["capture"].as_str().unwrap()));
        let baseline = tls_ingest(&pcap, stem)?;
        ensure!(!baseline.transactions.is_empty(), "{stem}: baseline has no transactions");
        let offsets = app_data_offsets(&pcap);
        ensure!(offsets.len() >= 2, "{stem}: no application data records found");
        let picks = [offsets[0], offsets[offsets.len() / 2], offsets[offsets.len() - 1]];
        for (k, at) in picks.into_iter().enumerate() {
            // a byte of the record body, past the 5-byte header
            let pos = at + 5 + 3 + k;
            let mut bad = pcap.clone();
            bad[pos] ^= 0x5a;
            let log = tls_ingest(&bad, stem)?;
            let real: Vec<_> = log.transactions.iter().filter(|t| t.source != Source::PcapUndecryptedMeta).collect();
            ensure!(real.is_empty(), "{stem} @{pos}: {} transactions survived corruption", real.len());
            ensure!(
                log.flow_meta.len() == 1 && !log.flow_meta[0].decrypted,
                "{stem} @{pos}: flow meta {:?}",
                log.flow_meta
            );
            trials += 1;
        }
    }
    Ok(format!("{trials} corruptions, all flows reported undecrypted with no transactions"))
}

fn static_oracle() -> Verdict {
    let reference: Value = serde_json::from_slice(&read("apk/reference.json")).unwrap();
    let files = [
        ("minimal", "apk/minimal.apk"),
        ("no_permissions", "apk/no_permissions.apk"),
        ("trackers", "apk/trackers.apk"),
        ("bundle", "apk/bundle.xapk"),
    ];
    let db = TrackerDb::bundled();
    let mut tracker_hits = 0;
    for (key, file) in files {
        let want = &reference[key];
        let name = Path::new(file).file_name().unwrap().to_str().unwrap();
        let pkg = parse_package(name, &read(file)).map_err(|e| format!("{file}: {e}"))?;
        let m = &pkg.manifest;
        ensure!(m.package_name == want["package_name"], "{file}: package {}", m.package_name);
        ensure!(m.version_code == want["version_code"], "{file}: version code {}", m.version_code);
        ensure!(m.version_name == want["version_name"], "{file}: version name {}", m.version_name);
        ensure!(m.sdk_versions.min == want["min_sdk"].as_i64(), "{file}: min sdk");
        ensure!(m.sdk_versions.target == want["target_sdk"].as_i64(), "{file}: target sdk");
        let perms: Vec<&str> = want["uses_permissions"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        ensure!(m.uses_permissions == perms, "{file}: permissions {:?} vs {perms:?}", m.uses_permissions);
        let ids: BTreeSet<&str> = want["code_identifiers"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let got: BTreeSet<&str> = pkg.code_identifiers.iter().map(String::as_str).collect();
        ensure!(got == ids, "{file}: code identifiers {got:?} vs {ids:?}");

        // every identifier against every prefix
        let mut brute: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for entry in &db.entries {
            for prefix in &entry.code_signature_prefixes {
                for id in &ids {
                    if *id == prefix || id.starts_with(&format!("{prefix}.")) {
                        brute.entry(entry.tracker_id.clone()).or_default().insert(prefix.clone());
                    }
                }
            }
        }
        let matched: BTreeMap<String, BTreeSet<String>> = match_trackers(&pkg.code_identifiers, &db)
            .into_iter()
            .map(|r| (r.tracker_id, r.matched_signatures.into_iter().collect()))
            .collect();
        ensure!(matched == brute, "{file}: trackers {matched:?} vs brute force {brute:?}");
        tracker_hits += matched.len();
    }
    Ok(format!("{} packages match the reference dump; {tracker_hits} tracker matches equal the brute-force scan", files.len()))
}

// ---------------------------------------------------------------------------

fn random_json(rng: &mut StdRng, depth: usize) -> Value {
    match rng.gen_range(0..if depth > 2 { 4 } else { 6 }) {
        0 => json!(rng.gen_range(-1_000_000i64..1_000_000)),
        1 => json!(rng.gen_bool(0.5)),
        2 | 3 => {
            let len = rng.gen_range(0..40);
            let s: String = (0..len).map(|_| rng.gen_range(0x20u8..0x7f) as char).collect();
            json!(s)
        }
        4 => Value::Array((0..rng.gen_range(0..5)).map(|_| random_json(rng, depth + 1)).collect()),
        _ => {
            let mut m = serde_json::Map::new();
            for i in 0..rng.gen_range(1..5) {
                m.insert(format!("k{i}"), random_json(rng, depth + 1));
            }
            Value::Object(m)
        }
    }
}

fn wrap(rng: &mut StdRng, mut bytes: Vec<u8>) -> Vec<u8> {
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    for _ in 0..rng.gen_range(0..4) {
        bytes = match rng.gen_range(0..4) {
            0 => {
                let engine = [&STANDARD, &STANDARD_NO_PAD, &URL_SAFE, &URL_SAFE_NO_PAD][rng.gen_range(0..4)];
                engine.encode(&bytes).into_bytes()
            }
            1 => {
                let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
                enc.write_all(&bytes).unwrap();
                enc.finish().unwrap()
            }
            2 => percent_encoding::percent_encode(&bytes, percent_encoding::NON_ALPHANUMERIC)
                .to_string()
                .into_bytes(),
            _ => format!("a={}&b=1", String::from_utf8_lossy(&bytes)).into_bytes(),
        };
    }
    bytes
}

fn fuzz_input(rng: &mut StdRng) -> Vec<u8> {
    const MAX: usize = 64 * 1024;
    let mut out = match rng.gen_range(0..10) {
        0..=3 => {
            // log-uniform length so short and long inputs both occur
            let len = (2f64.powf(rng.gen_range(0.0..16.0)) as usize).min(MAX);
            (0..len).map(|_| rng.gen()).collect()
        }
        4 => {
            let len = rng.gen_range(0..2048);
            (0..len).map(|_| b"ABCDEFabcdef0123456789+/=%-_"[rng.gen_range(0..28)]).collect()
        }
        _ => {
            let v = random_json(rng, 0);
            wrap(rng, v.to_string().into_bytes())
        }
    };
    out.truncate(MAX);
    out
}

/// Re-applies the layer of `n` to its children and compares with `n.raw`.
fn reencodes(n: &DecodedNode) -> Result<(), String> {
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    let ok = match (&n.encoding_applied, &n.value) {
        (Encoding::Base64, NodeValue::Inner(c)) => match n.params {
            Some(LayerParams::Base64 { url_safe, padded }) => {
                let engine = match (url_safe, padded) {
                    (false, true) => STANDARD,
                    (false, false) => STANDARD_NO_PAD,
                    (true, true) => URL_SAFE,
                    (true, false) => URL_SAFE_NO_PAD,
                };
                engine.encode(&c.raw).into_bytes() == n.raw
            }
            _ => false,
        },
        (Encoding::Url, NodeValue::Inner(c)) => match &n.params {
            Some(LayerParams::Url {
                escaped,
                plus_space,
                lower_hex,
            }) => {
                let mut out = Vec::new();
                for &b in &c.raw {
                    if b == b' ' && *plus_space {
                        out.push(b'+');
                    } else if escaped.contains(&b) {
                        let hex = if *lower_hex { format!("%{b:02x}") } else { format!("%{b:02X}") };
                        out.extend_from_slice(hex.as_bytes());
                    } else {
                        out.push(b);
                    }
                }
                out == n.raw
            }
            _ => false,
        },
        (Encoding::Gzip, NodeValue::Inner(c)) => {
            let mut d = flate2::read::GzDecoder::new(&n.raw[..]);
            let mut buf = Vec::new();
            d.read_to_end(&mut buf).is_ok() && buf == c.raw
        }
        (Encoding::Form, NodeValue::Map(entries)) => {
            let parts: Vec<Vec<u8>> = entries
                .iter()
                .map(|(k, c)| [k.as_bytes(), b"=", &c.raw].concat())
                .collect();
            parts.join(&b'&') == n.raw
        }
        (Encoding::Json | Encoding::None, NodeValue::Map(_) | NodeValue::List(_)) => {
            serde_json::from_slice::<Value>(&n.raw).ok() == Some(json_of(n))
        }
        (Encoding::None, NodeValue::Text(t)) => t.as_bytes() == n.raw,
        (Encoding::None, NodeValue::Bytes(b)) => *b == n.raw,
        (Encoding::None, NodeValue::Number(t)) => t.as_bytes() == n.raw,
        (Encoding::None, NodeValue::Boolean(b)) => n.raw == if *b { &b"true"[..] } else { &b"false"[..] },
        (Encoding::None, NodeValue::Null) => n.raw == b"null",
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{:?} node does not re-encode to its raw bytes", n.encoding_applied))
    }
}

/// JSON value a structural node stands for; layered string children stand
/// for their raw text.
fn json_of(n: &DecodedNode) -> Value {
    match &n.value {
        NodeValue::Map(e) if n.encoding_applied != Encoding::Form => {
            Value::Object(e.iter().map(|(k, c)| (k.clone(), json_of(c))).collect())
        }
        NodeValue::List(items) => Value::Array(items.iter().map(json_of).collect()),
        NodeValue::Number(t) if n.encoding_applied == Encoding::None => serde_json::from_str(t).unwrap_or(Value::Null),
        NodeValue::Boolean(b) => json!(b),
        NodeValue::Null => Value::Null,
        _ => Value::String(String::from_utf8_lossy(&n.raw).into_owned()),
    }
}

fn decoder_roundtrip_termination() -> Verdict {
    const CASES: usize = 10_000;
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let limits = DecoderLimits::default();
    let t0 = Instant::now();
    let mut nodes = 0usize;
    let mut layered = 0usize;
    let mut bytes_in = 0usize;
    for case in 0..CASES {
        let input = fuzz_input(&mut rng);
        bytes_in += input.len();
        let decoded = catch_unwind(AssertUnwindSafe(|| decode(&input, &limits)))
            .map_err(|_| format!("case {case}: decoder panicked"))?;
        ensure!(decoded.root.raw == input, "case {case}: root raw differs from input");
        let mut err = None;
        decoded.root.walk(&mut |n, path, _| {
            nodes += 1;
            if n.encoding_applied != Encoding::None {
                layered += 1;
            }
            if err.is_none() {
                if let Err(e) = reencodes(n) {
                    err = Some(format!("case {case} at {path}: {e}"));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "{CASES} inputs took {elapsed:?}");
    Ok(format!(
        "{CASES} inputs ({} KiB), {nodes} nodes ({layered} layered) re-encode exactly",
        bytes_in / 1024
    ))
}

// ---------------------------------------------------------------------------

const AD_ID: &str = "38400000-8cf0-11bd-b23e-10b96e40000d";

fn planted_har() -> Value {
    use base64::engine::general_purpose::STANDARD;
    let stripped = AD_ID.replace('-', "");
    let json_body = STANDARD.encode(json!({"device": {"adid": stripped, "os": "android"}}).to_string());
    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(json!({"events": [{"name": "open"}], "aid": AD_ID}).to_string().as_bytes()).unwrap();
    let nested = STANDARD.encode(gz.finish().unwrap());
    let entry = |method: &str, url: &str, headers: Value, cookies: Value, body: Option<&str>| {
        let mut req = json!({
            "method": method, "url": url, "httpVersion": "HTTP/1.1",
            "cookies": cookies, "headers": headers, "queryString": [],
            "headersSize": -1, "bodySize": body.map_or(0, str::len),
        });
        if let Some(b) = body {
            req["postData"] = json!({"mimeType": "text/plain", "text": b});
        }
        json!({
            "startedDateTime": "2024-06-10T06:13:20.000Z", "time": 10,
            "request": req,
            "response": {
                "status": 204, "statusText": "No Content", "httpVersion": "HTTP/1.1",
                "cookies": [], "headers": [], "redirectURL": "", "headersSize": -1, "bodySize": 0,
                "content": {"size": 0, "mimeType": "text/plain", "text": ""}
            },
            "cache": {}, "timings": {"send": 0, "wait": 10, "receive": 0}
        })
    };
    json!({"log": {"version": "1.2", "creator": {"name": "planted", "version": "1"}, "entries": [
        entry(
            "GET",
            &format!("https://ads.tracker.example/v1/ping?advertiser_id={AD_ID}&lang=en"),
            json!([{"name": "Host", "value": "ads.tracker.example"},
                   {"name": "X-Ad-Id", "value": AD_ID},
                   {"name": "Cookie", "value": format!("sid=s1; uid={AD_ID}")}]),
            json!([{"name": "sid", "value": "s1"}, {"name": "uid", "value": AD_ID}]),
            None,
        ),
        entry("POST", "https://collect.tracker.example/batch",
              json!([{"name": "Host", "value": "collect.tracker.example"}]), json!([]), Some(&json_body)),
        entry("POST", "https://collect.tracker.example/nested",
              json!([{"name": "Host", "value": "collect.tracker.example"}]), json!([]), Some(&nested)),
    ]}})
}

fn har_to_messages(har: &Value) -> Vec<HttpMessage> {
    har["log"]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            let r = &e["request"];
            HttpMessage {
                start_line: format!(
                    "{} {} {}",
                    r["method"].as_str().unwrap(),
                    request_target(r["url"].as_str().unwrap()),
                    r["httpVersion"].as_str().unwrap()
                ),
                headers: har_headers(&r["headers"]),
                body: r["postData"]["text"].as_str().unwrap_or_default().as_bytes().to_vec(),
            }
        })
        .collect()
}

fn location_name(l: Location) -> &'static str {
    match l {
        Location::Header => "header",
        Location::Cookie => "cookie",
        Location::QueryParam => "query_param",
        Location::RequestBody => "request_body",
        Location::ResponseBody => "response_body",
    }
}

fn planted_leak_recall() -> Verdict {
    let har = planted_har();
    let log = import_har(&har.to_string()).map_err(|e| e.to_string())?;
    let profile = DeviceProfile {
        advertising_id: Some(AD_ID.into()),
        ..Default::default()
    };
    let found = scan_traffic(&log, Some(&profile), &AdapterRegistry::empty(), &DecoderLimits::default());

    let pats = brute_patterns(&profile);
    let mut oracle: Vec<(String, Vec<String>)> = Vec::new();
    for m in har_to_messages(&har) {
        for h in brute_scan(&m, None, &pats) {
            oracle.push((h.location, h.chain));
        }
    }
    let mut ours: Vec<(String, Vec<String>)> = found
        .findings
        .iter()
        .map(|f| {
            let chain = f
                .encoding_chain
                .iter()
                .filter(|e| **e != Encoding::None)
                .map(|e| e.as_str().to_string())
                .collect();
            (location_name(f.location).to_string(), chain)
        })
        .collect();
    oracle.sort();
    ours.sort();
    ensure!(found.findings.len() == 5, "{} findings: {ours:?}", found.findings.len());
    ensure!(ours == oracle, "findings {ours:?} vs brute force {oracle:?}");
    let want: Vec<(String, Vec<String>)> = vec![
        ("cookie".into(), vec![]),
        ("header".into(), vec![]),
        ("query_param".into(), vec![]),
        ("request_body".into(), vec!["base64".into(), "gzip".into(), "json".into()]),
        ("request_body".into(), vec!["base64".into(), "json".into()]),
    ];
    ensure!(ours == want, "placements {ours:?}");
    for f in &found.findings {
        ensure!(f.label == "advertising_id", "label {}", f.label);
        ensure!(
            f.matched_text == AD_ID || f.matched_text == AD_ID.replace('-', ""),
            "matched text {}",
            f.matched_text
        );
    }
    Ok("5 placements, 5 findings, locations and chains equal the brute-force scan".into())
}

// ---------------------------------------------------------------------------

/// Transitions of the session state machine.
fn legal(from: State, to: State) -> bool {
    use State::*;
    matches!(
        (from, to),
        (Created, StaticRunning)
            | (StaticRunning, AwaitingDevice)
            | (StaticRunning, Complete)
            | (AwaitingDevice, Preparing)
            | (Preparing, Recording)
            | (Recording, Stopping)
            | (Stopping, PostProcessing)
            | (PostProcessing, Complete)
    ) || (!matches!(from, Complete | Failed) && to == Failed)
}

#[derive(Debug, Clone)]
struct Script {
    screen: bool,
    traffic: usize,
    failures: Vec<(usize, Routine)>,
    commands: Vec<bool>,
}

fn script() -> impl Strategy<Value = Script> {
    let routine = prop_oneof![
        Just(Routine::Setup),
        Just(Routine::Start),
        Just(Routine::Stop),
        Just(Routine::Cleanup),
        Just(Routine::Postprocess),
    ];
    (
        any::<bool>(),
        1usize..4,
        prop::collection::vec((0usize..4, routine), 0..3),
        prop::collection::vec(any::<bool>(), 1..6),
    )
        .prop_map(|(screen, traffic, failures, commands)| Script {
            screen,
            traffic,
            failures,
            commands,
        })
}

fn keys(trace: &[privlens_core::session::TraceEntry], r: Routine) -> Vec<String> {
    trace.iter().filter(|t| t.routine == r).map(|t| t.module.clone()).collect()
}

fn run_script(store: &Arc<Store>, app: &str, s: &Script) -> Result<(), TestCaseError> {
    let mut module_keys: Vec<String> = Vec::new();
    if s.screen {
        module_keys.push("screen".into());
    }
    module_keys.extend((0..s.traffic).map(|i| format!("traffic{i}")));
    let mut fail: HashMap<String, Vec<Routine>> = HashMap::new();
    for (idx, r) in &s.failures {
        if let Some(k) = module_keys.get(*idx) {
            fail.entry(k.clone()).or_default().push(*r);
        }
    }
    let restores = Arc::new(Mutex::new(0));
    let mut env = Environment::new(store.clone());
    env.devices = Arc::new(ScriptedProvider {
        screen: s.screen,
        restores: restores.clone(),
    });
    env.modules = Arc::new(ScriptedFactory { traffic: s.traffic, fail });
    let config = AnalysisConfig {
        schema_version: "1.0".into(),
        analysis_id: None,
        title: "scripted".into(),
        annotations: String::new(),
        app_ref: app.into(),
        static_enabled: false,
        dynamic_enabled: true,
        device: DeviceChoice {
            kind: DeviceKind::Replay,
            fixture: None,
            serial: None,
        },
        recording_method_key: Some(RecordingMethod::Ondevice),
        decoder_limits: None,
        enrichment: EnrichmentSettings {
            offline: true,
            provider: None,
        },
    };
    let mut session = Session::create(env, config).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for &start in &s.commands {
        let before = session.state();
        let result = if start { session.start() } else { session.stop() };
        match result {
            Err(SessionError::AlreadyStarted(st)) | Err(SessionError::NotRecording(st)) => {
                prop_assert_eq!(st, before);
                prop_assert_eq!(session.state(), before, "rejected command changed state");
            }
            _ => {}
        }
    }
    if session.state() == State::Recording {
        let _ = session.stop();
    }

    let mut prev = State::Created;
    for &(from, to) in session.transitions() {
        prop_assert_eq!(from, prev, "transition chain broken");
        prop_assert!(legal(from, to), "illegal transition {:?} -> {:?}", from, to);
        prev = to;
    }
    prop_assert_eq!(prev, session.state());

    let trace = session.trace();
    let setup = keys(trace, Routine::Setup);
    let started: Vec<String> = trace
        .iter()
        .filter(|t| t.routine == Routine::Start && t.ok)
        .map(|t| t.module.clone())
        .collect();
    let mut stop_expected = started.clone();
    stop_expected.reverse();
    let stops = keys(trace, Routine::Stop);
    // every successful start is answered by exactly one stop, in reverse
    prop_assert_eq!(&stops, &stop_expected, "stop order vs start order {:?}", keys(trace, Routine::Start));
    let mut cleanup_expected = setup.clone();
    cleanup_expected.reverse();
    if !setup.is_empty() {
        prop_assert_eq!(keys(trace, Routine::Cleanup), cleanup_expected);
    }
    prop_assert!(module_keys.starts_with(&setup), "setup order {:?}", setup);
    let post = keys(trace, Routine::Postprocess);
    if !post.is_empty() {
        let mut rev = started.clone();
        rev.reverse();
        prop_assert_eq!(post, rev);
    }
    if session.state() == State::Created {
        // only stops were issued; nothing may have run
        prop_assert!(trace.is_empty(), "trace without a start: {:?}", trace);
    } else {
        prop_assert!(session.state().is_terminal(), "ended in {:?}", session.state());
    }
    if !setup.is_empty() {
        prop_assert!(*restores.lock().unwrap() >= 1, "device not restored");
    }
    Ok(())
}

fn orchestrator_lifo() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let app = store
        .put_app("app.apk", &std::fs::read(demo_dir().join("app.apk")).unwrap())
        .unwrap()
        .id;
    let cases = 1000;
    let mut runner = TestRunner::new(PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let count = Arc::new(Mutex::new(0u32));
    let c2 = count.clone();
    runner
        .run(&script(), move |s| {
            *c2.lock().unwrap() += 1;
            run_script(&store, &app, &s)
        })
        .map_err(|e| e.to_string())?;
    let n = *count.lock().unwrap();
    ensure!(n >= cases, "only {n} sequences ran");
    Ok(format!("{n} randomized sequences, no illegal transition, LIFO stop/cleanup/postprocess"))
}

// ---------------------------------------------------------------------------

fn analyze_demo(out: &Path) -> Result<Duration, String> {
    let t0 = Instant::now();
    let demo = demo_dir();
    let status = Command::new(env!("CARGO_BIN_EXE_privlens"))
        .arg("analyze")
        .arg("--apk")
        .arg(demo.join("app.apk"))
        .arg("--fixture")
        .arg(&demo)
        .arg("--offline")
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "analyze failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(t0.elapsed())
}

fn without_ids(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("analysis_id");
    v
}

fn e2e_replay_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ta = analyze_demo(&a)?;
    let tb = analyze_demo(&b)?;
    ensure!(ta.max(tb) < Duration::from_secs(30), "runs took {ta:?} and {tb:?}");
    let load = |p: &Path| -> Value { serde_json::from_slice(&std::fs::read(p.join("report_model.json")).unwrap()).unwrap() };
    let (ma, mb) = (load(&a), load(&b));
    ensure!(ma["analysis_id"] != mb["analysis_id"], "runs share an analysis id");
    ensure!(without_ids(ma.clone()) == without_ids(mb), "report models differ beyond analysis_id");

    // recount from the fixture's plaintext oracle
    let expected: Value = serde_json::from_slice(&std::fs::read(demo_dir().join("expected.json")).unwrap()).unwrap();
    let profile = DeviceProfile::from_json(&std::fs::read_to_string(demo_dir().join("profile.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let pats = brute_patterns(&profile);
    let mut requests = 0;
    let mut undecrypted = 0;
    let mut hosts = BTreeSet::new();
    let mut hits = 0;
    for flow in expected["flows"].as_array().unwrap() {
        let exchanges = flow["exchanges"].as_array().unwrap();
        if flow["keys_in_keylog"] == true {
            for ex in exchanges {
                let req = split_messages(&b64(ex["request_b64"].as_str().unwrap())).remove(0);
                let resp = split_messages(&b64(ex["response_b64"].as_str().unwrap())).remove(0);
                hosts.insert(req.header("host").unwrap().to_string());
                hits += brute_scan(&req, Some(&resp), &pats).len();
                requests += 1;
            }
        } else {
            // one placeholder row per undecryptable flow, named by SNI or IP
            undecrypted += 1;
            requests += 1;
            hosts.insert(flow["sni"].as_str().or(flow["server_ip"].as_str()).unwrap().to_string());
        }
    }
    let s = &ma["summary"];
    ensure!(s["total_requests"] == requests, "total_requests {} vs recount {requests}", s["total_requests"]);
    ensure!(s["total_entities"] == hosts.len(), "total_entities {} vs {} hosts", s["total_entities"], hosts.len());
    ensure!(s["undecrypted_flow_count"] == undecrypted, "undecrypted {}", s["undecrypted_flow_count"]);

    let findings: Value = serde_json::from_slice(&std::fs::read(a.join("findings.json")).unwrap()).unwrap();
    let all = findings["findings"].as_array().unwrap();
    let pattern = all.iter().filter(|f| f["detector"] == "pattern").count();
    ensure!(pattern == hits, "{pattern} pattern findings vs {hits} brute-force hits");
    ensure!(s["sensitive_finding_count"] == all.len(), "summary findings {} vs {}", s["sensitive_finding_count"], all.len());
    let har: Value = serde_json::from_slice(&std::fs::read(a.join("traffic.har")).unwrap()).unwrap();
    let decrypted = requests - undecrypted;
    ensure!(
        har["log"]["entries"].as_array().unwrap().len() == decrypted,
        "HAR has {} entries, oracle {decrypted}",
        har["log"]["entries"].as_array().unwrap().len()
    );
    Ok(format!(
        "two runs identical ({:.1} s, {:.1} s); {requests} requests, {} hosts, {hits} pattern findings match the recount",
        ta.as_secs_f64(),
        tb.as_secs_f64(),
        hosts.len()
    ))
}

// ---------------------------------------------------------------------------

fn enrichment_offline_invariance() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let tmp = tempfile::tempdir().unwrap();
        let settings = Settings {
            data_dir: tmp.path().to_path_buf(),
            ..Settings::default()
        };
        let app = router(Arc::new(AppState::new(settings).map_err(|e| e.to_string())?));
        let (code, bytes) = rest::raw(&app, rest::multipart("app.apk", &std::fs::read(demo_dir().join("app.apk")).unwrap())).await;
        ensure!(code == 201, "upload: {code}");
        let app_id = serde_json::from_slice::<Value>(&bytes).unwrap()["app_id"]
            .as_str()
            .or(serde_json::from_slice::<Value>(&bytes).unwrap()["id"].as_str())
            .unwrap()
            .to_string();

        let mut records = serde_json::Map::new();
        for (i, ip) in ["192.0.2.100", "192.0.2.110", "192.0.2.120", "192.0.2.130", "192.0.2.140"].iter().enumerate() {
            records.insert(ip.to_string(), json!({"org": format!("Hosting {i}"), "country": "DE", "city": "Berlin"}));
        }
        let mut entity_sets = Vec::new();
        for enrichment in [json!({"offline": true}), json!({"offline": false, "provider": {"kind": "mock", "records": records}})] {
            let config = json!({
                "schema_version": "1.0",
                "title": "demo",
                "app_ref": app_id,
                "static_enabled": false,
                "dynamic_enabled": true,
                "device": {"kind": "replay", "fixture": demo_dir()},
                "recording_method_key": "ondevice_keylog",
                "enrichment": enrichment,
            });
            let (code, created) = rest::json(&app, "POST", "/analyses", Some(config)).await;
            ensure!(code == 201, "create: {code} {created}");
            let id = created["analysis_id"].as_str().unwrap().to_string();
            let snap = rest::wait_for(&app, &id, "Recording").await;
            ensure!(snap["state"] == "Recording", "state {}", snap["state"]);
            let (code, _) = rest::json(&app, "POST", &format!("/analyses/{id}/stop"), None).await;
            ensure!(code == 202, "stop: {code}");
            let snap = rest::wait_for(&app, &id, "Complete").await;
            ensure!(snap["state"] == "Complete", "state {}: {}", snap["state"], snap["error"]);
            let (code, report) = rest::json(&app, "GET", &format!("/analyses/{id}/report"), None).await;
            ensure!(code == 200, "report: {code}");
            entity_sets.push((report["entities"]["items"].clone(), report["summary"].clone()));
        }
        let strip = |items: &Value| -> Vec<Value> {
            items
                .as_array()
                .unwrap()
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    e.as_object_mut().unwrap().remove("hosting");
                    e
                })
                .collect()
        };
        let (offline, online) = (&entity_sets[0], &entity_sets[1]);
        ensure!(strip(&offline.0) == strip(&online.0), "entity sets differ beyond hosting");
        ensure!(offline.1 == online.1, "summary counts differ");
        let n = offline.0.as_array().unwrap().len();
        for (e_off, e_on) in offline.0.as_array().unwrap().iter().zip(online.0.as_array().unwrap()) {
            ensure!(e_off["hosting"]["status"] == "unresolved", "offline hosting {}", e_off["hosting"]);
            ensure!(e_on["hosting"]["status"] == "resolved", "mock hosting {}", e_on["hosting"]);
        }
        Ok(format!("{n} entities identical offline and with the mock provider; only hosting differs"))
    })
}

// ---------------------------------------------------------------------------

fn har_validator() -> jsonschema::JSONSchema {
    let schema: Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/schemas/har-1.2.schema.json")).unwrap(),
    )
    .unwrap();
    jsonschema::JSONSchema::compile(&schema).expect("HAR schema compiles")
}

fn schema_errors(v: &jsonschema::JSONSchema, doc: &Value) -> Option<String> {
    v.validate(doc)
        .err()
        .map(|errs| errs.map(|e| format!("{} at {}", e, e.instance_path)).collect::<Vec<_>>().join("; "))
}

fn name_values(v: &Value) -> Vec<(String, String)> {
    v.as_array()
        .map(|a| {
            a.iter()
                .map(|p| (p["name"].as_str().unwrap_or("").to_string(), p["value"].as_str().unwrap_or("").to_string()))
                .collect()
        })
        .unwrap_or_default()
}

fn post_bytes(post: &Value) -> Vec<u8> {
    if let Some(text) = post["text"].as_str() {
        if post["_encoding"] == "base64" || post["encoding"] == "base64" {
            return b64(text);
        }
        return text.as_bytes().to_vec();
    }
    // params-only form bodies
    let pairs: Vec<String> = name_values(&post["params"])
        .into_iter()
        .map(|(n, v)| {
            format!(
                "{}={}",
                percent_encoding::utf8_percent_encode(&n, percent_encoding::NON_ALPHANUMERIC),
                percent_encoding::utf8_percent_encode(&v, percent_encoding::NON_ALPHANUMERIC)
            )
        })
        .collect();
    pairs.join("&").into_bytes()
}

fn form_pairs(bytes: &[u8]) -> Vec<(String, String)> {
    let text = String::from_utf8_lossy(bytes).replace('+', " ");
    text.split('&')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').unwrap_or((p, ""));
            let d = |s: &str| percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned();
            (d(k), d(v))
        })
        .collect()
}

fn instant(v: &Value) -> Option<i64> {
    chrono::DateTime::parse_from_rfc3339(v.as_str()?).ok().map(|t| t.timestamp_millis())
}

/// Field-level comparison of one third-party entry with its re-export.
fn same_entry(orig: &Value, back: &Value) -> Result<(), String> {
    let (o, b) = (&orig["request"], &back["request"]);
    for f in ["method", "url", "httpVersion"] {
        ensure!(o[f] == b[f], "request.{f}: {} vs {}", o[f], b[f]);
    }
    for f in ["headers", "cookies"] {
        ensure!(name_values(&o[f]) == name_values(&b[f]), "request.{f} differs");
    }
    // exporters disagree on whether queryString values stay percent-encoded
    let decoded = |v: &Value| -> Vec<(String, String)> {
        let d = |s: &str| percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned();
        name_values(v).iter().map(|(n, v)| (d(n), d(v))).collect()
    };
    ensure!(decoded(&o["queryString"]) == decoded(&b["queryString"]), "request.queryString differs");
    match (o.get("postData"), b.get("postData")) {
        (None, None) => {}
        (Some(po), Some(pb)) => {
            ensure!(po["mimeType"] == pb["mimeType"], "postData.mimeType");
            if po.get("text").is_some() {
                ensure!(post_bytes(po) == post_bytes(pb), "postData body differs");
            } else {
                ensure!(name_values(&po["params"]) == form_pairs(&post_bytes(pb)), "postData params differ");
            }
        }
        (po, pb) => return Err(format!("postData presence {:?} vs {:?}", po.is_some(), pb.is_some())),
    }
    let (o, b) = (&orig["response"], &back["response"]);
    for f in ["status", "statusText", "httpVersion", "redirectURL"] {
        ensure!(o[f] == b[f], "response.{f}: {} vs {}", o[f], b[f]);
    }
    ensure!(name_values(&o["headers"]) == name_values(&b["headers"]), "response.headers differ");
    let body = |c: &Value| -> Vec<u8> {
        let text = c["text"].as_str().unwrap_or_default();
        if c["encoding"] == "base64" {
            b64(text)
        } else {
            text.as_bytes().to_vec()
        }
    };
    ensure!(body(&o["content"]) == body(&b["content"]), "response body differs");
    ensure!(o["content"]["mimeType"] == b["content"]["mimeType"], "content.mimeType");
    ensure!(orig["serverIPAddress"] == back["serverIPAddress"], "serverIPAddress");
    ensure!(instant(&orig["startedDateTime"]) == instant(&back["startedDateTime"]), "startedDateTime");
    ensure!(orig["time"].as_f64() == back["time"].as_f64(), "time");
    Ok(())
}

fn har_conformance() -> Verdict {
    let validator = har_validator();
    let mut exported = 0;
    for stem in TLS_FIXTURES.iter().chain(["tls13_two_conns", "tls13_no_sni"].iter()) {
        let expected_capture = if stem.starts_with("tls13_two") || stem.starts_with("tls13_no") {
            format!("tls/{stem}.pcap")
        } else {
            format!("tls/{}", tls_expected(stem)["capture"].as_str().unwrap())
        };
        let log = tls_ingest(&read(&expected_capture), stem)?;
        let doc = export_har(&log);
        if let Some(e) = schema_errors(&validator, &doc) {
            return Err(format!("{stem}: {e}"));
        }
        exported += 1;
    }
    let demo_out = tempfile::tempdir().unwrap();
    analyze_demo(demo_out.path())?;
    let demo: Value = serde_json::from_slice(&std::fs::read(demo_out.path().join("traffic.har")).unwrap()).unwrap();
    if let Some(e) = schema_errors(&validator, &demo) {
        return Err(format!("demo export: {e}"));
    }
    exported += 1;

    let mut entries = 0;
    for name in ["chrome_devtools.har", "firefox.har", "mitmproxy.har"] {
        let text = String::from_utf8(read(&format!("har/{name}"))).unwrap();
        let original: Value = serde_json::from_str(&text).unwrap();
        let log = import_har(&text).map_err(|e| format!("{name}: {e}"))?;
        let back = export_har(&log);
        if let Some(e) = schema_errors(&validator, &back) {
            return Err(format!("{name} re-export: {e}"));
        }
        let (o, b) = (original["log"]["entries"].as_array().unwrap(), back["log"]["entries"].as_array().unwrap());
        ensure!(o.len() == b.len(), "{name}: {} entries re-exported as {}", o.len(), b.len());
        for (i, (eo, eb)) in o.iter().zip(b).enumerate() {
            same_entry(eo, eb).map_err(|e| format!("{name} entry {i}: {e}"))?;
            entries += 1;
        }
    }
    Ok(format!("{exported} exported HARs validate; {entries} third-party entries round-trip field-identical"))
}
