//! pcap(+key log) to `TrafficLog`.

use std::collections::BTreeMap;
use std::net::IpAddr;

use super::http::{parse_http_with_limit, Exchange, MAX_BODY_BYTES};
use super::keylog::SecretStore;
use super::model::{
    header_value, parse_cookie_header, split_host_port, FlowOutcome, FlowRecord, HttpTransaction, Source, TlsFlowMeta,
    TlsInfo, TrafficLog, Url,
};
use super::pcap::CaptureError;
use super::reassembly::{decode_capture, FiveTuple, TcpStreamPair};
use super::tls::{decrypt_tls, looks_like_tls, peek_client_hello};

const H2_PREFACE: &[u8] = b"PRI * HTTP/2.0\r\n\r\nSM\r\n\r\n";

struct Pending {
    tx: HttpTransaction,
    five_tuple: FiveTuple,
    order: usize,
}

fn transaction_from(ex: Exchange, stream: &TcpStreamPair, tls: Option<TlsInfo>, order: usize) -> Pending {
    let ft = &stream.five_tuple;
    let scheme = if tls.is_some() { "https" } else { "http" };
    let req = ex.request;
    let host_header = header_value(&req.headers, "host");
    let url = if req.target.contains("://") {
        Url::parse(&req.target)
    } else {
        None
    }
    .unwrap_or_else(|| {
        let (host, port) = match host_header.and_then(split_host_port) {
            Some((h, p)) if !h.is_empty() => (h.to_string(), p.or(Some(ft.server_port))),
            _ => {
                let sni = tls.as_ref().and_then(|t| t.sni.clone());
                (sni.unwrap_or_else(|| ft.server_ip.to_string()), Some(ft.server_port))
            }
        };
        Url::from_target(scheme, &host, port, &req.target)
    });
    let cookies = req
        .headers
        .iter()
        .filter(|h| h.name.eq_ignore_ascii_case("cookie"))
        .flat_map(|h| parse_cookie_header(&h.value))
        .collect();
    let (status, status_text, response_headers, response_body) = match ex.response {
        Some(r) => (r.status, r.reason, r.headers, r.body),
        None => (0, String::new(), Vec::new(), Default::default()),
    };
    let duration_ms = ex.finished_at.map_or(0.0, |f| (f - ex.started_at).max(0) as f64);
    Pending {
        tx: HttpTransaction {
            id: String::new(),
            started_at: ex.started_at,
            duration_ms,
            method: req.method,
            url,
            http_version: req.version,
            request_headers: req.headers,
            response_headers,
            cookies,
            request_body: req.body,
            response_body,
            status,
            status_text,
            server_ip: Some(ft.server_ip.to_string()),
            server_port: Some(ft.server_port),
            tls,
            source: Source::PcapDecrypted,
        },
        five_tuple: *ft,
        order,
    }
}

/// Handshake-level facts about one TLS connection.
struct TlsObservation {
    server_ip: IpAddr,
    server_port: u16,
    sni: Option<String>,
    version: Option<String>,
    first_seen: i64,
    decrypted: bool,
    note: Option<String>,
}

/// Collapses per-connection TLS observations into one record per
/// (server ip, port, sni). A decrypted connection wins over an undecrypted one.
fn merge_flow_meta(obs: Vec<TlsObservation>) -> Vec<TlsFlowMeta> {
    let mut map: BTreeMap<(IpAddr, u16, Option<String>), TlsFlowMeta> = BTreeMap::new();
    for o in obs {
        let key = (o.server_ip, o.server_port, o.sni.clone());
        match map.get_mut(&key) {
            Some(m) => {
                m.connections += 1;
                m.first_seen = m.first_seen.min(o.first_seen);
                if o.decrypted && !m.decrypted {
                    m.decrypted = true;
                    m.protocol_note = o.note;
                    m.tls_version = o.version.or(m.tls_version.take());
                } else if m.tls_version.is_none() {
                    m.tls_version = o.version;
                }
            }
            None => {
                map.insert(
                    key,
                    TlsFlowMeta {
                        server_ip: o.server_ip,
                        server_port: o.server_port,
                        sni: o.sni,
                        tls_version: o.version,
                        first_seen: o.first_seen,
                        decrypted: o.decrypted,
                        protocol_note: o.note,
                        connections: 1,
                    },
                );
            }
        }
    }
    let mut out: Vec<TlsFlowMeta> = map.into_values().collect();
    out.sort_by(|a, b| {
        a.first_seen
            .cmp(&b.first_seen)
            .then_with(|| (a.server_ip, a.server_port, &a.sni).cmp(&(b.server_ip, b.server_port, &b.sni)))
    });
    out
}

/// Summary of TLS endpoints seen in the handshakes of a capture, without any
/// decryption. Every entry has `decrypted == false`.
pub fn extract_handshake_entities(pcap: &[u8]) -> Result<Vec<TlsFlowMeta>, CaptureError> {
    let cap = decode_capture(pcap)?;
    let obs = cap
        .streams
        .iter()
        .filter(|s| looks_like_tls(&s.client_to_server.data))
        .map(|s| TlsObservation {
            server_ip: s.five_tuple.server_ip,
            server_port: s.five_tuple.server_port,
            sni: peek_client_hello(&s.client_to_server.data).and_then(|c| c.sni),
            version: None,
            first_seen: s.first_packet_time,
            decrypted: false,
            note: None,
        })
        .collect();
    Ok(merge_flow_meta(obs))
}

/// Reads a capture, decrypts what the secrets allow and parses HTTP/1.x.
///
/// Every TCP stream ends up in exactly one `FlowRecord`. Transactions are
/// ordered by start time, then five-tuple, then position in the stream, and
/// numbered in that order.
pub fn ingest_pcap(pcap: &[u8], secrets: Option<&SecretStore>) -> Result<TrafficLog, CaptureError> {
    ingest_pcap_with(pcap, secrets, &IngestOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub max_body_bytes: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_body_bytes: MAX_BODY_BYTES,
        }
    }
}

pub fn ingest_pcap_with(
    pcap: &[u8],
    secrets: Option<&SecretStore>,
    options: &IngestOptions,
) -> Result<TrafficLog, CaptureError> {
    let cap = decode_capture(pcap)?;
    let empty = SecretStore::default();
    let secrets = secrets.unwrap_or(&empty);
    let mut pending = Vec::new();
    let mut flows = Vec::new();
    let mut observations = Vec::new();

    for stream in &cap.streams {
        let c2s = &stream.client_to_server;
        let outcome = if looks_like_tls(&c2s.data) {
            let sni = peek_client_hello(&c2s.data).and_then(|c| c.sni);
            let mut obs = TlsObservation {
                server_ip: stream.five_tuple.server_ip,
                server_port: stream.five_tuple.server_port,
                sni: sni.clone(),
                version: None,
                first_seen: stream.first_packet_time,
                decrypted: false,
                note: None,
            };
            let outcome = match decrypt_tls(c2s, &stream.server_to_client, secrets) {
                Err(e) => {
                    log::debug!("{}: not decrypted: {e}", stream.five_tuple);
                    FlowOutcome::Undecrypted { reason: e.to_string() }
                }
                Ok(d) => {
                    obs.version = Some(d.info.version.as_str().to_string());
                    let h2 = d.info.alpn.as_deref() == Some("h2") || d.client.data.starts_with(H2_PREFACE);
                    if h2 {
                        obs.note = Some("h2".into());
                        FlowOutcome::NonHttpTls { note: "h2".into() }
                    } else {
                        match parse_http_with_limit(&d.client, &d.server, options.max_body_bytes) {
                            Ok(exchanges) => {
                                obs.decrypted = true;
                                let tls = TlsInfo {
                                    decrypted: true,
                                    sni: d.info.sni.clone(),
                                    version: Some(d.info.version.as_str().to_string()),
                                };
                                let n = exchanges.len();
                                for ex in exchanges {
                                    let order = pending.len();
                                    pending.push(transaction_from(ex, stream, Some(tls.clone()), order));
                                }
                                FlowOutcome::Http {
                                    transactions: n,
                                    decrypted_tls: true,
                                }
                            }
                            Err(_) if d.client.data.is_empty() && d.server.data.is_empty() => {
                                FlowOutcome::NonHttpTls { note: "no application data".into() }
                            }
                            Err(_) => {
                                obs.note = Some("non-http".into());
                                FlowOutcome::NonHttpTls { note: "non-http".into() }
                            }
                        }
                    }
                }
            };
            observations.push(obs);
            outcome
        } else {
            match parse_http_with_limit(c2s, &stream.server_to_client, options.max_body_bytes) {
                Ok(exchanges) => {
                    let n = exchanges.len();
                    for ex in exchanges {
                        let order = pending.len();
                        pending.push(transaction_from(ex, stream, None, order));
                    }
                    FlowOutcome::Http {
                        transactions: n,
                        decrypted_tls: false,
                    }
                }
                Err(_) => FlowOutcome::Residue,
            }
        };
        flows.push(FlowRecord {
            five_tuple: stream.five_tuple,
            outcome,
        });
    }

    pending.sort_by(|a, b| {
        a.tx.started_at
            .cmp(&b.tx.started_at)
            .then_with(|| a.five_tuple.cmp(&b.five_tuple))
            .then_with(|| a.order.cmp(&b.order))
    });
    let transactions = pending
        .into_iter()
        .enumerate()
        .map(|(i, mut p)| {
            p.tx.id = format!("tx-{:05}", i + 1);
            p.tx
        })
        .collect();

    Ok(TrafficLog {
        base_time_ms: cap.stats.base_time_us.div_euclid(1000),
        transactions,
        flow_meta: merge_flow_meta(observations),
        flows,
        udp_flows: cap.stats.udp_flows,
    })
}
