//! TCP stream reassembly.
//!
//! Segments are placed by sequence number relative to the initial sequence
//! number of their direction. Overlapping bytes keep the first copy that was
//! captured; later retransmissions only fill holes.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use super::pcap::{decode_frame, read_frames, CaptureError, Packet, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub client_ip: IpAddr,
    pub client_port: u16,
    pub server_ip: IpAddr,
    pub server_port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl std::fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} {}:{} -> {}:{}",
            self.protocol, self.client_ip, self.client_port, self.server_ip, self.server_port
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completeness {
    Complete,
    Truncated,
}

/// Reassembled bytes of one direction plus `(offset, capture-relative ms)`
/// marks recording when the byte at `offset` was first seen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirectionBytes {
    pub data: Vec<u8>,
    pub marks: Vec<(usize, i64)>,
}

impl DirectionBytes {
    /// Capture-relative time at which the byte at `offset` arrived.
    pub fn time_at(&self, offset: usize) -> Option<i64> {
        let idx = self.marks.partition_point(|(o, _)| *o <= offset);
        idx.checked_sub(1).map(|i| self.marks[i].1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpStreamPair {
    pub five_tuple: FiveTuple,
    pub client_to_server: DirectionBytes,
    pub server_to_client: DirectionBytes,
    /// Capture-relative milliseconds.
    pub first_packet_time: i64,
    pub completeness: Completeness,
}

#[derive(Debug, Default)]
struct Direction {
    isn: Option<u32>,
    syn_seen: bool,
    /// (relative offset, payload, capture-relative ms) in arrival order.
    segments: Vec<(u64, Vec<u8>, i64)>,
    fin_or_rst: bool,
}

impl Direction {
    fn add(&mut self, seq: u32, syn: bool, payload: &[u8], t: i64) {
        if syn {
            self.isn = Some(seq.wrapping_add(1));
            self.syn_seen = true;
            return;
        }
        if payload.is_empty() {
            return;
        }
        let isn = *self.isn.get_or_insert(seq);
        let rel = seq.wrapping_sub(isn);
        // segments from before the first one we anchored on
        if rel > u32::MAX / 2 {
            return;
        }
        self.segments.push((u64::from(rel), payload.to_vec(), t));
    }

    /// Returns the contiguous byte run from offset 0 and whether a hole was hit.
    fn assemble(&self) -> (DirectionBytes, bool) {
        // filled intervals: start -> end
        let mut filled: BTreeMap<u64, u64> = BTreeMap::new();
        let mut pieces: Vec<(u64, Vec<u8>, i64)> = Vec::new();
        for (start, data, t) in &self.segments {
            let end = start + data.len() as u64;
            let mut cursor = *start;
            let mut fresh: Vec<(u64, u64)> = Vec::new();
            let overlapping: Vec<(u64, u64)> = filled
                .range(..end)
                .filter(|(_, e)| **e > *start)
                .map(|(s, e)| (*s, *e))
                .collect();
            for (s, e) in &overlapping {
                if *s > cursor {
                    fresh.push((cursor, *s));
                }
                cursor = cursor.max(*e);
            }
            if cursor < end {
                fresh.push((cursor, end));
            }
            for (fs, fe) in fresh {
                let lo = (fs - start) as usize;
                let hi = (fe - start) as usize;
                pieces.push((fs, data[lo..hi].to_vec(), *t));
            }
            // merge [start, end) into filled
            let mut new_start = *start;
            let mut new_end = end;
            for (s, e) in overlapping {
                new_start = new_start.min(s);
                new_end = new_end.max(e);
                filled.remove(&s);
            }
            if let Some((&s, &e)) = filled.range(..=new_start).next_back() {
                if e >= new_start {
                    new_start = s;
                    new_end = new_end.max(e);
                    filled.remove(&s);
                }
            }
            if let Some((&s, &e)) = filled.range(new_end..).next() {
                if s == new_end {
                    new_end = e;
                    filled.remove(&s);
                }
            }
            filled.insert(new_start, new_end);
        }
        pieces.sort_by_key(|(s, _, _)| *s);
        let mut out = DirectionBytes::default();
        let mut gap = false;
        for (s, data, t) in pieces {
            if s != out.data.len() as u64 {
                gap = true;
                break;
            }
            if out.marks.last().map(|(_, lt)| *lt) != Some(t) {
                out.marks.push((out.data.len(), t));
            }
            out.data.extend_from_slice(&data);
        }
        (out, gap)
    }
}

#[derive(Debug)]
struct Connection {
    tuple: FiveTuple,
    first_time: i64,
    client: Direction,
    server: Direction,
}

/// Summary of non-TCP traffic seen while reassembling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureStats {
    pub frames: usize,
    pub undecodable_frames: usize,
    pub udp_flows: usize,
    pub other_ip_packets: usize,
    /// Absolute time of the first frame, microseconds since the Unix epoch.
    pub base_time_us: i64,
}

/// Groups TCP packets into connections and reassembles both directions.
/// Output is ordered by first packet time, then five-tuple.
pub fn reassemble_packets(packets: &[Packet], base_time_us: i64) -> Vec<TcpStreamPair> {
    let mut conns: Vec<Connection> = Vec::new();
    // (ip, port, ip, port) as seen on the wire -> index of the live connection
    let mut live: HashMap<(IpAddr, u16, IpAddr, u16), usize> = HashMap::new();

    for p in packets {
        let Transport::Tcp {
            src_port,
            dst_port,
            seq,
            flags,
            payload,
        } = &p.transport
        else {
            continue;
        };
        let t = (p.ts_us - base_time_us).div_euclid(1000);
        let fwd = (p.src, *src_port, p.dst, *dst_port);
        let rev = (p.dst, *dst_port, p.src, *src_port);
        let opening = flags.syn() && !flags.ack();

        let idx = match (live.get(&fwd), live.get(&rev)) {
            (Some(&i), _) if !(opening && conns[i].client.syn_seen && (conns[i].client.fin_or_rst || conns[i].client.isn != Some(seq.wrapping_add(1)))) => i,
            (None, Some(&i)) if !opening => i,
            _ => {
                // new connection; client is the SYN sender, or for mid-stream
                // captures the side using the higher (ephemeral) port
                let tuple = if flags.syn() && flags.ack() {
                    rev
                } else if opening || *src_port >= *dst_port {
                    fwd
                } else {
                    rev
                };
                let i = conns.len();
                conns.push(Connection {
                    tuple: FiveTuple {
                        client_ip: tuple.0,
                        client_port: tuple.1,
                        server_ip: tuple.2,
                        server_port: tuple.3,
                        protocol: Protocol::Tcp,
                    },
                    first_time: t,
                    client: Direction::default(),
                    server: Direction::default(),
                });
                live.insert(tuple, i);
                live.insert((tuple.2, tuple.3, tuple.0, tuple.1), i);
                i
            }
        };
        let c = &mut conns[idx];
        let from_client = p.src == c.tuple.client_ip && *src_port == c.tuple.client_port;
        let dir = if from_client { &mut c.client } else { &mut c.server };
        dir.add(*seq, flags.syn(), payload, t);
        if flags.fin() || flags.rst() {
            dir.fin_or_rst = true;
        }
    }

    let mut out: Vec<TcpStreamPair> = conns
        .into_iter()
        .map(|c| {
            let (c2s, gap_c) = c.client.assemble();
            let (s2c, gap_s) = c.server.assemble();
            let complete = c.client.syn_seen && !gap_c && !gap_s;
            TcpStreamPair {
                five_tuple: c.tuple,
                client_to_server: c2s,
                server_to_client: s2c,
                first_packet_time: c.first_time,
                completeness: if complete {
                    Completeness::Complete
                } else {
                    Completeness::Truncated
                },
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.first_packet_time
            .cmp(&b.first_packet_time)
            .then_with(|| a.five_tuple.cmp(&b.five_tuple))
    });
    out
}

/// Decoded capture: TCP streams plus counters for everything else.
#[derive(Debug, Clone)]
pub struct DecodedCapture {
    pub streams: Vec<TcpStreamPair>,
    pub stats: CaptureStats,
    pub packets: Vec<Packet>,
}

pub fn decode_capture(bytes: &[u8]) -> Result<DecodedCapture, CaptureError> {
    let frames = read_frames(bytes)?;
    let base_time_us = frames.iter().map(|f| f.ts_us).min().unwrap_or(0);
    let mut stats = CaptureStats {
        frames: frames.len(),
        base_time_us,
        ..Default::default()
    };
    let mut packets = Vec::with_capacity(frames.len());
    let mut udp = std::collections::HashSet::new();
    for f in &frames {
        match decode_frame(f) {
            Some(p) => {
                match &p.transport {
                    Transport::Udp { src_port, dst_port, .. } => {
                        let a = (p.src, *src_port);
                        let b = (p.dst, *dst_port);
                        udp.insert(if a <= b { (a, b) } else { (b, a) });
                    }
                    Transport::Other(_) => stats.other_ip_packets += 1,
                    Transport::Tcp { .. } => {}
                }
                packets.push(p);
            }
            None => stats.undecodable_frames += 1,
        }
    }
    stats.udp_flows = udp.len();
    let streams = reassemble_packets(&packets, base_time_us);
    Ok(DecodedCapture {
        streams,
        stats,
        packets,
    })
}

/// Reassembles all TCP streams of a pcap or pcapng document.
pub fn reassemble_streams(pcap: &[u8]) -> Result<Vec<TcpStreamPair>, CaptureError> {
    Ok(decode_capture(pcap)?.streams)
}
