//! Classic pcap and pcapng readers plus Ethernet / raw-IP / SLL decoding
//! down to TCP and UDP.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaptureError {
    #[error("unsupported link layer type {0}")]
    UnsupportedLinkLayer(u32),
    #[error("corrupt capture: {0}")]
    CorruptCapture(String),
}

fn corrupt(msg: impl Into<String>) -> CaptureError {
    CaptureError::CorruptCapture(msg.into())
}

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_RAW_ALT: u32 = 12;
pub const LINKTYPE_LINUX_SLL: u32 = 113;
pub const LINKTYPE_IPV4: u32 = 228;
pub const LINKTYPE_IPV6: u32 = 229;
pub const LINKTYPE_LINUX_SLL2: u32 = 276;

fn supported_link(linktype: u32) -> bool {
    matches!(
        linktype,
        LINKTYPE_ETHERNET
            | LINKTYPE_RAW
            | LINKTYPE_RAW_ALT
            | LINKTYPE_LINUX_SLL
            | LINKTYPE_IPV4
            | LINKTYPE_IPV6
            | LINKTYPE_LINUX_SLL2
    )
}

/// One captured frame with an absolute timestamp in microseconds.
#[derive(Debug, Clone)]
pub struct Frame {
    pub ts_us: i64,
    pub linktype: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            Endian::Little => u16::from_le_bytes(a),
            Endian::Big => u16::from_be_bytes(a),
        }
    }

    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

/// Reads all frames from a classic pcap or pcapng document.
pub fn read_frames(bytes: &[u8]) -> Result<Vec<Frame>, CaptureError> {
    if bytes.len() < 4 {
        return Err(corrupt("file too short for a capture header"));
    }
    match &bytes[0..4] {
        [0x0a, 0x0d, 0x0d, 0x0a] => read_pcapng(bytes),
        _ => read_pcap(bytes),
    }
}

fn read_pcap(bytes: &[u8]) -> Result<Vec<Frame>, CaptureError> {
    if bytes.len() < 24 {
        return Err(corrupt("truncated pcap global header"));
    }
    let magic_le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanos) = match magic_le {
        0xa1b2_c3d4 => (Endian::Little, false),
        0xa1b2_3c4d => (Endian::Little, true),
        0xd4c3_b2a1 => (Endian::Big, false),
        0x4d3c_b2a1 => (Endian::Big, true),
        _ => return Err(corrupt("unknown capture magic")),
    };
    let linktype = endian.u32(&bytes[20..24]) & 0x0fff_ffff;
    if !supported_link(linktype) {
        return Err(CaptureError::UnsupportedLinkLayer(linktype));
    }
    let mut frames = Vec::new();
    let mut off = 24;
    while off < bytes.len() {
        let hdr = bytes
            .get(off..off + 16)
            .ok_or_else(|| corrupt(format!("truncated record header at {off}")))?;
        let sec = endian.u32(&hdr[0..4]) as i64;
        let frac = endian.u32(&hdr[4..8]) as i64;
        let incl = endian.u32(&hdr[8..12]) as usize;
        let data = bytes
            .get(off + 16..off + 16 + incl)
            .ok_or_else(|| corrupt(format!("truncated record body at {off}")))?;
        let ts_us = sec * 1_000_000 + if nanos { frac / 1000 } else { frac };
        frames.push(Frame {
            ts_us,
            linktype,
            data: data.to_vec(),
        });
        off += 16 + incl;
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy)]
struct Interface {
    linktype: u32,
    /// Timestamp units per second.
    units_per_sec: u64,
}

fn parse_tsresol(v: u8) -> Option<u64> {
    let exp = u32::from(v & 0x7f);
    if v & 0x80 != 0 {
        2u64.checked_pow(exp)
    } else {
        10u64.checked_pow(exp)
    }
}

fn read_pcapng(bytes: &[u8]) -> Result<Vec<Frame>, CaptureError> {
    let mut frames = Vec::new();
    let mut interfaces: Vec<Interface> = Vec::new();
    let mut endian = Endian::Little;
    let mut off = 0usize;
    while off < bytes.len() {
        let head = bytes
            .get(off..off + 12)
            .ok_or_else(|| corrupt(format!("truncated block header at {off}")))?;
        let raw_type = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
        if raw_type == 0x0a0d_0d0a {
            endian = match u32::from_le_bytes([head[8], head[9], head[10], head[11]]) {
                0x1a2b_3c4d => Endian::Little,
                0x4d3c_2b1a => Endian::Big,
                _ => return Err(corrupt("bad byte-order magic in section header")),
            };
            interfaces.clear();
        }
        let block_type = endian.u32(&head[0..4]);
        let total = endian.u32(&head[4..8]) as usize;
        if total < 12 || !total.is_multiple_of(4) {
            return Err(corrupt(format!("bad block length {total} at {off}")));
        }
        let block = bytes
            .get(off..off + total)
            .ok_or_else(|| corrupt(format!("truncated block at {off}")))?;
        let body = &block[8..total - 4];
        match block_type {
            0x0000_0001 => {
                if body.len() < 8 {
                    return Err(corrupt("short interface description block"));
                }
                let linktype = u32::from(endian.u16(&body[0..2]));
                let mut units_per_sec = 1_000_000;
                let mut opt = 8;
                while opt + 4 <= body.len() {
                    let code = endian.u16(&body[opt..opt + 2]);
                    let len = endian.u16(&body[opt + 2..opt + 4]) as usize;
                    if code == 0 {
                        break;
                    }
                    if code == 9 && len >= 1 {
                        if let Some(&v) = body.get(opt + 4) {
                            units_per_sec = parse_tsresol(v).ok_or_else(|| corrupt("bad if_tsresol"))?;
                        }
                    }
                    opt += 4 + len.div_ceil(4) * 4;
                }
                interfaces.push(Interface {
                    linktype,
                    units_per_sec,
                });
            }
            0x0000_0006 => {
                if body.len() < 20 {
                    return Err(corrupt("short enhanced packet block"));
                }
                let iface_id = endian.u32(&body[0..4]) as usize;
                let iface = *interfaces
                    .get(iface_id)
                    .ok_or_else(|| corrupt(format!("packet references unknown interface {iface_id}")))?;
                if !supported_link(iface.linktype) {
                    return Err(CaptureError::UnsupportedLinkLayer(iface.linktype));
                }
                let ts = (u64::from(endian.u32(&body[4..8])) << 32) | u64::from(endian.u32(&body[8..12]));
                let caplen = endian.u32(&body[12..16]) as usize;
                let data = body
                    .get(20..20 + caplen)
                    .ok_or_else(|| corrupt("enhanced packet data overruns block"))?;
                let ts_us = (u128::from(ts) * 1_000_000 / u128::from(iface.units_per_sec.max(1))) as i64;
                frames.push(Frame {
                    ts_us,
                    linktype: iface.linktype,
                    data: data.to_vec(),
                });
            }
            0x0000_0003 => {
                // simple packet block: no timestamp, interface 0
                let iface = *interfaces.first().ok_or_else(|| corrupt("simple packet before any interface"))?;
                if !supported_link(iface.linktype) {
                    return Err(CaptureError::UnsupportedLinkLayer(iface.linktype));
                }
                if body.len() < 4 {
                    return Err(corrupt("short simple packet block"));
                }
                let orig = endian.u32(&body[0..4]) as usize;
                let data = &body[4..body.len().min(4 + orig)];
                let ts_us = frames.last().map_or(0, |f| f.ts_us);
                frames.push(Frame {
                    ts_us,
                    linktype: iface.linktype,
                    data: data.to_vec(),
                });
            }
            _ => {}
        }
        off += total;
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub fn fin(self) -> bool {
        self.0 & 0x01 != 0
    }
    pub fn syn(self) -> bool {
        self.0 & 0x02 != 0
    }
    pub fn rst(self) -> bool {
        self.0 & 0x04 != 0
    }
    pub fn ack(self) -> bool {
        self.0 & 0x10 != 0
    }
}

#[derive(Debug, Clone)]
pub enum Transport {
    Tcp {
        src_port: u16,
        dst_port: u16,
        seq: u32,
        flags: TcpFlags,
        payload: Vec<u8>,
    },
    Udp {
        src_port: u16,
        dst_port: u16,
        payload_len: usize,
    },
    Other(u8),
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub ts_us: i64,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub transport: Transport,
}

/// Decodes a frame down to its transport header. Returns `None` for frames
/// that carry no IP payload (ARP, truncated snaplen, non-first fragments).
pub fn decode_frame(frame: &Frame) -> Option<Packet> {
    let ip = match frame.linktype {
        LINKTYPE_ETHERNET => {
            let mut off = 12;
            let mut ethertype = u16::from_be_bytes([*frame.data.get(12)?, *frame.data.get(13)?]);
            while ethertype == 0x8100 || ethertype == 0x88a8 {
                off += 4;
                ethertype = u16::from_be_bytes([*frame.data.get(off)?, *frame.data.get(off + 1)?]);
            }
            match ethertype {
                0x0800 | 0x86dd => frame.data.get(off + 2..)?,
                _ => return None,
            }
        }
        LINKTYPE_LINUX_SLL => frame.data.get(16..)?,
        LINKTYPE_LINUX_SLL2 => frame.data.get(20..)?,
        _ => &frame.data[..],
    };
    decode_ip(ip, frame.ts_us)
}

fn decode_ip(ip: &[u8], ts_us: i64) -> Option<Packet> {
    let version = ip.first()? >> 4;
    let (src, dst, proto, payload) = match version {
        4 => {
            let ihl = usize::from(ip[0] & 0x0f) * 4;
            let total = usize::from(u16::from_be_bytes([*ip.get(2)?, *ip.get(3)?]));
            let frag = u16::from_be_bytes([*ip.get(6)?, *ip.get(7)?]);
            if frag & 0x1fff != 0 || ihl < 20 {
                return None;
            }
            let end = total.min(ip.len());
            let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
            let dst = Ipv4Addr::new(*ip.get(16)?, ip[17], ip[18], ip[19]);
            (IpAddr::V4(src), IpAddr::V4(dst), ip[9], ip.get(ihl..end)?)
        }
        6 => {
            let plen = usize::from(u16::from_be_bytes([*ip.get(4)?, *ip.get(5)?]));
            let mut next = *ip.get(6)?;
            let src: [u8; 16] = ip.get(8..24)?.try_into().ok()?;
            let dst: [u8; 16] = ip.get(24..40)?.try_into().ok()?;
            let mut off = 40;
            let end = (40 + plen).min(ip.len());
            // hop-by-hop, routing, destination options
            while matches!(next, 0 | 43 | 60) {
                next = *ip.get(off)?;
                off += (usize::from(*ip.get(off + 1)?) + 1) * 8;
            }
            if next == 44 {
                return None;
            }
            (
                IpAddr::V6(Ipv6Addr::from(src)),
                IpAddr::V6(Ipv6Addr::from(dst)),
                next,
                ip.get(off..end)?,
            )
        }
        _ => return None,
    };
    let transport = match proto {
        6 => {
            let data_off = usize::from(payload.get(12)? >> 4) * 4;
            if data_off < 20 {
                return None;
            }
            Transport::Tcp {
                src_port: u16::from_be_bytes([payload[0], payload[1]]),
                dst_port: u16::from_be_bytes([payload[2], payload[3]]),
                seq: u32::from_be_bytes([payload[4], payload[5], payload[6], payload[7]]),
                flags: TcpFlags(*payload.get(13)?),
                payload: payload.get(data_off..)?.to_vec(),
            }
        }
        17 => Transport::Udp {
            src_port: u16::from_be_bytes([*payload.first()?, *payload.get(1)?]),
            dst_port: u16::from_be_bytes([*payload.get(2)?, *payload.get(3)?]),
            payload_len: payload.len().saturating_sub(8),
        },
        other => Transport::Other(other),
    };
    Some(Packet {
        ts_us,
        src,
        dst,
        transport,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(path: &str) -> Vec<u8> {
        std::fs::read(format!("{}/fixtures/{path}", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    #[test]
    fn classic_and_ng_agree_on_shape() {
        let classic = read_frames(&fixture("tls/tls13_aes256gcm.pcap")).unwrap();
        let ng = read_frames(&fixture("tls/tls13_chacha20.pcapng")).unwrap();
        assert!(!classic.is_empty() && !ng.is_empty());
        for f in classic.iter().chain(&ng) {
            let p = decode_frame(f).expect("tcp/ip frame");
            assert!(matches!(p.transport, Transport::Tcp { .. }));
        }
        assert!(ng.windows(2).all(|w| w[0].ts_us <= w[1].ts_us));
    }

    #[test]
    fn raw_ip_link_type() {
        let frames = read_frames(&fixture("pcap/http_pipelined.pcap")).unwrap();
        assert_eq!(frames[0].linktype, LINKTYPE_RAW);
        assert!(decode_frame(&frames[0]).is_some());
    }

    #[test]
    fn unsupported_link_layer() {
        let mut bytes = fixture("pcap/udp_only.pcap");
        bytes[20..24].copy_from_slice(&105u32.to_le_bytes());
        assert_eq!(read_frames(&bytes).unwrap_err(), CaptureError::UnsupportedLinkLayer(105));
    }

    #[test]
    fn corrupt_inputs() {
        assert!(matches!(read_frames(b"xx"), Err(CaptureError::CorruptCapture(_))));
        assert!(matches!(read_frames(&[0u8; 40]), Err(CaptureError::CorruptCapture(_))));
        let bytes = fixture("pcap/udp_only.pcap");
        assert!(matches!(read_frames(&bytes[..bytes.len() - 3]), Err(CaptureError::CorruptCapture(_))));
        let ng = fixture("tls/tls13_chacha20.pcapng");
        assert!(matches!(read_frames(&ng[..ng.len() - 5]), Err(CaptureError::CorruptCapture(_))));
    }

    #[test]
    fn big_endian_nanosecond_pcap() {
        let mut doc = Vec::new();
        doc.extend(0xa1b2_3c4du32.to_be_bytes());
        doc.extend(2u16.to_be_bytes());
        doc.extend(4u16.to_be_bytes());
        doc.extend([0u8; 8]);
        doc.extend(65535u32.to_be_bytes());
        doc.extend(LINKTYPE_RAW.to_be_bytes());
        let pkt = [0x45u8, 0, 0, 28, 0, 0, 0, 0, 64, 17, 0, 0, 10, 0, 0, 1, 10, 0, 0, 2, 0, 53, 0, 53, 0, 8, 0, 0];
        doc.extend(5u32.to_be_bytes());
        doc.extend(1_500_000u32.to_be_bytes());
        doc.extend((pkt.len() as u32).to_be_bytes());
        doc.extend((pkt.len() as u32).to_be_bytes());
        doc.extend(pkt);
        let frames = read_frames(&doc).unwrap();
        assert_eq!(frames[0].ts_us, 5_001_500);
        let p = decode_frame(&frames[0]).unwrap();
        assert!(matches!(p.transport, Transport::Udp { dst_port: 53, .. }));
    }
}
