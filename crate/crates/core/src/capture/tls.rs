//! Passive TLS 1.2 / 1.3 record decryption with key-log secrets.
//!
//! Supported: TLS 1.2 AEAD suites (AES-GCM, ChaCha20-Poly1305) and all three
//! TLS 1.3 suites. Any AEAD failure aborts the flow; nothing is emitted from a
//! record that did not authenticate.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Aes256Gcm};
use chacha20poly1305::ChaCha20Poly1305;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Sha256, Sha384};

use super::keylog::{SecretLabel, SecretStore};
use super::reassembly::DirectionBytes;

const CT_CCS: u8 = 20;
const CT_ALERT: u8 = 21;
const CT_HANDSHAKE: u8 = 22;
const CT_APPDATA: u8 = 23;

const HS_CLIENT_HELLO: u8 = 1;
const HS_SERVER_HELLO: u8 = 2;
const HS_ENCRYPTED_EXTENSIONS: u8 = 8;
const HS_FINISHED: u8 = 20;
const HS_KEY_UPDATE: u8 = 24;

/// ServerHello.random value that marks a HelloRetryRequest.
const HRR_RANDOM: [u8; 32] = [
    0xcf, 0x21, 0xad, 0x74, 0xe5, 0x9a, 0x61, 0x11, 0xbe, 0x1d, 0x8c, 0x02, 0x1e, 0x65, 0xb8, 0x91, 0xc2, 0xa2, 0x11,
    0x16, 0x7a, 0xbb, 0x8c, 0x5e, 0x07, 0x9e, 0x09, 0xe2, 0xc8, 0xa8, 0x33, 0x9c,
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TlsError {
    #[error("stream does not start with a ClientHello")]
    NoClientHello,
    #[error("no ServerHello in server stream")]
    NoServerHello,
    #[error("unsupported TLS version 0x{0:04x}")]
    UnsupportedVersion(u16),
    #[error("unsupported cipher suite 0x{0:04x}")]
    UnsupportedCipherSuite(u16),
    #[error("no key log secret for this session")]
    MissingSecret,
    #[error("record authentication failed ({direction}, record {record})")]
    AuthenticationFailed { direction: &'static str, record: usize },
    #[error("malformed TLS data: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlsVersion {
    #[serde(rename = "TLS 1.2")]
    Tls12,
    #[serde(rename = "TLS 1.3")]
    Tls13,
}

impl TlsVersion {
    pub fn as_str(self) -> &'static str {
        match self {
            TlsVersion::Tls12 => "TLS 1.2",
            TlsVersion::Tls13 => "TLS 1.3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AeadKind {
    Aes128Gcm,
    Aes256Gcm,
    ChaCha20,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HashKind {
    Sha256,
    Sha384,
}

#[derive(Debug, Clone, Copy)]
struct Suite {
    id: u16,
    name: &'static str,
    tls13: bool,
    aead: AeadKind,
    hash: HashKind,
}

const SUITES: &[Suite] = &[
    Suite { id: 0x1301, name: "TLS_AES_128_GCM_SHA256", tls13: true, aead: AeadKind::Aes128Gcm, hash: HashKind::Sha256 },
    Suite { id: 0x1302, name: "TLS_AES_256_GCM_SHA384", tls13: true, aead: AeadKind::Aes256Gcm, hash: HashKind::Sha384 },
    Suite { id: 0x1303, name: "TLS_CHACHA20_POLY1305_SHA256", tls13: true, aead: AeadKind::ChaCha20, hash: HashKind::Sha256 },
    Suite { id: 0x009c, name: "TLS_RSA_WITH_AES_128_GCM_SHA256", tls13: false, aead: AeadKind::Aes128Gcm, hash: HashKind::Sha256 },
    Suite { id: 0x009d, name: "TLS_RSA_WITH_AES_256_GCM_SHA384", tls13: false, aead: AeadKind::Aes256Gcm, hash: HashKind::Sha384 },
    Suite { id: 0x009e, name: "TLS_DHE_RSA_WITH_AES_128_GCM_SHA256", tls13: false, aead: AeadKind::Aes128Gcm, hash: HashKind::Sha256 },
    Suite { id: 0x009f, name: "TLS_DHE_RSA_WITH_AES_256_GCM_SHA384", tls13: false, aead: AeadKind::Aes256Gcm, hash: HashKind::Sha384 },
    Suite { id: 0xc02b, name: "TLS_ECDHE_ECDSA_WITH_AES_128_GCM_SHA256", tls13: false, aead: AeadKind::Aes128Gcm, hash: HashKind::Sha256 },
    Suite { id: 0xc02c, name: "TLS_ECDHE_ECDSA_WITH_AES_256_GCM_SHA384", tls13: false, aead: AeadKind::Aes256Gcm, hash: HashKind::Sha384 },
    Suite { id: 0xc02f, name: "TLS_ECDHE_RSA_WITH_AES_128_GCM_SHA256", tls13: false, aead: AeadKind::Aes128Gcm, hash: HashKind::Sha256 },
    Suite { id: 0xc030, name: "TLS_ECDHE_RSA_WITH_AES_256_GCM_SHA384", tls13: false, aead: AeadKind::Aes256Gcm, hash: HashKind::Sha384 },
    Suite { id: 0xcca8, name: "TLS_ECDHE_RSA_WITH_CHACHA20_POLY1305_SHA256", tls13: false, aead: AeadKind::ChaCha20, hash: HashKind::Sha256 },
    Suite { id: 0xcca9, name: "TLS_ECDHE_ECDSA_WITH_CHACHA20_POLY1305_SHA256", tls13: false, aead: AeadKind::ChaCha20, hash: HashKind::Sha256 },
];

fn suite_by_id(id: u16) -> Option<&'static Suite> {
    SUITES.iter().find(|s| s.id == id)
}

/// Name of a supported cipher suite, if any.
pub fn cipher_suite_name(id: u16) -> Option<&'static str> {
    suite_by_id(id).map(|s| s.name)
}

impl AeadKind {
    fn key_len(self) -> usize {
        match self {
            AeadKind::Aes128Gcm => 16,
            AeadKind::Aes256Gcm | AeadKind::ChaCha20 => 32,
        }
    }
}

enum Cipher {
    Aes128(Box<Aes128Gcm>),
    Aes256(Box<Aes256Gcm>),
    ChaCha(Box<ChaCha20Poly1305>),
}

impl Cipher {
    fn new(kind: AeadKind, key: &[u8]) -> Cipher {
        match kind {
            AeadKind::Aes128Gcm => Cipher::Aes128(Box::new(Aes128Gcm::new_from_slice(key).expect("16-byte key"))),
            AeadKind::Aes256Gcm => Cipher::Aes256(Box::new(Aes256Gcm::new_from_slice(key).expect("32-byte key"))),
            AeadKind::ChaCha20 => Cipher::ChaCha(Box::new(ChaCha20Poly1305::new_from_slice(key).expect("32-byte key"))),
        }
    }

    fn open(&self, nonce: &[u8; 12], aad: &[u8], ct: &[u8]) -> Option<Vec<u8>> {
        let payload = Payload { msg: ct, aad };
        match self {
            Cipher::Aes128(c) => c.decrypt(nonce.into(), payload).ok(),
            Cipher::Aes256(c) => c.decrypt(nonce.into(), payload).ok(),
            Cipher::ChaCha(c) => c.decrypt(nonce.into(), payload).ok(),
        }
    }
}

// ---- key derivation ----

fn p_hash<M: Mac + KeyInit>(secret: &[u8], seed: &[u8], out_len: usize) -> Vec<u8> {
    let hmac = |parts: &[&[u8]]| {
        let mut m = <M as Mac>::new_from_slice(secret).expect("hmac accepts any key length");
        for p in parts {
            m.update(p);
        }
        m.finalize().into_bytes().to_vec()
    };
    let mut out = Vec::with_capacity(out_len);
    let mut a = hmac(&[seed]);
    while out.len() < out_len {
        out.extend(hmac(&[&a, seed]));
        a = hmac(&[&a]);
    }
    out.truncate(out_len);
    out
}

/// TLS 1.2 PRF.
pub fn tls12_prf(hash_sha384: bool, secret: &[u8], label: &[u8], seed: &[u8], out_len: usize) -> Vec<u8> {
    let mut full = label.to_vec();
    full.extend_from_slice(seed);
    if hash_sha384 {
        p_hash::<Hmac<Sha384>>(secret, &full, out_len)
    } else {
        p_hash::<Hmac<Sha256>>(secret, &full, out_len)
    }
}

/// TLS 1.3 HKDF-Expand-Label with an empty context.
pub fn hkdf_expand_label(hash_sha384: bool, secret: &[u8], label: &str, out_len: usize) -> Option<Vec<u8>> {
    let full = format!("tls13 {label}");
    let mut info = Vec::with_capacity(4 + full.len());
    info.extend((out_len as u16).to_be_bytes());
    info.push(full.len() as u8);
    info.extend(full.as_bytes());
    info.push(0);
    let mut out = vec![0u8; out_len];
    if hash_sha384 {
        Hkdf::<Sha384>::from_prk(secret).ok()?.expand(&info, &mut out).ok()?;
    } else {
        Hkdf::<Sha256>::from_prk(secret).ok()?.expand(&info, &mut out).ok()?;
    }
    Some(out)
}

// ---- records and handshake messages ----

#[derive(Debug, Clone)]
struct Record<'a> {
    offset: usize,
    content_type: u8,
    version: u16,
    header: &'a [u8],
    fragment: &'a [u8],
}

/// Splits a byte stream into TLS records. The flag reports a trailing partial record.
fn records(data: &[u8]) -> Result<(Vec<Record<'_>>, bool), TlsError> {
    let mut out = Vec::new();
    let mut off = 0;
    while off + 5 <= data.len() {
        let ct = data[off];
        if !(20..=24).contains(&ct) || data[off + 1] != 3 {
            return Err(TlsError::Malformed(format!("bad record header at offset {off}")));
        }
        let len = usize::from(u16::from_be_bytes([data[off + 3], data[off + 4]]));
        if len > (1 << 14) + 2048 {
            return Err(TlsError::Malformed(format!("oversized record at offset {off}")));
        }
        if off + 5 + len > data.len() {
            return Ok((out, true));
        }
        out.push(Record {
            offset: off,
            content_type: ct,
            version: u16::from_be_bytes([data[off + 1], data[off + 2]]),
            header: &data[off..off + 5],
            fragment: &data[off + 5..off + 5 + len],
        });
        off += 5 + len;
    }
    Ok((out, off != data.len()))
}

/// Accumulates handshake bytes and yields complete messages.
#[derive(Default)]
struct HandshakeBuf {
    buf: Vec<u8>,
}

impl HandshakeBuf {
    fn push(&mut self, bytes: &[u8]) -> Vec<(u8, Vec<u8>)> {
        self.buf.extend_from_slice(bytes);
        let mut msgs = Vec::new();
        loop {
            if self.buf.len() < 4 {
                break;
            }
            let len = (usize::from(self.buf[1]) << 16) | (usize::from(self.buf[2]) << 8) | usize::from(self.buf[3]);
            if self.buf.len() < 4 + len {
                break;
            }
            let body = self.buf[4..4 + len].to_vec();
            msgs.push((self.buf[0], body));
            self.buf.drain(..4 + len);
        }
        msgs
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(b: &'a [u8]) -> Self {
        Reader { b, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u16(&mut self) -> Option<u16> {
        let s = self.take(2)?;
        Some(u16::from_be_bytes([s[0], s[1]]))
    }
    fn vec8(&mut self) -> Option<&'a [u8]> {
        let n = usize::from(self.u8()?);
        self.take(n)
    }
    fn vec16(&mut self) -> Option<&'a [u8]> {
        let n = usize::from(self.u16()?);
        self.take(n)
    }
}

fn extensions(data: &[u8]) -> Option<Vec<(u16, &[u8])>> {
    let mut r = Reader::new(data);
    let mut out = Vec::new();
    while r.pos < data.len() {
        let t = r.u16()?;
        out.push((t, r.vec16()?));
    }
    Some(out)
}

fn parse_alpn(ext: &[u8]) -> Option<Vec<String>> {
    let mut r = Reader::new(ext);
    let list = r.vec16()?;
    let mut lr = Reader::new(list);
    let mut out = Vec::new();
    while lr.pos < list.len() {
        out.push(String::from_utf8_lossy(lr.vec8()?).into_owned());
    }
    Some(out)
}

fn parse_sni(ext: &[u8]) -> Option<String> {
    let mut r = Reader::new(ext);
    let list = r.vec16()?;
    let mut lr = Reader::new(list);
    while lr.pos < list.len() {
        let kind = lr.u8()?;
        let name = lr.vec16()?;
        if kind == 0 {
            return std::str::from_utf8(name).ok().map(|s| s.to_ascii_lowercase());
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub random: [u8; 32],
    pub sni: Option<String>,
    pub alpn: Vec<String>,
    pub cipher_suites: Vec<u16>,
}

fn parse_client_hello(body: &[u8]) -> Option<ClientHello> {
    let mut r = Reader::new(body);
    r.u16()?;
    let random: [u8; 32] = r.take(32)?.try_into().ok()?;
    r.vec8()?;
    let suites = r.vec16()?;
    r.vec8()?;
    let mut hello = ClientHello {
        random,
        sni: None,
        alpn: Vec::new(),
        cipher_suites: suites.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
    };
    if r.pos < body.len() {
        for (t, data) in extensions(r.vec16()?)? {
            match t {
                0 => hello.sni = parse_sni(data),
                16 => hello.alpn = parse_alpn(data).unwrap_or_default(),
                _ => {}
            }
        }
    }
    Some(hello)
}

#[derive(Debug, Clone)]
struct ServerHello {
    random: [u8; 32],
    cipher_suite: u16,
    version: u16,
    alpn: Option<String>,
}

fn parse_server_hello(body: &[u8]) -> Option<ServerHello> {
    let mut r = Reader::new(body);
    let legacy = r.u16()?;
    let random: [u8; 32] = r.take(32)?.try_into().ok()?;
    r.vec8()?;
    let cipher_suite = r.u16()?;
    r.u8()?;
    let mut hello = ServerHello {
        random,
        cipher_suite,
        version: legacy,
        alpn: None,
    };
    if r.pos < body.len() {
        for (t, data) in extensions(r.vec16()?)? {
            match t {
                43 if data.len() == 2 => hello.version = u16::from_be_bytes([data[0], data[1]]),
                16 => hello.alpn = parse_alpn(data).and_then(|v| v.into_iter().next()),
                _ => {}
            }
        }
    }
    Some(hello)
}

/// Reads the ClientHello at the start of a client stream without any keys.
pub fn peek_client_hello(client: &[u8]) -> Option<ClientHello> {
    let (recs, _) = records(client).ok()?;
    let mut hs = HandshakeBuf::default();
    for rec in recs.iter().take_while(|r| r.content_type == CT_HANDSHAKE) {
        if let Some((t, body)) = hs.push(rec.fragment).into_iter().next() {
            return if t == HS_CLIENT_HELLO { parse_client_hello(&body) } else { None };
        }
    }
    None
}

/// Whether the stream starts like a TLS handshake record.
pub fn looks_like_tls(client: &[u8]) -> bool {
    client.len() >= 6 && client[0] == CT_HANDSHAKE && client[1] == 3 && client[5] == HS_CLIENT_HELLO
}

// ---- decryption ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsSessionInfo {
    pub version: TlsVersion,
    pub cipher_suite: String,
    pub sni: Option<String>,
    pub alpn: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecryptedStream {
    pub info: TlsSessionInfo,
    pub client: DirectionBytes,
    pub server: DirectionBytes,
    /// A direction ended mid-record.
    pub truncated: bool,
}

struct Output<'a> {
    source: &'a DirectionBytes,
    out: DirectionBytes,
}

impl<'a> Output<'a> {
    fn new(source: &'a DirectionBytes) -> Self {
        Output {
            source,
            out: DirectionBytes::default(),
        }
    }

    fn append(&mut self, tcp_offset: usize, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        if let Some(t) = self.source.time_at(tcp_offset) {
            if self.out.marks.last().map(|m| m.1) != Some(t) {
                self.out.marks.push((self.out.data.len(), t));
            }
        }
        self.out.data.extend_from_slice(bytes);
    }
}

fn xor_nonce(iv: &[u8], seq: u64) -> [u8; 12] {
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&iv[..12]);
    for (n, s) in nonce[4..].iter_mut().zip(seq.to_be_bytes()) {
        *n ^= s;
    }
    nonce
}

struct Tls12Keys {
    suite: u16,
    cipher: Cipher,
    iv: Vec<u8>,
    aead: AeadKind,
}

fn decrypt_tls12_direction(
    source: &DirectionBytes,
    keys: Tls12Keys,
    direction: &'static str,
) -> Result<(DirectionBytes, bool), TlsError> {
    let (recs, partial) = records(&source.data)?;
    let mut out = Output::new(source);
    let mut encrypted = false;
    let mut seq: u64 = 0;
    let mut hs = HandshakeBuf::default();
    let mut finished_seen = false;
    for (idx, rec) in recs.iter().enumerate() {
        if !encrypted {
            match rec.content_type {
                CT_CCS => encrypted = true,
                CT_ALERT => break,
                CT_APPDATA => return Err(TlsError::Malformed("application data before ChangeCipherSpec".into())),
                _ => {}
            }
            continue;
        }
        let (nonce, ct) = match keys.aead {
            AeadKind::ChaCha20 => (xor_nonce(&keys.iv, seq), rec.fragment),
            _ => {
                if rec.fragment.len() < 8 + 16 {
                    return Err(TlsError::AuthenticationFailed { direction, record: idx });
                }
                let mut n = [0u8; 12];
                n[..4].copy_from_slice(&keys.iv[..4]);
                n[4..].copy_from_slice(&rec.fragment[..8]);
                (n, &rec.fragment[8..])
            }
        };
        let plain_len = ct.len().saturating_sub(16);
        let mut aad = Vec::with_capacity(13);
        aad.extend(seq.to_be_bytes());
        aad.push(rec.content_type);
        aad.extend(rec.version.to_be_bytes());
        aad.extend((plain_len as u16).to_be_bytes());
        let plain = keys
            .cipher
            .open(&nonce, &aad, ct)
            .ok_or(TlsError::AuthenticationFailed { direction, record: idx })?;
        seq += 1;
        match rec.content_type {
            CT_APPDATA => out.append(rec.offset, &plain),
            CT_HANDSHAKE => {
                for (t, _) in hs.push(&plain) {
                    match t {
                        HS_FINISHED if !finished_seen => finished_seen = true,
                        // HelloRequest or a fresh ClientHello under encryption:
                        // renegotiation is outside the supported scope
                        0 | HS_CLIENT_HELLO | HS_SERVER_HELLO => return Err(TlsError::UnsupportedCipherSuite(keys.suite)),
                        _ => {}
                    }
                }
            }
            CT_ALERT => break,
            _ => {}
        }
    }
    Ok((out.out, partial))
}

struct Tls13Dir<'a> {
    suite: &'static Suite,
    handshake_secret: &'a [u8],
    app_secret: Vec<u8>,
}

fn traffic_keys(suite: &Suite, secret: &[u8]) -> Result<(Cipher, Vec<u8>), TlsError> {
    let sha384 = suite.hash == HashKind::Sha384;
    let bad = || TlsError::Malformed("secret length does not match the cipher suite hash".into());
    let key = hkdf_expand_label(sha384, secret, "key", suite.aead.key_len()).ok_or_else(bad)?;
    let iv = hkdf_expand_label(sha384, secret, "iv", 12).ok_or_else(bad)?;
    Ok((Cipher::new(suite.aead, &key), iv))
}

fn decrypt_tls13_direction(
    source: &DirectionBytes,
    dir: Tls13Dir<'_>,
    direction: &'static str,
    alpn: &mut Option<String>,
) -> Result<(DirectionBytes, bool), TlsError> {
    let (recs, partial) = records(&source.data)?;
    let mut out = Output::new(source);
    let (mut cipher, mut iv) = traffic_keys(dir.suite, dir.handshake_secret)?;
    let mut current_secret = dir.handshake_secret.to_vec();
    let mut in_application = false;
    let mut seq: u64 = 0;
    let mut hs = HandshakeBuf::default();
    let sha384 = dir.suite.hash == HashKind::Sha384;
    for (idx, rec) in recs.iter().enumerate() {
        match rec.content_type {
            CT_CCS | CT_HANDSHAKE => continue,
            CT_ALERT => break,
            CT_APPDATA => {}
            _ => return Err(TlsError::Malformed(format!("unexpected record type {}", rec.content_type))),
        }
        let nonce = xor_nonce(&iv, seq);
        let mut inner = cipher
            .open(&nonce, rec.header, rec.fragment)
            .ok_or(TlsError::AuthenticationFailed { direction, record: idx })?;
        seq += 1;
        while inner.last() == Some(&0) {
            inner.pop();
        }
        let inner_type = inner
            .pop()
            .ok_or_else(|| TlsError::Malformed("inner plaintext without content type".into()))?;
        match inner_type {
            CT_APPDATA => {
                if !in_application {
                    return Err(TlsError::Malformed("application data before Finished".into()));
                }
                out.append(rec.offset, &inner);
            }
            CT_HANDSHAKE => {
                let mut rekey = None;
                for (t, body) in hs.push(&inner) {
                    match t {
                        HS_ENCRYPTED_EXTENSIONS if !in_application => {
                            let mut r = Reader::new(&body);
                            if let Some(exts) = r.vec16().and_then(extensions) {
                                for (et, data) in exts {
                                    if et == 16 {
                                        *alpn = parse_alpn(data).and_then(|v| v.into_iter().next());
                                    }
                                }
                            }
                        }
                        HS_FINISHED if !in_application => rekey = Some(dir.app_secret.clone()),
                        HS_KEY_UPDATE if in_application => {
                            let next = hkdf_expand_label(sha384, &current_secret, "traffic upd", current_secret.len())
                                .ok_or_else(|| TlsError::Malformed("key update derivation".into()))?;
                            rekey = Some(next);
                        }
                        // NewSessionTicket, Certificate, CertificateVerify, ...
                        _ => {}
                    }
                }
                if let Some(secret) = rekey {
                    (cipher, iv) = traffic_keys(dir.suite, &secret)?;
                    current_secret = secret;
                    in_application = true;
                    seq = 0;
                }
            }
            CT_ALERT => break,
            other => return Err(TlsError::Malformed(format!("unexpected inner content type {other}"))),
        }
    }
    Ok((out.out, partial))
}

fn server_hello(server: &[u8]) -> Result<ServerHello, TlsError> {
    let (recs, _) = records(server)?;
    let mut hs = HandshakeBuf::default();
    let mut last = None;
    for rec in &recs {
        match rec.content_type {
            CT_HANDSHAKE => {
                for (t, body) in hs.push(rec.fragment) {
                    if t == HS_SERVER_HELLO {
                        let sh = parse_server_hello(&body).ok_or_else(|| TlsError::Malformed("ServerHello".into()))?;
                        let retry = sh.random == HRR_RANDOM;
                        last = Some(sh);
                        if !retry {
                            return Ok(last.unwrap());
                        }
                    }
                }
            }
            CT_CCS => {}
            // first encrypted record ends the cleartext handshake
            _ => break,
        }
    }
    last.filter(|sh| sh.random != HRR_RANDOM).ok_or(TlsError::NoServerHello)
}

/// Decrypts both directions of a TLS connection.
pub fn decrypt_tls(
    client: &DirectionBytes,
    server: &DirectionBytes,
    secrets: &SecretStore,
) -> Result<DecryptedStream, TlsError> {
    let ch = peek_client_hello(&client.data).ok_or(TlsError::NoClientHello)?;
    let sh = server_hello(&server.data)?;
    let suite = suite_by_id(sh.cipher_suite).ok_or(TlsError::UnsupportedCipherSuite(sh.cipher_suite))?;
    match sh.version {
        0x0304 => {
            if !suite.tls13 {
                return Err(TlsError::UnsupportedCipherSuite(suite.id));
            }
            let get = |label| secrets.tls13_secret(&ch.random, label).ok_or(TlsError::MissingSecret);
            let (chs, shs, cts, sts) = (
                get(SecretLabel::ClientHandshake)?,
                get(SecretLabel::ServerHandshake)?,
                get(SecretLabel::ClientTraffic0)?,
                get(SecretLabel::ServerTraffic0)?,
            );
            let mut alpn = sh.alpn.clone();
            let (s_out, s_partial) = decrypt_tls13_direction(
                server,
                Tls13Dir { suite, handshake_secret: shs, app_secret: sts.to_vec() },
                "server",
                &mut alpn,
            )?;
            let mut unused = None;
            let (c_out, c_partial) = decrypt_tls13_direction(
                client,
                Tls13Dir { suite, handshake_secret: chs, app_secret: cts.to_vec() },
                "client",
                &mut unused,
            )?;
            Ok(DecryptedStream {
                info: TlsSessionInfo {
                    version: TlsVersion::Tls13,
                    cipher_suite: suite.name.to_string(),
                    sni: ch.sni,
                    alpn,
                },
                client: c_out,
                server: s_out,
                truncated: s_partial || c_partial,
            })
        }
        0x0303 => {
            if suite.tls13 {
                return Err(TlsError::UnsupportedCipherSuite(suite.id));
            }
            let master = secrets.master_secret(&ch.random).ok_or(TlsError::MissingSecret)?;
            let key_len = suite.aead.key_len();
            let iv_len = if suite.aead == AeadKind::ChaCha20 { 12 } else { 4 };
            let mut seed = sh.random.to_vec();
            seed.extend_from_slice(&ch.random);
            let block = tls12_prf(
                suite.hash == HashKind::Sha384,
                master,
                b"key expansion",
                &seed,
                2 * key_len + 2 * iv_len,
            );
            let (ck, rest) = block.split_at(key_len);
            let (sk, rest) = rest.split_at(key_len);
            let (civ, siv) = rest.split_at(iv_len);
            let (c_out, c_partial) = decrypt_tls12_direction(
                client,
                Tls12Keys { suite: suite.id, cipher: Cipher::new(suite.aead, ck), iv: civ.to_vec(), aead: suite.aead },
                "client",
            )?;
            let (s_out, s_partial) = decrypt_tls12_direction(
                server,
                Tls12Keys { suite: suite.id, cipher: Cipher::new(suite.aead, sk), iv: siv.to_vec(), aead: suite.aead },
                "server",
            )?;
            Ok(DecryptedStream {
                info: TlsSessionInfo {
                    version: TlsVersion::Tls12,
                    cipher_suite: suite.name.to_string(),
                    sni: ch.sni,
                    alpn: sh.alpn,
                },
                client: c_out,
                server: s_out,
                truncated: c_partial || s_partial,
            })
        }
        v => Err(TlsError::UnsupportedVersion(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tls12_prf_vector() {
        // widely published P_SHA256 test vector
        let secret = hex::decode("9bbe436ba940f017b17652849a71db35").unwrap();
        let seed = hex::decode("a0ba9f936cda311827a6f796ffd5198c").unwrap();
        let out = tls12_prf(false, &secret, b"test label", &seed, 100);
        assert_eq!(
            hex::encode(&out[..32]),
            "e3f229ba727be17b8d122620557cd453c2aab21d07c3d495329b52d4e61edb5a"
        );
    }

    #[test]
    fn hkdf_label_rfc8448_server_handshake_key() {
        // RFC 8448 simple 1-RTT handshake, server handshake traffic secret
        let secret = hex::decode("b67b7d690cc16c4e75e54213cb2d37b4e9c912bcded9105d42befd59d391ad38").unwrap();
        let key = hkdf_expand_label(false, &secret, "key", 16).unwrap();
        let iv = hkdf_expand_label(false, &secret, "iv", 12).unwrap();
        assert_eq!(hex::encode(key), "3fce516009c21727d0f2e4e86ee403bc");
        assert_eq!(hex::encode(iv), "5d313eb2671276ee13000b30");
    }

    #[test]
    fn records_reject_garbage() {
        assert!(records(b"GET / HTTP/1.1\r\n").is_err());
        let (r, partial) = records(&[23, 3, 3, 0, 10, 1, 2]).unwrap();
        assert!(r.is_empty() && partial);
    }

    #[test]
    fn non_tls_stream_has_no_client_hello() {
        let c = DirectionBytes { data: b"GET / HTTP/1.1\r\n\r\n".to_vec(), marks: vec![] };
        let err = decrypt_tls(&c, &DirectionBytes::default(), &SecretStore::default()).unwrap_err();
        assert_eq!(err, TlsError::NoClientHello);
    }

    fn fixture(name: &str) -> Vec<u8> {
        std::fs::read(format!("{}/fixtures/tls/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    fn open_fixture(stem: &str) -> (crate::capture::reassembly::TcpStreamPair, SecretStore, serde_json::Value) {
        let expected: serde_json::Value = serde_json::from_slice(&fixture(&format!("{stem}.expected.json"))).unwrap();
        let streams = crate::capture::reassembly::reassemble_streams(&fixture(expected["capture"].as_str().unwrap())).unwrap();
        let (store, _) = crate::capture::keylog::load_keylog(&String::from_utf8(fixture(&format!("{stem}.keylog"))).unwrap());
        (streams.into_iter().next().unwrap(), store, expected)
    }

    #[test]
    fn fixtures_decrypt_to_endpoint_plaintext() {
        use base64::Engine;
        let b64 = base64::engine::general_purpose::STANDARD;
        for stem in ["tls12_aes128gcm", "tls12_aes256gcm", "tls13_aes256gcm", "tls13_aes128gcm", "tls13_chacha20"] {
            let (stream, store, expected) = open_fixture(stem);
            let d = decrypt_tls(&stream.client_to_server, &stream.server_to_client, &store).unwrap();
            assert_eq!(d.client.data, b64.decode(expected["client_plaintext_b64"].as_str().unwrap()).unwrap(), "{stem}");
            assert_eq!(d.server.data, b64.decode(expected["server_plaintext_b64"].as_str().unwrap()).unwrap(), "{stem}");
            assert_eq!(d.info.sni.as_deref(), expected["sni"].as_str());
            let tls13 = expected["tls_version"] == "TLSv1.3";
            assert_eq!(d.info.version == TlsVersion::Tls13, tls13);
            assert!(!d.truncated);
        }
    }

    #[test]
    fn flipped_ciphertext_byte_fails_closed() {
        let (mut stream, store, _) = open_fixture("tls13_chacha20");
        let n = stream.server_to_client.data.len();
        stream.server_to_client.data[n - 20] ^= 0x01;
        let err = decrypt_tls(&stream.client_to_server, &stream.server_to_client, &store).unwrap_err();
        assert!(matches!(err, TlsError::AuthenticationFailed { direction: "server", .. }));
    }

    #[test]
    fn missing_secret() {
        let (stream, _, _) = open_fixture("tls12_aes128gcm");
        let err = decrypt_tls(&stream.client_to_server, &stream.server_to_client, &SecretStore::default()).unwrap_err();
        assert_eq!(err, TlsError::MissingSecret);
    }

    #[test]
    fn h2_alpn_reported() {
        let streams = crate::capture::reassembly::reassemble_streams(&fixture("tls13_h2.pcap")).unwrap();
        let (store, _) = crate::capture::keylog::load_keylog(&String::from_utf8(fixture("tls13_h2.keylog")).unwrap());
        let d = decrypt_tls(&streams[0].client_to_server, &streams[0].server_to_client, &store).unwrap();
        assert_eq!(d.info.alpn.as_deref(), Some("h2"));
    }
}
