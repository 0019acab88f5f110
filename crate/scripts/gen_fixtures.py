#!/usr/bin/env python3
"""Regenerate the binary test fixtures under crates/core/fixtures.

TLS sessions are produced by two in-memory OpenSSL endpoints (Python's ssl
module with MemoryBIO) with key logging enabled. The raw record bytes are then
wrapped into Ethernet/IPv4/TCP frames and written as pcap or pcapng. The
plaintext each endpoint wrote is stored next to the capture as the oracle.

APK fixtures are built with a small binary-XML and dex writer in this file;
the model each manifest was encoded from is stored as the reference dump.

Usage: python3 scripts/gen_fixtures.py [--out crates/core/fixtures] [--demo-expected-only]
"""

import argparse
import base64
import datetime
import gzip
import hashlib
import io
import json
import os
import shutil
import ssl
import struct
import subprocess
import sys
import tempfile
import zipfile
import zlib

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)

AD_ID = "38400000-8cf0-11bd-b23e-10b96e40000d"


# --------------------------------------------------------------------------
# TLS sessions (run in a child process so OPENSSL_CONF can pin suites)
# --------------------------------------------------------------------------

def make_cert(dirpath):
    from cryptography import x509
    from cryptography.x509.oid import NameOID
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec

    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "fixture.test")])
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(1)
        .not_valid_before(datetime.datetime(2020, 1, 1))
        .not_valid_after(datetime.datetime(2040, 1, 1))
        .sign(key, hashes.SHA256())
    )
    cp = os.path.join(dirpath, "cert.pem")
    kp = os.path.join(dirpath, "key.pem")
    with open(cp, "wb") as f:
        f.write(cert.public_bytes(serialization.Encoding.PEM))
    with open(kp, "wb") as f:
        f.write(key.private_bytes(serialization.Encoding.PEM,
                                  serialization.PrivateFormat.PKCS8,
                                  serialization.NoEncryption()))
    return cp, kp


def child_session(params):
    """Runs one TLS session in memory; prints a JSON event log to stdout."""
    tmp = tempfile.mkdtemp()
    cp, kp = make_cert(tmp)
    keylog = os.path.join(tmp, "keylog.txt")
    version = {"1.2": ssl.TLSVersion.TLSv1_2, "1.3": ssl.TLSVersion.TLSv1_3}[params["version"]]

    sctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    sctx.load_cert_chain(cp, kp)
    sctx.maximum_version = version
    sctx.minimum_version = version
    cctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    cctx.check_hostname = False
    cctx.verify_mode = ssl.CERT_NONE
    cctx.keylog_filename = keylog
    cctx.maximum_version = version
    cctx.minimum_version = version
    if params.get("ciphers12"):
        cctx.set_ciphers(params["ciphers12"])
    if params.get("alpn"):
        cctx.set_alpn_protocols(params["alpn"])
        sctx.set_alpn_protocols(params["alpn"])

    c_in, c_out, s_in, s_out = (ssl.MemoryBIO() for _ in range(4))
    client = cctx.wrap_bio(c_in, c_out, server_hostname=params.get("sni"))
    server = sctx.wrap_bio(s_in, s_out, server_side=True)
    events = []

    def pump():
        moved = False
        d = c_out.read()
        if d:
            events.append(["c", d.hex()])
            s_in.write(d)
            moved = True
        d = s_out.read()
        if d:
            events.append(["s", d.hex()])
            c_in.write(d)
            moved = True
        return moved

    done = {"c": False, "s": False}
    for _ in range(20):
        for tag, obj in (("c", client), ("s", server)):
            if done[tag]:
                continue
            try:
                obj.do_handshake()
                done[tag] = True
            except ssl.SSLWantReadError:
                pass
            pump()
        if all(done.values()):
            break
    while pump():
        pass

    def read_exact(obj, n):
        buf = b""
        while len(buf) < n:
            try:
                chunk = obj.read(n - len(buf))
            except ssl.SSLWantReadError:
                if not pump():
                    raise RuntimeError("stalled")
                continue
            buf += chunk
        return buf

    c_plain = b""
    s_plain = b""
    for req_hex, resp_hex in params["exchanges"]:
        req = bytes.fromhex(req_hex)
        resp = bytes.fromhex(resp_hex)
        if req:
            client.write(req)
            c_plain += req
            pump()
            read_exact(server, len(req))
        if resp:
            server.write(resp)
            s_plain += resp
            pump()
            read_exact(client, len(resp))
        pump()

    with open(keylog) as f:
        lines = [l.rstrip("\n") for l in f if l.strip() and not l.startswith("#")]
    out = {
        "events": events,
        "keylog": lines,
        "client_plaintext": c_plain.hex(),
        "server_plaintext": s_plain.hex(),
        "cipher": client.cipher()[0],
        "version": client.version(),
    }
    shutil.rmtree(tmp)
    json.dump(out, sys.stdout)


def run_session(version, exchanges, sni=None, ciphers12=None, suite13=None, alpn=None):
    params = {
        "version": version,
        "exchanges": [[r.hex(), s.hex()] for r, s in exchanges],
        "sni": sni,
        "ciphers12": ciphers12,
        "alpn": alpn,
    }
    env = dict(os.environ)
    conf = None
    if suite13:
        fd, conf = tempfile.mkstemp(suffix=".cnf")
        with os.fdopen(fd, "w") as f:
            f.write("openssl_conf = openssl_init\n[openssl_init]\nssl_conf = ssl_sect\n"
                    "[ssl_sect]\nsystem_default = sd\n[sd]\nCiphersuites = %s\n" % suite13)
        env["OPENSSL_CONF"] = conf
    out = subprocess.run([sys.executable, __file__, "--child", json.dumps(params)],
                         env=env, check=True, capture_output=True)
    if conf:
        os.unlink(conf)
    return json.loads(out.stdout)


# --------------------------------------------------------------------------
# Frame / capture writers
# --------------------------------------------------------------------------

def csum(data):
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def ip4(a):
    return bytes(int(x) for x in a.split("."))


def ipv4_packet(src, dst, proto, payload, ident):
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(payload), ident & 0xFFFF, 0x4000, 64,
                      proto, 0, ip4(src), ip4(dst))
    hdr = hdr[:10] + struct.pack("!H", csum(hdr)) + hdr[12:]
    return hdr + payload


def tcp_segment(src, dst, sport, dport, seq, ack, flags, payload):
    hdr = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4,
                      flags, 65535, 0, 0)
    pseudo = ip4(src) + ip4(dst) + struct.pack("!BBH", 0, 6, len(hdr) + len(payload))
    c = csum(pseudo + hdr + payload)
    return hdr[:16] + struct.pack("!H", c) + hdr[18:] + payload


def udp_datagram(src, dst, sport, dport, payload):
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def ethernet(payload):
    return b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + b"\x08\x00" + payload


FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10


class Capture:
    def __init__(self, start_us, link="ethernet"):
        self.now = start_us
        self.frames = []
        self.link = link
        self.ident = 1

    def tick(self, ms=1):
        self.now += int(ms * 1000)

    def emit_ip(self, ip_packet):
        frame = ethernet(ip_packet) if self.link == "ethernet" else ip_packet
        self.frames.append((self.now, frame))
        self.tick(1)

    def write_pcap(self, path):
        linktype = 1 if self.link == "ethernet" else 101
        with open(path, "wb") as f:
            f.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, linktype))
            for ts, fr in self.frames:
                f.write(struct.pack("<IIII", ts // 1_000_000, ts % 1_000_000, len(fr), len(fr)))
                f.write(fr)

    def write_pcapng(self, path):
        linktype = 1 if self.link == "ethernet" else 101

        def block(btype, body):
            pad = (-len(body)) % 4
            total = 12 + len(body) + pad
            return struct.pack("<II", btype, total) + body + b"\0" * pad + struct.pack("<I", total)

        with open(path, "wb") as f:
            f.write(block(0x0A0D0D0A, struct.pack("<IHHq", 0x1A2B3C4D, 1, 0, -1)))
            # if_tsresol defaults to microseconds
            f.write(block(0x00000001, struct.pack("<HHI", linktype, 0, 65535)))
            for ts, fr in self.frames:
                body = struct.pack("<IIIII", 0, ts >> 32, ts & 0xFFFFFFFF, len(fr), len(fr)) + fr
                f.write(block(0x00000006, body))


class TcpConn:
    def __init__(self, cap, client, server, cport, sport, mss=1200):
        self.cap, self.c, self.s, self.cp, self.sp = cap, client, server, cport, sport
        self.mss = mss
        self.cseq = 1000 + cport * 7
        self.sseq = 50000 + sport * 13
        self.retransmit_once = False

    def _pkt(self, from_client, flags, payload=b"", skip=0):
        if from_client:
            seg = tcp_segment(self.c, self.s, self.cp, self.sp, self.cseq + skip, self.sseq, flags, payload)
            pkt = ipv4_packet(self.c, self.s, 6, seg, self.cap.ident)
        else:
            seg = tcp_segment(self.s, self.c, self.sp, self.cp, self.sseq + skip, self.cseq, flags, payload)
            pkt = ipv4_packet(self.s, self.c, 6, seg, self.cap.ident)
        self.cap.ident += 1
        self.cap.emit_ip(pkt)

    def handshake(self):
        self._pkt(True, SYN)
        self.cseq += 1
        self._pkt(False, SYN | ACK)
        self.sseq += 1
        self._pkt(True, ACK)

    def send(self, from_client, data):
        for i in range(0, len(data), self.mss):
            chunk = data[i:i + self.mss]
            self._pkt(from_client, PSH | ACK, chunk)
            if self.retransmit_once:
                # resend the same segment, then a partial overlap of its tail
                self._pkt(from_client, PSH | ACK, chunk)
                half = len(chunk) // 2
                self._pkt(from_client, PSH | ACK, chunk[half:], skip=half)
                self.retransmit_once = False
            if from_client:
                self.cseq += len(chunk)
            else:
                self.sseq += len(chunk)
            self._pkt(not from_client, ACK)

    def close(self):
        self._pkt(True, FIN | ACK)
        self.cseq += 1
        self._pkt(False, FIN | ACK)
        self.sseq += 1
        self._pkt(True, ACK)


def replay_session(cap, session, client, server, cport, sport, retransmit=False, gap_ms=5):
    conn = TcpConn(cap, client, server, cport, sport)
    conn.handshake()
    conn.retransmit_once = retransmit
    for who, data_hex in session["events"]:
        conn.send(who == "c", bytes.fromhex(data_hex))
        cap.tick(gap_ms)
    conn.close()
    return conn


# --------------------------------------------------------------------------
# HTTP payload helpers
# --------------------------------------------------------------------------

def http_request(method, path, host, headers=(), body=b""):
    lines = ["%s %s HTTP/1.1" % (method, path), "Host: %s" % host]
    lines += ["%s: %s" % h for h in headers]
    if body:
        lines.append("Content-Length: %d" % len(body))
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + body


def http_response(status, reason, headers=(), body=b"", chunked=False):
    lines = ["HTTP/1.1 %d %s" % (status, reason)]
    lines += ["%s: %s" % h for h in headers]
    if chunked:
        lines.append("Transfer-Encoding: chunked")
        parts = []
        step = max(1, len(body) // 3)
        for i in range(0, len(body), step):
            c = body[i:i + step]
            parts.append(b"%x\r\n" % len(c) + c + b"\r\n")
        payload = b"".join(parts) + b"0\r\n\r\n"
    else:
        lines.append("Content-Length: %d" % len(body))
        payload = body
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + payload


def expected_http(exchanges, response_bodies):
    out = []
    for (req, resp), rbody in zip(exchanges, response_bodies):
        head, _, body = req.partition(b"\r\n\r\n")
        rhead = resp.split(b"\r\n", 1)[0]
        out.append({
            "request_line": head.split(b"\r\n", 1)[0].decode(),
            "request_body_b64": base64.b64encode(body).decode(),
            "status_line": rhead.decode(),
            "response_body_b64": base64.b64encode(rbody).decode(),
        })
    return out


# --------------------------------------------------------------------------
# TLS fixtures
# --------------------------------------------------------------------------

def tls_exchanges(host):
    big = json.dumps({"items": [{"id": i, "name": "item-%04d" % i} for i in range(500)]}).encode()
    events = json.dumps({"event": "open", "ts": 1700000000}).encode()
    ex = [
        (http_request("GET", "/v1/config?device=abc&lang=en", host,
                      [("User-Agent", "fixture/1.0"), ("Accept", "application/json")]),
         http_response(200, "OK", [("Content-Type", "application/json")], big)),
        (http_request("POST", "/v1/events", host, [("Content-Type", "application/json")], events),
         http_response(200, "OK", [("Content-Type", "text/plain")], b"accepted", chunked=True)),
    ]
    bodies = [big, b"accepted"]
    return ex, bodies


def gen_tls(out):
    d = os.path.join(out, "tls")
    os.makedirs(d, exist_ok=True)
    variants = [
        # name, version, ciphers12, suite13, format, retransmit, sni
        ("tls12_aes128gcm", "1.2", "ECDHE-ECDSA-AES128-GCM-SHA256", None, "pcap", True, "tls12.fixture.test"),
        ("tls12_aes256gcm", "1.2", "ECDHE-ECDSA-AES256-GCM-SHA384", None, "pcap", False, "tls12b.fixture.test"),
        ("tls13_aes256gcm", "1.3", None, "TLS_AES_256_GCM_SHA384", "pcap", False, "tls13.fixture.test"),
        ("tls13_aes128gcm", "1.3", None, "TLS_AES_128_GCM_SHA256", "pcapng", False, "tls13b.fixture.test"),
        ("tls13_chacha20", "1.3", None, "TLS_CHACHA20_POLY1305_SHA256", "pcapng", True, "tls13c.fixture.test"),
    ]
    index = []
    for i, (name, ver, c12, s13, fmt, retrans, sni) in enumerate(variants):
        ex, bodies = tls_exchanges(sni)
        sess = run_session(ver, ex, sni=sni, ciphers12=c12, suite13=s13)
        cap = Capture(1_700_000_000_000_000 + i * 10_000_000)
        replay_session(cap, sess, "10.0.0.2", "192.0.2.%d" % (10 + i), 40000 + i, 443, retransmit=retrans)
        capname = name + (".pcapng" if fmt == "pcapng" else ".pcap")
        (cap.write_pcapng if fmt == "pcapng" else cap.write_pcap)(os.path.join(d, capname))
        with open(os.path.join(d, name + ".keylog"), "w") as f:
            f.write("\n".join(sess["keylog"]) + "\n")
        expected = {
            "capture": capname,
            "keylog": name + ".keylog",
            "tls_version": sess["version"],
            "cipher": sess["cipher"],
            "sni": sni,
            "server_ip": "192.0.2.%d" % (10 + i),
            "client_plaintext_b64": base64.b64encode(bytes.fromhex(sess["client_plaintext"])).decode(),
            "server_plaintext_b64": base64.b64encode(bytes.fromhex(sess["server_plaintext"])).decode(),
            "http": expected_http(ex, bodies),
        }
        with open(os.path.join(d, name + ".expected.json"), "w") as f:
            json.dump(expected, f, indent=2)
        index.append(name)
        print("tls fixture", name, sess["version"], sess["cipher"])

    # a TLS 1.3 session without SNI and no application data
    sess = run_session("1.3", [], sni=None)
    cap = Capture(1_700_000_100_000_000)
    replay_session(cap, sess, "10.0.0.2", "198.51.100.7", 41000, 443)
    cap.write_pcap(os.path.join(d, "tls13_no_sni.pcap"))
    with open(os.path.join(d, "tls13_no_sni.keylog"), "w") as f:
        f.write("\n".join(sess["keylog"]) + "\n")

    # two connections to the same server and name, no keys supplied
    cap = Capture(1_700_000_200_000_000)
    for port in (41100, 41101):
        sess = run_session("1.3", [(b"GET / HTTP/1.1\r\nHost: dup.fixture.test\r\n\r\n",
                                    b"HTTP/1.1 204 No Content\r\n\r\n")], sni="dup.fixture.test")
        replay_session(cap, sess, "10.0.0.2", "203.0.113.9", port, 443)
    cap.write_pcap(os.path.join(d, "tls13_two_conns.pcap"))

    # h2-negotiated TLS 1.3 session (application data is not HTTP/1)
    sess = run_session("1.3", [(b"PRI * HTTP/2.0\r\n\r\nSM\r\n\r\n", b"\x00\x00\x00\x04\x00\x00\x00\x00\x00")],
                       sni="h2.fixture.test", alpn=["h2"])
    cap = Capture(1_700_000_300_000_000)
    replay_session(cap, sess, "10.0.0.2", "203.0.113.20", 41200, 443)
    cap.write_pcap(os.path.join(d, "tls13_h2.pcap"))
    with open(os.path.join(d, "tls13_h2.keylog"), "w") as f:
        f.write("\n".join(sess["keylog"]) + "\n")


def gen_plain(out):
    d = os.path.join(out, "pcap")
    os.makedirs(d, exist_ok=True)
    # plain HTTP with two pipelined requests on raw-IP link type
    cap = Capture(1_700_000_400_000_000, link="raw")
    conn = TcpConn(cap, "10.0.0.2", "192.0.2.80", 42000, 80)
    conn.handshake()
    reqs = (http_request("GET", "/first?marker=one", "plain.fixture.test")
            + http_request("GET", "/second?marker=two", "plain.fixture.test"))
    conn.send(True, reqs)
    cap.tick(3)
    resps = (http_response(200, "OK", [("Content-Type", "text/plain")], b"first body")
             + http_response(404, "Not Found", [("Content-Type", "text/plain")], b"second body"))
    conn.send(False, resps)
    conn.close()
    cap.write_pcap(os.path.join(d, "http_pipelined.pcap"))

    # same single exchange with and without a retransmitted segment
    for name, retrans in (("http_single.pcap", False), ("http_single_retrans.pcap", True)):
        cap = Capture(1_700_000_500_000_000)
        conn = TcpConn(cap, "10.0.0.2", "192.0.2.81", 42100, 80, mss=100)
        conn.handshake()
        conn.retransmit_once = retrans
        conn.send(True, http_request("POST", "/upload", "single.fixture.test", [], b"x" * 450))
        cap.tick(2)
        conn.retransmit_once = retrans
        conn.send(False, http_response(200, "OK", [], b"ok"))
        conn.close()
        cap.write_pcap(os.path.join(d, name))

    # UDP only
    cap = Capture(1_700_000_600_000_000)
    for i in range(3):
        dns = struct.pack("!HHHHHH", 0x1200 + i, 0x0100, 1, 0, 0, 0) + b"\x07example\x03com\x00\x00\x01\x00\x01"
        cap.emit_ip(ipv4_packet("10.0.0.2", "192.0.2.53", 17, udp_datagram("10.0.0.2", "192.0.2.53", 5353 + i, 53, dns), i))
    cap.write_pcap(os.path.join(d, "udp_only.pcap"))

    # stream whose SYN was not captured
    cap = Capture(1_700_000_700_000_000)
    conn = TcpConn(cap, "10.0.0.2", "192.0.2.82", 42200, 80)
    conn.cseq += 1
    conn.sseq += 1
    conn.send(True, http_request("GET", "/late", "late.fixture.test"))
    conn.send(False, http_response(200, "OK", [], b"late"))
    cap.write_pcap(os.path.join(d, "http_no_syn.pcap"))


# --------------------------------------------------------------------------
# Binary XML (AXML) and dex writers
# --------------------------------------------------------------------------

ANDROID_NS = "http://schemas.android.com/apk/res/android"
ATTR_IDS = {
    "name": 0x01010003,
    "versionCode": 0x0101021B,
    "versionName": 0x0101021C,
    "minSdkVersion": 0x0101020C,
    "targetSdkVersion": 0x01010270,
}
TYPE_STRING, TYPE_INT_DEC, TYPE_INT_BOOLEAN = 0x03, 0x10, 0x12


class StringPool:
    def __init__(self, utf8):
        self.strings = []
        self.utf8 = utf8

    def idx(self, s):
        if s not in self.strings:
            self.strings.append(s)
        return self.strings.index(s)

    def encode(self):
        data = b""
        offsets = []
        for s in self.strings:
            offsets.append(len(data))
            if self.utf8:
                b = s.encode("utf-8")
                n = len(s)
                data += (bytes([n]) if n < 0x80 else struct.pack(">H", n | 0x8000))
                data += (bytes([len(b)]) if len(b) < 0x80 else struct.pack(">H", len(b) | 0x8000))
                data += b + b"\0"
            else:
                b = s.encode("utf-16-le")
                n = len(b) // 2
                data += struct.pack("<H", n) if n < 0x8000 else struct.pack("<HH", (n >> 16) | 0x8000, n & 0xFFFF)
                data += b + b"\0\0"
        data += b"\0" * ((-len(data)) % 4)
        header_size = 28
        strings_start = header_size + 4 * len(self.strings)
        flags = 0x100 if self.utf8 else 0
        body = struct.pack("<IIIII", len(self.strings), 0, flags, strings_start, 0)
        body += b"".join(struct.pack("<I", o) for o in offsets) + data
        return struct.pack("<HHI", 0x0001, header_size, 8 + len(body)) + body


def encode_axml(model, utf8=False, obfuscate_attr_names=False):
    """model: {"package","versionCode","versionName","minSdk","targetSdk","permissions":[...],"split":opt}"""
    pool = StringPool(utf8)
    # attribute names first so the resource map lines up with pool indices
    attr_order = ["name", "versionCode", "versionName", "minSdkVersion", "targetSdkVersion"]
    for a in attr_order:
        pool.idx("" if obfuscate_attr_names and a == "name" else a)
    resmap = struct.pack("<" + "I" * len(attr_order), *[ATTR_IDS[a] for a in attr_order])
    resmap_chunk = struct.pack("<HHI", 0x0180, 8, 8 + len(resmap)) + resmap

    nodes = []
    ns_prefix, ns_uri = pool.idx("android"), pool.idx(ANDROID_NS)

    def attr_name(a):
        return pool.idx("" if obfuscate_attr_names and a == "name" else a) if a in ATTR_IDS else pool.idx(a)

    def attr(ns, name, kind, value):
        ns_idx = ns_uri if ns else 0xFFFFFFFF
        if kind == "str":
            sidx = pool.idx(value)
            return struct.pack("<IIIHBBI", ns_idx, attr_name(name), sidx, 8, 0, TYPE_STRING, sidx)
        if kind == "int":
            return struct.pack("<IIIHBBI", ns_idx, attr_name(name), 0xFFFFFFFF, 8, 0, TYPE_INT_DEC, value)
        if kind == "bool":
            return struct.pack("<IIIHBBI", ns_idx, attr_name(name), 0xFFFFFFFF, 8, 0, TYPE_INT_BOOLEAN,
                               0xFFFFFFFF if value else 0)
        raise ValueError(kind)

    line = [1]

    def start(name, attrs):
        body = struct.pack("<II", line[0], 0xFFFFFFFF)
        body += struct.pack("<IIHHHHHH", 0xFFFFFFFF, pool.idx(name), 20, 20, len(attrs), 0, 0, 0)
        body += b"".join(attrs)
        line[0] += 1
        nodes.append(struct.pack("<HHI", 0x0102, 16, 8 + len(body)) + body)

    def end(name):
        body = struct.pack("<II", line[0], 0xFFFFFFFF) + struct.pack("<II", 0xFFFFFFFF, pool.idx(name))
        nodes.append(struct.pack("<HHI", 0x0103, 16, 8 + len(body)) + body)

    ns_body = struct.pack("<IIII", 1, 0xFFFFFFFF, ns_prefix, ns_uri)
    nodes.append(struct.pack("<HHI", 0x0100, 16, 8 + len(ns_body)) + ns_body)
    mattrs = [attr(True, "versionCode", "int", model["versionCode"]),
              attr(True, "versionName", "str", model["versionName"]),
              attr(False, "package", "str", model["package"])]
    if model.get("split"):
        mattrs.append(attr(False, "split", "str", model["split"]))
    start("manifest", mattrs)
    start("uses-sdk", [attr(True, "minSdkVersion", "int", model["minSdk"]),
                       attr(True, "targetSdkVersion", "int", model["targetSdk"])])
    end("uses-sdk")
    for p in model["permissions"]:
        start("uses-permission", [attr(True, "name", "str", p)])
        end("uses-permission")
    start("application", [attr(True, "name", "str", model["package"] + ".App")])
    start("activity", [attr(True, "name", "str", ".Main"), attr(True, "exported", "bool", True)])
    end("activity")
    end("application")
    end("manifest")
    end_ns = struct.pack("<IIII", line[0], 0xFFFFFFFF, ns_prefix, ns_uri)
    nodes.append(struct.pack("<HHI", 0x0101, 16, 8 + len(end_ns)) + end_ns)

    body = pool.encode() + resmap_chunk + b"".join(nodes)
    return struct.pack("<HHI", 0x0003, 8, 8 + len(body)) + body


def uleb(n):
    out = b""
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out += bytes([b | 0x80])
        else:
            return out + bytes([b])


def mutf8(s):
    out = b""
    for ch in s:
        cp = ord(ch)
        if cp == 0:
            out += b"\xc0\x80"
        elif cp < 0x80:
            out += bytes([cp])
        elif cp < 0x800:
            out += bytes([0xC0 | cp >> 6, 0x80 | cp & 0x3F])
        elif cp < 0x10000:
            out += bytes([0xE0 | cp >> 12, 0x80 | (cp >> 6) & 0x3F, 0x80 | cp & 0x3F])
        else:
            cp -= 0x10000
            for unit in (0xD800 + (cp >> 10), 0xDC00 + (cp & 0x3FF)):
                out += bytes([0xE0 | unit >> 12, 0x80 | (unit >> 6) & 0x3F, 0x80 | unit & 0x3F])
    return out


def utf16_len(s):
    return sum(2 if ord(c) >= 0x10000 else 1 for c in s)


def encode_dex(descriptors, extra_strings=()):
    strings = sorted(set(descriptors) | set(extra_strings), key=lambda s: s.encode("utf-16-be"))
    types = sorted(set(descriptors), key=lambda s: strings.index(s))
    header_size = 0x70
    string_ids_off = header_size
    type_ids_off = string_ids_off + 4 * len(strings)
    data_off = type_ids_off + 4 * len(types)
    data = b""
    string_offsets = []
    for s in strings:
        string_offsets.append(data_off + len(data))
        data += uleb(utf16_len(s)) + mutf8(s) + b"\0"
    data += b"\0" * ((-len(data)) % 4)
    map_off = data_off + len(data)
    map_items = [(0x0000, 1, 0), (0x0001, len(strings), string_ids_off), (0x0002, len(types), type_ids_off),
                 (0x2002, len(strings), data_off), (0x1000, 1, map_off)]
    map_list = struct.pack("<I", len(map_items)) + b"".join(struct.pack("<HHII", t, 0, n, o) for t, n, o in map_items)
    data += map_list
    file_size = data_off + len(data)
    body = b"".join(struct.pack("<I", o) for o in string_offsets)
    body += b"".join(struct.pack("<I", strings.index(t)) for t in types)
    hdr = bytearray(header_size)
    hdr[0:8] = b"dex\n035\0"
    struct.pack_into("<III", hdr, 32, file_size, header_size, 0x12345678)
    struct.pack_into("<III", hdr, 44, 0, 0, map_off)
    struct.pack_into("<II", hdr, 56, len(strings), string_ids_off)
    struct.pack_into("<II", hdr, 64, len(types), type_ids_off)
    struct.pack_into("<II", hdr, 104, len(data), data_off)
    blob = bytearray(bytes(hdr) + body + data)
    blob[12:32] = hashlib.sha1(bytes(blob[32:])).digest()
    struct.pack_into("<I", blob, 8, zlib.adler32(bytes(blob[12:])) & 0xFFFFFFFF)
    return bytes(blob)


def dotted(desc):
    return desc[1:-1].replace("/", ".")


def write_apk(path, model, dex_files, utf8=False, obfuscate=False):
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("AndroidManifest.xml", encode_axml(model, utf8, obfuscate))
        for i, descs in enumerate(dex_files):
            name = "classes.dex" if i == 0 else "classes%d.dex" % (i + 1)
            # every class extends Object, so the type table references it
            z.writestr(name, encode_dex(list(descs) + ["Ljava/lang/Object;"], ["V"]))
        z.writestr("res/values/strings.txt", "fixture")
        z.writestr("META-INF/MANIFEST.MF", "Manifest-Version: 1.0\n")


APP_DESCS = [
    "Lcom/demo/shop/MainActivity;", "Lcom/demo/shop/App;", "Lcom/demo/shop/net/Client;",
    "[Ljava/lang/String;", "[[I", "Ljava/lang/String;",
]


def gen_apks(out):
    d = os.path.join(out, "apk")
    os.makedirs(d, exist_ok=True)
    fixtures = [
        ("minimal", {"package": "com.fixture.minimal", "versionCode": 1, "versionName": "1.0",
                     "minSdk": 21, "targetSdk": 33, "permissions": ["android.permission.INTERNET"]},
         [["Lcom/example/app/Main;"]], False, False),
        ("no_permissions", {"package": "com.fixture.empty", "versionCode": 7, "versionName": "0.7-beta",
                            "minSdk": 24, "targetSdk": 34, "permissions": []},
         [["Lcom/fixture/empty/Main;"]], True, False),
        ("trackers", {"package": "com.fixture.trackers", "versionCode": 4021, "versionName": "4.2.1",
                      "minSdk": 23, "targetSdk": 34,
                      "permissions": ["android.permission.CAMERA", "android.permission.ACCESS_FINE_LOCATION",
                                      "android.permission.INTERNET", "android.permission.CAMERA",
                                      "com.vendor.CUSTOM_PERM"]},
         [["Lcom/fixture/trackers/Main;", "Lcom/google/firebase/analytics/FirebaseAnalytics;",
           "Lcom/google/firebaseanalytics/NotATracker;"],
          ["Lcom/facebook/ads/AdView;", "Lcom/facebook/ads/internal/Util;", "[Lcom/facebook/ads/AdView;"]],
         False, True),
    ]
    reference = {}
    for name, model, dexes, utf8, obf in fixtures:
        write_apk(os.path.join(d, name + ".apk"), model, dexes, utf8, obf)
        seen = []
        for p in model["permissions"]:
            if p not in seen:
                seen.append(p)
        ids = sorted({dotted(s) for ds in dexes for s in ds if s.startswith("L")} |
                     {"java.lang.Object"})
        reference[name] = {
            "package_name": model["package"], "version_name": model["versionName"],
            "version_code": model["versionCode"], "min_sdk": model["minSdk"], "target_sdk": model["targetSdk"],
            "uses_permissions": seen, "code_identifiers": ids,
        }
    # bare manifests for decoder tests
    with open(os.path.join(d, "camera_location.axml"), "wb") as f:
        f.write(encode_axml({"package": "com.fixture.axml", "versionCode": 2, "versionName": "2.0", "minSdk": 26,
                             "targetSdk": 34, "permissions": ["android.permission.CAMERA",
                                                              "android.permission.ACCESS_FINE_LOCATION"]}))

    # XAPK = base + config split
    base_model = {"package": "com.fixture.bundle", "versionCode": 99, "versionName": "9.9", "minSdk": 26,
                  "targetSdk": 34, "permissions": ["android.permission.INTERNET",
                                                   "android.permission.ACCESS_COARSE_LOCATION"]}
    split_model = dict(base_model, permissions=[], split="config.arm64_v8a")
    tmp = tempfile.mkdtemp()
    write_apk(os.path.join(tmp, "base.apk"), base_model, [["Lcom/fixture/bundle/Main;",
                                                            "Lcom/appsflyer/AppsFlyerLib;"]])
    write_apk(os.path.join(tmp, "config.arm64_v8a.apk"), split_model, [["Lcom/fixture/bundle/NativeStub;"]])
    shutil.copy(os.path.join(tmp, "base.apk"), os.path.join(d, "bundle_base.apk"))
    with zipfile.ZipFile(os.path.join(d, "bundle.xapk"), "w", zipfile.ZIP_STORED) as z:
        # the split is larger on purpose: selection must not fall back to size here
        z.write(os.path.join(tmp, "config.arm64_v8a.apk"), "config.arm64_v8a.apk")
        z.write(os.path.join(tmp, "base.apk"), "com.fixture.bundle.apk")
        z.writestr("manifest.json", json.dumps({"xapk_version": 2, "package_name": "com.fixture.bundle"}))
        z.writestr("icon.png", b"\x89PNG\r\n\x1a\n")
    shutil.rmtree(tmp)
    reference["bundle"] = {
        "package_name": base_model["package"], "version_name": base_model["versionName"],
        "version_code": base_model["versionCode"], "min_sdk": base_model["minSdk"],
        "target_sdk": base_model["targetSdk"], "uses_permissions": base_model["permissions"],
        # identifiers come from the dex entries of every inner APK, splits included
        "code_identifiers": sorted(["com.fixture.bundle.Main", "com.appsflyer.AppsFlyerLib",
                                    "com.fixture.bundle.NativeStub", "java.lang.Object"]),
    }
    with open(os.path.join(d, "reference.json"), "w") as f:
        json.dump(reference, f, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Demo replay bundle
# --------------------------------------------------------------------------

def demo_flows():
    """TLS flows of the demo capture, in capture order."""
    stripped = AD_ID.replace("-", "")
    host = "api.demo-shop.example"
    inner = base64.b64encode(json.dumps({"aid": AD_ID, "ts": 1718000000}).encode())
    nested = gzip.compress(base64.b64encode(json.dumps({"payload": inner.decode()}).encode()), mtime=0)
    body = base64.b64encode(json.dumps({"app_instance": "x1", "device": {"adid": stripped, "model": "Pixel 6",
                                                                            "arch": "arm64-v8a"}}).encode())

    def flow(version, sni, ip, port, exchanges, keys=True, **suite):
        return {"version": version, "sni": sni, "server_ip": ip, "client_port": port, "exchanges": exchanges,
                "keys": keys, "suite": suite}

    return [
        flow("1.3", host, "192.0.2.100", 50001, [
            (http_request("GET", "/v2/catalog?page=1", host, [("User-Agent", "DemoShop/3.1.2 (Android 13; Pixel 6)"),
                                                               ("Cookie", "session=abc123; uid=%s" % AD_ID)]),
             http_response(200, "OK", [("Content-Type", "application/json")], b'{"items":[1,2,3]}')),
            (http_request("POST", "/v2/sync", host, [("Content-Type", "application/octet-stream"),
                                                     ("Content-Encoding", "identity")], nested),
             http_response(204, "No Content")),
        ], suite13="TLS_CHACHA20_POLY1305_SHA256"),
        flow("1.3", "app-measurement.com", "192.0.2.110", 50002, [
            (http_request("POST", "/a", "app-measurement.com", [("Content-Type", "text/plain")], body),
             http_response(204, "No Content")),
        ], suite13="TLS_AES_256_GCM_SHA384"),
        flow("1.2", "graph.facebook.com", "192.0.2.120", 50003, [
            (http_request("GET", "/v17.0/activities?advertiser_id=%s&event=MOBILE_APP_INSTALL" % AD_ID,
                          "graph.facebook.com", [("X-FB-Device", "Google Pixel 6")]),
             http_response(200, "OK", [("Content-Type", "application/json")], b'{"success":true}', chunked=True)),
            (http_request("POST", "/v17.0/events", "graph.facebook.com", [("X-Ad-Id", AD_ID),
                                                                          ("Content-Type",
                                                                           "application/x-www-form-urlencoded")],
                          b"event=open&os=13&brand=Google"),
             http_response(200, "OK", [("Content-Type", "application/json")], b'{"ok":1}')),
        ], ciphers12="ECDHE-ECDSA-AES128-GCM-SHA256"),
        # undecryptable: keys withheld
        flow("1.3", "ads.doubleclick.net", "192.0.2.130", 50004, [
            (http_request("GET", "/pagead/id", "ads.doubleclick.net"), http_response(200, "OK", [], b"{}")),
        ], keys=False),
        flow("1.3", None, "192.0.2.140", 50005, [
            (http_request("GET", "/ping", "192.0.2.140"), http_response(200, "OK", [], b"pong")),
        ], keys=False),
    ]


def write_demo_expected(d):
    """Plaintext oracle for the demo capture: what each endpoint wrote."""
    flows = []
    for f in demo_flows():
        flows.append({
            "sni": f["sni"],
            "server_ip": f["server_ip"],
            "keys_in_keylog": f["keys"],
            "exchanges": [{"request_b64": base64.b64encode(req).decode(),
                           "response_b64": base64.b64encode(resp).decode()} for req, resp in f["exchanges"]],
        })
    with open(os.path.join(d, "expected.json"), "w") as fh:
        json.dump({"flows": flows}, fh, indent=2)


def gen_demo(out):
    d = os.path.join(out, "demo")
    os.makedirs(d, exist_ok=True)
    model = {"package": "com.demo.shop", "versionCode": 312, "versionName": "3.1.2", "minSdk": 24,
             "targetSdk": 34,
             "permissions": ["android.permission.INTERNET", "android.permission.ACCESS_NETWORK_STATE",
                             "android.permission.ACCESS_FINE_LOCATION", "android.permission.CAMERA",
                             "com.google.android.gms.permission.AD_ID", "com.demo.shop.permission.C2D"]}
    write_apk(os.path.join(d, "app.apk"), model,
              [APP_DESCS + ["Lcom/google/firebase/analytics/FirebaseAnalytics;",
                            "Lcom/google/android/gms/measurement/AppMeasurement;"],
               ["Lcom/facebook/ads/AdView;", "Lcom/appsflyer/AppsFlyerLib;", "Lcom/adjust/sdk/Adjust;"]])

    cap = Capture(1_718_000_000_000_000)
    keylog = []

    def add(sess, server_ip, cport, keep_keys=True, gap=20):
        replay_session(cap, sess, "10.0.0.2", server_ip, cport, 443)
        cap.tick(gap)
        if keep_keys:
            keylog.extend(sess["keylog"])

    # DNS noise first
    dns = struct.pack("!HHHHHH", 0x4242, 0x0100, 1, 0, 0, 0) + b"\x03api\x09demo-shop\x07example\x00\x00\x01\x00\x01"
    cap.emit_ip(ipv4_packet("10.0.0.2", "192.0.2.53", 17, udp_datagram("10.0.0.2", "192.0.2.53", 5353, 53, dns), 1))
    cap.tick(50)

    for flow in demo_flows():
        sess = run_session(flow["version"], flow["exchanges"], sni=flow["sni"], **flow["suite"])
        add(sess, flow["server_ip"], flow["client_port"], keep_keys=flow["keys"])

    cap.write_pcap(os.path.join(d, "capture.pcap"))
    with open(os.path.join(d, "keylog.txt"), "w") as f:
        f.write("# fixture key log\n" + "\n".join(keylog) + "\n")
    profile = {"schema_version": "1.0", "advertising_id": AD_ID, "model": "Pixel 6", "manufacturer": "Google",
               "chip_architecture": "arm64-v8a", "os_version": "13", "extra": []}
    with open(os.path.join(d, "profile.json"), "w") as f:
        json.dump(profile, f, indent=2)
    # placeholder MP4: ftyp box + padding
    with open(os.path.join(d, "screen.mp4"), "wb") as f:
        f.write(struct.pack(">I", 24) + b"ftypisom" + struct.pack(">I", 512) + b"isomiso2" + b"\0" * 2048)
    capture_ms = (cap.now - cap.frames[0][0]) // 1000
    manifest = {
        "schema_version": "1.0",
        "fixture_id": "demo-shop-1",
        "device": {"kind": "replay", "identity": "replay:demo-shop-1",
                   "capabilities": {"screen_record": True, "profile_extraction": True}},
        "profile": "profile.json",
        "pcap": "capture.pcap",
        "keylog": "keylog.txt",
        "video": {"file": "screen.mp4", "start_offset_ms": -1200, "duration_ms": capture_ms + 1200 + 500},
    }
    with open(os.path.join(d, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    write_demo_expected(d)
    print("demo capture spans", capture_ms, "ms")


def main():
    if len(sys.argv) > 2 and sys.argv[1] == "--child":
        child_session(json.loads(sys.argv[2]))
        return
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(ROOT, "crates", "core", "fixtures"))
    ap.add_argument("--demo-expected-only", action="store_true",
                    help="rewrite demo/expected.json without regenerating captures")
    ap.add_argument("--apks-only", action="store_true",
                    help="rewrite the package fixtures only")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if args.demo_expected_only:
        write_demo_expected(os.path.join(args.out, "demo"))
        return
    if args.apks_only:
        gen_apks(args.out)
        return
    gen_tls(args.out)
    gen_plain(args.out)
    gen_apks(args.out)
    gen_demo(args.out)


if __name__ == "__main__":
    main()
