//! Capture ingestion: pcap/pcapng, TCP reassembly, TLS decryption, HTTP/1.x
//! parsing and HAR import/export.

pub mod keylog;
pub mod pcap;
pub mod reassembly;
pub mod tls;
pub mod http;
pub mod ingest;
pub mod model;
pub mod har;
