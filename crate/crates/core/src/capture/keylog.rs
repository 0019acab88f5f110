//! NSS key log parsing.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecretLabel {
    ClientHandshake,
    ServerHandshake,
    ClientTraffic0,
    ServerTraffic0,
}

impl SecretLabel {
    fn parse(label: &str) -> Option<Self> {
        Some(match label {
            "CLIENT_HANDSHAKE_TRAFFIC_SECRET" => Self::ClientHandshake,
            "SERVER_HANDSHAKE_TRAFFIC_SECRET" => Self::ServerHandshake,
            "CLIENT_TRAFFIC_SECRET_0" => Self::ClientTraffic0,
            "SERVER_TRAFFIC_SECRET_0" => Self::ServerTraffic0,
            _ => return None,
        })
    }
}

/// Secrets indexed by client random.
#[derive(Debug, Clone, Default)]
pub struct SecretStore {
    master: HashMap<[u8; 32], [u8; 48]>,
    tls13: HashMap<([u8; 32], SecretLabel), Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KeylogStats {
    pub loaded: usize,
    /// Malformed lines.
    pub skipped: usize,
    /// Well-formed lines with labels this reader does not use.
    pub ignored: usize,
}

impl SecretStore {
    pub fn master_secret(&self, client_random: &[u8; 32]) -> Option<&[u8; 48]> {
        self.master.get(client_random)
    }

    pub fn tls13_secret(&self, client_random: &[u8; 32], label: SecretLabel) -> Option<&[u8]> {
        self.tls13.get(&(*client_random, label)).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty() && self.tls13.is_empty()
    }

    pub fn len(&self) -> usize {
        self.master.len() + self.tls13.len()
    }

    /// Adds every secret of `other`; existing entries win.
    pub fn merge(&mut self, other: &SecretStore) {
        for (k, v) in &other.master {
            self.master.entry(*k).or_insert(*v);
        }
        for (k, v) in &other.tls13 {
            self.tls13.entry(*k).or_insert_with(|| v.clone());
        }
    }
}

fn decode_random(hex_str: &str) -> Option<[u8; 32]> {
    hex::decode(hex_str).ok()?.try_into().ok()
}

/// Parses key log text. Malformed lines are counted and skipped; one bad line
/// never invalidates the rest.
pub fn load_keylog(text: &str) -> (SecretStore, KeylogStats) {
    let mut store = SecretStore::default();
    let mut stats = KeylogStats::default();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            stats.skipped += 1;
            continue;
        }
        let Some(random) = decode_random(fields[1]) else {
            stats.skipped += 1;
            continue;
        };
        let Ok(secret) = hex::decode(fields[2]) else {
            stats.skipped += 1;
            continue;
        };
        if fields[0] == "CLIENT_RANDOM" {
            match <[u8; 48]>::try_from(secret.as_slice()) {
                Ok(ms) => {
                    store.master.insert(random, ms);
                    stats.loaded += 1;
                }
                Err(_) => stats.skipped += 1,
            }
        } else if let Some(label) = SecretLabel::parse(fields[0]) {
            if matches!(secret.len(), 32 | 48) {
                store.tls13.insert((random, label), secret);
                stats.loaded += 1;
            } else {
                stats.skipped += 1;
            }
        } else {
            stats.ignored += 1;
        }
    }
    if stats.skipped > 0 {
        log::warn!("key log: skipped {} malformed line(s)", stats.skipped);
    }
    (store, stats)
}
