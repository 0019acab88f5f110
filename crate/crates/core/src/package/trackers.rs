use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{self, DataError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerEntry {
    pub tracker_id: String,
    pub name: String,
    pub company: String,
    pub categories: Vec<String>,
    pub code_signature_prefixes: Vec<String>,
    #[serde(default)]
    pub network_signature_domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerRecord {
    pub tracker_id: String,
    pub name: String,
    pub company: String,
    pub categories: Vec<String>,
    pub matched_signatures: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct TrackerFile {
    schema_version: String,
    version: String,
    trackers: Vec<TrackerEntry>,
}

#[derive(Debug, Clone)]
pub struct TrackerDb {
    pub version: String,
    pub entries: Vec<TrackerEntry>,
}

/// Trims surrounding dots and whitespace; rejects empty labels.
pub fn normalize_prefix(prefix: &str) -> Option<String> {
    let p = prefix.trim().trim_matches('.');
    if p.is_empty() || p.split('.').any(str::is_empty) {
        return None;
    }
    Some(p.to_string())
}

/// `prefix` equals `identifier` or is followed in it by a `.`.
pub fn is_dot_boundary_prefix(prefix: &str, identifier: &str) -> bool {
    identifier
        .strip_prefix(prefix)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
}

impl TrackerDb {
    pub fn new(version: impl Into<String>, entries: Vec<TrackerEntry>) -> Result<Self, DataError> {
        let mut entries = entries;
        for e in &mut entries {
            let mut normalized = Vec::with_capacity(e.code_signature_prefixes.len());
            for p in &e.code_signature_prefixes {
                let n = normalize_prefix(p).ok_or_else(|| DataError::Invalid {
                    what: "tracker database",
                    message: format!("tracker {} has an empty signature", e.tracker_id),
                })?;
                normalized.push(n);
            }
            e.code_signature_prefixes = normalized;
        }
        Ok(Self {
            version: version.into(),
            entries,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: TrackerFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
            what: "tracker database",
            message: e.to_string(),
        })?;
        data::check_major(&file.schema_version, "tracker database")?;
        Self::new(file.version, file.trackers)
    }

    pub fn bundled() -> Self {
        Self::from_json(data::TRACKERS_JSON).expect("bundled tracker database is valid")
    }
}

/// Matches code identifiers against tracker code signatures.
///
/// Identifiers are sorted so each prefix lookup is a range scan instead of a
/// pass over the whole set. Results are ordered by tracker name.
pub fn match_trackers<'a, I>(identifiers: I, db: &TrackerDb) -> Vec<TrackerRecord>
where
    I: IntoIterator<Item = &'a String>,
{
    let sorted: BTreeSet<&str> = identifiers.into_iter().map(String::as_str).collect();
    let mut out: Vec<TrackerRecord> = db
        .entries
        .iter()
        .filter_map(|entry| {
            let matched: Vec<String> = entry
                .code_signature_prefixes
                .iter()
                .filter(|prefix| {
                    sorted
                        .range(prefix.as_str()..)
                        .take_while(|id| id.starts_with(prefix.as_str()))
                        .any(|id| is_dot_boundary_prefix(prefix, id))
                })
                .cloned()
                .collect();
            (!matched.is_empty()).then(|| TrackerRecord {
                tracker_id: entry.tracker_id.clone(),
                name: entry.name.clone(),
                company: entry.company.clone(),
                categories: entry.categories.clone(),
                matched_signatures: matched,
            })
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.tracker_id.cmp(&b.tracker_id)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn db() -> TrackerDb {
        TrackerDb::new(
            "test",
            vec![
                TrackerEntry {
                    tracker_id: "1".into(),
                    name: "Firebase Analytics".into(),
                    company: "Google".into(),
                    categories: vec!["Analytics".into()],
                    code_signature_prefixes: vec![".com.google.firebase.analytics.".into()],
                    network_signature_domains: vec![],
                },
                TrackerEntry {
                    tracker_id: "2".into(),
                    name: "Ads".into(),
                    company: "Facebook".into(),
                    categories: vec!["Advertisement".into()],
                    code_signature_prefixes: vec!["com.facebook.ads".into()],
                    network_signature_domains: vec![],
                },
            ],
        )
        .unwrap()
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn direct_prefix_hit() {
        let r = match_trackers(&ids(&["com.google.firebase.analytics.FirebaseAnalytics"]), &db());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].matched_signatures, ["com.google.firebase.analytics"]);
    }

    #[test]
    fn dot_boundary() {
        assert!(match_trackers(&ids(&["com.google.firebaseanalytics.X"]), &db()).is_empty());
        assert!(match_trackers(&ids(&["com.google.firebase.analyticsX"]), &db()).is_empty());
    }

    #[test]
    fn sorted_by_name_once_each() {
        let r = match_trackers(
            &ids(&[
                "com.google.firebase.analytics.A",
                "com.google.firebase.analytics.B",
                "com.facebook.ads.AdView",
            ]),
            &db(),
        );
        let names: Vec<_> = r.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["Ads", "Firebase Analytics"]);
    }

    #[test]
    fn empty_signature_rejected() {
        let mut e = db().entries[0].clone();
        e.code_signature_prefixes = vec!["..".into()];
        assert!(TrackerDb::new("x", vec![e]).is_err());
    }

    #[test]
    fn bundled_db_prefixes_are_normalized() {
        let db = TrackerDb::bundled();
        for e in &db.entries {
            for p in &e.code_signature_prefixes {
                assert_eq!(normalize_prefix(p).as_deref(), Some(p.as_str()));
            }
        }
    }

    fn brute_force(identifiers: &[String], db: &TrackerDb) -> Vec<(String, Vec<String>)> {
        let mut out = Vec::new();
        for e in &db.entries {
            let mut hits = Vec::new();
            for p in &e.code_signature_prefixes {
                if identifiers
                    .iter()
                    .any(|id| id == p || (id.len() > p.len() && id.starts_with(p) && id.as_bytes()[p.len()] == b'.'))
                {
                    hits.push(p.clone());
                }
            }
            if !hits.is_empty() {
                out.push((e.tracker_id.clone(), hits));
            }
        }
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn equals_brute_force_and_order_invariant(
            picks in proptest::collection::vec((0usize..40, "[a-zA-Z]{0,3}", proptest::bool::ANY), 0..30)
        ) {
            let db = TrackerDb::bundled();
            let all_prefixes: Vec<&String> = db.entries.iter().flat_map(|e| &e.code_signature_prefixes).collect();
            let identifiers: Vec<String> = picks
                .iter()
                .map(|(i, suffix, dot)| {
                    let p = all_prefixes[i % all_prefixes.len()];
                    if *dot { format!("{p}.{suffix}") } else { format!("{p}{suffix}") }
                })
                .collect();
            let got = match_trackers(&identifiers, &db);
            let mut got_pairs: Vec<_> = got.iter().map(|t| (t.tracker_id.clone(), t.matched_signatures.clone())).collect();
            got_pairs.sort();
            prop_assert_eq!(got_pairs, brute_force(&identifiers, &db));

            let mut reversed = identifiers.clone();
            reversed.reverse();
            prop_assert_eq!(match_trackers(&reversed, &db), got.clone());

            for t in &got {
                for sig in &t.matched_signatures {
                    prop_assert!(identifiers.iter().any(|id| is_dot_boundary_prefix(sig, id)));
                }
            }
        }
    }
}
