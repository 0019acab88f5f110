//! Versioned data files bundled with the crate.

pub const PERMISSIONS_JSON: &str = include_str!("../data/permissions.json");
pub const TRACKERS_JSON: &str = include_str!("../data/trackers.json");
pub const COMPANIES_JSON: &str = include_str!("../data/companies.json");
pub const PUBLIC_SUFFIX_LIST: &str = include_str!("../data/public_suffix_list.dat");
pub const EXAMPLE_BLOCKLIST: &str = include_str!("../data/blocklist_example.txt");
pub const ADAPTERS_JSON: &str = include_str!("../data/adapters.json");

/// Major version of every data and document schema this build reads.
pub const SCHEMA_MAJOR: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("{what}: parse error: {message}")]
    Parse { what: &'static str, message: String },
    #[error("{what}: unsupported schema version {found} (this build reads {SCHEMA_MAJOR}.x)")]
    Version { what: &'static str, found: String },
    #[error("{what}: {message}")]
    Invalid { what: &'static str, message: String },
}

pub fn major_of(version: &str) -> Option<u32> {
    version.split('.').next()?.trim().parse().ok()
}

pub fn check_major(version: &str, what: &'static str) -> Result<(), DataError> {
    match major_of(version) {
        Some(SCHEMA_MAJOR) => Ok(()),
        _ => Err(DataError::Version {
            what,
            found: version.to_string(),
        }),
    }
}
