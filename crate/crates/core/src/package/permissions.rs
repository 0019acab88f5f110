use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ManifestModel;
use crate::data::{self, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protection {
    Normal,
    Dangerous,
    Signature,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionRecord {
    pub name: String,
    pub protection: Protection,
    pub label: String,
    pub description: String,
    pub is_privacy_sensitive: bool,
    /// Set when the permission is not in the catalog.
    pub unknown: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct CatalogEntry {
    name: String,
    protection: Protection,
    label: String,
    description: String,
    privacy_sensitive: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct CatalogFile {
    schema_version: String,
    version: String,
    permissions: Vec<CatalogEntry>,
}

/// Permission names mapped to protection level and user-facing text.
#[derive(Debug, Clone)]
pub struct PermissionCatalog {
    pub version: String,
    entries: HashMap<String, CatalogEntry>,
}

impl PermissionCatalog {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: CatalogFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
            what: "permission catalog",
            message: e.to_string(),
        })?;
        data::check_major(&file.schema_version, "permission catalog")?;
        let entries = file
            .permissions
            .into_iter()
            .map(|e| (e.name.clone(), e))
            .collect();
        Ok(Self {
            version: file.version,
            entries,
        })
    }

    /// The catalog shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(data::PERMISSIONS_JSON).expect("bundled permission catalog is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, name: &str) -> PermissionRecord {
        match self.entries.get(name) {
            Some(e) => PermissionRecord {
                name: name.to_string(),
                protection: e.protection,
                label: e.label.clone(),
                description: e.description.clone(),
                is_privacy_sensitive: e.privacy_sensitive || e.protection == Protection::Dangerous,
                unknown: false,
            },
            None => PermissionRecord {
                name: name.to_string(),
                protection: Protection::Unknown,
                label: "unknown".to_string(),
                description: "unknown".to_string(),
                is_privacy_sensitive: false,
                unknown: true,
            },
        }
    }
}

/// One record per unique manifest permission, in manifest order.
pub fn classify_permissions(manifest: &ManifestModel, catalog: &PermissionCatalog) -> Vec<PermissionRecord> {
    let mut seen = std::collections::HashSet::new();
    manifest
        .uses_permissions
        .iter()
        .filter(|p| seen.insert(p.as_str()))
        .map(|p| catalog.lookup(p))
        .collect()
}
