//! Static inspection of Android packages (APK and XAPK).

pub mod axml;
pub mod dex;
pub mod permissions;
pub mod trackers;

use std::collections::BTreeSet;
use std::io::{Cursor, Read};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use axml::{decode_binary_manifest, AxmlError};
pub use dex::{extract_code_identifiers, DexError};
pub use permissions::{classify_permissions, PermissionCatalog, PermissionRecord, Protection};
pub use trackers::{match_trackers, TrackerDb, TrackerEntry, TrackerRecord};

const MANIFEST_ENTRY: &str = "AndroidManifest.xml";
const MAX_ENTRY_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PackageFormat {
    #[serde(rename = "APK")]
    Apk,
    #[serde(rename = "XAPK")]
    Xapk,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdkVersions {
    pub min: Option<i64>,
    pub target: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub package_name: String,
    pub version_name: String,
    pub version_code: i64,
    pub uses_permissions: Vec<String>,
    pub sdk_versions: SdkVersions,
    /// Split name for configuration splits; absent on base APKs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainedApk {
    pub entry_name: String,
    pub size: u64,
    pub split: Option<String>,
    pub is_base: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPackage {
    /// Content-derived id (first 16 hex chars of the digest).
    pub id: String,
    pub file_name: String,
    pub format: PackageFormat,
    pub sha256: String,
    pub size: u64,
    pub manifest: ManifestModel,
    pub code_identifiers: BTreeSet<String>,
    #[serde(default)]
    pub contained_apks: Vec<ContainedApk>,
}

#[derive(Debug, thiserror::Error)]
pub enum PackageError {
    #[error("input is not a ZIP container: {0}")]
    NotAZip(String),
    #[error("no AndroidManifest.xml entry in package")]
    NoManifestEntry,
    #[error("manifest decode failed: {0}")]
    ManifestDecodeError(#[from] AxmlError),
    #[error("XAPK has no identifiable base APK")]
    NoBaseApk,
    #[error("dex entry {entry}: {source}")]
    Dex { entry: String, source: DexError },
    #[error("entry {0} exceeds the size limit")]
    EntryTooLarge(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

type Archive<'a> = zip::ZipArchive<Cursor<&'a [u8]>>;

fn open_zip(bytes: &[u8]) -> Result<Archive<'_>, PackageError> {
    if !bytes.starts_with(b"PK") {
        return Err(PackageError::NotAZip("missing local file header signature".into()));
    }
    zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| PackageError::NotAZip(e.to_string()))
}

fn read_entry(archive: &mut Archive<'_>, name: &str) -> Result<Vec<u8>, PackageError> {
    let mut file = archive
        .by_name(name)
        .map_err(|e| PackageError::NotAZip(format!("{name}: {e}")))?;
    if file.size() > MAX_ENTRY_BYTES {
        return Err(PackageError::EntryTooLarge(name.to_string()));
    }
    let mut buf = Vec::with_capacity(file.size() as usize);
    file.read_to_end(&mut buf)
        .map_err(|e| PackageError::NotAZip(format!("{name}: {e}")))?;
    Ok(buf)
}

fn is_dex_entry(name: &str) -> bool {
    !name.contains('/') && name.starts_with("classes") && name.ends_with(".dex")
}

struct ApkContents {
    manifest: ManifestModel,
    code_identifiers: BTreeSet<String>,
}

fn inspect_apk(archive: &mut Archive<'_>) -> Result<ApkContents, PackageError> {
    let manifest_bytes = match archive.index_for_name(MANIFEST_ENTRY) {
        Some(_) => read_entry(archive, MANIFEST_ENTRY)?,
        None => return Err(PackageError::NoManifestEntry),
    };
    let manifest = decode_binary_manifest(&manifest_bytes)?;
    let mut dex_names: Vec<String> = archive
        .file_names()
        .filter(|n| is_dex_entry(n))
        .map(str::to_string)
        .collect();
    dex_names.sort();
    let mut code_identifiers = BTreeSet::new();
    for name in dex_names {
        let dex = read_entry(archive, &name)?;
        let ids = extract_code_identifiers(&dex).map_err(|source| PackageError::Dex { entry: name.clone(), source })?;
        code_identifiers.extend(ids);
    }
    Ok(ApkContents {
        manifest,
        code_identifiers,
    })
}

/// Parses an APK or XAPK. The format is decided by the container contents:
/// a top-level `AndroidManifest.xml` means APK, otherwise inner `.apk`
/// entries mean XAPK.
pub fn parse_package(file_name: &str, bytes: &[u8]) -> Result<AppPackage, PackageError> {
    let sha256 = sha256_hex(bytes);
    let mut archive = open_zip(bytes)?;

    let (format, contents, contained_apks) = if archive.index_for_name(MANIFEST_ENTRY).is_some() {
        (PackageFormat::Apk, inspect_apk(&mut archive)?, Vec::new())
    } else {
        let mut apk_names: Vec<String> = archive
            .file_names()
            .filter(|n| n.to_ascii_lowercase().ends_with(".apk"))
            .map(str::to_string)
            .collect();
        if apk_names.is_empty() {
            return Err(PackageError::NoManifestEntry);
        }
        apk_names.sort();
        let mut inner = Vec::new();
        for name in &apk_names {
            let data = read_entry(&mut archive, name)?;
            let mut a = open_zip(&data)?;
            let contents = inspect_apk(&mut a)?;
            inner.push((name.clone(), data.len() as u64, contents));
        }
        // base = no split attribute; ties go to the largest file
        let base_idx = inner
            .iter()
            .enumerate()
            .filter(|(_, (_, _, c))| c.manifest.split.is_none())
            .max_by(|(_, a), (_, b)| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .ok_or(PackageError::NoBaseApk)?;
        let contained: Vec<ContainedApk> = inner
            .iter()
            .enumerate()
            .map(|(i, (name, size, c))| ContainedApk {
                entry_name: name.clone(),
                size: *size,
                split: c.manifest.split.clone(),
                is_base: i == base_idx,
            })
            .collect();
        let mut code_identifiers = BTreeSet::new();
        for (_, _, c) in &inner {
            code_identifiers.extend(c.code_identifiers.iter().cloned());
        }
        let (_, _, base) = inner.swap_remove(base_idx);
        (
            PackageFormat::Xapk,
            ApkContents {
                manifest: base.manifest,
                code_identifiers,
            },
            contained,
        )
    };

    Ok(AppPackage {
        id: sha256[..16].to_string(),
        file_name: file_name.to_string(),
        format,
        size: bytes.len() as u64,
        sha256,
        manifest: contents.manifest,
        code_identifiers: contents.code_identifiers,
        contained_apks,
    })
}

/// Static analysis output for one package.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticReport {
    pub permissions: Vec<PermissionRecord>,
    pub trackers: Vec<TrackerRecord>,
}

pub fn analyze_static(pkg: &AppPackage, catalog: &PermissionCatalog, db: &TrackerDb) -> StaticReport {
    StaticReport {
        permissions: classify_permissions(&pkg.manifest, catalog),
        trackers: match_trackers(&pkg.code_identifiers, db),
    }
}
