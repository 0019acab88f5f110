//! Decoder for Android's compiled binary XML, limited to what is needed to
//! read `AndroidManifest.xml`: the string pool, the resource map and element
//! start/end chunks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ManifestModel;

const RES_XML_TYPE: u16 = 0x0003;
const RES_STRING_POOL_TYPE: u16 = 0x0001;
const RES_XML_RESOURCE_MAP_TYPE: u16 = 0x0180;
const RES_XML_START_NAMESPACE_TYPE: u16 = 0x0100;
const RES_XML_END_NAMESPACE_TYPE: u16 = 0x0101;
const RES_XML_START_ELEMENT_TYPE: u16 = 0x0102;
const RES_XML_END_ELEMENT_TYPE: u16 = 0x0103;
const RES_XML_CDATA_TYPE: u16 = 0x0104;

const UTF8_FLAG: u32 = 0x100;
const NO_INDEX: u32 = 0xFFFF_FFFF;

const TYPE_STRING: u8 = 0x03;
const TYPE_INT_DEC: u8 = 0x10;
const TYPE_INT_HEX: u8 = 0x11;
const TYPE_INT_BOOLEAN: u8 = 0x12;

/// Well-known framework attribute ids, used when the string pool entry for an
/// attribute name has been blanked out (common in obfuscated builds).
const FRAMEWORK_ATTRS: &[(u32, &str)] = &[
    (0x0101_0003, "name"),
    (0x0101_020c, "minSdkVersion"),
    (0x0101_021b, "versionCode"),
    (0x0101_021c, "versionName"),
    (0x0101_0270, "targetSdkVersion"),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AxmlError {
    #[error("truncated chunk at offset {offset}")]
    TruncatedChunk { offset: usize },
    #[error("unsupported chunk type 0x{chunk_type:04x} at offset {offset}")]
    UnsupportedChunkType { chunk_type: u16, offset: usize },
    #[error("string index {index} out of range (pool has {len})")]
    StringIndexOutOfRange { index: u32, len: usize },
    #[error("string pool entry {0} is not valid text")]
    BadString(u32),
    #[error("document has no <manifest> root element")]
    NoManifestElement,
}

/// Typed attribute value as stored in a `Res_value`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttrValue {
    String(String),
    Int(i64),
    Bool(bool),
    Other { data_type: u8, data: u32 },
}

impl AttrValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            AttrValue::String(s) => s.trim().parse().ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub namespace: Option<String>,
    pub name: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub name: String,
    /// Nesting depth, the root element is 0.
    pub depth: usize,
    pub attributes: Vec<Attribute>,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.iter().find(|a| a.name == name).map(|a| &a.value)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn u16_at(&self, off: usize) -> Result<u16, AxmlError> {
        self.buf
            .get(off..off + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or(AxmlError::TruncatedChunk { offset: off })
    }

    fn u32_at(&self, off: usize) -> Result<u32, AxmlError> {
        self.buf
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(AxmlError::TruncatedChunk { offset: off })
    }
}

#[derive(Debug, Default)]
struct StringPool {
    strings: Vec<String>,
}

impl StringPool {
    fn parse(chunk: &[u8], base: usize) -> Result<Self, AxmlError> {
        let r = Reader { buf: chunk };
        let header_size = r.u16_at(2)? as usize;
        let count = r.u32_at(8)? as usize;
        let flags = r.u32_at(16)?;
        let strings_start = r.u32_at(20)? as usize;
        let utf8 = flags & UTF8_FLAG != 0;
        if header_size < 28 || count > chunk.len() / 4 {
            return Err(AxmlError::TruncatedChunk { offset: base });
        }
        let mut strings = Vec::with_capacity(count);
        for i in 0..count {
            let off = r.u32_at(header_size + i * 4)? as usize;
            let at = strings_start
                .checked_add(off)
                .filter(|&at| at < chunk.len())
                .ok_or(AxmlError::TruncatedChunk { offset: base + strings_start })?;
            let s = if utf8 {
                decode_utf8_entry(&chunk[at..])
            } else {
                decode_utf16_entry(&chunk[at..])
            }
            .ok_or(AxmlError::BadString(i as u32))?;
            strings.push(s);
        }
        Ok(Self { strings })
    }

    fn get(&self, index: u32) -> Result<&str, AxmlError> {
        self.strings
            .get(index as usize)
            .map(String::as_str)
            .ok_or(AxmlError::StringIndexOutOfRange {
                index,
                len: self.strings.len(),
            })
    }

    fn get_opt(&self, index: u32) -> Result<Option<&str>, AxmlError> {
        if index == NO_INDEX {
            Ok(None)
        } else {
            self.get(index).map(Some)
        }
    }
}

fn decode_utf8_entry(b: &[u8]) -> Option<String> {
    // two varint lengths: UTF-16 units, then bytes
    let (_, n1) = utf8_len(b)?;
    let (len, n2) = utf8_len(b.get(n1..)?)?;
    let start = n1 + n2;
    let bytes = b.get(start..start + len)?;
    String::from_utf8(bytes.to_vec()).ok()
}

fn utf8_len(b: &[u8]) -> Option<(usize, usize)> {
    let first = *b.first()? as usize;
    if first & 0x80 != 0 {
        let second = *b.get(1)? as usize;
        Some((((first & 0x7f) << 8) | second, 2))
    } else {
        Some((first, 1))
    }
}

fn decode_utf16_entry(b: &[u8]) -> Option<String> {
    let first = u16::from_le_bytes([*b.first()?, *b.get(1)?]) as usize;
    let (units, start) = if first & 0x8000 != 0 {
        let second = u16::from_le_bytes([*b.get(2)?, *b.get(3)?]) as usize;
        ((((first & 0x7fff) << 16) | second), 4)
    } else {
        (first, 2)
    };
    let raw = b.get(start..start + units * 2)?;
    let code_units: Vec<u16> = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    String::from_utf16(&code_units).ok()
}

/// Walks a binary XML document and returns its elements in document order.
pub fn parse_elements(bytes: &[u8]) -> Result<Vec<Element>, AxmlError> {
    let r = Reader { buf: bytes };
    let doc_type = r.u16_at(0)?;
    if doc_type != RES_XML_TYPE {
        return Err(AxmlError::UnsupportedChunkType {
            chunk_type: doc_type,
            offset: 0,
        });
    }
    let header_size = r.u16_at(2)? as usize;
    let total = r.u32_at(4)? as usize;
    if header_size < 8 || total > bytes.len() || total < header_size {
        return Err(AxmlError::TruncatedChunk { offset: 0 });
    }

    let mut pool: Option<StringPool> = None;
    let mut resource_ids: Vec<u32> = Vec::new();
    let mut namespaces: HashMap<String, String> = HashMap::new();
    let mut elements = Vec::new();
    let mut depth = 0usize;

    let mut off = header_size;
    while off < total {
        let chunk_type = r.u16_at(off)?;
        let chunk_header = r.u16_at(off + 2)? as usize;
        let chunk_size = r.u32_at(off + 4)? as usize;
        if chunk_size < 8 || chunk_header < 8 || chunk_header > chunk_size || off + chunk_size > total {
            return Err(AxmlError::TruncatedChunk { offset: off });
        }
        let chunk = &bytes[off..off + chunk_size];
        let c = Reader { buf: chunk };
        match chunk_type {
            RES_STRING_POOL_TYPE => pool = Some(StringPool::parse(chunk, off)?),
            RES_XML_RESOURCE_MAP_TYPE => {
                resource_ids = chunk[chunk_header..]
                    .chunks_exact(4)
                    .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
                    .collect();
            }
            RES_XML_START_NAMESPACE_TYPE => {
                let pool = pool.as_ref().ok_or(AxmlError::TruncatedChunk { offset: off })?;
                let prefix = c.u32_at(chunk_header)?;
                let uri = c.u32_at(chunk_header + 4)?;
                if let (Some(p), Some(u)) = (pool.get_opt(prefix)?, pool.get_opt(uri)?) {
                    namespaces.insert(u.to_string(), p.to_string());
                }
            }
            RES_XML_END_NAMESPACE_TYPE | RES_XML_CDATA_TYPE => {}
            RES_XML_START_ELEMENT_TYPE => {
                let pool = pool.as_ref().ok_or(AxmlError::TruncatedChunk { offset: off })?;
                let ext = chunk_header;
                let name = pool.get(c.u32_at(ext + 4)?)?.to_string();
                let attr_start = c.u16_at(ext + 8)? as usize;
                let attr_size = c.u16_at(ext + 10)? as usize;
                let attr_count = c.u16_at(ext + 12)? as usize;
                if attr_size < 20 {
                    return Err(AxmlError::TruncatedChunk { offset: off + ext });
                }
                let mut attributes = Vec::with_capacity(attr_count);
                for i in 0..attr_count {
                    let a = ext + attr_start + i * attr_size;
                    let ns = c.u32_at(a)?;
                    let name_idx = c.u32_at(a + 4)?;
                    let raw = c.u32_at(a + 8)?;
                    let data_type = *chunk.get(a + 15).ok_or(AxmlError::TruncatedChunk { offset: off + a })?;
                    let data = c.u32_at(a + 16)?;
                    let mut attr_name = pool.get(name_idx)?.to_string();
                    if attr_name.is_empty() {
                        if let Some(id) = resource_ids.get(name_idx as usize) {
                            if let Some((_, n)) = FRAMEWORK_ATTRS.iter().find(|(rid, _)| rid == id) {
                                attr_name = (*n).to_string();
                            }
                        }
                    }
                    let value = match data_type {
                        TYPE_STRING => AttrValue::String(pool.get(data)?.to_string()),
                        TYPE_INT_DEC | TYPE_INT_HEX => AttrValue::Int(data as i32 as i64),
                        TYPE_INT_BOOLEAN => AttrValue::Bool(data != 0),
                        _ => match pool.get_opt(raw)? {
                            Some(s) => AttrValue::String(s.to_string()),
                            None => AttrValue::Other { data_type, data },
                        },
                    };
                    let namespace = pool
                        .get_opt(ns)?
                        .map(|uri| namespaces.get(uri).cloned().unwrap_or_else(|| uri.to_string()));
                    attributes.push(Attribute {
                        namespace,
                        name: attr_name,
                        value,
                    });
                }
                elements.push(Element {
                    name,
                    depth,
                    attributes,
                });
                depth += 1;
            }
            RES_XML_END_ELEMENT_TYPE => depth = depth.saturating_sub(1),
            other => {
                return Err(AxmlError::UnsupportedChunkType {
                    chunk_type: other,
                    offset: off,
                })
            }
        }
        off += chunk_size;
    }
    Ok(elements)
}

/// Decodes a compiled `AndroidManifest.xml` into a [`ManifestModel`].
///
/// Fails closed: any structural problem yields an error, never a partially
/// filled model.
pub fn decode_binary_manifest(bytes: &[u8]) -> Result<ManifestModel, AxmlError> {
    let elements = parse_elements(bytes)?;
    let root = elements
        .iter()
        .find(|e| e.depth == 0 && e.name == "manifest")
        .ok_or(AxmlError::NoManifestElement)?;

    let mut model = ManifestModel {
        package_name: root.attr("package").and_then(AttrValue::as_str).unwrap_or_default().to_string(),
        version_name: root.attr("versionName").and_then(AttrValue::as_str).unwrap_or_default().to_string(),
        version_code: root.attr("versionCode").and_then(AttrValue::as_int).unwrap_or(0),
        split: root.attr("split").and_then(AttrValue::as_str).map(str::to_string),
        ..ManifestModel::default()
    };

    for e in elements.iter().filter(|e| e.depth == 1) {
        match e.name.as_str() {
            "uses-permission" | "uses-permission-sdk-23" | "uses-permission-sdk-m" => {
                if let Some(name) = e.attr("name").and_then(AttrValue::as_str) {
                    let name = name.trim();
                    if !name.is_empty() && !model.uses_permissions.iter().any(|p| p == name) {
                        model.uses_permissions.push(name.to_string());
                    }
                }
            }
            "uses-sdk" => {
                model.sdk_versions.min = e.attr("minSdkVersion").and_then(AttrValue::as_int);
                model.sdk_versions.target = e.attr("targetSdkVersion").and_then(AttrValue::as_int);
            }
            _ => {}
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> Vec<u8> {
        std::fs::read(format!("{}/fixtures/apk/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    #[test]
    fn permissions_in_document_order() {
        let m = decode_binary_manifest(&fixture("camera_location.axml")).unwrap();
        assert_eq!(
            m.uses_permissions,
            ["android.permission.CAMERA", "android.permission.ACCESS_FINE_LOCATION"]
        );
        assert_eq!(m.package_name, "com.fixture.axml");
        assert_eq!(m.version_code, 2);
        assert_eq!(m.sdk_versions.min, Some(26));
        assert_eq!(m.sdk_versions.target, Some(34));
    }

    #[test]
    fn random_bytes_fail_closed() {
        let mut seed = 0x1234_5678u32;
        for len in [0usize, 3, 8, 64, 500] {
            let bytes: Vec<u8> = (0..len)
                .map(|_| {
                    seed = seed.wrapping_mul(1_103_515_245).wrapping_add(12345);
                    (seed >> 16) as u8
                })
                .collect();
            let err = decode_binary_manifest(&bytes).unwrap_err();
            assert!(matches!(
                err,
                AxmlError::TruncatedChunk { .. } | AxmlError::UnsupportedChunkType { .. }
            ));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = fixture("camera_location.axml");
        for cut in [4, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_binary_manifest(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn bad_string_index() {
        let mut bytes = fixture("camera_location.axml");
        // first start-element chunk: overwrite its name index with a huge value
        let pos = bytes
            .windows(4)
            .position(|w| w == [0x02, 0x01, 0x10, 0x00])
            .unwrap();
        bytes[pos + 20..pos + 24].copy_from_slice(&0x00ff_ffffu32.to_le_bytes());
        assert!(matches!(
            decode_binary_manifest(&bytes),
            Err(AxmlError::StringIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn utf16_length_prefix() {
        let mut entry = vec![2u8, 0];
        entry.extend("hé".encode_utf16().flat_map(|u| u.to_le_bytes()));
        entry.extend([0, 0]);
        assert_eq!(decode_utf16_entry(&entry).as_deref(), Some("hé"));
    }

    #[test]
    fn utf8_length_prefix() {
        let entry = [2u8, 3, b'h', 0xc3, 0xa9, 0];
        assert_eq!(decode_utf8_entry(&entry).as_deref(), Some("hé"));
    }
}
