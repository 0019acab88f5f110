//! Reads the type-identifier table of a dex file.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DexError {
    #[error("not a dex file (bad magic)")]
    BadMagic,
    #[error("corrupt id table: {0}")]
    CorruptIdTable(&'static str),
}

const HEADER_SIZE: usize = 0x70;

fn u32_at(b: &[u8], off: usize) -> Result<u32, DexError> {
    b.get(off..off + 4)
        .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        .ok_or(DexError::CorruptIdTable("offset past end of file"))
}

fn read_uleb128(b: &[u8], mut off: usize) -> Result<(u32, usize), DexError> {
    let mut result = 0u32;
    for shift in (0..35).step_by(7) {
        let byte = *b.get(off).ok_or(DexError::CorruptIdTable("truncated uleb128"))?;
        off += 1;
        result |= u32::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok((result, off));
        }
    }
    Err(DexError::CorruptIdTable("uleb128 too long"))
}

/// Decodes a NUL-terminated MUTF-8 string starting at `off`.
fn read_mutf8(b: &[u8], mut off: usize, utf16_len: usize) -> Result<String, DexError> {
    let mut units: Vec<u16> = Vec::with_capacity(utf16_len);
    let bad = DexError::CorruptIdTable("invalid MUTF-8 string data");
    loop {
        let a = *b.get(off).ok_or(DexError::CorruptIdTable("unterminated string"))?;
        if a == 0 {
            break;
        }
        let unit = if a < 0x80 {
            off += 1;
            u16::from(a)
        } else if a & 0xe0 == 0xc0 {
            let b1 = *b.get(off + 1).ok_or(bad.clone())?;
            off += 2;
            (u16::from(a & 0x1f) << 6) | u16::from(b1 & 0x3f)
        } else if a & 0xf0 == 0xe0 {
            let b1 = *b.get(off + 1).ok_or(bad.clone())?;
            let b2 = *b.get(off + 2).ok_or(bad.clone())?;
            off += 3;
            (u16::from(a & 0x0f) << 12) | (u16::from(b1 & 0x3f) << 6) | u16::from(b2 & 0x3f)
        } else {
            return Err(bad);
        };
        units.push(unit);
    }
    if units.len() != utf16_len {
        return Err(DexError::CorruptIdTable("string length does not match its prefix"));
    }
    String::from_utf16(&units).map_err(|_| bad)
}

/// Converts a class descriptor (`Lcom/foo/Bar;`) to its dotted name.
/// Primitive and array descriptors yield `None`.
pub fn descriptor_to_dotted(descriptor: &str) -> Option<String> {
    let inner = descriptor.strip_prefix('L')?.strip_suffix(';')?;
    if inner.is_empty() {
        return None;
    }
    Some(inner.replace('/', "."))
}

/// Returns the type descriptors listed in the `type_ids` table, in table order.
pub fn type_descriptors(dex: &[u8]) -> Result<Vec<String>, DexError> {
    if dex.len() < 8 || &dex[0..4] != b"dex\n" || dex[7] != 0 {
        return Err(DexError::BadMagic);
    }
    if dex.len() < HEADER_SIZE {
        return Err(DexError::CorruptIdTable("truncated header"));
    }
    let string_ids_size = u32_at(dex, 56)? as usize;
    let string_ids_off = u32_at(dex, 60)? as usize;
    let type_ids_size = u32_at(dex, 64)? as usize;
    let type_ids_off = u32_at(dex, 68)? as usize;

    let table_fits = |off: usize, n: usize| {
        n.checked_mul(4)
            .and_then(|len| off.checked_add(len))
            .is_some_and(|end| end <= dex.len())
    };
    if !table_fits(string_ids_off, string_ids_size) {
        return Err(DexError::CorruptIdTable("string_ids table out of bounds"));
    }
    if !table_fits(type_ids_off, type_ids_size) {
        return Err(DexError::CorruptIdTable("type_ids table out of bounds"));
    }

    let mut out = Vec::with_capacity(type_ids_size);
    for i in 0..type_ids_size {
        let descriptor_idx = u32_at(dex, type_ids_off + i * 4)? as usize;
        if descriptor_idx >= string_ids_size {
            return Err(DexError::CorruptIdTable("type descriptor index out of range"));
        }
        let data_off = u32_at(dex, string_ids_off + descriptor_idx * 4)? as usize;
        let (len, start) = read_uleb128(dex, data_off)?;
        out.push(read_mutf8(dex, start, len as usize)?);
    }
    Ok(out)
}

/// Returns the fully-qualified class names declared in the type table.
pub fn extract_code_identifiers(dex: &[u8]) -> Result<BTreeSet<String>, DexError> {
    Ok(type_descriptors(dex)?
        .iter()
        .filter_map(|d| descriptor_to_dotted(d))
        .collect())
}
