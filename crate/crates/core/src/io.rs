//! Shared file plumbing: the magic + JSON-header + payload container used by
//! every binary artifact, little-endian codecs, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const PREFIX_LEN: usize = 16;

/// Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, zero
/// padding up to `align`, payload.
pub(crate) fn write_container(magic: &[u8; 8], header: &[u8], align: usize, payload: &[u8]) -> Vec<u8> {
    let start = payload_start(header.len(), align);
    let mut out = Vec::with_capacity(start + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.resize(start, 0);
    out.extend_from_slice(payload);
    out
}

pub(crate) fn payload_start(header_len: usize, align: usize) -> usize {
    (PREFIX_LEN + header_len).div_ceil(align) * align
}

/// Splits a container into its JSON header and payload.
pub(crate) fn read_container<'a>(bytes: &'a [u8], magic: &[u8; 8], align: usize) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < PREFIX_LEN || &bytes[..8] != magic {
        return Err(Error::format(format!(
            "missing '{}' file magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let start = payload_start(hlen, align);
    if bytes.len() < start {
        return Err(Error::format("truncated header"));
    }
    if bytes[PREFIX_LEN + hlen..start].iter().any(|&b| b != 0) {
        return Err(Error::format("nonzero header padding"));
    }
    Ok((&bytes[PREFIX_LEN..PREFIX_LEN + hlen], &bytes[start..]))
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_u16s(out: &mut Vec<u8>, vals: &[u16]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn get_u16s(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Bounds-checked payload slice.
pub(crate) fn slice(payload: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    payload
        .get(offset..offset + len)
        .ok_or_else(|| Error::format(format!("payload range {offset}+{len} out of bounds")))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_alignment() {
        let bytes = write_container(b"TESTMAGC", b"{}", 64, &[1, 2, 3]);
        assert_eq!(bytes.len(), 64 + 3);
        let (h, p) = read_container(&bytes, b"TESTMAGC", 64).unwrap();
        assert_eq!(h, b"{}");
        assert_eq!(p, &[1, 2, 3]);
        assert!(read_container(&bytes, b"OTHERMAG", 64).is_err());
    }

    #[test]
    fn packed_container_has_no_padding() {
        let bytes = write_container(b"TESTMAGC", b"{}", 1, &[9]);
        assert_eq!(bytes.len(), 16 + 2 + 1);
    }
}
