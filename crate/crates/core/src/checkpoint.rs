//! "P3DW" checkpoint format.
//!
//! Layout: magic `P3DW`, u32 version (=1), u32 entry count; then per entry
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims\[rank\] and the
//! raw little-endian float32 values. Write→read→write is byte-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"P3DW";
pub const VERSION: u32 = 1;

/// Name of the entry that carries the embedded run-config text.
pub const CONFIG_ENTRY: &str = "__config__";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if numel != values.len() {
            return Err(Error::Checkpoint(format!(
                "entry dims {dims:?} expect {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Entry { name: name.into(), dims, values })
    }

    /// Pack a UTF-8 text block into a rank-1 entry. The first value carries
    /// the byte length as u32 bits; the rest are the zero-padded bytes
    /// reinterpreted four at a time.
    pub fn from_text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes();
        let mut values = Vec::with_capacity(1 + bytes.len().div_ceil(4));
        values.push(f32::from_bits(bytes.len() as u32));
        for chunk in bytes.chunks(4) {
            let mut quad = [0u8; 4];
            quad[..chunk.len()].copy_from_slice(chunk);
            values.push(f32::from_bits(u32::from_le_bytes(quad)));
        }
        Entry { name: name.into(), dims: vec![values.len() as u32], values }
    }

    /// Inverse of [`Entry::from_text`].
    pub fn to_text(&self) -> Result<String> {
        if self.values.is_empty() {
            return Err(Error::Checkpoint(format!("entry {} is not a text block", self.name)));
        }
        let len = self.values[0].to_bits() as usize;
        if len > (self.values.len() - 1) * 4 {
            return Err(Error::Checkpoint(format!(
                "entry {} text length {len} exceeds payload",
                self.name
            )));
        }
        let mut bytes = Vec::with_capacity(len);
        for v in &self.values[1..] {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes.truncate(len);
        String::from_utf8(bytes)
            .map_err(|e| Error::Checkpoint(format!("entry {}: invalid UTF-8: {e}", self.name)))
    }
}

pub fn write(w: &mut impl Write, entries: &[Entry]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(e.dims.len() as u8)?;
        for &d in &e.dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in &e.values {
            w.write_u32::<LittleEndian>(v.to_bits())?;
        }
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<Vec<Entry>> {
    let bad = |m: String| Error::Checkpoint(m);
    let io = |e: std::io::Error| Error::Checkpoint(format!("read failed: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("invalid name: {e}")))?;
        let rank = r.read_u8().map_err(io)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(io)?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f32::from_bits(r.read_u32::<LittleEndian>().map_err(io)?));
        }
        entries.push(Entry { name, dims, values });
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest).map_err(io)? {
        0 => Ok(entries),
        _ => Err(bad("trailing bytes after final entry".into())),
    }
}

pub fn write_file(path: &Path, entries: &[Entry]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w, entries).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Entry>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<Entry> {
        vec![
            Entry::new("net.stem.kernel", vec![2, 1, 1, 3, 3], (0..18).map(|v| v as f32 * 0.5).collect())
                .unwrap(),
            Entry::new("net.stem.bias", vec![2], vec![0.0, -2.19]).unwrap(),
            Entry::from_text(CONFIG_ENTRY, "model.variant = acs3d\nseed = 7\n"),
        ]
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let entries = sample_entries();
        let mut buf = Vec::new();
        write(&mut buf, &entries).unwrap();
        let back = read(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(entries, back);
    }

    #[test]
    fn text_entry_roundtrips_any_length() {
        for text in ["", "a", "abcd", "abcde", "key = value\n# comment\n"] {
            let e = Entry::from_text("t", text);
            assert_eq!(e.to_text().unwrap(), text);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write(&mut buf, &sample_entries()).unwrap();
        buf[0] = b'X';
        assert!(read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut buf = Vec::new();
        write(&mut buf, &sample_entries()).unwrap();
        buf.push(0);
        assert!(read(&mut buf.as_slice()).is_err());
    }
}
