//! Little-endian encoding shared by the binary file formats.
//!
//! Every file starts with an 8-byte magic, a `u32` version and a
//! length-prefixed JSON header.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{FlexError, Result};

#[derive(Debug, Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        for x in v {
            self.u32(*x);
        }
    }
}

/// Cursor over a byte slice; every read fails with `None` past the end.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.bytes(N).map(|b| b.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.array::<1>().map(|b| b[0])
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.bytes(n.checked_mul(4)?)?;
        Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Option<Vec<u32>> {
        let b = self.bytes(n.checked_mul(4)?)?;
        Some(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_preamble<H: Serialize>(out: &mut Encoder, magic: &[u8; 8], version: u32, header: &H) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    out.buf.extend_from_slice(magic);
    out.u32(version);
    out.u64(json.len() as u64);
    out.buf.extend_from_slice(&json);
    Ok(json)
}

/// Checks magic and version and parses the JSON header. Returns the header,
/// its raw bytes and the decoder positioned after it.
pub fn read_preamble<'a, H: DeserializeOwned>(
    path: &Path,
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, &'a [u8], Decoder<'a>)> {
    let mut d = Decoder::new(bytes);
    let got = d.bytes(8).ok_or_else(|| FlexError::format(path, "file shorter than its magic"))?;
    if got != magic {
        return Err(FlexError::format(
            path,
            format!("bad magic {:?}, expected {}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
        ));
    }
    let v = d.u32().ok_or_else(|| FlexError::format(path, "truncated version"))?;
    if v != version {
        return Err(FlexError::format(path, format!("unsupported version {v}, expected {version}")));
    }
    let n = d.u64().ok_or_else(|| FlexError::format(path, "truncated header length"))? as usize;
    let raw = d.bytes(n).ok_or_else(|| FlexError::format(path, "truncated header"))?;
    let header = serde_json::from_slice(raw).map_err(|e| FlexError::format(path, format!("corrupt header: {e}")))?;
    Ok((header, raw, d))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| FlexError::input(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| FlexError::input(path, e))?;
    Ok(bytes)
}

/// Writes through a temporary sibling so a failed run never leaves a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FlexError::output(path, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| FlexError::output(path, e))?;
    f.write_all(bytes).map_err(|e| FlexError::output(path, e))?;
    f.sync_all().map_err(|e| FlexError::output(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FlexError::output(path, e))
}
