//! File formats. Binary layouts are little-endian and end with a CRC-32 of
//! everything before it.

mod csvmat;
mod model;
mod pnm;

pub use csvmat::{read_csv_matrix, write_csv_matrix, parse_csv_matrix, format_csv_matrix};
pub use model::{
    decode_subspace, decode_table, encode_subspace, encode_table, load_model, load_network,
    save_model, save_network, ModelFile, NetworkDoc, Sidecar,
};
pub use pnm::{
    colorize_scale, decode_pnm, encode_pnm, float_to_byte, gray_of_rgb, read_image, write_image, ImageBuffer,
    PnmFormat,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    BadMaxval(u64),
    #[error("truncated payload: expected {expected} bytes or samples, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("sample out of range or unparsable: {0}")]
    BadSample(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("bad magic, expected {0}")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("row {row} has {got} fields, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("row {row} column {col}: cannot parse {text:?} as a number")]
    Parse { row: usize, col: usize, text: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("payload reference {0:?} not found")]
    MissingPayload(String),
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = BinWriter { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

#[derive(Debug)]
pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Check magic, checksum and version; returns the reader and version.
    pub fn open(bytes: &'a [u8], magic: &'static [u8; 4], max_version: u32) -> Result<(Self, u32), IoError> {
        let name = std::str::from_utf8(magic).unwrap_or("?");
        if bytes.len() < 12 {
            return Err(IoError::Truncated {
                expected: 12,
                got: bytes.len(),
            });
        }
        if &bytes[..4] != magic {
            return Err(IoError::BadMagic(name));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(IoError::Checksum);
        }
        let mut r = BinReader { data: body, pos: 4 };
        let version = r.u32()?;
        if version == 0 || version > max_version {
            return Err(IoError::Version(version));
        }
        Ok((r, version))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.data.len() {
            return Err(IoError::Truncated {
                expected: self.pos + n,
                got: self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn i64(&mut self) -> Result<i64, IoError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn finish(self) -> Result<(), IoError> {
        if self.pos != self.data.len() {
            return Err(IoError::Invalid(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_and_magic() {
        let mut w = BinWriter::new(b"TEST", 1);
        w.f64(1.5);
        let mut bytes = w.finish();
        let (mut r, v) = BinReader::open(&bytes, b"TEST", 1).unwrap();
        assert_eq!(v, 1);
        assert_eq!(r.f64().unwrap(), 1.5);
        r.finish().unwrap();
        bytes[9] ^= 1;
        assert!(matches!(BinReader::open(&bytes, b"TEST", 1), Err(IoError::Checksum)));
        assert!(matches!(BinReader::open(&bytes, b"NOPE", 1), Err(IoError::BadMagic(_))));
    }
}
