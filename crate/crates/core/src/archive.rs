//! Binary container for checkpoints and trainer state.
//!
//! Layout: magic, format version, kind string, text entries, named `f64`
//! arrays, then a SHA-256 of everything before it. All integers are
//! little-endian `u64` except the `u32` version.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSAUARC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub text: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u64::<LittleEndian>(s.len() as u64).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn get_str(c: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let n = c.read_u64::<LittleEndian>()? as usize;
    if n > c.get_ref().len() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "string length out of range"));
    }
    let mut b = vec![0u8; n];
    c.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Archive { kind: kind.to_string(), ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.text.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.text
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("archive {:?}: missing entry {key:?}", self.kind)))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Data(format!("archive {:?}: bad value {v:?} for {key:?}", self.kind)))
    }

    pub fn put_array(&mut self, name: &str, t: Tensor) {
        self.arrays.insert(name.to_string(), t);
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| Error::Data(format!("archive {:?}: missing array {name:?}", self.kind)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
        put_str(&mut out, &self.kind);
        out.write_u64::<LittleEndian>(self.text.len() as u64).expect("vec write");
        for (k, v) in &self.text {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.write_u64::<LittleEndian>(self.arrays.len() as u64).expect("vec write");
        for (k, t) in &self.arrays {
            put_str(&mut out, k);
            out.write_u64::<LittleEndian>(t.shape().len() as u64).expect("vec write");
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).expect("vec write");
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v).expect("vec write");
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("archive: {m}"));
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an archive (bad magic)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch".into()));
        }
        let mut c = Cursor::new(&body[MAGIC.len()..]);
        let io = |e: std::io::Error| bad(format!("truncated or corrupt: {e}"));
        let version = c.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = get_str(&mut c).map_err(io)?;
        let mut a = Archive::new(&kind);
        let nt = c.read_u64::<LittleEndian>().map_err(io)?;
        for _ in 0..nt {
            let k = get_str(&mut c).map_err(io)?;
            let v = get_str(&mut c).map_err(io)?;
            a.text.insert(k, v);
        }
        let na = c.read_u64::<LittleEndian>().map_err(io)?;
        for _ in 0..na {
            let k = get_str(&mut c).map_err(io)?;
            let nd = c.read_u64::<LittleEndian>().map_err(io)? as usize;
            if nd > 8 {
                return Err(bad(format!("array {k:?} has {nd} dims")));
            }
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(c.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 8 > body.len() {
                return Err(bad(format!("array {k:?} larger than file")));
            }
            let mut data = vec![0.0; n];
            c.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            a.arrays.insert(k, Tensor::new(shape, data)?);
        }
        if (c.position() as usize) != body.len() - MAGIC.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(a)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Atomic file replacement: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
