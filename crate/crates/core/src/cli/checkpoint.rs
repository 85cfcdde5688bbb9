//! Framed little-endian array container used for checkpoints and sample files.
//!
//! Layout: magic `MUMAE\x01`, u32 array count, then per array a u16 name
//! length, the UTF-8 name, a u8 rank, rank u32 dims and the f32 payload;
//! a CRC32 of everything before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"MUMAE\x01";
const MAGIC_STEM: &[u8; 5] = b"MUMAE";

/// Reserved array names; they never collide with parameter names.
pub const CONFIG_ARRAY: &str = "@config";
pub const RNG_ARRAY: &str = "@rng";

/// Ordered named arrays.
pub type Arrays = Vec<(String, Tensor)>;

pub fn encode(arrays: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(arrays.len()).map_err(|_| Error::Checkpoint("too many arrays".into()))?.to_le_bytes());
    for (name, t) in arrays {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Arrays> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..5] != MAGIC_STEM {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    if bytes[5] != MAGIC[5] {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            bytes[5], MAGIC[5]
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: MAGIC.len() };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(out)
}

pub fn write_arrays(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(arrays)?)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Arrays> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Text as one f32 per byte; every byte value is exact in f32.
pub fn text_array(text: &str) -> Tensor {
    Tensor::vector(text.bytes().map(f64::from).collect())
}

pub fn array_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                .then_some(v as u8)
                .ok_or_else(|| Error::Checkpoint("text array holds a non-byte value".into()))
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("text array is not UTF-8".into()))
}

/// A u64 as four 16-bit chunks, low first; each chunk is exact in f32.
pub fn u64_array(v: u64) -> Tensor {
    Tensor::vector((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect())
}

pub fn array_u64(t: &Tensor) -> Result<u64> {
    if t.len() != 4 {
        return Err(Error::Checkpoint("u64 array must hold 4 chunks".into()));
    }
    let mut v = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if !(c.fract() == 0.0 && (0.0..65536.0).contains(&c)) {
            return Err(Error::Checkpoint("invalid u64 chunk".into()));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}

/// Parameters plus the config text and RNG seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config_text: String,
    /// Seed of every random stream used by the producing run.
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Arrays = vec![
            (CONFIG_ARRAY.to_string(), text_array(&self.config_text)),
            (RNG_ARRAY.to_string(), u64_array(self.seed)),
        ];
        arrays.extend(self.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        encode(&arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut config_text = None;
        let mut seed = None;
        for (name, t) in decode(bytes)? {
            match name.as_str() {
                CONFIG_ARRAY => config_text = Some(array_text(&t)?),
                RNG_ARRAY => seed = Some(array_u64(&t)?),
                _ if name.starts_with('@') => return Err(Error::Checkpoint(format!("unknown reserved array `{name}`"))),
                _ => {
                    if params.contains(&name) {
                        return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
                    }
                    params.insert(name, t);
                }
            }
        }
        Ok(Self {
            params,
            config_text: config_text.ok_or_else(|| Error::Checkpoint("missing config array".into()))?,
            seed: seed.ok_or_else(|| Error::Checkpoint("missing rng array".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
