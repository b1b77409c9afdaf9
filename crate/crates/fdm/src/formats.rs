//! Binary file formats: raw tensors and training checkpoints. All integers
//! and floats are little-endian.
//!
//! Raw tensor: `"FDMT"`, `u32` version, `u32` rank, `rank × u64` dims, then
//! the `f32` data row-major.
//!
//! Checkpoint: `"FDMC"`, `u32` version, the config hash and identity text
//! (`u32` length + UTF-8 each), `u64` step, `u64` skipped steps, the trainer's
//! random stream (32-byte seed, `u64` stream, `u128` word position), then a
//! `u32` count of named tensors, each `u32` name length + name, `u32` rank,
//! `rank × u64` dims and `f32` data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use fdm_core::trainer::RngState;

const TENSOR_MAGIC: &[u8; 4] = b"FDMT";
const TENSOR_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FDMC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

/// Writes via a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u64(out, d as u64);
    }
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        let mut b = vec![0u8; n];
        self.r.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| FormatError::Corrupt("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(FormatError::Corrupt(format!("rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| FormatError::Corrupt(format!("dims {dims:?}")))?;
        let mut raw = vec![0u8; n * 4];
        self.r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((dims, data))
    }

    fn expect_end(&mut self) -> Result<(), FormatError> {
        let mut b = [0u8; 1];
        match self.r.read(&mut b)? {
            0 => Ok(()),
            _ => Err(FormatError::Corrupt("trailing bytes".into())),
        }
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match data");
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, TENSOR_VERSION);
    put_tensor(&mut out, dims, data);
    out
}

pub fn decode_tensor(r: impl Read) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
    let mut c = Cursor { r };
    let magic: [u8; 4] = c.bytes()?;
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = c.u32()?;
    if version != TENSOR_VERSION {
        return Err(FormatError::Version(version));
    }
    let t = c.tensor()?;
    c.expect_end()?;
    Ok(t)
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> io::Result<()> {
    write_atomic(path, &encode_tensor(dims, data))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
    decode_tensor(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub step: u64,
    pub skipped: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &self.config_text);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.skipped);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_tensor(&mut out, &t.dims, &t.data);
        }
        out
    }

    pub fn decode(r: impl Read) -> Result<Self, FormatError> {
        let mut c = Cursor { r };
        let magic: [u8; 4] = c.bytes()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic(magic));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(version));
        }
        let config_hash = c.string()?;
        let config_text = c.string()?;
        let step = c.u64()?;
        let skipped = c.u64()?;
        let rng = RngState {
            seed: c.bytes()?,
            stream: c.u64()?,
            word_pos: u128::from_le_bytes(c.bytes()?),
        };
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = c.string()?;
            let (dims, data) = c.tensor()?;
            tensors.push(NamedTensor { name, dims, data });
        }
        c.expect_end()?;
        Ok(Self {
            config_hash,
            config_text,
            step,
            skipped,
            rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_lossless() {
        let data = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, -3.25e-7];
        for dims in [vec![6], vec![2, 3], vec![1, 2, 3], vec![1, 1, 2, 3]] {
            let bytes = encode_tensor(&dims, &data);
            let (d, v) = decode_tensor(&bytes[..]).unwrap();
            assert_eq!(d, dims);
            assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        let mut bytes = encode_tensor(&[2], &[1.0, 2.0]);
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes[..]), Err(FormatError::Magic(_))));
        let bytes = encode_tensor(&[2], &[1.0, 2.0]);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            config_hash: "ab".repeat(32),
            config_text: "[model]\nseed = 1\n".into(),
            step: 42,
            skipped: 1,
            rng: RngState {
                seed: [7; 32],
                stream: 3,
                word_pos: 1 << 70,
            },
            tensors: vec![
                NamedTensor {
                    name: "params.a".into(),
                    dims: vec![2, 2],
                    data: vec![1.0, 2.0, 3.0, 4.0],
                },
                NamedTensor {
                    name: "ema.a".into(),
                    dims: vec![1],
                    data: vec![-1.0],
                },
            ],
        };
        let back = Checkpoint::decode(&ck.encode()[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.tensor("ema.a").unwrap().data, vec![-1.0]);
    }
}
