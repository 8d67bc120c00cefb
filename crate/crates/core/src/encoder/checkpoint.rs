//! Checkpoint container.
//!
//! ```text
//! magic        8 bytes  "CFENCKPT"
//! version      u32 LE   (1)
//! header_len   u64 LE
//! header       JSON: config, vocab, step, rng, groups [{name, shape}]
//! param_count  u64 LE
//! params       param_count × f64 LE, in Layout order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::rng::RngState;

const MAGIC: &[u8; 8] = b"CFENCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab: Vocab,
    step: u64,
    rng: RngState,
    groups: Vec<GroupHeader>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct GroupHeader {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder, step: u64, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            encoder,
            step,
            rng: RngState::capture(rng),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = &self.encoder;
        let header = Header {
            config: enc.config.clone(),
            vocab: enc.vocab.clone(),
            step: self.step,
            rng: self.rng.clone(),
            groups: enc
                .layout
                .groups
                .iter()
                .map(|g| GroupHeader {
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(32 + header.len() + 8 * enc.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(enc.params.len() as u64).to_le_bytes());
        for p in &enc.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (head, rest) = r.split_at(header_len);
        r = rest;
        let header: Header = serde_json::from_slice(head)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if r.len() != count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                r.len()
            )));
        }
        let params = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let encoder = Encoder::from_parts(header.config, header.vocab, params)?;
        let expected: Vec<GroupHeader> = encoder
            .layout
            .groups
            .iter()
            .map(|g| GroupHeader {
                name: g.name.clone(),
                shape: g.shape.clone(),
            })
            .collect();
        if expected != header.groups {
            return Err(Error::Checkpoint("group table does not match config".into()));
        }
        Ok(Checkpoint {
            encoder,
            step: header.step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
