use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logitstore::{topk_sparsify, SparseLogitRecord, TokenChunk};
use crate::model::{forward, ModelParams};
use crate::numerics::softmax_rows;
use crate::scalar::Scalar;

pub const SHARD_MAGIC: &[u8; 4] = b"SLOG";
pub const SHARD_VERSION: u32 = 1;
const HEADER_BYTES: usize = 24;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "shard frame",
        detail: detail.into(),
    }
}

/// Decoded contents of one shard: the chunks it covers and one record per
/// token of those chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardData {
    pub vocab: u32,
    pub k: u32,
    pub chunks: Vec<TokenChunk>,
    pub records: Vec<SparseLogitRecord>,
}

impl ShardData {
    /// Uncompressed frame: header, records, then the token section
    /// (`chunk_len`, chunk count, and per chunk its tokens and boundaries).
    pub fn encode(&self) -> Result<Vec<u8>> {
        let k = self.k as usize;
        let chunk_len = self.chunks.first().map_or(0, TokenChunk::len);
        let tokens: usize = self.chunks.iter().map(TokenChunk::len).sum();
        if tokens != self.records.len() || self.chunks.iter().any(|c| c.len() != chunk_len) {
            return Err(bad("chunks and records disagree"));
        }
        let mut out = Vec::with_capacity(HEADER_BYTES + self.records.len() * k * 8 + tokens * 4 + 8);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            if r.k() != k || r.probs.len() != k {
                return Err(bad(format!("record with {} entries, expected {k}", r.k())));
            }
            r.indices.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
            r.probs.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
        }
        out.extend_from_slice(&(chunk_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            c.tokens.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
            out.extend_from_slice(&(c.doc_boundaries.len() as u32).to_le_bytes());
            c.doc_boundaries.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != SHARD_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != SHARD_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let vocab = cur.u32()?;
        let k = cur.u32()?;
        let count = usize::try_from(cur.u64()?).map_err(|_| bad("record count"))?;
        let records = (0..count)
            .map(|_| {
                Ok(SparseLogitRecord {
                    indices: cur.u32s(k as usize)?,
                    probs: cur.u32s(k as usize)?.into_iter().map(f32::from_bits).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chunk_len = cur.u32()? as usize;
        let n_chunks = cur.u32()? as usize;
        let chunks = (0..n_chunks)
            .map(|_| {
                let tokens = cur.u32s(chunk_len)?;
                let n = cur.u32()? as usize;
                Ok(TokenChunk {
                    tokens,
                    doc_boundaries: cur.u32s(n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if chunk_len * n_chunks != count {
            return Err(bad("token section does not cover the records"));
        }
        Ok(Self {
            vocab,
            k,
            chunks,
            records,
        })
    }

    /// Size of the record section alone.
    pub fn payload_bytes(&self) -> usize {
        self.records.len() * self.k as usize * 8
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("unexpected end of frame"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// One shard file as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub tokens: u64,
    /// CRC-32 of the uncompressed frame, as found in the gzip trailer.
    pub crc32: u32,
    /// Compressed file size.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub vocab: usize,
    pub k: usize,
    pub chunk_len: usize,
    /// `None` keeps the corpus order.
    pub perm_seed: Option<u64>,
    pub codec: String,
    pub shards: Vec<ShardEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ShardManifest {
    pub fn total_tokens(&self) -> u64 {
        self.shards.iter().map(|s| s.tokens).sum()
    }

    pub fn total_chunks(&self) -> usize {
        (self.total_tokens() / self.chunk_len as u64) as usize
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.shards[i].path)
    }

    /// The chunk order used when the shards were written.
    pub fn chunk_order(&self) -> Vec<usize> {
        chunk_permutation(self.total_chunks(), self.perm_seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_slice(&bytes)?;
        if m.codec != "gzip" {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("unknown codec {}", m.codec),
            });
        }
        if m.shards.iter().any(|s| s.tokens == 0 || s.tokens % m.chunk_len as u64 != 0) {
            return Err(Error::Format {
                what: "manifest",
                detail: "shard token counts must be positive multiples of chunk_len".into(),
            });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }
}

/// Order in which chunks are written: a seeded shuffle, or identity.
pub fn chunk_permutation(n: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    order
}

/// Compresses `data` as one gzip member and writes it to `path`.
pub fn write_shard(path: &Path, data: &ShardData) -> Result<ShardEntry> {
    let frame = data.encode()?;
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&frame).map_err(|e| Error::io(path, e))?;
    let gz = enc.finish().map_err(|e| Error::io(path, e))?;
    fs::write(path, &gz).map_err(|e| Error::io(path, e))?;
    Ok(ShardEntry {
        path: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        tokens: data.records.len() as u64,
        crc32: gzip_trailer_crc(&gz).expect("fresh gzip member"),
        bytes: gz.len() as u64,
    })
}

pub(crate) fn gzip_trailer_crc(gz: &[u8]) -> Option<u32> {
    let t = gz.len().checked_sub(8)?;
    Some(u32::from_le_bytes(gz[t..t + 4].try_into().unwrap()))
}

/// Verifies and decodes one compressed shard held in memory.
pub fn decode_shard(path: &Path, entry: &ShardEntry, gz: &[u8]) -> Result<ShardData> {
    if (gz.len() as u64) < entry.bytes {
        return Err(Error::Truncated { shard: path.into() });
    }
    let checksum = || Error::Checksum { shard: path.into() };
    if gz.len() as u64 != entry.bytes || gzip_trailer_crc(gz) != Some(entry.crc32) {
        return Err(checksum());
    }
    let mut frame = Vec::new();
    // The decoder also checks the trailer CRC against the inflated bytes.
    GzDecoder::new(gz).read_to_end(&mut frame).map_err(|_| checksum())?;
    let mut crc = flate2::Crc::new();
    crc.update(&frame);
    if crc.sum() != entry.crc32 {
        return Err(checksum());
    }
    let data = ShardData::decode(&frame)?;
    if data.records.len() as u64 != entry.tokens {
        return Err(Error::Mismatch(format!(
            "{} holds {} records, manifest says {}",
            path.display(),
            data.records.len(),
            entry.tokens
        )));
    }
    Ok(data)
}

pub fn read_shard(manifest: &ShardManifest, i: usize) -> Result<ShardData> {
    let path = manifest.shard_path(i);
    let mut gz = Vec::new();
    File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut gz))
        .map_err(|e| Error::io(&path, e))?;
    decode_shard(&path, &manifest.shards[i], &gz)
}

/// Teacher top-K records for every token of `chunk`.
pub fn teacher_records<T: Scalar>(
    teacher: &ModelParams<T>,
    chunk: &TokenChunk,
    k: usize,
) -> Result<Vec<SparseLogitRecord>> {
    let logits = forward(teacher, &chunk.tokens, &chunk.doc_boundaries)?;
    let probs = softmax_rows(&logits);
    (0..probs.rows()).map(|r| topk_sparsify(probs.row(r), k)).collect()
}

/// Runs the teacher over every chunk and writes the records, in permuted
/// chunk order, as gzip shards of `tokens_per_shard` records plus a
/// `manifest.json` in `out_dir`.
pub fn generate_logit_shards<T: Scalar>(
    teacher: &ModelParams<T>,
    chunks: &[TokenChunk],
    k: usize,
    perm_seed: Option<u64>,
    tokens_per_shard: usize,
    out_dir: &Path,
) -> Result<ShardManifest> {
    let vocab = teacher.config.vocab;
    let chunk_len = chunks.first().ok_or(Error::Empty("chunks"))?.len();
    if chunks.iter().any(|c| c.len() != chunk_len) {
        return Err(Error::shape("generate_logit_shards", "chunks differ in length"));
    }
    if k == 0 || k > vocab {
        return Err(Error::TopKTooLarge { k, vocab });
    }
    if tokens_per_shard == 0 || tokens_per_shard % chunk_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "tokens_per_shard {tokens_per_shard} must be a positive multiple of chunk_len {chunk_len}"
        )));
    }
    if let Some(&t) = chunks.iter().flat_map(|c| &c.tokens).find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let order = chunk_permutation(chunks.len(), perm_seed);
    let per_shard = tokens_per_shard / chunk_len;
    let mut shards = Vec::new();
    for (s, ids) in order.chunks(per_shard).enumerate() {
        let mut data = ShardData {
            vocab: vocab as u32,
            k: k as u32,
            chunks: Vec::with_capacity(ids.len()),
            records: Vec::with_capacity(ids.len() * chunk_len),
        };
        for &i in ids {
            data.records.extend(teacher_records(teacher, &chunks[i], k)?);
            data.chunks.push(chunks[i].clone());
        }
        shards.push(write_shard(&out_dir.join(format!("shard-{s:05}.slog.gz")), &data)?);
    }
    let manifest = ShardManifest {
        vocab,
        k,
        chunk_len,
        perm_seed,
        codec: "gzip".into(),
        shards,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
