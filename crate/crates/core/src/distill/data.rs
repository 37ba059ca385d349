use crate::error::{Error, Result};
use crate::logitstore::{stream_shards, ShardManifest, ShardStream, SparseLogitRecord, TokenChunk};

/// One training sequence, with teacher records when distilling.
pub type TrainItem = (TokenChunk, Option<Vec<SparseLogitRecord>>);

/// An endless, deterministic supply of training sequences.
pub trait ChunkSource {
    fn next_item(&mut self) -> Result<TrainItem>;

    fn skip(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.next_item()?;
        }
        Ok(())
    }
}

/// Streams a manifest's shards in order, starting over after each epoch.
pub struct ManifestSource {
    manifest: ShardManifest,
    stream: Option<ShardStream>,
    epoch: u64,
}

impl ManifestSource {
    pub fn new(manifest: &ShardManifest) -> Result<Self> {
        if manifest.total_tokens() == 0 {
            return Err(Error::Empty("manifest"));
        }
        Ok(Self {
            manifest: manifest.clone(),
            stream: None,
            epoch: 0,
        })
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> u64 {
        self.epoch.saturating_sub(1)
    }
}

impl ChunkSource for ManifestSource {
    fn next_item(&mut self) -> Result<TrainItem> {
        loop {
            if self.stream.is_none() {
                self.stream = Some(stream_shards(&self.manifest)?);
                self.epoch += 1;
            }
            match self.stream.as_mut().and_then(Iterator::next) {
                Some(item) => return item.map(|(c, r)| (c, Some(r))),
                None => self.stream = None,
            }
        }
    }
}

/// Cycles over a fixed list of items: plain chunks for cross-entropy-only
/// training (such as building a teacher), or chunks with records.
pub struct ChunkCycle {
    items: Vec<TrainItem>,
    pos: usize,
}

impl ChunkCycle {
    pub fn new(chunks: Vec<TokenChunk>) -> Result<Self> {
        Self::with_records(chunks.into_iter().map(|c| (c, None)).collect())
    }

    pub fn with_records(items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("chunks"));
        }
        Ok(Self { items, pos: 0 })
    }
}

impl ChunkSource for ChunkCycle {
    fn next_item(&mut self) -> Result<TrainItem> {
        let item = self.items[self.pos].clone();
        self.pos = (self.pos + 1) % self.items.len();
        Ok(item)
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        self.pos = ((self.pos as u64 + n) % self.items.len() as u64) as usize;
        Ok(())
    }
}
