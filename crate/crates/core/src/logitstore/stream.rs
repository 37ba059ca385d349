use std::fs::File;
use std::io::{self, Read};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::vec::IntoIter;

use crate::error::{Error, Result};
use crate::logitstore::shard::decode_shard;
use crate::logitstore::{ShardData, ShardManifest, SparseLogitRecord, TokenChunk};

/// Records the global byte offset (across the manifest's shard sequence)
/// at which every read starts.
struct AuditReader<R> {
    inner: R,
    offset: u64,
    log: Arc<Mutex<Vec<u64>>>,
}

impl<R: Read> Read for AuditReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.log.lock().unwrap().push(self.offset);
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn load(path: &Path, manifest: &ShardManifest, i: usize, base: u64, log: &Arc<Mutex<Vec<u64>>>) -> Result<ShardData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = AuditReader {
        inner: file,
        offset: base,
        log: log.clone(),
    };
    let mut gz = Vec::with_capacity(manifest.shards[i].bytes as usize);
    reader.read_to_end(&mut gz).map_err(|e| Error::io(path, e))?;
    let data = decode_shard(path, &manifest.shards[i], &gz)?;
    if data.vocab as usize != manifest.vocab
        || data.k as usize != manifest.k
        || data.chunks.iter().any(|c| c.len() != manifest.chunk_len)
    {
        return Err(Error::Mismatch(format!("{} disagrees with the manifest", path.display())));
    }
    Ok(data)
}

/// Sequential reader over a manifest's shards. A background thread decodes
/// the next shard while the current one is consumed; the rendezvous channel
/// keeps exactly one decoded shard ahead.
pub struct ShardStream {
    rx: Receiver<Result<ShardData>>,
    worker: Option<JoinHandle<()>>,
    current: IntoIter<(TokenChunk, Vec<SparseLogitRecord>)>,
    log: Arc<Mutex<Vec<u64>>>,
    chunk_len: usize,
    yielded_tokens: u64,
    failed: bool,
}

/// Opens a stream over every shard in manifest order. Missing files are
/// reported before any data is yielded.
pub fn stream_shards(manifest: &ShardManifest) -> Result<ShardStream> {
    for i in 0..manifest.shards.len() {
        let p = manifest.shard_path(i);
        std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?;
    }
    let (tx, rx) = sync_channel(0);
    let log = Arc::new(Mutex::new(Vec::new()));
    let m = manifest.clone();
    let worker_log = log.clone();
    let worker = std::thread::spawn(move || {
        let mut base = 0u64;
        for i in 0..m.shards.len() {
            let r = load(&m.shard_path(i), &m, i, base, &worker_log);
            base += m.shards[i].bytes;
            let stop = r.is_err();
            if tx.send(r).is_err() || stop {
                return;
            }
        }
    });
    Ok(ShardStream {
        rx,
        worker: Some(worker),
        current: Vec::new().into_iter(),
        log,
        chunk_len: manifest.chunk_len,
        yielded_tokens: 0,
        failed: false,
    })
}

impl ShardStream {
    /// Start offsets of every read issued so far.
    pub fn read_offsets(&self) -> Vec<u64> {
        self.log.lock().unwrap().clone()
    }

    pub fn offsets_monotone(&self) -> bool {
        self.read_offsets().windows(2).all(|w| w[0] <= w[1])
    }

    pub fn yielded_tokens(&self) -> u64 {
        self.yielded_tokens
    }
}

fn split(data: ShardData) -> Vec<(TokenChunk, Vec<SparseLogitRecord>)> {
    let len = data.chunks.first().map_or(0, TokenChunk::len);
    let mut records = data.records.into_iter();
    data.chunks
        .into_iter()
        .map(|c| (c, records.by_ref().take(len).collect()))
        .collect()
}

impl Iterator for ShardStream {
    type Item = Result<(TokenChunk, Vec<SparseLogitRecord>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(item) = self.current.next() {
                self.yielded_tokens += self.chunk_len as u64;
                return Some(Ok(item));
            }
            match self.rx.recv() {
                Ok(Ok(data)) => self.current = split(data).into_iter(),
                Ok(Err(e)) => {
                    self.failed = true;
                    return Some(Err(e));
                }
                Err(_) => return None,
            }
        }
    }
}

impl Drop for ShardStream {
    fn drop(&mut self) {
        // Closing the channel unblocks the worker's pending send.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
