//! Sparse top-K teacher-logit corpus: byte tokenization and chunk packing,
//! top-K sparsification, the gzip shard format with its JSON manifest, and
//! a sequential streaming reader.

mod corpus;
mod record;
mod shard;
mod stream;

pub use corpus::{
    decode_bytes, encode_bytes, load_corpus_dir, pack_corpus, TokenChunk, BYTE_VOCAB, PAD_ID,
};
pub use record::{record_payload_bytes, topk_sparsify, SparseLogitRecord};
pub use shard::{
    chunk_permutation, decode_shard, generate_logit_shards, read_shard, teacher_records,
    write_shard, ShardData, ShardEntry, ShardManifest, MANIFEST_FILE, SHARD_MAGIC, SHARD_VERSION,
};
pub use stream::{stream_shards, ShardStream};
