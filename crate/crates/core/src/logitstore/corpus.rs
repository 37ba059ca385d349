use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level tokenizer: ids 0..=255 are bytes, 256 is padding.
pub const PAD_ID: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

pub fn encode_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`encode_bytes`]; padding and out-of-range ids are dropped.
pub fn decode_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

/// A fixed-length window of the packed token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub tokens: Vec<u32>,
    /// Offsets inside the chunk at which a new document starts. A document
    /// that starts exactly at offset 0 is not recorded.
    pub doc_boundaries: Vec<u32>,
}

impl TokenChunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions whose next-token target is a real token.
    pub fn supervised_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len().saturating_sub(1)).filter(|&i| self.tokens[i + 1] != PAD_ID)
    }
}

/// Concatenates the documents and cuts the stream every `chunk_len` tokens.
/// The last chunk is padded with [`PAD_ID`].
pub fn pack_corpus(documents: &[Vec<u32>], chunk_len: usize) -> Result<Vec<TokenChunk>> {
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk_len must be positive".into()));
    }
    let total: usize = documents.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("corpus"));
    }
    let mut chunks = Vec::with_capacity(total.div_ceil(chunk_len));
    let mut current = TokenChunk {
        tokens: Vec::with_capacity(chunk_len),
        doc_boundaries: Vec::new(),
    };
    for doc in documents.iter().filter(|d| !d.is_empty()) {
        if !current.tokens.is_empty() {
            current.doc_boundaries.push(current.tokens.len() as u32);
        }
        let mut rest = doc.as_slice();
        while !rest.is_empty() {
            let take = (chunk_len - current.tokens.len()).min(rest.len());
            current.tokens.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if current.tokens.len() == chunk_len {
                chunks.push(std::mem::replace(
                    &mut current,
                    TokenChunk {
                        tokens: Vec::with_capacity(chunk_len),
                        doc_boundaries: Vec::new(),
                    },
                ));
            }
        }
    }
    if !current.tokens.is_empty() {
        current.tokens.resize(chunk_len, PAD_ID);
        chunks.push(current);
    }
    Ok(chunks)
}

/// Reads every regular file of `dir` (sorted by name) as one byte document.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Vec<u32>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| fs::read(p).map(|b| encode_bytes(&b)).map_err(|e| Error::io(p, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(len: usize, start: u32) -> Vec<u32> {
        (0..len as u32).map(|i| (start + i) % 256).collect()
    }

    #[test]
    fn long_document_splits_without_boundaries() {
        let chunks = pack_corpus(&[doc(8192, 0)], 4096).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.doc_boundaries.is_empty() && c.len() == 4096));
    }

    #[test]
    fn three_plus_five_into_fours() {
        let chunks = pack_corpus(&[doc(3, 0), doc(5, 10)], 4).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].tokens, vec![0, 1, 2, 10]);
        assert_eq!(chunks[0].doc_boundaries, vec![3]);
        assert_eq!(chunks[1].tokens, vec![11, 12, 13, 14]);
        assert!(chunks[1].doc_boundaries.is_empty());
    }

    #[test]
    fn final_chunk_is_padded() {
        let chunks = pack_corpus(&[doc(10, 0)], 4).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].tokens, vec![8, 9, PAD_ID, PAD_ID]);
        assert_eq!(chunks[2].supervised_positions().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(pack_corpus(&[], 4), Err(Error::Empty(_))));
        assert!(matches!(pack_corpus(&[vec![]], 4), Err(Error::Empty(_))));
        assert!(pack_corpus(&[doc(3, 0)], 0).is_err());
    }

    #[test]
    fn byte_round_trip() {
        let text = b"hello\n\xff";
        assert_eq!(decode_bytes(&encode_bytes(text)), text);
    }
}
