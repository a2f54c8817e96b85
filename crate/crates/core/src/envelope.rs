//! Chunked encryption and integrity protection: the "SXD1" container.
//!
//! The payload is split into fixed-size chunks, each encrypted with
//! AES-128-CTR and authenticated with a truncated HMAC-SHA-256 that binds
//! the document id and the chunk index. Chunks verify independently, so a
//! reader can fetch, verify, and decrypt arbitrary ranges — which is what
//! makes verified skips possible — while substitution, reordering,
//! cross-document grafting, and truncation are all detected before any
//! plaintext is released.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic "SXD1" | docId 16 | nonce 8 | chunkSize u32 | chunkCount u32 |
//! plaintextLength u64 | dictBlobLen u32 | dictBlob | headerMac 16 |
//! chunk records: ciphertext (chunkSize, last one shorter) + mac 16
//! ```
//!
//! The per-chunk CTR counter starts at nonce ∥ chunkIndex(u32) ∥ 0u32: each
//! chunk owns a disjoint counter range, so no keystream is shared between
//! chunks and decryption needs no neighbors. The dictionary blob (for
//! compact payloads, the embedded tag dictionary) is encrypted under the
//! reserved index `u32::MAX`.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes128;
use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::error::Error;
use crate::skipindex;

type Aes128Ctr = ctr::Ctr128BE<Aes128>;
type HmacSha256 = Hmac<Sha256>;

pub const ENVELOPE_MAGIC: [u8; 4] = *b"SXD1";
pub const MAC_LEN: usize = 16;
pub const MIN_CHUNK_SIZE: u32 = 256;
pub const MAX_CHUNK_SIZE: u32 = 1 << 20;

const DICT_BLOB_INDEX: u32 = u32::MAX;

/// Independent encryption and authentication keys. Never leaves the SOE
/// boundary in clear.
#[derive(Clone)]
pub struct DocumentKey {
    pub enc: [u8; 16],
    pub mac: [u8; 32],
}

impl DocumentKey {
    pub fn generate() -> Result<Self, Error> {
        let mut enc = [0u8; 16];
        let mut mac = [0u8; 32];
        getrandom::getrandom(&mut enc).map_err(|e| Error::Io(e.to_string()))?;
        getrandom::getrandom(&mut mac).map_err(|e| Error::Io(e.to_string()))?;
        Ok(DocumentKey { enc, mac })
    }

    pub fn to_bytes(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..16].copy_from_slice(&self.enc);
        out[16..].copy_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        if bytes.len() != 48 {
            return Err(Error::Integrity("key material must be 48 bytes".into()));
        }
        let mut key = DocumentKey { enc: [0; 16], mac: [0; 32] };
        key.enc.copy_from_slice(&bytes[..16]);
        key.mac.copy_from_slice(&bytes[16..]);
        Ok(key)
    }
}

impl std::fmt::Debug for DocumentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DocumentKey(..)") // keys stay out of logs
    }
}

/// Public header of an encrypted document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub doc_id: [u8; 16],
    pub nonce: [u8; 8],
    pub chunk_size: u32,
    pub chunk_count: u32,
    pub plaintext_len: u64,
    pub dict_blob: Vec<u8>,
}

impl Header {
    /// Serialized header fields (everything the header MAC covers).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.dict_blob.len());
        out.extend_from_slice(&ENVELOPE_MAGIC);
        out.extend_from_slice(&self.doc_id);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.chunk_size.to_be_bytes());
        out.extend_from_slice(&self.chunk_count.to_be_bytes());
        out.extend_from_slice(&self.plaintext_len.to_be_bytes());
        out.extend_from_slice(&(self.dict_blob.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.dict_blob);
        out
    }

    /// Parses header + headerMac from the front of `bytes`; returns the
    /// header, its mac, and the total bytes consumed. Structure only — call
    /// [`Header::verify`] before trusting any field.
    pub fn parse(bytes: &[u8]) -> Result<(Header, [u8; MAC_LEN], usize), Error> {
        let fixed = 4 + 16 + 8 + 4 + 4 + 8 + 4;
        if bytes.len() < fixed {
            return Err(Error::Integrity("header truncated".into()));
        }
        if bytes[..4] != ENVELOPE_MAGIC {
            return Err(Error::Integrity("bad envelope magic".into()));
        }
        let mut doc_id = [0u8; 16];
        doc_id.copy_from_slice(&bytes[4..20]);
        let mut nonce = [0u8; 8];
        nonce.copy_from_slice(&bytes[20..28]);
        let chunk_size = u32::from_be_bytes(bytes[28..32].try_into().unwrap());
        let chunk_count = u32::from_be_bytes(bytes[32..36].try_into().unwrap());
        let plaintext_len = u64::from_be_bytes(bytes[36..44].try_into().unwrap());
        let blob_len = u32::from_be_bytes(bytes[44..48].try_into().unwrap()) as usize;
        if bytes.len() < fixed + blob_len + MAC_LEN {
            return Err(Error::Integrity("header truncated".into()));
        }
        let dict_blob = bytes[48..48 + blob_len].to_vec();
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&bytes[48 + blob_len..48 + blob_len + MAC_LEN]);
        let header =
            Header { doc_id, nonce, chunk_size, chunk_count, plaintext_len, dict_blob };
        header.validate()?;
        Ok((header, mac, fixed + blob_len + MAC_LEN))
    }

    fn validate(&self) -> Result<(), Error> {
        if !(MIN_CHUNK_SIZE..=MAX_CHUNK_SIZE).contains(&self.chunk_size) {
            return Err(Error::Integrity("chunk size out of range".into()));
        }
        if self.chunk_count == u32::MAX {
            return Err(Error::Integrity("chunk count reserved".into()));
        }
        let count = self.chunk_count as u64;
        let size = self.chunk_size as u64;
        // count·size ≥ len > (count−1)·size
        let ok = count * size >= self.plaintext_len
            && (count == 0 && self.plaintext_len == 0
                || count > 0 && self.plaintext_len > (count - 1) * size);
        if !ok {
            return Err(Error::Integrity("chunk count inconsistent with length".into()));
        }
        Ok(())
    }

    pub fn compute_mac(&self, key: &DocumentKey) -> [u8; MAC_LEN] {
        truncated_hmac(&key.mac, &self.to_bytes())
    }

    pub fn verify(&self, key: &DocumentKey, mac: &[u8; MAC_LEN]) -> Result<(), Error> {
        let mut m = HmacSha256::new_from_slice(&key.mac).expect("hmac accepts any key length");
        m.update(&self.to_bytes());
        m.verify_truncated_left(mac).map_err(|_| Error::Integrity("header mac mismatch".into()))
    }

    /// Plaintext length of chunk `index`.
    pub fn chunk_len(&self, index: u32) -> Result<usize, Error> {
        if index >= self.chunk_count {
            return Err(Error::Range { index, count: self.chunk_count });
        }
        let size = self.chunk_size as u64;
        let start = index as u64 * size;
        Ok((self.plaintext_len - start).min(size) as usize)
    }

    /// Stored record length (ciphertext + mac) of chunk `index`.
    pub fn record_len(&self, index: u32) -> Result<usize, Error> {
        Ok(self.chunk_len(index)? + MAC_LEN)
    }

    /// Byte offset of chunk `index`'s record, relative to the start of the
    /// record section (just after the header mac).
    pub fn record_offset(&self, index: u32) -> Result<u64, Error> {
        if index > self.chunk_count {
            return Err(Error::Range { index, count: self.chunk_count });
        }
        let full = (self.chunk_size as u64 + MAC_LEN as u64) * index as u64;
        Ok(full)
    }

    /// Total size of the record section.
    pub fn records_len(&self) -> u64 {
        (0..self.chunk_count).map(|i| self.record_len(i).expect("index in range") as u64).sum()
    }

    /// Decrypts the header's dictionary blob (empty for non-compact
    /// payloads).
    pub fn decrypt_dict_blob(&self, key: &DocumentKey) -> Vec<u8> {
        let mut data = self.dict_blob.clone();
        apply_ctr(key, &self.nonce, DICT_BLOB_INDEX, &mut data);
        data
    }
}

/// One stored chunk: ciphertext plus its binding MAC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRecord {
    pub ciphertext: Vec<u8>,
    pub mac: [u8; MAC_LEN],
}

/// A parsed encrypted document.
#[derive(Debug, Clone)]
pub struct EncryptedDocument {
    pub header: Header,
    pub header_mac: [u8; MAC_LEN],
    pub chunks: Vec<ChunkRecord>,
}

fn truncated_hmac(key: &[u8; 32], data: &[u8]) -> [u8; MAC_LEN] {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    let full = m.finalize().into_bytes();
    let mut out = [0u8; MAC_LEN];
    out.copy_from_slice(&full[..MAC_LEN]);
    out
}

fn chunk_mac(key: &DocumentKey, doc_id: &[u8; 16], index: u32, ciphertext: &[u8]) -> [u8; MAC_LEN] {
    let mut m = HmacSha256::new_from_slice(&key.mac).expect("hmac accepts any key length");
    m.update(doc_id);
    m.update(&index.to_be_bytes());
    m.update(ciphertext);
    let full = m.finalize().into_bytes();
    let mut out = [0u8; MAC_LEN];
    out.copy_from_slice(&full[..MAC_LEN]);
    out
}

/// In-place CTR keystream for one chunk. The initial counter block is
/// nonce ∥ index ∥ 0, giving every chunk 2^32 private blocks.
fn apply_ctr(key: &DocumentKey, nonce: &[u8; 8], index: u32, data: &mut [u8]) {
    let mut iv = [0u8; 16];
    iv[..8].copy_from_slice(nonce);
    iv[8..12].copy_from_slice(&index.to_be_bytes());
    let mut cipher = Aes128Ctr::new(&key.enc.into(), &iv.into());
    cipher.apply_keystream(data);
}

/// Encrypts a payload into independently authenticated chunks. The nonce is
/// fresh per call, so equal plaintexts yield different ciphertexts.
pub fn encrypt_document(
    payload: &[u8],
    key: &DocumentKey,
    doc_id: [u8; 16],
    chunk_size: u32,
) -> Result<EncryptedDocument, Error> {
    if !(MIN_CHUNK_SIZE..=MAX_CHUNK_SIZE).contains(&chunk_size) {
        return Err(Error::BadChunkSize(chunk_size));
    }
    let mut nonce = [0u8; 8];
    getrandom::getrandom(&mut nonce).map_err(|e| Error::Io(e.to_string()))?;

    // For compact payloads, give the header an encrypted copy of the tag
    // dictionary so a session can decode structure from the header alone.
    let dict_blob = match skipindex::parse_compact_header(payload) {
        Ok((_, body)) => {
            let mut blob = payload[4..body as usize].to_vec();
            apply_ctr(key, &nonce, DICT_BLOB_INDEX, &mut blob);
            blob
        }
        Err(_) => Vec::new(),
    };

    let chunk_count = payload.len().div_ceil(chunk_size as usize) as u32;
    if chunk_count == u32::MAX {
        return Err(Error::BadChunkSize(chunk_size));
    }
    let header = Header {
        doc_id,
        nonce,
        chunk_size,
        chunk_count,
        plaintext_len: payload.len() as u64,
        dict_blob,
    };
    let header_mac = header.compute_mac(key);
    let mut chunks = Vec::with_capacity(chunk_count as usize);
    for (i, slice) in payload.chunks(chunk_size as usize).enumerate() {
        let mut ciphertext = slice.to_vec();
        apply_ctr(key, &nonce, i as u32, &mut ciphertext);
        let mac = chunk_mac(key, &doc_id, i as u32, &ciphertext);
        chunks.push(ChunkRecord { ciphertext, mac });
    }
    Ok(EncryptedDocument { header, header_mac, chunks })
}

/// Verifies and decrypts one chunk record given a verified header.
/// Verification strictly precedes any plaintext output.
pub fn decrypt_record(
    header: &Header,
    key: &DocumentKey,
    index: u32,
    record: &ChunkRecord,
) -> Result<Vec<u8>, Error> {
    if index >= header.chunk_count {
        return Err(Error::Range { index, count: header.chunk_count });
    }
    if record.ciphertext.len() != header.chunk_len(index)? {
        return Err(Error::Integrity(format!("chunk {index} has the wrong length")));
    }
    let mut m = HmacSha256::new_from_slice(&key.mac).expect("hmac accepts any key length");
    m.update(&header.doc_id);
    m.update(&index.to_be_bytes());
    m.update(&record.ciphertext);
    m.verify_truncated_left(&record.mac)
        .map_err(|_| Error::Integrity(format!("chunk {index} mac mismatch")))?;
    let mut plaintext = record.ciphertext.clone();
    apply_ctr(key, &header.nonce, index, &mut plaintext);
    Ok(plaintext)
}

impl EncryptedDocument {
    /// Verifies and decrypts one chunk; the header mac must have been
    /// verified when the document was opened.
    pub fn decrypt_chunk(&self, key: &DocumentKey, index: u32) -> Result<Vec<u8>, Error> {
        let record = self
            .chunks
            .get(index as usize)
            .ok_or(Error::Range { index, count: self.header.chunk_count })?;
        decrypt_record(&self.header, key, index, record)
    }

    /// Verifies everything and reassembles the payload.
    pub fn decrypt_all(&self, key: &DocumentKey) -> Result<Vec<u8>, Error> {
        self.header.verify(key, &self.header_mac)?;
        let mut out = Vec::with_capacity(self.header.plaintext_len as usize);
        for i in 0..self.header.chunk_count {
            out.extend_from_slice(&self.decrypt_chunk(key, i)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes();
        out.extend_from_slice(&self.header_mac);
        for c in &self.chunks {
            out.extend_from_slice(&c.ciphertext);
            out.extend_from_slice(&c.mac);
        }
        out
    }

    /// Parses a stored document. Truncation and length inconsistencies are
    /// integrity failures at open; MACs are verified on use.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let (header, header_mac, consumed) = Header::parse(bytes)?;
        let mut chunks = Vec::with_capacity(header.chunk_count as usize);
        let mut pos = consumed;
        for i in 0..header.chunk_count {
            let len = header.chunk_len(i)?;
            if bytes.len() < pos + len + MAC_LEN {
                return Err(Error::Integrity("document truncated".into()));
            }
            let ciphertext = bytes[pos..pos + len].to_vec();
            let mut mac = [0u8; MAC_LEN];
            mac.copy_from_slice(&bytes[pos + len..pos + len + MAC_LEN]);
            chunks.push(ChunkRecord { ciphertext, mac });
            pos += len + MAC_LEN;
        }
        if pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after last chunk".into()));
        }
        Ok(EncryptedDocument { header, header_mac, chunks })
    }
}
