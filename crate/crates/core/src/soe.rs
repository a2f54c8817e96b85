//! The simulated Secure Operating Environment.
//!
//! A session wires chunk fetching, integrity checking, decryption, compact
//! decoding, skip decisions, and the stream engine together under an
//! explicit working-memory budget, and reports transfer and decryption
//! statistics. The SOE is simulated as a library boundary with a byte
//! accountant: at every event boundary the sum of all category usages must
//! fit the profile's working memory, else the session aborts — it never
//! silently exceeds the budget.
//!
//! At most two chunks of plaintext are resident at a time (tokens can
//! straddle a chunk boundary); the window is charged to the accountant like
//! everything else. Skipped ranges are never fetched, never decrypted, and
//! never MAC-verified.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::access::RuleSet;
use crate::document::{Event, XmlWriter};
use crate::engine::{new_evaluator, EvaluatorState, OutputAction, OutputAssembler};
use crate::envelope::{decrypt_record, ChunkRecord, DocumentKey, Header, MAC_LEN};
use crate::error::Error;
use crate::skipindex::{can_skip, ByteSource, CompactCursor, SliceSource, TagDictionary};
use crate::xpath::PathExpr;

// ---------------------------------------------------------------------------
// Profiles and accounting
// ---------------------------------------------------------------------------

/// Working-memory and bandwidth constraints a session runs under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetProfile {
    pub name: String,
    pub working_memory_bytes: usize,
    /// Simulated fetch throttle; drives the virtual transfer clock.
    pub bandwidth_bytes_per_sec: Option<u64>,
}

impl BudgetProfile {
    /// Unconstrained desktop profile.
    pub fn desk() -> Self {
        BudgetProfile { name: "desk".into(), working_memory_bytes: 65536, bandwidth_bytes_per_sec: None }
    }

    /// Smart card: 1 KB of working memory, 2 KB/s link.
    pub fn smartcard() -> Self {
        BudgetProfile {
            name: "smartcard".into(),
            working_memory_bytes: 1024,
            bandwidth_bytes_per_sec: Some(2048),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "smartcard" => Some(Self::smartcard()),
            _ => None,
        }
    }
}

/// Per-category byte usage at one event boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct UsageBreakdown {
    pub automata: usize,
    pub tokens: usize,
    pub sign_stack: usize,
    pub predicate_set: usize,
    pub pending_buffers: usize,
    pub skeleton_buffer: usize,
    pub chunk_window: usize,
}

impl UsageBreakdown {
    pub fn total(&self) -> usize {
        self.automata
            + self.tokens
            + self.sign_stack
            + self.predicate_set
            + self.pending_buffers
            + self.skeleton_buffer
            + self.chunk_window
    }
}

/// Tracks peak usage and enforces the limit. A breach aborts before being
/// recorded, so the reported peak never exceeds the limit.
#[derive(Debug, Clone)]
pub struct MemoryAccountant {
    limit: usize,
    peak: usize,
}

impl MemoryAccountant {
    pub fn new(limit: usize) -> Self {
        MemoryAccountant { limit, peak: 0 }
    }

    pub fn check(&mut self, usage: &UsageBreakdown) -> Result<(), Error> {
        let total = usage.total();
        if total > self.limit {
            return Err(Error::Budget { needed: total, limit: self.limit });
        }
        self.peak = self.peak.max(total);
        Ok(())
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Transfer and decryption statistics of one session run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stats {
    /// Record bytes (ciphertext + MACs) actually fetched.
    pub bytes_fetched: u64,
    /// Ciphertext bytes decrypted.
    pub bytes_decrypted: u64,
    /// Record bytes never fetched thanks to skips.
    pub bytes_skipped: u64,
    pub chunks_fetched: u32,
    pub chunks_skipped: u32,
    pub peak_memory: usize,
    pub events_emitted: u64,
    /// Virtual transfer time under a throttled profile:
    /// bytes_fetched / bandwidth. No wall-clock sleeping is involved.
    pub transfer_seconds: Option<f64>,
}

// ---------------------------------------------------------------------------
// Chunk sources
// ---------------------------------------------------------------------------

/// The seam between the SOE and storage: fetch the header, fetch chunk
/// ranges. Implemented by local files here and by the network client in
/// `dsp`.
pub trait ChunkSource {
    /// Header bytes including the header MAC (everything before the
    /// records).
    fn get_header(&mut self) -> Result<Vec<u8>, Error>;
    /// Concatenated records for chunks `first..first + count`.
    fn get_chunks(&mut self, first: u32, count: u32) -> Result<Vec<u8>, Error>;
}

/// Serves an encrypted document from a local file via seeks; nothing but
/// the requested ranges is read.
pub struct FileChunkSource {
    file: File,
    header: Header,
    header_len: u64,
}

impl FileChunkSource {
    pub fn open(path: &Path) -> Result<Self, Error> {
        let mut file = File::open(path)?;
        let mut head = vec![0u8; 48];
        file.read_exact(&mut head).map_err(|_| Error::Integrity("header truncated".into()))?;
        let blob_len = u32::from_be_bytes(head[44..48].try_into().unwrap()) as usize;
        let mut rest = vec![0u8; blob_len + MAC_LEN];
        file.read_exact(&mut rest).map_err(|_| Error::Integrity("header truncated".into()))?;
        head.extend_from_slice(&rest);
        let (header, _, consumed) = Header::parse(&head)?;
        let expected = consumed as u64 + header.records_len();
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(Error::Integrity(format!(
                "file is {actual} bytes, header promises {expected}"
            )));
        }
        Ok(FileChunkSource { file, header, header_len: consumed as u64 })
    }

    pub fn doc_id(&self) -> [u8; 16] {
        self.header.doc_id
    }
}

impl ChunkSource for FileChunkSource {
    fn get_header(&mut self) -> Result<Vec<u8>, Error> {
        self.file.seek(SeekFrom::Start(0))?;
        let mut buf = vec![0u8; self.header_len as usize];
        self.file.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn get_chunks(&mut self, first: u32, count: u32) -> Result<Vec<u8>, Error> {
        let end = first
            .checked_add(count)
            .ok_or(Error::Range { index: first, count: self.header.chunk_count })?;
        if end > self.header.chunk_count {
            return Err(Error::Range { index: end, count: self.header.chunk_count });
        }
        let start = self.header_len + self.header.record_offset(first)?;
        let len: usize = (first..end).map(|i| self.header.record_len(i).unwrap()).sum();
        self.file.seek(SeekFrom::Start(start))?;
        let mut buf = vec![0u8; len];
        self.file.read_exact(&mut buf)?;
        Ok(buf)
    }
}

/// A whole encrypted document held in memory; mainly for tests.
pub struct MemoryChunkSource {
    bytes: Vec<u8>,
    header: Header,
    header_len: usize,
}

impl MemoryChunkSource {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, Error> {
        let (header, _, consumed) = Header::parse(&bytes)?;
        if bytes.len() as u64 != consumed as u64 + header.records_len() {
            return Err(Error::Integrity("document truncated".into()));
        }
        Ok(MemoryChunkSource { bytes, header, header_len: consumed })
    }
}

impl ChunkSource for MemoryChunkSource {
    fn get_header(&mut self) -> Result<Vec<u8>, Error> {
        Ok(self.bytes[..self.header_len].to_vec())
    }

    fn get_chunks(&mut self, first: u32, count: u32) -> Result<Vec<u8>, Error> {
        let end = first
            .checked_add(count)
            .ok_or(Error::Range { index: first, count: self.header.chunk_count })?;
        if end > self.header.chunk_count {
            return Err(Error::Range { index: end, count: self.header.chunk_count });
        }
        let start = self.header_len as u64 + self.header.record_offset(first)?;
        let len: usize = (first..end).map(|i| self.header.record_len(i).unwrap()).sum();
        Ok(self.bytes[start as usize..start as usize + len].to_vec())
    }
}

// ---------------------------------------------------------------------------
// Decrypting chunk window
// ---------------------------------------------------------------------------

/// Sliding plaintext window over the encrypted records: fetches, verifies,
/// and decrypts chunks on demand, keeping at most two resident. Skips move
/// the position without fetching.
struct ChunkWindow<'a> {
    source: &'a mut dyn ChunkSource,
    header: Header,
    key: DocumentKey,
    pos: u64,
    cache: VecDeque<(u32, Vec<u8>)>,
    chunks_fetched: u32,
    bytes_fetched: u64,
    bytes_decrypted: u64,
}

impl<'a> ChunkWindow<'a> {
    fn new(source: &'a mut dyn ChunkSource, header: Header, key: DocumentKey) -> Self {
        ChunkWindow {
            source,
            header,
            key,
            pos: 0,
            cache: VecDeque::new(),
            chunks_fetched: 0,
            bytes_fetched: 0,
            bytes_decrypted: 0,
        }
    }

    fn resident_bytes(&self) -> usize {
        self.cache.iter().map(|(_, p)| p.len()).sum()
    }

    fn ensure(&mut self, index: u32) -> Result<(), Error> {
        if self.cache.iter().any(|(i, _)| *i == index) {
            return Ok(());
        }
        let record_len = self.header.record_len(index)?;
        let bytes = self.source.get_chunks(index, 1)?;
        if bytes.len() != record_len {
            return Err(Error::Integrity(format!(
                "chunk {index}: got {} bytes, expected {record_len}",
                bytes.len()
            )));
        }
        let split = record_len - MAC_LEN;
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&bytes[split..]);
        let record = ChunkRecord { ciphertext: bytes[..split].to_vec(), mac };
        let plaintext = decrypt_record(&self.header, &self.key, index, &record)?;
        self.chunks_fetched += 1;
        self.bytes_fetched += record_len as u64;
        self.bytes_decrypted += plaintext.len() as u64;
        self.cache.push_back((index, plaintext));
        while self.cache.len() > 2 {
            self.cache.pop_front();
        }
        Ok(())
    }

    fn chunk_plain(&self, index: u32) -> &[u8] {
        &self.cache.iter().find(|(i, _)| *i == index).expect("ensured").1
    }
}

impl ByteSource for ChunkWindow<'_> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), Error> {
        if self.pos + buf.len() as u64 > self.header.plaintext_len {
            return Err(Error::CorruptStream("read past end of document".into()));
        }
        let size = self.header.chunk_size as u64;
        let mut written = 0;
        while written < buf.len() {
            let index = (self.pos / size) as u32;
            self.ensure(index)?;
            let offset = (self.pos % size) as usize;
            let chunk = self.chunk_plain(index);
            let n = (chunk.len() - offset).min(buf.len() - written);
            buf[written..written + n].copy_from_slice(&chunk[offset..offset + n]);
            written += n;
            self.pos += n as u64;
        }
        Ok(())
    }

    fn skip(&mut self, n: u64) -> Result<(), Error> {
        let target = self.pos + n;
        if target > self.header.plaintext_len {
            return Err(Error::CorruptStream("skip past end of document".into()));
        }
        self.pos = target;
        Ok(())
    }

    fn position(&self) -> u64 {
        self.pos
    }
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

/// One (document, subject) evaluation: compiled automata, budget, and the
/// skip switch.
#[derive(Debug)]
pub struct Session {
    key: DocumentKey,
    evaluator: EvaluatorState,
    profile: BudgetProfile,
    automata_bytes: usize,
    skipping: bool,
}

/// Compiles the rule set and the query and charges the automata to the
/// accountant; a rule set whose automata alone bust the budget fails here.
pub fn open_session(
    key: DocumentKey,
    rules: &RuleSet,
    query: Option<&PathExpr>,
    profile: BudgetProfile,
) -> Result<Session, Error> {
    let evaluator = new_evaluator(rules, query)?;
    let automata_bytes = evaluator.automata_bytes();
    if automata_bytes > profile.working_memory_bytes {
        return Err(Error::Budget { needed: automata_bytes, limit: profile.working_memory_bytes });
    }
    Ok(Session { key, evaluator, profile, automata_bytes, skipping: true })
}

impl Session {
    /// Disables or enables subtree skipping (enabled by default).
    pub fn set_skipping(&mut self, on: bool) {
        self.skipping = on;
    }
}

/// Runs a session over a chunk source to completion: fetch, verify,
/// decrypt, decode, evaluate, serialize. Chunking, encryption, and skipping
/// are transparent: the output equals the plain evaluation of the decoded
/// event stream.
pub fn run_session(
    mut session: Session,
    source: &mut dyn ChunkSource,
) -> Result<(String, Stats), Error> {
    let header_bytes = source.get_header()?;
    let (header, header_mac, consumed) = Header::parse(&header_bytes)?;
    if consumed != header_bytes.len() {
        return Err(Error::Integrity("trailing bytes after header".into()));
    }
    header.verify(&session.key, &header_mac)?;

    let dict_bytes = header.decrypt_dict_blob(&session.key);
    if dict_bytes.is_empty() {
        return Err(Error::CorruptStream("document carries no tag dictionary".into()));
    }
    let mut dict_src = SliceSource::new(&dict_bytes);
    let dict = TagDictionary::deserialize(&mut dict_src)?;
    if dict_src.position() != dict_bytes.len() as u64 {
        return Err(Error::CorruptStream("trailing bytes in dictionary blob".into()));
    }
    let body_offset = 4 + dict_bytes.len() as u64; // compact magic + dictionary

    let mut accountant = MemoryAccountant::new(session.profile.working_memory_bytes);
    let mut window = ChunkWindow::new(source, header.clone(), session.key.clone());
    window.skip(body_offset)?;
    let mut cursor = CompactCursor::new(window, dict, header.plaintext_len);

    let mut asm = OutputAssembler::new();
    let mut writer = XmlWriter::new();
    let mut released: Vec<Event> = Vec::new();
    let mut events_emitted: u64 = 0;

    while !cursor.at_end() {
        let (ev, desc) = cursor.decode_next()?;
        for act in session.evaluator.push_event(&ev)? {
            asm.push(&act, &mut released);
        }
        // The open is processed (its anchors are in the sign cell); the
        // subtree and close token can now be skipped if nothing inside can
        // matter. The synthetic close keeps evaluator and cursor depths in
        // step; its output resolves to nothing because nothing under a
        // skippable element is ever kept.
        if let (Event::Open(_), Some(d)) = (&ev, &desc) {
            if session.skipping && can_skip(&session.evaluator, cursor.dict(), d) {
                cursor.skip_subtree(d)?;
                asm.push(&OutputAction::Skip { bytes: d.size }, &mut released);
                for act in session.evaluator.push_event(&Event::Close)? {
                    asm.push(&act, &mut released);
                }
            }
        }
        for ev in released.drain(..) {
            writer.feed(&ev)?;
            events_emitted += 1;
        }
        let engine = session.evaluator.memory_usage();
        accountant.check(&UsageBreakdown {
            automata: session.automata_bytes,
            tokens: engine.tokens,
            sign_stack: engine.sign_stack,
            predicate_set: engine.predicate_set,
            pending_buffers: engine.pending_buffers + asm.buffered_bytes(),
            skeleton_buffer: engine.skeleton,
            chunk_window: cursor.source().resident_bytes(),
        })?;
    }
    if cursor.depth() != 0 {
        return Err(Error::CorruptStream("document ends inside an element".into()));
    }
    for act in session.evaluator.finish()? {
        asm.push(&act, &mut released);
    }
    asm.finish(&mut released)?;
    for ev in released.drain(..) {
        writer.feed(&ev)?;
        events_emitted += 1;
    }
    let output = writer.finish()?;

    let window = cursor.into_source();
    let total_record_bytes = header.records_len();
    let stats = Stats {
        bytes_fetched: window.bytes_fetched,
        bytes_decrypted: window.bytes_decrypted,
        bytes_skipped: total_record_bytes - window.bytes_fetched,
        chunks_fetched: window.chunks_fetched,
        chunks_skipped: header.chunk_count - window.chunks_fetched,
        peak_memory: accountant.peak(),
        events_emitted,
        transfer_seconds: session
            .profile
            .bandwidth_bytes_per_sec
            .map(|rate| window.bytes_fetched as f64 / rate as f64),
    };
    Ok((output, stats))
}
