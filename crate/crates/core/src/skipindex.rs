//! The embedded structural skip index and the compact "CXD1" document
//! format.
//!
//! Every subtree carries a descriptor: the set of element tags occurring in
//! it (a bit array over a tag dictionary) and the encoded byte size of the
//! subtree, so a reader can jump from just after the descriptor to just
//! after the subtree's close token. Descriptors are recursively compressed:
//! the root bitmap is full width, and every other bitmap is encoded over
//! only the bits set in its parent's bitmap, exploiting containment. Sizes
//! are unsigned LEB128.
//!
//! Wire layout:
//! - header: magic `CXD1`, then the dictionary (varint count, then varint
//!   length + UTF-8 bytes per tag)
//! - token stream in document order: OPEN = 0x01 + varint tagId +
//!   descriptor (bitmap + varint size); TEXT = 0x02 + varint length + UTF-8
//!   bytes; CLOSE = 0x03
//!
//! Bitmap bytes use big-bit-0-first order: tag id 0 is the most significant
//! bit of byte 0.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::access::Sign;
use crate::document::{Event, Node, NodeId};
use crate::engine::{EvaluatorState, RuleAutomaton, StateId};
use crate::error::Error;
use crate::xpath::{NodeTest, TagName};

pub const COMPACT_MAGIC: [u8; 4] = *b"CXD1";
pub const TOKEN_OPEN: u8 = 0x01;
pub const TOKEN_TEXT: u8 = 0x02;
pub const TOKEN_CLOSE: u8 = 0x03;

/// Dictionary ids are dense and bounded so bitmaps stay small.
pub const MAX_TAGS: usize = 1 << 14;

// ---------------------------------------------------------------------------
// Tag dictionary
// ---------------------------------------------------------------------------

/// Dense mapping from element names to small integer ids, in document order
/// of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagDictionary {
    tags: Vec<TagName>,
    ids: HashMap<String, usize>,
}

impl TagDictionary {
    pub fn new() -> Self {
        TagDictionary { tags: Vec::new(), ids: HashMap::new() }
    }

    pub fn from_tree(doc: &Node) -> Result<Self, Error> {
        let mut dict = TagDictionary::new();
        fn walk(node: &Node, dict: &mut TagDictionary) -> Result<(), Error> {
            dict.intern(&node.tag)?;
            for child in &node.children {
                walk(child, dict)?;
            }
            Ok(())
        }
        walk(doc, &mut dict)?;
        Ok(dict)
    }

    pub fn intern(&mut self, tag: &TagName) -> Result<usize, Error> {
        if let Some(&id) = self.ids.get(tag.as_str()) {
            return Ok(id);
        }
        if self.tags.len() >= MAX_TAGS {
            return Err(Error::DictionaryOverflow);
        }
        let id = self.tags.len();
        self.tags.push(tag.clone());
        self.ids.insert(tag.as_str().to_string(), id);
        Ok(id)
    }

    pub fn id(&self, tag: &TagName) -> Option<usize> {
        self.ids.get(tag.as_str()).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&TagName> {
        self.tags.get(id)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_varint(&mut out, self.tags.len() as u64);
        for tag in &self.tags {
            write_varint(&mut out, tag.as_str().len() as u64);
            out.extend_from_slice(tag.as_str().as_bytes());
        }
        out
    }

    pub fn deserialize(src: &mut dyn ByteSource) -> Result<Self, Error> {
        let count = read_varint(src)?;
        if count as usize > MAX_TAGS {
            return Err(Error::CorruptStream("dictionary too large".into()));
        }
        let mut dict = TagDictionary::new();
        for _ in 0..count {
            let len = read_varint(src)? as usize;
            if len > 4096 {
                return Err(Error::CorruptStream("tag name too long".into()));
            }
            let mut buf = vec![0u8; len];
            src.read_exact(&mut buf)?;
            let text = std::str::from_utf8(&buf)
                .map_err(|_| Error::CorruptStream("tag name is not UTF-8".into()))?;
            let tag = TagName::new(text)
                .map_err(|_| Error::CorruptStream("invalid tag name in dictionary".into()))?;
            dict.intern(&tag)?;
        }
        Ok(dict)
    }
}

impl Default for TagDictionary {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Bitmaps
// ---------------------------------------------------------------------------

/// Fixed-width bit array over the dictionary; bit i set means tag i occurs
/// in the subtree (including its root).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagBitmap {
    width: usize,
    bits: Vec<u8>,
}

impl TagBitmap {
    pub fn empty(width: usize) -> Self {
        TagBitmap { width, bits: vec![0; width.div_ceil(8)] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.width);
        self.bits[i / 8] |= 0x80 >> (i % 8);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.width && self.bits[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn union_with(&mut self, other: &TagBitmap) {
        debug_assert_eq!(self.width, other.width);
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn contains(&self, other: &TagBitmap) -> bool {
        debug_assert_eq!(self.width, other.width);
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & b == *b)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Encodes this bitmap over only the bits set in `parent`: the j-th set
    /// bit of the parent maps to position j. Requires containment.
    pub fn subset_encode(&self, parent: &TagBitmap) -> Vec<u8> {
        debug_assert!(parent.contains(self));
        let mut out = vec![0u8; parent.popcount().div_ceil(8)];
        let mut rank = 0;
        for i in 0..parent.width {
            if parent.get(i) {
                if self.get(i) {
                    out[rank / 8] |= 0x80 >> (rank % 8);
                }
                rank += 1;
            }
        }
        out
    }

    /// Inverse of [`TagBitmap::subset_encode`]: reconstructs the full-width
    /// bitmap. Set bits past the parent's popcount are corruption.
    pub fn subset_decode(parent: &TagBitmap, bytes: &[u8]) -> Result<TagBitmap, Error> {
        let pop = parent.popcount();
        if bytes.len() != pop.div_ceil(8) {
            return Err(Error::CorruptStream("bitmap width mismatch".into()));
        }
        for (rank, byte) in bytes.iter().enumerate().flat_map(|(bi, &b)| {
            (0..8).map(move |j| (bi * 8 + j, b & (0x80 >> j)))
        }) {
            if rank >= pop && byte != 0 {
                return Err(Error::CorruptStream("bitmap wider than parent allows".into()));
            }
        }
        let mut full = TagBitmap::empty(parent.width);
        let mut rank = 0;
        for i in 0..parent.width {
            if parent.get(i) {
                if bytes[rank / 8] & (0x80 >> (rank % 8)) != 0 {
                    full.set(i);
                }
                rank += 1;
            }
        }
        Ok(full)
    }
}

// ---------------------------------------------------------------------------
// Varints (unsigned LEB128)
// ---------------------------------------------------------------------------

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn varint_len(v: u64) -> usize {
    let mut n = 1;
    let mut v = v >> 7;
    while v != 0 {
        n += 1;
        v >>= 7;
    }
    n
}

pub fn read_varint(src: &mut dyn ByteSource) -> Result<u64, Error> {
    let mut value: u64 = 0;
    let mut shift = 0;
    loop {
        let mut byte = [0u8; 1];
        src.read_exact(&mut byte)?;
        let b = byte[0];
        if shift == 63 && b > 1 {
            return Err(Error::CorruptStream("varint overflow".into()));
        }
        value |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
        if shift > 63 {
            return Err(Error::CorruptStream("varint overflow".into()));
        }
    }
}

// ---------------------------------------------------------------------------
// Byte sources
// ---------------------------------------------------------------------------

/// Sequential byte access for the decoder. Implemented over plain slices
/// here and over the decrypting chunk window in the runtime.
pub trait ByteSource {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), Error>;
    fn skip(&mut self, n: u64) -> Result<(), Error>;
    fn position(&self) -> u64;
}

pub struct SliceSource<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> SliceSource<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        SliceSource { data, pos: 0 }
    }
}

impl ByteSource for SliceSource<'_> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), Error> {
        let end = self.pos + buf.len();
        if end > self.data.len() {
            return Err(Error::CorruptStream("unexpected end of stream".into()));
        }
        buf.copy_from_slice(&self.data[self.pos..end]);
        self.pos = end;
        Ok(())
    }

    fn skip(&mut self, n: u64) -> Result<(), Error> {
        let end = self.pos as u64 + n;
        if end > self.data.len() as u64 {
            return Err(Error::CorruptStream("skip past end of stream".into()));
        }
        self.pos = end as usize;
        Ok(())
    }

    fn position(&self) -> u64 {
        self.pos as u64
    }
}

// ---------------------------------------------------------------------------
// Descriptors and encoding
// ---------------------------------------------------------------------------

/// Per-subtree index record: tag bitmap plus the byte count from just after
/// this descriptor to just after the subtree's close token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtreeDescriptor {
    pub bitmap: TagBitmap,
    pub size: u64,
}

/// Bottom-up computation of every subtree's full-width bitmap and encoded
/// size under the fixed wire layout.
pub fn build_descriptors(
    doc: &Node,
    dict: &TagDictionary,
) -> Result<BTreeMap<NodeId, SubtreeDescriptor>, Error> {
    let mut out = BTreeMap::new();
    annotate(doc, &NodeId::root(), dict, &mut out)?;
    Ok(out)
}

fn annotate(
    node: &Node,
    id: &NodeId,
    dict: &TagDictionary,
    out: &mut BTreeMap<NodeId, SubtreeDescriptor>,
) -> Result<(), Error> {
    let tag_id = dict.id(&node.tag).ok_or(Error::DictionaryOverflow)?;
    let mut bitmap = TagBitmap::empty(dict.len());
    bitmap.set(tag_id);
    let mut size: u64 = 1; // own CLOSE token
    if let Some(text) = &node.text {
        size += 1 + varint_len(text.len() as u64) as u64 + text.len() as u64;
    }
    for (i, child) in node.children.iter().enumerate() {
        annotate(child, &id.child(i), dict, out)?;
    }
    // children sizes depend on this node's bitmap width, so fold them in
    // after their own annotation
    for i in 0..node.children.len() {
        let child_bitmap = out[&id.child(i)].bitmap.clone();
        bitmap.union_with(&child_bitmap);
    }
    let child_bitmap_width = bitmap.popcount().div_ceil(8) as u64;
    for (i, child) in node.children.iter().enumerate() {
        let child_desc = &out[&id.child(i)];
        let child_tag = dict.id(&child.tag).expect("interned above") as u64;
        size += 1
            + varint_len(child_tag) as u64
            + child_bitmap_width
            + varint_len(child_desc.size) as u64
            + child_desc.size;
    }
    out.insert(id.clone(), SubtreeDescriptor { bitmap, size });
    Ok(())
}

/// Serializes the document to the compact byte format, index included.
pub fn encode_compact(doc: &Node, dict: &TagDictionary) -> Result<Vec<u8>, Error> {
    let descriptors = build_descriptors(doc, dict)?;
    let mut out = Vec::new();
    out.extend_from_slice(&COMPACT_MAGIC);
    out.extend_from_slice(&dict.serialize());
    emit(doc, &NodeId::root(), dict, &descriptors, None, &mut out)?;
    Ok(out)
}

fn emit(
    node: &Node,
    id: &NodeId,
    dict: &TagDictionary,
    descriptors: &BTreeMap<NodeId, SubtreeDescriptor>,
    parent: Option<&TagBitmap>,
    out: &mut Vec<u8>,
) -> Result<(), Error> {
    let desc = &descriptors[id];
    out.push(TOKEN_OPEN);
    write_varint(out, dict.id(&node.tag).ok_or(Error::DictionaryOverflow)? as u64);
    match parent {
        None => out.extend_from_slice(desc.bitmap.as_bytes()),
        Some(p) => out.extend_from_slice(&desc.bitmap.subset_encode(p)),
    }
    write_varint(out, desc.size);
    if let Some(text) = &node.text {
        out.push(TOKEN_TEXT);
        write_varint(out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
    }
    for (i, child) in node.children.iter().enumerate() {
        emit(child, &id.child(i), dict, descriptors, Some(&desc.bitmap), out)?;
    }
    out.push(TOKEN_CLOSE);
    Ok(())
}

/// Header length (magic + dictionary) of a compact byte stream, and the
/// dictionary itself.
pub fn parse_compact_header(bytes: &[u8]) -> Result<(TagDictionary, u64), Error> {
    let mut src = SliceSource::new(bytes);
    let mut magic = [0u8; 4];
    src.read_exact(&mut magic)?;
    if magic != COMPACT_MAGIC {
        return Err(Error::CorruptStream("bad compact magic".into()));
    }
    let dict = TagDictionary::deserialize(&mut src)?;
    let body = src.position();
    Ok((dict, body))
}

// ---------------------------------------------------------------------------
// Streaming decoder
// ---------------------------------------------------------------------------

/// Streaming token reader over any byte source. Maintains the open-subtree
/// bitmap stack required to decompress descriptors; the offset is always at
/// a token boundary between calls.
pub struct CompactCursor<S: ByteSource> {
    source: S,
    dict: TagDictionary,
    parents: Vec<TagBitmap>,
    end: u64,
}

impl<'a> CompactCursor<SliceSource<'a>> {
    /// Opens a full compact document held in memory.
    pub fn over_slice(bytes: &'a [u8]) -> Result<Self, Error> {
        let (dict, body) = parse_compact_header(bytes)?;
        let mut source = SliceSource::new(bytes);
        source.skip(body)?;
        Ok(CompactCursor { source, dict, parents: Vec::new(), end: bytes.len() as u64 })
    }
}

impl<S: ByteSource> CompactCursor<S> {
    /// Starts a cursor at the body of a compact stream whose header has
    /// already been consumed elsewhere (the source is positioned at the
    /// first token).
    pub fn new(source: S, dict: TagDictionary, end: u64) -> Self {
        CompactCursor { source, dict, parents: Vec::new(), end }
    }

    pub fn dict(&self) -> &TagDictionary {
        &self.dict
    }

    pub fn source(&self) -> &S {
        &self.source
    }

    pub fn into_source(self) -> S {
        self.source
    }

    pub fn position(&self) -> u64 {
        self.source.position()
    }

    pub fn at_end(&self) -> bool {
        self.source.position() >= self.end
    }

    /// Open elements currently on the descriptor stack.
    pub fn depth(&self) -> usize {
        self.parents.len()
    }

    /// Decodes the next token. Open events carry their full-width
    /// descriptor.
    pub fn decode_next(&mut self) -> Result<(Event, Option<SubtreeDescriptor>), Error> {
        if self.at_end() {
            return Err(Error::CorruptStream("read past end of document".into()));
        }
        let mut kind = [0u8; 1];
        self.source.read_exact(&mut kind)?;
        match kind[0] {
            TOKEN_OPEN => {
                let tag_id = read_varint(&mut self.source)? as usize;
                let tag = self
                    .dict
                    .tag(tag_id)
                    .ok_or_else(|| Error::CorruptStream("tag id outside dictionary".into()))?
                    .clone();
                let bitmap = match self.parents.last() {
                    None => {
                        let mut buf = vec![0u8; self.dict.len().div_ceil(8)];
                        self.source.read_exact(&mut buf)?;
                        TagBitmap { width: self.dict.len(), bits: buf }
                    }
                    Some(parent) => {
                        let mut buf = vec![0u8; parent.popcount().div_ceil(8)];
                        self.source.read_exact(&mut buf)?;
                        TagBitmap::subset_decode(parent, &buf)?
                    }
                };
                if !bitmap.get(tag_id) {
                    return Err(Error::CorruptStream("subtree bitmap misses its own tag".into()));
                }
                let size = read_varint(&mut self.source)?;
                if self.source.position() + size > self.end {
                    return Err(Error::CorruptStream("subtree size exceeds document".into()));
                }
                self.parents.push(bitmap.clone());
                Ok((Event::Open(tag), Some(SubtreeDescriptor { bitmap, size })))
            }
            TOKEN_TEXT => {
                let len = read_varint(&mut self.source)?;
                if self.source.position() + len > self.end {
                    return Err(Error::CorruptStream("text length exceeds document".into()));
                }
                let mut buf = vec![0u8; len as usize];
                self.source.read_exact(&mut buf)?;
                let text = String::from_utf8(buf)
                    .map_err(|_| Error::CorruptStream("text is not UTF-8".into()))?;
                Ok((Event::Value(text), None))
            }
            TOKEN_CLOSE => {
                if self.parents.pop().is_none() {
                    return Err(Error::CorruptStream("close token without open".into()));
                }
                Ok((Event::Close, None))
            }
            other => Err(Error::CorruptStream(format!("bad token byte {other:#04x}"))),
        }
    }

    /// Executes a skip: jumps from just after the descriptor to just after
    /// the subtree's close token. Call in place of consuming the subtree of
    /// the open event the descriptor came with.
    pub fn skip_subtree(&mut self, desc: &SubtreeDescriptor) -> Result<(), Error> {
        self.source.skip(desc.size)?;
        if self.parents.pop().is_none() {
            return Err(Error::CorruptStream("skip without open".into()));
        }
        Ok(())
    }

    /// Decodes the entire remaining stream into events (no skipping).
    pub fn decode_all(&mut self) -> Result<Vec<Event>, Error> {
        let mut out = Vec::new();
        while !self.at_end() {
            out.push(self.decode_next()?.0);
        }
        if self.depth() != 0 {
            return Err(Error::CorruptStream("document ends inside an element".into()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Skip decision
// ---------------------------------------------------------------------------

/// Decides whether the subtree of the element whose open event was just
/// pushed can be skipped without changing output. Call after pushing the
/// open event and before descending; on a true result, jump the cursor by
/// the descriptor size and push a synthetic close.
///
/// The conditions, all required:
/// - the element cannot turn out granted (its sign cell and every fallback
///   up the stack exclude a positive outcome), so it is not delivered and
///   no skeleton commitment can open for it;
/// - no positive-rule token alive entering the subtree can reach its
///   navigational final state using only tags present in the subtree
///   (wildcard edges always traverse);
/// - no unresolved predicate branch alive entering the subtree can reach
///   its final state in there, and no value check is already waiting on the
///   element's own text — value predicates never enable a skip, only
///   prevent one;
/// - the same reachability for the query automaton's tokens.
///
/// Conservative: skipping is suppressed on any doubt.
pub fn can_skip(
    evaluator: &EvaluatorState,
    dict: &TagDictionary,
    desc: &SubtreeDescriptor,
) -> bool {
    let (access, query) = evaluator.stages();
    if !stage_allows_skip(access, dict, desc, true) {
        return false;
    }
    if let Some(qstage) = query {
        // The query stage consumes only access-stage output, which the
        // skipped region cannot produce; its token check is kept as a
        // conservative guard (a //* query defeats all skipping).
        if !stage_allows_skip(qstage, dict, desc, false) {
            return false;
        }
    }
    true
}

fn stage_allows_skip(
    stage: &crate::engine::Stage,
    dict: &TagDictionary,
    desc: &SubtreeDescriptor,
    check_context: bool,
) -> bool {
    if check_context && !stage.top_cannot_grant() {
        return false;
    }
    if stage.top_frame_dead() {
        // a suspended region advances nothing; its subtrees are free to skip
        return true;
    }
    for (auto, state) in stage.top_nav_tokens() {
        let a = &stage.automata()[auto];
        if a.sign == Sign::Positive && nav_final_reachable(a, state, dict, &desc.bitmap) {
            return false;
        }
    }
    for (auto, branch, state) in stage.top_branch_tokens() {
        let a = &stage.automata()[auto];
        let b = &a.branches[branch];
        // a value-accepting final is waiting on this element's own text
        if state == b.final_state && b.equals.is_some() {
            return false;
        }
        if branch_final_reachable(a, branch, state, dict, &desc.bitmap) {
            return false;
        }
    }
    true
}

fn test_allowed(test: &NodeTest, dict: &TagDictionary, bitmap: &TagBitmap) -> bool {
    match test {
        NodeTest::Wildcard => true,
        NodeTest::Tag(t) => dict.id(t).is_some_and(|id| bitmap.get(id)),
    }
}

/// Reachability of the navigational final state through at least one
/// transition whose labels are all available in the subtree.
fn nav_final_reachable(
    a: &RuleAutomaton,
    from: StateId,
    dict: &TagDictionary,
    bitmap: &TagBitmap,
) -> bool {
    let mut seen = vec![false; a.states.len()];
    let mut work = vec![from];
    while let Some(s) = work.pop() {
        for tr in &a.states[s].nav {
            if test_allowed(&tr.test, dict, bitmap) {
                if tr.target == a.nav_final {
                    return true;
                }
                if !seen[tr.target] {
                    seen[tr.target] = true;
                    work.push(tr.target);
                }
            }
        }
    }
    false
}

fn branch_final_reachable(
    a: &RuleAutomaton,
    branch: usize,
    from: StateId,
    dict: &TagDictionary,
    bitmap: &TagBitmap,
) -> bool {
    let final_state = a.branches[branch].final_state;
    let mut seen = vec![false; a.states.len()];
    let mut work = vec![from];
    while let Some(s) = work.pop() {
        for (bid, tr) in &a.states[s].branch {
            if *bid == branch && test_allowed(&tr.test, dict, bitmap) {
                if tr.target == final_state {
                    return true;
                }
                if !seen[tr.target] {
                    seen[tr.target] = true;
                    work.push(tr.target);
                }
            }
        }
    }
    false
}
