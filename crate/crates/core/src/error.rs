//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. The variants map
//! one-to-one onto the failure classes of the subsystems (parse errors carry a
//! byte position, integrity and transport failures carry a message) so that a
//! driver can translate them into stable exit codes.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// XPath text outside the supported fragment, with byte position.
    Syntax { position: usize, message: String },
    /// XML text that is not well formed.
    MalformedXml { position: usize, message: String },
    /// Well-formed XML using a feature the document model rejects
    /// (attributes, mixed content, CDATA, processing instructions, DTDs).
    UnsupportedFeature { position: usize, message: String },
    /// A tag name that violates the name rules (empty, bad characters, colon).
    InvalidTagName { name: String, reason: &'static str },
    /// An event stream that is not balanced.
    Unbalanced(String),
    /// More distinct tags than the dictionary can index.
    DictionaryOverflow,
    /// A compact-format byte stream that cannot be decoded.
    CorruptStream(String),
    /// Chunk size outside the permitted range.
    BadChunkSize(u32),
    /// MAC verification failure, truncation, or any other tamper evidence.
    Integrity(String),
    /// Chunk index past the end of the document.
    Range { index: u32, count: u32 },
    /// The session's working-memory budget would be exceeded.
    Budget { needed: usize, limit: usize },
    /// Connection, framing, or protocol failure talking to a server.
    Transport(String),
    /// The server endpoint could not be bound.
    Bind(String),
    /// Local file I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Syntax { position, message } => {
                write!(f, "syntax error at {position}: {message}")
            }
            Error::MalformedXml { position, message } => {
                write!(f, "malformed XML at {position}: {message}")
            }
            Error::UnsupportedFeature { position, message } => {
                write!(f, "unsupported XML feature at {position}: {message}")
            }
            Error::InvalidTagName { name, reason } => {
                write!(f, "invalid tag name {name:?}: {reason}")
            }
            Error::Unbalanced(msg) => write!(f, "unbalanced event stream: {msg}"),
            Error::DictionaryOverflow => write!(f, "tag dictionary overflow"),
            Error::CorruptStream(msg) => write!(f, "corrupt compact stream: {msg}"),
            Error::BadChunkSize(n) => write!(f, "bad chunk size {n}"),
            Error::Integrity(msg) => write!(f, "integrity failure: {msg}"),
            Error::Range { index, count } => {
                write!(f, "chunk index {index} out of range (count {count})")
            }
            Error::Budget { needed, limit } => {
                write!(f, "memory budget exceeded: {needed} bytes needed, limit {limit}")
            }
            Error::Transport(msg) => write!(f, "transport error: {msg}"),
            Error::Bind(msg) => write!(f, "bind error: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
