//! Client side of the DSP protocol: one-shot helpers plus the
//! [`RemoteChunkSource`] that makes a served document look exactly like a
//! local file to a session.

use std::net::{TcpStream, ToSocketAddrs};

use crate::error::Error;
use crate::soe::ChunkSource;

use super::protocol::{read_frame, write_frame, Request, Response};

fn connect(endpoint: impl ToSocketAddrs) -> Result<TcpStream, Error> {
    TcpStream::connect(endpoint).map_err(|e| Error::Transport(format!("connect: {e}")))
}

fn roundtrip(stream: &mut TcpStream, request: &Request) -> Result<Response, Error> {
    write_frame(stream, &request.encode())?;
    Response::decode(&read_frame(stream)?)
}

fn expect_ok(response: Response, what: &str) -> Result<Vec<u8>, Error> {
    match response {
        Response::Ok(body) => Ok(body),
        Response::NotFound => Err(Error::Transport(format!("{what}: not found"))),
        Response::BadRequest => Err(Error::Transport(format!("{what}: rejected by server"))),
        Response::Range => Err(Error::Transport(format!("{what}: range out of bounds"))),
    }
}

/// Uploads an encrypted document; the id is read from its header by the
/// caller.
pub fn put_doc(endpoint: impl ToSocketAddrs, doc_id: [u8; 16], bytes: &[u8]) -> Result<(), Error> {
    let mut stream = connect(endpoint)?;
    let resp = roundtrip(&mut stream, &Request::PutDoc { doc_id, bytes: bytes.to_vec() })?;
    expect_ok(resp, "put document").map(|_| ())
}

/// Uploads an encrypted rules blob for (document, subject).
pub fn put_rules(
    endpoint: impl ToSocketAddrs,
    doc_id: [u8; 16],
    subject: &str,
    blob: &[u8],
) -> Result<(), Error> {
    let mut stream = connect(endpoint)?;
    let resp = roundtrip(
        &mut stream,
        &Request::PutRules { doc_id, subject: subject.to_string(), blob: blob.to_vec() },
    )?;
    expect_ok(resp, "put rules").map(|_| ())
}

pub fn get_rules(
    endpoint: impl ToSocketAddrs,
    doc_id: [u8; 16],
    subject: &str,
) -> Result<Vec<u8>, Error> {
    let mut stream = connect(endpoint)?;
    let resp =
        roundtrip(&mut stream, &Request::GetRules { doc_id, subject: subject.to_string() })?;
    expect_ok(resp, "get rules")
}

pub fn list(endpoint: impl ToSocketAddrs) -> Result<Vec<[u8; 16]>, Error> {
    let mut stream = connect(endpoint)?;
    let body = expect_ok(roundtrip(&mut stream, &Request::List)?, "list")?;
    if body.len() < 4 {
        return Err(Error::Transport("short list response".into()));
    }
    let count = u32::from_be_bytes(body[..4].try_into().unwrap()) as usize;
    if body.len() != 4 + 16 * count {
        return Err(Error::Transport("malformed list response".into()));
    }
    Ok(body[4..].chunks_exact(16).map(|c| <[u8; 16]>::try_from(c).unwrap()).collect())
}

/// [`ChunkSource`] over the wire: a session driven by this source behaves
/// byte-for-byte like one driven by the local file.
pub struct RemoteChunkSource {
    stream: TcpStream,
    doc_id: [u8; 16],
}

/// Connects and returns a chunk source for the given document.
pub fn client_chunk_source(
    endpoint: impl ToSocketAddrs,
    doc_id: [u8; 16],
) -> Result<RemoteChunkSource, Error> {
    Ok(RemoteChunkSource { stream: connect(endpoint)?, doc_id })
}

impl ChunkSource for RemoteChunkSource {
    fn get_header(&mut self) -> Result<Vec<u8>, Error> {
        let resp = roundtrip(&mut self.stream, &Request::GetHeader { doc_id: self.doc_id })?;
        expect_ok(resp, "get header")
    }

    fn get_chunks(&mut self, first: u32, count: u32) -> Result<Vec<u8>, Error> {
        let resp = roundtrip(
            &mut self.stream,
            &Request::GetChunks { doc_id: self.doc_id, first, count },
        )?;
        match resp {
            Response::Range => {
                Err(Error::Range { index: first.saturating_add(count), count: 0 })
            }
            other => expect_ok(other, "get chunks"),
        }
    }
}
