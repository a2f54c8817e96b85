//! Wire protocol: length-prefixed binary frames over TCP.
//!
//! A frame is a u32 big-endian payload length followed by the payload,
//! capped at 16 MiB. Requests start with an opcode byte, responses with a
//! status byte; all integers are big-endian and subjects are u16-length-
//! prefixed UTF-8.

use std::io::{Read, Write};

use crate::error::Error;

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub const OP_PUT_DOC: u8 = 0x10;
pub const OP_GET_HEADER: u8 = 0x11;
pub const OP_GET_CHUNKS: u8 = 0x12;
pub const OP_LIST: u8 = 0x13;
pub const OP_PUT_RULES: u8 = 0x14;
pub const OP_GET_RULES: u8 = 0x15;

pub const ST_OK: u8 = 0x00;
pub const ST_NOT_FOUND: u8 = 0x01;
pub const ST_BAD_REQUEST: u8 = 0x02;
pub const ST_RANGE: u8 = 0x03;

pub fn write_frame(w: &mut dyn Write, payload: &[u8]) -> Result<(), Error> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Transport(format!("frame of {} bytes exceeds the cap", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())
        .and_then(|()| w.write_all(payload))
        .and_then(|()| w.flush())
        .map_err(|e| Error::Transport(e.to_string()))
}

pub fn read_frame(r: &mut dyn Read) -> Result<Vec<u8>, Error> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::Transport(e.to_string()))?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Transport(format!("frame of {len} bytes exceeds the cap")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| Error::Transport(e.to_string()))?;
    Ok(payload)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    PutDoc { doc_id: [u8; 16], bytes: Vec<u8> },
    GetHeader { doc_id: [u8; 16] },
    GetChunks { doc_id: [u8; 16], first: u32, count: u32 },
    List,
    PutRules { doc_id: [u8; 16], subject: String, blob: Vec<u8> },
    GetRules { doc_id: [u8; 16], subject: String },
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::PutDoc { doc_id, bytes } => {
                out.push(OP_PUT_DOC);
                out.extend_from_slice(doc_id);
                out.extend_from_slice(bytes);
            }
            Request::GetHeader { doc_id } => {
                out.push(OP_GET_HEADER);
                out.extend_from_slice(doc_id);
            }
            Request::GetChunks { doc_id, first, count } => {
                out.push(OP_GET_CHUNKS);
                out.extend_from_slice(doc_id);
                out.extend_from_slice(&first.to_be_bytes());
                out.extend_from_slice(&count.to_be_bytes());
            }
            Request::List => out.push(OP_LIST),
            Request::PutRules { doc_id, subject, blob } => {
                out.push(OP_PUT_RULES);
                out.extend_from_slice(doc_id);
                push_subject(&mut out, subject);
                out.extend_from_slice(blob);
            }
            Request::GetRules { doc_id, subject } => {
                out.push(OP_GET_RULES);
                out.extend_from_slice(doc_id);
                push_subject(&mut out, subject);
            }
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Request, Error> {
        let bad = |msg: &str| Error::Transport(format!("bad request: {msg}"));
        let (&op, rest) = payload.split_first().ok_or_else(|| bad("empty frame"))?;
        let doc_id = |rest: &[u8]| -> Result<[u8; 16], Error> {
            rest.get(..16)
                .and_then(|s| <[u8; 16]>::try_from(s).ok())
                .ok_or_else(|| bad("missing document id"))
        };
        match op {
            OP_PUT_DOC => Ok(Request::PutDoc { doc_id: doc_id(rest)?, bytes: rest[16..].to_vec() }),
            OP_GET_HEADER => {
                if rest.len() != 16 {
                    return Err(bad("GET_HEADER wants exactly a document id"));
                }
                Ok(Request::GetHeader { doc_id: doc_id(rest)? })
            }
            OP_GET_CHUNKS => {
                if rest.len() != 24 {
                    return Err(bad("GET_CHUNKS wants id + first + count"));
                }
                Ok(Request::GetChunks {
                    doc_id: doc_id(rest)?,
                    first: u32::from_be_bytes(rest[16..20].try_into().unwrap()),
                    count: u32::from_be_bytes(rest[20..24].try_into().unwrap()),
                })
            }
            OP_LIST => {
                if !rest.is_empty() {
                    return Err(bad("LIST takes no fields"));
                }
                Ok(Request::List)
            }
            OP_PUT_RULES => {
                let id = doc_id(rest)?;
                let (subject, used) = pull_subject(&rest[16..])?;
                Ok(Request::PutRules { doc_id: id, subject, blob: rest[16 + used..].to_vec() })
            }
            OP_GET_RULES => {
                let id = doc_id(rest)?;
                let (subject, used) = pull_subject(&rest[16..])?;
                if 16 + used != rest.len() {
                    return Err(bad("trailing bytes after subject"));
                }
                Ok(Request::GetRules { doc_id: id, subject })
            }
            other => Err(bad(&format!("unknown opcode {other:#04x}"))),
        }
    }
}

fn push_subject(out: &mut Vec<u8>, subject: &str) {
    out.extend_from_slice(&(subject.len() as u16).to_be_bytes());
    out.extend_from_slice(subject.as_bytes());
}

fn pull_subject(rest: &[u8]) -> Result<(String, usize), Error> {
    let bad = |msg: &str| Error::Transport(format!("bad request: {msg}"));
    if rest.len() < 2 {
        return Err(bad("missing subject length"));
    }
    let len = u16::from_be_bytes(rest[..2].try_into().unwrap()) as usize;
    let bytes = rest.get(2..2 + len).ok_or_else(|| bad("subject truncated"))?;
    let subject =
        String::from_utf8(bytes.to_vec()).map_err(|_| bad("subject is not UTF-8"))?;
    Ok((subject, 2 + len))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok(Vec<u8>),
    NotFound,
    BadRequest,
    Range,
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Ok(body) => {
                let mut out = Vec::with_capacity(1 + body.len());
                out.push(ST_OK);
                out.extend_from_slice(body);
                out
            }
            Response::NotFound => vec![ST_NOT_FOUND],
            Response::BadRequest => vec![ST_BAD_REQUEST],
            Response::Range => vec![ST_RANGE],
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Response, Error> {
        let (&st, rest) = payload
            .split_first()
            .ok_or_else(|| Error::Transport("empty response frame".into()))?;
        match st {
            ST_OK => Ok(Response::Ok(rest.to_vec())),
            ST_NOT_FOUND => Ok(Response::NotFound),
            ST_BAD_REQUEST => Ok(Response::BadRequest),
            ST_RANGE => Ok(Response::Range),
            other => Err(Error::Transport(format!("unknown status {other:#04x}"))),
        }
    }
}
