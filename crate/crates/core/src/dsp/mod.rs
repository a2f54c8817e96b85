//! The untrusted Database Service Provider: stores encrypted documents and
//! encrypted rules blobs, serves headers and chunk ranges over a simple
//! length-prefixed binary protocol. The server never holds a key; every
//! stored byte is ciphertext plus public headers, and rules blobs are
//! indistinguishable from documents.

pub mod client;
pub mod protocol;

use std::fs;
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::envelope::Header;
use crate::error::Error;
use protocol::{read_frame, write_frame, Request, Response};

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

/// Directory-backed store: one file per document named by its hex docId,
/// plus `<docId>.<hex subject>.rules` for rules blobs.
#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
    write_lock: Arc<Mutex<()>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        Ok(Store { dir: dir.to_path_buf(), write_lock: Arc::new(Mutex::new(())) })
    }

    fn doc_path(&self, doc_id: &[u8; 16]) -> PathBuf {
        self.dir.join(hex(doc_id))
    }

    fn rules_path(&self, doc_id: &[u8; 16], subject: &str) -> PathBuf {
        self.dir.join(format!("{}.{}.rules", hex(doc_id), hex(subject.as_bytes())))
    }

    /// Stores a document after a structural sanity check (the server cannot
    /// verify MACs, but it refuses byte soup it could never serve ranges
    /// from).
    pub fn put_doc(&self, doc_id: &[u8; 16], bytes: &[u8]) -> Result<(), Error> {
        let (header, _, consumed) = Header::parse(bytes)?;
        if header.doc_id != *doc_id {
            return Err(Error::Transport("document id does not match its header".into()));
        }
        if bytes.len() as u64 != consumed as u64 + header.records_len() {
            return Err(Error::Integrity("document length inconsistent".into()));
        }
        self.write_atomically(&self.doc_path(doc_id), bytes)
    }

    pub fn put_rules(&self, doc_id: &[u8; 16], subject: &str, blob: &[u8]) -> Result<(), Error> {
        self.write_atomically(&self.rules_path(doc_id, subject), blob)
    }

    fn write_atomically(&self, path: &Path, bytes: &[u8]) -> Result<(), Error> {
        let _guard = self.write_lock.lock().expect("store lock");
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn get_rules(&self, doc_id: &[u8; 16], subject: &str) -> Result<Option<Vec<u8>>, Error> {
        match fs::read(self.rules_path(doc_id, subject)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn header_bytes(&self, doc_id: &[u8; 16]) -> Result<Option<Vec<u8>>, Error> {
        let bytes = match fs::read(self.doc_path(doc_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let (_, _, consumed) = Header::parse(&bytes)?;
        Ok(Some(bytes[..consumed].to_vec()))
    }

    /// Concatenated records for the requested range, or `Ok(None)` for a
    /// missing document, or a range error.
    pub fn chunk_range(
        &self,
        doc_id: &[u8; 16],
        first: u32,
        count: u32,
    ) -> Result<Option<Result<Vec<u8>, Error>>, Error> {
        let bytes = match fs::read(self.doc_path(doc_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let (header, _, consumed) = Header::parse(&bytes)?;
        let Some(end) = first.checked_add(count).filter(|&e| e <= header.chunk_count) else {
            return Ok(Some(Err(Error::Range { index: first, count: header.chunk_count })));
        };
        let start = consumed as u64 + header.record_offset(first)?;
        let len: u64 = (first..end).map(|i| header.record_len(i).unwrap() as u64).sum();
        Ok(Some(Ok(bytes[start as usize..(start + len) as usize].to_vec())))
    }

    pub fn list(&self) -> Result<Vec<[u8; 16]>, Error> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if name.len() == 32 {
                if let Ok(raw) = (0..16)
                    .map(|i| u8::from_str_radix(&name[2 * i..2 * i + 2], 16))
                    .collect::<Result<Vec<u8>, _>>()
                {
                    out.push(<[u8; 16]>::try_from(raw.as_slice()).unwrap());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// One served request, for the request log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestLogEntry {
    pub opcode: u8,
    pub doc_id: [u8; 16],
    pub first: u32,
    pub count: u32,
}

/// Handle to a running server; dropping it does not stop the server, call
/// [`RunningServer::shutdown`].
pub struct RunningServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    log: Arc<Mutex<Vec<RequestLogEntry>>>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Snapshot of all requests served so far.
    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    /// Stops accepting and severs every live connection.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // poke the accept loop awake
        let _ = TcpStream::connect(self.addr);
        for conn in self.connections.lock().expect("connection list").drain(..) {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
    }
}

/// Binds the endpoint and serves until shutdown. Connections are handled
/// concurrently; each connection processes requests sequentially.
pub fn serve(store: Store, endpoint: impl ToSocketAddrs) -> Result<RunningServer, Error> {
    let listener = TcpListener::bind(endpoint).map_err(|e| Error::Bind(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Error::Bind(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let log = Arc::new(Mutex::new(Vec::new()));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let accept_stop = Arc::clone(&stop);
    let accept_log = Arc::clone(&log);
    let accept_conns = Arc::clone(&connections);
    let accept_thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if accept_stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            if let Ok(clone) = stream.try_clone() {
                accept_conns.lock().expect("connection list").push(clone);
            }
            let store = store.clone();
            let log = Arc::clone(&accept_log);
            std::thread::spawn(move || serve_connection(stream, &store, &log));
        }
    });
    Ok(RunningServer { addr, stop, accept_thread: Some(accept_thread), log, connections })
}

fn serve_connection(mut stream: TcpStream, store: &Store, log: &Mutex<Vec<RequestLogEntry>>) {
    loop {
        let payload = match read_frame(&mut stream) {
            Ok(p) => p,
            Err(_) => return, // closed or broken connection
        };
        let response = match Request::decode(&payload) {
            Err(_) => Response::BadRequest,
            Ok(request) => {
                log_request(log, &request);
                handle(store, request)
            }
        };
        if write_frame(&mut stream, &response.encode()).is_err() {
            return;
        }
    }
}

fn log_request(log: &Mutex<Vec<RequestLogEntry>>, request: &Request) {
    let (opcode, doc_id, first, count) = match request {
        Request::PutDoc { doc_id, .. } => (protocol::OP_PUT_DOC, *doc_id, 0, 0),
        Request::GetHeader { doc_id } => (protocol::OP_GET_HEADER, *doc_id, 0, 0),
        Request::GetChunks { doc_id, first, count } => {
            (protocol::OP_GET_CHUNKS, *doc_id, *first, *count)
        }
        Request::List => (protocol::OP_LIST, [0; 16], 0, 0),
        Request::PutRules { doc_id, .. } => (protocol::OP_PUT_RULES, *doc_id, 0, 0),
        Request::GetRules { doc_id, .. } => (protocol::OP_GET_RULES, *doc_id, 0, 0),
    };
    log.lock().expect("log lock").push(RequestLogEntry { opcode, doc_id, first, count });
}

fn handle(store: &Store, request: Request) -> Response {
    match request {
        Request::PutDoc { doc_id, bytes } => match store.put_doc(&doc_id, &bytes) {
            Ok(()) => Response::Ok(Vec::new()),
            Err(_) => Response::BadRequest,
        },
        Request::GetHeader { doc_id } => match store.header_bytes(&doc_id) {
            Ok(Some(bytes)) => Response::Ok(bytes),
            Ok(None) => Response::NotFound,
            Err(_) => Response::BadRequest,
        },
        Request::GetChunks { doc_id, first, count } => {
            match store.chunk_range(&doc_id, first, count) {
                Ok(Some(Ok(bytes))) => Response::Ok(bytes),
                Ok(Some(Err(_))) => Response::Range,
                Ok(None) => Response::NotFound,
                Err(_) => Response::BadRequest,
            }
        }
        Request::List => match store.list() {
            Ok(ids) => {
                let mut body = (ids.len() as u32).to_be_bytes().to_vec();
                for id in ids {
                    body.extend_from_slice(&id);
                }
                Response::Ok(body)
            }
            Err(_) => Response::BadRequest,
        },
        Request::PutRules { doc_id, subject, blob } => {
            match store.put_rules(&doc_id, &subject, &blob) {
                Ok(()) => Response::Ok(Vec::new()),
                Err(_) => Response::BadRequest,
            }
        }
        Request::GetRules { doc_id, subject } => match store.get_rules(&doc_id, &subject) {
            Ok(Some(blob)) => Response::Ok(blob),
            Ok(None) => Response::NotFound,
            Err(_) => Response::BadRequest,
        },
    }
}
