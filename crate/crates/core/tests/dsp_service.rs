//! Server/client integration: protocol behavior over real sockets,
//! transport transparency, fault injection, the confidentiality boundary,
//! and the request log for skipped ranges.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use cardstream_core::access::{parse_rules, RuleSet};
use cardstream_core::document::parse_xml_text;
use cardstream_core::dsp::client::{client_chunk_source, get_rules, list, put_doc, put_rules};
use cardstream_core::dsp::protocol::OP_GET_CHUNKS;
use cardstream_core::dsp::{serve, RunningServer, Store};
use cardstream_core::envelope::{encrypt_document, DocumentKey, EncryptedDocument};
use cardstream_core::error::Error;
use cardstream_core::gen::{gen_rules, gen_tree, Rng};
use cardstream_core::skipindex::{encode_compact, TagDictionary};
use cardstream_core::soe::{open_session, run_session, BudgetProfile, ChunkSource, MemoryChunkSource};

fn test_key() -> DocumentKey {
    DocumentKey { enc: [11u8; 16], mac: [12u8; 32] }
}

fn encrypt_xml(xml: &str, doc_id: [u8; 16], chunk_size: u32) -> Vec<u8> {
    let doc = parse_xml_text(xml).unwrap();
    let dict = TagDictionary::from_tree(&doc).unwrap();
    let compact = encode_compact(&doc, &dict).unwrap();
    encrypt_document(&compact, &test_key(), doc_id, chunk_size).unwrap().to_bytes()
}

fn start_server(tag: &str) -> (RunningServer, tempfile::TempDir) {
    let dir = tempfile::Builder::new().prefix(tag).tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let server = serve(store, "127.0.0.1:0").unwrap();
    (server, dir)
}

fn ruleset(lines: &[&str]) -> RuleSet {
    let parsed = lines.iter().map(|l| parse_rules(l).unwrap().remove(0)).collect();
    RuleSet::from_rules(parsed).unwrap()
}

#[test]
fn put_then_fetch_roundtrips() {
    let (server, _dir) = start_server("dsp-roundtrip");
    let bytes = encrypt_xml("<a><b>x</b></a>", [1; 16], 256);
    put_doc(server.addr(), [1; 16], &bytes).unwrap();

    let parsed = EncryptedDocument::from_bytes(&bytes).unwrap();
    let mut source = client_chunk_source(server.addr(), [1; 16]).unwrap();
    let header = source.get_header().unwrap();
    assert_eq!(header, bytes[..bytes.len() - record_bytes(&parsed)]);
    let records = source.get_chunks(0, parsed.header.chunk_count).unwrap();
    assert_eq!(records, bytes[bytes.len() - record_bytes(&parsed)..]);

    assert_eq!(list(server.addr()).unwrap(), vec![[1; 16]]);
    server.shutdown();
}

fn record_bytes(doc: &EncryptedDocument) -> usize {
    doc.chunks.iter().map(|c| c.ciphertext.len() + 16).sum()
}

#[test]
fn missing_document_is_not_found() {
    let (server, _dir) = start_server("dsp-notfound");
    let mut source = client_chunk_source(server.addr(), [9; 16]).unwrap();
    assert!(matches!(source.get_header(), Err(Error::Transport(_))));
    server.shutdown();
}

#[test]
fn chunk_range_past_end_is_rejected() {
    let (server, _dir) = start_server("dsp-range");
    let bytes = encrypt_xml("<a/>", [2; 16], 256);
    put_doc(server.addr(), [2; 16], &bytes).unwrap();
    let mut source = client_chunk_source(server.addr(), [2; 16]).unwrap();
    assert!(matches!(source.get_chunks(0, 99), Err(Error::Range { .. })));
    server.shutdown();
}

#[test]
fn garbage_uploads_are_rejected() {
    let (server, _dir) = start_server("dsp-garbage");
    assert!(put_doc(server.addr(), [3; 16], b"not an envelope").is_err());
    // id must match the embedded header
    let bytes = encrypt_xml("<a/>", [4; 16], 256);
    assert!(put_doc(server.addr(), [5; 16], &bytes).is_err());
    server.shutdown();
}

#[test]
fn rules_blobs_roundtrip_opaquely() {
    let (server, _dir) = start_server("dsp-rules");
    let rules_text = "+ alice /a//b\n- alice //c\n";
    let blob = encrypt_document(rules_text.as_bytes(), &test_key(), [6; 16], 256)
        .unwrap()
        .to_bytes();
    put_rules(server.addr(), [6; 16], "alice", &blob).unwrap();
    let fetched = get_rules(server.addr(), [6; 16], "alice").unwrap();
    assert_eq!(fetched, blob);
    let decrypted =
        EncryptedDocument::from_bytes(&fetched).unwrap().decrypt_all(&test_key()).unwrap();
    assert_eq!(decrypted, rules_text.as_bytes());
    assert!(get_rules(server.addr(), [6; 16], "bob").is_err());
    server.shutdown();
}

#[test]
fn transport_is_transparent_over_random_documents() {
    let (server, _dir) = start_server("dsp-transparent");
    let mut rng = Rng::new(0x7777);
    let tags = ["a", "b", "c", "d"];
    for case in 0u8..30 {
        let tree = gen_tree(&mut rng, 40, &tags);
        let dict = TagDictionary::from_tree(&tree).unwrap();
        let compact = encode_compact(&tree, &dict).unwrap();
        let mut doc_id = [0u8; 16];
        doc_id[0] = case;
        doc_id[15] = 0xaa;
        let bytes =
            encrypt_document(&compact, &test_key(), doc_id, 256).unwrap().to_bytes();
        put_doc(server.addr(), doc_id, &bytes).unwrap();

        let rules = RuleSet::new("u", gen_rules(&mut rng, "u", &tags, 5)).unwrap();

        let session = open_session(test_key(), &rules, None, BudgetProfile::desk()).unwrap();
        let mut local = MemoryChunkSource::from_bytes(bytes).unwrap();
        let (out_local, stats_local) = run_session(session, &mut local).unwrap();

        let session = open_session(test_key(), &rules, None, BudgetProfile::desk()).unwrap();
        let mut remote = client_chunk_source(server.addr(), doc_id).unwrap();
        let (out_remote, stats_remote) = run_session(session, &mut remote).unwrap();

        assert_eq!(out_local, out_remote, "case {case}");
        assert_eq!(stats_local.bytes_fetched, stats_remote.bytes_fetched, "case {case}");
        assert_eq!(stats_local, stats_remote, "case {case}");
    }
    server.shutdown();
}

/// Kills the server after a fixed number of chunk fetches.
struct KillSwitch<S: ChunkSource> {
    inner: S,
    server: Option<RunningServer>,
    fetches_before_kill: usize,
}

impl<S: ChunkSource> ChunkSource for KillSwitch<S> {
    fn get_header(&mut self) -> Result<Vec<u8>, Error> {
        self.inner.get_header()
    }

    fn get_chunks(&mut self, first: u32, count: u32) -> Result<Vec<u8>, Error> {
        if self.fetches_before_kill == 0 {
            if let Some(server) = self.server.take() {
                server.shutdown();
            }
        } else {
            self.fetches_before_kill -= 1;
        }
        self.inner.get_chunks(first, count)
    }
}

#[test]
fn server_death_mid_stream_is_a_transport_error() {
    let (server, _dir) = start_server("dsp-kill");
    // big enough for several chunks
    let mut xml = String::from("<a>");
    for i in 0..200 {
        xml.push_str(&format!("<b>text payload number {i}</b>"));
    }
    xml.push_str("</a>");
    let bytes = encrypt_xml(&xml, [7; 16], 256);
    put_doc(server.addr(), [7; 16], &bytes).unwrap();

    let inner = client_chunk_source(server.addr(), [7; 16]).unwrap();
    let mut source = KillSwitch { inner, server: Some(server), fetches_before_kill: 2 };
    let session =
        open_session(test_key(), &ruleset(&["+ u //a"]), None, BudgetProfile::desk()).unwrap();
    let err = run_session(session, &mut source).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

// -- confidentiality boundary ------------------------------------------------

fn recording_proxy(target: SocketAddr, capture: Arc<Mutex<Vec<u8>>>) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        while let Ok((client, _)) = listener.accept() {
            let Ok(upstream) = TcpStream::connect(target) else { return };
            let c2 = client.try_clone().unwrap();
            let u2 = upstream.try_clone().unwrap();
            let cap_up = Arc::clone(&capture);
            let cap_down = Arc::clone(&capture);
            std::thread::spawn(move || pump(client, upstream, cap_up));
            std::thread::spawn(move || pump(u2, c2, cap_down));
        }
    });
    addr
}

fn pump(mut from: TcpStream, mut to: TcpStream, capture: Arc<Mutex<Vec<u8>>>) {
    let mut buf = [0u8; 4096];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => {
                let _ = to.shutdown(Shutdown::Both);
                return;
            }
            Ok(n) => {
                capture.lock().unwrap().extend_from_slice(&buf[..n]);
                if to.write_all(&buf[..n]).is_err() {
                    return;
                }
            }
        }
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn traffic_carries_no_plaintext_no_keys_no_rule_text() {
    let (server, _dir) = start_server("dsp-confidential");
    let secret_text = "extremely-secret-payload-value";
    let xml = format!("<patient><record>{secret_text}</record></patient>");
    let bytes = encrypt_xml(&xml, [8; 16], 256);
    put_doc(server.addr(), [8; 16], &bytes).unwrap();

    let rules_text = "+ alice /patient//record\n";
    let rules_blob =
        encrypt_document(rules_text.as_bytes(), &test_key(), [8; 16], 256).unwrap().to_bytes();
    put_rules(server.addr(), [8; 16], "alice", &rules_blob).unwrap();

    let capture = Arc::new(Mutex::new(Vec::new()));
    let proxy_addr = recording_proxy(server.addr(), Arc::clone(&capture));

    // run a full session plus a rules fetch through the proxy
    let fetched_blob = get_rules(proxy_addr, [8; 16], "alice").unwrap();
    assert_eq!(fetched_blob, rules_blob);
    let rules = RuleSet::from_rules(parse_rules(rules_text).unwrap()).unwrap();
    let session = open_session(test_key(), &rules, None, BudgetProfile::desk()).unwrap();
    let mut source = client_chunk_source(proxy_addr, [8; 16]).unwrap();
    let (out, _) = run_session(session, &mut source).unwrap();
    assert!(out.contains(secret_text), "sanity: the session does deliver the text");

    let traffic = capture.lock().unwrap().clone();
    assert!(!traffic.is_empty());
    let key = test_key();
    assert!(!contains(&traffic, secret_text.as_bytes()), "document text leaked");
    assert!(!contains(&traffic, b"<patient>"), "serialized markup leaked");
    assert!(!contains(&traffic, b"patient"), "tag name leaked");
    assert!(!contains(&traffic, rules_text.as_bytes()), "rule text leaked");
    assert!(!contains(&traffic, b"/patient//record"), "rule path leaked");
    assert!(!contains(&traffic, &key.enc), "encryption key leaked");
    assert!(!contains(&traffic, &key.mac), "mac key leaked");
    server.shutdown();
}

#[test]
fn skipped_spans_generate_no_fetches() {
    let (server, _dir) = start_server("dsp-skiplog");
    let mut xml = String::from("<root><keep>k</keep><big>");
    for i in 0..400 {
        xml.push_str(&format!("<item>payload payload payload {i}</item>"));
    }
    xml.push_str("</big></root>");
    let bytes = encrypt_xml(&xml, [13; 16], 512);
    let total_chunks = EncryptedDocument::from_bytes(&bytes).unwrap().header.chunk_count;
    put_doc(server.addr(), [13; 16], &bytes).unwrap();

    let rules = ruleset(&["+ u //root", "- u /root/big"]);
    let session = open_session(test_key(), &rules, None, BudgetProfile::desk()).unwrap();
    let mut source = client_chunk_source(server.addr(), [13; 16]).unwrap();
    let (out, stats) = run_session(session, &mut source).unwrap();
    assert_eq!(out, "<root><keep>k</keep></root>");
    assert!(stats.chunks_skipped > total_chunks / 2, "{stats:?}");

    let fetched: Vec<u32> = server
        .request_log()
        .iter()
        .filter(|e| e.opcode == OP_GET_CHUNKS && e.doc_id == [13; 16])
        .flat_map(|e| e.first..e.first + e.count)
        .collect();
    assert_eq!(fetched.len(), stats.chunks_fetched as usize, "each chunk fetched exactly once");
    // the skipped span in the middle stays untouched
    let skipped: Vec<u32> = (0..total_chunks).filter(|i| !fetched.contains(i)).collect();
    assert_eq!(skipped.len() as u32, stats.chunks_skipped);
    assert!(!skipped.is_empty());
    server.shutdown();
}
