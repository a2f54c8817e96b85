//! Operator command line: key generation, document encoding and
//! encryption, rule management, server, queries, and tamper checks.
//!
//! stdout carries only machine-consumable payloads (the authorized result
//! document for `query`, document ids for `encrypt`/`put`); everything else
//! goes to stderr. Exit codes: 0 success, 1 usage or input error, 2
//! integrity failure, 3 budget exceeded, 4 transport failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use cardstream_core::access::{parse_rules, RuleSet};
use cardstream_core::document::parse_xml_text;
use cardstream_core::dsp;
use cardstream_core::envelope::{encrypt_document, DocumentKey, EncryptedDocument};
use cardstream_core::error::Error;
use cardstream_core::skipindex::{encode_compact, TagDictionary};
use cardstream_core::soe::{open_session, run_session, BudgetProfile, FileChunkSource, Stats};
use cardstream_core::xpath::parse_xpath;

const KEY_MAGIC: &str = "CSKEY1";
const SERVER_ENV: &str = "CARDSTREAM_SERVER";

#[derive(Parser)]
#[command(name = "cardstream", version, about = "Streaming access control for encrypted XML")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a document key file.
    Keygen {
        /// Where to write the key (created 0600, never overwritten).
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compile an XML document to the compact indexed format.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Encrypt a compact document; prints the document id.
    Encrypt {
        input: PathBuf,
        #[arg(short, long)]
        key: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 512)]
        chunk_size: u32,
    },
    /// Run the document server over a storage directory.
    Serve {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        listen: String,
    },
    /// Upload an encrypted document; prints its id.
    Put {
        input: PathBuf,
        /// Server address (defaults to $CARDSTREAM_SERVER).
        #[arg(long)]
        server: Option<String>,
    },
    /// Rule management.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
    /// Fetch, decrypt, filter, and print the authorized view of a document.
    Query {
        /// Document id (32 hex digits).
        #[arg(long)]
        doc: String,
        #[arg(short, long)]
        key: PathBuf,
        /// Rules file (`+|- subject xpath` lines).
        #[arg(long)]
        rules: PathBuf,
        /// Optional XPath query to intersect with the authorized view.
        #[arg(long)]
        query: Option<String>,
        /// Server address (defaults to $CARDSTREAM_SERVER when --file is
        /// not given).
        #[arg(long)]
        server: Option<String>,
        /// Read the encrypted document from a local file instead.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Disable subtree skipping.
        #[arg(long)]
        no_skip: bool,
        /// Print transfer statistics to stderr as key=value lines.
        #[arg(long)]
        stats: bool,
    },
    /// Verify the integrity of an encrypted document file.
    Verify {
        input: PathBuf,
        #[arg(short, long)]
        key: PathBuf,
    },
}

#[derive(Subcommand)]
enum RulesAction {
    /// Encrypt a rules file and store it on the server under
    /// (document, subject).
    Put {
        input: PathBuf,
        #[arg(short, long)]
        key: PathBuf,
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        subject: String,
        /// Document the rules govern (32 hex digits).
        #[arg(long)]
        doc: String,
    },
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Core(e) => match e {
            Error::Integrity(_) | Error::CorruptStream(_) => 2,
            Error::Budget { .. } => 3,
            Error::Transport(_) | Error::Bind(_) => 4,
            _ => 1,
        },
    }
}

fn main() {
    let code = match Cli::try_parse() {
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            0
        }
        Err(e) => {
            eprint!("{e}");
            1
        }
        Ok(cli) => match run(cli.command) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err}");
                exit_code(&err)
            }
        },
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Keygen { output } => keygen(&output),
        Command::Encode { input, output } => encode(&input, &output),
        Command::Encrypt { input, key, output, chunk_size } => {
            encrypt(&input, &key, &output, chunk_size)
        }
        Command::Serve { dir, listen } => serve(&dir, &listen),
        Command::Put { input, server } => put(&input, server),
        Command::Rules { action: RulesAction::Put { input, key, server, subject, doc } } => {
            rules_put(&input, &key, server, &subject, &doc)
        }
        Command::Query { doc, key, rules, query, server, file, profile, no_skip, stats } => {
            run_query(QueryArgs { doc, key, rules, query, server, file, profile, no_skip, stats })
        }
        Command::Verify { input, key } => verify(&input, &key),
    }
}

// -- key files ---------------------------------------------------------------

fn keygen(output: &Path) -> Result<(), CliError> {
    let key = DocumentKey::generate()?;
    let mut options = fs::OpenOptions::new();
    options.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut f = options
        .open(output)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", output.display())))?;
    writeln!(f, "{KEY_MAGIC}").map_err(Error::from)?;
    writeln!(f, "{}", BASE64.encode(key.to_bytes())).map_err(Error::from)?;
    eprintln!("wrote {}", output.display());
    Ok(())
}

fn read_key(path: &Path) -> Result<DocumentKey, CliError> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::MetadataExt;
        let mode = fs::metadata(path).map_err(Error::from)?.mode();
        if mode & 0o004 != 0 {
            return Err(CliError::Usage(format!(
                "key file {} is world-readable; refusing to use it",
                path.display()
            )));
        }
    }
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let mut lines = text.lines();
    if lines.next() != Some(KEY_MAGIC) {
        return Err(CliError::Usage(format!("{} is not a {KEY_MAGIC} key file", path.display())));
    }
    let encoded = lines
        .next()
        .ok_or_else(|| CliError::Usage("key file is missing its key line".into()))?;
    let raw = BASE64
        .decode(encoded.trim())
        .map_err(|e| CliError::Usage(format!("bad base64 in key file: {e}")))?;
    Ok(DocumentKey::from_bytes(&raw)?)
}

// -- document preparation ----------------------------------------------------

fn encode(input: &Path, output: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(Error::from)?;
    let tree = parse_xml_text(&text)?;
    let dict = TagDictionary::from_tree(&tree)?;
    let compact = encode_compact(&tree, &dict)?;
    fs::write(output, &compact).map_err(Error::from)?;
    eprintln!(
        "encoded {} elements, {} tags, {} bytes",
        tree.element_count(),
        dict.len(),
        compact.len()
    );
    Ok(())
}

fn encrypt(input: &Path, key: &Path, output: &Path, chunk_size: u32) -> Result<(), CliError> {
    let key = read_key(key)?;
    let compact = fs::read(input).map_err(Error::from)?;
    let mut doc_id = [0u8; 16];
    getrandom::getrandom(&mut doc_id).map_err(|e| Error::Io(e.to_string()))?;
    let doc = encrypt_document(&compact, &key, doc_id, chunk_size)?;
    fs::write(output, doc.to_bytes()).map_err(Error::from)?;
    println!("{}", hex_string(&doc_id));
    eprintln!("encrypted into {} chunks of {}", doc.header.chunk_count, chunk_size);
    Ok(())
}

// -- server and transfer -----------------------------------------------------

fn serve(dir: &Path, listen: &str) -> Result<(), CliError> {
    let store = dsp::Store::open(dir)?;
    let server = dsp::serve(store, listen)?;
    eprintln!("listening on {}", server.addr());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn server_address(explicit: Option<String>) -> Result<String, CliError> {
    explicit
        .or_else(|| std::env::var(SERVER_ENV).ok())
        .ok_or_else(|| CliError::Usage(format!("no server given (--server or ${SERVER_ENV})")))
}

fn put(input: &Path, server: Option<String>) -> Result<(), CliError> {
    let addr = server_address(server)?;
    let bytes = fs::read(input).map_err(Error::from)?;
    let doc = EncryptedDocument::from_bytes(&bytes)?;
    dsp::client::put_doc(addr, doc.header.doc_id, &bytes)?;
    println!("{}", hex_string(&doc.header.doc_id));
    Ok(())
}

fn rules_put(
    input: &Path,
    key: &Path,
    server: Option<String>,
    subject: &str,
    doc: &str,
) -> Result<(), CliError> {
    let addr = server_address(server)?;
    let key = read_key(key)?;
    let doc_id = parse_doc_id(doc)?;
    let text = fs::read_to_string(input).map_err(Error::from)?;
    let rules = parse_rules(&text)?;
    if let Some(other) = rules.iter().find(|r| r.subject != subject) {
        return Err(CliError::Usage(format!(
            "rules file names subject {:?}, expected {subject:?}",
            other.subject
        )));
    }
    // The blob is the rules text in the same envelope format, single chunk.
    let blob = encrypt_document(text.as_bytes(), &key, doc_id, 1 << 20)?;
    dsp::client::put_rules(addr, doc_id, subject, &blob.to_bytes())?;
    eprintln!("stored {} rules for {subject}", rules.len());
    Ok(())
}

// -- query and verify ----------------------------------------------------------

struct QueryArgs {
    doc: String,
    key: PathBuf,
    rules: PathBuf,
    query: Option<String>,
    server: Option<String>,
    file: Option<PathBuf>,
    profile: String,
    no_skip: bool,
    stats: bool,
}

fn run_query(args: QueryArgs) -> Result<(), CliError> {
    if args.server.is_some() && args.file.is_some() {
        return Err(CliError::Usage("--server and --file are mutually exclusive".into()));
    }
    let key = read_key(&args.key)?;
    let rules_text = fs::read_to_string(&args.rules).map_err(Error::from)?;
    let rules = RuleSet::from_rules(parse_rules(&rules_text)?)?;
    let query = args.query.as_deref().map(parse_xpath).transpose()?;
    let profile = BudgetProfile::by_name(&args.profile)
        .ok_or_else(|| CliError::Usage(format!("unknown profile {:?}", args.profile)))?;
    let throttled = profile.bandwidth_bytes_per_sec.is_some();

    let mut session = open_session(key, &rules, query.as_ref(), profile)?;
    session.set_skipping(!args.no_skip);

    let (output, stats) = match &args.file {
        Some(path) => {
            let mut source = FileChunkSource::open(path)?;
            let expected = parse_doc_id(&args.doc)?;
            if source.doc_id() != expected {
                return Err(CliError::Usage(format!(
                    "{} holds document {}, not {}",
                    path.display(),
                    hex_string(&source.doc_id()),
                    args.doc
                )));
            }
            run_session(session, &mut source)?
        }
        None => {
            let addr = server_address(args.server.clone())?;
            let doc_id = parse_doc_id(&args.doc)?;
            let mut source = dsp::client::client_chunk_source(addr, doc_id)?;
            run_session(session, &mut source)?
        }
    };

    if !output.is_empty() {
        println!("{output}");
    }
    if args.stats {
        print_stats(&stats, throttled);
    }
    Ok(())
}

fn print_stats(stats: &Stats, throttled: bool) {
    eprintln!("bytes_fetched={}", stats.bytes_fetched);
    eprintln!("bytes_decrypted={}", stats.bytes_decrypted);
    eprintln!("bytes_skipped={}", stats.bytes_skipped);
    eprintln!("chunks_fetched={}", stats.chunks_fetched);
    eprintln!("chunks_skipped={}", stats.chunks_skipped);
    eprintln!("peak_memory={}", stats.peak_memory);
    eprintln!("events_emitted={}", stats.events_emitted);
    if throttled {
        if let Some(seconds) = stats.transfer_seconds {
            eprintln!("transfer_seconds={seconds}");
        }
    }
}

fn verify(input: &Path, key: &Path) -> Result<(), CliError> {
    let key = read_key(key)?;
    let bytes = fs::read(input).map_err(Error::from)?;
    let doc = EncryptedDocument::from_bytes(&bytes)?;
    doc.header.verify(&key, &doc.header_mac)?;
    for i in 0..doc.header.chunk_count {
        doc.decrypt_chunk(&key, i)?;
    }
    eprintln!("ok: header and {} chunks verified", doc.header.chunk_count);
    Ok(())
}

// -- small helpers --------------------------------------------------------------

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_doc_id(text: &str) -> Result<[u8; 16], CliError> {
    let raw = hex::decode(text)
        .map_err(|_| CliError::Usage(format!("document id {text:?} is not hex")))?;
    <[u8; 16]>::try_from(raw.as_slice())
        .map_err(|_| CliError::Usage("document id must be 32 hex digits".into()))
}
