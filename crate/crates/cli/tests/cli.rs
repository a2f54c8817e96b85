//! End-to-end exercises of the command line: the full pipeline in file and
//! server modes, exit codes, stats output, and key-file hygiene.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cardstream"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).env_remove("CARDSTREAM_SERVER").output().unwrap()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_line(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap().trim().to_string()
}

/// keygen + encode + encrypt in a fresh directory; returns the doc id.
fn prepare(dir: &Path, xml: &str) -> String {
    fs::write(dir.join("doc.xml"), xml).unwrap();
    assert_code(&run_in(dir, &["keygen", "-o", "key"]), 0);
    assert_code(&run_in(dir, &["encode", "doc.xml", "-o", "doc.cxd"]), 0);
    let out = run_in(dir, &["encrypt", "doc.cxd", "-k", "key", "-o", "doc.sxd"]);
    assert_code(&out, 0);
    let doc_id = stdout_line(&out);
    assert_eq!(doc_id.len(), 32, "encrypt prints the document id");
    doc_id
}

#[test]
fn file_mode_pipeline_delivers_the_authorized_view() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>x</b><c><b>y</b></c></a>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n- u /a/c\n").unwrap();
    let out = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd"],
    );
    assert_code(&out, 0);
    assert_eq!(stdout_line(&out), "<a><b>x</b></a>");
}

#[test]
fn query_intersects_with_the_authorized_view() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>x</b><c>y</c></a>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd",
            "--query", "/a/c",
        ],
    );
    assert_code(&out, 0);
    assert_eq!(stdout_line(&out), "<a><c>y</c></a>");
}

#[test]
fn denied_documents_produce_empty_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>x</b></a>");
    fs::write(dir.path().join("rules.txt"), "# nothing granted\n").unwrap();
    let out = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd"],
    );
    assert_code(&out, 0);
    assert!(out.stdout.is_empty());
}

#[test]
fn verify_detects_bit_flips_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "<a><b>x</b></a>");
    assert_code(&run_in(dir.path(), &["verify", "doc.sxd", "-k", "key"]), 0);
    let mut bytes = fs::read(dir.path().join("doc.sxd")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(dir.path().join("doc.sxd"), &bytes).unwrap();
    assert_code(&run_in(dir.path(), &["verify", "doc.sxd", "-k", "key"]), 2);
}

#[test]
fn query_on_tampered_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>x</b></a>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let mut bytes = fs::read(dir.path().join("doc.sxd")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(dir.path().join("doc.sxd"), &bytes).unwrap();
    let out = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd"],
    );
    assert_code(&out, 2);
}

#[test]
fn stats_go_to_stderr_and_skip_changes_only_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut xml = String::from("<root><keep>k</keep><big>");
    for i in 0..300 {
        xml.push_str(&format!("<item>padding padding {i}</item>"));
    }
    xml.push_str("</big></root>");
    let doc_id = prepare(dir.path(), &xml);
    fs::write(dir.path().join("rules.txt"), "+ u //root\n- u /root/big\n").unwrap();
    let base = [
        "query", "--doc", doc_id.as_str(), "-k", "key", "--rules", "rules.txt", "--file",
        "doc.sxd", "--stats",
    ];
    let with_skip = run_in(dir.path(), &base);
    let mut no_skip_args = base.to_vec();
    no_skip_args.push("--no-skip");
    let without_skip = run_in(dir.path(), &no_skip_args);
    assert_code(&with_skip, 0);
    assert_code(&without_skip, 0);
    assert_eq!(with_skip.stdout, without_skip.stdout, "payloads must match");

    let stat = |out: &Output, key: &str| -> u64 {
        String::from_utf8_lossy(&out.stderr)
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")).map(|v| v.parse().unwrap()))
            .unwrap_or_else(|| panic!("{key} missing in stderr"))
    };
    assert!(stat(&with_skip, "bytes_decrypted") < stat(&without_skip, "bytes_decrypted"));
    assert!(stat(&with_skip, "chunks_skipped") > 0);
    assert_eq!(stat(&without_skip, "chunks_skipped"), 0);
}

#[test]
fn world_readable_key_files_are_refused() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a/>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let key_path = dir.path().join("key");
    let mut perms = fs::metadata(&key_path).unwrap().permissions();
    perms.set_mode(0o644);
    fs::set_permissions(&key_path, perms).unwrap();
    let out = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd"],
    );
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("world-readable"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // unknown subcommand / missing args are clap usage errors
    assert_code(&run_in(dir.path(), &["frobnicate"]), 1);
    assert_code(&run_in(dir.path(), &["query"]), 1);
    // bad profile
    let doc_id = prepare(dir.path(), "<a/>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd",
            "--profile", "mainframe",
        ],
    );
    assert_code(&out, 1);
    // --server and --file together
    let out = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd",
            "--server", "127.0.0.1:1",
        ],
    );
    assert_code(&out, 1);
    // malformed XML is an input error, not a crash
    fs::write(dir.path().join("bad.xml"), "<a attr=\"x\"/>").unwrap();
    assert_code(&run_in(dir.path(), &["encode", "bad.xml", "-o", "bad.cxd"]), 1);
    // rules outside the fragment
    fs::write(dir.path().join("bad.rules"), "+ u /a[position()=1]\n").unwrap();
    let out = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "bad.rules", "--file", "doc.sxd"],
    );
    assert_code(&out, 1);
}

#[test]
fn unreachable_server_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a/>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--server",
            "127.0.0.1:1",
        ],
    );
    assert_code(&out, 4);
}

// -- server mode ---------------------------------------------------------------

struct ServerProcess {
    child: Child,
    addr: String,
}

impl ServerProcess {
    fn spawn(dir: &Path) -> Self {
        let store = dir.join("store");
        let mut child = bin()
            .current_dir(dir)
            .args(["serve", "--dir", store.to_str().unwrap(), "--listen", "127.0.0.1:0"])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let stderr = child.stderr.take().unwrap();
        let mut line = String::new();
        BufReader::new(stderr).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("listen banner").to_string();
        ServerProcess { child, addr }
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn server_mode_pipeline_matches_file_mode() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>x</b><c><b>y</b></c></a>");
    fs::write(dir.path().join("rules.txt"), "+ alice //a\n- alice /a/c\n").unwrap();
    let server = ServerProcess::spawn(dir.path());

    let out = run_in(dir.path(), &["put", "doc.sxd", "--server", &server.addr]);
    assert_code(&out, 0);
    assert_eq!(stdout_line(&out), doc_id);

    let out = run_in(
        dir.path(),
        &[
            "rules", "put", "rules.txt", "-k", "key", "--server", &server.addr, "--subject",
            "alice", "--doc", &doc_id,
        ],
    );
    assert_code(&out, 0);
    let stored: Vec<PathBuf> = fs::read_dir(dir.path().join("store"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(stored.len(), 2, "document + rules blob: {stored:?}");

    let remote = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--server",
            &server.addr,
        ],
    );
    assert_code(&remote, 0);
    let local = run_in(
        dir.path(),
        &["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd"],
    );
    assert_code(&local, 0);
    assert_eq!(remote.stdout, local.stdout);
    assert_eq!(stdout_line(&remote), "<a><b>x</b></a>");
}

#[test]
fn server_env_var_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let doc_id = prepare(dir.path(), "<a><b>z</b></a>");
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let server = ServerProcess::spawn(dir.path());

    let out = bin()
        .current_dir(dir.path())
        .env("CARDSTREAM_SERVER", &server.addr)
        .args(["put", "doc.sxd"])
        .output()
        .unwrap();
    assert_code(&out, 0);

    let out = bin()
        .current_dir(dir.path())
        .env("CARDSTREAM_SERVER", &server.addr)
        .args(["query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt"])
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(stdout_line(&out), "<a><b>z</b></a>");
}

#[test]
fn smartcard_profile_reports_virtual_transfer_time() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("doc.xml"), "<a><b>x</b></a>").unwrap();
    assert_code(&run_in(dir.path(), &["keygen", "-o", "key"]), 0);
    assert_code(&run_in(dir.path(), &["encode", "doc.xml", "-o", "doc.cxd"]), 0);
    let out = run_in(
        dir.path(),
        &["encrypt", "doc.cxd", "-k", "key", "-o", "doc.sxd", "--chunk-size", "256"],
    );
    assert_code(&out, 0);
    let doc_id = stdout_line(&out);
    fs::write(dir.path().join("rules.txt"), "+ u //a\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "query", "--doc", &doc_id, "-k", "key", "--rules", "rules.txt", "--file", "doc.sxd",
            "--profile", "smartcard", "--stats",
        ],
    );
    assert_code(&out, 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let fetched: f64 = stderr
        .lines()
        .find_map(|l| l.strip_prefix("bytes_fetched=").map(|v| v.parse().unwrap()))
        .unwrap();
    let seconds: f64 = stderr
        .lines()
        .find_map(|l| l.strip_prefix("transfer_seconds=").map(|v| v.parse().unwrap()))
        .unwrap();
    assert_eq!(seconds, fetched / 2048.0);
}

#[test]
fn keygen_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&run_in(dir.path(), &["keygen", "-o", "key"]), 0);
    assert_code(&run_in(dir.path(), &["keygen", "-o", "key"]), 1);
}
