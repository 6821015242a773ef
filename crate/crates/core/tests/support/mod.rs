//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use kerblam::container::EngineHandle;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub fn write(root: &Path, rel: &str, body: impl AsRef<[u8]>) {
    let path = root.join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, body).unwrap();
}

/// Recursive digest of everything under `dir` except top-level entries
/// named in `skip`: relative paths, entry kinds, file contents, executable
/// bits and symlink targets.
pub fn tree_hash_except(dir: &Path, skip: &[&str]) -> String {
    let mut hasher = Sha256::new();
    let mut walk = WalkDir::new(dir).min_depth(1).follow_links(false).sort_by_file_name().into_iter();
    while let Some(entry) = walk.next() {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        if entry.depth() == 1 && skip.contains(&rel.as_str()) {
            if entry.file_type().is_dir() {
                walk.skip_current_dir();
            }
            continue;
        }
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        let file_type = entry.file_type();
        if file_type.is_symlink() {
            hasher.update(b"L");
            hasher.update(fs::read_link(entry.path()).unwrap().to_string_lossy().as_bytes());
        } else if file_type.is_dir() {
            hasher.update(b"D");
        } else {
            let mode = entry.metadata().unwrap().permissions().mode();
            hasher.update(if mode & 0o111 != 0 { b"X" } else { b"F" });
            let body = fs::read(entry.path()).unwrap();
            hasher.update((body.len() as u64).to_le_bytes());
            hasher.update(&body);
        }
        hasher.update([0]);
    }
    hex::encode(hasher.finalize())
}

pub fn tree_hash(dir: &Path) -> String {
    tree_hash_except(dir, &[])
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug)]
pub enum Route {
    Body(Vec<u8>),
    Status(u16),
    Redirect(String),
}

/// Single-threaded HTTP/1.1 server on 127.0.0.1 counting hits per path.
pub struct FixtureServer {
    pub addr: String,
    hits: Arc<Mutex<HashMap<String, usize>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FixtureServer {
    pub fn start(routes: HashMap<String, Route>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let hits = Arc::new(Mutex::new(HashMap::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let hits = Arc::clone(&hits);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = stream {
                        serve(stream, &routes, &hits);
                    }
                }
            })
        };
        Self {
            addr,
            hits,
            stop,
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn hits(&self, path: &str) -> usize {
        self.hits.lock().unwrap().get(path).copied().unwrap_or(0)
    }

    pub fn total_hits(&self) -> usize {
        self.hits.lock().unwrap().values().sum()
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve(stream: TcpStream, routes: &HashMap<String, Route>, hits: &Mutex<HashMap<String, usize>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
            break;
        }
        if let Some(value) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0; content_length];
    let _ = reader.read_exact(&mut body);
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_owned();
    *hits.lock().unwrap().entry(path.clone()).or_default() += 1;
    let (status, extra, payload) = match routes.get(&path) {
        Some(Route::Body(bytes)) => (200, String::new(), bytes.clone()),
        Some(Route::Status(code)) => (*code, String::new(), b"error".to_vec()),
        Some(Route::Redirect(to)) => (302, format!("Location: {to}\r\n"), Vec::new()),
        None => (404, String::new(), b"not found".to_vec()),
    };
    let reason = match status {
        200 => "OK",
        302 => "Found",
        404 => "Not Found",
        _ => "Error",
    };
    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n",
        payload.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(&payload);
    let _ = stream.flush();
}

/// A stub container engine whose state lives in its own directory.
pub struct StubEngine {
    pub wrapper: PathBuf,
    pub state: PathBuf,
}

impl StubEngine {
    pub fn new(dir: &Path) -> Self {
        let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/support/stub-engine.py");
        let state = dir.join("engine-state");
        fs::create_dir_all(&state).unwrap();
        let wrapper = dir.join("stub-engine");
        fs::write(
            &wrapper,
            format!(
                "#!/bin/sh\nSTUB_ENGINE_STATE='{}' exec python3 '{}' \"$@\"\n",
                state.display(),
                script.display()
            ),
        )
        .unwrap();
        fs::set_permissions(&wrapper, fs::Permissions::from_mode(0o755)).unwrap();
        Self { wrapper, state }
    }

    pub fn handle(&self) -> EngineHandle {
        EngineHandle::probe(self.wrapper.to_str().unwrap()).expect("stub engine runs")
    }

    pub fn calls(&self) -> Vec<String> {
        fs::read_to_string(self.state.join("calls.log"))
            .unwrap_or_default()
            .lines()
            .map(str::to_owned)
            .collect()
    }

    pub fn forget_image(&self, tag: &str) {
        let status = Command::new(&self.wrapper).args(["rmi", tag]).status().unwrap();
        assert!(status.success());
    }

    pub fn push(&self, tag: &str) {
        let status = Command::new(&self.wrapper).args(["push", tag]).status().unwrap();
        assert!(status.success());
    }
}

/// Runs the built `kerblam` binary in `dir`.
pub fn kerblam(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut command = Command::new(env!("CARGO_BIN_EXE_kerblam"));
    command.current_dir(dir).args(args).env_remove("KERBLAM_CONTAINER_ENGINE").env("NO_COLOR", "1");
    for (key, value) in env {
        command.env(key, value);
    }
    command.output().unwrap()
}

pub const PIPELINE_MAKEFILE: &str = "\
all: data/out/summary.txt

data/out/sorted.csv: data/in/patients.csv
\tLC_ALL=C sort data/in/patients.csv > data/out/sorted.csv

data/out/ages.txt: data/out/sorted.csv
\tawk -F, '$$1 != \"id\" { print $$1, $$3 }' data/out/sorted.csv > data/out/ages.txt

data/out/summary.txt: data/out/ages.txt data/in/weights.csv
\tawk '{ total += $$2 } END { print NR, total }' data/out/ages.txt > data/out/summary.txt
\tcat data/in/weights.csv >> data/out/summary.txt
";

pub const PIPELINE_RECIPE: &str = "FROM local/base\nWORKDIR /kerblam\nCOPY src /kerblam/src\n";

/// A three-step deterministic pipeline project. `remote_url`, when given,
/// declares `weights.csv` as a remote input with that URL instead of
/// shipping it locally.
pub fn pipeline_project(root: &Path, remote_url: Option<(&str, &[u8])>) -> PathBuf {
    let project = root.join("pipeline");
    let mut manifest = String::from("[meta]\nversion = 1\n");
    if let Some((url, body)) = remote_url {
        manifest.push_str(&format!(
            "\n[data.remote]\n\"weights.csv\" = {{ url = \"{url}\", sha256 = \"{}\" }}\n",
            sha256(body)
        ));
    } else {
        write(&project, "data/in/weights.csv", "w,0.5\n");
    }
    write(&project, "kerblam.toml", manifest);
    write(
        &project,
        "data/in/patients.csv",
        "id,name,age\n3,carol,51\n1,alice,34\n2,bob,29\n",
    );
    write(&project, "src/workflows/process.makefile", PIPELINE_MAKEFILE);
    write(&project, "src/dockerfiles/process.dockerfile", PIPELINE_RECIPE);
    fs::create_dir_all(project.join("data/out")).unwrap();
    project
}
