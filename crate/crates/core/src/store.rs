//! On-disk session storage.
//!
//! Layout: `<data_dir>/sessions/<id>/events.jsonl` plus
//! `<data_dir>/sessions/<id>/objects/<sha256>`. Objects are written to a
//! temporary file, synced and renamed into place before the event that
//! references them is appended. Each appended line is synced. A trailing
//! line without its newline is the residue of an interrupted append and is
//! cut off when the store is opened.
//!
//! The `DEBIAS_FAILPOINT` variable (`<event>:abort|torn|pause`) interrupts
//! the append of a matching event, for crash testing.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::session::{EventRecord, Persistence};

pub const FAILPOINT_ENV: &str = "DEBIAS_FAILPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FailAction {
    Abort,
    Torn,
    Pause,
}

#[derive(Debug, Clone)]
pub struct FsStore {
    dir: PathBuf,
    failpoint: Option<(String, FailAction)>,
}

fn parse_failpoint(spec: &str) -> Option<(String, FailAction)> {
    let (event, action) = spec.split_once(':')?;
    let action = match action {
        "abort" => FailAction::Abort,
        "torn" => FailAction::Torn,
        "pause" => FailAction::Pause,
        _ => return None,
    };
    Some((event.to_string(), action))
}

/// Session ids become directory names: ASCII alphanumerics, `-` and `_` only.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl FsStore {
    pub fn session_dir(data_dir: &Path, id: &str) -> PathBuf {
        data_dir.join("sessions").join(id)
    }

    pub fn exists(data_dir: &Path, id: &str) -> bool {
        Self::session_dir(data_dir, id)
            .join("events.jsonl")
            .is_file()
    }

    /// Opens or creates the store for session `id`.
    pub fn open(data_dir: &Path, id: &str) -> io::Result<Self> {
        if !valid_session_id(id) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("invalid session id `{id}`"),
            ));
        }
        let dir = Self::session_dir(data_dir, id);
        fs::create_dir_all(dir.join("objects"))?;
        let store = Self {
            dir,
            failpoint: std::env::var(FAILPOINT_ENV)
                .ok()
                .as_deref()
                .and_then(parse_failpoint),
        };
        store.repair()?;
        Ok(store)
    }

    /// Ids of every stored session, sorted.
    pub fn list(data_dir: &Path) -> io::Result<Vec<String>> {
        let root = data_dir.join("sessions");
        if !root.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(root)?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("events.jsonl").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join("events.jsonl")
    }

    /// Cuts an unterminated trailing line.
    fn repair(&self) -> io::Result<()> {
        let path = self.log_path();
        let Ok(bytes) = fs::read(&path) else {
            return Ok(());
        };
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if keep < bytes.len() {
            let file = OpenOptions::new().write(true).open(&path)?;
            file.set_len(keep as u64)?;
            file.sync_all()?;
        }
        Ok(())
    }

    fn sync_dir(&self, dir: &Path) -> io::Result<()> {
        File::open(dir)?.sync_all()
    }
}

impl Persistence for FsStore {
    fn put_object(&mut self, reference: &str, bytes: &[u8]) -> io::Result<()> {
        let objects = self.dir.join("objects");
        let path = objects.join(reference);
        if path.is_file() {
            return Ok(());
        }
        let tmp = objects.join(format!(".{reference}.tmp"));
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, &path)?;
        self.sync_dir(&objects)
    }

    fn get_object(&self, reference: &str) -> io::Result<Vec<u8>> {
        if !reference.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "malformed object reference",
            ));
        }
        fs::read(self.dir.join("objects").join(reference))
    }

    fn append(&mut self, record: &EventRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path())?;
        if let Some((event, action)) = &self.failpoint {
            if record.event.name().starts_with(event.as_str()) {
                match action {
                    FailAction::Abort => std::process::abort(),
                    FailAction::Torn => {
                        file.write_all(&line[..line.len() / 2])?;
                        file.sync_all()?;
                        std::process::abort();
                    }
                    FailAction::Pause => std::thread::sleep(std::time::Duration::from_secs(3600)),
                }
            }
        }
        file.write_all(&line)?;
        file.sync_all()?;
        if record.seq == 0 {
            self.sync_dir(&self.dir)?;
        }
        Ok(())
    }

    fn records(&self) -> io::Result<Vec<EventRecord>> {
        let file = match File::open(self.log_path()) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        BufReader::new(file)
            .lines()
            .filter(|l| !l.as_ref().is_ok_and(|l| l.trim().is_empty()))
            .map(|l| {
                serde_json::from_str(&l?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
            })
            .collect()
    }
}
