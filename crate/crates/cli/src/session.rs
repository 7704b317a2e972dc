//! File-backed session: `config.toml`, an append-only `log.jsonl`, a compacted
//! `session.json` snapshot and content-addressed files under `artifacts/`.
//!
//! Computation happens outside the writer lock; only the commit (files, log
//! line, snapshot) is serialized.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use styleprobe_core::config::Config;

use crate::error::{ServiceError, ServiceResult};
use crate::ops::{Curation, Engine, Op};

pub const CONFIG_FILE: &str = "config.toml";
pub const SNAPSHOT_FILE: &str = "session.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const ARTIFACT_DIR: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub op: Op,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: String,
    pub files: Vec<String>,
    /// Log sequence number of the op that first produced it.
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub fingerprint: String,
    /// Number of log entries folded into this snapshot.
    pub seq: u64,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub curations: Vec<Curation>,
    /// Stored response per request id, for idempotent retries.
    pub responses: BTreeMap<String, Value>,
}

struct Writer {
    snapshot: Snapshot,
    log: File,
}

pub struct Session {
    dir: PathBuf,
    engine: Arc<Engine>,
    writer: Mutex<Writer>,
}

fn session_id(config_text: &str) -> String {
    format!("sess-{}", &hex::encode(Sha256::digest(config_text.as_bytes()))[..12])
}

/// Writes via a temporary file and rename so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> ServiceResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Session {
    /// Opens the session in `dir`, creating it from `config` (or the default
    /// toy config) when the directory holds none. An existing session refuses
    /// a different explicit config.
    pub fn open(dir: &Path, config: Option<&Config>) -> ServiceResult<Session> {
        fs::create_dir_all(dir.join(ARTIFACT_DIR))?;
        let config_path = dir.join(CONFIG_FILE);
        let text = if config_path.exists() {
            let stored = fs::read_to_string(&config_path)?;
            if let Some(c) = config {
                if c.to_toml_string()? != stored {
                    return Err(ServiceError::BadRequest(format!(
                        "{} already holds a session with a different config",
                        dir.display()
                    )));
                }
            }
            stored
        } else {
            let text = config.cloned().unwrap_or_default().to_toml_string()?;
            write_atomic(&config_path, text.as_bytes())?;
            text
        };
        let config = Config::from_toml_str(&text)?;
        let engine = Arc::new(Engine::new(&config)?);
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let snapshot = if snapshot_path.exists() {
            let s: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)?;
            if s.fingerprint != engine.fingerprint() {
                return Err(styleprobe_core::Error::FingerprintMismatch {
                    expected: engine.fingerprint().to_string(),
                    found: s.fingerprint,
                }
                .into());
            }
            s
        } else {
            Snapshot {
                id: session_id(&text),
                fingerprint: engine.fingerprint().to_string(),
                seq: 0,
                artifacts: BTreeMap::new(),
                curations: Vec::new(),
                responses: BTreeMap::new(),
            }
        };
        let log = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Session {
            dir: dir.to_path_buf(),
            engine,
            writer: Mutex::new(Writer { snapshot, log }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.dir.join(ARTIFACT_DIR)
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn snapshot(&self) -> Snapshot {
        self.writer.lock().expect("writer lock").snapshot.clone()
    }

    pub fn has_artifact(&self, id: &str) -> bool {
        self.writer.lock().expect("writer lock").snapshot.artifacts.contains_key(id)
    }

    /// Bytes of a stored artifact file such as `s1-0.png`.
    pub fn read_file(&self, name: &str) -> ServiceResult<Vec<u8>> {
        let plain = !name.is_empty() && !name.contains(['/', '\\']) && !name.starts_with('.');
        let known = plain && {
            let w = self.writer.lock().expect("writer lock");
            w.snapshot.artifacts.values().any(|a| a.files.iter().any(|f| f == name))
        };
        if !known {
            return Err(ServiceError::NotFound(name.to_string()));
        }
        Ok(fs::read(self.artifact_dir().join(name))?)
    }

    /// Runs `op` and commits it. A repeated `request_id` returns the stored
    /// response without recomputing.
    pub fn execute(&self, op: Op, request_id: Option<String>) -> ServiceResult<Value> {
        {
            let w = self.writer.lock().expect("writer lock");
            if let Some(r) = request_id.as_ref().and_then(|id| w.snapshot.responses.get(id)) {
                return Ok(r.clone());
            }
            for id in op.references() {
                if !w.snapshot.artifacts.contains_key(id) {
                    return Err(ServiceError::NotFound(format!("artifact `{id}`")));
                }
            }
        }
        let outcome = self.engine.run(&op, &self.artifact_dir())?;

        let mut w = self.writer.lock().expect("writer lock");
        if let Some(r) = request_id.as_ref().and_then(|id| w.snapshot.responses.get(id)) {
            return Ok(r.clone());
        }
        for (name, bytes) in &outcome.files {
            write_atomic(&self.artifact_dir().join(name), bytes)?;
        }
        let seq = w.snapshot.seq + 1;
        let entry = LogEntry {
            seq,
            request_id: request_id.clone(),
            op: op.clone(),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        w.log.write_all(&line)?;
        w.log.flush()?;

        let snap = &mut w.snapshot;
        snap.seq = seq;
        snap.artifacts.entry(outcome.id.clone()).or_insert_with(|| ArtifactEntry {
            kind: op.kind().to_string(),
            files: outcome.files.iter().map(|(n, _)| n.clone()).collect(),
            seq,
        });
        if let Some(c) = outcome.curation {
            if !snap.curations.iter().any(|x| x.id == c.id) {
                snap.curations.push(c);
            }
        }
        if let Some(rid) = request_id {
            snap.responses.insert(rid, outcome.response.clone());
        }
        let mut bytes = serde_json::to_vec_pretty(&*snap)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &bytes)?;
        Ok(outcome.response)
    }
}

pub fn read_log(dir: &Path) -> ServiceResult<Vec<LogEntry>> {
    let text = fs::read_to_string(dir.join(LOG_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub entries: usize,
    pub compared: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn listing(dir: &Path) -> ServiceResult<Vec<String>> {
    let mut names = fs::read_dir(dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<ServiceResult<Vec<_>>>()?;
    names.sort();
    Ok(names)
}

/// Re-executes the log of `source` into the empty directory `target` and
/// compares every file byte for byte.
pub fn replay(source: &Path, target: &Path) -> ServiceResult<ReplayReport> {
    let config = Config::from_toml_str(&fs::read_to_string(source.join(CONFIG_FILE))?)?;
    if target.join(LOG_FILE).exists() {
        return Err(ServiceError::BadRequest(format!("{} already holds a session", target.display())));
    }
    let entries = read_log(source)?;
    let session = Session::open(target, Some(&config))?;
    for e in &entries {
        session.execute(e.op.clone(), e.request_id.clone())?;
    }
    drop(session);

    let mut mismatches = Vec::new();
    let mut compared = 0;
    let mut check = |a: PathBuf, b: PathBuf, label: String| -> ServiceResult<()> {
        compared += 1;
        if !b.exists() || fs::read(&a)? != fs::read(&b)? {
            mismatches.push(label);
        }
        Ok(())
    };
    for name in [CONFIG_FILE, SNAPSHOT_FILE, LOG_FILE] {
        check(source.join(name), target.join(name), name.to_string())?;
    }
    let (src, dst) = (source.join(ARTIFACT_DIR), target.join(ARTIFACT_DIR));
    let src_names = listing(&src)?;
    for name in &src_names {
        check(src.join(name), dst.join(name), format!("{ARTIFACT_DIR}/{name}"))?;
    }
    for extra in listing(&dst)?.into_iter().filter(|n| !src_names.contains(n)) {
        mismatches.push(format!("{ARTIFACT_DIR}/{extra} (only in replay)"));
    }
    Ok(ReplayReport {
        entries: entries.len(),
        compared,
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use styleprobe_core::generator::ChannelId;

    fn tiny() -> Config {
        Config::preset("tiny8").unwrap()
    }

    #[test]
    fn request_ids_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::open(dir.path(), Some(&tiny())).unwrap();
        let op = Op::Curate {
            channel: ChannelId::new(0, 1),
            tag: "t".into(),
            note: "n".into(),
            timestamp: 5,
        };
        let a = s.execute(op.clone(), Some("r1".into())).unwrap();
        let b = s
            .execute(
                Op::Curate {
                    channel: ChannelId::new(0, 2),
                    tag: "other".into(),
                    note: String::new(),
                    timestamp: 6,
                },
                Some("r1".into()),
            )
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(s.snapshot().curations.len(), 1);
        assert_eq!(read_log(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn reopening_keeps_state_and_rejects_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Session::open(dir.path(), Some(&tiny())).unwrap();
            s.execute(Op::Sample { seed: 1, index: 0 }, None).unwrap();
        }
        let s = Session::open(dir.path(), None).unwrap();
        assert!(s.has_artifact("s1-0"));
        assert!(s.read_file("s1-0.png").is_ok());
        assert!(matches!(s.read_file("../config.toml"), Err(ServiceError::NotFound(_))));
        assert!(matches!(s.read_file("s9-9.png"), Err(ServiceError::NotFound(_))));
        drop(s);
        assert!(Session::open(dir.path(), Some(&Config::default())).is_err());
    }

    #[test]
    fn missing_references_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::open(dir.path(), Some(&tiny())).unwrap();
        let err = s
            .execute(
                Op::Edit {
                    sample: "s1-0".into(),
                    edit: styleprobe_core::manipulation::EditSpec::Single {
                        channel: ChannelId::new(0, 0),
                        alpha: 1.0,
                        sign: 1.0,
                    },
                },
                None,
            )
            .unwrap_err();
        assert!(matches!(err, ServiceError::NotFound(_)));
    }
}
