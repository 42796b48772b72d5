//! Newline-delimited profile store.
//!
//! Line 1 is a header record; every following line is one profile. Appends
//! go through a single writer. [`ProfileStore::finalize`] rewrites the file
//! in `(user, task family)` order so a resumed run ends byte-identical to an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GeneratorKind, ProfileError, TaskAlignedProfile};
use crate::tasks::TaskKind;

pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub record: String,
    pub format_version: u32,
    pub generator: GeneratorKind,
    pub config_digest: String,
    pub prompt_versions: BTreeMap<String, u32>,
}

impl StoreHeader {
    pub fn new(generator: GeneratorKind, config_digest: &str) -> Self {
        StoreHeader {
            record: "header".into(),
            format_version: STORE_FORMAT_VERSION,
            generator,
            config_digest: config_digest.to_string(),
            prompt_versions: crate::prompts::versions(),
        }
    }
}

type Key = (String, Option<TaskKind>);

fn key(p: &TaskAlignedProfile) -> Key {
    (p.meta.user_id.clone(), p.task_family)
}

pub struct ProfileStore {
    path: PathBuf,
    header: StoreHeader,
    writer: Mutex<File>,
}

impl ProfileStore {
    /// Reads a store. A torn final line is ignored.
    pub fn load(path: &Path) -> Result<(StoreHeader, Vec<TaskAlignedProfile>), ProfileError> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let first = lines.first().ok_or_else(|| ProfileError::Store(format!("{} is empty", path.display())))?;
        let header: StoreHeader = serde_json::from_str(first)
            .map_err(|e| ProfileError::Store(format!("{}: bad header: {e}", path.display())))?;
        let mut profiles = Vec::new();
        for (idx, line) in lines.iter().enumerate().skip(1) {
            match serde_json::from_str::<TaskAlignedProfile>(line) {
                Ok(p) => profiles.push(p),
                Err(_) if idx + 1 == lines.len() && !text.ends_with('\n') => {
                    log::warn!("ignoring torn final record in {}", path.display());
                }
                Err(e) => return Err(ProfileError::Store(format!("{}:{}: {e}", path.display(), idx + 1))),
            }
        }
        Ok((header, profiles))
    }

    /// Opens `path` for appending. An existing store with the same header
    /// is resumed and its profiles returned; anything else is replaced.
    pub fn open(path: &Path, header: StoreHeader) -> Result<(Self, Vec<TaskAlignedProfile>), ProfileError> {
        let mut existing = Vec::new();
        if path.exists() {
            match Self::load(path) {
                Ok((h, profiles)) if h == header => existing = profiles,
                Ok(_) => log::info!("{} was written under another configuration; starting over", path.display()),
                Err(e) => log::warn!("{e}; starting over"),
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        // rewrite the valid prefix so a torn tail never precedes new appends
        write_all(path, &header, &existing)?;
        let writer = OpenOptions::new().append(true).open(path)?;
        Ok((ProfileStore { path: path.to_path_buf(), header, writer: Mutex::new(writer) }, existing))
    }

    pub fn append(&self, profiles: &[TaskAlignedProfile]) -> Result<(), ProfileError> {
        let mut buf = String::new();
        for p in profiles {
            buf.push_str(&serde_json::to_string(p).map_err(|e| ProfileError::Store(e.to_string()))?);
            buf.push('\n');
        }
        let mut w = self.writer.lock().expect("store writer lock");
        w.write_all(buf.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Rewrites the store sorted by `(user, task family)`, keeping the first
    /// record per key.
    pub fn finalize(self) -> Result<Vec<TaskAlignedProfile>, ProfileError> {
        drop(self.writer);
        let (_, profiles) = Self::load(&self.path)?;
        let mut unique: BTreeMap<Key, TaskAlignedProfile> = BTreeMap::new();
        for p in profiles {
            unique.entry(key(&p)).or_insert(p);
        }
        let sorted: Vec<TaskAlignedProfile> = unique.into_values().collect();
        write_all(&self.path, &self.header, &sorted)?;
        Ok(sorted)
    }
}

fn write_all(path: &Path, header: &StoreHeader, profiles: &[TaskAlignedProfile]) -> Result<(), ProfileError> {
    let mut buf = serde_json::to_string(header).map_err(|e| ProfileError::Store(e.to_string()))?;
    buf.push('\n');
    for p in profiles {
        buf.push_str(&serde_json::to_string(p).map_err(|e| ProfileError::Store(e.to_string()))?);
        buf.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(user: &str) -> TaskAlignedProfile {
        TaskAlignedProfile::new(user, GeneratorKind::Empty, None)
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ndjson");
        let b = dir.path().join("b.ndjson");
        let header = StoreHeader::new(GeneratorKind::Empty, "d1");

        let (store, existing) = ProfileStore::open(&a, header.clone()).unwrap();
        assert!(existing.is_empty());
        store.append(&[profile("u2"), profile("u1"), profile("u3")]).unwrap();
        store.finalize().unwrap();

        let (store, _) = ProfileStore::open(&b, header.clone()).unwrap();
        store.append(&[profile("u3")]).unwrap();
        drop(store);
        // simulate a crash mid-line
        let mut f = OpenOptions::new().append(true).open(&b).unwrap();
        f.write_all(b"{\"meta\":").unwrap();
        drop(f);
        let (store, existing) = ProfileStore::open(&b, header).unwrap();
        assert_eq!(existing.len(), 1);
        store.append(&[profile("u1"), profile("u2")]).unwrap();
        store.finalize().unwrap();

        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn other_digest_starts_over() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        let (store, _) = ProfileStore::open(&path, StoreHeader::new(GeneratorKind::Empty, "d1")).unwrap();
        store.append(&[profile("u1")]).unwrap();
        drop(store);
        let (_, existing) = ProfileStore::open(&path, StoreHeader::new(GeneratorKind::Empty, "d2")).unwrap();
        assert!(existing.is_empty());
    }
}
