use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DeidError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UidMapRecord {
    pub input_hash: String,
    pub output_uid: String,
}

/// Append-only newline-delimited UID reversibility log. Writers take an
/// exclusive advisory lock per append; readers take a shared lock.
#[derive(Debug, Clone)]
pub struct UidMapLog {
    path: PathBuf,
}

impl UidMapLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        UidMapLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn open_append(&self) -> std::io::Result<File> {
        let mut opts = OpenOptions::new();
        opts.create(true).append(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        opts.open(&self.path)
    }

    pub fn append(&self, records: &[UidMapRecord]) -> Result<(), DeidError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        let mut f = self.open_append()?;
        f.lock()?;
        let res = f.write_all(&buf).and_then(|_| f.flush());
        f.unlock()?;
        res?;
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<UidMapRecord>, DeidError> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        f.lock_shared()?;
        let mut out = Vec::new();
        for line in BufReader::new(&f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| DeidError::InvalidPolicy(e.to_string()))?,
            );
        }
        f.unlock()?;
        Ok(out)
    }

    /// Reverse lookup by remapped UID.
    pub fn find_input_hash(&self, output_uid: &str) -> Result<Option<String>, DeidError> {
        Ok(self
            .read_all()?
            .into_iter()
            .find(|r| r.output_uid == output_uid)
            .map(|r| r.input_hash))
    }
}
