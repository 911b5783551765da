//! Append-only line journal. One record per line, fields separated by single
//! spaces, binary fields hex-encoded.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the journal and returns it together with
    /// the records already present.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<Vec<String>>)> {
        let path = path.as_ref().to_path_buf();
        let mut existing = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                existing.push(line.split(' ').map(str::to_owned).collect());
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Self { path, file }, existing))
    }

    pub fn append(&mut self, fields: &[&str]) -> io::Result<()> {
        let mut line = fields.join(" ");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub(crate) fn corrupt(path: &Path, line: usize, what: impl std::fmt::Display) -> io::Error {
    io::Error::new(
        io::ErrorKind::InvalidData,
        format!("{}:{}: {what}", path.display(), line + 1),
    )
}
