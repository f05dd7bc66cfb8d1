//! Staged output files: everything is rendered in memory first, then each
//! file is written to a temporary sibling and renamed into place under a
//! directory lock.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;

const LOCK_NAME: &str = ".drivebaseline.lock";

#[derive(Debug)]
pub struct Staged {
    dir: PathBuf,
    header: Vec<String>,
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    /// `command` and `echo` become `#` comment lines at the top of every
    /// text file.
    pub fn new(dir: &Path, command: &str, echo: &[(String, String)]) -> Self {
        let mut header = vec![format!("# drivebaseline {command}")];
        header.extend(echo.iter().map(|(k, v)| format!("# {k}={v}")));
        Staged {
            dir: dir.to_path_buf(),
            header,
            files: Vec::new(),
        }
    }

    pub fn header_lines(&self) -> &[String] {
        &self.header
    }

    /// Adds a file whose body is produced by `render`, prefixed with the
    /// header.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        render: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        for line in &self.header {
            writeln!(buf, "{line}")?;
        }
        render(&mut buf)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    /// Adds a file verbatim, without the header.
    pub fn add_raw(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dir)?;
        let _lock = DirLock::acquire(&self.dir)?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let target = self.dir.join(name);
            let tmp = self.dir.join(format!(".{name}.tmp"));
            let result = (|| -> io::Result<()> {
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
                fs::rename(&tmp, &target)
            })();
            if let Err(err) = result {
                let _ = fs::remove_file(&tmp);
                return Err(err.into());
            }
            written.push(target);
        }
        Ok(written)
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> io::Result<Self> {
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(err) if err.kind() == io::ErrorKind::AlreadyExists => Err(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!("output directory is locked by {}", path.display()),
            )),
            Err(err) => Err(err),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}
