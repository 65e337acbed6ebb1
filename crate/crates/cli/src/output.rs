//! All-or-nothing output: files are written to temporaries in the target
//! directory and renamed into place only once every one of them succeeded.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

pub struct Staged {
    dir: PathBuf,
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write<F>(&mut self, name: &str, f: F) -> CliResult<()>
    where
        F: FnOnce(&mut BufWriter<&File>) -> CliResult<()>,
    {
        let tmp = NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            f(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        self.files.push((tmp, self.dir.join(name)));
        Ok(())
    }

    pub fn commit(self) -> CliResult<Vec<PathBuf>> {
        let mut done = Vec::new();
        for (tmp, path) in self.files {
            tmp.persist(&path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
            done.push(path);
        }
        Ok(done)
    }
}

pub fn open(path: &Path) -> CliResult<std::io::BufReader<File>> {
    File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(s)
}
