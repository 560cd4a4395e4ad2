//! Atomic output: files are written to a temporary sibling and renamed
//! into place, so a failed run leaves no partial primary output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;

fn parent_of(path: &Path) -> anyhow::Result<&Path> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        anyhow::bail!(frk::Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")
        ));
    }
    Ok(dir)
}

/// Writes one file through a temporary file in the same directory.
pub fn write_atomic<F>(path: &Path, fill: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = parent_of(path)?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".frk-")
        .tempfile_in(dir)
        .map_err(|e| frk::Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush().map_err(|e| frk::Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| frk::Error::io(path, e.error))?;
    Ok(())
}

/// A set of files staged in a temporary directory and moved into `dest`
/// only once every file has been written.
pub struct StagedDir {
    stage: tempfile::TempDir,
    dest: PathBuf,
    names: Vec<String>,
}

impl StagedDir {
    pub fn new(dest: &Path) -> anyhow::Result<Self> {
        if dest.exists() && !dest.is_dir() {
            anyhow::bail!(frk::Error::io(
                dest,
                std::io::Error::other("exists and is not a directory")
            ));
        }
        let parent = parent_of(dest)?;
        let stage = tempfile::Builder::new()
            .prefix(".frk-stage-")
            .tempdir_in(parent)
            .map_err(|e| frk::Error::io(parent, e))?;
        Ok(StagedDir {
            stage,
            dest: dest.to_path_buf(),
            names: Vec::new(),
        })
    }

    pub fn write<F>(&mut self, name: &str, fill: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
    {
        let path = self.stage.path().join(name);
        let file = fs::File::create(&path).map_err(|e| frk::Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        fill(&mut w)?;
        w.flush().map_err(|e| frk::Error::io(&path, e))?;
        self.names.push(name.to_string());
        Ok(())
    }

    /// Renames the staged directory into place, or moves each file into an
    /// existing destination directory.
    pub fn commit(self) -> anyhow::Result<()> {
        if !self.dest.exists() {
            let stage = self.stage.keep();
            return fs::rename(&stage, &self.dest)
                .map_err(|e| frk::Error::io(&self.dest, e))
                .with_context(|| format!("moving {} into place", stage.display()));
        }
        for name in &self.names {
            let to = self.dest.join(name);
            fs::rename(self.stage.path().join(name), &to).map_err(|e| frk::Error::io(&to, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_fill_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            anyhow::bail!("boom")
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn staged_dir_commits_into_new_and_existing() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("set");
        let mut s = StagedDir::new(&dest).unwrap();
        s.write("a.txt", |w| Ok(w.write_all(b"a")?)).unwrap();
        s.commit().unwrap();
        let mut s = StagedDir::new(&dest).unwrap();
        s.write("b.txt", |w| Ok(w.write_all(b"b")?)).unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a.txt")).unwrap(), "a");
        assert_eq!(fs::read_to_string(dest.join("b.txt")).unwrap(), "b");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn dropped_stage_is_removed() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = StagedDir::new(&dir.path().join("set")).unwrap();
        s.write("a.txt", |w| Ok(w.write_all(b"a")?)).unwrap();
        drop(s);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
