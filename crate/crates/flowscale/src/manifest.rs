//! Corpus manifests: a header line followed by one grid-file path per line,
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use flowscale_core::GridField;

use crate::error::{Error, Result};
use crate::grid::read_grid;

pub const HEADER: &str = "# flowscale manifest v1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub files: Vec<PathBuf>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for f in &self.files {
            s.push_str(&format!("{}\n", f.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Malformed(format!("manifest must start with {HEADER:?}")));
        }
        Ok(Self {
            files: lines.filter(|l| !l.trim().is_empty()).map(PathBuf::from).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    /// Reads every listed grid, resolving paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Vec<GridField>> {
        self.files.iter().map(|f| read_grid(&base.join(f))).collect()
    }
}

/// Reads a manifest and the grids it lists.
pub fn load_corpus(manifest: &Path) -> Result<Vec<GridField>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    Manifest::read(manifest)?.load(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = Manifest {
            files: vec!["a.cnfg".into(), "sub/b.cnfg".into()],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(Manifest::parse(HEADER).unwrap(), Manifest::default());
        assert!(Manifest::parse("a.cnfg\n").is_err());
    }
}
