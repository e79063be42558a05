//! Line-delimited stem manifests: `source_id<TAB>path<TAB>duration_s`.
//!
//! Lines starting with `#` are comments; `# split=<label>` sets the split.
//! Relative paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mixture::SourceId;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source: SourceId,
    pub path: PathBuf,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<String>,
}

impl Manifest {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_source(&self, s: SourceId) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.source == s)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        let mut offset = 0;
        for (lineno, line) in text.lines().enumerate() {
            let here = offset;
            offset += line.len() + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(label) = comment.trim().strip_prefix("split=") {
                    m.split = Some(label.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    here,
                    format!("line {}: expected 3 tab-separated fields, got {}", lineno + 1, fields.len()),
                ));
            }
            let source: SourceId = fields[0]
                .parse()
                .map_err(|e| Error::format(here, format!("line {}: {e}", lineno + 1)))?;
            let duration_s: f64 = fields[2].trim().parse().map_err(|_| {
                Error::format(here, format!("line {}: bad duration `{}`", lineno + 1, fields[2]))
            })?;
            if !(duration_s > 0.0) {
                return Err(Error::format(
                    here,
                    format!("line {}: duration must be positive", lineno + 1),
                ));
            }
            let path = Path::new(fields[1]);
            let path = if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            };
            m.entries.push(ManifestEntry {
                source,
                path,
                duration_s,
            });
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let m = Self::parse(&text, base)?;
        for e in &m.entries {
            if !e.path.exists() {
                return Err(Error::io(
                    &e.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry missing"),
                ));
            }
        }
        Ok(m)
    }

    /// Serializes with paths written relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let mut out = String::new();
        if let Some(split) = &self.split {
            let _ = writeln!(out, "# split={split}");
        }
        for e in &self.entries {
            let p = e.path.strip_prefix(base_dir).unwrap_or(&e.path);
            let _ = writeln!(out, "{}\t{}\t{}", e.source, p.display(), e.duration_s);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_split() {
        let text = "# split=train\nspeech\ta.wav\t2.5\n\nsfx\t/abs/b.wav\t1\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.split.as_deref(), Some("train"));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/a.wav"));
        assert_eq!(m.entries[1].source, SourceId::Sfx);
        let again = Manifest::parse(&m.to_text(Path::new("/data")), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Manifest::parse("speech\ta.wav\n", Path::new(".")).is_err());
        assert!(Manifest::parse("mix\ta.wav\t1\n", Path::new(".")).is_err());
        assert!(Manifest::parse("music\ta.wav\t0\n", Path::new(".")).is_err());
    }

    #[test]
    fn missing_file_fails_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "music\tnope.wav\t1\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Io { .. })));
    }
}
