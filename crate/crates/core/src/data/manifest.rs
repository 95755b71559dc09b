//! Dataset manifests: one tab-separated record per line,
//! `image_path<TAB>label[<TAB>mask_path]`, paths relative to the manifest.
//! Lines starting with `#` are comments; `# split: <name>` sets the split tag.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Class;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub label: Class,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub split: Option<Split>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (normal, glaucoma) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == Class::Glaucoma).count();
        (self.records.len() - pos, pos)
    }

    pub fn labels(&self) -> Vec<Class> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.records[i].mask.as_ref().map(|m| self.root.join(m))
    }

    /// Subset by index, keeping root and split.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            split: self.split,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(split) = self.split {
            s.push_str(&format!("# split: {split}\n"));
        }
        for r in &self.records {
            s.push_str(&r.image.to_string_lossy());
            s.push('\t');
            s.push_str(&r.label.index().to_string());
            if let Some(m) = &r.mask {
                s.push('\t');
                s.push_str(&m.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut split = None;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("split:") {
                    split = Some(tag.trim().parse()?);
                }
                continue;
            }
            let bad = |detail: String| Error::data(origin, format!("line {}: {detail}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(bad(format!("expected 2 or 3 tab-separated fields, got {}", fields.len())));
            }
            let label = fields[1]
                .trim()
                .parse::<usize>()
                .ok()
                .and_then(Class::from_index)
                .ok_or_else(|| bad(format!("label `{}` is not 0 or 1", fields[1])))?;
            records.push(ManifestRecord {
                image: PathBuf::from(fields[0]),
                label,
                mask: fields.get(2).filter(|m| !m.is_empty()).map(PathBuf::from),
            });
        }
        Ok(Self { root: root.into(), split, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Check that every referenced file exists.
    pub fn verify_files(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let img = self.image_path(i);
            if !img.is_file() {
                return Err(Error::data(img, "image file missing"));
            }
            if let Some(m) = r.mask.as_ref().map(|m| self.root.join(m)) {
                if !m.is_file() {
                    return Err(Error::data(m, "mask file missing"));
                }
            }
        }
        Ok(())
    }
}

/// Read a manifest and check that the files it references exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut m = DatasetManifest::parse(&text, root, path)?;
    if m.split.is_none() {
        m.split = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok());
    }
    m.verify_files()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# split: val\nimages/a.png\t1\tmasks/a.png\nimages/b.png\t0\n";
        let m = DatasetManifest::parse(text, "/data", Path::new("val.tsv")).unwrap();
        assert_eq!(m.split, Some(Split::Val));
        assert_eq!(m.class_counts(), (1, 1));
        assert_eq!(m.mask_path(0), Some(PathBuf::from("/data/masks/a.png")));
        assert_eq!(m.to_text(), text);
    }

    #[test]
    fn bad_label_names_the_line() {
        let err = DatasetManifest::parse("a.png\t2\n", "/", Path::new("x.tsv")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn missing_file_identifies_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        std::fs::write(&p, "nope.png\t0\n").unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
        assert!(err.is_data_error());
    }
}
