//! Dataset manifest: CSV rows of `wav_path,label_list,split`, labels joined by `;`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the file.
    pub wav_path: String,
    pub labels: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    wav_path: String,
    label_list: String,
    split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AsitError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| AsitError::Data(format!("manifest row {}: {e}", i + 1)))?;
            let labels: Vec<String> = row
                .label_list
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if labels.is_empty() {
                return Err(AsitError::Data(format!("manifest row {}: no labels", i + 1)));
            }
            entries.push(ManifestEntry {
                wav_path: row.wav_path,
                labels,
                split: row.split,
            });
        }
        Ok(Manifest { root, entries })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        // The header is written explicitly so an empty manifest still has one.
        w.write_record(["wav_path", "label_list", "split"])
            .map_err(|e| AsitError::Data(e.to_string()))?;
        for e in &self.entries {
            w.write_record([e.wav_path.as_str(), &e.labels.join(";"), e.split.as_str()])
                .map_err(|e| AsitError::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AsitError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| AsitError::io(path, e))
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        let p = Path::new(&e.wav_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Sorted label vocabulary over every split.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().flat_map(|e| &e.labels).collect();
        set.into_iter().cloned().collect()
    }

    pub fn split(&self, s: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == s).collect()
    }

    /// Label indices into [`Manifest::classes`].
    pub fn label_indices(&self, e: &ManifestEntry) -> Vec<usize> {
        let classes = self.classes();
        e.labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label in vocabulary"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let text = "wav_path,label_list,split\na.wav,dog,train\nsub/b.wav, cat;dog ,test\n";
        let m = Manifest::parse(text, PathBuf::from("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].labels, vec!["cat", "dog"]);
        assert_eq!(m.classes(), vec!["cat", "dog"]);
        assert_eq!(m.label_indices(&m.entries[1]), vec![0, 1]);
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/data/sub/b.wav"));
        assert_eq!(m.split(Split::Test).len(), 1);
        let back = Manifest::parse(&m.to_csv().unwrap(), m.root.clone()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_rows_are_data_errors() {
        let bad_split = "wav_path,label_list,split\na.wav,dog,holdout\n";
        let err = Manifest::parse(bad_split, PathBuf::new()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let no_label = "wav_path,label_list,split\na.wav,,train\n";
        assert!(Manifest::parse(no_label, PathBuf::new()).is_err());
    }

    #[test]
    fn empty_manifest_keeps_header() {
        let m = Manifest {
            root: PathBuf::new(),
            entries: vec![],
        };
        assert_eq!(m.to_csv().unwrap(), "wav_path,label_list,split\n");
        assert!(Manifest::parse("wav_path,label_list,split\n", PathBuf::new()).unwrap().entries.is_empty());
    }
}
