//! Dataset manifests: `utt_id<TAB>path<TAB>label<TAB>attack_tag`, one row per
//! utterance, `-` as the attack tag of bona fide rows.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub attack_tag: String,
}

impl ManifestRow {
    pub fn bonafide(utt_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self { utt_id: utt_id.into(), path: path.into(), label: Label::Bonafide, attack_tag: "-".into() }
    }

    pub fn spoof(utt_id: impl Into<String>, path: impl Into<PathBuf>, attack_tag: impl Into<String>) -> Self {
        Self { utt_id: utt_id.into(), path: path.into(), label: Label::Spoof, attack_tag: attack_tag.into() }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let bad = |s: &str| s.is_empty() || s.contains(['\t', '\n', '\r']);
        if bad(&self.utt_id) {
            return Err(format!("invalid utterance id {:?}", self.utt_id));
        }
        match self.path.to_str() {
            Some(p) if !bad(p) => {}
            _ => return Err(format!("invalid path {:?} for {}", self.path, self.utt_id)),
        }
        if bad(&self.attack_tag) {
            return Err(format!("invalid attack tag {:?} for {}", self.attack_tag, self.utt_id));
        }
        if self.label == Label::Bonafide && self.attack_tag != "-" {
            return Err(format!("bona fide row {} must have attack tag '-'", self.utt_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut m = Self::default();
        for row in rows {
            m.push(row)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: ManifestRow) -> Result<()> {
        row.check().map_err(Error::InvalidInput)?;
        if self.rows.iter().any(|r| r.utt_id == row.utt_id) {
            return Err(Error::InvalidInput(format!("duplicate utterance id {}", row.utt_id)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }

    /// Parses manifest text; `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, path, label, tag] = fields[..] else {
                return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            };
            let label: Label = label.parse().map_err(|_| err(format!("unknown label {label:?}")))?;
            let row = ManifestRow { utt_id: id.into(), path: path.into(), label, attack_tag: tag.into() };
            row.check().map_err(err)?;
            if !seen.insert(row.utt_id.clone()) {
                return Err(err(format!("duplicate utterance id {}", row.utt_id)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.utt_id, r.path.display(), r.label, r.attack_tag);
        }
        out
    }

    /// Reads a manifest file; relative audio paths are resolved against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.rows {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
