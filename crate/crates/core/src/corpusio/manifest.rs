use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::binary::write_atomic;
use crate::error::{LidError, Result};

pub const MANIFEST_HEADER: &str = "utt_id\tpath\tlanguage\tduration_s\tvtln_warp";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    pub path: PathBuf,
    pub language: String,
    pub duration_s: f64,
    pub vtln_warp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.utt_id.is_empty() || r.utt_id.contains(['\t', '\n']) {
                return Err(LidError::InvalidInput(format!("bad utterance id {:?}", r.utt_id)));
            }
            if !seen.insert(r.utt_id.as_str()) {
                return Err(LidError::InvalidInput(format!("duplicate utterance id {:?}", r.utt_id)));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.language) {
                out.push(r.language.clone());
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            let warp = r.vtln_warp.map_or_else(|| "-".to_string(), |w| format!("{w:?}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:?}\t{}",
                r.utt_id,
                r.path.display(),
                r.language,
                r.duration_s,
                warp
            );
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, reason: String| LidError::Format {
            path: source.to_string(),
            offset: line as u64,
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(err(1, "missing manifest header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(i + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let duration_s: f64 = f[3].parse().map_err(|_| err(i + 1, format!("bad duration {:?}", f[3])))?;
            let vtln_warp = match f[4] {
                "-" | "" => None,
                w => Some(w.parse().map_err(|_| err(i + 1, format!("bad warp {w:?}")))?),
            };
            rows.push(ManifestRow {
                utt_id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                language: f[2].to_string(),
                duration_s,
                vtln_warp,
            });
        }
        Self::new(rows)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LidError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Resolves a row path relative to the manifest's directory.
    pub fn resolve(manifest_path: &Path, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(&row.path)
        }
    }
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| LidError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| LidError::Format {
                path: path.display().to_string(),
                offset: i as u64 + 1,
                reason: format!("line {}: bad label {l:?}", i + 1),
            })
        })
        .collect()
}
