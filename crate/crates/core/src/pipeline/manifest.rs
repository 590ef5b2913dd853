use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{decode_image, extract_patch, Manipulation, RasterImage, Region};

/// One image or patch of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub source_id: String,
    #[serde(default)]
    pub device_id: String,
    pub label: usize,
    #[serde(default)]
    pub manipulation: Manipulation,
    /// Region of `path` this row refers to; the whole file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ManifestRow {
    pub fn new(path: impl Into<PathBuf>, source_id: &str, label: usize) -> Self {
        ManifestRow {
            path: path.into(),
            source_id: source_id.to_string(),
            device_id: String::new(),
            label,
            manipulation: Manipulation::Unaltered,
            patch: None,
            score: None,
        }
    }

    /// Decodes the file and crops to `patch` when set.
    pub fn load_image(&self) -> Result<RasterImage> {
        let img = decode_image(&self.path)?;
        match self.patch {
            Some(r) => extract_patch(&img, r),
            None => Ok(img),
        }
    }

    /// Key used to match predictions to truth rows.
    pub fn key(&self) -> String {
        match self.patch {
            Some(r) => format!("{}#{},{},{}", self.path.display(), r.x0, r.y0, r.size),
            None => self.path.display().to_string(),
        }
    }
}

/// Line-delimited JSON list of rows. Relative paths are resolved against the
/// manifest's directory on load and written relative to it on save.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        Manifest { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::InvalidSpec(format!("manifest line {}: {e}", i + 1)))?;
            if row.path.is_relative() {
                row.path = base.join(&row.path);
            }
            rows.push(row);
        }
        Ok(Manifest { rows })
    }

    /// Loads and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).at(path)?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.at(path)?);
            text.push('\n');
        }
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(parent).at(parent)?;
        let m = Self::parse(&text, &base)?;
        for row in &m.rows {
            if !row.path.exists() {
                return Err(Error::InvalidSpec(format!(
                    "manifest {} references missing file {}",
                    path.display(),
                    row.path.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self, base: Option<&Path>) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            let mut r = row.clone();
            if let Some(rel) = base.and_then(|b| r.path.strip_prefix(b).ok()) {
                r.path = rel.to_path_buf();
            }
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_jsonl(path.parent())?;
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(text.as_bytes()).at(path)
    }

    /// Fails when a label falls outside `0..num_classes`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.rows.iter().find(|r| r.label >= num_classes) {
            Some(r) => Err(Error::InvalidSpec(format!(
                "{} has label {} but only {num_classes} classes are declared",
                r.path.display(),
                r.label
            ))),
            None => Ok(()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for r in &self.rows {
            if r.label < num_classes {
                c[r.label] += 1;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_with_relative_paths() {
        let base = Path::new("/data/set");
        let mut row = ManifestRow::new("/data/set/img/a.png", "a", 2);
        row.patch = Some(Region::new(0, 256, 256));
        row.manipulation = Manipulation::GammaCorrected;
        let m = Manifest::new(vec![row, ManifestRow::new("/elsewhere/b.png", "b", 0)]);
        let text = m.to_jsonl(Some(base)).unwrap();
        assert!(text.contains("\"img/a.png\""));
        assert!(text.contains("gamma_corrected"));
        assert_eq!(Manifest::parse(&text, base).unwrap(), m);
    }

    #[test]
    fn defaults_and_errors() {
        let m = Manifest::parse(
            "{\"path\":\"x.png\",\"source_id\":\"x\",\"label\":1}\n\n",
            Path::new("/r"),
        )
        .unwrap();
        assert_eq!(m.rows[0].manipulation, Manipulation::Unaltered);
        assert_eq!(m.rows[0].path, Path::new("/r/x.png"));
        assert!(m.validate_labels(2).is_ok());
        assert!(m.validate_labels(1).is_err());
        assert!(Manifest::parse("{not json}", Path::new(".")).is_err());
    }
}
