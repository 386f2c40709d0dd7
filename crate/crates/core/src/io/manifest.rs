//! Dataset manifests: CSV files with header `cloud_path,reference_id,mos`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cloud_path: PathBuf,
    pub reference_id: String,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub mos_min: f64,
    pub mos_max: f64,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest from entries, computing the score range.
    pub fn from_entries(entries: Vec<ManifestEntry>, allow_degenerate_range: bool) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        for (i, e) in entries.iter().enumerate() {
            if e.reference_id.trim().is_empty() {
                return Err(Error::MissingReference(i + 1));
            }
        }
        let mos_min = entries.iter().map(|e| e.mos).fold(f64::INFINITY, f64::min);
        let mos_max = entries.iter().map(|e| e.mos).fold(f64::NEG_INFINITY, f64::max);
        if mos_min >= mos_max && !allow_degenerate_range {
            return Err(Error::EmptyRange(mos_min));
        }
        Ok(DatasetManifest {
            entries,
            mos_min,
            mos_max,
            base_dir: PathBuf::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_degenerate_range(&self) -> bool {
        self.mos_min >= self.mos_max
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.cloud_path.is_absolute() {
            entry.cloud_path.clone()
        } else {
            self.base_dir.join(&entry.cloud_path)
        }
    }

    /// Maps a MOS into [0, 1] using the manifest range.
    pub fn normalize(&self, mos: f64) -> f64 {
        if self.has_degenerate_range() {
            0.5
        } else {
            (mos - self.mos_min) / (self.mos_max - self.mos_min)
        }
    }
}

const COLUMNS: [&str; 3] = ["cloud_path", "reference_id", "mos"];

/// Loads a manifest for training; a single-valued MOS column is refused.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_manifest_with(path, false)
}

/// Loads a manifest, optionally accepting a degenerate MOS range
/// (predict-only use).
pub fn load_manifest_with(path: impl AsRef<Path>, allow_degenerate_range: bool) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text, allow_degenerate_range)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn parse_manifest(text: &str, allow_degenerate_range: bool) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(e.to_string()))?
        .clone();
    let mut cols = [0usize; 3];
    for (slot, name) in cols.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Manifest(format!("row {row}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let raw = field(cols[2]);
        let mos: f64 = raw.parse().map_err(|_| Error::UnparsableScore {
            row,
            column: "mos".into(),
            value: raw.to_string(),
        })?;
        if !mos.is_finite() {
            return Err(Error::UnparsableScore {
                row,
                column: "mos".into(),
                value: raw.to_string(),
            });
        }
        entries.push(ManifestEntry {
            cloud_path: PathBuf::from(field(cols[0])),
            reference_id: field(cols[1]).to_string(),
            mos,
        });
    }
    DatasetManifest::from_entries(entries, allow_degenerate_range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_row_is_degenerate() {
        let text = "cloud_path,reference_id,mos\na.ply,refA,7.5\n";
        assert!(matches!(parse_manifest(text, false), Err(Error::EmptyRange(v)) if v == 7.5));
        let m = parse_manifest(text, true).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.has_degenerate_range());
    }

    #[test]
    fn min_max() {
        let text = "cloud_path,reference_id,mos\r\na.ply,refA,2.0\r\nb.ply,refB,8.0\r\n";
        let m = parse_manifest(text, false).unwrap();
        assert_eq!((m.mos_min, m.mos_max), (2.0, 8.0));
        assert_eq!(m.entries[1].cloud_path, PathBuf::from("b.ply"));
    }

    #[test]
    fn unparsable_score_reports_row() {
        let text = "cloud_path,reference_id,mos\na.ply,refA,abc\n";
        match parse_manifest(text, false) {
            Err(Error::UnparsableScore { row: 1, column, .. }) => assert_eq!(column, "mos"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_empty() {
        assert!(matches!(
            parse_manifest("cloud_path,mos\na.ply,1\n", false),
            Err(Error::MissingColumn(c)) if c == "reference_id"
        ));
        assert!(matches!(
            parse_manifest("cloud_path,reference_id,mos\n", false),
            Err(Error::EmptyManifest)
        ));
        assert!(matches!(
            parse_manifest("cloud_path,reference_id,mos\na.ply,,1\nb.ply,x,2\n", false),
            Err(Error::MissingReference(1))
        ));
    }

    proptest! {
        #[test]
        fn totals_match_rows(scores in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let mut text = String::from("cloud_path,reference_id,mos\n");
            for (i, s) in scores.iter().enumerate() {
                text.push_str(&format!("c{i}.ply,r{},{s}\n", i % 3));
            }
            let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            match parse_manifest(&text, false) {
                Ok(m) => {
                    prop_assert_eq!(m.len(), scores.len());
                    prop_assert_eq!(m.mos_min, lo);
                    prop_assert_eq!(m.mos_max, hi);
                }
                Err(Error::EmptyRange(_)) => prop_assert_eq!(lo, hi),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
