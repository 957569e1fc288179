use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageTile, LabelSet, Provenance, Result, Split};

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub split: Split,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl ManifestEntry {
    pub fn source_image_id(&self) -> &str {
        super::source_image_key(&self.path, self.source_ref.as_deref())
    }
}

/// Validated collection of tile references rooted at a directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub label_set: LabelSet,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest, checking labels, provenance and path uniqueness
    /// (but not file existence).
    pub fn new(root: impl Into<PathBuf>, label_set: LabelSet, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            check_entry(e, i + 1, &label_set)?;
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::InvalidEntry {
                    line: i + 1,
                    message: format!("duplicate path `{}`", e.path),
                });
            }
        }
        Ok(DatasetManifest { root: root.into(), label_set, entries })
    }

    /// Parses a line-oriented JSON manifest; relative paths resolve against
    /// the manifest's directory.
    pub fn load(path: &Path, label_set: &LabelSet) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DatasetError::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(raw)
                .map_err(|err| DatasetError::MalformedLine { line, message: err.to_string() })?;
            check_entry(&e, line, label_set)?;
            let file = root.join(&e.path);
            if !file.is_file() {
                return Err(DatasetError::DanglingReference { line, path: file });
            }
            if !seen.insert(e.path.clone()) {
                return Err(DatasetError::InvalidEntry { line, message: format!("duplicate path `{}`", e.path) });
            }
            entries.push(e);
        }
        Ok(DatasetManifest { root, label_set: label_set.clone(), entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn view(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        DatasetManifest {
            root: self.root.clone(),
            label_set: self.label_set.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Entries whose label is one of `labels`; used for the source and
    /// target domain views.
    pub fn with_labels(&self, labels: &[&str]) -> Self {
        self.view(|e| labels.contains(&e.label.as_str()))
    }

    pub fn split_view(&self, split: Split) -> Self {
        self.view(|e| e.split == split)
    }

    /// Reads every referenced image; the tile id is the manifest path.
    pub fn load_tiles(&self) -> Result<Vec<ImageTile>> {
        self.entries
            .par_iter()
            .map(|e| {
                let file = self.root.join(&e.path);
                let pixels =
                    image::open(&file).map_err(|source| DatasetError::Image { path: file.clone(), source })?.to_rgb8();
                Ok(entry_to_tile(e, pixels))
            })
            .collect()
    }
}

fn entry_to_tile(e: &ManifestEntry, pixels: image::RgbImage) -> ImageTile {
    let mut t = match (&e.provenance, &e.generator_ref) {
        (Provenance::Synthetic, Some(g)) => {
            ImageTile::synthetic(e.path.clone(), pixels, e.label.clone(), e.source_ref.clone(), g.clone())
        }
        _ => {
            let t = ImageTile::real(e.path.clone(), pixels, e.label.clone());
            match &e.source_ref {
                Some(s) => t.with_source_ref(s.clone()),
                None => t,
            }
        }
    };
    if let Some(th) = e.theta {
        t = t.with_theta(th);
    }
    t
}

fn check_entry(e: &ManifestEntry, line: usize, labels: &LabelSet) -> Result<()> {
    if labels.get(&e.label).is_none() {
        return Err(DatasetError::UnknownLabel { line, label: e.label.clone() });
    }
    match (e.provenance, &e.generator_ref) {
        (Provenance::Synthetic, None) => {
            Err(DatasetError::InvalidEntry { line, message: "synthetic entry without generator_ref".into() })
        }
        (Provenance::Real, Some(_)) => {
            Err(DatasetError::InvalidEntry { line, message: "real entry with generator_ref".into() })
        }
        _ => {
            if e.theta.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
                return Err(DatasetError::InvalidEntry { line, message: "theta outside [0, 1]".into() });
            }
            Ok(())
        }
    }
}

/// Writes each tile as a PNG under `root/subdir` and returns matching
/// manifest entries with paths relative to `root`.
pub fn write_tiles(tiles: &[ImageTile], root: &Path, subdir: &str, split: Split) -> Result<Vec<ManifestEntry>> {
    let dir = root.join(subdir);
    fs::create_dir_all(&dir)?;
    tiles
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let name = format!("{i:05}_{}.png", sanitize(t.id()));
            let rel = format!("{subdir}/{name}");
            let file = dir.join(&name);
            t.pixels().save(&file).map_err(|source| DatasetError::Image { path: file.clone(), source })?;
            Ok(ManifestEntry {
                path: rel,
                label: t.label().to_string(),
                split,
                provenance: t.provenance(),
                source_ref: t.source_ref().map(str::to_string),
                generator_ref: t.generator_ref().map(str::to_string),
                theta: t.theta(),
            })
        })
        .collect()
}

fn sanitize(id: &str) -> String {
    let s: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
    let s = s.trim_end_matches(".png").to_string();
    if s.len() > 80 {
        s[s.len() - 80..].to_string()
    } else {
        s
    }
}
