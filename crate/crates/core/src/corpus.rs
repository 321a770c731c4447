//! On-disk corpora of `.npy` feature maps and their JSON manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::npy::{self, ReadOptions};
use crate::synth::{derive_seed, synth_map, SynthKind};
use crate::tensor::FeatureMap;

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative path without the `.npy` suffix, `/`-separated.
    pub id: String,
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ManifestEntry {
    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub error: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, error: &Error) -> Self {
        Self {
            path: path.into(),
            error: error.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            entries: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn relative_slash_path(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Lists every `.npy` file under `root`, reading headers only.
///
/// Unreadable files become diagnostics. Entries and diagnostics are sorted,
/// so the result does not depend on directory enumeration order.
pub fn scan_corpus(root: impl AsRef<Path>) -> Result<CorpusManifest> {
    scan_corpus_with(root, ReadOptions::default())
}

pub fn scan_corpus_with(root: impl AsRef<Path>, opts: ReadOptions) -> Result<CorpusManifest> {
    let root = root.as_ref();
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a directory"),
        ));
    }
    let mut paths = Vec::new();
    let mut diagnostics = Vec::new();
    for item in WalkDir::new(root).follow_links(true) {
        match item {
            Ok(e) if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "npy") => {
                paths.push(e.into_path())
            }
            Ok(_) => {}
            Err(e) => {
                let path = e.path().map(|p| relative_slash_path(root, p)).unwrap_or_default();
                diagnostics.push(Diagnostic {
                    path,
                    error: e.to_string(),
                });
            }
        }
    }
    let scanned: Vec<_> = paths
        .par_iter()
        .map(|path| {
            let rel = relative_slash_path(root, path);
            let dims = npy::read_header(path).and_then(|h| npy::map_dims(&h, opts));
            (rel, dims)
        })
        .collect();
    let mut entries = Vec::with_capacity(scanned.len());
    for (rel, dims) in scanned {
        match dims {
            Ok([height, width, channels]) => entries.push(ManifestEntry {
                id: rel.strip_suffix(".npy").unwrap_or(&rel).to_string(),
                path: rel,
                height,
                width,
                channels,
            }),
            Err(e) => diagnostics.push(Diagnostic::new(rel, &e)),
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    diagnostics.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.error.cmp(&b.error)));
    Ok(CorpusManifest {
        version: MANIFEST_VERSION.to_string(),
        entries,
        diagnostics,
    })
}

/// Loads one entry, checking its dimensions against the manifest.
pub fn load_entry(root: &Path, entry: &ManifestEntry, opts: ReadOptions) -> Result<FeatureMap> {
    let map = npy::read_map_with(entry_path(root, entry), opts)?;
    if map.shape() != entry.dims() {
        return Err(Error::ManifestMismatch {
            id: entry.id.clone(),
            declared: entry.dims(),
            actual: map.shape(),
        });
    }
    Ok(map)
}

pub fn entry_path(root: &Path, entry: &ManifestEntry) -> PathBuf {
    entry.path.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
}

/// Writes `count` synthetic maps named `{kind}_{index:05}.npy` under
/// `out_root` and returns their manifest. Entry `i` uses seed
/// `derive_seed(seed, i)`.
pub fn synth_corpus(
    kind: SynthKind,
    dims: [usize; 3],
    count: usize,
    seed: u64,
    amplitude: f32,
    out_root: &Path,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let [height, width, channels] = dims;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("{}_{i:05}", kind.name());
            let path = format!("{id}.npy");
            let map = synth_map(kind, height, width, channels, derive_seed(seed, i as u64), amplitude)?;
            npy::write_map(&map, out_root.join(&path))?;
            Ok(ManifestEntry {
                id,
                path,
                height,
                width,
                channels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusManifest {
        entries,
        ..CorpusManifest::default()
    })
}
