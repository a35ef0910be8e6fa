//! Tab-separated dataset manifests.
//!
//! One record per line: `<image>\t<mask-or-dash>\t<class,names-or-dash>`. Relative paths are
//! resolved against the manifest's directory. An optional first line `#split=<name>` records
//! the split; other lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::mask::LabelVector;
use super::taxonomy::ClassTaxonomy;
use crate::error::{Result, WssError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
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

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub labels: Option<Vec<usize>>,
}

impl ManifestEntry {
    pub fn new(image: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
            mask: None,
            labels: None,
        }
    }

    pub fn with_mask(mut self, mask: impl Into<PathBuf>) -> Self {
        self.mask = Some(mask.into());
        self
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn label_vector(&self, classes: usize) -> Option<Result<LabelVector>> {
        self.labels
            .as_ref()
            .map(|l| LabelVector::from_indices(classes, l))
    }

    pub fn image_id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(split: Split) -> Self {
        Self {
            entries: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: &Path, taxonomy: &ClassTaxonomy) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| WssError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, path, taxonomy)
}

fn parse_manifest(text: &str, base: &Path, origin: &Path, taxonomy: &ClassTaxonomy) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    let err = |line: usize, message: String| WssError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("#split=") {
            manifest.split = Split::parse(rest.trim())
                .ok_or_else(|| err(lineno, format!("unknown split `{}`", rest.trim())))?;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[0] == "-" {
            return Err(err(lineno, "image path is required".into()));
        }
        let resolve = |p: &str| -> Result<PathBuf> {
            let full = base.join(p);
            if !full.is_file() {
                return Err(err(lineno, format!("file not found: {}", full.display())));
            }
            Ok(full)
        };
        let image = resolve(fields[0])?;
        let mask = match fields[1] {
            "-" => None,
            p => Some(resolve(p)?),
        };
        let labels = match fields[2] {
            "-" => None,
            names => Some(
                names
                    .split(',')
                    .map(|n| taxonomy.index_of(n.trim()))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        manifest.entries.push(ManifestEntry { image, mask, labels });
    }
    Ok(manifest)
}

/// Writes the manifest; paths under the manifest's directory are stored relative to it and all
/// others as absolute paths.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path, taxonomy: &ClassTaxonomy) -> Result<()> {
    let absolute = |p: &Path| std::path::absolute(p).map_err(|e| WssError::io(p, e));
    let base = absolute(path.parent().unwrap_or(Path::new("")))?;
    let rel = |p: &Path| -> String {
        let full = absolute(p).unwrap_or_else(|_| p.to_path_buf());
        full.strip_prefix(&base)
            .map(Path::to_path_buf)
            .unwrap_or(full)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    writeln!(out, "#split={}", manifest.split.as_str()).unwrap();
    for e in &manifest.entries {
        let mask = e.mask.as_deref().map(rel).unwrap_or_else(|| "-".into());
        let labels = match &e.labels {
            None => "-".to_string(),
            Some(l) if l.is_empty() => "-".to_string(),
            Some(l) => l.iter().map(|&i| taxonomy.name(i)).collect::<Vec<_>>().join(","),
        };
        writeln!(out, "{}\t{}\t{}", rel(&e.image), mask, labels).unwrap();
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WssError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| WssError::io(path, e))
}
