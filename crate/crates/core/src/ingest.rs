//! Retrieved-corpus construction: per-class fetching and resize normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{
    resize_max_dim, ClassTaxonomy, DatasetManifest, ImageRecord, ManifestEntry, Mask, PipelineConfig, Split,
    BACKGROUND,
};
use crate::error::{Result, WssError};

#[derive(Debug, Clone, PartialEq)]
pub struct FetchRequest {
    pub query: String,
    pub max_results: usize,
    pub destination: PathBuf,
}

impl FetchRequest {
    pub fn new(query: impl Into<String>, max_results: usize, destination: impl Into<PathBuf>) -> Self {
        Self {
            query: query.into(),
            max_results,
            destination: destination.into(),
        }
    }

    /// Returns the class index the query names.
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<usize> {
        if self.max_results == 0 {
            return Err(WssError::invalid("max_results must be at least 1"));
        }
        let c = taxonomy.index_of(&self.query)?;
        if c == BACKGROUND {
            return Err(WssError::invalid("cannot query the background class"));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub class_index: usize,
    pub records: Vec<ImageRecord>,
}

impl ClassGroup {
    pub fn new(class_index: usize) -> Self {
        Self {
            class_index,
            records: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_index == BACKGROUND {
            return Err(WssError::invalid("a class group cannot be the background class"));
        }
        if let Some(r) = self.records.iter().find(|r| r.query_class != Some(self.class_index)) {
            return Err(WssError::invalid(format!(
                "record `{}` does not belong to group {}",
                r.id, self.class_index
            )));
        }
        Ok(())
    }
}

/// A source of candidate images for a class-name query.
pub trait ImageFetcher {
    /// Candidate item identifiers, in the order they should be tried.
    fn candidates(&self, query: &str) -> Result<Vec<String>>;
    /// Raw bytes of one item. Errors are per item and never abort a batch.
    fn fetch(&self, item: &str) -> std::result::Result<Vec<u8>, String>;
}

fn is_sidecar(name: &str) -> bool {
    name.ends_with(".mask.png")
}

fn is_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    !is_sidecar(&lower) && [".png", ".jpg", ".jpeg"].iter().any(|e| lower.ends_with(e))
}

/// Copies images out of a local folder, in file-name order. Sidecar masks are not candidates.
#[derive(Debug, Clone)]
pub struct DirectoryFetcher {
    pub root: PathBuf,
}

impl DirectoryFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageFetcher for DirectoryFetcher {
    fn candidates(&self, _query: &str) -> Result<Vec<String>> {
        let rd = fs::read_dir(&self.root).map_err(|e| WssError::io(&self.root, e))?;
        let mut out = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| WssError::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && is_image_name(&name) {
                out.push(entry.path().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    fn fetch(&self, item: &str) -> std::result::Result<Vec<u8>, String> {
        fs::read(item).map_err(|e| e.to_string())
    }
}

/// Reads a UTF-8 file with one URL per line. `file://` URLs and bare paths are read locally;
/// `http(s)://` needs the `http` feature.
#[derive(Debug, Clone)]
pub struct UrlListFetcher {
    pub list: PathBuf,
}

impl UrlListFetcher {
    pub fn new(list: impl Into<PathBuf>) -> Self {
        Self { list: list.into() }
    }
}

#[cfg(feature = "http")]
fn http_get(url: &str) -> std::result::Result<Vec<u8>, String> {
    let mut resp = ureq::get(url).call().map_err(|e| e.to_string())?;
    resp.body_mut().read_to_vec().map_err(|e| e.to_string())
}

#[cfg(not(feature = "http"))]
fn http_get(url: &str) -> std::result::Result<Vec<u8>, String> {
    Err(format!("cannot fetch {url}: built without the `http` feature"))
}

impl ImageFetcher for UrlListFetcher {
    fn candidates(&self, _query: &str) -> Result<Vec<String>> {
        let text = fs::read_to_string(&self.list).map_err(|e| WssError::io(&self.list, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect())
    }

    fn fetch(&self, item: &str) -> std::result::Result<Vec<u8>, String> {
        if item.starts_with("http://") || item.starts_with("https://") {
            http_get(item)
        } else {
            let path = item.strip_prefix("file://").unwrap_or(item);
            fs::read(path).map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub files: Vec<PathBuf>,
    /// Items that were fetched but did not decode as images.
    pub corrupt: usize,
    /// Items whose transport failed, with the reason.
    pub failures: Vec<(String, String)>,
}

fn item_file_name(item: &str, index: usize) -> String {
    let base = item.rsplit(['/', '\\']).next().unwrap_or("");
    let base = base.split(['?', '#']).next().unwrap_or("");
    if is_image_name(base) {
        base.to_string()
    } else {
        format!("item_{index:05}.png")
    }
}

pub fn fetch_class_images(
    request: &FetchRequest,
    fetcher: &dyn ImageFetcher,
    taxonomy: &ClassTaxonomy,
) -> Result<FetchReport> {
    request.validate(taxonomy)?;
    let dest = &request.destination;
    fs::create_dir_all(dest).map_err(|e| WssError::io(dest, e))?;
    let mut report = FetchReport::default();
    for (i, item) in fetcher.candidates(&request.query)?.iter().enumerate() {
        if report.files.len() == request.max_results {
            break;
        }
        let bytes = match fetcher.fetch(item) {
            Ok(b) => b,
            Err(reason) => {
                log::warn!("fetch failed for {item}: {reason}");
                report.failures.push((item.clone(), reason));
                continue;
            }
        };
        if image::load_from_memory(&bytes).is_err() {
            log::warn!("skipping unreadable image {item}");
            report.corrupt += 1;
            continue;
        }
        let mut name = item_file_name(item, i);
        if report.files.iter().any(|f| f.file_name().is_some_and(|n| n == name.as_str())) {
            name = format!("{i:05}_{name}");
        }
        let path = dest.join(name);
        fs::write(&path, &bytes).map_err(|e| WssError::io(&path, e))?;
        report.files.push(path);
    }
    Ok(report)
}

/// Reads every decodable image in `dir` (file-name order) into a group. Unreadable files are
/// skipped with a warning.
pub fn load_group_dir(dir: &Path, class_index: usize) -> Result<ClassGroup> {
    let fetcher = DirectoryFetcher::new(dir);
    let mut group = ClassGroup::new(class_index);
    for item in fetcher.candidates("")? {
        match ImageRecord::load(Path::new(&item)) {
            Ok(r) => group.records.push(r.retrieved(class_index)?),
            Err(e) => log::warn!("skipping {item}: {e}"),
        }
    }
    group.validate()?;
    Ok(group)
}

/// Groups manifest entries by their single foreground label.
pub fn groups_from_manifest(manifest: &DatasetManifest, taxonomy: &ClassTaxonomy) -> Result<Vec<ClassGroup>> {
    let mut groups: Vec<ClassGroup> = taxonomy.foreground().map(ClassGroup::new).collect();
    for e in &manifest.entries {
        let labels = e.labels.as_deref().unwrap_or(&[]);
        let fg: Vec<usize> = labels.iter().copied().filter(|&c| c != BACKGROUND).collect();
        let [c] = fg[..] else {
            return Err(WssError::invalid(format!(
                "retrieved entry {} must carry exactly one foreground label",
                e.image.display()
            )));
        };
        let rec = ImageRecord::load(&e.image)?.retrieved(c)?;
        groups[c - 1].records.push(rec);
    }
    groups.retain(|g| !g.records.is_empty());
    Ok(groups)
}

#[derive(Debug, Clone)]
pub struct RetrievedCorpus {
    pub manifest: DatasetManifest,
    /// The resized groups, in manifest order.
    pub groups: Vec<ClassGroup>,
}

/// Resizes every record to `retrieved_max_dim`, writes `<out>/<class>/<id>.png` and returns a
/// manifest ordered by class index, then id. Empty groups are dropped with a warning.
pub fn build_retrieved_corpus(groups: &[ClassGroup], config: &PipelineConfig, out_dir: &Path) -> Result<RetrievedCorpus> {
    let taxonomy = config.taxonomy()?;
    let mut sorted: Vec<&ClassGroup> = Vec::new();
    for g in groups {
        g.validate()?;
        if g.class_index >= taxonomy.count() {
            return Err(WssError::invalid(format!("group class {} outside taxonomy", g.class_index)));
        }
        if g.records.is_empty() {
            log::warn!("dropping empty group for class `{}`", taxonomy.name(g.class_index));
            continue;
        }
        sorted.push(g);
    }
    sorted.sort_by_key(|g| g.class_index);

    let mut manifest = DatasetManifest::new(Split::Train);
    let mut out_groups = Vec::new();
    for g in sorted {
        let dir = out_dir.join(taxonomy.name(g.class_index));
        fs::create_dir_all(&dir).map_err(|e| WssError::io(&dir, e))?;
        let mut records: Vec<ImageRecord> = g
            .records
            .par_iter()
            .map(|r| resize_max_dim(r, config.retrieved_max_dim, None).map(|(img, _)| img))
            .collect::<Result<_>>()?;
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for r in &records {
            let path = dir.join(format!("{}.png", r.id));
            r.save_png(&path)?;
            manifest.entries.push(ManifestEntry::new(path).with_labels(vec![g.class_index]));
        }
        out_groups.push(ClassGroup {
            class_index: g.class_index,
            records,
        });
    }
    Ok(RetrievedCorpus {
        manifest,
        groups: out_groups,
    })
}

/// Resizes target images (and masks, consistently) to `target_max_dim`. Entries that are already
/// small enough keep their original paths; resized ones are written under `out_dir`.
pub fn prepare_target_images(manifest: &DatasetManifest, config: &PipelineConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    let entries = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<ManifestEntry> {
            let img = ImageRecord::load(&e.image)?;
            let mask = e.mask.as_deref().map(Mask::load).transpose()?;
            if img.max_dim() <= config.target_max_dim {
                if let Some(m) = &mask {
                    m.check_shape(img.height, img.width)?;
                }
                return Ok(e.clone());
            }
            let (img, mask) = resize_max_dim(&img, config.target_max_dim, mask.as_ref())?;
            let mut out = e.clone();
            fs::create_dir_all(&img_dir).map_err(|err| WssError::io(&img_dir, err))?;
            out.image = img_dir.join(format!("{}.png", e.image_id()));
            img.save_png(&out.image)?;
            if let Some(m) = mask {
                fs::create_dir_all(&mask_dir).map_err(|err| WssError::io(&mask_dir, err))?;
                let p = mask_dir.join(format!("{}.png", e.image_id()));
                m.save_png(&p)?;
                out.mask = Some(p);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        entries,
        split: manifest.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> ClassTaxonomy {
        ClassTaxonomy::shapes()
    }

    fn write_images(dir: &Path, n: usize) {
        for i in 0..n {
            ImageRecord::filled(format!("im{i:02}"), 12, 10, [i as u8, 0, 0])
                .save_png(&dir.join(format!("im{i:02}.png")))
                .unwrap();
        }
    }

    #[test]
    fn directory_fetcher_truncates() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        write_images(src.path(), 10);
        let req = FetchRequest::new("disk", 5, dst.path());
        let rep = fetch_class_images(&req, &DirectoryFetcher::new(src.path()), &shapes()).unwrap();
        assert_eq!(rep.files.len(), 5);
        assert_eq!(fs::read_dir(dst.path()).unwrap().count(), 5);
        assert!(rep.files[0].ends_with("im00.png"));
    }

    #[test]
    fn corrupt_files_are_skipped_with_a_warning() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        write_images(src.path(), 2);
        fs::write(src.path().join("broken.png"), b"not a png").unwrap();
        let req = FetchRequest::new("square", 10, dst.path());
        let rep = fetch_class_images(&req, &DirectoryFetcher::new(src.path()), &shapes()).unwrap();
        assert_eq!(rep.files.len(), 2);
        assert_eq!(rep.corrupt, 1);
    }

    #[test]
    fn zero_max_results_and_background_query_are_rejected() {
        let dst = tempfile::tempdir().unwrap();
        let f = DirectoryFetcher::new(dst.path());
        assert!(fetch_class_images(&FetchRequest::new("disk", 0, dst.path()), &f, &shapes()).is_err());
        assert!(fetch_class_images(&FetchRequest::new("background", 3, dst.path()), &f, &shapes()).is_err());
        assert!(fetch_class_images(&FetchRequest::new("hexagon", 3, dst.path()), &f, &shapes()).is_err());
    }

    #[test]
    fn url_list_failures_are_per_item() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        write_images(src.path(), 2);
        let list = src.path().join("urls.txt");
        let a = src.path().join("im00.png");
        let b = src.path().join("im01.png");
        fs::write(
            &list,
            format!("file://{}\n{}/missing.png\n\n{}\n", a.display(), src.path().display(), b.display()),
        )
        .unwrap();
        let rep = fetch_class_images(&FetchRequest::new("disk", 9, dst.path()), &UrlListFetcher::new(&list), &shapes())
            .unwrap();
        assert_eq!(rep.files.len(), 2);
        assert_eq!(rep.failures.len(), 1);
    }

    fn group(class: usize, sizes: &[(usize, usize)]) -> ClassGroup {
        ClassGroup {
            class_index: class,
            records: sizes
                .iter()
                .enumerate()
                .map(|(i, &(h, w))| {
                    ImageRecord::filled(format!("g{class}_{i}"), h, w, [9, 9, 9]).retrieved(class).unwrap()
                })
                .collect(),
        }
    }

    fn shapes_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.set("classes", "shapes").unwrap();
        c
    }

    #[test]
    fn corpus_is_resized_and_ordered() {
        let out = tempfile::tempdir().unwrap();
        let groups = vec![group(3, &[(20, 20)]), group(1, &[(500, 680); 4]), group(2, &[])];
        let corpus = build_retrieved_corpus(&groups, &shapes_config(), out.path()).unwrap();
        assert_eq!(corpus.manifest.len(), 5);
        let classes: Vec<usize> = corpus.manifest.entries.iter().map(|e| e.labels.as_ref().unwrap()[0]).collect();
        assert_eq!(classes, vec![1, 1, 1, 1, 3]);
        for r in &corpus.groups[0].records {
            assert_eq!(r.max_dim(), 340);
        }
        assert_eq!((corpus.groups[1].records[0].height, corpus.groups[1].records[0].width), (20, 20));
    }

    #[test]
    fn corpus_manifests_are_byte_identical_across_runs() {
        let t = shapes();
        let groups = vec![group(2, &[(30, 40), (50, 10)]), group(1, &[(8, 8)])];
        let a = tempfile::tempdir().unwrap();
        let ca = build_retrieved_corpus(&groups, &shapes_config(), a.path()).unwrap();
        crate::data::write_manifest(&ca.manifest, &a.path().join("m.tsv"), &t).unwrap();
        let cb = build_retrieved_corpus(&groups, &shapes_config(), a.path()).unwrap();
        crate::data::write_manifest(&cb.manifest, &a.path().join("m2.tsv"), &t).unwrap();
        assert_eq!(fs::read(a.path().join("m.tsv")).unwrap(), fs::read(a.path().join("m2.tsv")).unwrap());
    }

    #[test]
    fn target_images_and_masks_resize_together() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("big.png");
        let mp = dir.path().join("big_gt.png");
        ImageRecord::filled("big", 750, 1000, [1, 2, 3]).save_png(&ip).unwrap();
        Mask::filled(750, 1000, 2).save_png(&mp).unwrap();
        let sp = dir.path().join("small.png");
        ImageRecord::filled("small", 300, 400, [1, 2, 3]).save_png(&sp).unwrap();
        let mut m = DatasetManifest::new(Split::Val);
        m.entries.push(ManifestEntry::new(&ip).with_mask(&mp));
        m.entries.push(ManifestEntry::new(&sp));
        let out = prepare_target_images(&m, &PipelineConfig::default(), &dir.path().join("prep")).unwrap();
        let img = ImageRecord::load(&out.entries[0].image).unwrap();
        let mask = Mask::load(out.entries[0].mask.as_ref().unwrap()).unwrap();
        assert_eq!((img.height, img.width), (375, 500));
        assert_eq!((mask.height, mask.width), (375, 500));
        assert_eq!(out.entries[1], m.entries[1]);
        assert!(out.entries[1].mask.is_none());
    }

    #[test]
    fn mismatched_target_pair_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("a.png");
        let mp = dir.path().join("a_gt.png");
        ImageRecord::filled("a", 600, 800, [0, 0, 0]).save_png(&ip).unwrap();
        Mask::filled(60, 80, 0).save_png(&mp).unwrap();
        let mut m = DatasetManifest::new(Split::Val);
        m.entries.push(ManifestEntry::new(&ip).with_mask(&mp));
        assert!(prepare_target_images(&m, &PipelineConfig::default(), dir.path()).is_err());
    }
}
