use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use log::warn;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image::Raster;

use super::{Domain, DomainDataset, LabeledSample, SampleId};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Non-fatal ingestion findings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub warnings: Vec<String>,
    /// Images that could not be decoded, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn decode(path: &Path, resolution: usize) -> std::result::Result<Raster, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let r = resolution as u32;
    let resized = image::imageops::resize(&img, r, r, FilterType::Triangle);
    Raster::new(resolution, resolution, 3, resized.into_raw()).map_err(|e| e.to_string())
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn assemble(
    entries: BTreeMap<String, Vec<(String, String)>>,
    root: &Path,
    resolution: usize,
    report: &mut IngestReport,
) -> Result<DomainDataset> {
    let classes: BTreeSet<&str> = entries.values().flatten().map(|(c, _)| c.as_str()).collect();
    let class_names: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
    let class_index = |c: &str| class_names.iter().position(|n| n == c).expect("known class");
    let mut domains = Vec::new();
    for (d, (name, files)) in entries.iter().enumerate() {
        let mut samples = Vec::new();
        for (class, rel) in files {
            let path = root.join(rel);
            match decode(&path, resolution) {
                Ok(raster) => samples.push(LabeledSample {
                    id: SampleId::new(d, samples.len()),
                    image: Arc::new(raster),
                    label: class_index(class),
                    origin: Some(rel.clone()),
                }),
                Err(reason) => {
                    warn!("skipping {}: {reason}", path.display());
                    report.errors.push((path, reason));
                }
            }
        }
        domains.push(Domain {
            name: name.clone(),
            samples,
        });
    }
    DomainDataset::new(domains, class_names, resolution)
}

/// Ingest `root/<domain>/<class>/<image>` with every image resized to `resolution²`.
pub fn load_folder(root: impl AsRef<Path>, resolution: usize) -> Result<(DomainDataset, IngestReport)> {
    let root = root.as_ref();
    let mut report = IngestReport::default();
    let mut entries: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for domain_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let domain = name_of(&domain_dir);
        let mut files = Vec::new();
        for class_dir in sorted_entries(&domain_dir)?.into_iter().filter(|p| p.is_dir()) {
            let class = name_of(&class_dir);
            let images: Vec<_> = sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)).collect();
            if images.is_empty() {
                let msg = format!("{domain}/{class} holds no images");
                warn!("{msg}");
                report.warnings.push(msg);
            }
            for img in images {
                let rel = format!("{domain}/{class}/{}", name_of(&img));
                files.push((class.clone(), rel));
            }
        }
        entries.insert(domain, files);
    }
    if entries.values().all(|f| f.is_empty()) {
        return Err(Error::Ingestion(format!("{} contains no domain/class images", root.display())));
    }
    let ds = assemble(entries, root, resolution, &mut report)?;
    Ok((ds, report))
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    domain: String,
    class: String,
}

/// Ingest images listed in a `path,domain,class` CSV; paths are relative to `root`.
pub fn load_manifest(
    manifest: impl AsRef<Path>,
    root: impl AsRef<Path>,
    resolution: usize,
) -> Result<(DomainDataset, IngestReport)> {
    let manifest = manifest.as_ref();
    let mut reader = csv::Reader::from_path(manifest)?;
    let mut entries: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        entries.entry(row.domain).or_default().push((row.class, row.path));
    }
    if entries.is_empty() {
        return Err(Error::Ingestion(format!("{} lists no images", manifest.display())));
    }
    for files in entries.values_mut() {
        files.sort_by(|a, b| a.1.cmp(&b.1));
    }
    let mut report = IngestReport::default();
    let ds = assemble(entries, root.as_ref(), resolution, &mut report)?;
    Ok((ds, report))
}

/// Write the dataset as `root/<domain>/<class>/<index>.png`.
pub fn export_folder(dataset: &DomainDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for dom in dataset.domains() {
        for s in &dom.samples {
            let dir = root.join(&dom.name).join(&dataset.class_names()[s.label]);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{:05}.png", s.id.index));
            let img = image::RgbImage::from_raw(s.image.width() as u32, s.image.height() as u32, s.image.data().to_vec())
                .ok_or_else(|| Error::Shape("raster is not RGB".into()))?;
            img.save(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthesize, SynthSpec};

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_folder(dir.path(), 8), Err(Error::Ingestion(_))));
    }

    #[test]
    fn export_then_load_roundtrips_ordering_and_pixels() {
        let spec = SynthSpec::desk(2, 3, 2, 12, 1);
        let ds = synthesize(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_folder(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("photo/circle/broken.png"), b"not a png").unwrap();
        std::fs::create_dir_all(dir.path().join("photo/empty")).unwrap();

        let (a, report) = load_folder(dir.path(), 12).unwrap();
        let (b, _) = load_folder(dir.path(), 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(a.domain_names(), vec!["art", "photo"]);
        let mut expect = ds.class_names().to_vec();
        expect.sort();
        assert_eq!(a.class_names(), expect.as_slice());
        assert_eq!(a.len(), ds.len());
        // Same-size resize keeps pixels exactly; the first file of art/circle is index 00000.
        let first = &a.domains()[0].samples[0];
        assert_eq!(first.origin.as_deref(), Some("art/circle/00000.png"));
        let orig = &ds.domains()[ds.domain_index("art").unwrap()].samples[0];
        assert_eq!(first.image.data(), orig.image.data());

        let manifest = dir.path().join("m.csv");
        let mut text = String::from("path,domain,class\n");
        for dom in ds.domains() {
            for s in &dom.samples {
                text.push_str(&format!(
                    "{}/{}/{:05}.png,{},{}\n",
                    dom.name,
                    ds.class_names()[s.label],
                    s.id.index,
                    dom.name,
                    ds.class_names()[s.label]
                ));
            }
        }
        std::fs::write(&manifest, text).unwrap();
        let (m, rep) = load_manifest(&manifest, dir.path(), 12).unwrap();
        assert!(rep.errors.is_empty());
        assert_eq!(m.len(), ds.len());
    }
}
