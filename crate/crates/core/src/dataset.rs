//! On-disk dataset layout.
//!
//! A manifest is a text file listing one domain directory per line, in
//! domain-id order, relative to the manifest's own directory. Blank lines
//! and lines starting with `#` are ignored. Each domain directory holds an
//! `images/` folder and, for labelled domains, a `labels/` folder with one
//! single-channel PNG per image sharing the image's file stem.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{self, DomainImage, PatchGrid};
use crate::synthetic::SyntheticDataset;
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entries are resolved against.
    pub root: PathBuf,
    /// Domain directories as written in the manifest.
    pub entries: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let entries: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect();
        if entries.is_empty() {
            return Err(Error::Data("manifest lists no domains".into()));
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self
            .entries
            .iter()
            .map(|e| format!("{}\n", e.display()))
            .collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domain_dir(&self, id: usize) -> PathBuf {
        self.root.join(&self.entries[id])
    }

    /// Fails unless every domain directory has an `images/` folder.
    pub fn check(&self) -> Result<()> {
        for id in 0..self.len() {
            let dir = self.domain_dir(id).join(IMAGES_DIR);
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "domain {id}: {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

/// An image together with its file name inside `images/`.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: DomainImage,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

pub fn label_path(domain_dir: &Path, image_name: &str) -> PathBuf {
    let stem = Path::new(image_name).file_stem().unwrap_or_default();
    domain_dir.join(LABELS_DIR).join(stem).with_extension("png")
}

/// Image file names of a domain, sorted.
pub fn list_images(domain_dir: &Path) -> Result<Vec<String>> {
    let dir = domain_dir.join(IMAGES_DIR);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(names)
}

/// Loads every image of a domain directory with labels where present.
pub fn load_domain(domain_dir: &Path, domain_id: usize) -> Result<Vec<NamedImage>> {
    list_images(domain_dir)?
        .into_iter()
        .map(|name| {
            let pixels = imaging::load_rgb(&domain_dir.join(IMAGES_DIR).join(&name))?;
            let lp = label_path(domain_dir, &name);
            let labels = if lp.is_file() {
                Some(imaging::load_labels(&lp)?)
            } else {
                None
            };
            let image = DomainImage::new(pixels, labels, domain_id)
                .map_err(|e| Error::Data(format!("{}/{name}: {e}", domain_dir.display())))?;
            Ok(NamedImage { name, image })
        })
        .collect()
}

pub fn load_manifest(manifest: &Manifest) -> Result<Vec<Vec<NamedImage>>> {
    manifest.check()?;
    (0..manifest.len())
        .map(|d| load_domain(&manifest.domain_dir(d), d))
        .collect()
}

/// Writes images into `domain_dir/images` and their labels (when present)
/// into `domain_dir/labels`.
pub fn write_domain(domain_dir: &Path, images: &[NamedImage]) -> Result<()> {
    let img_dir = domain_dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for named in images {
        imaging::save_rgb(&img_dir.join(&named.name), named.image.pixels())?;
        if let Some(labels) = named.image.labels() {
            let lp = label_path(domain_dir, &named.name);
            let parent = lp.parent().expect("label path has a parent");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            imaging::save_labels(&lp, labels)?;
        }
    }
    Ok(())
}

/// Copies a domain's label files byte for byte.
pub fn copy_labels(src_domain: &Path, dst_domain: &Path) -> Result<usize> {
    let src = src_domain.join(LABELS_DIR);
    if !src.is_dir() {
        return Ok(0);
    }
    let dst = dst_domain.join(LABELS_DIR);
    fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
    let mut n = 0;
    for entry in fs::read_dir(&src).map_err(|e| Error::io(&src, e))? {
        let path = entry.map_err(|e| Error::io(&src, e))?.path();
        if path.is_file() {
            let target = dst.join(path.file_name().expect("file entry"));
            fs::copy(&path, &target).map_err(|e| Error::io(&target, e))?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn domain_name(id: usize) -> String {
    format!("domain{id}")
}

/// Writes a generated dataset with its manifest into `out`.
pub fn write_synthetic(ds: &SyntheticDataset, out: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (d, images) in ds.domains.iter().enumerate() {
        let named: Vec<NamedImage> = images
            .iter()
            .enumerate()
            .map(|(t, im)| NamedImage {
                name: SyntheticDataset::tile_name(t),
                image: im.clone(),
            })
            .collect();
        write_domain(&out.join(domain_name(d)), &named)?;
        entries.push(PathBuf::from(domain_name(d)));
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Every tile of every image of one domain.
pub fn domain_patches(
    images: &[DomainImage],
    patch_size: usize,
    overlap: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for im in images {
        let grid = PatchGrid::new(im.height(), im.width(), patch_size, overlap)?;
        out.extend((0..grid.len()).map(|i| grid.crop(im.pixels(), i)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    #[test]
    fn manifest_parsing() {
        let m = Manifest::parse("# cities\na\n\n  b/c  \n", Path::new("/data")).unwrap();
        assert_eq!(m.entries, vec![PathBuf::from("a"), PathBuf::from("b/c")]);
        assert_eq!(m.domain_dir(1), PathBuf::from("/data/b/c"));
        assert!(Manifest::parse("# nothing\n", Path::new(".")).is_err());
    }

    #[test]
    fn synthetic_round_trip_through_disk() {
        let ds = generate(&SyntheticConfig {
            images_per_domain: 2,
            size: 48,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(&ds, dir.path()).unwrap();
        let m = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.len(), 3);
        let loaded = load_manifest(&m).unwrap();
        for (d, images) in loaded.iter().enumerate() {
            assert_eq!(images.len(), 2);
            assert_eq!(images[0].name, "tile000.png");
            assert_eq!(images[0].image.domain_id, d);
            assert_eq!(images[1].image.labels(), ds.domains[d][1].labels());
            let err = images[1]
                .image
                .pixels()
                .data()
                .iter()
                .zip(ds.domains[d][1].pixels().data())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }

        let copy = dir.path().join("copy");
        assert_eq!(copy_labels(&m.domain_dir(0), &copy).unwrap(), 2);
        assert_eq!(
            fs::read(copy.join(LABELS_DIR).join("tile001.png")).unwrap(),
            fs::read(m.domain_dir(0).join(LABELS_DIR).join("tile001.png")).unwrap()
        );
    }

    #[test]
    fn patches_cover_every_image() {
        let ds = generate(&SyntheticConfig {
            images_per_domain: 2,
            size: 64,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let p = domain_patches(&ds.domains[0], 32, 8).unwrap();
        assert_eq!(p.len(), 2 * 9);
        assert_eq!(p[0].shape(), &[3, 32, 32]);
    }
}
