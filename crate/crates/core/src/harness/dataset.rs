use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};
use crate::rng::derive_seed;
use crate::smd::list_images;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// File name inside the dataset folder.
    pub image_id: String,
    pub path: PathBuf,
    pub label: Option<usize>,
}

impl LabeledImage {
    pub fn load(&self) -> Result<ImageTensor> {
        Ok(load_image(&self.path)?.without_alpha())
    }
}

/// An image folder plus its `image_id,category_index` label file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    /// Labels default to `<dir>/labels.csv`; a missing default file leaves every image unlabeled.
    pub fn load(dir: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let default = dir.join("labels.csv");
        let table = match labels {
            Some(p) => read_labels(p)?,
            None if default.exists() => read_labels(&default)?,
            None => BTreeMap::new(),
        };
        let images = list_images(dir)?
            .into_iter()
            .map(|path| {
                let image_id = crate::smd::file_name(&path);
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let label = table.get(&image_id).or_else(|| table.get(&stem)).copied();
                LabeledImage { image_id, path, label }
            })
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A donor for `image`: scanning from a position derived from `(seed, image_id)`,
    /// the first other image whose label differs (unknown labels always qualify).
    pub fn donor_for(&self, image: &LabeledImage, seed: u64) -> Option<&LabeledImage> {
        let n = self.images.len();
        if n == 0 {
            return None;
        }
        let start = (derive_seed(seed, format!("donor|{}", image.image_id)) % n as u64) as usize;
        (0..n).map(|i| &self.images[(start + i) % n]).find(|d| {
            d.path != image.path
                && match (d.label, image.label) {
                    (Some(a), Some(b)) => a != b,
                    _ => true,
                }
        })
    }
}

/// Two-column CSV `image_id,category_index`; a non-numeric first row is treated as a header.
pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: row {} needs image_id,category_index",
                path.display(),
                row + 1
            )));
        }
        let id = record[0].to_string();
        match record[1].parse::<usize>() {
            Ok(label) => {
                out.insert(id, label);
            }
            Err(_) if row == 0 => continue,
            Err(_) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: row {}: {:?} is not a category index",
                    path.display(),
                    row + 1,
                    &record[1]
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_png;

    #[test]
    fn labels_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(&p, "image_id,category_index\na.png,3\nb.png, 1\n").unwrap();
        let m = read_labels(&p).unwrap();
        assert_eq!(m["a.png"], 3);
        assert_eq!(m["b.png"], 1);
        std::fs::write(&p, "a.png,3\nb.png,x\n").unwrap();
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn donor_has_other_label() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["a.png", "b.png", "c.png", "d.png"].iter().enumerate() {
            let img = ImageTensor::filled(4, 4, 3, i as f64 / 4.0).unwrap();
            save_png(&img, dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("labels.csv"), "a.png,0\nb.png,0\nc.png,0\nd.png,1\n").unwrap();
        let ds = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 4);
        for seed in 0..10 {
            assert_eq!(ds.donor_for(&ds.images[0], seed).unwrap().image_id, "d.png");
            let d = ds.donor_for(&ds.images[3], seed).unwrap();
            assert_eq!(d.label, Some(0));
        }
    }
}
