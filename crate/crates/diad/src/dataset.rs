//! MVTec-style dataset trees: scanning, synthetic generation, loading.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use diad_core::image::{resize_bilinear, Grid, ImageTensor};
use diad_core::synth::{generate, Split, SyntheticSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imageio;

pub const GOOD: &str = "good";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub category: String,
    pub split: String,
    pub defect: String,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.defect != GOOD
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Common `(height, width)`, if all images agree.
    pub image_size: Option<(usize, usize)>,
}

fn sorted_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).at(dir)? {
        let e = e.at(dir)?;
        if e.file_type().at(e.path())?.is_dir() {
            out.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).at(dir)? {
        let e = e.at(dir)?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().at(e.path())?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Image dimensions from the PNG header.
fn png_size(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).at(path)?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::format(path, e))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// Enumerates an MVTec-layout tree in lexicographic order.
pub fn scan_mvtec_layout(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut categories = Vec::new();
    let mut entries = Vec::new();
    for cat in sorted_dirs(root)? {
        let cdir = root.join(&cat);
        if !cdir.join("train").is_dir() && !cdir.join("test").is_dir() {
            continue;
        }
        let train = cdir.join("train");
        if train.is_dir() {
            for d in sorted_dirs(&train)? {
                if d != GOOD {
                    return Err(Error::Dataset(format!(
                        "category {cat}: training split may only contain \"good\" images, found {d}"
                    )));
                }
                for f in sorted_pngs(&train.join(&d))? {
                    entries.push(ManifestEntry {
                        path: Path::new(&cat).join("train").join(&d).join(&f),
                        category: cat.clone(),
                        split: "train".into(),
                        defect: GOOD.into(),
                        mask: None,
                    });
                }
            }
        }
        let test = cdir.join("test");
        let mut test_count = 0;
        if test.is_dir() {
            for d in sorted_dirs(&test)? {
                for f in sorted_pngs(&test.join(&d))? {
                    let mask = if d == GOOD {
                        None
                    } else {
                        let rel = Path::new(&cat)
                            .join("ground_truth")
                            .join(&d)
                            .join(format!("{}_mask.png", stem(&f)));
                        if !root.join(&rel).is_file() {
                            return Err(Error::Dataset(format!(
                                "missing ground-truth mask {} for {}",
                                rel.display(),
                                Path::new(&cat).join("test").join(&d).join(&f).display()
                            )));
                        }
                        Some(rel)
                    };
                    entries.push(ManifestEntry {
                        path: Path::new(&cat).join("test").join(&d).join(&f),
                        category: cat.clone(),
                        split: "test".into(),
                        defect: d.clone(),
                        mask,
                    });
                    test_count += 1;
                }
            }
        }
        if test_count == 0 {
            return Err(Error::Dataset(format!("category {cat} has no test images")));
        }
        categories.push(cat);
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!(
            "no categories found under {}",
            root.display()
        )));
    }
    let mut size = None;
    let mut uniform = true;
    for e in &entries {
        let s = png_size(&root.join(&e.path))?;
        match size {
            None => size = Some(s),
            Some(prev) if prev != s => uniform = false,
            _ => {}
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        categories,
        entries,
        image_size: if uniform { size } else { None },
    })
}

/// Writes a synthetic corpus as an MVTec-layout tree and scans it back.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    let samples = generate(spec)?;
    fs::create_dir_all(out).at(out)?;
    for s in &samples {
        let dir = out.join(&s.category).join(s.split.name()).join(&s.defect);
        let name = format!("{:03}", s.index);
        imageio::write_rgb(&dir.join(format!("{name}.png")), &s.image)?;
        if let (Split::Test, Some(mask)) = (s.split, &s.mask) {
            let gt = out.join(&s.category).join("ground_truth").join(&s.defect);
            imageio::write_mask(&gt.join(format!("{name}_mask.png")), mask)?;
        }
    }
    scan_mvtec_layout(out)
}

impl DatasetManifest {
    pub fn indices(&self, split: &str, category: Option<&str>) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split && category.is_none_or(|c| e.category == c))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::format(path, e))?;
        }
        w.flush().at(path)
    }

    pub fn read_csv(path: &Path, root: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let e: ManifestEntry = row.map_err(|e| Error::format(path, e))?;
            entries.push(e);
        }
        let mut categories: Vec<String> = entries.iter().map(|e| e.category.clone()).collect();
        categories.sort();
        categories.dedup();
        Ok(Self {
            root: root.to_path_buf(),
            categories,
            entries,
            image_size: None,
        })
    }
}

/// A decoded image with its mask, if the entry has one.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub image: ImageTensor,
    pub mask: Option<Grid>,
}

/// Decodes and resizes the requested entries. Images are resampled
/// bilinearly, masks by nearest neighbour and re-binarized. Output order
/// follows `indices`.
pub fn load_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    target: (usize, usize),
) -> Result<Vec<Loaded>> {
    indices
        .par_iter()
        .map(|&i| {
            let e = manifest
                .entries
                .get(i)
                .ok_or_else(|| Error::Usage(format!("manifest index {i} out of range")))?;
            let img = imageio::read_rgb(&manifest.root.join(&e.path))?;
            let image = resize_bilinear(&img.to_tensor(), target.0, target.1);
            let mask = match &e.mask {
                Some(m) => {
                    let g = imageio::read_mask(&manifest.root.join(m))?
                        .resize_nearest(target.0, target.1);
                    Some(Grid::from_fn(target.0, target.1, |y, x| {
                        f64::from(u8::from(g.get(y, x) > 0.5))
                    }))
                }
                None => None,
            };
            Ok(Loaded { image, mask })
        })
        .collect()
}
