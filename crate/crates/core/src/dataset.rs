//! On-disk dataset layout: manifests, samples, loading and augmentation.
//!
//! A dataset directory contains `manifest.json`, the domain and link
//! definitions it was generated against, one PPM image per sample and one
//! PGM label raster per (sample, domain):
//!
//! ```text
//! out/
//!   manifest.json
//!   domains/<id>.json
//!   links/<src>_<dst>.json
//!   images/<sample>.ppm
//!   labels/<domain>/<sample>.pgm
//! ```
//!
//! The manifest echoes the generation config and lists relative paths only,
//! so directories are relocatable.  Externally converted real datasets are
//! accepted as long as they follow this layout and their label rasters
//! respect the declared domains (255 = ignore).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{coarsen_labels, DomainRegistry};
use crate::error::{Result, SstError};
use crate::imgio::{read_pgm, read_ppm, GrayImage, RgbImage};
use crate::tensor::Tensor;

/// One training/evaluation sample: an image plus one label raster per domain
/// it carries labels for.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: BTreeMap<String, GrayImage>,
}

impl SegSample {
    /// Check the sample invariants against a registry: raster sizes match the
    /// image, every label value is in range, and every pair of carried
    /// domains with a coarsening link is pixelwise consistent.
    pub fn validate(&self, registry: &DomainRegistry) -> Result<()> {
        for (dom_id, raster) in &self.labels {
            let domain = registry.domain(dom_id)?;
            if raster.width != self.image.width || raster.height != self.image.height {
                return Err(SstError::Shape(format!(
                    "sample {}: {dom_id} raster {}x{} does not match image {}x{}",
                    self.id, raster.width, raster.height, self.image.width, self.image.height
                )));
            }
            let z = domain.z() as u16;
            for (i, &l) in raster.data.iter().enumerate() {
                if l != 255 && l as u16 >= z {
                    return Err(SstError::LabelOutOfRange {
                        value: l as u16,
                        x: i % raster.width,
                        y: i / raster.width,
                        num_labels: z as usize,
                    });
                }
            }
        }
        for (fine_id, fine) in &self.labels {
            for (coarse_id, coarse) in &self.labels {
                let Some(map) = registry.coarsening(fine_id, coarse_id) else {
                    continue;
                };
                let derived = coarsen_labels(&fine.data, fine.width, map)?;
                if derived != coarse.data {
                    let i = derived
                        .iter()
                        .zip(&coarse.data)
                        .position(|(a, b)| a != b)
                        .unwrap_or(0);
                    return Err(SstError::Config(format!(
                        "sample {}: {coarse_id} raster disagrees with coarsened {fine_id} at ({}, {})",
                        self.id,
                        i % fine.width,
                        i / fine.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split assignment of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Manifest entry for one sample; all paths relative to the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub labels: BTreeMap<String, String>,
}

/// The dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Generation config echo (opaque to loaders).
    pub config: serde_json::Value,
    /// Domain id -> relative path of its definition file.
    pub domains: BTreeMap<String, String>,
    /// Relative paths of cross-link files.
    pub links: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// A dataset rooted at a directory, with its registry loaded and validated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub registry: DomainRegistry,
}

impl Dataset {
    /// Open a dataset directory: parse the manifest and load the domain
    /// registry it references.
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&mpath).map_err(|e| SstError::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| SstError::format(&mpath, format!("manifest JSON: {e}")))?;

        let mut registry = DomainRegistry::new();
        for rel in manifest.domains.values() {
            registry.add_domain(crate::domain::load_domain(&root.join(rel))?)?;
        }
        for rel in &manifest.links {
            let path = root.join(rel);
            // Peek at the endpoints to find the domains for shape checking.
            let text = fs::read_to_string(&path).map_err(|e| SstError::io(&path, e))?;
            #[derive(Deserialize)]
            struct Ends {
                src: String,
                dst: String,
            }
            let ends: Ends = serde_json::from_str(&text)
                .map_err(|e| SstError::format(&path, format!("link JSON: {e}")))?;
            let src = registry.domain(&ends.src)?.clone();
            let dst = registry.domain(&ends.dst)?.clone();
            registry.add_link(crate::domain::load_link(&path, &src, &dst)?)?;
        }
        for (id, _) in &manifest.domains {
            registry.domain(id)?;
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            registry,
        })
    }

    /// Indices of samples in the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Load one sample from disk.
    pub fn load_sample(&self, index: usize) -> Result<SegSample> {
        let entry = self.manifest.samples.get(index).ok_or_else(|| {
            SstError::Config(format!("sample index {index} out of range"))
        })?;
        let image = read_ppm(&self.root.join(&entry.image))?;
        let mut labels = BTreeMap::new();
        for (dom, rel) in &entry.labels {
            labels.insert(dom.clone(), read_pgm(&self.root.join(rel))?);
        }
        Ok(SegSample {
            id: entry.id.clone(),
            image,
            labels,
        })
    }
}

/// Convert an 8-bit RGB image into a `[3, H, W]` tensor normalized to [0, 1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = img.data[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// The label permutation a horizontal flip induces on a domain: categories
/// named `left-*` and `right-*` swap, everything else is fixed.
pub fn flip_permutation(names: &[String]) -> Vec<u8> {
    let mut perm: Vec<u8> = (0..names.len() as u8).collect();
    for (i, n) in names.iter().enumerate() {
        if let Some(rest) = n.strip_prefix("left-") {
            let twin = format!("right-{rest}");
            if let Some(j) = names.iter().position(|m| *m == twin) {
                perm[i] = j as u8;
                perm[j] = i as u8;
            }
        }
    }
    perm
}

/// Horizontally mirror a sample, swapping side-specific labels.
pub fn hflip_sample(sample: &SegSample, registry: &DomainRegistry) -> Result<SegSample> {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut image = sample.image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image.data[(y * w + x) * 3 + c] = sample.image.data[(y * w + (w - 1 - x)) * 3 + c];
            }
        }
    }
    let mut labels = BTreeMap::new();
    for (dom_id, raster) in &sample.labels {
        let perm = flip_permutation(&registry.domain(dom_id)?.names);
        let mut out = raster.clone();
        for y in 0..h {
            for x in 0..w {
                let v = raster.data[y * w + (w - 1 - x)];
                out.data[y * w + x] = if v == 255 { 255 } else { perm[v as usize] };
            }
        }
        labels.insert(dom_id.clone(), out);
    }
    Ok(SegSample {
        id: sample.id.clone(),
        image,
        labels,
    })
}

/// Nearest-neighbour scale by an integer-percent factor, then center-crop or
/// pad back to the original size (image pads black, labels pad 255).
pub fn rescale_sample(sample: &SegSample, percent: u32) -> SegSample {
    let (w, h) = (sample.image.width, sample.image.height);
    let (nw, nh) = (
        ((w as u64 * percent as u64) / 100).max(1) as usize,
        ((h as u64 * percent as u64) / 100).max(1) as usize,
    );
    let src_x = |x: usize| (x * w / nw).min(w - 1);
    let src_y = |y: usize| (y * h / nh).min(h - 1);

    // Offsets between the scaled raster and the fixed-size output canvas.
    let (ox, oy) = (nw as isize - w as isize, nh as isize - h as isize);
    let (ox, oy) = (ox / 2, oy / 2);

    let mut image = RgbImage::new(w, h);
    let mut labels: BTreeMap<String, GrayImage> = sample
        .labels
        .keys()
        .map(|k| (k.clone(), GrayImage::new(w, h, 255)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let sx = x as isize + ox;
            let sy = y as isize + oy;
            if sx < 0 || sy < 0 || sx >= nw as isize || sy >= nh as isize {
                continue;
            }
            let (ix, iy) = (src_x(sx as usize), src_y(sy as usize));
            for c in 0..3 {
                image.data[(y * w + x) * 3 + c] = sample.image.data[(iy * w + ix) * 3 + c];
            }
            for (dom, out) in labels.iter_mut() {
                out.data[y * w + x] = sample.labels[dom].data[iy * w + ix];
            }
        }
    }
    SegSample {
        id: sample.id.clone(),
        image,
        labels,
    }
}
