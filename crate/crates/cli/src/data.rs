//! Dataset directories: `img_NNNN.png` + `mask_NNNN.png` pairs with an
//! optional `manifest.json` naming them. With a manifest the listed order is
//! authoritative; without one, image files are paired by name and sorted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wavseg::synth::Sample;

use crate::imgio;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "wavseg-synth";

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    pub images: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
}

fn pairs_from_manifest(dir: &Path, m: &Manifest) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::user(format!("manifest format {:?} unrecognized", m.format)));
    }
    if m.images.len() != m.count {
        return Err(CliError::user(format!(
            "manifest count {} but {} images listed",
            m.count,
            m.images.len()
        )));
    }
    Ok(m.images.iter().map(|e| (dir.join(&e.image), dir.join(&e.mask))).collect())
}

fn pairs_from_scan(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let mut imgs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|r| r.ok().map(|d| d.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("img_") && n.ends_with(".png"))
        })
        .collect();
    imgs.sort();
    imgs.into_iter()
        .map(|img| {
            let name = img.file_name().unwrap().to_str().unwrap().replacen("img_", "mask_", 1);
            let mask = img.with_file_name(name);
            if !mask.exists() {
                return Err(CliError::user(format!(
                    "{} has no matching {}",
                    img.display(),
                    mask.display()
                )));
            }
            Ok((img, mask))
        })
        .collect()
}

/// Load every (image, mask) pair in a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let pairs = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::user(format!("cannot read manifest: {e}")))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::user(format!("bad manifest: {e}")))?;
        pairs_from_manifest(dir, &m)?
    } else {
        pairs_from_scan(dir)?
    };
    if pairs.is_empty() {
        return Err(CliError::user(format!("no img_*.png files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (img, mask) in pairs {
        let image = imgio::load_gray(&img)?;
        let mask_t = imgio::load_mask(&mask)?;
        if image.shape() != mask_t.shape() {
            return Err(CliError::user(format!(
                "{}: image {:?} and mask {:?} differ",
                img.display(),
                image.shape(),
                mask_t.shape()
            )));
        }
        out.push(Sample { image, mask: mask_t });
    }
    Ok(out)
}

/// True when `dir` exists and holds anything at all.
pub fn dir_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}
