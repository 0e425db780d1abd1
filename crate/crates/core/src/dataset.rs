//! LR–HR dataset pairing.
//!
//! The on-disk layout is `<root>/hr/*.png` and `<root>/lr_x<d>/*.png` with
//! matching filename stems. Pairs are sorted lexicographically by stem so a
//! dataset enumerates identically on every run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_image, Image};

/// One LR/HR pair plus its scale factor.
#[derive(Debug, Clone)]
pub struct Pair {
    pub stem: String,
    pub lr: Image,
    pub hr: Image,
}

/// A deterministic, dimension-checked collection of LR/HR pairs.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub scale: usize,
    pub lr_dir: PathBuf,
    pub hr_dir: PathBuf,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sorted PNG stems of a directory.
pub fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            if let Some(stem) = path.file_stem() {
                stems.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Match LR and HR files by stem, verify `hr = lr * scale` on both axes, and
/// return the pairs in stem order.
pub fn build_paired_dataset(
    lr_dir: impl AsRef<Path>,
    hr_dir: impl AsRef<Path>,
    scale: usize,
) -> Result<PairedDataset> {
    let lr_dir = lr_dir.as_ref();
    let hr_dir = hr_dir.as_ref();
    if scale == 0 {
        return Err(Error::Parameter("scale must be >= 1".to_string()));
    }
    let lr_stems = png_stems(lr_dir)?;
    let hr_stems = png_stems(hr_dir)?;
    for stem in &lr_stems {
        if !hr_stems.contains(stem) {
            return Err(Error::Pairing(stem.clone()));
        }
    }
    for stem in &hr_stems {
        if !lr_stems.contains(stem) {
            return Err(Error::Pairing(stem.clone()));
        }
    }
    let mut pairs = Vec::with_capacity(lr_stems.len());
    for stem in &lr_stems {
        let lr = load_image(lr_dir.join(format!("{stem}.png")))?;
        let hr = load_image(hr_dir.join(format!("{stem}.png")))?;
        if hr.height() != lr.height() * scale || hr.width() != lr.width() * scale {
            return Err(Error::Contract(format!(
                "'{stem}': hr {}x{} is not lr {}x{} times {scale}",
                hr.height(),
                hr.width(),
                lr.height(),
                lr.width()
            )));
        }
        pairs.push(Pair {
            stem: stem.clone(),
            lr,
            hr,
        });
    }
    Ok(PairedDataset {
        pairs,
        scale,
        lr_dir: lr_dir.to_path_buf(),
        hr_dir: hr_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{save_image, Image};

    fn write(dir: &Path, name: &str, h: usize, w: usize) {
        save_image(&Image::constant(h, w, 0.5, name), dir.join(name)).unwrap();
    }

    #[test]
    fn pairs_sorted_by_stem() {
        let tmp = tempfile::tempdir().unwrap();
        let lr = tmp.path().join("lr");
        let hr = tmp.path().join("hr");
        std::fs::create_dir_all(&lr).unwrap();
        std::fs::create_dir_all(&hr).unwrap();
        write(&lr, "b.png", 8, 8);
        write(&lr, "a.png", 8, 8);
        write(&hr, "a.png", 16, 16);
        write(&hr, "b.png", 16, 16);
        let ds = build_paired_dataset(&lr, &hr, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.pairs[0].stem, "a");
        assert_eq!(ds.pairs[1].stem, "b");
        // Same directories, same sequence.
        let again = build_paired_dataset(&lr, &hr, 2).unwrap();
        let stems: Vec<_> = again.pairs.iter().map(|p| p.stem.clone()).collect();
        assert_eq!(stems, vec!["a", "b"]);
    }

    #[test]
    fn missing_counterpart_names_the_stem() {
        let tmp = tempfile::tempdir().unwrap();
        let lr = tmp.path().join("lr");
        let hr = tmp.path().join("hr");
        std::fs::create_dir_all(&lr).unwrap();
        std::fs::create_dir_all(&hr).unwrap();
        write(&lr, "a.png", 8, 8);
        write(&lr, "b.png", 8, 8);
        write(&hr, "a.png", 16, 16);
        match build_paired_dataset(&lr, &hr, 2) {
            Err(Error::Pairing(stem)) => assert_eq!(stem, "b"),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_contract_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let lr = tmp.path().join("lr");
        let hr = tmp.path().join("hr");
        std::fs::create_dir_all(&lr).unwrap();
        std::fs::create_dir_all(&hr).unwrap();
        write(&lr, "a.png", 25, 25);
        write(&hr, "a.png", 96, 96);
        match build_paired_dataset(&lr, &hr, 4) {
            Err(Error::Contract(msg)) => assert!(msg.contains('a'), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }
}
