//! Paired dataset discovery: `input/` and `gt/` folders with matching file
//! names, or a tab-separated manifest of `(input, gt)` paths.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chromashift_core::data::{Pair, SyntheticPair};

use crate::error::{Error, Result};
use crate::io::{load_image, save_image};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub input: PathBuf,
    pub gt: PathBuf,
}

impl Record {
    /// File name of the input, used to name outputs and report rows.
    pub fn name(&self) -> String {
        self.input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedDataset {
    pub records: Vec<Record>,
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(list_images(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Lists the pairs under `root`. With a manifest, each non-empty line that
/// does not start with `#` holds `input<TAB>gt`, relative to `root`.
/// Records are sorted by input path.
pub fn scan_dataset(root: &Path, manifest: Option<&Path>) -> Result<PairedDataset> {
    let mut records = match manifest {
        Some(m) => read_manifest(root, m)?,
        None => {
            let (ind, gtd) = (root.join("input"), root.join("gt"));
            for d in [&ind, &gtd] {
                if !d.is_dir() {
                    return Err(Error::Dataset(format!("missing directory {}", d.display())));
                }
            }
            let (a, b) = (names(&ind)?, names(&gtd)?);
            if let Some(n) = a.difference(&b).next() {
                return Err(Error::Dataset(format!("input/{n} has no counterpart in gt/")));
            }
            if let Some(n) = b.difference(&a).next() {
                return Err(Error::Dataset(format!("gt/{n} has no counterpart in input/")));
            }
            a.iter()
                .map(|n| Record {
                    input: ind.join(n),
                    gt: gtd.join(n),
                })
                .collect()
        }
    };
    records.sort_by(|a, b| a.input.cmp(&b.input).then_with(|| a.gt.cmp(&b.gt)));
    for r in &records {
        for p in [&r.input, &r.gt] {
            if !p.is_file() {
                return Err(Error::Dataset(format!("missing file {}", p.display())));
            }
        }
        let (a, b) = (dims(&r.input)?, dims(&r.gt)?);
        if a != b {
            return Err(Error::Dataset(format!(
                "{} is {}x{} but {} is {}x{}",
                r.input.display(),
                a.1,
                a.0,
                r.gt.display(),
                b.1,
                b.0
            )));
        }
    }
    Ok(PairedDataset { records })
}

fn dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

fn read_manifest(root: &Path, manifest: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(manifest).map_err(Error::io(manifest))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => out.push(Record {
                input: root.join(a),
                gt: root.join(b),
            }),
            _ => {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected `input<TAB>gt`",
                    manifest.display(),
                    i + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{}: no records", manifest.display())));
    }
    Ok(out)
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(&self) -> Result<Vec<Pair>> {
        self.records
            .iter()
            .map(|r| Ok(Pair::new(load_image(&r.input)?, load_image(&r.gt)?)?))
            .collect()
    }
}

/// Writes pairs as `root/input/NNNN.png` and `root/gt/NNNN.png`.
pub fn write_pairs(root: &Path, pairs: &[SyntheticPair]) -> Result<PairedDataset> {
    let (ind, gtd) = (root.join("input"), root.join("gt"));
    for d in [&ind, &gtd] {
        std::fs::create_dir_all(d).map_err(Error::io(d))?;
    }
    let mut records = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.png");
        let r = Record {
            input: ind.join(&name),
            gt: gtd.join(&name),
        };
        save_image(&p.pair.input, &r.input)?;
        save_image(&p.pair.gt, &r.gt)?;
        records.push(r);
    }
    Ok(PairedDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromashift_core::imaging::ImageTensor;

    fn put(path: &Path, h: usize, w: usize) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_image(&ImageTensor::filled(h, w, [0.2, 0.4, 0.6]).unwrap(), path).unwrap();
    }

    #[test]
    fn matching_folders() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["c.png", "a.png", "b.png"] {
            put(&dir.path().join("input").join(n), 8, 8);
            put(&dir.path().join("gt").join(n), 8, 8);
        }
        let ds = scan_dataset(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[0].name(), "a.png");
        assert_eq!(ds.records[2].name(), "c.png");
        assert_eq!(ds.load().unwrap().len(), 3);
    }

    #[test]
    fn orphan_is_named() {
        let dir = tempfile::tempdir().unwrap();
        put(&dir.path().join("input/a.png"), 8, 8);
        put(&dir.path().join("input/lonely.png"), 8, 8);
        put(&dir.path().join("gt/a.png"), 8, 8);
        let err = scan_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("lonely.png"), "{err}");
    }

    #[test]
    fn dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        put(&dir.path().join("input/a.png"), 8, 8);
        put(&dir.path().join("gt/a.png"), 8, 9);
        assert!(scan_dataset(dir.path(), None).is_err());
    }

    #[test]
    fn manifest_maps_many_inputs_to_one_reference() {
        let dir = tempfile::tempdir().unwrap();
        put(&dir.path().join("gt/scene.png"), 8, 8);
        let mut text = String::from("# five exposures\n");
        for ev in ["N1.5", "N1", "0", "P1", "P1.5"] {
            put(&dir.path().join(format!("in/scene_{ev}.png")), 8, 8);
            text += &format!("in/scene_{ev}.png\tgt/scene.png\n");
        }
        let m = dir.path().join("pairs.tsv");
        std::fs::write(&m, text).unwrap();
        let ds = scan_dataset(dir.path(), Some(&m)).unwrap();
        assert_eq!(ds.len(), 5);
        assert!(ds.records.iter().all(|r| r.gt.ends_with("gt/scene.png")));
        assert!(ds.records.windows(2).all(|w| w[0].input < w[1].input));
    }

    #[test]
    fn manifest_with_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        put(&dir.path().join("gt/s.png"), 8, 8);
        let m = dir.path().join("pairs.tsv");
        std::fs::write(&m, "in/nope.png\tgt/s.png\n").unwrap();
        let err = scan_dataset(dir.path(), Some(&m)).unwrap_err().to_string();
        assert!(err.contains("nope.png"), "{err}");
    }
}
