//! Dataset directories: a TOML manifest pointing at a photo, one 1-bit raster
//! per CAD layer, and optional defect labels and palette.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::raster::{ensure_same_dims, CadStack, DefectClass, DefectLabels, RasterImage};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub photo: PathBuf,
    pub layers: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Optional per-class label rasters keyed by class name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_labels: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<PathBuf>,
    pub split_seed: u64,
    pub split_fraction: f64,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if manifest.layers.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "at least one layer is required".into(),
            });
        }
        if !(manifest.split_fraction > 0.0 && manifest.split_fraction < 1.0) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("split_fraction {} outside (0, 1)", manifest.split_fraction),
            });
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A loaded, dimension-consistent dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Directory the manifest's relative paths resolve against.
    pub root: PathBuf,
    pub photo: RasterImage,
    pub cad: CadStack,
    pub labels: Option<DefectLabels>,
}

impl Dataset {
    pub fn dims(&self) -> (usize, usize) {
        self.photo.dims()
    }

    pub fn palette_path(&self) -> Option<PathBuf> {
        self.manifest.palette.as_ref().map(|p| self.root.join(p))
    }
}

/// Loads a dataset from a manifest file or a directory containing `manifest.toml`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = DatasetManifest::read(&manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let photo = io::read_photo(&root.join(&manifest.photo))?;
    let dims = photo.dims();

    let mut masks = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        let mask = io::read_binary(&root.join(layer))?;
        ensure_same_dims(&format!("layer {}", layer.display()), dims, mask.dims())?;
        masks.push(mask.as_slice().to_vec());
    }
    let cad = CadStack::from_masks(dims.0, dims.1, &masks)?;

    let mut per_class = Vec::new();
    for (name, path) in &manifest.class_labels {
        let class = DefectClass::from_name(name).ok_or_else(|| Error::Manifest {
            path: manifest_path.clone(),
            message: format!("unknown defect class {name:?}"),
        })?;
        let mask = io::read_binary(&root.join(path))?;
        ensure_same_dims(&format!("labels {}", path.display()), dims, mask.dims())?;
        per_class.push((class, mask));
    }

    let labels = match &manifest.labels {
        Some(path) => {
            let full = root.join(path);
            if full.exists() {
                let mask = io::read_binary(&full)?;
                ensure_same_dims(&format!("labels {}", path.display()), dims, mask.dims())?;
                if per_class.is_empty() {
                    Some(DefectLabels::from_mask(mask))
                } else {
                    let labels = DefectLabels::from_classes(dims.0, dims.1, per_class)?;
                    if labels.mask() != &mask {
                        return Err(Error::Manifest {
                            path: manifest_path.clone(),
                            message: "label mask is not the union of the class masks".into(),
                        });
                    }
                    Some(labels)
                }
            } else {
                None
            }
        }
        None if !per_class.is_empty() => Some(DefectLabels::from_classes(dims.0, dims.1, per_class)?),
        None => None,
    };

    Ok(Dataset {
        manifest,
        root,
        photo,
        cad,
        labels,
    })
}

/// Writes photo, layers and labels into `dir` and returns the manifest written there.
pub fn save_dataset(
    dir: &Path,
    name: &str,
    photo: &RasterImage,
    cad: &CadStack,
    labels: Option<&DefectLabels>,
    split_seed: u64,
    split_fraction: f64,
) -> Result<DatasetManifest> {
    ensure_same_dims("CAD stack", photo.dims(), cad.dims())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let photo_rel = PathBuf::from("photo.png");
    io::write_photo(&dir.join(&photo_rel), photo)?;
    let mut layers = Vec::with_capacity(cad.layer_count());
    for l in 0..cad.layer_count() {
        let rel = PathBuf::from(format!("layer{l}.png"));
        io::write_layer(&dir.join(&rel), cad, l)?;
        layers.push(rel);
    }
    let mut class_labels = BTreeMap::new();
    let labels_rel = match labels {
        Some(labels) => {
            ensure_same_dims("labels", photo.dims(), labels.dims())?;
            for (class, mask) in labels.per_class() {
                let rel = PathBuf::from(format!("labels_{}.png", class.name()));
                io::write_mask(&dir.join(&rel), mask)?;
                class_labels.insert(class.name().to_string(), rel);
            }
            let rel = PathBuf::from("labels.png");
            io::write_mask(&dir.join(&rel), labels.mask())?;
            Some(rel)
        }
        None => None,
    };
    let manifest = DatasetManifest {
        name: name.to_string(),
        photo: photo_rel,
        layers,
        labels: labels_rel,
        class_labels,
        palette: None,
        split_seed,
        split_fraction,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Mask;

    fn toy(h: usize, w: usize, layers: usize) -> (RasterImage, CadStack) {
        let photo = RasterImage::filled(h, w, [0.2, 0.4, 0.6]);
        let mut cad = CadStack::empty(h, w, layers);
        for y in 0..h {
            for x in 0..w {
                cad.set((x + y) % layers, y, x, true);
            }
        }
        (photo, cad)
    }

    #[test]
    fn five_layer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (photo, cad) = toy(12, 9, 5);
        save_dataset(dir.path(), "toy", &photo, &cad, None, 3, 0.7).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.cad.layer_count(), 5);
        assert_eq!(ds.cad, cad);
        assert!(ds.labels.is_none());
        assert_eq!(ds.manifest.split_seed, 3);
    }

    #[test]
    fn missing_label_file_gives_no_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (photo, cad) = toy(8, 8, 2);
        let mut m = save_dataset(dir.path(), "toy", &photo, &cad, None, 0, 0.7).unwrap();
        m.labels = Some("absent.png".into());
        m.write(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(load_dataset(dir.path()).unwrap().labels.is_none());
    }

    #[test]
    fn layer_dimension_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let (_, cad) = toy(100, 100, 2);
        let photo = RasterImage::filled(100, 101, [0.5; 3]);
        io::write_photo(&dir.path().join("photo.png"), &photo).unwrap();
        io::write_layer(&dir.path().join("layer0.png"), &cad, 0).unwrap();
        io::write_layer(&dir.path().join("layer1.png"), &cad, 1).unwrap();
        let manifest = DatasetManifest {
            name: "bad".into(),
            photo: "photo.png".into(),
            layers: vec!["layer0.png".into(), "layer1.png".into()],
            labels: None,
            class_labels: BTreeMap::new(),
            palette: None,
            split_seed: 0,
            split_fraction: 0.7,
        };
        manifest.write(&dir.path().join(MANIFEST_FILE)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            Error::DimensionMismatch { what, .. } => assert!(what.contains("layer0.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_photo_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (photo, cad) = toy(8, 8, 1);
        save_dataset(dir.path(), "toy", &photo, &cad, None, 0, 0.7).unwrap();
        fs::remove_file(dir.path().join("photo.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn unknown_manifest_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(
            &p,
            "name='x'\nphoto='p.png'\nlayers=['a.png']\nsplit_seed=0\nsplit_fraction=0.7\nbogus=1\n",
        )
        .unwrap();
        assert!(matches!(DatasetManifest::read(&p), Err(Error::Manifest { .. })));
    }

    #[test]
    fn class_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (photo, cad) = toy(6, 6, 2);
        let mut dust = Mask::empty(6, 6);
        dust.set(1, 1, true);
        let mut letters = Mask::empty(6, 6);
        letters.set(4, 2, true);
        let labels = DefectLabels::from_classes(
            6,
            6,
            vec![(DefectClass::Dust, dust), (DefectClass::Letters, letters)],
        )
        .unwrap();
        save_dataset(dir.path(), "toy", &photo, &cad, Some(&labels), 0, 0.7).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let loaded = ds.labels.unwrap();
        assert_eq!(loaded.mask(), labels.mask());
        assert_eq!(loaded.per_class().len(), 2);
    }
}
