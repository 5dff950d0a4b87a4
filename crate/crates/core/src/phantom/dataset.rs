use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_phantom, load_image, load_mask, save_image, save_mask, FamilyId, PhantomFamily,
};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::mask::AnomalyMask;
use crate::rng::{derive_seed, derived_rng};
use crate::synthesis::{SynthesisConfig, SynthesisTask};

/// What to generate for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: FamilyId,
    pub k: usize,
    pub n_test_normal: usize,
    pub n_test_anomaly: usize,
    pub size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            family: FamilyId::Blob,
            k: 16,
            n_test_normal: 50,
            n_test_anomaly: 50,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<SynthesisTask>,
}

/// `manifest.json`: paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: FamilyId,
    pub seed: u64,
    pub train: Vec<PathBuf>,
    pub test_normal: Vec<PathBuf>,
    pub test_anomaly: Vec<AnomalyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(skip)]
    root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Split hygiene: no path appears in both train and test.
    pub fn check(&self) -> Result<()> {
        let test: std::collections::HashSet<&PathBuf> = self
            .test_normal
            .iter()
            .chain(self.test_anomaly.iter().map(|e| &e.image))
            .collect();
        if let Some(p) = self.train.iter().find(|p| test.contains(p)) {
            return Err(Error::InvalidInput(format!(
                "{} appears in both train and test splits",
                p.display()
            )));
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_train(&self) -> Result<Vec<Image>> {
        self.train
            .iter()
            .map(|p| load_image(self.resolve(p)))
            .collect()
    }

    /// Test split as `(image, label, mask)`; normal images carry an empty mask.
    pub fn load_test(&self) -> Result<Vec<(PathBuf, Image, bool, AnomalyMask)>> {
        let mut out = Vec::with_capacity(self.test_normal.len() + self.test_anomaly.len());
        for p in &self.test_normal {
            let img = load_image(self.resolve(p))?;
            let mask = AnomalyMask::empty(img.height(), img.width());
            out.push((p.clone(), img, false, mask));
        }
        for entry in &self.test_anomaly {
            let img = load_image(self.resolve(&entry.image))?;
            let mask = load_mask(self.resolve(&entry.mask))?;
            if mask.height() != img.height() || mask.width() != img.width() {
                return Err(Error::Shape(format!(
                    "mask {} does not match its image",
                    entry.mask.display()
                )));
            }
            out.push((entry.image.clone(), img, true, mask));
        }
        Ok(out)
    }
}

/// The `k` training phantoms of [`build_dataset`], kept in memory.
pub fn support_images(spec: &DatasetSpec, seed: u64) -> Result<Vec<Image>> {
    let family = PhantomFamily::from_id(spec.family);
    (0..spec.k)
        .map(|i| {
            generate_phantom(
                &family,
                derive_seed(seed, "train-image", i as u64),
                spec.size,
            )
        })
        .collect()
}

/// Generates phantoms for the train and test splits and writes PNGs plus
/// `manifest.json` under `out_dir`. Test anomalies are synthesized from a seed
/// stream that no training-time stream uses.
pub fn build_dataset(
    spec: &DatasetSpec,
    synthesis: &SynthesisConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if spec.k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    synthesis.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let family = PhantomFamily::from_id(spec.family);

    let write = |rel: PathBuf, img: &Image| -> Result<PathBuf> {
        save_image(img, out_dir.join(&rel))?;
        Ok(rel)
    };

    let mut train = Vec::with_capacity(spec.k);
    for (i, img) in support_images(spec, seed)?.iter().enumerate() {
        train.push(write(PathBuf::from(format!("train/{i:04}.png")), img)?);
    }
    let mut test_normal = Vec::with_capacity(spec.n_test_normal);
    for i in 0..spec.n_test_normal {
        let img = generate_phantom(
            &family,
            derive_seed(seed, "test-normal-image", i as u64),
            spec.size,
        )?;
        test_normal.push(write(
            PathBuf::from(format!("test/normal/{i:04}.png")),
            &img,
        )?);
    }
    let mut test_anomaly = Vec::with_capacity(spec.n_test_anomaly);
    for i in 0..spec.n_test_anomaly {
        let base = generate_phantom(
            &family,
            derive_seed(seed, "test-anomaly-image", i as u64),
            spec.size,
        )?;
        let mut rng = derived_rng(seed, "test-anomaly-task", i as u64);
        let task = synthesis.sample_task(&mut rng);
        let sampled = synthesis.synthesize_random(
            &base,
            task,
            derive_seed(seed, "test-anomaly-synthesis", i as u64),
        )?;
        let image = write(
            PathBuf::from(format!("test/anomaly/{i:04}.png")),
            &sampled.image,
        )?;
        let mask = PathBuf::from(format!("test/mask/{i:04}.png"));
        save_mask(&sampled.mask, out_dir.join(&mask))?;
        test_anomaly.push(AnomalyEntry {
            image,
            mask,
            task: Some(task),
        });
    }

    let manifest = Manifest {
        family: spec.family,
        seed,
        train,
        test_normal,
        test_anomaly,
        size: Some(spec.size),
        config_digest: None,
        root: out_dir.to_path_buf(),
    };
    manifest.check()?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl Manifest {
    /// Records a provenance digest and rewrites `manifest.json`.
    pub fn with_config_digest(mut self, digest: String) -> Result<Self> {
        self.config_digest = Some(digest);
        self.save(self.root.join(MANIFEST_FILE))?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            family: FamilyId::Blob,
            k: 4,
            n_test_normal: 3,
            n_test_anomaly: 6,
            size: 64,
        }
    }

    #[test]
    fn counts_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_spec(), &SynthesisConfig::default(), 1, dir.path()).unwrap();
        assert_eq!(m.train.len(), 4);
        assert_eq!(m.test_normal.len(), 3);
        assert_eq!(m.test_anomaly.len(), 6);
        let loaded = Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        for (_, img, label, mask) in loaded.load_test().unwrap() {
            assert_eq!((mask.height(), mask.width()), (img.height(), img.width()));
            assert_eq!(label, mask.count() > 0);
        }
    }

    #[test]
    fn rebuild_is_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&small_spec(), &SynthesisConfig::default(), 3, a.path()).unwrap();
        build_dataset(&small_spec(), &SynthesisConfig::default(), 3, b.path()).unwrap();
        let read = |d: &Path, rel: &str| std::fs::read(d.join(rel)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        assert_eq!(
            read(a.path(), "test/anomaly/0002.png"),
            read(b.path(), "test/anomaly/0002.png")
        );
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        let err = build_dataset(
            &small_spec(),
            &SynthesisConfig::default(),
            1,
            file.join("sub"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let m = Manifest {
            family: FamilyId::Blob,
            seed: 0,
            train: vec![PathBuf::from("a.png")],
            test_normal: vec![PathBuf::from("a.png")],
            test_anomaly: vec![],
            size: None,
            config_digest: None,
            root: PathBuf::new(),
        };
        assert!(m.check().is_err());
    }
}
