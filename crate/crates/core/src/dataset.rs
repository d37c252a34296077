//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<subject id>/echoes.dxt       f32 [slices, echoes, 2, H, W]  (re, im)
//! <root>/<subject id>/truth_ff.dxt     f32 [slices, H, W]
//! <root>/<subject id>/truth_field.dxt  f32 [slices, H, W]  rad/s
//! <root>/<subject id>/truth_r2s.dxt    f32 [slices, H, W]  1/s
//! <root>/<subject id>/body_mask.dxt    f32 [slices, H, W]  0/1
//! <root>/<subject id>/liver_mask.dxt   f32 [slices, H, W]  0/1
//! ```
//!
//! Values are generated in `f64` and rounded to `f32` on write.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::phantom::{generate_subject, subject_seed, PhantomConfig, PhantomError, Subject};
use crate::signal::{AcquisitionConfig, EchoSeries, FatSpectrum};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("{path}: {reason}")]
    Layout { path: PathBuf, reason: String },
    #[error("dataset needs at least one subject")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub liver_ff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub acquisition: AcquisitionConfig,
    pub spectrum: FatSpectrum,
    pub phantom: PhantomConfig,
    pub subjects: Vec<SubjectEntry>,
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:04}")
}

/// Generate subjects `0..n` with their counter-derived seeds.
pub fn generate_subjects(n: usize, master_seed: u64, cfg: &PhantomConfig) -> Result<Vec<Subject>, PhantomError> {
    (0..n)
        .map(|i| generate_subject(subject_seed(master_seed, i as u64), cfg, &subject_id(i)))
        .collect()
}

/// Generate and write a dataset; returns its manifest.
pub fn generate_dataset(
    n: usize,
    master_seed: u64,
    cfg: &PhantomConfig,
    root: &Path,
) -> Result<Manifest, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    cfg.validate()?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let seed = subject_seed(master_seed, i as u64);
        let subject = generate_subject(seed, cfg, &subject_id(i))?;
        write_subject(root, &subject)?;
        entries.push(SubjectEntry { id: subject.id.clone(), seed, liver_ff: subject.liver_ff });
    }
    let manifest = Manifest {
        master_seed,
        acquisition: cfg.acquisition.clone(),
        spectrum: cfg.spectrum.clone(),
        phantom: cfg.clone(),
        subjects: entries,
    };
    io::write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn volume_tensor(s: usize, h: usize, w: usize, values: impl Iterator<Item = f64>) -> Tensor<f32> {
    Tensor::from_vec(vec![s, h, w], values.map(|v| v as f32).collect()).expect("volume size")
}

pub fn write_subject(root: &Path, subject: &Subject) -> Result<(), IoError> {
    let dir = root.join(&subject.id);
    let e = &subject.echoes;
    let (s, h, w) = (e.slices, e.height, e.width);
    let mut echo_data = Vec::with_capacity(e.data().len() * 2);
    for z in 0..s {
        for n in 1..=e.echoes() {
            let plane = e.plane(z, n);
            echo_data.extend(plane.iter().map(|c| c.re as f32));
            echo_data.extend(plane.iter().map(|c| c.im as f32));
        }
    }
    let echoes = Tensor::from_vec(vec![s, e.echoes(), 2, h, w], echo_data).expect("echo size");
    io::write_tensor(&dir.join("echoes.dxt"), &echoes)?;
    let mask = |m: &[bool]| volume_tensor(s, h, w, m.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    io::write_tensor(&dir.join("truth_ff.dxt"), &volume_tensor(s, h, w, subject.truth_ff.iter().copied()))?;
    io::write_tensor(&dir.join("truth_field.dxt"), &volume_tensor(s, h, w, subject.truth_field.iter().copied()))?;
    io::write_tensor(&dir.join("truth_r2s.dxt"), &volume_tensor(s, h, w, subject.truth_r2s.iter().copied()))?;
    io::write_tensor(&dir.join("body_mask.dxt"), &mask(&subject.body_mask))?;
    io::write_tensor(&dir.join("liver_mask.dxt"), &mask(&subject.liver_mask))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let mut m: Manifest = io::read_json(&root.join(MANIFEST))?;
    m.phantom.acquisition = m.acquisition.clone();
    m.phantom.spectrum = m.spectrum.clone();
    Ok(m)
}

fn read_volume(path: &Path, expect: &[usize]) -> Result<Vec<f64>, DatasetError> {
    let t = io::read_tensor(path)?.into_f64();
    if t.shape() != expect {
        return Err(DatasetError::Layout {
            path: path.to_path_buf(),
            reason: format!("shape {:?}, expected {expect:?}", t.shape()),
        });
    }
    Ok(t.into_data())
}

pub fn read_subject(root: &Path, entry: &SubjectEntry, acquisition: &AcquisitionConfig) -> Result<Subject, DatasetError> {
    let dir = root.join(&entry.id);
    let path = dir.join("echoes.dxt");
    let raw = io::read_tensor(&path)?.into_f64();
    let [s, n, two, h, w] = raw.shape()[..] else {
        return Err(DatasetError::Layout { path, reason: format!("echo tensor has shape {:?}", raw.shape()) });
    };
    if two != 2 || n != acquisition.echo_count() {
        return Err(DatasetError::Layout {
            path,
            reason: format!("echo tensor {:?} does not match {} echoes", raw.shape(), acquisition.echo_count()),
        });
    }
    let plane = h * w;
    let d = raw.data();
    let mut data = Vec::with_capacity(s * n * plane);
    for zn in 0..s * n {
        let re = &d[(2 * zn) * plane..(2 * zn + 1) * plane];
        let im = &d[(2 * zn + 1) * plane..(2 * zn + 2) * plane];
        data.extend(re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)));
    }
    let echoes = EchoSeries::new(s, h, w, acquisition.clone(), data).map_err(|e| DatasetError::Layout {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let vol = [s, h, w];
    let mask = |name: &str| -> Result<Vec<bool>, DatasetError> {
        Ok(read_volume(&dir.join(name), &vol)?.into_iter().map(|v| v > 0.5).collect())
    };
    Ok(Subject {
        id: entry.id.clone(),
        seed: entry.seed,
        echoes,
        truth_ff: read_volume(&dir.join("truth_ff.dxt"), &vol)?,
        truth_field: read_volume(&dir.join("truth_field.dxt"), &vol)?,
        truth_r2s: read_volume(&dir.join("truth_r2s.dxt"), &vol)?,
        body_mask: mask("body_mask.dxt")?,
        liver_mask: mask("liver_mask.dxt")?,
        liver_ff: entry.liver_ff,
    })
}

/// A dataset opened from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        Ok(Dataset { root: root.to_path_buf(), manifest: read_manifest(root)? })
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.manifest.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn load(&self, id: &str) -> Result<Subject, DatasetError> {
        let entry = self.manifest.subjects.iter().find(|s| s.id == id).ok_or_else(|| DatasetError::Layout {
            path: self.root.join(id),
            reason: "subject not in manifest".into(),
        })?;
        read_subject(&self.root, entry, &self.manifest.acquisition)
    }

    pub fn load_all(&self) -> Result<Vec<Subject>, DatasetError> {
        self.manifest
            .subjects
            .iter()
            .map(|e| read_subject(&self.root, e, &self.manifest.acquisition))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::STEATOSIS_CUTOFF;

    fn small() -> PhantomConfig {
        PhantomConfig { height: 32, width: 32, slices: 3, ..Default::default() }
    }

    #[test]
    fn single_subject_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = generate_dataset(1, 3, &cfg, dir.path()).unwrap();
        assert_eq!(m.subjects.len(), 1);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let s = ds.load("subject_0000").unwrap();
        let orig = generate_subject(m.subjects[0].seed, &cfg, "subject_0000").unwrap();
        assert_eq!(s.body_mask, orig.body_mask);
        assert_eq!(s.liver_mask, orig.liver_mask);
        for (a, b) in s.echoes.data().iter().zip(orig.echoes.data()) {
            assert_eq!(a.re, b.re as f32 as f64);
            assert_eq!(a.im, b.im as f32 as f64);
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small();
        generate_dataset(3, 11, &cfg, a.path()).unwrap();
        generate_dataset(3, 11, &cfg, b.path()).unwrap();
        for id in ["subject_0000", "subject_0001", "subject_0002"] {
            for f in ["echoes.dxt", "truth_ff.dxt", "liver_mask.dxt"] {
                let x = std::fs::read(a.path().join(id).join(f)).unwrap();
                let y = std::fs::read(b.path().join(id).join(f)).unwrap();
                assert_eq!(x, y, "{id}/{f}");
            }
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST)).unwrap(),
            std::fs::read(b.path().join(MANIFEST)).unwrap()
        );
    }

    #[test]
    fn zero_subjects_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_dataset(0, 1, &small(), dir.path()), Err(DatasetError::Empty)));
    }

    #[test]
    fn cohort_straddles_cutoff() {
        let subjects = generate_subjects(60, 7, &small()).unwrap();
        let above = subjects.iter().filter(|s| s.liver_ff > STEATOSIS_CUTOFF).count();
        let below = subjects.len() - above;
        assert!(above as f64 >= 0.15 * 60.0);
        assert!(below > 0);
    }
}
