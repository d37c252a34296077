//! Validation predictions as written by `train` and read by `eval`.
//!
//! ```text
//! <dir>/<subject id>/prediction.json  id, fold, echoes, predicted slices
//! <dir>/<subject id>/ff.dxt           f64 [predicted slices, H, W]
//! <dir>/<subject id>/reference_ff.dxt f64 [slices, H, W]
//! <dir>/<subject id>/foreground.dxt   f32 [slices, H, W]  0/1
//! ```

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dxsep::io::{read_json, read_tensor, write_json, write_tensor};
use dxsep::training::{PreparedSubject, SubjectPrediction};
use dxsep::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionInfo {
    pub id: String,
    pub fold: usize,
    pub echoes: String,
    pub slices: Vec<usize>,
}

/// Everything `eval` needs about one subject.
#[derive(Debug, Clone)]
pub struct StoredPrediction {
    pub info: PredictionInfo,
    pub height: usize,
    pub width: usize,
    /// One plane per entry of `info.slices`.
    pub ff: Vec<Vec<f64>>,
    pub reference_ff: Vec<f64>,
    pub foreground: Vec<bool>,
}

pub fn write(dir: &Path, p: &SubjectPrediction, subject: &PreparedSubject, echoes: &str) -> anyhow::Result<()> {
    let d = dir.join(&p.id);
    let (s, h, w) = (subject.echoes.slices, subject.echoes.height, subject.echoes.width);
    let info = PredictionInfo { id: p.id.clone(), fold: p.fold, echoes: echoes.to_string(), slices: p.slices.clone() };
    let ff = Tensor::from_vec(vec![p.slices.len(), h, w], p.ff.concat())?;
    let reference = Tensor::from_vec(vec![s, h, w], subject.reference_ff.clone())?;
    let fg: Vec<f32> = subject.masks.iter().flat_map(|m| m.mask.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    let fg = Tensor::from_vec(vec![s, h, w], fg)?;
    write_tensor(&d.join("ff.dxt"), &ff)?;
    write_tensor(&d.join("reference_ff.dxt"), &reference)?;
    write_tensor(&d.join("foreground.dxt"), &fg)?;
    // the descriptor goes last: its presence marks a complete entry
    write_json(&d.join("prediction.json"), &info)?;
    Ok(())
}

pub fn read(dir: &Path) -> anyhow::Result<StoredPrediction> {
    let info: PredictionInfo = read_json(&dir.join("prediction.json"))?;
    let ff = read_tensor(&dir.join("ff.dxt"))?.into_f64();
    let reference = read_tensor(&dir.join("reference_ff.dxt"))?.into_f64();
    let fg = read_tensor(&dir.join("foreground.dxt"))?.into_f64();
    let &[k, h, w] = ff.shape() else { bail!("{}: ff.dxt is not [slices, H, W]", dir.display()) };
    let &[s, rh, rw] = reference.shape() else { bail!("{}: reference_ff.dxt is not [slices, H, W]", dir.display()) };
    if k != info.slices.len() || (rh, rw) != (h, w) || fg.shape() != reference.shape() {
        bail!("{}: tensor shapes disagree with each other or with prediction.json", dir.display());
    }
    if let Some(&z) = info.slices.iter().find(|&&z| z >= s) {
        bail!("{}: predicted slice {z} outside {s} slices", dir.display());
    }
    let ff = ff.data().chunks(h * w).map(<[f64]>::to_vec).collect();
    Ok(StoredPrediction {
        info,
        height: h,
        width: w,
        ff,
        reference_ff: reference.into_data(),
        foreground: fg.data().iter().map(|&v| v > 0.5).collect(),
    })
}

/// Every subject directory under `dir`, sorted by id.
pub fn read_all(dir: &Path) -> anyhow::Result<Vec<StoredPrediction>> {
    let mut dirs = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("{}", dir.display()))? {
        let p = e?.path();
        if p.join("prediction.json").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("{}: no predictions found", dir.display());
    }
    dirs.iter().map(|d| read(d)).collect()
}
