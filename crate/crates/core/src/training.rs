//! Subject-level k-fold training of the U-Net against reference fat
//! fractions, one slice per gradient step.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::autodiff::Graph;
use crate::evaluation::{foreground_mask, liver_ff, EvalError, ForegroundMask};
use crate::io::{self, IoError};
use crate::phantom::{derive_seed, Subject};
use crate::reference::{separate, ReferenceConfig, ReferenceError, METHOD_LABEL};
use crate::signal::{normalize_input, to_channels, EchoSeries, EchoSubset, FatSpectrum, SignalError};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::unet::{build_unet, crop, forward, forward_graph, pad_input, UNetError, UNetParameters, UNetSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("k = {k} folds need at least {k} subjects, got {subjects}")]
    TooFewSubjects { k: usize, subjects: usize },
    #[error("fold {fold}: {which} slice list is empty")]
    NoSlices { fold: usize, which: &'static str },
    #[error("fold {fold}: validation subject {id} is also in the training set")]
    Leak { fold: usize, id: String },
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("diverged at epoch {epoch}, subject {subject} slice {slice}: {reason}")]
    Diverged { epoch: usize, subject: String, slice: usize, reason: String },
    #[error(transparent)]
    Network(#[from] UNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
    pub echoes: EchoSubset,
    /// Shuffle seed; epoch `e` shuffles with `derive_seed(seed, e)`.
    pub seed: u64,
    pub init_seed: u64,
    /// Loss-curve sampling: every n-th training and validation slice.
    pub train_curve_stride: usize,
    pub val_curve_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            adam: AdamConfig::default(),
            decay: 0.8727,
            echoes: EchoSubset::all(5),
            seed: 0,
            init_seed: 0,
            train_curve_stride: 8,
            val_curve_stride: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.train_curve_stride == 0 || self.val_curve_stride == 0 {
            return Err(TrainError::Config("curve strides must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `e` (from 0).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut lr = self.adam.lr;
        for _ in 0..epoch {
            lr *= self.decay;
        }
        lr
    }

    /// Network spec for this config's echo subset.
    pub fn network(&self, depth: usize, base_features: usize) -> UNetSpec {
        UNetSpec { depth, base_features, in_channels: 2 * self.echoes.count }
    }
}

/// Subject-level split: fold `index` validates on `validation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Seeded shuffle, then contiguous near-equal partition into `k` folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldPlan>, TrainError> {
    if k < 2 {
        return Err(TrainError::Config(format!("k = {k} must be >= 2")));
    }
    if ids.len() < k {
        return Err(TrainError::TooFewSubjects { k, subjects: ids.len() });
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let bounds: Vec<usize> = (0..=k).map(|i| i * n / k).collect();
    Ok((0..k)
        .map(|i| {
            let validation = order[bounds[i]..bounds[i + 1]].to_vec();
            let train = order.iter().filter(|id| !validation.contains(id)).cloned().collect();
            FoldPlan { k, index: i, train, validation }
        })
        .collect())
}

/// Indices of slices whose foreground covers at least 0.5% of the voxels.
pub fn exclude_empty_slices(masks: &[ForegroundMask]) -> Vec<usize> {
    masks
        .iter()
        .enumerate()
        .filter(|(_, m)| m.count() * 200 >= m.mask.len().max(1))
        .map(|(i, _)| i)
        .collect()
}

/// A subject made ready for training: normalized echoes, reference FF and
/// per-slice foreground masks.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub echoes: EchoSeries,
    /// Clamped reference FF, `[slice][y][x]`.
    pub reference_ff: Vec<f64>,
    pub masks: Vec<ForegroundMask>,
    /// Slices kept after empty-slice exclusion.
    pub kept: Vec<usize>,
    pub liver_mask: Vec<bool>,
    /// Ground-truth liver FF of the phantom.
    pub truth_liver_ff: f64,
}

impl PreparedSubject {
    pub fn from_subject(subject: &Subject, spectrum: &FatSpectrum, reference: &ReferenceConfig) -> Result<Self, TrainError> {
        let sep = separate(&subject.echoes, None, spectrum, reference)?;
        let (h, w) = (subject.echoes.height, subject.echoes.width);
        let masks: Vec<ForegroundMask> =
            (0..sep.slices).map(|z| foreground_mask(&sep.signal_sum(z), h, w)).collect();
        let kept = exclude_empty_slices(&masks);
        debug!("{}: {} of {} slices kept ({})", subject.id, kept.len(), masks.len(), METHOD_LABEL);
        Ok(PreparedSubject {
            id: subject.id.clone(),
            echoes: normalize_input(&subject.echoes),
            reference_ff: sep.ff,
            masks,
            kept,
            liver_mask: subject.liver_mask.clone(),
            truth_liver_ff: subject.liver_ff,
        })
    }

    fn plane(&self) -> usize {
        self.echoes.plane_len()
    }

    fn target<T: Scalar>(&self, slice: usize) -> Tensor<T> {
        let n = self.plane();
        let v = &self.reference_ff[slice * n..(slice + 1) * n];
        Tensor::from_fn(&[1, self.echoes.height, self.echoes.width], |i| T::from_f64(v[i]))
    }

    fn mask<T: Scalar>(&self, slice: usize) -> Tensor<T> {
        let m = &self.masks[slice].mask;
        Tensor::from_fn(&[1, self.echoes.height, self.echoes.width], |i| if m[i] { T::one() } else { T::zero() })
    }
}

/// All prepared subjects of a study.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<PreparedSubject>,
}

impl Cohort {
    pub fn prepare(subjects: &[Subject], spectrum: &FatSpectrum, reference: &ReferenceConfig) -> Result<Self, TrainError> {
        let subjects = subjects
            .iter()
            .map(|s| PreparedSubject::from_subject(s, spectrum, reference))
            .collect::<Result<_, _>>()?;
        Ok(Cohort { subjects })
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    fn index_of(&self, id: &str) -> Result<usize, TrainError> {
        self.subjects.iter().position(|s| s.id == id).ok_or_else(|| TrainError::UnknownSubject(id.to_string()))
    }

    /// Kept slices of the listed subjects, in list order then slice order.
    pub fn slices(&self, ids: &[String]) -> Result<Vec<SliceRef>, TrainError> {
        let mut out = Vec::new();
        for id in ids {
            let s = self.index_of(id)?;
            out.extend(self.subjects[s].kept.iter().map(|&z| SliceRef { subject: s, slice: z }));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRef {
    pub subject: usize,
    pub slice: usize,
}

/// Per-epoch per-foreground-voxel losses on the sampled slices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

impl LossCurve {
    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train.iter().zip(&self.validation).enumerate() {
            let _ = writeln!(out, "{e},{t:e},{v:e}");
        }
        out
    }
}

struct Sample<T: Scalar> {
    input: Tensor<T>,
    target: Tensor<T>,
    mask: Tensor<T>,
}

fn sample<T: Scalar>(cohort: &Cohort, r: SliceRef, subset: &EchoSubset, depth: usize) -> Result<Sample<T>, TrainError> {
    let s = &cohort.subjects[r.subject];
    let input = to_channels::<T>(&s.echoes, r.slice, subset)?;
    // background padding has zero mask, so the loss is unchanged
    let (input, _) = pad_input(&input, depth)?;
    let (target, _) = pad_input(&s.target::<T>(r.slice), depth)?;
    let (mask, _) = pad_input(&s.mask::<T>(r.slice), depth)?;
    Ok(Sample { input, target, mask })
}

/// Pooled `sum(mask (pred - target)^2) / sum(mask)` over `slices`, with
/// frozen parameters.
pub fn pooled_loss<T: Scalar>(
    params: &UNetParameters<T>,
    cohort: &Cohort,
    slices: &[SliceRef],
    subset: &EchoSubset,
) -> Result<f64, TrainError> {
    let (mut num, mut den) = (0.0, 0.0);
    for &r in slices {
        let smp = sample::<T>(cohort, r, subset, params.spec.depth)?;
        let out = forward(params, &smp.input)?;
        for ((p, t), m) in out.data().iter().zip(smp.target.data()).zip(smp.mask.data()) {
            let m = m.as_f64();
            let d = p.as_f64() - t.as_f64();
            num += m * d * d;
            den += m;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Every `stride`-th element, starting with the first.
fn strided(slices: &[SliceRef], stride: usize) -> Vec<SliceRef> {
    slices.iter().step_by(stride).copied().collect()
}

#[derive(Debug, Clone)]
pub struct FoldOutcome<T: Scalar> {
    pub fold: FoldPlan,
    pub params: UNetParameters<T>,
    pub curve: LossCurve,
    pub train_slices: usize,
    pub validation_slices: usize,
}

/// Train one fold from scratch.
pub fn train_fold<T: Scalar>(
    fold: &FoldPlan,
    spec: UNetSpec,
    cfg: &TrainConfig,
    cohort: &Cohort,
) -> Result<FoldOutcome<T>, TrainError> {
    cfg.validate()?;
    if spec.in_channels != 2 * cfg.echoes.count {
        return Err(TrainError::Config(format!(
            "network takes {} channels but echo subset {} gives {}",
            spec.in_channels,
            cfg.echoes,
            2 * cfg.echoes.count
        )));
    }
    if let Some(id) = fold.validation.iter().find(|id| fold.train.contains(id)) {
        return Err(TrainError::Leak { fold: fold.index, id: id.clone() });
    }
    let train = cohort.slices(&fold.train)?;
    let val = cohort.slices(&fold.validation)?;
    if train.is_empty() {
        return Err(TrainError::NoSlices { fold: fold.index, which: "training" });
    }
    if val.is_empty() {
        return Err(TrainError::NoSlices { fold: fold.index, which: "validation" });
    }
    let train_curve = strided(&train, cfg.train_curve_stride);
    let val_curve = strided(&val, cfg.val_curve_stride);

    let mut params = build_unet::<T>(spec, cfg.init_seed)?;
    let names: Vec<String> = params.names.clone();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = AdamState::new(cfg.adam, params.tensors.iter());
    let mut curve = LossCurve::default();
    let mut order = train.clone();

    for epoch in 0..cfg.epochs {
        adam.set_learning_rate(cfg.learning_rate(epoch));
        order.clone_from(&train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for &r in &order {
            let smp = sample::<T>(cohort, r, &cfg.echoes, spec.depth)?;
            let diverged = |reason: String| TrainError::Diverged {
                epoch,
                subject: cohort.subjects[r.subject].id.clone(),
                slice: r.slice,
                reason,
            };
            let mut g = Graph::new();
            let ids = params.leaves(&mut g);
            let x = g.leaf(smp.input);
            let trace = forward_graph(&mut g, &spec, &ids, x)?;
            let loss = g.masked_mse(trace.output, &smp.target, &smp.mask)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(diverged(format!("loss {lv}")));
            }
            epoch_loss += lv;
            let grads = g.backward(loss)?;
            let zeros: Vec<Tensor<T>> =
                ids.iter().filter(|&&id| grads.get(id).is_none()).map(|&id| Tensor::zeros(g.value(id).shape())).collect();
            let mut zi = zeros.iter();
            let grad_refs: Vec<&Tensor<T>> =
                ids.iter().map(|&id| grads.get(id).unwrap_or_else(|| zi.next().expect("zero gradient"))).collect();
            let mut prefs: Vec<&mut Tensor<T>> = params.tensors.iter_mut().collect();
            adam_step(&mut prefs, &grad_refs, &name_refs, &mut adam).map_err(|e| diverged(e.to_string()))?;
        }
        let tl = pooled_loss(&params, cohort, &train_curve, &cfg.echoes)?;
        let vl = pooled_loss(&params, cohort, &val_curve, &cfg.echoes)?;
        if !(tl.is_finite() && vl.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                subject: "<loss curve>".into(),
                slice: 0,
                reason: format!("train {tl}, validation {vl}"),
            });
        }
        info!(
            "fold {} echoes {} epoch {epoch}: lr {:.3e} step loss {:.5} curve train {tl:.5} val {vl:.5}",
            fold.index,
            cfg.echoes,
            cfg.learning_rate(epoch),
            epoch_loss / order.len() as f64
        );
        curve.train.push(tl);
        curve.validation.push(vl);
    }
    Ok(FoldOutcome { fold: fold.clone(), params, curve, train_slices: train.len(), validation_slices: val.len() })
}

/// Clamped predictions for the kept slices of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub id: String,
    pub fold: usize,
    pub slices: Vec<usize>,
    /// One `H*W` plane per entry of `slices`.
    pub ff: Vec<Vec<f64>>,
}

impl SubjectPrediction {
    /// Median predicted FF over the liver voxels of the predicted slices.
    pub fn liver_ff(&self, subject: &PreparedSubject) -> Result<f64, EvalError> {
        let n = subject.plane();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for (&z, plane) in self.slices.iter().zip(&self.ff) {
            values.extend_from_slice(plane);
            mask.extend_from_slice(&subject.liver_mask[z * n..(z + 1) * n]);
        }
        liver_ff(&values, &mask)
    }
}

pub fn predict_subject<T: Scalar>(
    params: &UNetParameters<T>,
    subject: &PreparedSubject,
    subset: &EchoSubset,
    fold: usize,
) -> Result<SubjectPrediction, TrainError> {
    let mut ff = Vec::with_capacity(subject.kept.len());
    for &z in &subject.kept {
        let x = to_channels::<T>(&subject.echoes, z, subset)?;
        let (padded, c) = pad_input(&x, params.spec.depth)?;
        let out = crop(&forward(params, &padded)?, c)?;
        ff.push(out.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect());
    }
    Ok(SubjectPrediction { id: subject.id.clone(), fold, slices: subject.kept.clone(), ff })
}

#[derive(Debug, Clone)]
pub struct CrossvalResult<T: Scalar> {
    pub folds: Vec<FoldOutcome<T>>,
    /// Validation-time predictions, one entry per validated subject.
    pub predictions: Vec<SubjectPrediction>,
}

/// Train the listed folds (all when `only` is `None`) and pool validation
/// predictions.
pub fn run_crossval<T: Scalar>(
    cohort: &Cohort,
    spec: UNetSpec,
    cfg: &TrainConfig,
    k: usize,
    split_seed: u64,
    only: Option<&[usize]>,
) -> Result<CrossvalResult<T>, TrainError> {
    let plans = kfold_split(&cohort.ids(), k, split_seed)?;
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    for plan in &plans {
        if only.is_some_and(|o| !o.contains(&plan.index)) {
            continue;
        }
        let outcome = train_fold::<T>(plan, spec, cfg, cohort)?;
        for id in &plan.validation {
            let s = &cohort.subjects[cohort.index_of(id)?];
            predictions.push(predict_subject(&outcome.params, s, &cfg.echoes, plan.index)?);
        }
        folds.push(outcome);
    }
    Ok(CrossvalResult { folds, predictions })
}

/// Write `checkpoint/` and `loss.csv` for a trained fold under `dir`.
pub fn save_fold<T: Scalar>(dir: &Path, outcome: &FoldOutcome<T>) -> Result<(), TrainError> {
    outcome.params.save(&dir.join("checkpoint"))?;
    io::write_atomic(&dir.join("loss.csv"), outcome.curve.to_csv().as_bytes())?;
    io::write_json(&dir.join("fold.json"), &outcome.fold)?;
    Ok(())
}
