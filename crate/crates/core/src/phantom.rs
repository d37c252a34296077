//! Synthetic multi-slice subjects with exactly known fat fraction, field,
//! R2* and organ masks.
//!
//! Geometry is procedural: an elliptical body with a subcutaneous fat ring,
//! an elliptical liver, two marrow spots and muscle elsewhere. Every subject
//! is a pure function of `(seed, config)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{
    synthesize_echo, AcquisitionConfig, EchoSeries, FatFractionMap, FatSpectrum, SignalError, VoxelModel,
};

/// Liver fat fraction separating normal from fatty livers.
pub const STEATOSIS_CUTOFF: f64 = 0.0556;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldShape {
    /// Random low-order polynomial in x, y and z.
    Polynomial,
    /// Linear ramp along x.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub subcutaneous_ff: [f64; 2],
    pub muscle_ff: [f64; 2],
    pub liver_ff: [f64; 2],
    pub marrow_ff: [f64; 2],
    /// Share of subjects whose liver is forced above the steatosis cutoff.
    pub fatty_liver_share: f64,
    /// Peak-to-peak field variation over the volume, in periods of the
    /// odd-echo ambiguity `2 pi / (t_3 - t_1)`.
    pub field_span_periods: [f64; 2],
    pub field_shape: FieldShape,
    /// R2* range in 1/s.
    pub r2star: [f64; 2],
    /// Bound on the imaginary part of the bipolar term, rad.
    pub theta_max: f64,
    /// `None` gives noiseless data; written as `"none"` in config files.
    #[serde(with = "snr_format")]
    pub snr: Option<f64>,
    #[serde(skip)]
    pub acquisition: AcquisitionConfig,
    #[serde(skip)]
    pub spectrum: FatSpectrum,
}

mod snr_format {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("snr must be a number or \"none\", got \"{w}\""))),
        }
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            slices: 8,
            subcutaneous_ff: [0.85, 0.95],
            muscle_ff: [0.02, 0.08],
            liver_ff: [0.0, 0.30],
            marrow_ff: [0.70, 0.95],
            fatty_liver_share: 0.2,
            field_span_periods: [0.0, 1.5],
            field_shape: FieldShape::Polynomial,
            r2star: [20.0, 100.0],
            theta_max: 0.2,
            snr: Some(50.0),
            acquisition: AcquisitionConfig::default(),
            spectrum: FatSpectrum::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<(), PhantomError> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(PhantomError::Config(format!("{name} = {r:?} must satisfy {lo} <= min <= max <= {hi}")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(PhantomError::Config(format!(
                "image size {}x{} must be a nonzero multiple of 4",
                self.height, self.width
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(PhantomError::Config("image size must be at least 16x16".into()));
        }
        if self.slices == 0 {
            return Err(PhantomError::Config("slices must be >= 1".into()));
        }
        for (name, r) in [
            ("subcutaneous_ff", self.subcutaneous_ff),
            ("muscle_ff", self.muscle_ff),
            ("liver_ff", self.liver_ff),
            ("marrow_ff", self.marrow_ff),
        ] {
            check_range(name, r, 0.0, 1.0)?;
        }
        check_range("fatty_liver_share", [self.fatty_liver_share; 2], 0.0, 1.0)?;
        check_range("field_span_periods", self.field_span_periods, 0.0, 10.0)?;
        check_range("r2star", self.r2star, 0.0, f64::MAX)?;
        if !(self.theta_max >= 0.0 && self.theta_max.is_finite()) {
            return Err(PhantomError::Config("theta_max must be >= 0".into()));
        }
        if self.fatty_liver_share > 0.0 && self.liver_ff[1] <= STEATOSIS_CUTOFF {
            return Err(PhantomError::Config(
                "fatty_liver_share > 0 needs a liver_ff range reaching above the cutoff".into(),
            ));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return Err(PhantomError::Config(format!("snr {snr} must be positive")));
            }
        }
        self.acquisition.validate()?;
        self.spectrum.validate()?;
        Ok(())
    }

    /// Period of the odd-echo field ambiguity in rad/s.
    pub fn field_period(&self) -> f64 {
        ambiguity_period(&self.acquisition)
    }
}

/// `2 pi / dTE_eff` where `dTE_eff` is the spacing of the odd echoes (or of
/// all echoes when fewer than two odd echoes exist).
pub fn ambiguity_period(acq: &AcquisitionConfig) -> f64 {
    let t = &acq.echo_times;
    let spacing = if t.len() >= 3 { t[2] - t[0] } else if t.len() == 2 { t[1] - t[0] } else { t[0] };
    2.0 * PI / spacing
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Air,
    Subcutaneous,
    Muscle,
    Liver,
    Marrow,
}

/// One synthetic subject; volumes are `[slice][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub seed: u64,
    pub echoes: EchoSeries,
    pub truth_ff: Vec<f64>,
    pub truth_field: Vec<f64>,
    pub truth_r2s: Vec<f64>,
    pub body_mask: Vec<bool>,
    pub liver_mask: Vec<bool>,
    pub liver_ff: f64,
}

impl Subject {
    pub fn plane_len(&self) -> usize {
        self.echoes.plane_len()
    }

    pub fn slice_range(&self, slice: usize) -> std::ops::Range<usize> {
        let n = self.plane_len();
        slice * n..(slice + 1) * n
    }

    pub fn truth_ff_map(&self, slice: usize) -> FatFractionMap {
        FatFractionMap {
            height: self.echoes.height,
            width: self.echoes.width,
            values: self.truth_ff[self.slice_range(slice)].to_vec(),
            mask: Some(self.body_mask[self.slice_range(slice)].to_vec()),
        }
    }
}

/// Counter-based seed for subject `index` of a dataset.
pub fn subject_seed(master_seed: u64, index: u64) -> u64 {
    derive_seed(master_seed, index)
}

/// Splitmix-style derivation of an independent stream seed from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index.wrapping_add(1)))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.ax > 0.0
            && self.ay > 0.0
            && ((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2) <= 1.0
    }
}

struct TissueParams {
    ff: f64,
    density: f64,
    r2star: f64,
}

/// Draw one subject. `id` is only a label.
pub fn generate_subject(seed: u64, cfg: &PhantomConfig, id: &str) -> Result<Subject, PhantomError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, s) = (cfg.height, cfg.width, cfg.slices);
    let (hf, wf) = (h as f64, w as f64);

    // organ geometry
    let cx = wf / 2.0 + rng.random_range(-2.0..2.0);
    let cy = hf / 2.0 + rng.random_range(-2.0..2.0);
    let body_ax = wf * rng.random_range(0.38..0.45);
    let body_ay = hf * rng.random_range(0.28..0.36);
    let ring = wf * rng.random_range(0.05..0.09);
    let liver_dx = rng.random_range(0.30..0.45);
    let liver_dy = rng.random_range(-0.15..0.10);
    let liver_sx = rng.random_range(0.35..0.50);
    let liver_sy = rng.random_range(0.45..0.65);
    let liver_z = rng.random_range(-0.3..0.3);
    let liver_half = rng.random_range(0.6..0.9);
    let marrow_r = rng.random_range(2.0..3.5);
    let marrow_off = rng.random_range(0.25..0.40);

    // tissue properties
    let liver_fatty = rng.random::<f64>() < cfg.fatty_liver_share;
    let mut liver_ff = uniform(&mut rng, cfg.liver_ff);
    if liver_fatty && liver_ff <= STEATOSIS_CUTOFF {
        liver_ff = uniform(&mut rng, [STEATOSIS_CUTOFF.max(cfg.liver_ff[0]), cfg.liver_ff[1]]);
        if liver_ff <= STEATOSIS_CUTOFF {
            liver_ff = cfg.liver_ff[1];
        }
    }
    let tissue = |ff_range: [f64; 2], density: f64, rng: &mut ChaCha8Rng| TissueParams {
        ff: uniform(rng, ff_range),
        density: density * rng.random_range(0.9..1.1),
        r2star: uniform(rng, cfg.r2star),
    };
    let subcutaneous = tissue(cfg.subcutaneous_ff, 1.0, &mut rng);
    let muscle = tissue(cfg.muscle_ff, 0.55, &mut rng);
    let mut liver = tissue(cfg.liver_ff, 0.7, &mut rng);
    liver.ff = liver_ff;
    let marrow = tissue(cfg.marrow_ff, 0.85, &mut rng);
    let gain = rng.random_range(100.0..1000.0);

    // field, phase and bipolar term
    let period = cfg.field_period();
    let span = uniform(&mut rng, cfg.field_span_periods);
    let offset = rng.random_range(-0.25..0.25);
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let phase0 = rng.random_range(-PI..PI);
    let phase_slope = rng.random_range(-0.5..0.5);
    let theta = Complex64::new(0.0, if cfg.theta_max > 0.0 { rng.random_range(-cfg.theta_max..cfg.theta_max) } else { 0.0 });
    let noise_seed = rng.random::<u64>();

    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let field_shape = |x: usize, y: usize, z: usize| -> f64 {
        let (xn, yn, zn) = (coord(x, w), coord(y, h), coord(z, s));
        match cfg.field_shape {
            FieldShape::Ramp => xn,
            FieldShape::Polynomial => {
                coeffs[0] * xn
                    + coeffs[1] * yn
                    + coeffs[2] * xn * xn
                    + coeffs[3] * yn * yn
                    + coeffs[4] * xn * yn
                    + coeffs[5] * zn
            }
        }
    };
    let n_vox = s * h * w;
    let mut raw_field = Vec::with_capacity(n_vox);
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                raw_field.push(field_shape(x, y, z));
            }
        }
    }
    // span is the peak-to-peak variation, offset the volume mean (both in periods)
    let (fmin, fmax) = raw_field.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let frange = if fmax > fmin { fmax - fmin } else { 1.0 };
    let fmean = raw_field.iter().sum::<f64>() / n_vox as f64;
    let truth_field: Vec<f64> = raw_field
        .iter()
        .map(|&v| period * (offset + span * (v - fmean) / frange))
        .collect();

    let mut labels = Vec::with_capacity(n_vox);
    for z in 0..s {
        let zn = coord(z, s);
        let taper = 1.0 - 0.1 * zn * zn;
        let body = Ellipse { cx, cy, ax: body_ax * taper, ay: body_ay * taper };
        let inner = Ellipse { cx, cy, ax: body.ax - ring, ay: body.ay - ring };
        let lz = (zn - liver_z) / liver_half;
        let lscale = if lz.abs() < 1.0 { (1.0 - lz * lz).sqrt() } else { 0.0 };
        let liver_e = Ellipse {
            cx: cx - liver_dx * inner.ax,
            cy: cy + liver_dy * inner.ay,
            ax: liver_sx * inner.ax * lscale,
            ay: liver_sy * inner.ay * lscale,
        };
        let spine_y = cy + (1.0 - marrow_off) * inner.ay;
        let spots = [
            Ellipse { cx, cy: spine_y - marrow_r, ax: marrow_r, ay: marrow_r },
            Ellipse { cx: cx + marrow_off * inner.ax, cy: spine_y - 2.0 * marrow_r, ax: marrow_r * 0.8, ay: marrow_r * 0.8 },
        ];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if !body.contains(px, py) {
                    Tissue::Air
                } else if !inner.contains(px, py) {
                    Tissue::Subcutaneous
                } else if liver_e.contains(px, py) {
                    Tissue::Liver
                } else if spots.iter().any(|e| e.contains(px, py)) {
                    Tissue::Marrow
                } else {
                    Tissue::Muscle
                };
                labels.push(t);
            }
        }
    }

    let acq = &cfg.acquisition;
    let mut echoes = EchoSeries::zeros(s, h, w, acq.clone());
    let mut truth_ff = vec![0.0; n_vox];
    let mut truth_r2s = vec![0.0; n_vox];
    let plane = h * w;
    for (i, &t) in labels.iter().enumerate() {
        let params = match t {
            Tissue::Air => continue,
            Tissue::Subcutaneous => &subcutaneous,
            Tissue::Muscle => &muscle,
            Tissue::Liver => &liver,
            Tissue::Marrow => &marrow,
        };
        let (z, p) = (i / plane, i % plane);
        let yn = coord(p / w, h);
        let v = VoxelModel {
            water: gain * params.density * (1.0 - params.ff),
            fat: gain * params.density * params.ff,
            phase: phase0 + phase_slope * yn,
            off_resonance: truth_field[i],
            r2star: params.r2star,
            theta,
        };
        truth_ff[i] = params.ff;
        truth_r2s[i] = params.r2star;
        for n in 1..=acq.echo_count() {
            echoes.plane_mut(z, n)[p] = synthesize_echo(&v, n, &cfg.spectrum, acq);
        }
    }

    if let Some(snr) = cfg.snr {
        echoes = add_noise(&echoes, Some(snr), noise_seed);
    }

    Ok(Subject {
        id: id.to_string(),
        seed,
        echoes,
        truth_ff,
        truth_field,
        truth_r2s,
        body_mask: labels.iter().map(|&t| t != Tissue::Air).collect(),
        liver_mask: labels.iter().map(|&t| t == Tissue::Liver).collect(),
        liver_ff,
    })
}

/// Add i.i.d. complex Gaussian noise with per-component standard deviation
/// `mean |S| / snr`, the mean taken over samples with nonzero signal.
/// `snr = None` returns the input unchanged.
pub fn add_noise(echoes: &EchoSeries, snr: Option<f64>, seed: u64) -> EchoSeries {
    let Some(snr) = snr else { return echoes.clone() };
    let (sum, count) = echoes
        .data()
        .iter()
        .filter(|c| c.norm() > 0.0)
        .fold((0.0, 0usize), |(s, n), c| (s + c.norm(), n + 1));
    let mut out = echoes.clone();
    if count == 0 {
        return out;
    }
    let sigma = sum / count as f64 / snr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in out.data_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *c += Complex64::new(sigma * re, sigma * im);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::fat_modulation;

    fn noiseless() -> PhantomConfig {
        PhantomConfig { snr: None, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_subject(42, &cfg, "a").unwrap();
        let b = generate_subject(42, &cfg, "a").unwrap();
        assert_eq!(a, b);
        let c = generate_subject(43, &cfg, "a").unwrap();
        assert_ne!(a.echoes, c.echoes);
    }

    #[test]
    fn first_echo_matches_forward_model() {
        let cfg = PhantomConfig { r2star: [0.0, 0.0], theta_max: 0.0, ..noiseless() };
        let subj = generate_subject(5, &cfg, "s").unwrap();
        let a1 = fat_modulation(&cfg.spectrum, cfg.acquisition.echo_time(1), &cfg.acquisition);
        let plane = subj.plane_len();
        let mut checked = 0;
        let mut max_err: f64 = 0.0;
        for z in 0..cfg.slices {
            let s1 = subj.echoes.plane(z, 1);
            for p in 0..plane {
                let i = z * plane + p;
                if !subj.body_mask[i] {
                    assert_eq!(s1[p], Complex64::new(0.0, 0.0));
                    continue;
                }
                let total = s1[p].norm() / (1.0 + subj.truth_ff[i] * (a1 - 1.0)).norm();
                let wv = total * (1.0 - subj.truth_ff[i]);
                let fv = total * subj.truth_ff[i];
                let expect = (wv + a1 * fv).norm();
                max_err = max_err.max((s1[p].norm() - expect).abs() / expect.max(1.0));
                checked += 1;
            }
        }
        assert!(checked > 1000);
        assert!(max_err < 1e-9, "{max_err}");
    }

    #[test]
    fn liver_is_piecewise_constant_and_inside_body() {
        for seed in 0..10 {
            let subj = generate_subject(seed, &PhantomConfig::default(), "s").unwrap();
            let mut liver_voxels = 0;
            for i in 0..subj.truth_ff.len() {
                if subj.liver_mask[i] {
                    assert!(subj.body_mask[i]);
                    assert_eq!(subj.truth_ff[i], subj.liver_ff);
                    liver_voxels += 1;
                }
                assert!((0.0..=1.0).contains(&subj.truth_ff[i]));
            }
            assert!(liver_voxels > 100, "seed {seed}: {liver_voxels} liver voxels");
        }
    }

    #[test]
    fn field_is_smooth_within_sampling_limit() {
        let cfg = PhantomConfig { field_span_periods: [1.5, 1.5], ..Default::default() };
        let subj = generate_subject(9, &cfg, "s").unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let limit = PI / (cfg.acquisition.echo_times[2] - cfg.acquisition.echo_times[0]);
        let f = &subj.truth_field;
        let (fmin, fmax) = f.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(((fmax - fmin) / cfg.field_period() - 1.5).abs() < 1e-9);
        for z in 0..cfg.slices {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if x + 1 < w {
                        assert!((f[i + 1] - f[i]).abs() < limit);
                    }
                    if y + 1 < h {
                        assert!((f[i + w] - f[i]).abs() < limit);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_size = PhantomConfig { height: 30, ..Default::default() };
        assert!(matches!(generate_subject(1, &bad_size, "s"), Err(PhantomError::Config(_))));
        let bad_ff = PhantomConfig { liver_ff: [0.2, 1.3], ..Default::default() };
        assert!(generate_subject(1, &bad_ff, "s").is_err());
        let bad_r2 = PhantomConfig { r2star: [-1.0, 10.0], ..Default::default() };
        assert!(generate_subject(1, &bad_r2, "s").is_err());
        let bad_snr = PhantomConfig { snr: Some(0.0), ..Default::default() };
        assert!(generate_subject(1, &bad_snr, "s").is_err());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let acq = AcquisitionConfig { echo_times: vec![1e-3], ..Default::default() };
        let n = 400 * 300;
        let data = vec![Complex64::new(3.0, 4.0); n];
        let clean = EchoSeries::new(1, 400, 300, acq, data).unwrap();
        assert_eq!(add_noise(&clean, None, 1), clean);
        let noisy = add_noise(&clean, Some(25.0), 7);
        assert_eq!(noisy, add_noise(&clean, Some(25.0), 7));
        let target = 5.0 / 25.0;
        let (mut s2, mut k) = (0.0, 0usize);
        for (a, b) in noisy.data().iter().zip(clean.data()) {
            let d = a - b;
            s2 += d.re * d.re + d.im * d.im;
            k += 2;
        }
        let sigma = (s2 / k as f64).sqrt();
        assert!((sigma / target - 1.0).abs() < 0.03, "{sigma} vs {target}");
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| subject_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(subject_seed(7, 0), subject_seed(8, 0));
    }
}
