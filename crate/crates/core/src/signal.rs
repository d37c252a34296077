//! Multi-peak bipolar gradient-echo signal model and the water/fat maps it
//! implies for a known fat fraction.
//!
//! Echo `n` (1-based) at time `t_n` carries
//!
//! ```text
//! S_n = (W + a_n F) exp(i w0 + (i w - R2*) t_n + (-1)^n theta)
//! a_n = sum_m alpha_m exp(i gamma B0 delta_m t_n)
//! ```
//!
//! with chemical shifts `delta_m` stored in ppm.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const PROTON_GAMMA: f64 = 2.0 * PI * 42.577478518e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid acquisition: {0}")]
    Acquisition(String),
    #[error("invalid fat spectrum: {0}")]
    Spectrum(String),
    #[error("invalid echo subset: {0}")]
    Subset(String),
    #[error("echo series layout: {0}")]
    Layout(String),
    #[error("non-finite fat fraction at voxel {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    /// Static field strength in tesla.
    pub field_strength: f64,
    /// rad s^-1 T^-1.
    pub gyromagnetic_ratio: f64,
    /// Echo times in seconds, strictly increasing.
    pub echo_times: Vec<f64>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig::uniform(1.5, 1.37e-3, 0.95e-3, 5)
    }
}

impl AcquisitionConfig {
    pub fn uniform(field_strength: f64, first_echo: f64, spacing: f64, echoes: usize) -> Self {
        AcquisitionConfig {
            field_strength,
            gyromagnetic_ratio: PROTON_GAMMA,
            echo_times: (0..echoes).map(|k| first_echo + k as f64 * spacing).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.echo_times.is_empty() {
            return Err(SignalError::Acquisition("no echo times".into()));
        }
        if !(self.field_strength > 0.0 && self.field_strength.is_finite()) {
            return Err(SignalError::Acquisition(format!(
                "field strength {} must be positive",
                self.field_strength
            )));
        }
        if !(self.gyromagnetic_ratio.is_finite() && self.gyromagnetic_ratio != 0.0) {
            return Err(SignalError::Acquisition("gyromagnetic ratio must be finite and nonzero".into()));
        }
        if self.echo_times[0] <= 0.0 {
            return Err(SignalError::Acquisition("echo times must be positive".into()));
        }
        if self.echo_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SignalError::Acquisition("echo times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn echo_count(&self) -> usize {
        self.echo_times.len()
    }

    /// Echo time of 1-based echo `n`.
    pub fn echo_time(&self, n: usize) -> f64 {
        self.echo_times[n - 1]
    }

    /// `(-1)^n` for 1-based echo `n`.
    pub fn polarity(n: usize) -> f64 {
        if n.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Chemical shift in rad/s for a shift in ppm.
    pub fn shift_to_angular(&self, ppm: f64) -> f64 {
        self.gyromagnetic_ratio * self.field_strength * ppm * 1e-6
    }

    /// Spacing between consecutive echoes of `indices` when it is uniform.
    pub fn uniform_spacing(&self, indices: &[usize]) -> Option<f64> {
        let times: Vec<f64> = indices.iter().map(|&n| self.echo_time(n)).collect();
        let d = times.get(1)? - times[0];
        let uniform = times.windows(2).all(|w| ((w[1] - w[0]) - d).abs() <= 1e-12 * d.abs().max(1e-3));
        uniform.then_some(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FatPeak {
    pub amplitude: f64,
    pub shift_ppm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FatSpectrum {
    pub peaks: Vec<FatPeak>,
}

impl Default for FatSpectrum {
    /// Six-peak liver fat model.
    fn default() -> Self {
        let peaks = [
            (0.088, -3.80),
            (0.700, -3.40),
            (0.120, -2.60),
            (0.006, -1.95),
            (0.039, -0.50),
            (0.047, 0.60),
        ]
        .into_iter()
        .map(|(amplitude, shift_ppm)| FatPeak { amplitude, shift_ppm })
        .collect();
        FatSpectrum { peaks }
    }
}

impl FatSpectrum {
    pub fn single_peak(shift_ppm: f64) -> Self {
        FatSpectrum { peaks: vec![FatPeak { amplitude: 1.0, shift_ppm }] }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.peaks.is_empty() {
            return Err(SignalError::Spectrum("no peaks".into()));
        }
        if let Some(p) = self.peaks.iter().find(|p| !(p.amplitude >= 0.0) || !p.shift_ppm.is_finite()) {
            return Err(SignalError::Spectrum(format!("invalid peak {p:?}")));
        }
        let total: f64 = self.peaks.iter().map(|p| p.amplitude).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SignalError::Spectrum(format!("amplitudes sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Complex fat modulation `a(t)`.
pub fn fat_modulation(spectrum: &FatSpectrum, t: f64, acq: &AcquisitionConfig) -> Complex64 {
    spectrum
        .peaks
        .iter()
        .map(|p| p.amplitude * Complex64::from_polar(1.0, acq.shift_to_angular(p.shift_ppm) * t))
        .sum()
}

/// `a_n` for every echo of the acquisition.
pub fn fat_modulations(spectrum: &FatSpectrum, acq: &AcquisitionConfig) -> Vec<Complex64> {
    acq.echo_times.iter().map(|&t| fat_modulation(spectrum, t, acq)).collect()
}

/// Ground-truth parameters for one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoxelModel {
    pub water: f64,
    pub fat: f64,
    /// Initial phase in rad.
    pub phase: f64,
    /// Off-resonance in rad/s.
    pub off_resonance: f64,
    /// R2* in 1/s.
    pub r2star: f64,
    /// Polarity-dependent amplitude/phase term.
    pub theta: Complex64,
}

impl VoxelModel {
    pub fn fat_fraction(&self) -> f64 {
        let total = self.water + self.fat;
        if total > 0.0 {
            self.fat / total
        } else {
            0.0
        }
    }
}

/// Signal of 1-based echo `n`.
pub fn synthesize_echo(
    v: &VoxelModel,
    n: usize,
    spectrum: &FatSpectrum,
    acq: &AcquisitionConfig,
) -> Complex64 {
    let t = acq.echo_time(n);
    let a = fat_modulation(spectrum, t, acq);
    let exponent = Complex64::new(-v.r2star * t, v.phase + v.off_resonance * t)
        + AcquisitionConfig::polarity(n) * v.theta;
    (v.water + a * v.fat) * exponent.exp()
}

/// Complex echo images `[slice][echo][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSeries {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub acquisition: AcquisitionConfig,
    /// Divisor already applied to the samples (1.0 when raw).
    pub scale: f64,
    data: Vec<Complex64>,
}

impl EchoSeries {
    pub fn new(
        slices: usize,
        height: usize,
        width: usize,
        acquisition: AcquisitionConfig,
        data: Vec<Complex64>,
    ) -> Result<Self, SignalError> {
        let expected = slices * acquisition.echo_count() * height * width;
        if data.len() != expected {
            return Err(SignalError::Layout(format!(
                "expected {expected} samples for {slices} slices x {} echoes x {height} x {width}, got {}",
                acquisition.echo_count(),
                data.len()
            )));
        }
        Ok(EchoSeries { slices, height, width, acquisition, scale: 1.0, data })
    }

    pub fn zeros(slices: usize, height: usize, width: usize, acquisition: AcquisitionConfig) -> Self {
        let n = slices * acquisition.echo_count() * height * width;
        EchoSeries { slices, height, width, acquisition, scale: 1.0, data: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn echoes(&self) -> usize {
        self.acquisition.echo_count()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    fn plane_offset(&self, slice: usize, echo: usize) -> usize {
        (slice * self.echoes() + echo - 1) * self.plane_len()
    }

    /// Image of 1-based `echo` in `slice`.
    pub fn plane(&self, slice: usize, echo: usize) -> &[Complex64] {
        let o = self.plane_offset(slice, echo);
        &self.data[o..o + self.plane_len()]
    }

    pub fn plane_mut(&mut self, slice: usize, echo: usize) -> &mut [Complex64] {
        let o = self.plane_offset(slice, echo);
        let n = self.plane_len();
        &mut self.data[o..o + n]
    }

    /// All echoes of one voxel; `pixel` is `y * width + x`.
    pub fn voxel(&self, slice: usize, pixel: usize) -> Vec<Complex64> {
        (1..=self.echoes()).map(|e| self.plane(slice, e)[pixel]).collect()
    }

    /// Largest absolute real or imaginary component over the whole series.
    pub fn max_abs_component(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, c| m.max(c.re.abs()).max(c.im.abs()))
    }
}

/// Fat-fraction image of one slice, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FatFractionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl FatFractionMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        FatFractionMap { height, width, values: vec![value; height * width], mask: None }
    }
}

/// Clamp raw fat fractions to `[0, 1]`.
pub fn clamp_ff(raw: &[f64], height: usize, width: usize) -> Result<FatFractionMap, SignalError> {
    if raw.len() != height * width {
        return Err(SignalError::Layout(format!("{} values for a {height}x{width} map", raw.len())));
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite { index });
    }
    Ok(FatFractionMap { height, width, values: raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(), mask: None })
}

/// Water and fat magnitudes implied by a fat-fraction map.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterFatMaps {
    pub water: Vec<f64>,
    pub fat: Vec<f64>,
    /// Voxels where some echo had a vanishing denominator; they are set to 0.
    pub flagged: usize,
}

/// Per-echo water and fat magnitudes of one voxel for a given fat fraction,
/// or `None` when `|1 + FF (a_n - 1)|` vanishes.
pub fn water_fat_per_echo(sample: Complex64, a: Complex64, ff: f64) -> Option<(f64, f64)> {
    let denom = 1.0 + ff * (a - 1.0);
    if denom.norm() < 1e-9 {
        return None;
    }
    let total = sample / denom;
    Some(((total * (1.0 - ff)).norm(), (total * ff).norm()))
}

/// Reconstruct W and F for `slice` by averaging the per-echo solutions over
/// the echoes in `subset`.
pub fn water_fat_from_ff(
    echoes: &EchoSeries,
    slice: usize,
    ff: &FatFractionMap,
    spectrum: &FatSpectrum,
    subset: &EchoSubset,
) -> Result<WaterFatMaps, SignalError> {
    if ff.values.len() != echoes.plane_len() {
        return Err(SignalError::Layout("fat fraction map does not match echo planes".into()));
    }
    let indices = subset.indices_for(echoes.echoes())?;
    let a_all = fat_modulations(spectrum, &echoes.acquisition);
    let k = indices.len() as f64;
    let n = echoes.plane_len();
    let mut water = vec![0.0; n];
    let mut fat = vec![0.0; n];
    let mut flagged = 0;
    for p in 0..n {
        let f = ff.values[p];
        let mut acc = Some((0.0, 0.0));
        for &e in &indices {
            acc = match (acc, water_fat_per_echo(echoes.plane(slice, e)[p], a_all[e - 1], f)) {
                (Some((w, fa)), Some((dw, df))) => Some((w + dw, fa + df)),
                _ => None,
            };
        }
        match acc {
            Some((w, fa)) => {
                water[p] = w / k;
                fat[p] = fa / k;
            }
            None => flagged += 1,
        }
    }
    Ok(WaterFatMaps { water, fat, flagged })
}

/// Scale a whole series into `[-1, 1]` by its largest real/imaginary component.
pub fn normalize_input(echoes: &EchoSeries) -> EchoSeries {
    let max = echoes.max_abs_component();
    let mut out = echoes.clone();
    if max == 0.0 {
        log::warn!("normalize_input: all-zero series left unscaled");
        return out;
    }
    for c in out.data.iter_mut() {
        *c = Complex64::new(c.re / max, c.im / max);
    }
    out.scale = echoes.scale * max;
    out
}

/// Echo families accepted as network input: the first available echo of the
/// family followed by consecutive members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EchoFamily {
    All,
    Odd,
    Even,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EchoSubset {
    pub family: EchoFamily,
    pub count: usize,
}

impl EchoSubset {
    pub const fn new(family: EchoFamily, count: usize) -> Self {
        EchoSubset { family, count }
    }

    pub const fn all(count: usize) -> Self {
        Self::new(EchoFamily::All, count)
    }

    pub const fn odd(count: usize) -> Self {
        Self::new(EchoFamily::Odd, count)
    }

    pub const fn even(count: usize) -> Self {
        Self::new(EchoFamily::Even, count)
    }

    /// 1-based echo indices, without checking availability.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.count)
            .map(|k| match self.family {
                EchoFamily::All => k + 1,
                EchoFamily::Odd => 2 * k + 1,
                EchoFamily::Even => 2 * k + 2,
            })
            .collect()
    }

    /// 1-based echo indices, checked against the number of acquired echoes.
    pub fn indices_for(&self, echoes: usize) -> Result<Vec<usize>, SignalError> {
        if self.count == 0 {
            return Err(SignalError::Subset("empty subset".into()));
        }
        let idx = self.indices();
        if let Some(&last) = idx.last().filter(|&&l| l > echoes) {
            return Err(SignalError::Subset(format!("{self} needs echo {last} but only {echoes} exist")));
        }
        Ok(idx)
    }

    /// Recognize an explicit index list as one of the legal families.
    pub fn from_indices(indices: &[usize]) -> Result<Self, SignalError> {
        let count = indices.len();
        for family in [EchoFamily::All, EchoFamily::Odd, EchoFamily::Even] {
            let s = EchoSubset::new(family, count);
            if count > 0 && s.indices() == indices {
                return Ok(s);
            }
        }
        Err(SignalError::Subset(format!(
            "{indices:?} is not a prefix of the all, odd or even echo families"
        )))
    }
}

impl fmt::Display for EchoSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.family {
            EchoFamily::All => "all",
            EchoFamily::Odd => "odd",
            EchoFamily::Even => "even",
        };
        write!(f, "{name}:{}", self.count)
    }
}

impl FromStr for EchoSubset {
    type Err = SignalError;

    /// `all:K`, `odd:K` or `even:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, count) = s
            .split_once(':')
            .ok_or_else(|| SignalError::Subset(format!("`{s}`: expected FAMILY:COUNT")))?;
        let family = match name {
            "all" => EchoFamily::All,
            "odd" => EchoFamily::Odd,
            "even" => EchoFamily::Even,
            other => return Err(SignalError::Subset(format!("unknown family `{other}`"))),
        };
        let count: usize = count
            .parse()
            .map_err(|_| SignalError::Subset(format!("`{count}` is not a count")))?;
        if count == 0 {
            return Err(SignalError::Subset("empty subset".into()));
        }
        Ok(EchoSubset { family, count })
    }
}

impl Serialize for EchoSubset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EchoSubset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network input for one slice: `(re, im)` planes per echo in subset order.
pub fn to_channels<T: Scalar>(
    echoes: &EchoSeries,
    slice: usize,
    subset: &EchoSubset,
) -> Result<Tensor<T>, SignalError> {
    let indices = subset.indices_for(echoes.echoes())?;
    let n = echoes.plane_len();
    let mut data = Vec::with_capacity(2 * indices.len() * n);
    for &e in &indices {
        let plane = echoes.plane(slice, e);
        data.extend(plane.iter().map(|c| T::from_f64(c.re)));
        data.extend(plane.iter().map(|c| T::from_f64(c.im)));
    }
    Tensor::from_vec(vec![2 * indices.len(), echoes.height, echoes.width], data)
        .map_err(|e| SignalError::Layout(e.to_string()))
}
