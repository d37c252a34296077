//! Reference water/fat separation from the odd echoes ("reference-surrogate").
//!
//! For a fixed off-resonance `w` the water and fat amplitudes enter the
//! signal linearly, so they are projected out and each voxel is left with a
//! one-dimensional residual curve over `w`. With uniformly spaced echoes the
//! curve is periodic, sampled on a 64-point grid over one period, and its
//! local minima become field candidates. A coarse-to-fine labelling with an
//! absolute-difference smoothness prior (region growing followed by iterated
//! conditional modes) picks one candidate, and one period alias, per voxel.
//! Amplitudes are then fitted at the chosen field and R2* is taken as zero.

use std::collections::VecDeque;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::foreground_mask;
use crate::signal::{clamp_ff, fat_modulations, AcquisitionConfig, EchoSeries, EchoSubset, FatSpectrum, SignalError};

/// Label carried by every reference output.
pub const METHOD_LABEL: &str = "reference-surrogate";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("reference fit needs at least 2 echoes, got {0}")]
    TooFewEchoes(usize),
    #[error("water and fat basis is rank deficient for echoes {0:?}")]
    RankDeficient(Vec<usize>),
    #[error("echo times of {0:?} are not uniformly spaced")]
    NonUniform(Vec<usize>),
    #[error("mask has {found} voxels, expected {expected}")]
    MaskSize { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub echoes: EchoSubset,
    /// Residual samples per period.
    pub grid: usize,
    /// Smoothness weight, in units of the median residual-curve level per
    /// period of field difference.
    pub lambda: f64,
    pub max_iters: usize,
    /// Number of 2x downsamplings before the coarsest level.
    pub levels: usize,
    /// Voxels with `W + F` below this fraction of the scan maximum are background.
    pub background_fraction: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            echoes: EchoSubset::odd(3),
            grid: 64,
            lambda: 1.0,
            max_iters: 50,
            levels: 2,
            background_fraction: 0.02,
        }
    }
}

/// Projection of a voxel signal onto `span{e^{i w t_n} (1, a_n)}`.
#[derive(Debug, Clone)]
pub struct VarproModel {
    indices: Vec<usize>,
    times: Vec<f64>,
    fat: Vec<Complex64>,
    /// Inverse of the 2x2 Gram matrix `A^H A`, independent of `w`.
    gram_inv: [[Complex64; 2]; 2],
    period: Option<f64>,
}

impl VarproModel {
    pub fn new(acq: &AcquisitionConfig, spectrum: &FatSpectrum, subset: &EchoSubset) -> Result<Self, ReferenceError> {
        let indices = subset.indices_for(acq.echo_count())?;
        if indices.len() < 2 {
            return Err(ReferenceError::TooFewEchoes(indices.len()));
        }
        let a_all = fat_modulations(spectrum, acq);
        let fat: Vec<Complex64> = indices.iter().map(|&n| a_all[n - 1]).collect();
        let times: Vec<f64> = indices.iter().map(|&n| acq.echo_time(n)).collect();
        let n = fat.len() as f64;
        let sum_a: Complex64 = fat.iter().sum();
        let sum_aa: f64 = fat.iter().map(|a| a.norm_sqr()).sum();
        // G = [[n, sum a], [sum conj(a), sum |a|^2]]
        let det = n * sum_aa - sum_a.norm_sqr();
        let scale = n * sum_aa;
        if !(det > 1e-12 * scale) {
            return Err(ReferenceError::RankDeficient(indices));
        }
        let gram_inv = [
            [Complex64::new(sum_aa / det, 0.0), -sum_a / det],
            [-sum_a.conj() / det, Complex64::new(n / det, 0.0)],
        ];
        let period = acq.uniform_spacing(&indices).map(|d| 2.0 * PI / d);
        Ok(VarproModel { indices, times, fat, gram_inv, period })
    }

    pub fn echo_indices(&self) -> &[usize] {
        &self.indices
    }

    /// Period of the residual in `w` for uniformly spaced echoes.
    pub fn period(&self) -> Option<f64> {
        self.period
    }

    /// Demodulated samples `e^{-i w t_n} s_n` from precomputed phasors.
    fn demodulate(&self, s: &[Complex64], phasors: &[Complex64], out: &mut [Complex64]) {
        for ((o, &v), &p) in out.iter_mut().zip(s).zip(phasors) {
            *o = v * p;
        }
    }

    /// Least-squares `(water, fat)` of demodulated samples.
    fn solve(&self, d: &[Complex64]) -> (Complex64, Complex64) {
        let y0: Complex64 = d.iter().sum();
        let y1: Complex64 = d.iter().zip(&self.fat).map(|(v, a)| a.conj() * v).sum();
        let g = &self.gram_inv;
        (g[0][0] * y0 + g[0][1] * y1, g[1][0] * y0 + g[1][1] * y1)
    }

    fn residual_of(&self, d: &[Complex64]) -> f64 {
        let (w, f) = self.solve(d);
        d.iter().zip(&self.fat).map(|(v, a)| (v - w - a * f).norm_sqr()).sum()
    }

    fn phasors(&self, omega: f64) -> Vec<Complex64> {
        self.times.iter().map(|&t| Complex64::from_polar(1.0, -omega * t)).collect()
    }

    /// Voxel samples for the model's echoes, taken from a full echo list.
    pub fn select(&self, all_echoes: &[Complex64]) -> Vec<Complex64> {
        self.indices.iter().map(|&n| all_echoes[n - 1]).collect()
    }

    /// Squared norm of `s` minus its projection at off-resonance `omega`.
    /// `s` holds the model's echoes only.
    pub fn residual(&self, s: &[Complex64], omega: f64) -> f64 {
        let mut d = vec![Complex64::new(0.0, 0.0); s.len()];
        self.demodulate(s, &self.phasors(omega), &mut d);
        self.residual_of(&d)
    }

    /// Complex water and fat amplitudes at `omega`.
    pub fn amplitudes(&self, s: &[Complex64], omega: f64) -> (Complex64, Complex64) {
        let mut d = vec![Complex64::new(0.0, 0.0); s.len()];
        self.demodulate(s, &self.phasors(omega), &mut d);
        self.solve(&d)
    }
}

/// Residual of one voxel at one off-resonance value.
pub fn varpro_residual(
    s: &[Complex64],
    omega: f64,
    acq: &AcquisitionConfig,
    spectrum: &FatSpectrum,
    subset: &EchoSubset,
) -> Result<f64, ReferenceError> {
    Ok(VarproModel::new(acq, spectrum, subset)?.residual(s, omega))
}

/// Residual curves of many voxels on the same periodic grid.
#[derive(Debug, Clone)]
pub struct ResidualGrid {
    pub period: f64,
    pub samples: usize,
    table: Vec<Vec<Complex64>>,
}

impl ResidualGrid {
    pub fn new(model: &VarproModel, samples: usize) -> Result<Self, ReferenceError> {
        let period = model.period().ok_or_else(|| ReferenceError::NonUniform(model.echo_indices().to_vec()))?;
        let table = (0..samples).map(|k| model.phasors(k as f64 * period / samples as f64)).collect();
        Ok(ResidualGrid { period, samples, table })
    }

    pub fn step(&self) -> f64 {
        self.period / self.samples as f64
    }

    /// Residual curve of one voxel (`s` holds the model's echoes only).
    pub fn curve(&self, model: &VarproModel, s: &[Complex64]) -> Vec<f64> {
        let mut d = vec![Complex64::new(0.0, 0.0); s.len()];
        self.table
            .iter()
            .map(|ph| {
                model.demodulate(s, ph, &mut d);
                model.residual_of(&d)
            })
            .collect()
    }
}

/// A local minimum of a residual curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Off-resonance in `[-step/2, period)`, rad/s.
    pub omega: f64,
    /// Parabolic estimate of the residual at `omega`.
    pub residual: f64,
    /// Grid sample the minimum was found at.
    pub sample: usize,
    /// Parabolic offset from `sample`, in samples, within `[-0.5, 0.5]`.
    pub offset: f64,
}

/// Local minima of a circular residual curve, refined by one parabolic
/// step and sorted by ascending residual.
pub fn field_candidates(curve: &[f64], period: f64) -> Vec<Candidate> {
    let n = curve.len();
    let step = period / n as f64;
    let mut out = Vec::new();
    for k in 0..n {
        let prev = curve[(k + n - 1) % n];
        let next = curve[(k + 1) % n];
        let y0 = curve[k];
        if !(y0 <= prev && y0 < next) {
            continue;
        }
        let denom = prev - 2.0 * y0 + next;
        let offset = if denom > 0.0 { (0.5 * (prev - next) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let residual = (y0 - 0.25 * (prev - next) * offset).max(0.0);
        out.push(Candidate { omega: (k as f64 + offset) * step, residual, sample: k, offset });
    }
    if out.is_empty() {
        out.push(Candidate { omega: 0.0, residual: curve.first().copied().unwrap_or(0.0), sample: 0, offset: 0.0 });
    }
    out.sort_by(|a, b| a.residual.total_cmp(&b.residual).then(a.sample.cmp(&b.sample)));
    out
}

/// Per-voxel off-resonance of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub height: usize,
    pub width: usize,
    /// rad/s; 0 outside the mask.
    pub omega: Vec<f64>,
    /// Set where some level hit `max_iters` without converging.
    pub unconverged: bool,
}

/// Residual curves of a slice, `[pixel][sample]`, with the slice mask.
#[derive(Debug, Clone)]
pub struct CurveSlice {
    pub height: usize,
    pub width: usize,
    pub period: f64,
    pub curves: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl CurveSlice {
    fn downsample(&self) -> CurveSlice {
        let (h, w) = (self.height.div_ceil(2), self.width.div_ceil(2));
        let samples = self.curves.first().map_or(0, Vec::len);
        let mut curves = vec![vec![0.0; samples]; h * w];
        let mut mask = vec![false; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                if !self.mask[p] {
                    continue;
                }
                let q = (y / 2) * w + x / 2;
                mask[q] = true;
                for (acc, v) in curves[q].iter_mut().zip(&self.curves[p]) {
                    *acc += v;
                }
            }
        }
        CurveSlice { height: h, width: w, period: self.period, curves, mask }
    }
}

struct Level<'a> {
    slice: &'a CurveSlice,
    candidates: Vec<Vec<Candidate>>,
    /// Smoothness cost per rad/s of neighbour difference.
    mu: f64,
}

impl Level<'_> {
    fn neighbours(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (w, h) = (self.slice.width, self.slice.height);
        let (y, x) = (p / w, p % w);
        let up = (y > 0).then(|| p - w);
        let down = (y + 1 < h).then(|| p + w);
        let left = (x > 0).then(|| p - 1);
        let right = (x + 1 < w).then(|| p + 1);
        [up, down, left, right].into_iter().flatten().filter(|&q| self.slice.mask[q])
    }

    /// Best `(omega, cost)` for voxel `p` given neighbour values, searching
    /// every candidate and the period aliases around the neighbour median.
    fn best_label(&self, p: usize, nb: &[f64]) -> (f64, f64) {
        let period = self.slice.period;
        let mut best = (f64::NAN, f64::INFINITY);
        if nb.is_empty() {
            let c = self.candidates[p][0];
            return (c.omega, c.residual);
        }
        let mut sorted = nb.to_vec();
        sorted.sort_by(f64::total_cmp);
        let centre = sorted[sorted.len() / 2];
        for c in &self.candidates[p] {
            let k0 = ((centre - c.omega) / period).round();
            for dk in [-1.0, 0.0, 1.0] {
                let omega = c.omega + (k0 + dk) * period;
                let cost = c.residual + self.mu * nb.iter().map(|&o| (omega - o).abs()).sum::<f64>();
                if cost < best.1 {
                    best = (omega, cost);
                }
            }
        }
        best
    }

    fn local_cost(&self, p: usize, omega: f64, labels: &[f64]) -> f64 {
        let period = self.slice.period;
        let mut data = f64::INFINITY;
        for c in &self.candidates[p] {
            let k = ((omega - c.omega) / period).round();
            if (c.omega + k * period - omega).abs() <= 1e-9 * period {
                data = c.residual;
                break;
            }
        }
        data + self.mu * self.neighbours(p).map(|q| (omega - labels[q]).abs()).sum::<f64>()
    }

    /// Iterated conditional modes in raster order. Returns whether it converged.
    fn icm(&self, labels: &mut [f64], max_iters: usize) -> bool {
        let mut nb = Vec::with_capacity(4);
        for _ in 0..max_iters {
            let mut changed = false;
            for p in 0..labels.len() {
                if !self.slice.mask[p] {
                    continue;
                }
                nb.clear();
                nb.extend(self.neighbours(p).map(|q| labels[q]));
                let (omega, cost) = self.best_label(p, &nb);
                if omega != labels[p] && cost < self.local_cost(p, labels[p], labels) - 1e-12 * cost.abs() {
                    labels[p] = omega;
                    changed = true;
                }
            }
            if !changed {
                return true;
            }
        }
        false
    }

    /// Breadth-first assignment from the most confident voxel of each
    /// connected component.
    fn grow(&self) -> Vec<f64> {
        let n = self.slice.mask.len();
        let mut labels = vec![0.0; n];
        let mut assigned = vec![false; n];
        let confidence = |p: usize| -> f64 {
            let c = &self.candidates[p];
            let curve = &self.slice.curves[p];
            let mean = curve.iter().sum::<f64>() / curve.len() as f64;
            let second = c.get(1).map_or(mean, |s| s.residual);
            second - c[0].residual
        };
        let mut order: Vec<usize> = (0..n).filter(|&p| self.slice.mask[p]).collect();
        order.sort_by(|&a, &b| confidence(b).total_cmp(&confidence(a)).then(a.cmp(&b)));
        let mut queue = VecDeque::new();
        let mut nb = Vec::with_capacity(4);
        for seed in order {
            if assigned[seed] {
                continue;
            }
            labels[seed] = wrap_centered(self.candidates[seed][0].omega, self.slice.period);
            assigned[seed] = true;
            queue.push_back(seed);
            while let Some(p) = queue.pop_front() {
                let next: Vec<usize> = self.neighbours(p).filter(|&q| !assigned[q]).collect();
                for q in next {
                    nb.clear();
                    nb.extend(self.neighbours(q).filter(|&r| assigned[r]).map(|r| labels[r]));
                    labels[q] = self.best_label(q, &nb).0;
                    assigned[q] = true;
                    queue.push_back(q);
                }
            }
        }
        labels
    }
}

/// Golden-section minimum of the exact residual within one grid step of `omega`.
fn polish(model: &VarproModel, s: &[Complex64], omega: f64, step: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let f = |w: f64| model.residual(s, w);
    let (mut a, mut b) = (omega - step, omega + step);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..64 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let best = 0.5 * (a + b);
    // never end up worse than the starting label
    if f(best) <= f(omega) { best } else { omega }
}

fn wrap_centered(omega: f64, period: f64) -> f64 {
    omega - (omega / period).round() * period
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn build_level(slice: &CurveSlice, lambda: f64) -> Level<'_> {
    let candidates = slice
        .curves
        .iter()
        .zip(&slice.mask)
        .map(|(c, &m)| if m { field_candidates(c, slice.period) } else { Vec::new() })
        .collect();
    let mut levels: Vec<f64> = slice
        .curves
        .iter()
        .zip(&slice.mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let scale = median(&mut levels);
    Level { slice, candidates, mu: lambda * scale / slice.period }
}

/// Bilinear interpolation of a parent label map onto the next finer grid,
/// weighting only masked parents.
fn upsample(parent: &[f64], coarse: &CurveSlice, height: usize, width: usize) -> Vec<f64> {
    let (ph, pw) = (coarse.height as isize, coarse.width as isize);
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let fy = (y as f64 + 0.5) / 2.0 - 0.5;
            let fx = (x as f64 + 0.5) / 2.0 - 0.5;
            let (y0, x0) = (fy.floor() as isize, fx.floor() as isize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let (py, px) = (y0 + dy, x0 + dx);
                    if py < 0 || px < 0 || py >= ph || px >= pw {
                        continue;
                    }
                    let q = (py * pw + px) as usize;
                    if coarse.mask[q] && wy * wx > 0.0 {
                        acc += wy * wx * parent[q];
                        wsum += wy * wx;
                    }
                }
            }
            out[y * width + x] = if wsum > 0.0 { acc / wsum } else { parent[(y / 2) * coarse.width + x / 2] };
        }
    }
    out
}

/// Coarse-to-fine field-map selection over a slice's residual curves.
pub fn resolve_field_map(curves: &CurveSlice, cfg: &ReferenceConfig) -> Result<FieldMap, ReferenceError> {
    let n = curves.height * curves.width;
    if curves.mask.len() != n || curves.curves.len() != n {
        return Err(ReferenceError::MaskSize { expected: n, found: curves.mask.len() });
    }
    let mut pyramid = vec![curves.clone()];
    for _ in 0..cfg.levels {
        let last = pyramid.last().unwrap();
        if last.height <= 1 && last.width <= 1 {
            break;
        }
        let next = last.downsample();
        pyramid.push(next);
    }

    let mut unconverged = false;
    let mut labels: Option<Vec<f64>> = None;
    for (depth, slice) in pyramid.iter().enumerate().rev() {
        let level = build_level(slice, cfg.lambda);
        let mut current = match labels.take() {
            None => level.grow(),
            Some(parent) => {
                let finer = &pyramid[depth];
                let targets = upsample(&parent, &pyramid[depth + 1], finer.height, finer.width);
                let mut init = vec![0.0; finer.mask.len()];
                for p in 0..init.len() {
                    if !finer.mask[p] {
                        continue;
                    }
                    let target = targets[p];
                    init[p] = level.candidates[p]
                        .iter()
                        .map(|c| c.omega + ((target - c.omega) / finer.period).round() * finer.period)
                        .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
                        .unwrap_or(target);
                }
                init
            }
        };
        if !level.icm(&mut current, cfg.max_iters) {
            unconverged = true;
        }
        labels = Some(current);
    }
    let mut omega = labels.unwrap_or_default();
    // choose the global alias that centres the masked mean on zero
    let masked: Vec<f64> = omega.iter().zip(&curves.mask).filter(|(_, &m)| m).map(|(&o, _)| o).collect();
    if !masked.is_empty() {
        let mean = masked.iter().sum::<f64>() / masked.len() as f64;
        let shift = (mean / curves.period).round() * curves.period;
        for (o, &m) in omega.iter_mut().zip(&curves.mask) {
            *o = if m { *o - shift } else { 0.0 };
        }
    }
    Ok(FieldMap { height: curves.height, width: curves.width, omega, unconverged })
}

/// Reference separation of every slice of a scan; volumes are `[slice][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub water: Vec<f64>,
    pub fat: Vec<f64>,
    /// Clamped to `[0, 1]`; 0 on background.
    pub ff: Vec<f64>,
    pub field: Vec<FieldMap>,
    pub residual: Vec<f64>,
    pub background: Vec<bool>,
}

impl SeparationResult {
    pub fn slice(&self, z: usize) -> std::ops::Range<usize> {
        let n = self.height * self.width;
        z * n..(z + 1) * n
    }

    /// `W + F` of one slice.
    pub fn signal_sum(&self, z: usize) -> Vec<f64> {
        self.slice(z).map(|i| self.water[i] + self.fat[i]).collect()
    }
}

/// Full reference pipeline. `mask` (`[slice][y][x]`) limits the field-map
/// regularization; without one each slice uses an Otsu mask of its echo magnitudes.
pub fn separate(
    echoes: &EchoSeries,
    mask: Option<&[bool]>,
    spectrum: &FatSpectrum,
    cfg: &ReferenceConfig,
) -> Result<SeparationResult, ReferenceError> {
    let (s, h, w) = (echoes.slices, echoes.height, echoes.width);
    let plane = h * w;
    if let Some(m) = mask {
        if m.len() != s * plane {
            return Err(ReferenceError::MaskSize { expected: s * plane, found: m.len() });
        }
    }
    let model = VarproModel::new(&echoes.acquisition, spectrum, &cfg.echoes)?;
    let grid = ResidualGrid::new(&model, cfg.grid)?;

    let n = s * plane;
    let mut water = vec![0.0; n];
    let mut fat = vec![0.0; n];
    let mut residual = vec![0.0; n];
    let mut field = Vec::with_capacity(s);
    for z in 0..s {
        let samples: Vec<Vec<Complex64>> = (0..plane).map(|p| model.select(&echoes.voxel(z, p))).collect();
        let curves: Vec<Vec<f64>> = samples.iter().map(|v| grid.curve(&model, v)).collect();
        let slice_mask = match mask {
            Some(m) => m[z * plane..(z + 1) * plane].to_vec(),
            None => magnitude_mask(&samples, h, w),
        };
        let cs = CurveSlice { height: h, width: w, period: grid.period, curves, mask: slice_mask };
        let mut fm = resolve_field_map(&cs, cfg)?;
        for p in 0..plane {
            // voxels outside the mask keep their own best candidate
            let coarse = if cs.mask[p] { fm.omega[p] } else { field_candidates(&cs.curves[p], grid.period)[0].omega };
            let omega = polish(&model, &samples[p], coarse, grid.step());
            fm.omega[p] = if cs.mask[p] { omega } else { 0.0 };
            let (wa, fa) = model.amplitudes(&samples[p], omega);
            let i = z * plane + p;
            water[i] = wa.norm();
            fat[i] = fa.norm();
            residual[i] = model.residual(&samples[p], omega);
        }
        field.push(fm);
    }

    let scan_max = water.iter().zip(&fat).map(|(a, b)| a + b).fold(0.0, f64::max);
    let threshold = cfg.background_fraction * scan_max;
    let mut raw_ff = vec![0.0; n];
    let mut background = vec![false; n];
    for i in 0..n {
        let total = water[i] + fat[i];
        if total > 0.0 && total >= threshold {
            raw_ff[i] = fat[i] / total;
        } else {
            background[i] = true;
        }
    }
    let ff = clamp_ff(&raw_ff, 1, n)?.values;
    Ok(SeparationResult { slices: s, height: h, width: w, water, fat, ff, field, residual, background })
}

/// Otsu foreground on the summed echo magnitudes, used when the caller has no mask.
fn magnitude_mask(samples: &[Vec<Complex64>], height: usize, width: usize) -> Vec<bool> {
    let mag: Vec<f64> = samples.iter().map(|v| v.iter().map(|c| c.norm()).sum()).collect();
    foreground_mask(&mag, height, width).mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{ambiguity_period, generate_subject, FieldShape, PhantomConfig};
    use crate::signal::{synthesize_echo, VoxelModel};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (AcquisitionConfig, FatSpectrum, VarproModel) {
        let acq = AcquisitionConfig::default();
        let spec = FatSpectrum::default();
        let model = VarproModel::new(&acq, &spec, &EchoSubset::odd(3)).unwrap();
        (acq, spec, model)
    }

    fn voxel(v: &VoxelModel, acq: &AcquisitionConfig, spec: &FatSpectrum) -> Vec<Complex64> {
        (1..=acq.echo_count()).map(|n| synthesize_echo(v, n, spec, acq)).collect()
    }

    #[test]
    fn exact_membership_has_zero_residual() {
        let (acq, spec, model) = setup();
        let v = VoxelModel { water: 0.7, fat: 0.3, phase: 1.1, off_resonance: 230.0, ..Default::default() };
        let s = model.select(&voxel(&v, &acq, &spec));
        assert!(model.residual(&s, 230.0) < 1e-18);
        assert!(model.residual(&s, 0.0) > 1e-4);
        let (wa, fa) = model.amplitudes(&s, 230.0);
        assert!((wa.norm() - 0.7).abs() < 1e-12 && (fa.norm() - 0.3).abs() < 1e-12);
        assert!(varpro_residual(&s, 230.0, &acq, &spec, &EchoSubset::odd(3)).unwrap() < 1e-18);
    }

    #[test]
    fn residual_is_periodic() {
        let (acq, spec, model) = setup();
        let period = model.period().unwrap();
        assert!((period - 2.0 * PI / 1.9e-3).abs() < 1e-6 * period);
        assert!((period - ambiguity_period(&acq)).abs() < 1e-9);
        let v = VoxelModel { water: 0.4, fat: 0.6, phase: -0.3, off_resonance: -120.0, ..Default::default() };
        let mut s = model.select(&voxel(&v, &acq, &spec));
        s[1] += Complex64::new(0.05, -0.02);
        for k in 0..64 {
            let omega = -period + k as f64 * period / 64.0 * 3.0;
            let a = model.residual(&s, omega);
            let b = model.residual(&s, omega + period);
            assert!((a - b).abs() <= 1e-12 * a.max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn mixed_voxel_curve_has_two_minima() {
        let (acq, spec, model) = setup();
        let grid = ResidualGrid::new(&model, 64).unwrap();
        let v = VoxelModel { water: 0.5, fat: 0.5, off_resonance: 50.0, ..Default::default() };
        let curve = grid.curve(&model, &model.select(&voxel(&v, &acq, &spec)));
        let cands = field_candidates(&curve, grid.period);
        assert!(cands.len() >= 2, "{cands:?}");
        assert!(cands.windows(2).all(|w| w[0].residual <= w[1].residual));
    }

    #[test]
    fn water_voxel_best_candidate_near_truth() {
        let (acq, spec, model) = setup();
        let grid = ResidualGrid::new(&model, 64).unwrap();
        let tol = grid.step() * 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let truth = rng.random_range(0.0..grid.period);
            let v = VoxelModel { water: 1.0, phase: rng.random_range(-PI..PI), off_resonance: truth, ..Default::default() };
            let curve = grid.curve(&model, &model.select(&voxel(&v, &acq, &spec)));
            let best = field_candidates(&curve, grid.period)[0];
            let err = wrap_centered(best.omega - truth, grid.period).abs();
            assert!(err < tol, "err {err} tol {tol}");
        }
    }

    #[test]
    fn candidates_shift_with_curve() {
        let (acq, spec, model) = setup();
        let grid = ResidualGrid::new(&model, 64).unwrap();
        let v = VoxelModel { water: 0.3, fat: 0.7, off_resonance: 400.0, ..Default::default() };
        let curve = grid.curve(&model, &model.select(&voxel(&v, &acq, &spec)));
        let base = field_candidates(&curve, grid.period);
        for k in [1usize, 7, 33] {
            let shifted: Vec<f64> = (0..64).map(|i| curve[(i + 64 - k) % 64]).collect();
            let moved = field_candidates(&shifted, grid.period);
            assert_eq!(base.len(), moved.len());
            for (a, b) in base.iter().zip(&moved) {
                assert_eq!((a.sample + k) % 64, b.sample);
                assert_eq!(a.offset, b.offset);
                assert_eq!(a.residual, b.residual);
            }
        }
    }

    #[test]
    fn constant_curve_single_candidate() {
        let c = field_candidates(&[2.0; 64], 100.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].sample, 0);
    }

    #[test]
    fn rank_deficient_basis_rejected() {
        let acq = AcquisitionConfig::default();
        // a single peak at 0 ppm makes fat indistinguishable from water
        let spec = FatSpectrum::single_peak(0.0);
        assert!(matches!(
            VarproModel::new(&acq, &spec, &EchoSubset::odd(3)),
            Err(ReferenceError::RankDeficient(_))
        ));
        assert!(matches!(
            VarproModel::new(&acq, &FatSpectrum::default(), &EchoSubset::odd(1)),
            Err(ReferenceError::TooFewEchoes(1))
        ));
    }

    fn run_phantom(cfg: &PhantomConfig, seed: u64) -> (crate::phantom::Subject, SeparationResult) {
        let subj = generate_subject(seed, cfg, "s").unwrap();
        let res = separate(&subj.echoes, Some(&subj.body_mask), &cfg.spectrum, &ReferenceConfig::default()).unwrap();
        (subj, res)
    }

    fn ff_mae(subj: &crate::phantom::Subject, res: &SeparationResult) -> f64 {
        let (mut acc, mut n) = (0.0, 0);
        for i in 0..subj.truth_ff.len() {
            if subj.body_mask[i] {
                acc += (res.ff[i] - subj.truth_ff[i]).abs();
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn constant_field_recovered() {
        let cfg = PhantomConfig {
            snr: None,
            r2star: [0.0, 0.0],
            field_span_periods: [0.0, 0.0],
            slices: 2,
            ..Default::default()
        };
        let (subj, res) = run_phantom(&cfg, 3);
        let period = cfg.field_period();
        let plane = subj.plane_len();
        for z in 0..cfg.slices {
            for p in 0..plane {
                let i = z * plane + p;
                if subj.body_mask[i] {
                    let err = (res.field[z].omega[p] - subj.truth_field[i]).abs();
                    assert!(err < 0.01 * period, "slice {z} pixel {p}: {err}");
                }
            }
        }
    }

    #[test]
    fn ramp_field_has_no_seams() {
        let cfg = PhantomConfig {
            snr: None,
            r2star: [0.0, 0.0],
            field_span_periods: [1.5, 1.5],
            field_shape: FieldShape::Ramp,
            slices: 2,
            ..Default::default()
        };
        let (subj, res) = run_phantom(&cfg, 4);
        let limit = PI / (cfg.acquisition.echo_times[2] - cfg.acquisition.echo_times[0]);
        let (h, w) = (cfg.height, cfg.width);
        for z in 0..cfg.slices {
            let f = &res.field[z].omega;
            let m = &subj.body_mask[z * h * w..(z + 1) * h * w];
            for p in 0..h * w {
                if !m[p] {
                    continue;
                }
                if p % w + 1 < w && m[p + 1] {
                    assert!((f[p + 1] - f[p]).abs() < limit);
                }
                if p + w < h * w && m[p + w] {
                    assert!((f[p + w] - f[p]).abs() < limit);
                }
            }
        }
        assert!(ff_mae(&subj, &res) < 0.005, "mae {}", ff_mae(&subj, &res));
    }

    #[test]
    fn pure_water_gives_zero_ff() {
        let cfg = PhantomConfig {
            snr: None,
            r2star: [0.0, 0.0],
            subcutaneous_ff: [0.0, 0.0],
            muscle_ff: [0.0, 0.0],
            liver_ff: [0.0, 0.0],
            marrow_ff: [0.0, 0.0],
            fatty_liver_share: 0.0,
            slices: 1,
            ..Default::default()
        };
        let (subj, res) = run_phantom(&cfg, 5);
        for i in 0..subj.truth_ff.len() {
            if subj.body_mask[i] {
                assert!(res.ff[i] < 1e-6, "{}", res.ff[i]);
            }
        }
    }

    #[test]
    fn global_phase_and_scale_invariance() {
        let cfg = PhantomConfig { slices: 1, ..Default::default() };
        let subj = generate_subject(6, &cfg, "s").unwrap();
        let rc = ReferenceConfig::default();
        let base = separate(&subj.echoes, Some(&subj.body_mask), &cfg.spectrum, &rc).unwrap();
        let mut rotated = subj.echoes.clone();
        let rot = Complex64::from_polar(3.0, 0.8);
        for c in rotated.data_mut() {
            *c *= rot;
        }
        let other = separate(&rotated, Some(&subj.body_mask), &cfg.spectrum, &rc).unwrap();
        // rounding in the rotated samples can move the polished minimum slightly
        for i in 0..base.ff.len() {
            assert!((base.ff[i] - other.ff[i]).abs() < 1e-6, "{} {}", base.ff[i], other.ff[i]);
            assert!((3.0 * base.water[i] - other.water[i]).abs() <= 1e-6 * other.water[i].max(1.0));
        }
        // power-of-two scaling is exact in floating point
        let mut doubled = subj.echoes.clone();
        for c in doubled.data_mut() {
            *c *= 4.0;
        }
        let scaled = separate(&doubled, Some(&subj.body_mask), &cfg.spectrum, &rc).unwrap();
        assert_eq!(scaled.ff, base.ff);
        assert!(scaled.water.iter().zip(&base.water).all(|(a, b)| *a == 4.0 * b));
    }

    #[test]
    fn single_voxel_mask_takes_best_candidate() {
        let (acq, spec, model) = setup();
        let grid = ResidualGrid::new(&model, 64).unwrap();
        let v = VoxelModel { water: 0.5, fat: 0.5, off_resonance: 300.0, ..Default::default() };
        let curve = grid.curve(&model, &model.select(&voxel(&v, &acq, &spec)));
        let best = field_candidates(&curve, grid.period)[0].omega;
        let cs = CurveSlice { height: 1, width: 1, period: grid.period, curves: vec![curve], mask: vec![true] };
        let fm = resolve_field_map(&cs, &ReferenceConfig::default()).unwrap();
        assert!(!fm.unconverged);
        assert!((fm.omega[0] - wrap_centered(best, grid.period)).abs() < 1e-9);
    }
}
