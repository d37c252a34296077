//! U-Net mapping `2K` echo channels to one fat-fraction plane.
//!
//! Each level runs two blocks of reflect-pad(1), 3x3 valid convolution and
//! ReLU, so convolutions preserve extent. Encoder levels are joined by 2x2
//! max pooling, decoder levels by a 2x2 stride-2 up-convolution whose
//! output is concatenated after the matching encoder output. A 1x1
//! convolution produces the linear output.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::io::{self, IoError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("input has {found} channels, network expects {expected}")]
    Channels { expected: usize, found: usize },
    #[error("input extent {height}x{width} must be a multiple of {multiple} and at least {minimum}")]
    Extent { height: usize, width: usize, multiple: usize, minimum: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint does not match its descriptor: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetSpec {
    /// Number of poolings.
    pub depth: usize,
    pub base_features: usize,
    pub in_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec { depth: 3, base_features: 16, in_channels: 10 }
    }
}

/// One parameter tensor of the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<(), UNetError> {
        if self.depth == 0 || self.depth > 8 {
            return Err(UNetError::Spec(format!("depth {} outside 1..=8", self.depth)));
        }
        if self.base_features == 0 || self.in_channels == 0 {
            return Err(UNetError::Spec("base_features and in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Feature count at level `d` (the bottleneck is level `depth`).
    pub fn features(&self, d: usize) -> usize {
        self.base_features << d
    }

    /// Spatial extents must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Parameter names and shapes in canonical order, with the fan-in used
    /// for initialization.
    fn layout_with_fan_in(&self) -> Vec<(ParamInfo, usize)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((ParamInfo { name: format!("{name}.weight"), shape: vec![cout, cin, k, k] }, cin * k * k));
            out.push((ParamInfo { name: format!("{name}.bias"), shape: vec![cout] }, 0));
        };
        let mut cin = self.in_channels;
        for d in 0..self.depth {
            let f = self.features(d);
            conv(format!("enc{d}.conv1"), cin, f, 3);
            conv(format!("enc{d}.conv2"), f, f, 3);
            cin = f;
        }
        let fb = self.features(self.depth);
        conv("bottleneck.conv1".into(), cin, fb, 3);
        conv("bottleneck.conv2".into(), fb, fb, 3);
        for d in (0..self.depth).rev() {
            let (fin, f) = (self.features(d + 1), self.features(d));
            out.push((ParamInfo { name: format!("dec{d}.up.weight"), shape: vec![fin, f, 2, 2] }, fin));
            out.push((ParamInfo { name: format!("dec{d}.up.bias"), shape: vec![f] }, 0));
            out.push((ParamInfo { name: format!("dec{d}.conv1.weight"), shape: vec![f, 2 * f, 3, 3] }, 2 * f * 9));
            out.push((ParamInfo { name: format!("dec{d}.conv1.bias"), shape: vec![f] }, 0));
            out.push((ParamInfo { name: format!("dec{d}.conv2.weight"), shape: vec![f, f, 3, 3] }, f * 9));
            out.push((ParamInfo { name: format!("dec{d}.conv2.bias"), shape: vec![f] }, 0));
        }
        let f0 = self.base_features;
        out.push((ParamInfo { name: "head.weight".into(), shape: vec![1, f0, 1, 1] }, f0));
        out.push((ParamInfo { name: "head.bias".into(), shape: vec![1] }, 0));
        out
    }

    pub fn layout(&self) -> Vec<ParamInfo> {
        self.layout_with_fan_in().into_iter().map(|(p, _)| p).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParameters<T: Scalar> {
    pub spec: UNetSpec,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

/// He-initialized parameters: weights `N(0, 2 / fan_in)`, biases zero.
pub fn build_unet<T: Scalar>(spec: UNetSpec, init_seed: u64) -> Result<UNetParameters<T>, UNetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (info, fan_in) in spec.layout_with_fan_in() {
        let t = if fan_in == 0 {
            Tensor::zeros(&info.shape)
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(&info.shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(std * z)
            })
        };
        names.push(info.name);
        tensors.push(t);
    }
    Ok(UNetParameters { spec, names, tensors })
}

impl<T: Scalar> UNetParameters<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Scalar>(&self) -> UNetParameters<U> {
        UNetParameters { spec: self.spec, names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Add the parameters to `g` as leaves, in canonical order.
    pub fn leaves(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Writes `arch.json` and `params.dxt` (all tensors flattened in order).
    pub fn save(&self, dir: &Path) -> Result<(), UNetError> {
        let descriptor = Descriptor { spec: self.spec, params: self.spec.layout() };
        let mut flat = Vec::with_capacity(self.parameter_count());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        let n = flat.len();
        io::write_tensor(&dir.join("params.dxt"), &Tensor::from_vec(vec![n], flat)?)?;
        io::write_json(&dir.join("arch.json"), &descriptor)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, UNetError> {
        let d: Descriptor = io::read_json(&dir.join("arch.json"))?;
        d.spec.validate()?;
        if d.params != d.spec.layout() {
            return Err(UNetError::Checkpoint("parameter list differs from the spec layout".into()));
        }
        let flat = match io::read_tensor(&dir.join("params.dxt"))? {
            io::StoredTensor::F32(t) => t.cast::<T>(),
            io::StoredTensor::F64(t) => t.cast::<T>(),
        };
        if flat.len() != d.spec.parameter_count() {
            return Err(UNetError::Checkpoint(format!(
                "params.dxt holds {} values, layout needs {}",
                flat.len(),
                d.spec.parameter_count()
            )));
        }
        let data = flat.data();
        let mut offset = 0;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for p in d.params {
            let n: usize = p.shape.iter().product();
            tensors.push(Tensor::from_vec(p.shape, data[offset..offset + n].to_vec())?);
            names.push(p.name);
            offset += n;
        }
        Ok(UNetParameters { spec: d.spec, names, tensors })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    spec: UNetSpec,
    params: Vec<ParamInfo>,
}

/// Node ids of a forward pass.
#[derive(Debug, Clone)]
pub struct UNetTrace {
    pub output: NodeId,
    /// Encoder outputs concatenated into the decoder, level 0 first.
    pub skips: Vec<NodeId>,
}

fn conv_block<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &[NodeId]) -> Result<NodeId, TensorError> {
    let a = g.reflect_pad(x, 1)?;
    let a = g.conv2d(a, p[0], p[1])?;
    let a = g.relu(a);
    let a = g.reflect_pad(a, 1)?;
    let a = g.conv2d(a, p[2], p[3])?;
    Ok(g.relu(a))
}

/// Record the forward pass of `x: [C,H,W]` on `g`. `params` are the leaf
/// ids from [`UNetParameters::leaves`].
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    spec: &UNetSpec,
    params: &[NodeId],
    x: NodeId,
) -> Result<UNetTrace, UNetError> {
    let (c, h, w) = g.value(x).dims3("unet")?;
    if c != spec.in_channels {
        return Err(UNetError::Channels { expected: spec.in_channels, found: c });
    }
    let m = spec.multiple();
    if h % m != 0 || w % m != 0 || h < 2 * m || w < 2 * m {
        return Err(UNetError::Extent { height: h, width: w, multiple: m, minimum: 2 * m });
    }
    let mut p = params.chunks(4);
    let mut skips = Vec::with_capacity(spec.depth);
    let mut a = x;
    for _ in 0..spec.depth {
        let s = conv_block(g, a, p.next().expect("encoder params"))?;
        skips.push(s);
        a = g.maxpool2(s)?;
    }
    a = conv_block(g, a, p.next().expect("bottleneck params"))?;
    let rest = &params[4 * spec.depth + 4..];
    let mut p = rest.chunks(6);
    for d in (0..spec.depth).rev() {
        let q = p.next().expect("decoder params");
        let up = g.upconv2(a, q[0], q[1])?;
        let cat = g.concat_channels(skips[d], up)?;
        a = conv_block(g, cat, &q[2..6])?;
    }
    let head = &rest[6 * spec.depth..];
    let output = g.conv2d(a, head[0], head[1])?;
    Ok(UNetTrace { output, skips })
}

/// Raw network output `[1,H,W]` for a padded input.
pub fn forward<T: Scalar>(params: &UNetParameters<T>, x: &Tensor<T>) -> Result<Tensor<T>, UNetError> {
    let mut g = Graph::new();
    let ids = params.leaves(&mut g);
    let xi = g.leaf(x.clone());
    let trace = forward_graph(&mut g, &params.spec, &ids, xi)?;
    Ok(g.value(trace.output).clone())
}

/// Original extent of a padded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub height: usize,
    pub width: usize,
}

/// Zero-pad `[C,H,W]` on the bottom and right to multiples of `2^depth`.
pub fn pad_input<T: Scalar>(x: &Tensor<T>, depth: usize) -> Result<(Tensor<T>, Crop), TensorError> {
    let (c, h, w) = x.dims3("pad_input")?;
    let m = 1usize << depth;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let crop = Crop { height: h, width: w };
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), crop));
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    let (src, dst) = (x.data(), out.data_mut());
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * ph + y) * pw;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok((out, crop))
}

/// Undo [`pad_input`] on `[C,H',W']`.
pub fn crop<T: Scalar>(x: &Tensor<T>, crop: Crop) -> Result<Tensor<T>, TensorError> {
    let (c, ph, pw) = x.dims3("crop")?;
    let (h, w) = (crop.height.min(ph), crop.width.min(pw));
    let src = x.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * ph + y) * pw;
            data.extend_from_slice(&src[s..s + w]);
        }
    }
    Tensor::from_vec(vec![c, h, w], data)
}

/// Inference: pad, run, crop and clamp to `[0, 1]`. Returns `H*W` values.
pub fn predict_ff<T: Scalar>(params: &UNetParameters<T>, x: &Tensor<T>) -> Result<Vec<f64>, UNetError> {
    let (padded, c) = pad_input(x, params.spec.depth)?;
    let out = crop(&forward(params, &padded)?, c)?;
    Ok(out.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::RngExt;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn depth2_layout() {
        let spec = UNetSpec { depth: 2, base_features: 8, in_channels: 2 };
        assert_eq!((spec.features(0), spec.features(1), spec.features(2)), (8, 16, 32));
        let names: Vec<String> = spec.layout().into_iter().map(|p| p.name).collect();
        let mut expect = Vec::new();
        for l in ["enc0.conv1", "enc0.conv2", "enc1.conv1", "enc1.conv2", "bottleneck.conv1", "bottleneck.conv2"] {
            expect.push(format!("{l}.weight"));
            expect.push(format!("{l}.bias"));
        }
        for d in [1, 0] {
            for l in ["up", "conv1", "conv2"] {
                expect.push(format!("dec{d}.{l}.weight"));
                expect.push(format!("dec{d}.{l}.bias"));
            }
        }
        expect.push("head.weight".into());
        expect.push("head.bias".into());
        assert_eq!(names, expect);
        let p = build_unet::<f64>(spec, 1).unwrap();
        assert_eq!(p.get("bottleneck.conv2.weight").unwrap().shape(), &[32, 32, 3, 3]);
        assert_eq!(p.get("dec1.up.weight").unwrap().shape(), &[32, 16, 2, 2]);
        assert_eq!(p.get("dec0.conv1.weight").unwrap().shape(), &[8, 16, 3, 3]);
    }

    #[test]
    fn hand_counted_parameters() {
        // enc 19 + 10, bottleneck 20 + 38, up 9, dec 19 + 10, head 2
        let spec = UNetSpec { depth: 1, base_features: 1, in_channels: 2 };
        assert_eq!(spec.parameter_count(), 127);
        assert_eq!(build_unet::<f32>(spec, 0).unwrap().parameter_count(), 127);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let spec = UNetSpec::default();
        let a = build_unet::<f64>(spec, 9).unwrap();
        assert_eq!(a, build_unet::<f64>(spec, 9).unwrap());
        assert_ne!(a, build_unet::<f64>(spec, 10).unwrap());
        let w = a.get("dec0.conv1.weight").unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (32.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
        assert!(a.get("enc0.conv1.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn padding_rules() {
        let x = random(&[2, 64, 64], 1);
        let (p, c) = pad_input(&x, 3).unwrap();
        assert_eq!(p, x);
        assert_eq!(crop(&p, c).unwrap(), x);
        let y = random(&[1, 63, 63], 2);
        let (p, c) = pad_input(&y, 3).unwrap();
        assert_eq!(p.shape(), &[1, 64, 64]);
        assert!(p.data()[63 * 64..].iter().all(|&v| v == 0.0));
        assert!((0..64).all(|r| p.data()[r * 64 + 63] == 0.0));
        assert_eq!(crop(&p, c).unwrap(), y);
        let z = Tensor::<f32>::zeros(&[1, 256, 184]);
        assert_eq!(pad_input(&z, 4).unwrap().0.shape(), &[1, 256, 192]);
    }

    #[test]
    fn output_keeps_input_extent() {
        let spec = UNetSpec { depth: 2, base_features: 4, in_channels: 6 };
        let p = build_unet::<f64>(spec, 3).unwrap();
        for (h, w) in [(8, 8), (16, 24), (32, 8)] {
            let out = forward(&p, &random(&[6, h, w], 4)).unwrap();
            assert_eq!(out.shape(), &[1, h, w]);
        }
        assert!(matches!(forward(&p, &random(&[4, 8, 8], 4)), Err(UNetError::Channels { expected: 6, found: 4 })));
        assert!(matches!(forward(&p, &random(&[6, 10, 8], 4)), Err(UNetError::Extent { .. })));
    }

    #[test]
    fn zero_input_output_comes_from_biases() {
        let spec = UNetSpec { depth: 2, base_features: 4, in_channels: 2 };
        let mut p = build_unet::<f64>(spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = rng.random_range(0.0..0.5);
                }
            }
        }
        let zero = Tensor::zeros(&[2, 16, 16]);
        let a = forward(&p, &zero).unwrap();
        assert_eq!(a, forward(&p, &zero).unwrap());
        assert!(a.data().iter().any(|&v| v != 0.0));
        // with zero biases nothing propagates
        let fresh = build_unet::<f64>(spec, 5).unwrap();
        assert!(forward(&fresh, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_network_gradient_check() {
        let spec = UNetSpec { depth: 2, base_features: 2, in_channels: 2 };
        let p = build_unet::<f64>(spec, 7).unwrap();
        let mut inputs = p.tensors.clone();
        // nonzero biases so that every parameter has an effect
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (name, t) in p.names.iter().zip(inputs.iter_mut()) {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        inputs.push(random(&[2, 8, 8], 9));
        let weights = random(&[1, 8, 8], 10);
        let n = p.tensors.len();
        let report = grad_check(&inputs, GradCheckOptions::default(), |g, ids| {
            let trace = forward_graph(g, &spec, &ids[..n], ids[n]).map_err(|e| match e {
                UNetError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            g.dot(trace.output, &weights)
        })
        .unwrap();
        assert!(report.checked > 1000, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn skip_path_survives_without_upsampling() {
        let spec = UNetSpec { depth: 2, base_features: 3, in_channels: 2 };
        for d in 0..2 {
            let mut p = build_unet::<f64>(spec, 11).unwrap();
            for v in p.get_mut(&format!("dec{d}.up.weight")).unwrap().data_mut() {
                *v = 0.0;
            }
            let mut g = Graph::new();
            let ids = p.leaves(&mut g);
            let x = g.leaf(random(&[2, 16, 16], 12));
            let trace = forward_graph(&mut g, &spec, &ids, x).unwrap();
            let loss = g.sum(trace.output);
            let grads = g.backward(loss).unwrap();
            let gs = grads.get(trace.skips[d]).expect("skip gradient");
            assert!(gs.data().iter().any(|&v| v != 0.0), "level {d}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = build_unet::<f32>(UNetSpec { depth: 2, base_features: 4, in_channels: 6 }, 13).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(UNetParameters::<f32>::load(dir.path()).unwrap(), p);
        let d: serde_json::Value = io::read_json(&dir.path().join("arch.json")).unwrap();
        assert_eq!(d["spec"]["depth"], 2);
    }

    #[test]
    fn predictions_are_clamped() {
        let spec = UNetSpec { depth: 1, base_features: 2, in_channels: 2 };
        let mut p = build_unet::<f64>(spec, 14).unwrap();
        p.get_mut("head.bias").unwrap().data_mut()[0] = 5.0;
        let ff = predict_ff(&p, &random(&[2, 6, 10], 15)).unwrap();
        assert_eq!(ff.len(), 60);
        assert!(ff.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
