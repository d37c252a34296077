//! The gradient self-test: every differentiable op, then a small U-Net,
//! checked against central finite differences in `f64`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::tensor::{Tensor, TensorError};
use crate::unet::{build_unet, forward_graph, UNetError, UNetSpec};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteSummary {
    pub cases: Vec<SuiteCase>,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(SuiteCase::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>>;

/// Run the whole suite. `fault_scale` corrupts every analytic gradient by
/// that factor, which must make the suite fail.
pub fn run_suite(fault_scale: Option<f64>) -> Result<SuiteSummary, TensorError> {
    let opts = GradCheckOptions { fault_scale, ..GradCheckOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6472_6164);
    let mut cases = Vec::new();

    // each op result is reduced with fixed random weights so that every
    // output element gets a distinct sensitivity
    let mut op_cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();

    let w = random(&[2, 4, 4], &mut rng);
    op_cases.push((
        "conv2d",
        vec![random(&[3, 6, 6], &mut rng), random(&[2, 3, 3, 3], &mut rng), random(&[2], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2])?;
            g.dot(y, &w)
        }),
    ));
    let w = random(&[2, 7, 8], &mut rng);
    op_cases.push((
        "reflect_pad",
        vec![random(&[2, 5, 6], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.reflect_pad(ids[0], 1)?;
            g.dot(y, &w)
        }),
    ));
    let w = random(&[2, 3, 3], &mut rng);
    op_cases.push((
        "maxpool2",
        vec![random(&[2, 6, 6], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.maxpool2(ids[0])?;
            g.dot(y, &w)
        }),
    ));
    let w = random(&[3, 6, 8], &mut rng);
    op_cases.push((
        "upconv2",
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.upconv2(ids[0], ids[1], ids[2])?;
            g.dot(y, &w)
        }),
    ));
    let w = random(&[2, 4, 4], &mut rng);
    op_cases.push((
        "relu",
        vec![random(&[2, 4, 4], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.relu(ids[0]);
            g.dot(y, &w)
        }),
    ));
    let w = random(&[5, 3, 3], &mut rng);
    op_cases.push((
        "concat_channels",
        vec![random(&[2, 3, 3], &mut rng), random(&[3, 3, 3], &mut rng)],
        Box::new(move |g, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            g.dot(y, &w)
        }),
    ));
    let target = random(&[1, 5, 5], &mut rng);
    let mask = Tensor::from_fn(&[1, 5, 5], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
    op_cases.push((
        "masked_mse",
        vec![random(&[1, 5, 5], &mut rng)],
        Box::new(move |g, ids| g.masked_mse(ids[0], &target, &mask)),
    ));
    op_cases.push((
        "scale+sum",
        vec![random(&[2, 3, 3], &mut rng)],
        Box::new(|g, ids| {
            let y = g.scale(ids[0], -1.75);
            Ok(g.sum(y))
        }),
    ));

    for (name, inputs, build) in op_cases {
        let report = grad_check(&inputs, opts, build)?;
        cases.push(SuiteCase { name, report });
    }

    cases.push(SuiteCase { name: "unet depth 2 on 8x8", report: unet_case(opts, &mut rng)? });
    Ok(SuiteSummary { cases })
}

fn unet_case(opts: GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let spec = UNetSpec { depth: 2, base_features: 2, in_channels: 2 };
    let params = build_unet::<f64>(spec, 11).expect("valid spec");
    let mut inputs = params.tensors.clone();
    // nonzero biases so every parameter matters
    for (name, t) in params.names.iter().zip(inputs.iter_mut()) {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    inputs.push(random(&[2, 8, 8], rng));
    let weights = random(&[1, 8, 8], rng);
    let n = params.tensors.len();
    grad_check(&inputs, opts, |g, ids| {
        let trace = forward_graph(g, &spec, &ids[..n], ids[n]).map_err(|e| match e {
            UNetError::Tensor(t) => t,
            other => unreachable!("valid spec and extent: {other}"),
        })?;
        g.dot(trace.output, &weights)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let s = run_suite(None).unwrap();
        for c in &s.cases {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
        assert!(s.cases.iter().find(|c| c.name.starts_with("unet")).unwrap().report.checked > 1000);
    }

    #[test]
    fn fault_injection_fails() {
        let s = run_suite(Some(1.01)).unwrap();
        assert!(!s.passed());
        assert!(s.cases.iter().all(|c| !c.passed()), "{:?}", s.cases);
    }
}
