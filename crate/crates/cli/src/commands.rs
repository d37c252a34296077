use std::path::Path;

use anyhow::anyhow;
use log::{info, warn};

use dxsep::dataset::{generate_dataset, Dataset};
use dxsep::evaluation::{liver_ff, liver_report, masked_mae, scatter_csv, EvalError};
use dxsep::gradsuite::{run_suite, GRAD_TOLERANCE};
use dxsep::io::{difference_to_gray, ff_to_gray, write_atomic, write_gray_png, write_json, write_tensor};
use dxsep::reference::{separate, METHOD_LABEL};
use dxsep::training::{run_crossval, save_fold, Cohort, PreparedSubject};
use dxsep::{EchoSubset, RunConfig, Scalar, Tensor};
use serde::Serialize;

use crate::failure::{training_failure, Classify, CliResult, Failure, Kind};
use crate::predictions;
use crate::workers;
use crate::{Against, EvalArgs, GradcheckArgs, PhantomArgs, Precision, ReferenceArgs, TrainArgs};

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).or_usage(),
        None => Ok(RunConfig::default()),
    }
}

fn open_dataset(root: &Path) -> CliResult<Dataset> {
    Dataset::open(root).or_data()
}

pub fn phantom(config: &RunConfig, a: &PhantomArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(Failure::new(Kind::Usage, anyhow!("--n must be at least 1")));
    }
    let manifest = generate_dataset(a.n, a.seed, &config.phantom_config(), &a.out).or_data()?;
    let fatty = manifest.subjects.iter().filter(|s| s.liver_ff > config.evaluation.cutoff).count();
    println!("{} subjects written to {} ({fatty} with fatty liver)", manifest.subjects.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReferenceSummary {
    method: &'static str,
    echoes: String,
    subjects: Vec<(String, f64)>,
    ff_mae: f64,
}

pub fn reference(config: &RunConfig, a: &ReferenceArgs, workers: usize) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let ids = ds.subject_ids();
    let spectrum = &ds.manifest.spectrum;
    // (absolute error sum, voxel count) per subject
    let sums = workers::map(&ids, workers, |id| -> anyhow::Result<(f64, usize)> {
        let s = ds.load(id)?;
        let sep = separate(&s.echoes, None, spectrum, &config.reference)?;
        let dir = a.out.join(id);
        let shape = vec![sep.slices, sep.height, sep.width];
        for (name, v) in [("water", &sep.water), ("fat", &sep.fat), ("ff", &sep.ff)] {
            write_tensor(&dir.join(format!("{name}.dxt")), &Tensor::<f64>::from_vec(shape.clone(), v.clone())?)?;
        }
        let field: Vec<f64> = sep.field.iter().flat_map(|f| f.omega.iter().copied()).collect();
        write_tensor(&dir.join("field.dxt"), &Tensor::<f64>::from_vec(shape, field)?)?;
        let mut err = 0.0;
        let mut n = 0;
        for i in 0..s.truth_ff.len() {
            if s.body_mask[i] {
                err += (sep.ff[i] - s.truth_ff[i]).abs();
                n += 1;
            }
        }
        Ok((err, n))
    })
    .or_data()?;
    let (err, n) = sums.iter().fold((0.0, 0), |(e, c), &(a, b)| (e + a, c + b));
    let summary = ReferenceSummary {
        method: METHOD_LABEL,
        echoes: config.reference.echoes.to_string(),
        subjects: ids.iter().cloned().zip(sums.iter().map(|&(e, c)| e / c.max(1) as f64)).collect(),
        ff_mae: err / n.max(1) as f64,
    };
    write_json(&a.out.join("summary.json"), &summary).or_data()?;
    println!("{METHOD_LABEL} ({}): body FF MAE vs phantom truth {:.5}", summary.echoes, summary.ff_mae);
    Ok(())
}

fn parse_echoes(s: &str) -> CliResult<EchoSubset> {
    let parsed = if s.contains(':') {
        s.parse::<EchoSubset>()
    } else {
        let idx: Result<Vec<usize>, _> = s.split(',').map(|t| t.trim().parse::<usize>()).collect();
        match idx {
            Ok(idx) => EchoSubset::from_indices(&idx),
            Err(e) => return Err(Failure::new(Kind::Usage, anyhow!("--echoes `{s}`: {e}"))),
        }
    };
    parsed.map_err(|e| Failure::new(Kind::Usage, anyhow!("--echoes `{s}`: {e}")))
}

pub fn train(mut config: RunConfig, a: &TrainArgs, workers: usize) -> CliResult<()> {
    if let Some(e) = &a.echoes {
        config = config.with_echoes(parse_echoes(e)?).or_usage()?;
    }
    if let Some(e) = a.epochs {
        config.training.epochs = e;
        config.validate().or_usage()?;
    }
    let ds = open_dataset(&a.dataset)?;
    let subjects = ds.load_all().or_data()?;
    let k = config.evaluation.folds;
    if let Some(bad) = a.folds.iter().flatten().find(|&&f| f >= k) {
        return Err(Failure::new(Kind::Usage, anyhow!("fold {bad} does not exist with {k} folds")));
    }
    let spectrum = &ds.manifest.spectrum;
    let prepared = workers::map(&subjects, workers, |s| PreparedSubject::from_subject(s, spectrum, &config.reference))
        .map_err(training_failure)?;
    let cohort = Cohort { subjects: prepared };
    match a.precision {
        Precision::F32 => train_with::<f32>(&config, a, &cohort),
        Precision::F64 => train_with::<f64>(&config, a, &cohort),
    }
}

fn train_with<T: Scalar>(config: &RunConfig, a: &TrainArgs, cohort: &Cohort) -> CliResult<()> {
    let echoes = config.training.echoes;
    info!("training {echoes} ({} channels) on {} subjects", config.network.in_channels, cohort.subjects.len());
    let res = run_crossval::<T>(
        cohort,
        config.network,
        &config.training,
        config.evaluation.folds,
        config.evaluation.split_seed,
        a.folds.as_deref(),
    )
    .map_err(training_failure)?;
    write_atomic(&a.out.join("config.toml"), config.to_toml().as_bytes()).or_data()?;
    for f in &res.folds {
        save_fold(&a.out.join(format!("fold_{}", f.fold.index)), f).map_err(training_failure)?;
        println!(
            "fold {}: {} training / {} validation slices, final validation loss {:.6}",
            f.fold.index,
            f.train_slices,
            f.validation_slices,
            f.curve.final_validation().unwrap_or(f64::NAN)
        );
    }
    let pdir = a.out.join("predictions");
    for p in &res.predictions {
        let s = cohort.subjects.iter().find(|s| s.id == p.id).expect("predicted subject is in the cohort");
        predictions::write(&pdir, p, s, &echoes.to_string()).or_data()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    against: &'static str,
    report: &'a dxsep::LiverReport,
    foreground_mae_vs_reference: f64,
}

pub fn eval(config: &RunConfig, a: &EvalArgs) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let preds = predictions::read_all(&a.predictions).or_data()?;
    let known = ds.subject_ids();
    let unexpected: Vec<String> = preds.iter().map(|p| p.info.id.clone()).filter(|id| !known.contains(id)).collect();
    if !unexpected.is_empty() {
        return Err(Failure::new(Kind::Data, EvalError::SubjectMismatch { missing: vec![], unexpected }));
    }

    let mut predicted = Vec::new();
    let mut references = Vec::new();
    let mut voxel_err = 0.0;
    let mut voxel_n = 0usize;
    for p in &preds {
        let subject = ds.load(&p.info.id).or_data()?;
        let plane = p.height * p.width;
        let mut pred_vals = Vec::new();
        let mut ref_vals = Vec::new();
        let mut liver = Vec::new();
        let png_dir = a.out.join("png").join(&p.info.id);
        for (&z, plane_ff) in p.info.slices.iter().zip(&p.ff) {
            let r = z * plane..(z + 1) * plane;
            let fg = &p.foreground[r.clone()];
            let reference = &p.reference_ff[r.clone()];
            pred_vals.extend_from_slice(plane_ff);
            ref_vals.extend_from_slice(reference);
            liver.extend_from_slice(&subject.liver_mask[r]);
            if let Some(m) = masked_mae(plane_ff, reference, fg) {
                let c = fg.iter().filter(|&&b| b).count();
                voxel_err += m * c as f64;
                voxel_n += c;
            }
            let gray: Vec<u8> =
                plane_ff.iter().zip(fg).map(|(&v, &m)| if m { ff_to_gray(v) } else { 0 }).collect();
            let diff: Vec<u8> = plane_ff
                .iter()
                .zip(reference)
                .zip(fg)
                .map(|((&v, &r), &m)| difference_to_gray(if m { v - r } else { 0.0 }))
                .collect();
            write_gray_png(&png_dir.join(format!("ff_z{z:02}.png")), p.width, p.height, &gray).or_data()?;
            write_gray_png(&png_dir.join(format!("diff_z{z:02}.png")), p.width, p.height, &diff).or_data()?;
        }
        let pred_liver = liver_ff(&pred_vals, &liver).or_data()?;
        let ref_liver = match a.against {
            Against::Truth => subject.liver_ff,
            Against::Reference => liver_ff(&ref_vals, &liver).or_data()?,
        };
        predicted.push((p.info.id.clone(), pred_liver));
        references.push((p.info.id.clone(), ref_liver));
    }

    let report = liver_report(&predicted, &references, config.evaluation.cutoff).or_data()?;
    let r: Vec<f64> = references.iter().map(|v| v.1).collect();
    let q: Vec<f64> = predicted.iter().map(|v| v.1).collect();
    write_atomic(&a.out.join("report.csv"), report.to_csv().as_bytes()).or_data()?;
    write_atomic(&a.out.join("scatter.csv"), scatter_csv(&r, &q, &vec![true; r.len()]).as_bytes()).or_data()?;
    let against = match a.against {
        Against::Truth => "phantom truth",
        Against::Reference => METHOD_LABEL,
    };
    let summary = EvalSummary {
        against,
        report: &report,
        foreground_mae_vs_reference: voxel_err / voxel_n.max(1) as f64,
    };
    write_json(&a.out.join("report.json"), &summary).or_data()?;
    println!(
        "{} subjects vs {against}: liver MAE {:.6} bias {:+.6}, misclassified {} (normal->fatty {}, fatty->normal {}); foreground voxel MAE vs reference {:.6}",
        report.subjects.len(),
        report.mae,
        report.bias,
        report.misclassified(),
        report.normal_to_fatty,
        report.fatty_to_normal,
        summary.foreground_mae_vs_reference
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.precision == Precision::F32 {
        warn!("gradient checks run in f64 only; ignoring --precision f32");
    }
    let fault = a.fault_injection.then_some(1.01);
    let suite = run_suite(fault).map_err(|e| Failure::new(Kind::Numeric, e))?;
    for c in &suite.cases {
        println!(
            "{:<4} {:<22} checked {:>5} skipped {:>3} max relative error {:.3e}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.report.checked,
            c.report.skipped,
            c.report.max_rel_error
        );
    }
    println!("max relative error {:.3e} (tolerance {GRAD_TOLERANCE:e})", suite.max_rel_error());
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::new(Kind::Numeric, anyhow!("gradient check failed")))
    }
}
