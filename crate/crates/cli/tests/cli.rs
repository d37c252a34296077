use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dxsep::dataset::read_manifest;
use dxsep::evaluation::{liver_ff, liver_report};
use dxsep::io::read_tensor;
use dxsep::STEATOSIS_CUTOFF;
use tempfile::TempDir;

/// Small, quick settings. 32x32 keeps depth-2 networks valid. The
/// reference fit models no R2* decay, so the phantoms carry none either.
const SMALL: &str = r#"
[phantom]
height = 32
width = 32
slices = 2
snr = "none"
r2star = [0.0, 0.0]

[network]
depth = 2
base_features = 4

[training]
epochs = 1
"#;

fn dxsep(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dxsep"));
    c.args(args).env_remove("DXS_THREADS").env("RUST_LOG", "warn");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Work { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn s(&self, p: &str) -> String {
        self.path(p).display().to_string()
    }

    fn phantom(&self, out: &str, n: usize) {
        let o = dxsep(&["--config", &self.s("small.toml"), "phantom", "--n", &n.to_string(), "--seed", "7", "--out", &self.s(out)], &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

/// Relative path -> bytes for every file below `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    let o = dxsep(&["--help"], &[]);
    assert_eq!(code(&o), 0);
    for cmd in ["phantom", "reference", "train", "eval", "gradcheck"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from --help");
    }
    assert_eq!(code(&dxsep(&["frobnicate"], &[])), 1);
    assert_eq!(code(&dxsep(&["phantom"], &[])), 1, "missing --out");
}

#[test]
fn phantom_writes_dataset_and_is_idempotent() {
    let w = Work::new();
    w.phantom("a", 3);
    let m = read_manifest(&w.path("a")).unwrap();
    assert_eq!(m.subjects.len(), 3);
    assert_eq!(m.master_seed, 7);
    let dirs = fs::read_dir(w.path("a")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 3);
    let first = tree(&w.path("a"));
    w.phantom("a", 3);
    assert_eq!(tree(&w.path("a")), first, "rerun overwrites deterministically");
}

#[test]
fn phantom_rejects_zero_subjects_and_bad_keys() {
    let w = Work::new();
    let o = dxsep(&["phantom", "--n", "0", "--out", &w.s("z")], &[]);
    assert_eq!(code(&o), 1);
    assert!(!w.path("z").join("manifest.json").exists());

    fs::write(w.path("typo.toml"), "[phantom]\nhieght = 32\n").unwrap();
    let o = dxsep(&["--config", &w.s("typo.toml"), "phantom", "--n", "1", "--out", &w.s("t")], &[]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("hieght"), "{}", stderr(&o));

    let o = dxsep(&["--config", &w.s("missing.toml"), "phantom", "--out", &w.s("t")], &[]);
    assert_ne!(code(&o), 0);
}

#[test]
fn reference_recovers_noiseless_ff_deterministically() {
    let w = Work::new();
    w.phantom("data", 2);
    let o = dxsep(&["--config", &w.s("small.toml"), "reference", "--dataset", &w.s("data"), "--out", &w.s("ref")], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let mae: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(mae < 0.005, "{line}");

    for id in ["subject_0000", "subject_0001"] {
        let ff = read_tensor(&w.path("ref").join(id).join("ff.dxt")).unwrap().into_f64();
        assert_eq!(ff.shape(), &[2, 32, 32]);
        assert!(ff.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let first = tree(&w.path("ref"));
    let o = dxsep(&["reference", "--dataset", &w.s("data"), "--out", &w.s("ref")], &[("DXS_THREADS", "2")]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&w.path("ref")), first, "rerun with 2 workers is byte-identical");
}

#[test]
fn reference_fails_on_missing_files() {
    let w = Work::new();
    w.phantom("data", 2);
    fs::remove_file(w.path("data").join("subject_0001").join("echoes.dxt")).unwrap();
    let o = dxsep(&["reference", "--dataset", &w.s("data"), "--out", &w.s("ref")], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = dxsep(&["reference", "--dataset", &w.s("nowhere"), "--out", &w.s("ref")], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = dxsep(&["gradcheck"], &[("DXS_THREADS", "0")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_rejects_illegal_echo_subsets() {
    let w = Work::new();
    w.phantom("data", 5);
    for bad in ["2,3", "odd:4", "all:0", "seven"] {
        let o = dxsep(
            &["--config", &w.s("small.toml"), "train", "--dataset", &w.s("data"), "--out", &w.s("t"), "--echoes", bad],
            &[],
        );
        assert_eq!(code(&o), 1, "{bad}: {}", stderr(&o));
    }
}

fn train(w: &Work, echoes: &str, out: &str) -> Output {
    dxsep(
        &["--config", &w.s("small.toml"), "train", "--dataset", &w.s("data"), "--out", &w.s(out), "--echoes", echoes, "--folds", "0"],
        &[("DXS_THREADS", "1")],
    )
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn arch_channels(dir: &Path) -> u64 {
    json(&dir.join("fold_0").join("checkpoint").join("arch.json"))["spec"]["in_channels"].as_u64().unwrap()
}

#[test]
fn train_and_eval_end_to_end() {
    let w = Work::new();
    w.phantom("data", 5);

    let o = train(&w, "all:5", "all5");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(arch_channels(&w.path("all5")), 10);
    let loss = fs::read_to_string(w.path("all5").join("fold_0").join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "header plus one epoch");

    let o = train(&w, "odd:3", "odd3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(arch_channels(&w.path("odd3")), 6);
    let o = train(&w, "2,4", "even2");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(arch_channels(&w.path("even2")), 4);

    // identical seeds, identical bytes
    let o = train(&w, "all:5", "again");
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&w.path("again")), tree(&w.path("all5")));

    let o = dxsep(
        &["eval", "--predictions", &w.s("all5/predictions"), "--dataset", &w.s("data"), "--out", &w.s("eval")],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["report.csv", "report.json", "scatter.csv"] {
        assert!(w.path("eval").join(f).is_file(), "{f}");
    }

    // the printed MAE is the evaluation module's value
    let preds_dir = w.path("all5").join("predictions");
    let m = read_manifest(&w.path("data")).unwrap();
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for e in fs::read_dir(&preds_dir).unwrap() {
        let d = e.unwrap().path();
        let id = d.file_name().unwrap().to_string_lossy().into_owned();
        let ff = read_tensor(&d.join("ff.dxt")).unwrap().into_f64();
        let liver = read_tensor(&w.path("data").join(&id).join("liver_mask.dxt")).unwrap().into_f64();
        let slices: Vec<usize> = json(&d.join("prediction.json"))["slices"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let plane = 32 * 32;
        let mask: Vec<bool> = slices.iter().flat_map(|&z| liver.data()[z * plane..(z + 1) * plane].iter().map(|&v| v > 0.5)).collect();
        preds.push((id.clone(), liver_ff(ff.data(), &mask).unwrap()));
        refs.push((id.clone(), m.subjects.iter().find(|s| s.id == id).unwrap().liver_ff));
    }
    let expected = liver_report(&preds, &refs, STEATOSIS_CUTOFF).unwrap();
    let line = stdout(&o);
    let printed: f64 = line.split("liver MAE ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((printed - expected.mae).abs() < 1e-6, "{line} vs {}", expected.mae);
    let stored = json(&w.path("eval").join("report.json"))["report"]["mae"].as_f64().unwrap();
    assert!((stored - expected.mae).abs() < 1e-12, "{stored} vs {}", expected.mae);

    // PNG exports decode to the declared gray mapping
    let id = &preds[0].0;
    let png_dir = w.path("eval").join("png").join(id);
    let pngs: Vec<_> = fs::read_dir(&png_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(pngs.iter().any(|n| n.to_string_lossy().starts_with("ff_z")));
    assert!(pngs.iter().any(|n| n.to_string_lossy().starts_with("diff_z")));
    let first = pngs.iter().find(|n| n.to_string_lossy().starts_with("ff_z")).unwrap();
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(png_dir.join(first)).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height, info.color_type), (32, 32, png::ColorType::Grayscale));
    assert_eq!(buf[0], 0, "corner is background and zeroed");
}

#[test]
fn eval_rejects_mismatched_subjects() {
    let w = Work::new();
    w.phantom("data", 5);
    let o = train(&w, "all:1", "t");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // a prediction for a subject the dataset does not have
    let preds = w.path("t/predictions");
    let src = fs::read_dir(&preds).unwrap().next().unwrap().unwrap().path();
    let dst = preds.join("subject_9999");
    fs::create_dir(&dst).unwrap();
    for f in ["ff.dxt", "reference_ff.dxt", "foreground.dxt"] {
        fs::copy(src.join(f), dst.join(f)).unwrap();
    }
    let mut info = json(&src.join("prediction.json"));
    info["id"] = "subject_9999".into();
    fs::write(dst.join("prediction.json"), info.to_string()).unwrap();
    let o = dxsep(&["eval", "--predictions", &w.s("t/predictions"), "--dataset", &w.s("data"), "--out", &w.s("e")], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("subject_9999"), "{}", stderr(&o));
    assert!(!w.path("e").join("report.json").exists());
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = dxsep(&["gradcheck"], &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));

    let o = dxsep(&["gradcheck", "--fault-injection"], &[]);
    assert_eq!(code(&o), 3);

    let o = dxsep(&["gradcheck", "--precision", "f32"], &[("RUST_LOG", "warn")]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("f64"), "{}", stderr(&o));
}
