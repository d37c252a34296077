//! Water/fat separation of multi-echo bipolar gradient-echo data.
//!
//! The crate covers the whole pipeline on synthetic phantoms: a multi-peak
//! signal model, a phantom generator, a conventional reference separator, a
//! small reverse-mode autodiff engine with a 2D U-Net on top, subject-level
//! cross-validated training and the liver fat-fraction evaluation protocol.
//!
//! ```no_run
//! use dxsep::{generate_subjects, separate, PhantomConfig, ReferenceConfig};
//!
//! let cfg = PhantomConfig::default();
//! let subjects = generate_subjects(1, 7, &cfg).unwrap();
//! let sep = separate(&subjects[0].echoes, None, &cfg.spectrum, &ReferenceConfig::default()).unwrap();
//! println!("{} voxels", sep.ff.len());
//! ```
//!
//! Everything is deterministic given the seeds. Parallelism is not used
//! inside the library, so results do not depend on the worker count.

pub mod adam;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod gradsuite;
pub mod io;
pub mod phantom;
pub mod reference;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Graph, NodeId};
pub use config::{ConfigError, EvaluationConfig, RunConfig};
pub use dataset::{generate_subjects, Dataset, DatasetError, Manifest};
pub use evaluation::{foreground_mask, liver_report, otsu_threshold, EvalError, ForegroundMask, LiverReport};
pub use io::{read_tensor, write_tensor, IoError, StoredTensor};
pub use phantom::{generate_subject, PhantomConfig, PhantomError, Subject, STEATOSIS_CUTOFF};
pub use reference::{separate, ReferenceConfig, ReferenceError, SeparationResult};
pub use signal::{
    AcquisitionConfig, EchoFamily, EchoSeries, EchoSubset, FatFractionMap, FatSpectrum, SignalError, VoxelModel,
};
pub use tensor::{Scalar, Tensor};
pub use training::{run_crossval, train_fold, Cohort, CrossvalResult, FoldOutcome, LossCurve, TrainConfig, TrainError};
pub use unet::{build_unet, UNetError, UNetParameters, UNetSpec};
