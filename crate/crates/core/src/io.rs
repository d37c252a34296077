//! `DXT1` tensor container, atomic file writes and 8-bit grayscale PNG export.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"DXT1" | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | rank x u32 extents | payload
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DXT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: PNG encoding failed: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl IoError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), reason: reason.into() }
    }
}

/// A tensor read back from disk in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t,
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Serialize a tensor into the container format.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits in u32").to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<StoredTensor, IoError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(IoError::format(path, "missing DXT1 magic"));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| IoError::format(path, format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(IoError::format(path, "truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * dtype.size() {
        return Err(IoError::format(
            path,
            format!("payload is {} bytes, shape {shape:?} needs {}", payload.len(), count * dtype.size()),
        ));
    }
    let bad = |e| IoError::format(path, format!("{e}"));
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(
            Tensor::from_vec(
                shape,
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .map_err(bad)?,
        ),
        DType::F64 => StoredTensor::F64(
            Tensor::from_vec(
                shape,
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .map_err(bad)?,
        ),
    })
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(IoError::io(path, e));
    }
    Ok(())
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), IoError> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), source: e })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.to_path_buf(), source: e })
}

/// Fat fraction in `[0, 1]` to gray level, rounding half up.
pub fn ff_to_gray(ff: f64) -> u8 {
    (ff.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Signed fat-fraction difference to gray level: -0.1 -> 0, 0 -> 128, +0.1 -> 255.
pub fn difference_to_gray(diff: f64) -> u8 {
    let d = diff.clamp(-0.1, 0.1);
    if d >= 0.0 {
        (128.0 + d / 0.1 * 127.0 + 0.5).floor() as u8
    } else {
        (128.0 + d / 0.1 * 128.0 + 0.5).floor() as u8
    }
}

pub fn encode_gray_png(width: usize, height: usize, pixels: &[u8], path: &Path) -> Result<Vec<u8>, IoError> {
    assert_eq!(pixels.len(), width * height);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| IoError::Png { path: path.to_path_buf(), reason: e.to_string() };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(pixels).map_err(png_err)?;
    }
    Ok(out)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), IoError> {
    let bytes = encode_gray_png(width, height, pixels, path)?;
    write_atomic(path, &bytes)
}
