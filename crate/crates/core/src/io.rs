//! On-disk dataset and posterior format.
//!
//! A dataset is a directory holding `manifest.json` plus raw little-endian
//! `f64` blobs. Complex values are interleaved `(re, im)`; arrays are
//! row-major with the frame index outermost.
//!
//! | file        | shape             | kind    |
//! |-------------|-------------------|---------|
//! | `y.bin`     | `T x M`           | complex |
//! | `a.bin`     | `K x M x N`       | complex (`K` = 1 if time-invariant, else `T`) |
//! | `x.bin`     | `T x N`           | complex (ground truth, optional) |
//! | `theta.bin` | `T x N`           | complex (ground truth, optional) |
//! | `s.bin`     | `T x N`           | real, 0 or 1 (ground truth, optional) |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, C64};
use crate::model::{Dims, DynamicDataset, GroundTruth, ModelParams, Operators};
use crate::posterior::PosteriorEstimates;

pub const DATASET_FORMAT: &str = "dyncs-dataset";
pub const POSTERIOR_FORMAT: &str = "dyncs-posterior";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub time_invariant: bool,
    pub has_truth: bool,
    pub params: Option<ModelParams>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub library_version: String,
    /// Configuration of the run that wrote the dataset, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn encode_complex(values: impl IntoIterator<Item = C64>) -> Vec<u8> {
    values.into_iter().flat_map(|c| c.re.to_le_bytes().into_iter().chain(c.im.to_le_bytes())).collect()
}

fn encode_real(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn decode_real(bytes: &[u8], expected: usize, name: &str) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!("{name}: {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

fn decode_complex(bytes: &[u8], expected: usize, name: &str) -> Result<Vec<C64>> {
    let flat = decode_real(bytes, expected * 2, name)?;
    Ok(flat.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect())
}

fn read_blob(dir: &Path, name: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(name)).map_err(|e| Error::Format(format!("{}: {e}", dir.join(name).display())))
}

fn split_rows<T: Clone>(flat: Vec<T>, width: usize) -> Vec<Vec<T>> {
    flat.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

/// Writes a dataset directory, creating it if needed.
pub fn write_dataset(data: &DynamicDataset, dir: &Path) -> Result<()> {
    write_dataset_with_config(data, dir, None)
}

/// As [`write_dataset`], recording `config` in the manifest.
pub fn write_dataset_with_config(data: &DynamicDataset, dir: &Path, config: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        dims: data.dims,
        time_invariant: data.operators.is_time_invariant(),
        has_truth: data.truth.is_some(),
        params: data.params,
        seed: data.seed,
        library_version: crate::VERSION.into(),
        config,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("y.bin"), encode_complex(data.y.iter().flatten().copied()))?;
    let ops: Vec<&DenseMatrix> = match &data.operators {
        Operators::Shared(a) => vec![a],
        Operators::PerFrame(v) => v.iter().collect(),
    };
    fs::write(dir.join("a.bin"), encode_complex(ops.iter().flat_map(|a| a.as_slice().iter().copied())))?;
    if let Some(truth) = &data.truth {
        fs::write(dir.join("x.bin"), encode_complex(truth.x.iter().flatten().copied()))?;
        fs::write(dir.join("theta.bin"), encode_complex(truth.theta.iter().flatten().copied()))?;
        fs::write(dir.join("s.bin"), encode_real(truth.s.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 })))?;
    }
    Ok(())
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<DynamicDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DATASET_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {} v{}", manifest.format, manifest.version)));
    }
    let Dims { n, m, t } = Dims::new(manifest.dims.n, manifest.dims.m, manifest.dims.t)?;
    let y = split_rows(decode_complex(&read_blob(dir, "y.bin")?, t * m, "y.bin")?, m);
    let k = if manifest.time_invariant { 1 } else { t };
    let a_flat = decode_complex(&read_blob(dir, "a.bin")?, k * m * n, "a.bin")?;
    let mats =
        a_flat.chunks(m * n).map(|c| DenseMatrix::from_row_major(m, n, c.to_vec())).collect::<Result<Vec<_>>>()?;
    let operators = if manifest.time_invariant {
        Operators::Shared(mats.into_iter().next().expect("one operator"))
    } else {
        Operators::PerFrame(mats)
    };
    let truth = if manifest.has_truth {
        let x = split_rows(decode_complex(&read_blob(dir, "x.bin")?, t * n, "x.bin")?, n);
        let theta = split_rows(decode_complex(&read_blob(dir, "theta.bin")?, t * n, "theta.bin")?, n);
        let s_flat = decode_real(&read_blob(dir, "s.bin")?, t * n, "s.bin")?;
        if s_flat.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Format("s.bin holds values other than 0 and 1".into()));
        }
        let s = split_rows(s_flat.into_iter().map(|v| v == 1.0).collect(), n);
        let truth = GroundTruth::from_parts(s, theta);
        if truth.x != x {
            return Err(Error::Format("x.bin is not s * theta".into()));
        }
        Some(truth)
    } else {
        None
    };
    let mut data = DynamicDataset::new(y, operators)?;
    if data.dims != manifest.dims {
        return Err(Error::Format("manifest dims disagree with the stored operator".into()));
    }
    data.truth = truth;
    data.params = manifest.params;
    data.seed = manifest.seed;
    data.validate()?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorManifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub n: usize,
    /// Which optional blobs are present.
    pub has_variance: bool,
    pub has_support: bool,
    #[serde(default)]
    pub library_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Writes `x_mean.bin` (complex), and when available `x_var.bin` and
/// `s_prob.bin` (real), all `T x N`.
pub fn write_posteriors(post: &PosteriorEstimates, dir: &Path) -> Result<()> {
    write_posteriors_with_config(post, dir, None)
}

/// As [`write_posteriors`], recording `config` in the manifest.
pub fn write_posteriors_with_config(
    post: &PosteriorEstimates,
    dir: &Path,
    config: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (t, n) = (post.frames(), post.dim());
    let has_variance = post.x_var.len() == t && t > 0;
    let has_support = post.s_prob.len() == t && t > 0;
    let manifest = PosteriorManifest {
        format: POSTERIOR_FORMAT.into(),
        version: FORMAT_VERSION,
        frames: t,
        n,
        has_variance,
        has_support,
        library_version: crate::VERSION.into(),
        config,
    };
    fs::write(dir.join("posterior.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("x_mean.bin"), encode_complex(post.x_mean.iter().flatten().copied()))?;
    if has_variance {
        fs::write(dir.join("x_var.bin"), encode_real(post.x_var.iter().flatten().copied()))?;
    }
    if has_support {
        fs::write(dir.join("s_prob.bin"), encode_real(post.s_prob.iter().flatten().copied()))?;
    }
    Ok(())
}

pub fn read_posteriors(dir: &Path) -> Result<PosteriorEstimates> {
    let manifest: PosteriorManifest = serde_json::from_str(&fs::read_to_string(dir.join("posterior.json"))?)?;
    if manifest.format != POSTERIOR_FORMAT {
        return Err(Error::Format(format!("unsupported posterior format {}", manifest.format)));
    }
    let (t, n) = (manifest.frames, manifest.n);
    let mut post = PosteriorEstimates {
        x_mean: split_rows(decode_complex(&read_blob(dir, "x_mean.bin")?, t * n, "x_mean.bin")?, n),
        ..Default::default()
    };
    if manifest.has_variance {
        post.x_var = split_rows(decode_real(&read_blob(dir, "x_var.bin")?, t * n, "x_var.bin")?, n);
    }
    if manifest.has_support {
        post.s_prob = split_rows(decode_real(&read_blob(dir, "s_prob.bin")?, t * n, "s_prob.bin")?, n);
    }
    Ok(post)
}
