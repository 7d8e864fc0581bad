//! On-disk formats: flat little-endian `f32` arrays described by JSON
//! sidecars.
//!
//! A dataset `name.json` points at `name.theta.f32` and `name.x.f32`. A
//! sample file `name.json` points at `name.f32`, holding one block of
//! `n x theta_dim` draws per conditioning observation.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tasks::TaskConfig;

pub const DATASET_FORMAT: &str = "sbi-vfm-dataset/1";
pub const SAMPLES_FORMAT: &str = "sbi-vfm-samples/1";

/// Write values as contiguous little-endian `f32`.
pub fn write_f32_array(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = vec![0u8; values.len() * 4];
    for (chunk, v) in buf.chunks_exact_mut(4).zip(values) {
        LittleEndian::write_f32(chunk, *v as f32);
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read a flat `f32` file that must hold exactly `expected` values.
pub fn read_f32_array(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: expected {expected} f32 values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect())
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn sibling(json: &Path, suffix: &str) -> Result<(PathBuf, String)> {
    let stem = json
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad output path {}", json.display())))?;
    let name = format!("{stem}{suffix}");
    Ok((json.with_file_name(&name), name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub task: TaskConfig,
    pub seed: u64,
    pub count: usize,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub theta_file: String,
    pub x_file: String,
}

/// Parameter/observation pairs, one row per simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub task: TaskConfig,
    pub seed: u64,
    pub theta: Array2<f64>,
    pub x: Array2<f64>,
}

impl SimDataset {
    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write the manifest at `path` plus its two arrays; returns every file
    /// written.
    pub fn write(&self, path: &Path) -> Result<Vec<PathBuf>> {
        if self.x.nrows() != self.theta.nrows() {
            return Err(Error::shape("dataset rows", self.theta.nrows(), self.x.nrows()));
        }
        let (theta_path, theta_file) = sibling(path, ".theta.f32")?;
        let (x_path, x_file) = sibling(path, ".x.f32")?;
        write_f32_array(&theta_path, self.theta.as_standard_layout().as_slice().expect("contiguous"))?;
        write_f32_array(&x_path, self.x.as_standard_layout().as_slice().expect("contiguous"))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            task: self.task,
            seed: self.seed,
            count: self.len(),
            theta_dim: self.theta.ncols(),
            x_dim: self.x.ncols(),
            theta_file,
            x_file,
        };
        write_json(path, &manifest)?;
        Ok(vec![path.to_path_buf(), theta_path, x_path])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!("{}: unknown format {:?}", path.display(), m.format)));
        }
        let theta = read_f32_array(&path.with_file_name(&m.theta_file), m.count * m.theta_dim)?;
        let x = read_f32_array(&path.with_file_name(&m.x_file), m.count * m.x_dim)?;
        Ok(SimDataset {
            task: m.task,
            seed: m.seed,
            theta: Array2::from_shape_vec((m.count, m.theta_dim), theta).expect("length checked"),
            x: Array2::from_shape_vec((m.count, m.x_dim), x).expect("length checked"),
        })
    }
}

/// Where a sample file's draws came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Model,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSidecar {
    pub format: String,
    pub source: SampleSource,
    /// `[observations, draws per observation, theta_dim]`.
    pub shape: [usize; 3],
    pub seed: u64,
    pub n_steps: Option<usize>,
    pub model_hash: Option<String>,
    pub method: Option<String>,
    pub task: Option<TaskConfig>,
    /// Conditioning observations, one per block.
    pub observations: Vec<Vec<f64>>,
    pub data_file: String,
}

/// Posterior draws for a set of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub meta: SampleSidecar,
    pub samples: Array3<f64>,
}

impl SampleSet {
    pub fn new(meta: SampleSidecar, blocks: Vec<Array2<f64>>) -> Result<Self> {
        let (n, d) = blocks.first().map(|b| b.dim()).unwrap_or((meta.shape[1], meta.shape[2]));
        if blocks.len() != meta.observations.len() {
            return Err(Error::shape("sample blocks", meta.observations.len(), blocks.len()));
        }
        let mut flat = Vec::with_capacity(blocks.len() * n * d);
        for b in &blocks {
            if b.dim() != (n, d) {
                return Err(Error::shape("sample block rows", n, b.nrows()));
            }
            flat.extend(b.iter());
        }
        let mut meta = meta;
        meta.shape = [blocks.len(), n, d];
        Ok(SampleSet {
            meta,
            samples: Array3::from_shape_vec((blocks.len(), n, d), flat).expect("length checked"),
        })
    }

    pub fn block(&self, i: usize) -> Array2<f64> {
        self.samples.index_axis(ndarray::Axis(0), i).to_owned()
    }

    pub fn write(&self, path: &Path) -> Result<Vec<PathBuf>> {
        let (data_path, data_file) = sibling(path, ".f32")?;
        write_f32_array(&data_path, self.samples.as_standard_layout().as_slice().expect("contiguous"))?;
        let mut meta = self.meta.clone();
        meta.data_file = data_file;
        meta.format = SAMPLES_FORMAT.into();
        write_json(path, &meta)?;
        Ok(vec![path.to_path_buf(), data_path])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: SampleSidecar = read_json(path)?;
        if meta.format != SAMPLES_FORMAT {
            return Err(Error::Format(format!("{}: unknown format {:?}", path.display(), meta.format)));
        }
        let [m, n, d] = meta.shape;
        let data = read_f32_array(&path.with_file_name(&meta.data_file), m * n * d)?;
        Ok(SampleSet {
            samples: Array3::from_shape_vec((m, n, d), data).expect("length checked"),
            meta,
        })
    }
}
