use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::geometry::{EndpointHeads, Schedule, ScheduleKind, Support};
use crate::nncore::{read_checkpoint, write_checkpoint, Activation, NetParams, NetSpec, Network};
use crate::rng::stream;

/// Width of the sinusoidal time embedding fed to the backbone.
pub const TIME_EMBED_DIM: usize = 16;

/// Training objective and velocity parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Two-sided endpoint model; velocity induced by predicted endpoint means.
    Pawsterior,
    /// Direct velocity regression onto `theta_1 - theta_0`.
    Fmpe,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pawsterior => "pawsterior",
            Method::Fmpe => "fmpe",
        }
    }

    fn tag(self) -> u32 {
        match self {
            Method::Pawsterior => 0,
            Method::Fmpe => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Method::Pawsterior),
            1 => Ok(Method::Fmpe),
            other => Err(Error::Format(format!("unknown method tag {other}"))),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pawsterior" => Ok(Method::Pawsterior),
            "fmpe" => Ok(Method::Fmpe),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Per-coordinate affine standardization of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; near-constant columns keep unit scale.
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let scale = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, value: f64, d: usize) -> f64 {
        (value - self.mean[d]) / self.scale[d]
    }
}

/// Sinusoidal embedding of `t` with angular frequencies `pi * 2^(j-1)`,
/// `j = 0..8`, as `[sin, cos]` pairs.
pub fn time_embedding(t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), TIME_EMBED_DIM);
    for j in 0..TIME_EMBED_DIM / 2 {
        let w = PI * 2f64.powi(j as i32 - 1);
        out[2 * j] = (w * t).sin();
        out[2 * j + 1] = (w * t).cos();
    }
}

/// Conditional flow model over the parameter vector.
///
/// The backbone input is `concat(theta_t, embed(t), standardize(x))`. For
/// [`Method::Pawsterior`] the output holds the raw noise-endpoint mean
/// followed by the raw data-endpoint head; for [`Method::Fmpe`] it is the
/// velocity itself.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    method: Method,
    net: Network,
    pub params: NetParams,
    support: Support,
    schedule: ScheduleKind,
    x_dim: usize,
    x_norm: Standardizer,
}

impl FlowModel {
    pub fn new(
        method: Method,
        support: Support,
        x_dim: usize,
        hidden_dim: usize,
        num_blocks: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::Config("observation dimension must be >= 1".into()));
        }
        let d = support.dim();
        let output_dim = match method {
            Method::Pawsterior => EndpointHeads::for_support(&support).output_dim(),
            Method::Fmpe => d,
        };
        let spec = NetSpec::new(d + TIME_EMBED_DIM + x_dim, hidden_dim, num_blocks, output_dim, activation)?;
        let params = NetParams::init(&spec, &mut stream(seed, "init"), true);
        Ok(FlowModel {
            method,
            net: Network::new(spec)?,
            params,
            support,
            schedule: ScheduleKind::StraightLine,
            x_dim,
            x_norm: Standardizer::identity(x_dim),
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn spec(&self) -> &NetSpec {
        self.net.spec()
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn schedule(&self) -> ScheduleKind {
        self.schedule
    }

    pub fn theta_dim(&self) -> usize {
        self.support.dim()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn heads(&self) -> Option<EndpointHeads> {
        (self.method == Method::Pawsterior).then(|| EndpointHeads::for_support(&self.support))
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.x_norm
    }

    pub fn set_standardizer(&mut self, norm: Standardizer) -> Result<()> {
        check_len("standardizer", self.x_dim, norm.mean.len())?;
        check_len("standardizer", self.x_dim, norm.scale.len())?;
        self.x_norm = norm;
        Ok(())
    }

    /// Backbone inputs for a batch.
    pub fn inputs(&self, theta_t: ArrayView2<'_, f64>, t: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let d = self.theta_dim();
        let b = theta_t.nrows();
        check_len("theta_t columns", d, theta_t.ncols())?;
        check_len("observation columns", self.x_dim, x.ncols())?;
        check_len("time batch", b, t.len())?;
        let single_x = x.nrows() == 1;
        if !single_x {
            check_len("observation batch", b, x.nrows())?;
        }
        let mut out = Array2::zeros((b, self.spec().input_dim));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for j in 0..d {
                row[j] = theta_t[[i, j]];
            }
            time_embedding(t[i], &mut row[d..d + TIME_EMBED_DIM]);
            let xi = if single_x { 0 } else { i };
            for j in 0..self.x_dim {
                row[d + TIME_EMBED_DIM + j] = self.x_norm.apply(x[[xi, j]], j);
            }
        }
        Ok(out)
    }

    fn raw_outputs(&self, theta_t: ArrayView2<'_, f64>, t: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let inputs = self.inputs(theta_t, t, x)?;
        self.net.predict_batch(&self.params, inputs.view())
    }

    /// Endpoint means for a batch. `x` may hold a single row shared by all.
    pub fn endpoint_means_batch(
        &self,
        theta_t: ArrayView2<'_, f64>,
        t: &[f64],
        x: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.method != Method::Pawsterior {
            return Err(Error::Config("endpoint means need a pawsterior model".into()));
        }
        let d = self.theta_dim();
        let raw = self.raw_outputs(theta_t, t, x)?;
        let mu0 = raw.slice(s![.., ..d]).to_owned();
        let mut mu1 = raw.slice(s![.., d..]).to_owned();
        for mut row in mu1.axis_iter_mut(Axis(0)) {
            self.support
                .apply_head1_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok((mu0, mu1))
    }

    pub fn endpoint_means(&self, theta_t: &[f64], t: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let th = row_view(theta_t);
        let xv = row_view(x);
        let (mu0, mu1) = self.endpoint_means_batch(th, &[t], xv)?;
        Ok((mu0.into_raw_vec_and_offset().0, mu1.into_raw_vec_and_offset().0))
    }

    /// Velocity field for a batch. For the two-sided model this is
    /// `alpha'_t mu0 + beta'_t mu1`, defined on all of `[0, 1]`.
    pub fn velocity_batch(&self, theta_t: ArrayView2<'_, f64>, t: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self.method {
            Method::Fmpe => self.raw_outputs(theta_t, t, x),
            Method::Pawsterior => {
                let (mu0, mu1) = self.endpoint_means_batch(theta_t, t, x)?;
                Ok(self.combine(mu0, &mu1, t))
            }
        }
    }

    pub(crate) fn combine(&self, mut mu0: Array2<f64>, mu1: &Array2<f64>, t: &[f64]) -> Array2<f64> {
        for ((mut v, m1), &ti) in mu0.axis_iter_mut(Axis(0)).zip(mu1.axis_iter(Axis(0))).zip(t) {
            let (ad, bd) = (self.schedule.alpha_dot(ti), self.schedule.beta_dot(ti));
            v.zip_mut_with(&m1, |a, b| *a = ad * *a + bd * b);
        }
        mu0
    }

    pub fn velocity(&self, theta_t: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let v = self.velocity_batch(row_view(theta_t), &[t], row_view(x))?;
        Ok(v.into_raw_vec_and_offset().0)
    }

    /// Serialize as a `PAWF` checkpoint with the model descriptor in the
    /// extension block.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut ext = Vec::new();
        ext.write_u32::<LittleEndian>(self.method.tag())?;
        ext.write_u32::<LittleEndian>(self.schedule.tag())?;
        match &self.support {
            Support::Unbounded { dim } => {
                ext.write_u32::<LittleEndian>(0)?;
                ext.write_u32::<LittleEndian>(*dim as u32)?;
            }
            Support::Box { low, high } => {
                ext.write_u32::<LittleEndian>(1)?;
                ext.write_u32::<LittleEndian>(low.len() as u32)?;
                for (l, h) in low.iter().zip(high) {
                    ext.write_f64::<LittleEndian>(*l)?;
                    ext.write_f64::<LittleEndian>(*h)?;
                }
            }
            Support::SimplexProduct { blocks, size } => {
                ext.write_u32::<LittleEndian>(2)?;
                ext.write_u32::<LittleEndian>(*blocks as u32)?;
                ext.write_u32::<LittleEndian>(*size as u32)?;
            }
        }
        ext.write_u32::<LittleEndian>(self.x_dim as u32)?;
        for (m, s) in self.x_norm.mean.iter().zip(&self.x_norm.scale) {
            ext.write_f64::<LittleEndian>(*m)?;
            ext.write_f64::<LittleEndian>(*s)?;
        }
        ext.write_u32::<LittleEndian>(TIME_EMBED_DIM as u32)?;
        let mut out = Vec::new();
        write_checkpoint(&mut out, self.spec(), &self.params, &ext)?;
        Ok(out)
    }

    pub fn from_reader<R: Read>(r: &mut R) -> Result<Self> {
        let (spec, params, ext) = read_checkpoint(r)?;
        let mut e = ext.as_slice();
        let method = Method::from_tag(e.read_u32::<LittleEndian>()?)?;
        let schedule = ScheduleKind::from_tag(e.read_u32::<LittleEndian>()?)?;
        let support = match e.read_u32::<LittleEndian>()? {
            0 => Support::unbounded(e.read_u32::<LittleEndian>()? as usize)?,
            1 => {
                let dim = e.read_u32::<LittleEndian>()? as usize;
                let mut low = Vec::with_capacity(dim);
                let mut high = Vec::with_capacity(dim);
                for _ in 0..dim {
                    low.push(e.read_f64::<LittleEndian>()?);
                    high.push(e.read_f64::<LittleEndian>()?);
                }
                Support::boxed(low, high)?
            }
            2 => {
                let blocks = e.read_u32::<LittleEndian>()? as usize;
                let size = e.read_u32::<LittleEndian>()? as usize;
                Support::simplex_product(blocks, size)?
            }
            other => return Err(Error::Format(format!("unknown support tag {other}"))),
        };
        let x_dim = e.read_u32::<LittleEndian>()? as usize;
        let mut norm = Standardizer::identity(x_dim);
        for j in 0..x_dim {
            norm.mean[j] = e.read_f64::<LittleEndian>()?;
            norm.scale[j] = e.read_f64::<LittleEndian>()?;
        }
        let embed = e.read_u32::<LittleEndian>()? as usize;
        if embed != TIME_EMBED_DIM {
            return Err(Error::Format(format!("time embedding width {embed} unsupported")));
        }
        let d = support.dim();
        let expected_out = match method {
            Method::Pawsterior => 2 * d,
            Method::Fmpe => d,
        };
        if spec.input_dim != d + TIME_EMBED_DIM + x_dim || spec.output_dim != expected_out {
            return Err(Error::Format("checkpoint network shape does not match its descriptor".into()));
        }
        Ok(FlowModel {
            method,
            net: Network::new(spec)?,
            params,
            support,
            schedule,
            x_dim,
            x_norm: norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FlowModel::from_reader(&mut BufReader::new(File::open(path)?))
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn row_view(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row vector")
}
