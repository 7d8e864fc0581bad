//! Interpolation schedules, confinement coefficients and constrained
//! endpoint heads.
//!
//! With an affine path `x_t = alpha_t x_0 + beta_t x_1` and a data endpoint
//! confined to a convex set `Omega`, the population velocity splits as
//! `a_t x_t + c_t E[x_1 | x_t]` where `a_t = alpha'_t / alpha_t` and
//! `c_t = beta'_t - a_t beta_t`. Any endpoint mean that lies in `Omega`
//! therefore yields a velocity in `a_t x_t + c_t Omega`. The heads below make
//! the predicted data-endpoint mean land in `Omega` by construction.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Tolerance used when checking simplex blocks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Fraction of the box width kept free at each edge by the tanh head so
/// saturated outputs stay strictly inside the box in floating point.
pub const BOX_MARGIN: f64 = 1e-9;

/// Affine interpolation schedule between a noise endpoint (t = 0) and a data
/// endpoint (t = 1).
pub trait Schedule {
    fn alpha(&self, t: f64) -> f64;
    fn beta(&self, t: f64) -> f64;
    fn alpha_dot(&self, t: f64) -> f64;
    fn beta_dot(&self, t: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `x_t = (1 - t) x_0 + t x_1`
    #[default]
    StraightLine,
}

impl ScheduleKind {
    pub fn tag(self) -> u32 {
        match self {
            ScheduleKind::StraightLine => 0,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ScheduleKind::StraightLine),
            other => Err(Error::Format(format!("unknown schedule tag {other}"))),
        }
    }
}

impl Schedule for ScheduleKind {
    fn alpha(&self, t: f64) -> f64 {
        match self {
            ScheduleKind::StraightLine => 1.0 - t,
        }
    }

    fn beta(&self, t: f64) -> f64 {
        match self {
            ScheduleKind::StraightLine => t,
        }
    }

    fn alpha_dot(&self, _t: f64) -> f64 {
        match self {
            ScheduleKind::StraightLine => -1.0,
        }
    }

    fn beta_dot(&self, _t: f64) -> f64 {
        match self {
            ScheduleKind::StraightLine => 1.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

pub fn interpolate<S: Schedule + ?Sized>(schedule: &S, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("interpolation endpoints", x0.len(), x1.len())?;
    check_time(t)?;
    let (a, b) = (schedule.alpha(t), schedule.beta(t));
    Ok(x0.iter().zip(x1).map(|(u, v)| a * u + b * v).collect())
}

pub fn instantaneous_velocity<S: Schedule + ?Sized>(
    schedule: &S,
    x0: &[f64],
    x1: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len("interpolation endpoints", x0.len(), x1.len())?;
    check_time(t)?;
    let (a, b) = (schedule.alpha_dot(t), schedule.beta_dot(t));
    Ok(x0.iter().zip(x1).map(|(u, v)| a * u + b * v).collect())
}

/// Velocity induced by a pair of endpoint means. Needs no division, so it is
/// defined on the closed interval.
pub fn two_sided_velocity<S: Schedule + ?Sized>(schedule: &S, mu0: &[f64], mu1: &[f64], t: f64) -> Result<Vec<f64>> {
    instantaneous_velocity(schedule, mu0, mu1, t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfinementCoeffs {
    pub a: f64,
    pub c: f64,
    pub t: f64,
}

impl ConfinementCoeffs {
    /// One-sided velocity `a_t x_t + c_t m`.
    pub fn velocity(&self, x_t: &[f64], m: &[f64]) -> Vec<f64> {
        x_t.iter().zip(m).map(|(x, m)| self.a * x + self.c * m).collect()
    }
}

/// Coefficients of the affine decomposition. Undefined where `alpha_t = 0`
/// (t = 1 for the straight line); callers use the two-sided velocity there.
pub fn confinement_coeffs<S: Schedule + ?Sized>(schedule: &S, t: f64) -> Result<ConfinementCoeffs> {
    check_time(t)?;
    let alpha = schedule.alpha(t);
    if alpha == 0.0 || t >= 1.0 {
        return Err(Error::Domain(format!(
            "confinement coefficients need alpha_t != 0 (t = {t})"
        )));
    }
    let a = schedule.alpha_dot(t) / alpha;
    let c = schedule.beta_dot(t) - a * schedule.beta(t);
    Ok(ConfinementCoeffs { a, c, t })
}

/// Feasible set of the parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    Unbounded { dim: usize },
    Box { low: Vec<f64>, high: Vec<f64> },
    /// `blocks` consecutive probability simplices of `size` coordinates.
    SimplexProduct { blocks: usize, size: usize },
}

impl Support {
    pub fn unbounded(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("support dimension must be >= 1".into()));
        }
        Ok(Support::Unbounded { dim })
    }

    pub fn boxed(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_len("box bounds", low.len(), high.len())?;
        if low.is_empty() {
            return Err(Error::Config("box support needs at least one dimension".into()));
        }
        if let Some(d) = low.iter().zip(&high).position(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::Config(format!("box dimension {d} needs finite low < high")));
        }
        Ok(Support::Box { low, high })
    }

    pub fn simplex_product(blocks: usize, size: usize) -> Result<Self> {
        if blocks == 0 || size < 2 {
            return Err(Error::Config(format!(
                "simplex product needs >= 1 block of size >= 2, got {blocks} x {size}"
            )));
        }
        Ok(Support::SimplexProduct { blocks, size })
    }

    pub fn dim(&self) -> usize {
        match self {
            Support::Unbounded { dim } => *dim,
            Support::Box { low, .. } => low.len(),
            Support::SimplexProduct { blocks, size } => blocks * size,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, Support::SimplexProduct { .. })
    }

    /// Whether `point` lies in the set (simplex sums checked to
    /// [`SIMPLEX_TOL`]).
    pub fn membership(&self, point: &[f64]) -> bool {
        self.membership_tol(point, 0.0)
    }

    /// Membership with an extra slack `tol` on box bounds and simplex
    /// nonnegativity.
    pub fn membership_tol(&self, point: &[f64], tol: f64) -> bool {
        if point.len() != self.dim() || point.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            Support::Unbounded { .. } => true,
            Support::Box { low, high } => point
                .iter()
                .zip(low.iter().zip(high))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
            Support::SimplexProduct { size, .. } => point.chunks(*size).all(|block| {
                block.iter().all(|&v| v >= -tol) && (block.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
            }),
        }
    }

    pub fn head1(&self) -> Head1 {
        match self {
            Support::Unbounded { .. } => Head1::Unconstrained,
            Support::Box { .. } => Head1::TanhBox,
            Support::SimplexProduct { .. } => Head1::CategoricalLogits,
        }
    }

    /// Map raw network outputs to a data-endpoint mean in the set.
    pub fn apply_head1(&self, raw: &[f64]) -> Result<Vec<f64>> {
        check_len("head1 input", self.dim(), raw.len())?;
        let mut out = raw.to_vec();
        self.apply_head1_in_place(&mut out);
        Ok(out)
    }

    pub(crate) fn apply_head1_in_place(&self, raw: &mut [f64]) {
        match self {
            Support::Unbounded { .. } => {}
            Support::Box { low, high } => {
                for (v, (l, h)) in raw.iter_mut().zip(low.iter().zip(high)) {
                    *v = squash(*v, *l, *h);
                }
            }
            Support::SimplexProduct { size, .. } => {
                for block in raw.chunks_mut(*size) {
                    softmax_in_place(block);
                }
            }
        }
    }

    /// Derivative of a box-head output with respect to its raw input.
    pub(crate) fn box_slope(low: f64, high: f64, raw: f64) -> f64 {
        let th = raw.tanh();
        (high - low) * (1.0 - 2.0 * BOX_MARGIN) * 0.5 * (1.0 - th * th)
    }

    /// Replace every simplex block by the one-hot vertex at its argmax.
    /// Ties go to the lowest index. No-op for continuous supports.
    pub fn project_one_hot(&self, point: &mut [f64]) {
        if let Support::SimplexProduct { size, .. } = self {
            for block in point.chunks_mut(*size) {
                let k = argmax(block);
                block.fill(0.0);
                block[k] = 1.0;
            }
        }
    }

    /// True when every simplex block is exactly a one-hot vector.
    pub fn is_one_hot(&self, point: &[f64]) -> bool {
        match self {
            Support::SimplexProduct { size, .. } => {
                point.len() == self.dim()
                    && point.chunks(*size).all(|b| {
                        b.iter().all(|&v| v == 0.0 || v == 1.0) && b.iter().filter(|&&v| v == 1.0).count() == 1
                    })
            }
            _ => false,
        }
    }
}

/// Kind of the data-endpoint head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head1 {
    Unconstrained,
    TanhBox,
    CategoricalLogits,
}

/// Two heads on a shared backbone: the noise-endpoint head is always an
/// unconstrained Gaussian mean; the data-endpoint head follows the support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EndpointHeads {
    pub dim: usize,
    pub head1: Head1,
}

impl EndpointHeads {
    pub fn for_support(support: &Support) -> Self {
        EndpointHeads {
            dim: support.dim(),
            head1: support.head1(),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.dim
    }
}

/// Apply the data-endpoint head of `heads` on `support`.
pub fn apply_head1(heads: &EndpointHeads, support: &Support, raw: &[f64]) -> Result<Vec<f64>> {
    if heads.head1 != support.head1() || heads.dim != support.dim() {
        return Err(Error::Config("endpoint heads do not match the support".into()));
    }
    support.apply_head1(raw)
}

#[inline]
fn squash(raw: f64, low: f64, high: f64) -> f64 {
    let unit = (raw.tanh() + 1.0) * 0.5;
    low + (high - low) * (BOX_MARGIN + (1.0 - 2.0 * BOX_MARGIN) * unit)
}

pub(crate) fn softmax_in_place(block: &mut [f64]) {
    let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in block.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in block.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax(block: &[f64]) -> Vec<f64> {
    let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + block.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    block.iter().map(|v| v - lse).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
