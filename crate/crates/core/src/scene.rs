//! Scene representation: Gaussian ellipsoids, array geometry, measurements.
//!
//! Angles follow one convention everywhere: elevation `θ` from the +z axis,
//! azimuth `φ` from +x in the x-y plane. The receiver's reception hemisphere
//! is the `x >= 0` half-space of its local frame, which is what the AOA grid
//! `θ ∈ (0, π)`, `φ ∈ (-π/2, π/2)` covers.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CkmError, Result};
use crate::harmonics::{BshCoefficients, BshPart, BSH_FREE_COUNT, SH_DEGREE};

/// Offsets of each parameter kind inside a flat per-ellipsoid block.
pub mod layout {
    use super::BSH_FREE_COUNT;

    pub const MEAN: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALES: usize = 7;
    pub const RAW_OPACITY: usize = 10;
    pub const RAW_GAMMA: usize = 11;
    pub const Z_COEFF: usize = 12;
    pub const BSH_RE: usize = 13;
    pub const BSH_IM: usize = BSH_RE + BSH_FREE_COUNT;
    pub const LEN: usize = BSH_IM + BSH_FREE_COUNT;
}

pub const PARAMS_PER_ELLIPSOID: usize = layout::LEN;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `∂L/∂R` back to the raw quaternion through normalization.
pub fn quat_matrix_adjoint(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |i: usize, j: usize| d_r[(i, j)];
    // Gradient with respect to the normalized quaternion.
    let gw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let qn = [w, x, y, z];
    let gn = [gw, gx, gy, gz];
    let dot: f64 = qn.iter().zip(&gn).map(|(a, b)| a * b).sum();
    [
        (gn[0] - dot * qn[0]) / n,
        (gn[1] - dot * qn[1]) / n,
        (gn[2] - dot * qn[2]) / n,
        (gn[3] - dot * qn[3]) / n,
    ]
}

/// Activated (constrained) values of an ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub alpha_max: f64,
    pub gamma_max: f64,
    pub scales: Vector3<f64>,
}

/// The learnable scene primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEllipsoid {
    pub mean: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; kept unit-norm after each optimizer step.
    pub rotation: [f64; 4],
    pub log_scales: Vector3<f64>,
    pub raw_opacity: f64,
    pub raw_gamma: f64,
    pub z_coeff: f64,
    pub bsh_re: BshCoefficients,
    pub bsh_im: BshCoefficients,
}

impl GaussianEllipsoid {
    /// Isotropic ellipsoid with identity rotation and zero BSH coefficients.
    pub fn isotropic(mean: Vector3<f64>, scale: f64) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scales: Vector3::repeat(scale.ln()),
            raw_opacity: 0.0,
            raw_gamma: 0.0,
            z_coeff: 0.0,
            bsh_re: BshCoefficients::zeros(BshPart::Real),
            bsh_im: BshCoefficients::zeros(BshPart::Imag),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scales.max().exp()
    }

    pub fn activate(&self, wavelength: f64) -> Activated {
        Activated {
            alpha_max: sigmoid(self.raw_opacity),
            gamma_max: wavelength * sigmoid(self.raw_gamma),
            scales: self.scales(),
        }
    }

    /// `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.log_scales.map(|l| (2.0 * l).exp());
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    /// `Σ⁻¹ = R S⁻² Rᵀ`, built from the factors rather than by inversion.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.log_scales.map(|l| (-2.0 * l).exp());
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    /// Condition number of the covariance.
    pub fn condition_number(&self) -> f64 {
        let s = self.scales();
        (s.max() / s.min()).powi(2)
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn gaussian_density(&self, x: &Vector3<f64>) -> Result<f64> {
        let cond = self.condition_number();
        if !(cond < 1e12) {
            return Err(CkmError::IllConditioned(cond));
        }
        let d = x - self.mean;
        Ok((-0.5 * d.dot(&(self.precision() * d))).exp())
    }

    pub fn write_params(&self, out: &mut [f64]) {
        use layout::*;
        out[MEAN..MEAN + 3].copy_from_slice(self.mean.as_slice());
        out[ROTATION..ROTATION + 4].copy_from_slice(&self.rotation);
        out[LOG_SCALES..LOG_SCALES + 3].copy_from_slice(self.log_scales.as_slice());
        out[RAW_OPACITY] = self.raw_opacity;
        out[RAW_GAMMA] = self.raw_gamma;
        out[Z_COEFF] = self.z_coeff;
        out[BSH_RE..BSH_IM].copy_from_slice(self.bsh_re.free_params());
        out[BSH_IM..LEN].copy_from_slice(self.bsh_im.free_params());
    }

    pub fn from_params(p: &[f64]) -> Self {
        use layout::*;
        debug_assert_eq!(p.len(), LEN);
        Self {
            mean: Vector3::from_column_slice(&p[MEAN..MEAN + 3]),
            rotation: [p[ROTATION], p[ROTATION + 1], p[ROTATION + 2], p[ROTATION + 3]],
            log_scales: Vector3::from_column_slice(&p[LOG_SCALES..LOG_SCALES + 3]),
            raw_opacity: p[RAW_OPACITY],
            raw_gamma: p[RAW_GAMMA],
            z_coeff: p[Z_COEFF],
            bsh_re: BshCoefficients::from_free(BshPart::Real, p[BSH_RE..BSH_IM].to_vec())
                .expect("layout length"),
            bsh_im: BshCoefficients::from_free(BshPart::Imag, p[BSH_IM..LEN].to_vec())
                .expect("layout length"),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = vec![0.0; PARAMS_PER_ELLIPSOID];
        self.write_params(&mut out);
        out
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for v in &mut self.rotation {
                *v /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Checks every invariant that can be violated by raw parameter values.
    pub fn validate(&self) -> Result<()> {
        let finite = self.params().iter().all(|v| v.is_finite());
        if !finite {
            return Err(CkmError::InvalidConfig("non-finite ellipsoid parameter".into()));
        }
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-9 {
            return Err(CkmError::InvalidConfig(format!(
                "rotation quaternion not unit-norm ({qn})"
            )));
        }
        if self.scales().iter().any(|s| !(*s > 0.0)) {
            return Err(CkmError::InvalidConfig("non-positive scale".into()));
        }
        Ok(())
    }
}

/// Covariance of an ellipsoid.
pub fn covariance(e: &GaussianEllipsoid) -> Matrix3<f64> {
    e.covariance()
}

/// Unnormalized Gaussian density of an ellipsoid at `x`.
pub fn gaussian_density(e: &GaussianEllipsoid, x: &Vector3<f64>) -> Result<f64> {
    e.gaussian_density(x)
}

/// `(alpha_max, gamma_max, scales)` for an ellipsoid at wavelength `wavelength`.
pub fn activate(e: &GaussianEllipsoid, wavelength: f64) -> Activated {
    e.activate(wavelength)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn min_v(&self) -> Vector3<f64> {
        Vector3::from(self.min)
    }

    pub fn max_v(&self) -> Vector3<f64> {
        Vector3::from(self.max)
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min_v() + self.max_v()) * 0.5
    }

    /// Length of the diagonal.
    pub fn extent(&self) -> f64 {
        (self.max_v() - self.min_v()).norm()
    }

    /// Box grown about its center by `factor` (1.0 = unchanged).
    pub fn inflated(&self, factor: f64) -> Self {
        let c = self.center();
        let half = (self.max_v() - self.min_v()) * (0.5 * factor);
        Self {
            min: (c - half).into(),
            max: (c + half).into(),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ellipsoids: Vec<GaussianEllipsoid>,
    pub bbox: Aabb,
    pub wavelength: f64,
    pub sh_degree: usize,
}

impl Scene {
    pub fn new(bbox: Aabb, wavelength: f64) -> Self {
        Self {
            ellipsoids: Vec::new(),
            bbox,
            wavelength,
            sh_degree: SH_DEGREE,
        }
    }

    pub fn len(&self) -> usize {
        self.ellipsoids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ellipsoids.is_empty()
    }

    pub fn validate(&self, bbox_inflation: f64) -> Result<()> {
        if !(self.wavelength > 0.0) {
            return Err(CkmError::InvalidConfig("wavelength must be positive".into()));
        }
        if self.sh_degree != SH_DEGREE {
            return Err(CkmError::UnsupportedDegree(self.sh_degree));
        }
        let bounds = self.bbox.inflated(bbox_inflation);
        for (i, e) in self.ellipsoids.iter().enumerate() {
            e.validate()?;
            if !bounds.contains(&e.mean) {
                return Err(CkmError::InvalidConfig(format!(
                    "ellipsoid {i} mean outside the inflated bounding box"
                )));
            }
        }
        Ok(())
    }

    /// Writes the checkpoint format documented in the README.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            64 + self.ellipsoids.len() * PARAMS_PER_ELLIPSOID * 8,
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.wavelength.to_le_bytes());
        out.extend_from_slice(&(self.sh_degree as u32).to_le_bytes());
        for v in self.bbox.min.iter().chain(&self.bbox.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(PARAMS_PER_ELLIPSOID as u32).to_le_bytes());
        out.extend_from_slice(&(self.ellipsoids.len() as u64).to_le_bytes());
        let mut block = vec![0.0; PARAMS_PER_ELLIPSOID];
        for e in &self.ellipsoids {
            e.write_params(&mut block);
            for v in &block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CkmError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CkmError::Checkpoint(format!("unsupported version {version}")));
        }
        let wavelength = r.f64()?;
        let sh_degree = r.u32()? as usize;
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for v in min.iter_mut().chain(max.iter_mut()) {
            *v = r.f64()?;
        }
        let block_len = r.u32()? as usize;
        if block_len != PARAMS_PER_ELLIPSOID {
            return Err(CkmError::Checkpoint(format!(
                "parameter block length {block_len}, expected {PARAMS_PER_ELLIPSOID}"
            )));
        }
        let count = r.u64()? as usize;
        let mut ellipsoids = Vec::with_capacity(count.min(1 << 20));
        let mut block = vec![0.0; PARAMS_PER_ELLIPSOID];
        for _ in 0..count {
            for v in block.iter_mut() {
                *v = r.f64()?;
            }
            ellipsoids.push(GaussianEllipsoid::from_params(&block));
        }
        if r.pos != bytes.len() {
            return Err(CkmError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            ellipsoids,
            bbox: Aabb { min, max },
            wavelength,
            sh_degree,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CKMSCENE";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CkmError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Cell-centered AOA grid over the reception hemisphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleGrid {
    /// Elevation samples `v` over `(0, π)`.
    pub n_theta: usize,
    /// Azimuth samples `z` over `(-π/2, π/2)`.
    pub n_phi: usize,
}

impl AngleGrid {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        Self { n_theta, n_phi }
    }

    pub fn len(&self) -> usize {
        self.n_theta * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta(&self, i: usize) -> f64 {
        PI * (i as f64 + 0.5) / self.n_theta as f64
    }

    pub fn phi(&self, j: usize) -> f64 {
        -PI / 2.0 + PI * (j as f64 + 0.5) / self.n_phi as f64
    }

    pub fn theta_step(&self) -> f64 {
        PI / self.n_theta as f64
    }

    pub fn phi_step(&self) -> f64 {
        PI / self.n_phi as f64
    }

    /// `(θ, φ)` of flat cell index `cell = i * n_phi + j`.
    pub fn angles(&self, cell: usize) -> (f64, f64) {
        (self.theta(cell / self.n_phi), self.phi(cell % self.n_phi))
    }

    /// Unit direction of a cell in the receiver's local frame.
    pub fn local_direction(&self, cell: usize) -> Vector3<f64> {
        let (t, p) = self.angles(cell);
        crate::harmonics::direction(t, p)
    }
}

/// Uniform planar array geometry and the spectrum grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_v: usize,
    pub n_h: usize,
    /// Vertical spacing in wavelengths.
    pub d_v: f64,
    /// Horizontal spacing in wavelengths.
    pub d_h: f64,
    pub grid: AngleGrid,
}

impl ArrayConfig {
    /// 4x4 half-wavelength UPA with a 1° (180x180) spectrum grid.
    pub fn half_wavelength_4x4() -> Self {
        Self {
            n_v: 4,
            n_h: 4,
            d_v: 0.5,
            d_h: 0.5,
            grid: AngleGrid::new(180, 180),
        }
    }

    pub fn with_grid(mut self, n_theta: usize, n_phi: usize) -> Self {
        self.grid = AngleGrid::new(n_theta, n_phi);
        self
    }

    pub fn n(&self) -> usize {
        self.n_v * self.n_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(CkmError::InvalidConfig("array needs at least one antenna".into()));
        }
        if self.grid.is_empty() {
            return Err(CkmError::InvalidConfig("empty AOA grid".into()));
        }
        if !(self.d_v.is_finite() && self.d_h.is_finite()) {
            return Err(CkmError::InvalidConfig("non-finite antenna spacing".into()));
        }
        Ok(())
    }
}

/// Complex SIMO channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub entries: Vec<Complex64>,
}

impl ChannelVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            entries: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn add_scaled(&mut self, other: &ChannelVector, s: Complex64) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += b * s;
        }
    }

    /// `10 log10 ‖h‖²`, floored at the dB floor.
    pub fn gain_db(&self) -> f64 {
        crate::spectrum::power_to_db(self.norm_sqr())
    }
}

impl Serialize for ChannelVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = self.entries.iter().map(|c| [c.re, c.im]).collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs: Vec<[f64; 2]> = Vec::deserialize(d)?;
        Ok(Self {
            entries: pairs.into_iter().map(|[re, im]| Complex64::new(re, im)).collect(),
        })
    }
}

/// One channel measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: String,
    pub tx_pos: [f64; 3],
    pub rx_pos: [f64; 3],
    /// Receiver orientation quaternion `(w, x, y, z)`; identity = array facing +x.
    pub rx_orientation: [f64; 4],
    pub channel: ChannelVector,
}

impl Measurement {
    pub fn tx(&self) -> Vector3<f64> {
        Vector3::from(self.tx_pos)
    }

    pub fn rx(&self) -> Vector3<f64> {
        Vector3::from(self.rx_pos)
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rx_orientation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    pub fn validate(&self, wavelength: f64, n: usize) -> Result<()> {
        if self.channel.len() != n {
            return Err(CkmError::ShapeMismatch(format!(
                "measurement {} has {} channel entries, expected {n}",
                self.id,
                self.channel.len()
            )));
        }
        if !self.channel.is_finite() {
            return Err(CkmError::InvalidConfig(format!(
                "measurement {} has non-finite channel entries",
                self.id
            )));
        }
        if (self.tx() - self.rx()).norm() < wavelength {
            return Err(CkmError::PlacementViolation(format!(
                "measurement {}: Tx and Rx closer than one wavelength",
                self.id
            )));
        }
        Ok(())
    }
}

/// Pose of a query: transmitter, receiver and receiver orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub tx: Vector3<f64>,
    pub rx: Vector3<f64>,
    pub rx_orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(tx: Vector3<f64>, rx: Vector3<f64>) -> Self {
        Self {
            tx,
            rx,
            rx_orientation: UnitQuaternion::identity(),
        }
    }

    pub fn of(m: &Measurement) -> Self {
        Self {
            tx: m.tx(),
            rx: m.rx(),
            rx_orientation: m.orientation(),
        }
    }
}
