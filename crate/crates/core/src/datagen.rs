//! Analytic single-bounce channel oracle and dataset files.
//!
//! The oracle shares no geometry code with the Gaussian renderer: scatterers
//! are points, occluders are axis-aligned boxes with a constant complex
//! transmittance, and every arrival direction is used exactly rather than
//! snapped to a grid. A scatterer only contributes when its arrival
//! direction lies in the receiver's reception hemisphere.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CkmError, Result};
use crate::harmonics::{sh_eval_dir, BshCoefficients, BshPart, SH_COUNT};
use crate::rendering::steering_vector;
use crate::scene::{Aabb, AngleGrid, ArrayConfig, ChannelVector, Measurement};
use crate::spectrum::POWER_FLOOR;

/// Angular pattern of a point scatterer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScatterPattern {
    Constant { re: f64, im: f64 },
    /// Upper-triangle BSH coefficients of the leading `(D+1)²` block, row by
    /// row; 1, 10, 45 or 136 entries for degree 0..3.
    Sh { re: Vec<f64>, im: Vec<f64> },
}

impl ScatterPattern {
    fn block_size(len: usize) -> Option<usize> {
        [1usize, 4, 9, 16].into_iter().find(|b| b * (b + 1) / 2 == len)
    }

    fn coefficients(values: &[f64], part: BshPart) -> Result<BshCoefficients> {
        let b = Self::block_size(values.len()).ok_or_else(|| {
            CkmError::SpecInvalid(format!("SH pattern with {} coefficients", values.len()))
        })?;
        let mut c = BshCoefficients::zeros(part);
        let mut it = values.iter();
        for i in 0..b {
            for k in i..b {
                c.set(i, k, *it.next().unwrap());
            }
        }
        Ok(c)
    }

    /// Value for scattering direction `s_out` and incident direction `s_in`.
    pub fn eval(&self, s_out: &Vector3<f64>, s_in: &Vector3<f64>) -> Result<Complex64> {
        match self {
            ScatterPattern::Constant { re, im } => Ok(Complex64::new(*re, *im)),
            ScatterPattern::Sh { re, im } => {
                let a_re = Self::coefficients(re, BshPart::Real)?.materialize();
                let a_im = Self::coefficients(im, BshPart::Imag)?.materialize();
                let yo = sh_eval_dir(s_out).values;
                let yi = sh_eval_dir(s_in).values;
                let mut v = Complex64::new(0.0, 0.0);
                for i in 0..SH_COUNT {
                    for k in 0..SH_COUNT {
                        v += Complex64::new(a_re[(i, k)], a_im[(i, k)]) * (yo[i] * yi[k]);
                    }
                }
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointScatterer {
    pub position: [f64; 3],
    pub pattern: ScatterPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxOccluder {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Amplitude transmittance in `(0, 1]`.
    pub transmittance: f64,
    /// Phase delay in `[0, 2π)`.
    pub phase_delay: f64,
}

impl BoxOccluder {
    pub fn factor(&self) -> Complex64 {
        Complex64::from_polar(self.transmittance, -self.phase_delay)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Euclidean distance from a point to the box (zero inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0);
            s += d * d;
        }
        s.sqrt()
    }

    /// True when the open segment `a..b` passes through the box interior
    /// with positive length (slab method).
    pub fn intersects_segment(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            if d[i].abs() < 1e-300 {
                if a[i] <= self.min[i] || a[i] >= self.max[i] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut lo, mut hi) = ((self.min[i] - a[i]) * inv, (self.max[i] - a[i]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 >= t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub bbox: Aabb,
    #[serde(default)]
    pub scatterers: Vec<PointScatterer>,
    #[serde(default)]
    pub boxes: Vec<BoxOccluder>,
}

impl OracleScene {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !(b.transmittance > 0.0 && b.transmittance <= 1.0) {
                return Err(CkmError::SpecInvalid("box transmittance outside (0, 1]".into()));
            }
            if !(b.phase_delay >= 0.0 && b.phase_delay < 2.0 * PI) {
                return Err(CkmError::SpecInvalid("box phase delay outside [0, 2π)".into()));
            }
            if (0..3).any(|i| !(b.min[i] < b.max[i])) {
                return Err(CkmError::SpecInvalid("box with empty extent".into()));
            }
        }
        for s in &self.scatterers {
            let p = Vector3::from(s.position);
            if self.boxes.iter().any(|b| b.contains(&p)) {
                return Err(CkmError::SpecInvalid("scatterer inside an occluder".into()));
            }
            if let ScatterPattern::Sh { re, im } = &s.pattern {
                ScatterPattern::coefficients(re, BshPart::Real)?;
                ScatterPattern::coefficients(im, BshPart::Imag)?;
            }
        }
        Ok(())
    }

    /// Stable FNV-1a hash of the JSON description.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn transmission(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Complex64 {
        self.boxes
            .iter()
            .filter(|o| o.intersects_segment(a, b))
            .fold(Complex64::new(1.0, 0.0), |acc, o| acc * o.factor())
    }

    /// Checks the placement rules for a transceiver position.
    pub fn check_placement(&self, p: &Vector3<f64>, wavelength: f64) -> Result<()> {
        for b in &self.boxes {
            if b.distance(p) < wavelength {
                return Err(CkmError::PlacementViolation(format!(
                    "position {:?} within one wavelength of an occluder",
                    p.as_slice()
                )));
            }
        }
        for s in &self.scatterers {
            if (Vector3::from(s.position) - p).norm() < wavelength {
                return Err(CkmError::PlacementViolation(format!(
                    "position {:?} within one wavelength of a scatterer",
                    p.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// Receiver frame axes as matrix columns, from an explicit quaternion
/// formula rather than the renderer's conversion.
fn rx_axes(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// `q_d`: Tx inside the closed reception hemisphere of the receiver.
pub fn oracle_direct_indicator(tx: &Vector3<f64>, rx: &Vector3<f64>, rx_orientation: &[f64; 4]) -> bool {
    let boresight = rx_axes(rx_orientation).column(0).into_owned();
    boresight.dot(&(tx - rx)) >= 0.0
}

fn local_angles(dir_world: &Vector3<f64>, rx_orientation: &[f64; 4]) -> (Vector3<f64>, f64, f64) {
    let local = rx_axes(rx_orientation).transpose() * dir_world;
    let theta = (local.z / local.norm()).clamp(-1.0, 1.0).acos();
    let phi = local.y.atan2(local.x);
    (local, theta, phi)
}

/// Exact single-bounce channel for a Tx/Rx pair.
pub fn oracle_channel(
    scene: &OracleScene,
    tx: &Vector3<f64>,
    rx: &Vector3<f64>,
    rx_orientation: &[f64; 4],
    wavelength: f64,
    cfg: &ArrayConfig,
) -> Result<ChannelVector> {
    if (tx - rx).norm() < wavelength {
        return Err(CkmError::PlacementViolation(
            "Tx and Rx closer than one wavelength".into(),
        ));
    }
    scene.check_placement(tx, wavelength)?;
    scene.check_placement(rx, wavelength)?;
    let wavenumber = 2.0 * PI / wavelength;
    let mut h = ChannelVector::zeros(cfg.n());
    for s in &scene.scatterers {
        let p = Vector3::from(s.position);
        let (d_t, d_r) = ((p - tx).norm(), (rx - p).norm());
        let (local, theta, phi) = local_angles(&(p - rx), rx_orientation);
        if local.x < 0.0 {
            continue;
        }
        let gamma = s.pattern.eval(&((rx - p) / d_r), &((p - tx) / d_t))?;
        let amp = wavelength / ((4.0 * PI).powf(1.5) * d_t * d_r);
        let coeff = gamma
            * Complex64::from_polar(amp, -wavenumber * (d_t + d_r))
            * scene.transmission(tx, &p)
            * scene.transmission(&p, rx);
        h.add_scaled(&steering_vector(theta, phi, cfg), coeff);
    }
    if oracle_direct_indicator(tx, rx, rx_orientation) {
        let d_l = (tx - rx).norm();
        let (_, theta, phi) = local_angles(&(tx - rx), rx_orientation);
        let coeff = Complex64::from_polar(wavelength / (4.0 * PI * d_l), -wavenumber * d_l)
            * scene.transmission(tx, rx);
        h.add_scaled(&steering_vector(theta, phi, cfg), coeff);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Fixed receiver, sampled transmitters.
    ThreeD,
    /// Several training transmitters plus one held-out transmitter, sampled receivers.
    SixD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySpec {
    pub n_v: usize,
    pub n_h: usize,
    pub d_v: f64,
    pub d_h: f64,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for ArraySpec {
    fn default() -> Self {
        let a = ArrayConfig::half_wavelength_4x4();
        Self {
            n_v: a.n_v,
            n_h: a.n_h,
            d_v: a.d_v,
            d_h: a.d_h,
            n_theta: a.grid.n_theta,
            n_phi: a.grid.n_phi,
        }
    }
}

impl ArraySpec {
    pub fn config(&self) -> ArrayConfig {
        ArrayConfig {
            n_v: self.n_v,
            n_h: self.n_h,
            d_v: self.d_v,
            d_h: self.d_h,
            grid: AngleGrid::new(self.n_theta, self.n_phi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub protocol: Protocol,
    pub frequency_hz: f64,
    #[serde(default)]
    pub array: ArraySpec,
    pub scene: OracleScene,
    /// Receiver orientation `(w, x, y, z)`.
    #[serde(default = "identity_quat")]
    pub rx_orientation: [f64; 4],
    /// Total number of samples (train + test).
    pub samples: usize,
    /// Fraction of samples in the training split; 0.9 for 3D, 0.8 for 6D
    /// when omitted.
    #[serde(default)]
    pub train_fraction: Option<f64>,
    /// Region for sampled transmitter positions.
    pub tx_region: Aabb,
    /// Region for sampled receiver positions (6D protocol).
    #[serde(default)]
    pub rx_region: Option<Aabb>,
    /// Fixed receiver (3D protocol).
    #[serde(default)]
    pub rx_position: Option<[f64; 3]>,
    /// Number of training transmitters (6D protocol).
    #[serde(default = "default_k_tx")]
    pub k_tx: usize,
    /// Samples whose channel power is below this are redrawn.
    #[serde(default = "default_min_power")]
    pub min_power: f64,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn default_k_tx() -> usize {
    9
}

fn default_min_power() -> f64 {
    1e-14
}

impl GenerateConfig {
    pub fn wavelength(&self) -> f64 {
        crate::wavelength_for(self.frequency_hz)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CkmError::SpecInvalid(m.to_string()));
        if !(self.frequency_hz > 0.0) {
            return bad("frequency must be positive");
        }
        if self.samples == 0 {
            return bad("no samples requested");
        }
        let a = self.array.config();
        if a.n() == 0 || a.grid.is_empty() {
            return bad("empty array or spectrum grid");
        }
        let q = self.rx_orientation;
        if !(q.iter().map(|v| v * v).sum::<f64>() > 0.0) {
            return bad("zero receiver orientation");
        }
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad("train_fraction must be in (0, 1)");
            }
        }
        match self.protocol {
            Protocol::ThreeD if self.rx_position.is_none() => return bad("3D protocol needs rx_position"),
            Protocol::SixD if self.rx_region.is_none() => return bad("6D protocol needs rx_region"),
            Protocol::SixD if self.k_tx == 0 => return bad("k_tx must be positive"),
            _ => {}
        }
        self.scene.validate()
    }
}

/// Dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub wavelength: f64,
    pub array: ArrayConfig,
    pub bbox: Aabb,
    pub scene_hash: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Measurement>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks record shapes and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let n = self.header.array.n();
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if r.channel.len() != n {
                return Err(CkmError::ShapeMismatch(format!(
                    "record {} has {} entries, header array has {n}",
                    r.id,
                    r.channel.len()
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(CkmError::InvalidConfig(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    /// Errors when the header's array differs from `expected`.
    pub fn expect_array(&self, expected: &ArrayConfig) -> Result<()> {
        if &self.header.array != expected {
            return Err(CkmError::ShapeMismatch(
                "dataset header array differs from the configured array".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let json = |e: serde_json::Error| CkmError::InvalidConfig(e.to_string());
        writeln!(f, "{}", serde_json::to_string(&self.header).map_err(json)?)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(json)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if header.is_none() {
                header = Some(serde_json::from_str::<DatasetHeader>(&line).map_err(|e| {
                    CkmError::Parse {
                        line: lineno,
                        message: format!("bad header: {e}"),
                    }
                })?);
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Measurement>(&line).map_err(|e| {
                CkmError::Parse {
                    line: lineno,
                    message: e.to_string(),
                }
            })?);
        }
        let header = header.ok_or_else(|| CkmError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let d = Dataset { header, records };
        d.validate()?;
        Ok(d)
    }
}

fn sample_in(rng: &mut ChaCha8Rng, region: &Aabb) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        if region.max[i] > region.min[i] {
            rng.gen_range(region.min[i]..region.max[i])
        } else {
            region.min[i]
        }
    })
}

const MAX_ATTEMPTS: usize = 10_000;

fn draw_valid(
    rng: &mut ChaCha8Rng,
    region: &Aabb,
    scene: &OracleScene,
    wavelength: f64,
) -> Result<Vector3<f64>> {
    for _ in 0..MAX_ATTEMPTS {
        let p = sample_in(rng, region);
        if scene.check_placement(&p, wavelength).is_ok() {
            return Ok(p);
        }
    }
    Err(CkmError::SpecInvalid("could not place a transceiver in its region".into()))
}

/// Draws one measurement, resampling `draw` until the pose is valid and
/// carries enough power.
fn measure(
    cfg: &GenerateConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<(Vector3<f64>, Vector3<f64>)>,
) -> Result<Measurement> {
    let wavelength = cfg.wavelength();
    let array = cfg.array.config();
    for _ in 0..MAX_ATTEMPTS {
        let (tx, rx) = draw(rng)?;
        match oracle_channel(&cfg.scene, &tx, &rx, &cfg.rx_orientation, wavelength, &array) {
            Ok(h) if h.norm_sqr() >= cfg.min_power.max(POWER_FLOOR) => {
                return Ok(Measurement {
                    id,
                    tx_pos: tx.into(),
                    rx_pos: rx.into(),
                    rx_orientation: normalized(cfg.rx_orientation),
                    channel: h,
                });
            }
            Ok(_) | Err(CkmError::PlacementViolation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CkmError::SpecInvalid(format!(
        "no valid sample found for {id} after {MAX_ATTEMPTS} draws"
    )))
}

fn normalized(q: [f64; 4]) -> [f64; 4] {
    let u = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    [u.w, u.i, u.j, u.k]
}

/// Generates the `(train, test)` pair for a configuration.
pub fn generate(cfg: &GenerateConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let wavelength = cfg.wavelength();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let header = |split: &str| DatasetHeader {
        wavelength,
        array: cfg.array.config(),
        bbox: cfg.scene.bbox,
        scene_hash: cfg.scene.hash(),
        split: split.to_string(),
    };
    let (train, test) = match cfg.protocol {
        Protocol::ThreeD => {
            let rx = Vector3::from(cfg.rx_position.unwrap());
            cfg.scene.check_placement(&rx, wavelength)?;
            let mut all = Vec::with_capacity(cfg.samples);
            for i in 0..cfg.samples {
                let region = cfg.tx_region;
                let m = measure(cfg, &mut rng, format!("s{i:05}"), |rng| {
                    Ok((draw_valid(rng, &region, &cfg.scene, wavelength)?, rx))
                })?;
                all.push(m);
            }
            // Seeded shuffle, then split.
            for i in (1..all.len()).rev() {
                all.swap(i, rng.gen_range(0..=i));
            }
            let n_train = split_count(cfg.samples, cfg.train_fraction.unwrap_or(0.9));
            let test = all.split_off(n_train);
            (all, test)
        }
        Protocol::SixD => {
            let rx_region = cfg.rx_region.unwrap();
            let mut txs = Vec::with_capacity(cfg.k_tx + 1);
            for _ in 0..=cfg.k_tx {
                txs.push(draw_valid(&mut rng, &cfg.tx_region, &cfg.scene, wavelength)?);
            }
            let n_train = split_count(cfg.samples, cfg.train_fraction.unwrap_or(0.8));
            let mut train = Vec::with_capacity(n_train);
            for i in 0..n_train {
                let t = i % cfg.k_tx;
                let tx = txs[t];
                train.push(measure(cfg, &mut rng, format!("tx{t}-rx{i:05}"), |rng| {
                    Ok((tx, draw_valid(rng, &rx_region, &cfg.scene, wavelength)?))
                })?);
            }
            let held = txs[cfg.k_tx];
            let k = cfg.k_tx;
            let mut test = Vec::with_capacity(cfg.samples - n_train);
            for i in n_train..cfg.samples {
                test.push(measure(cfg, &mut rng, format!("tx{k}-rx{i:05}"), |rng| {
                    Ok((held, draw_valid(rng, &rx_region, &cfg.scene, wavelength)?))
                })?);
            }
            (train, test)
        }
    };
    Ok((
        Dataset {
            header: header("train"),
            records: train,
        },
        Dataset {
            header: header("test"),
            records: test,
        },
    ))
}

fn split_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).clamp(1.min(total), total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendering::direct_indicator;

    const LAMBDA: f64 = 0.05;

    fn cfg() -> ArrayConfig {
        ArrayConfig::half_wavelength_4x4().with_grid(8, 8)
    }

    fn empty_scene() -> OracleScene {
        OracleScene {
            bbox: Aabb::new([0.0; 3], [6.0, 4.0, 3.0]),
            scatterers: vec![],
            boxes: vec![],
        }
    }

    fn id() -> [f64; 4] {
        [1.0, 0.0, 0.0, 0.0]
    }

    #[test]
    fn free_space_direct_term() {
        let tx = Vector3::new(5.0, 1.0, 1.0);
        let rx = Vector3::new(1.0, 1.0, 1.0);
        let h = oracle_channel(&empty_scene(), &tx, &rx, &id(), LAMBDA, &cfg()).unwrap();
        let want = LAMBDA / (4.0 * PI * 4.0 * 16.0);
        assert!(h.entries.iter().all(|e| (e.norm() - want).abs() < 1e-16));
    }

    #[test]
    fn single_scatterer_closed_form() {
        let mut scene = empty_scene();
        scene.scatterers.push(PointScatterer {
            position: [3.0, 2.0, 1.0],
            pattern: ScatterPattern::Constant { re: 1.0, im: 0.0 },
        });
        // Tx behind the receiver so the direct term is off.
        let tx = Vector3::new(0.5, 2.0, 1.0);
        let rx = Vector3::new(1.5, 1.0, 1.0);
        let h = oracle_channel(&scene, &tx, &rx, &id(), LAMBDA, &cfg()).unwrap();
        let p = Vector3::new(3.0, 2.0, 1.0);
        let (d_t, d_r) = ((p - tx).norm(), (rx - p).norm());
        let amp = LAMBDA / ((4.0 * PI).powf(1.5) * d_t * d_r);
        // AOA: direction (1.5, 1, 0)/|.| has θ = π/2, φ = atan(1/1.5).
        let phi = (1.0f64 / 1.5).atan();
        let phase0 = -2.0 * PI * (d_t + d_r) / LAMBDA;
        for kv in 0..4 {
            for kh in 0..4 {
                let phase = phase0 + PI * kh as f64 * phi.sin();
                let want = Complex64::from_polar(amp / 16.0, phase);
                assert!((h.entries[kv * 4 + kh] - want).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn box_halves_direct_term() {
        let mut scene = empty_scene();
        scene.boxes.push(BoxOccluder {
            min: [2.5, 0.5, 0.5],
            max: [3.5, 1.5, 1.5],
            transmittance: 0.5,
            phase_delay: 0.0,
        });
        let tx = Vector3::new(5.0, 1.0, 1.0);
        let rx = Vector3::new(1.0, 1.0, 1.0);
        let open = oracle_channel(&empty_scene(), &tx, &rx, &id(), LAMBDA, &cfg()).unwrap();
        let blocked = oracle_channel(&scene, &tx, &rx, &id(), LAMBDA, &cfg()).unwrap();
        assert!((blocked.norm() - 0.5 * open.norm()).abs() < 1e-18);
    }

    #[test]
    fn placement_is_enforced() {
        let mut scene = empty_scene();
        scene.boxes.push(BoxOccluder {
            min: [2.0; 3],
            max: [3.0; 3],
            transmittance: 0.5,
            phase_delay: 1.0,
        });
        let inside = Vector3::new(2.5, 2.5, 2.5);
        let r = oracle_channel(&scene, &inside, &Vector3::zeros(), &id(), LAMBDA, &cfg());
        assert!(matches!(r, Err(CkmError::PlacementViolation(_))));
        let near = Vector3::new(3.01, 2.5, 2.5);
        let r = oracle_channel(&scene, &near, &Vector3::zeros(), &id(), LAMBDA, &cfg());
        assert!(matches!(r, Err(CkmError::PlacementViolation(_))));
        let r = oracle_channel(&scene, &Vector3::zeros(), &Vector3::new(0.01, 0.0, 0.0), &id(), LAMBDA, &cfg());
        assert!(matches!(r, Err(CkmError::PlacementViolation(_))));
    }

    #[test]
    fn superposition_of_scatterers() {
        let s1 = PointScatterer {
            position: [4.0, 1.0, 2.0],
            pattern: ScatterPattern::Constant { re: 0.7, im: -0.2 },
        };
        let s2 = PointScatterer {
            position: [5.0, 3.0, 0.5],
            pattern: ScatterPattern::Constant { re: -0.3, im: 0.9 },
        };
        let tx = Vector3::new(2.0, 2.0, 1.5);
        let rx = Vector3::new(0.5, 1.0, 1.0);
        let run = |sc: Vec<PointScatterer>| {
            let mut s = empty_scene();
            s.scatterers = sc;
            oracle_channel(&s, &tx, &rx, &id(), LAMBDA, &cfg()).unwrap()
        };
        let both = run(vec![s1.clone(), s2.clone()]);
        let a = run(vec![s1]);
        let b = run(vec![s2]);
        let d = run(vec![]);
        for i in 0..16 {
            let want = a.entries[i] + b.entries[i] - d.entries[i];
            assert!((both.entries[i] - want).norm() < 1e-18);
        }
    }

    #[test]
    fn sh_patterns_are_reciprocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pattern = ScatterPattern::Sh {
            re: (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            im: (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        for _ in 0..100 {
            let a = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let b = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let f = pattern.eval(&a, &b).unwrap();
            let r = pattern.eval(&(-b), &(-a)).unwrap();
            assert!((f - r).norm() < 1e-12);
        }
        let bad = ScatterPattern::Sh { re: vec![0.0; 3], im: vec![0.0; 3] };
        assert!(bad.eval(&Vector3::x(), &Vector3::x()).is_err());
    }

    #[test]
    fn direct_indicator_agrees_with_renderer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let tx = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let rx = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let q = UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            );
            let quat = [q.w, q.i, q.j, q.k];
            assert_eq!(
                oracle_direct_indicator(&tx, &rx, &quat),
                direct_indicator(&tx, &rx, &q).unwrap()
            );
        }
    }

    #[test]
    fn segment_box_intersection() {
        let b = BoxOccluder {
            min: [1.0; 3],
            max: [2.0; 3],
            transmittance: 1.0,
            phase_delay: 0.0,
        };
        let p = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        assert!(b.intersects_segment(&p(0.0, 1.5, 1.5), &p(3.0, 1.5, 1.5)));
        assert!(!b.intersects_segment(&p(0.0, 1.5, 1.5), &p(0.9, 1.5, 1.5)));
        assert!(!b.intersects_segment(&p(0.0, 2.5, 1.5), &p(3.0, 2.5, 1.5)));
        assert!(b.intersects_segment(&p(0.0, 0.0, 0.0), &p(3.0, 3.0, 3.0)));
        assert!(!b.intersects_segment(&p(0.0, 0.0, 3.0), &p(3.0, 3.0, 3.0)));
    }

    fn gen_cfg(protocol: Protocol) -> GenerateConfig {
        GenerateConfig {
            seed: 11,
            protocol,
            frequency_hz: 6e9,
            array: ArraySpec {
                n_theta: 8,
                n_phi: 8,
                ..ArraySpec::default()
            },
            scene: OracleScene {
                bbox: Aabb::new([0.0; 3], [6.0, 4.0, 3.0]),
                scatterers: vec![PointScatterer {
                    position: [5.0, 2.0, 1.5],
                    pattern: ScatterPattern::Constant { re: 1.0, im: 0.0 },
                }],
                boxes: vec![BoxOccluder {
                    min: [2.5, 1.5, 0.0],
                    max: [3.0, 2.5, 2.0],
                    transmittance: 0.3,
                    phase_delay: 1.0,
                }],
            },
            rx_orientation: id(),
            samples: 20,
            train_fraction: None,
            tx_region: Aabb::new([0.5, 0.5, 0.5], [2.0, 3.5, 2.5]),
            rx_region: Some(Aabb::new([0.5, 0.5, 0.5], [2.0, 3.5, 2.5])),
            rx_position: Some([1.0, 2.0, 1.5]),
            k_tx: 9,
            min_power: 1e-14,
        }
    }

    #[test]
    fn generation_is_reproducible_and_split() {
        let c = gen_cfg(Protocol::ThreeD);
        let (a_train, a_test) = generate(&c).unwrap();
        let (b_train, b_test) = generate(&c).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!((a_train.len(), a_test.len()), (18, 2));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        a_train.save(&p1).unwrap();
        b_train.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn six_d_test_split_uses_only_the_held_out_tx() {
        let (train, test) = generate(&gen_cfg(Protocol::SixD)).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        assert!(test.records.iter().all(|r| r.id.starts_with("tx9-")));
        assert!(train.records.iter().all(|r| !r.id.starts_with("tx9-")));
        let held = test.records[0].tx_pos;
        assert!(test.records.iter().all(|r| r.tx_pos == held));
        assert!(train.records.iter().all(|r| r.tx_pos != held));
        let c = gen_cfg(Protocol::SixD);
        for r in train.records.iter().chain(&test.records) {
            for b in &c.scene.boxes {
                assert!(!b.contains(&r.rx()) && !b.contains(&r.tx()));
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut c = gen_cfg(Protocol::SixD);
        c.rx_region = None;
        assert!(matches!(generate(&c), Err(CkmError::SpecInvalid(_))));
        let mut c = gen_cfg(Protocol::ThreeD);
        c.scene.boxes[0].transmittance = 0.0;
        assert!(matches!(generate(&c), Err(CkmError::SpecInvalid(_))));
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let (train, _) = generate(&gen_cfg(Protocol::ThreeD)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        train.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, train);
        assert!(back.expect_array(&train.header.array).is_ok());
        assert!(back.expect_array(&ArrayConfig::half_wavelength_4x4()).is_err());

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 40];
        std::fs::write(&path, cut).unwrap();
        let lines = cut.lines().count();
        match Dataset::load(&path) {
            Err(CkmError::Parse { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
