//! Bartlett spatial spectrum, dB scale, losses and evaluation metrics.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{CkmError, Result};
use crate::rendering::SteeringTable;
use crate::scene::{AngleGrid, ArrayConfig, ChannelVector};

/// Linear power floor, −150 dB.
pub const POWER_FLOOR: f64 = 1e-15;
pub const DB_FLOOR: f64 = -150.0;
/// Display window used to normalize dB spectra for SSIM.
pub const DISPLAY_RANGE_DB: (f64, f64) = (-150.0, -30.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Db,
}

/// `n_theta × n_phi` grid of powers, row-major over elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpectrum {
    pub grid: AngleGrid,
    pub scale: Scale,
    pub values: Vec<f64>,
}

impl SpatialSpectrum {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n_phi + j]
    }

    /// Flat index of the largest cell (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Writes the grid as CSV with a two-line header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let scale = match self.scale {
            Scale::Linear => "linear",
            Scale::Db => "db",
        };
        writeln!(f, "# scale={scale}")?;
        writeln!(
            f,
            "# grid theta={}x(0,pi) phi={}x(-pi/2,pi/2) rows=theta cols=phi",
            self.grid.n_theta, self.grid.n_phi
        )?;
        for i in 0..self.grid.n_theta {
            let row: Vec<String> = (0..self.grid.n_phi)
                .map(|j| format!("{}", self.at(i, j)))
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Binary PGM of the spectrum in dB, mapped through the display window.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let db = self.as_db();
        let (w, h) = (db.grid.n_phi, db.grid.n_theta);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(db.values.iter().map(|v| gray(*v)));
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Polar PGM: radius is elevation, angle is azimuth, as seen from the
    /// array boresight.
    pub fn write_polar_pgm(&self, path: impl AsRef<Path>, size: usize) -> Result<()> {
        let db = self.as_db();
        let g = db.grid;
        let half = size as f64 / 2.0;
        let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
        for py in 0..size {
            for px in 0..size {
                let x = (px as f64 + 0.5 - half) / half;
                let y = (half - py as f64 - 0.5) / half;
                let r = (x * x + y * y).sqrt();
                if r > 1.0 {
                    out.push(0);
                    continue;
                }
                let theta = r * PI;
                let phi = y.atan2(x) / 2.0;
                let i = ((theta / PI) * g.n_theta as f64).floor().min(g.n_theta as f64 - 1.0) as usize;
                let j = (((phi + PI / 2.0) / PI) * g.n_phi as f64)
                    .floor()
                    .clamp(0.0, g.n_phi as f64 - 1.0) as usize;
                out.push(gray(db.at(i, j)));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn as_db(&self) -> SpatialSpectrum {
        match self.scale {
            Scale::Db => self.clone(),
            Scale::Linear => to_db(self),
        }
    }
}

fn gray(db: f64) -> u8 {
    (normalize_db(db) * 255.0).round() as u8
}

/// `P(θ,φ) = |bᴴ(θ,φ)·h|²` on the array's spectrum grid.
pub fn cbf_spectrum(h: &ChannelVector, cfg: &ArrayConfig) -> Result<SpatialSpectrum> {
    if h.len() != cfg.n() {
        return Err(CkmError::ShapeMismatch(format!(
            "channel has {} entries, array has {}",
            h.len(),
            cfg.n()
        )));
    }
    let table = SteeringTable::new(cfg, cfg.grid);
    Ok(cbf_with_table(h, &table))
}

/// Spectrum using precomputed steering vectors.
pub fn cbf_with_table(h: &ChannelVector, table: &SteeringTable) -> SpatialSpectrum {
    let values = (0..table.grid.len())
        .map(|cell| table.project(cell, &h.entries).norm_sqr())
        .collect();
    SpatialSpectrum {
        grid: table.grid,
        scale: Scale::Linear,
        values,
    }
}

/// `10·log10(max(P, floor))`.
pub fn power_to_db(p: f64) -> f64 {
    10.0 * p.max(POWER_FLOOR).log10()
}

pub fn to_db(s: &SpatialSpectrum) -> SpatialSpectrum {
    SpatialSpectrum {
        grid: s.grid,
        scale: Scale::Db,
        values: s.values.iter().map(|p| power_to_db(*p)).collect(),
    }
}

/// Channel power gain in dB.
pub fn gain_db(h: &ChannelVector) -> f64 {
    power_to_db(h.norm_sqr())
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CkmError::ShapeMismatch(format!("{} vs {} cells", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(CkmError::EmptyInput("empty spectrum".into()));
    }
    Ok(())
}

/// Mean squared dB error over all cells.
pub fn spectrum_loss(pred_db: &SpatialSpectrum, gt_db: &SpatialSpectrum) -> Result<f64> {
    if pred_db.grid != gt_db.grid {
        return Err(CkmError::ShapeMismatch("spectrum grids differ".into()));
    }
    check_shapes(&pred_db.values, &gt_db.values)?;
    let n = pred_db.values.len() as f64;
    Ok(pred_db
        .values
        .iter()
        .zip(&gt_db.values)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
}

/// Mean absolute dB error of channel gains.
pub fn gain_loss(pred_gain_db: &[f64], gt_gain_db: &[f64]) -> Result<f64> {
    mae(pred_gain_db, gt_gain_db)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub spectrum: f64,
    pub gain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spectrum: 1.0,
            gain: 1.0,
        }
    }
}

pub fn total_loss(spectrum: f64, gain: f64, w: LossWeights) -> f64 {
    w.spectrum * spectrum + w.gain * gain
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(CkmError::EmptyInput("no gains to compare".into()));
    }
    if pred.len() != gt.len() {
        return Err(CkmError::ShapeMismatch(format!("{} vs {} gains", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// MAE divided by the mean absolute ground-truth gain.
pub fn nmae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let m = mae(pred, gt)?;
    let mean_abs = gt.iter().map(|g| g.abs()).sum::<f64>() / gt.len() as f64;
    Ok(m / mean_abs)
}

/// Maps a dB value into `[0, 1]` through the fixed display window.
pub fn normalize_db(db: f64) -> f64 {
    let (lo, hi) = DISPLAY_RANGE_DB;
    ((db - lo) / (hi - lo)).clamp(0.0, 1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM of two dB spectra over all fully contained 11×11 windows,
/// after display normalization. Grids smaller than the window use one window
/// clipped to the grid.
pub fn ssim(a_db: &SpatialSpectrum, b_db: &SpatialSpectrum) -> Result<f64> {
    if a_db.grid != b_db.grid {
        return Err(CkmError::ShapeMismatch("spectrum grids differ".into()));
    }
    check_shapes(&a_db.values, &b_db.values)?;
    let a: Vec<f64> = a_db.as_db().values.iter().map(|v| normalize_db(*v)).collect();
    let b: Vec<f64> = b_db.as_db().values.iter().map(|v| normalize_db(*v)).collect();
    Ok(ssim_normalized(&a, &b, a_db.grid.n_theta, a_db.grid.n_phi))
}

/// SSIM of two `[0, 1]` images stored row-major.
pub fn ssim_normalized(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let win = gaussian_window();
    let (wr, wc) = (SSIM_WINDOW.min(rows), SSIM_WINDOW.min(cols));
    let sub = |len: usize| {
        let off = (SSIM_WINDOW - len) / 2;
        let w = &win[off..off + len];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let (w_r, w_c) = (sub(wr), sub(wc));
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - wr {
        for c0 in 0..=cols - wc {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, wi) in w_r.iter().enumerate() {
                for (j, wj) in w_c.iter().enumerate() {
                    let w = wi * wj;
                    let idx = (r0 + i) * cols + c0 + j;
                    let (x, y) = (a[idx], b[idx]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-cell adjoint of the spectrum loss for a predicted linear spectrum:
/// `∂L_s/∂P` at every cell.
pub fn spectrum_loss_grad(pred_linear: &[f64], gt_db: &[f64]) -> Vec<f64> {
    let n = pred_linear.len() as f64;
    let k = 10.0 / std::f64::consts::LN_10;
    pred_linear
        .iter()
        .zip(gt_db)
        .map(|(p, g)| {
            if *p <= POWER_FLOOR {
                0.0
            } else {
                2.0 * (power_to_db(*p) - g) / n * k / p
            }
        })
        .collect()
}

/// Adjoint of `|bᴴh|²` with respect to `h`: `2(bᴴh)·b`, scaled.
pub fn accumulate_power_adjoint(b: &[Complex64], proj: Complex64, scale: f64, out: &mut [Complex64]) {
    let s = proj * (2.0 * scale);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendering::steering_vector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ArrayConfig {
        ArrayConfig::half_wavelength_4x4().with_grid(30, 30)
    }

    fn random_h(rng: &mut ChaCha8Rng, n: usize) -> ChannelVector {
        ChannelVector {
            entries: (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn zero_channel_gives_zero_spectrum() {
        let s = cbf_spectrum(&ChannelVector::zeros(16), &small_cfg()).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_path_peaks_at_its_cell() {
        let cfg = small_cfg();
        let cell = 11 * 30 + 17;
        let (t, p) = cfg.grid.angles(cell);
        let a = Complex64::new(0.3, -0.4);
        let mut h = steering_vector(t, p, &cfg);
        for e in &mut h.entries {
            *e *= a;
        }
        let s = cbf_spectrum(&h, &cfg).unwrap();
        assert_eq!(s.argmax(), cell);
        assert!((s.values[cell] - a.norm_sqr() / 256.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(matches!(
            cbf_spectrum(&ChannelVector::zeros(3), &small_cfg()),
            Err(CkmError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn db_cases() {
        assert_eq!(power_to_db(1.0), 0.0);
        assert_eq!(power_to_db(0.0), -150.0);
        assert!((power_to_db(1e-6) + 60.0).abs() < 1e-12);
    }

    #[test]
    fn loss_cases() {
        let g = AngleGrid::new(3, 4);
        let a = SpatialSpectrum {
            grid: g,
            scale: Scale::Db,
            values: (0..12).map(|i| -60.0 - i as f64).collect(),
        };
        assert_eq!(spectrum_loss(&a, &a).unwrap(), 0.0);
        let b = SpatialSpectrum {
            values: a.values.iter().map(|v| v + 2.0).collect(),
            ..a.clone()
        };
        assert!((spectrum_loss(&b, &a).unwrap() - 4.0).abs() < 1e-12);
        let w = LossWeights {
            spectrum: 1.0,
            gain: 0.0,
        };
        assert_eq!(total_loss(4.0, 7.0, w), 4.0);
        let other = SpatialSpectrum {
            grid: AngleGrid::new(4, 3),
            ..a.clone()
        };
        assert!(spectrum_loss(&a, &other).is_err());
    }

    #[test]
    fn metric_cases() {
        assert_eq!(mae(&[-60.0], &[-64.0]).unwrap(), 4.0);
        assert!(matches!(mae(&[], &[]), Err(CkmError::EmptyInput(_))));
        assert!((nmae(&[-60.0, -70.0], &[-64.0, -66.0]).unwrap() - 4.0 / 65.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        for _ in 0..5 {
            let a = to_db(&cbf_spectrum(&random_h(&mut rng, 16), &cfg).unwrap());
            let mut b = a.clone();
            for v in &mut b.values {
                *v += rng.gen_range(-5.0..5.0) - 40.0;
            }
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab <= 1.0 && ab >= -1.0);
        }
    }

    /// Textbook SSIM on a tiny image, evaluated with separate mean/variance passes.
    #[test]
    fn ssim_matches_direct_formula_on_one_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..121).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..121).map(|_| rng.gen()).collect();
        let w1 = gaussian_window();
        let w: Vec<f64> = (0..121).map(|i| w1[i / 11] * w1[i % 11]).collect();
        let mean = |x: &[f64]| x.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>();
        let (ma, mb) = (mean(&a), mean(&b));
        let var = |x: &[f64], m: f64| x.iter().zip(&w).map(|(v, w)| w * (v - m) * (v - m)).sum::<f64>();
        let cov: f64 = a.iter().zip(&b).zip(&w).map(|((x, y), w)| w * (x - ma) * (y - mb)).sum();
        let (c1, c2) = (1e-4, 9e-4);
        let want = (2.0 * ma * mb + c1) * (2.0 * cov + c2)
            / ((ma * ma + mb * mb + c1) * (var(&a, ma) + var(&b, mb) + c2));
        assert!((ssim_normalized(&a, &b, 11, 11) - want).abs() < 1e-12);
    }

    #[test]
    fn spectrum_loss_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..10).map(|_| rng.gen_range(1e-8..1e-6)).collect();
        let gt: Vec<f64> = (0..10).map(|_| rng.gen_range(-80.0..-60.0)).collect();
        let f = |p: &[f64]| {
            p.iter().zip(&gt).map(|(x, g)| (power_to_db(*x) - g).powi(2)).sum::<f64>() / 10.0
        };
        let grad = spectrum_loss_grad(&p, &gt);
        for i in 0..10 {
            let h = p[i] * 1e-6;
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn global_phase_and_scaling(seed in 0u64..500, phase in -3.0f64..3.0, t in 0.1f64..10.0) {
            let cfg = ArrayConfig::half_wavelength_4x4().with_grid(12, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_h(&mut rng, 16);
            let s = cbf_spectrum(&h, &cfg).unwrap();
            let rot = Complex64::from_polar(t, phase);
            let h2 = ChannelVector { entries: h.entries.iter().map(|e| e * rot).collect() };
            let s2 = cbf_spectrum(&h2, &cfg).unwrap();
            for (a, b) in s.values.iter().zip(&s2.values) {
                prop_assert!((b - a * t * t).abs() <= 1e-12 * b.abs().max(1e-30));
            }
            prop_assert_eq!(s.argmax(), s2.argmax());
            let (d1, d2) = (to_db(&s), to_db(&s2));
            for (a, b) in d1.values.iter().zip(&d2.values) {
                if *a > -140.0 {
                    prop_assert!((b - a - 20.0 * t.log10()).abs() < 1e-9);
                }
            }
        }
    }
}
