//! Real spherical harmonics and the bidirectional SH (BSH) scattering model.
//!
//! The basis uses the `sqrt((2n+1)/(2π) · (n-i)!/(n+i)!)` normalization with
//! the Condon-Shortley phase carried by the associated Legendre functions
//! `H_n^i`. Coefficients of degree `n` are stored at flat index `n² + n + i`.
//!
//! Internally every basis function is evaluated as a polynomial in the unit
//! direction `(x, y, z)`: `sin^|i|θ · cos(iφ)` is `Re((x + jy)^|i|)`. That keeps
//! values and gradients smooth at the poles, where `(θ, φ)` is singular.
//!
//! A BSH matrix `A` couples a scattering direction `s` and an incident
//! direction `s'` through `y(s)ᵀ A y(s')`. Reciprocity under
//! `(s, s') -> (-s', -s)` holds exactly when `A[i,k] = A[k,i]` for indices of
//! equal degree parity and `A[i,k] = -A[k,i]` otherwise. [`BshCoefficients`]
//! stores only the upper triangle, so no other matrix can be built.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{SMatrix, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CkmError, Result};

/// Degree used by the scattering model.
pub const SH_DEGREE: usize = 3;
/// Basis length for [`SH_DEGREE`].
pub const SH_COUNT: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);
/// Number of independent entries of a reciprocity-constrained BSH matrix.
pub const BSH_FREE_COUNT: usize = SH_COUNT * (SH_COUNT + 1) / 2;

pub type BshMatrix = SMatrix<f64, SH_COUNT, SH_COUNT>;

#[derive(Debug, Clone, PartialEq)]
pub struct ShBasisVector {
    pub degree: usize,
    pub values: Vec<f64>,
}

/// Degree `n` of the basis function stored at flat index `idx`.
pub fn degree_of(idx: usize) -> usize {
    let mut n = 0;
    while (n + 1) * (n + 1) <= idx {
        n += 1;
    }
    n
}

/// True when basis function `idx` is even under `(θ, φ) -> (π-θ, π+φ)`.
pub fn is_even_parity(idx: usize) -> bool {
    degree_of(idx) % 2 == 0
}

/// 1-based even/odd index sets for degree 3.
pub fn parity_index_sets() -> (Vec<usize>, Vec<usize>) {
    let (even, odd): (Vec<usize>, Vec<usize>) = (0..SH_COUNT).partition(|&i| is_even_parity(i));
    (
        even.into_iter().map(|i| i + 1).collect(),
        odd.into_iter().map(|i| i + 1).collect(),
    )
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Per-(n, |i|) normalization and the polynomial part of `H_n^|i|`.
struct LegendreTable {
    /// `norm[n][a]` = sqrt((2n+1)/(2π) · (n-a)!/(n+a)!).
    norm: [[f64; SH_DEGREE + 1]; SH_DEGREE + 1],
    /// `poly[n][a]` holds ascending coefficients of `Q_n^a(t)`, where
    /// `H_n^a(t) = (1-t²)^{a/2} Q_n^a(t)`.
    poly: [[Vec<f64>; SH_DEGREE + 1]; SH_DEGREE + 1],
}

fn legendre_table() -> &'static LegendreTable {
    static TABLE: OnceLock<LegendreTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut norm = [[0.0; SH_DEGREE + 1]; SH_DEGREE + 1];
        let mut poly: [[Vec<f64>; SH_DEGREE + 1]; SH_DEGREE + 1] = Default::default();
        for n in 0..=SH_DEGREE {
            // (t² - 1)^n expanded in ascending powers of t.
            let mut base = vec![0.0; 2 * n + 1];
            for k in 0..=n {
                let sign = if (n - k) % 2 == 0 { 1.0 } else { -1.0 };
                base[2 * k] = sign * binomial(n, k);
            }
            for a in 0..=n {
                let mut coeffs = base.clone();
                for _ in 0..(n + a) {
                    coeffs = (1..coeffs.len())
                        .map(|p| p as f64 * coeffs[p])
                        .collect();
                }
                let sign = if a % 2 == 0 { 1.0 } else { -1.0 };
                let scale = sign / (2f64.powi(n as i32) * factorial(n));
                poly[n][a] = coeffs.into_iter().map(|c| c * scale).collect();
                norm[n][a] = ((2 * n + 1) as f64 / (2.0 * PI) * factorial(n - a)
                    / factorial(n + a))
                .sqrt();
            }
        }
        LegendreTable { norm, poly }
    })
}

fn poly_eval(coeffs: &[f64], t: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut deriv = 0.0;
    for &c in coeffs.iter().rev() {
        deriv = deriv * t + value;
        value = value * t + c;
    }
    (value, deriv)
}

/// Basis values and their gradients with respect to the Cartesian direction
/// components, evaluated at a unit direction.
#[derive(Debug, Clone, Copy)]
pub struct ShDirEval {
    pub values: [f64; SH_COUNT],
    pub grads: [[f64; 3]; SH_COUNT],
}

/// Evaluates the degree-3 basis at unit direction `u`, with the gradient of
/// each function viewed as a polynomial in `(x, y, z)`.
pub fn sh_eval_dir(u: &Vector3<f64>) -> ShDirEval {
    let table = legendre_table();
    let w = Complex64::new(u.x, u.y);
    // powers[a] = w^a
    let mut powers = [Complex64::new(1.0, 0.0); SH_DEGREE + 1];
    for a in 1..=SH_DEGREE {
        powers[a] = powers[a - 1] * w;
    }
    let mut values = [0.0; SH_COUNT];
    let mut grads = [[0.0; 3]; SH_COUNT];
    for n in 0..=SH_DEGREE {
        for a in 0..=n {
            let (q, dq) = poly_eval(&table.poly[n][a], u.z);
            let k = table.norm[n][a];
            let pw = powers[a];
            // d(w^a)/dx = a w^{a-1}, d(w^a)/dy = j a w^{a-1}
            let dw = if a == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                powers[a - 1] * a as f64
            };
            let dw_dy = Complex64::new(0.0, 1.0) * dw;

            let idx = n * n + n + a;
            values[idx] = k * q * pw.re;
            grads[idx] = [k * q * dw.re, k * q * dw_dy.re, k * dq * pw.re];

            if a > 0 {
                let sign = if a % 2 == 1 { 1.0 } else { -1.0 };
                let idx = n * n + n - a;
                values[idx] = sign * k * q * pw.im;
                grads[idx] = [
                    sign * k * q * dw.im,
                    sign * k * q * dw_dy.im,
                    sign * k * dq * pw.im,
                ];
            }
        }
    }
    ShDirEval { values, grads }
}

/// Unit direction for elevation `theta` (from +z) and azimuth `phi` (from +x).
pub fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// `(θ, φ)` of a nonzero vector, with `φ ∈ (-π, π]`.
pub fn angles_of(v: &Vector3<f64>) -> (f64, f64) {
    let r = v.norm();
    let theta = (v.z / r).clamp(-1.0, 1.0).acos();
    let phi = v.y.atan2(v.x);
    (theta, phi)
}

/// Real SH basis vector of the given degree at `(theta, phi)`.
pub fn sh_basis(theta: f64, phi: f64, degree: usize) -> Result<ShBasisVector> {
    if degree > SH_DEGREE {
        return Err(CkmError::UnsupportedDegree(degree));
    }
    let phi = phi.rem_euclid(2.0 * PI);
    let eval = sh_eval_dir(&direction(theta, phi));
    let len = (degree + 1) * (degree + 1);
    Ok(ShBasisVector {
        degree,
        values: eval.values[..len].to_vec(),
    })
}

/// Basis values together with `∂/∂θ` and `∂/∂φ` of each function.
pub fn sh_basis_angle_grad(
    theta: f64,
    phi: f64,
    degree: usize,
) -> Result<(ShBasisVector, Vec<f64>, Vec<f64>)> {
    if degree > SH_DEGREE {
        return Err(CkmError::UnsupportedDegree(degree));
    }
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let u = Vector3::new(st * cp, st * sp, ct);
    let du_dtheta = Vector3::new(ct * cp, ct * sp, -st);
    let du_dphi = Vector3::new(-st * sp, st * cp, 0.0);
    let eval = sh_eval_dir(&u);
    let len = (degree + 1) * (degree + 1);
    let dot = |g: &[f64; 3], d: &Vector3<f64>| g[0] * d.x + g[1] * d.y + g[2] * d.z;
    let d_theta = eval.grads[..len].iter().map(|g| dot(g, &du_dtheta)).collect();
    let d_phi = eval.grads[..len].iter().map(|g| dot(g, &du_dphi)).collect();
    Ok((
        ShBasisVector {
            degree,
            values: eval.values[..len].to_vec(),
        },
        d_theta,
        d_phi,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BshPart {
    Real,
    Imag,
}

/// Upper-triangle storage of a reciprocity-constrained BSH matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BshCoefficients {
    free_params: Vec<f64>,
    part: BshPart,
}

/// Position of entry `(i, k)`, `i <= k`, in the free-parameter vector.
pub fn free_index(i: usize, k: usize) -> usize {
    debug_assert!(i <= k && k < SH_COUNT);
    i * SH_COUNT - i * (i + 1) / 2 + k
}

/// Sign linking `A[k,i]` to `A[i,k]`.
pub fn mirror_sign(i: usize, k: usize) -> f64 {
    if is_even_parity(i) == is_even_parity(k) {
        1.0
    } else {
        -1.0
    }
}

impl BshCoefficients {
    pub fn zeros(part: BshPart) -> Self {
        Self {
            free_params: vec![0.0; BSH_FREE_COUNT],
            part,
        }
    }

    pub fn from_free(part: BshPart, free_params: Vec<f64>) -> Result<Self> {
        if free_params.len() != BSH_FREE_COUNT {
            return Err(CkmError::ShapeMismatch(format!(
                "expected {BSH_FREE_COUNT} free BSH parameters, got {}",
                free_params.len()
            )));
        }
        Ok(Self { free_params, part })
    }

    pub fn part(&self) -> BshPart {
        self.part
    }

    pub fn free_params(&self) -> &[f64] {
        &self.free_params
    }

    pub fn free_params_mut(&mut self) -> &mut [f64] {
        &mut self.free_params
    }

    /// Entry `(i, k)` of the materialized matrix.
    pub fn get(&self, i: usize, k: usize) -> f64 {
        if i <= k {
            self.free_params[free_index(i, k)]
        } else {
            mirror_sign(k, i) * self.free_params[free_index(k, i)]
        }
    }

    /// Sets the free entry that owns `(i, k)` so that `A[i,k] == value`.
    pub fn set(&mut self, i: usize, k: usize, value: f64) {
        if i <= k {
            self.free_params[free_index(i, k)] = value;
        } else {
            self.free_params[free_index(k, i)] = mirror_sign(k, i) * value;
        }
    }

    pub fn materialize(&self) -> BshMatrix {
        let mut a = BshMatrix::zeros();
        for i in 0..SH_COUNT {
            for k in i..SH_COUNT {
                let v = self.free_params[free_index(i, k)];
                a[(i, k)] = v;
                if k != i {
                    a[(k, i)] = mirror_sign(i, k) * v;
                }
            }
        }
        a
    }

    /// Folds a gradient with respect to the full matrix onto the free entries.
    pub fn fold_gradient(full: &BshMatrix, out: &mut [f64]) {
        for i in 0..SH_COUNT {
            for k in i..SH_COUNT {
                let mut g = full[(i, k)];
                if k != i {
                    g += mirror_sign(i, k) * full[(k, i)];
                }
                out[free_index(i, k)] += g;
            }
        }
    }
}

/// Free function form of [`BshCoefficients::materialize`].
pub fn materialize(c: &BshCoefficients) -> BshMatrix {
    c.materialize()
}

/// Smooth magnitude bound `v / (1 + |v|)`; phase-preserving, `|out| < 1`.
pub fn bound_magnitude(v: Complex64) -> Complex64 {
    v / (1.0 + v.norm())
}

/// Adjoint of [`bound_magnitude`]: maps `∂L/∂out` to `∂L/∂v`, both in the
/// `∂L/∂Re + j ∂L/∂Im` convention.
pub fn bound_magnitude_adjoint(v: Complex64, grad_out: Complex64) -> Complex64 {
    let r = v.norm();
    let f = 1.0 / (1.0 + r);
    if r < 1e-300 {
        return grad_out * f;
    }
    let fp = -f * f;
    let dv_da = Complex64::new(f, 0.0) + v * (fp * v.re / r);
    let dv_db = Complex64::new(0.0, f) + v * (fp * v.im / r);
    Complex64::new(
        (grad_out.conj() * dv_da).re,
        (grad_out.conj() * dv_db).re,
    )
}

/// Unbounded value `y(s)ᵀ A_re y(s') + j y(s)ᵀ A_im y(s')`.
pub fn bsh_eval_raw_dirs(
    a_re: &BshMatrix,
    a_im: &BshMatrix,
    y_scatter: &[f64; SH_COUNT],
    y_incident: &[f64; SH_COUNT],
) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for i in 0..SH_COUNT {
        let ys = y_scatter[i];
        if ys == 0.0 {
            continue;
        }
        let mut row_re = 0.0;
        let mut row_im = 0.0;
        for k in 0..SH_COUNT {
            row_re += a_re[(i, k)] * y_incident[k];
            row_im += a_im[(i, k)] * y_incident[k];
        }
        re += ys * row_re;
        im += ys * row_im;
    }
    Complex64::new(re, im)
}

/// Bounded bidirectional scattering coefficient `V` for scattering direction
/// `(theta, phi)` and incident direction `(theta_in, phi_in)`.
pub fn bsh_eval(
    c_re: &BshCoefficients,
    c_im: &BshCoefficients,
    theta: f64,
    phi: f64,
    theta_in: f64,
    phi_in: f64,
) -> Complex64 {
    let ys = sh_eval_dir(&direction(theta, phi.rem_euclid(2.0 * PI))).values;
    let yi = sh_eval_dir(&direction(theta_in, phi_in.rem_euclid(2.0 * PI))).values;
    bound_magnitude(bsh_eval_raw_dirs(
        &c_re.materialize(),
        &c_im.materialize(),
        &ys,
        &yi,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Associated Legendre `P_n^m(x)` with Condon-Shortley phase via the
    /// standard upward recurrences; shares no code with the polynomial table.
    fn legendre_recurrence(n: usize, m: usize, x: f64) -> f64 {
        let mut pmm = 1.0;
        let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
        if n == m {
            return pmm;
        }
        let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
        if n == m + 1 {
            return pmmp1;
        }
        let mut pnm = 0.0;
        for l in (m + 2)..=n {
            pnm = (x * (2 * l - 1) as f64 * pmmp1 - (l + m - 1) as f64 * pmm) / (l - m) as f64;
            pmm = pmmp1;
            pmmp1 = pnm;
        }
        pnm
    }

    fn oracle_basis(theta: f64, phi: f64) -> Vec<f64> {
        let mut out = vec![0.0; SH_COUNT];
        for n in 0..=SH_DEGREE {
            for i in -(n as i64)..=(n as i64) {
                let idx = (n * n + n) as i64 + i;
                let a = i.unsigned_abs() as usize;
                let fact_ratio = |p: usize, q: usize| factorial(p) / factorial(q);
                let value = if i >= 0 {
                    ((2 * n + 1) as f64 / (2.0 * PI) * fact_ratio(n - a, n + a)).sqrt()
                        * legendre_recurrence(n, a, theta.cos())
                        * (a as f64 * phi).cos()
                } else {
                    // H_n^{-a} = (-1)^a (n-a)!/(n+a)! H_n^a, literal form.
                    let h_neg = (-1f64).powi(a as i32)
                        * fact_ratio(n - a, n + a)
                        * legendre_recurrence(n, a, theta.cos());
                    ((2 * n + 1) as f64 / (2.0 * PI) * fact_ratio(n + a, n - a)).sqrt()
                        * h_neg
                        * (i as f64 * phi).sin()
                };
                out[idx as usize] = value;
            }
        }
        out
    }

    #[test]
    fn degree_zero_constant() {
        let y = sh_basis(0.7, -2.1, 0).unwrap();
        assert_eq!(y.values.len(), 1);
        assert!((y.values[0] - (1.0 / (2.0 * PI)).sqrt()).abs() < 1e-15);
        assert!((y.values[0] - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn pole_kills_nonzero_orders() {
        let y = sh_basis(0.0, 1.234, 3).unwrap();
        for n in 0..=3usize {
            for i in -(n as i64)..=(n as i64) {
                if i != 0 {
                    let idx = ((n * n + n) as i64 + i) as usize;
                    assert!(y.values[idx].abs() < 1e-15, "n={n} i={i}");
                }
            }
        }
    }

    #[test]
    fn unsupported_degree() {
        assert!(matches!(
            sh_basis(0.1, 0.2, 4),
            Err(CkmError::UnsupportedDegree(4))
        ));
    }

    #[test]
    fn matches_recurrence_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let theta = rng.gen_range(0.0..PI);
            let phi = rng.gen_range(-PI..PI);
            let got = sh_basis(theta, phi, 3).unwrap().values;
            let want = oracle_basis(theta, phi);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn index_sets_match_degree_partition() {
        let (even, odd) = parity_index_sets();
        assert_eq!(even, vec![1, 5, 6, 7, 8, 9]);
        assert_eq!(odd, vec![2, 3, 4, 10, 11, 12, 13, 14, 15, 16]);
    }

    #[test]
    fn parity_on_grid() {
        for a in 0..20 {
            for b in 0..20 {
                let theta = PI * (a as f64 + 0.5) / 20.0;
                let phi = -PI + 2.0 * PI * (b as f64 + 0.5) / 20.0;
                let y = sh_basis(theta, phi, 3).unwrap().values;
                let yr = sh_basis(PI - theta, PI + phi, 3).unwrap().values;
                for i in 0..SH_COUNT {
                    let s = if is_even_parity(i) { 1.0 } else { -1.0 };
                    assert!((y[i] - s * yr[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn angle_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..50 {
            let theta = rng.gen_range(0.1..PI - 0.1);
            let phi = rng.gen_range(-PI..PI);
            let (_, dt, dp) = sh_basis_angle_grad(theta, phi, 3).unwrap();
            let yp = sh_basis(theta + h, phi, 3).unwrap().values;
            let ym = sh_basis(theta - h, phi, 3).unwrap().values;
            let zp = sh_basis(theta, phi + h, 3).unwrap().values;
            let zm = sh_basis(theta, phi - h, 3).unwrap().values;
            for i in 0..SH_COUNT {
                let fd_t = (yp[i] - ym[i]) / (2.0 * h);
                let fd_p = (zp[i] - zm[i]) / (2.0 * h);
                let scale_t = dt[i].abs().max(fd_t.abs()).max(1e-3);
                let scale_p = dp[i].abs().max(fd_p.abs()).max(1e-3);
                assert!((dt[i] - fd_t).abs() / scale_t < 1e-6, "theta i={i}");
                assert!((dp[i] - fd_p).abs() / scale_p < 1e-6, "phi i={i}");
            }
        }
    }

    #[test]
    fn materialize_cases() {
        let zero = BshCoefficients::zeros(BshPart::Real);
        assert_eq!(zero.materialize(), BshMatrix::zeros());

        // 1-based (1, 5) are both even; (1, 2) is mixed.
        let mut c = BshCoefficients::zeros(BshPart::Real);
        c.free_params_mut()[free_index(0, 4)] = 1.0;
        let a = c.materialize();
        assert_eq!(a[(0, 4)], 1.0);
        assert_eq!(a[(4, 0)], 1.0);

        let mut c = BshCoefficients::zeros(BshPart::Imag);
        c.free_params_mut()[free_index(0, 1)] = 1.0;
        let a = c.materialize();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 0)], -1.0);
    }

    #[test]
    fn get_set_agree_with_materialize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = BshCoefficients::zeros(BshPart::Real);
        for _ in 0..40 {
            let i = rng.gen_range(0..SH_COUNT);
            let k = rng.gen_range(0..SH_COUNT);
            c.set(i, k, rng.gen_range(-1.0..1.0));
        }
        let a = c.materialize();
        for i in 0..SH_COUNT {
            for k in 0..SH_COUNT {
                assert_eq!(a[(i, k)], c.get(i, k));
            }
        }
    }

    #[test]
    fn from_free_rejects_wrong_length() {
        assert!(BshCoefficients::from_free(BshPart::Real, vec![0.0; 10]).is_err());
    }

    #[test]
    fn zero_coefficients_give_zero() {
        let z = BshCoefficients::zeros(BshPart::Real);
        let zi = BshCoefficients::zeros(BshPart::Imag);
        assert_eq!(bsh_eval(&z, &zi, 0.3, 0.2, 1.1, -0.4), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn bound_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let w = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            // L = Re(conj(w) * bound(v))
            let loss = |v: Complex64| (w.conj() * bound_magnitude(v)).re;
            let g = bound_magnitude_adjoint(v, w);
            let h = 1e-6;
            let fd_re = (loss(v + h) - loss(v - h)) / (2.0 * h);
            let jh = Complex64::new(0.0, h);
            let fd_im = (loss(v + jh) - loss(v - jh)) / (2.0 * h);
            assert!((g.re - fd_re).abs() < 1e-8);
            assert!((g.im - fd_im).abs() < 1e-8);
        }
    }
}
