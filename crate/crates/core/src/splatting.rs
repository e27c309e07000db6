//! Wireless splatting: virtual projection planes, parallel projection of
//! ellipsoids to 2D Gaussians, and path-set selection.
//!
//! Every plane used by the renderer is queried at its own origin, so the 2D
//! density of a splat at the query point is the density of the 3D Gaussian
//! marginalized along the plane normal. [`LineDensity`] evaluates it in closed
//! form without building the in-plane basis; [`splat`] is the explicit
//! projection and both agree to rounding.

use nalgebra::{Matrix2, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{CkmError, Result};
use crate::harmonics::direction;
use crate::scene::{AngleGrid, GaussianEllipsoid, Pose, Scene};

/// Default density cutoff for path-set membership.
pub const DEFAULT_EPS_SEL: f64 = 0.01;
/// Eigenvalue floor applied to projected 2D covariances, m².
pub const COV2D_FLOOR: f64 = 1e-12;
/// Endpoint margin for segment membership, in wavelengths.
pub const MARGIN_WAVELENGTHS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionPlane {
    pub anchor: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub basis: [Vector3<f64>; 2],
}

impl ProjectionPlane {
    /// Plane through `anchor` with the given normal direction (normalized here).
    pub fn new(anchor: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(CkmError::DegenerateGeometry("zero plane normal".into()));
        }
        let n = normal / len;
        // Gram-Schmidt against the axis where the normal is smallest.
        let abs = n.abs();
        let axis = if abs.x <= abs.y && abs.x <= abs.z {
            Vector3::x()
        } else if abs.y <= abs.z {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let b1 = (axis - n * n.dot(&axis)).normalize();
        let b2 = n.cross(&b1);
        Ok(Self {
            anchor,
            normal: n,
            basis: [b1, b2],
        })
    }

    /// Rows `[b1; b2; n]`.
    pub fn frame(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[
            self.basis[0].transpose(),
            self.basis[1].transpose(),
            self.normal.transpose(),
        ])
    }

    pub fn depth_of(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

impl Splat2D {
    /// 2D Gaussian density at in-plane point `x`, after flooring the
    /// covariance eigenvalues.
    pub fn density_at(&self, x: &Vector2<f64>) -> f64 {
        let c = floored(&self.cov2d);
        let d = x - self.mean2d;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let q = (c[(1, 1)] * d.x * d.x - 2.0 * c[(0, 1)] * d.x * d.y + c[(0, 0)] * d.y * d.y) / det;
        (-0.5 * q).exp()
    }

    pub fn density_at_origin(&self) -> f64 {
        self.density_at(&Vector2::zeros())
    }
}

fn floored(c: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = c.symmetric_eigen();
    if eig.eigenvalues.min() >= COV2D_FLOOR {
        return *c;
    }
    let ev = eig.eigenvalues.map(|v| v.max(COV2D_FLOOR));
    eig.eigenvectors * Matrix2::from_diagonal(&ev) * eig.eigenvectors.transpose()
}

/// Parallel projection of an ellipsoid onto a plane.
pub fn splat(e: &GaussianEllipsoid, plane: &ProjectionPlane) -> Splat2D {
    let w = plane.frame();
    let rel_mean = w * (e.mean - plane.anchor);
    let cov = w * e.covariance() * w.transpose();
    Splat2D {
        mean2d: Vector2::new(rel_mean.x, rel_mean.y),
        cov2d: cov.fixed_view::<2, 2>(0, 0).into_owned(),
        depth: rel_mean.z,
    }
}

fn unit_between(from: &Vector3<f64>, to: &Vector3<f64>, what: &str) -> Result<(Vector3<f64>, f64)> {
    let d = to - from;
    let len = d.norm();
    if !(len > 0.0) {
        return Err(CkmError::DegenerateGeometry(format!("coincident points for {what}")));
    }
    Ok((d / len, len))
}

/// Tx-side plane for the path towards `p_m`: anchored at the transmitter with
/// the normal pointing at the ellipsoid, so the ellipsoid's own depth is the
/// Tx-ellipsoid distance.
pub fn tx_plane(p_t: &Vector3<f64>, p_m: &Vector3<f64>) -> Result<ProjectionPlane> {
    let (n, _) = unit_between(p_t, p_m, "tx plane")?;
    ProjectionPlane::new(*p_t, n)
}

/// Rx-side plane for the AOA `(theta, phi)` given in the receiver frame.
pub fn rx_plane(
    p_r: &Vector3<f64>,
    theta: f64,
    phi: f64,
    rx_orientation: &UnitQuaternion<f64>,
) -> Result<ProjectionPlane> {
    ProjectionPlane::new(*p_r, rx_orientation * direction(theta, phi))
}

/// Direct-path plane anchored at the receiver with normal `(p_r - p_t)/‖·‖`.
/// Ellipsoids between Tx and Rx have depths in `(-d_L, 0)`.
pub fn direct_plane(p_t: &Vector3<f64>, p_r: &Vector3<f64>) -> Result<ProjectionPlane> {
    let (n, _) = unit_between(p_t, p_r, "direct plane")?;
    ProjectionPlane::new(*p_r, n)
}

/// Marginal density of an ellipsoid on the line `anchor + t·normal`.
///
/// With `d = μ - anchor`, `t* = nᵀPd / nᵀPn` and `e = d - t*·n`, the squared
/// 2D Mahalanobis distance is `q = eᵀPe`. Its gradients are
/// `∂q/∂μ = 2Pe`, `∂q/∂n = -2t*·Pe` and `∂q/∂P = eeᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineDensity {
    pub depth: f64,
    pub q: f64,
    pub density: f64,
    pub t_star: f64,
    pub offset: Vector3<f64>,
}

impl LineDensity {
    pub fn eval(
        mean: &Vector3<f64>,
        precision: &Matrix3<f64>,
        anchor: &Vector3<f64>,
        normal: &Vector3<f64>,
    ) -> Self {
        let d = mean - anchor;
        let pn = precision * normal;
        let t_star = pn.dot(&d) / pn.dot(normal);
        let offset = d - normal * t_star;
        let q = offset.dot(&(precision * offset)).max(0.0);
        Self {
            depth: normal.dot(&d),
            q,
            density: (-0.5 * q).exp(),
            t_star,
            offset,
        }
    }

    /// `∂q/∂μ`.
    pub fn dq_dmean(&self, precision: &Matrix3<f64>) -> Vector3<f64> {
        2.0 * precision * self.offset
    }

    /// `∂q/∂n` for a normal treated as a free 3-vector.
    pub fn dq_dnormal(&self, precision: &Matrix3<f64>) -> Vector3<f64> {
        -2.0 * self.t_star * (precision * self.offset)
    }

    /// `∂q/∂P`.
    pub fn dq_dprecision(&self) -> Matrix3<f64> {
        self.offset * self.offset.transpose()
    }
}

/// Geometry of one ellipsoid needed for selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub mean: Vector3<f64>,
    pub precision: Matrix3<f64>,
    /// Lateral distance beyond which the marginal density is below the cutoff.
    pub reach: f64,
}

impl Footprint {
    pub fn new(e: &GaussianEllipsoid, eps_sel: f64) -> Self {
        Self {
            mean: e.mean,
            precision: e.precision(),
            reach: e.max_scale() * q_cutoff(eps_sel).sqrt(),
        }
    }
}

/// Largest `q` whose density `exp(-q/2)` still reaches `eps_sel`.
pub fn q_cutoff(eps_sel: f64) -> f64 {
    2.0 * (1.0 / eps_sel).ln()
}

/// Open depth interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthInterval {
    pub lo: f64,
    pub hi: f64,
}

impl DepthInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, depth: f64) -> bool {
        depth > self.lo && depth < self.hi
    }
}

/// An ellipsoid selected on a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub index: usize,
    pub line: LineDensity,
    /// For Rx rays: how many earlier members lie strictly in front of this
    /// one and therefore occlude it.
    pub prefix: usize,
}

fn sort_members(members: &mut [Member]) {
    members.sort_by(|a, b| {
        a.line
            .depth
            .total_cmp(&b.line.depth)
            .then(a.index.cmp(&b.index))
    });
}

/// Ellipsoids on the line `plane.anchor + t·plane.normal` whose depth lies in
/// `interval` and whose marginal density is at least `eps_sel`, ascending in
/// depth. `skip` excludes one index (the path's own ellipsoid).
pub fn select_on_line(
    footprints: &[Footprint],
    anchor: &Vector3<f64>,
    normal: &Vector3<f64>,
    interval: DepthInterval,
    eps_sel: f64,
    skip: Option<usize>,
) -> Vec<Member> {
    let qmax = q_cutoff(eps_sel);
    let mut out = Vec::new();
    for (k, f) in footprints.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        let d = f.mean - anchor;
        let depth = normal.dot(&d);
        if !interval.contains(depth) {
            continue;
        }
        let perp2 = (d.norm_squared() - depth * depth).max(0.0);
        if perp2 > f.reach * f.reach {
            continue;
        }
        let line = LineDensity::eval(&f.mean, &f.precision, anchor, normal);
        if line.q <= qmax {
            out.push(Member {
                index: k,
                line,
                prefix: 0,
            });
        }
    }
    sort_members(&mut out);
    out
}

/// Fills in `prefix` for a depth-sorted ray member list.
pub fn assign_prefixes(members: &mut [Member], margin: f64) {
    let depths: Vec<f64> = members.iter().map(|m| m.line.depth).collect();
    for m in members.iter_mut() {
        let limit = m.line.depth - margin;
        m.prefix = depths.partition_point(|&d| d < limit);
    }
}

/// World-frame ray directions of an AOA grid for one receiver orientation.
#[derive(Debug, Clone)]
pub struct RayGrid {
    pub grid: AngleGrid,
    pub local: Vec<Vector3<f64>>,
    pub theta: Vec<f64>,
}

impl RayGrid {
    pub fn new(grid: AngleGrid) -> Self {
        let local = (0..grid.len()).map(|c| grid.local_direction(c)).collect();
        let theta = (0..grid.n_theta).map(|i| grid.theta(i)).collect();
        Self { grid, local, theta }
    }

    /// Cells whose world direction lies within the cone of half-angle
    /// `asin(reach / r)` around `local_target` (receiver frame), together
    /// with every cell when the receiver sits inside the reach sphere.
    fn candidate_cells(&self, local_target: &Vector3<f64>, reach: f64, out: &mut Vec<usize>) {
        out.clear();
        let r = local_target.norm();
        if !(r > 0.0) {
            return;
        }
        let c = local_target / r;
        let ratio = reach / r;
        if ratio >= 1.0 {
            // Any direction with positive depth may qualify.
            for (cell, u) in self.local.iter().enumerate() {
                if u.dot(&c) > 0.0 {
                    out.push(cell);
                }
            }
            return;
        }
        let cos_max = (1.0 - ratio * ratio).sqrt();
        let half = ratio.asin();
        let (theta_c, _) = crate::harmonics::angles_of(&c);
        let slack = 1e-9;
        let n_phi = self.grid.n_phi;
        for (i, &t) in self.theta.iter().enumerate() {
            if (t - theta_c).abs() > half + slack {
                continue;
            }
            for j in 0..n_phi {
                let cell = i * n_phi + j;
                if self.local[cell].dot(&c) >= cos_max - slack {
                    out.push(cell);
                }
            }
        }
    }
}

/// All path sets for one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSets {
    /// Per grid cell: penetrated ellipsoids ascending in depth, each with its
    /// Rx-side occluder prefix.
    pub penetrated: Vec<Vec<Member>>,
    /// Per ellipsoid: Tx-side occluders, empty for ellipsoids on no ray.
    pub occluders_tx: Vec<Vec<Member>>,
    /// Ellipsoids between Tx and Rx.
    pub direct_occluders: Vec<Member>,
}

impl PathSets {
    /// Rx-side occluders of the `pos`-th member of `cell`.
    pub fn occluders_rx(&self, cell: usize, pos: usize) -> &[Member] {
        let ray = &self.penetrated[cell];
        &ray[..ray[pos].prefix]
    }

    /// Ellipsoids that appear on at least one ray.
    pub fn active(&self, count: usize) -> Vec<bool> {
        let mut active = vec![false; count];
        for ray in &self.penetrated {
            for m in ray {
                active[m.index] = true;
            }
        }
        active
    }
}

/// Selection parameters shared by every path set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub eps_sel: f64,
    pub margin: f64,
}

impl SelectionParams {
    pub fn for_wavelength(wavelength: f64) -> Self {
        Self {
            eps_sel: DEFAULT_EPS_SEL,
            margin: MARGIN_WAVELENGTHS * wavelength,
        }
    }
}

/// Selects the penetrated ellipsoids of every ray in `rays`.
pub fn select_rays(
    footprints: &[Footprint],
    pose: &Pose,
    rays: &RayGrid,
    params: SelectionParams,
) -> Vec<Vec<Member>> {
    let qmax = q_cutoff(params.eps_sel);
    let rot: Rotation3<f64> = pose.rx_orientation.to_rotation_matrix();
    let rot_t = rot.transpose();
    let mut per_cell: Vec<Vec<Member>> = vec![Vec::new(); rays.grid.len()];
    let mut cells = Vec::new();
    for (k, f) in footprints.iter().enumerate() {
        let d = f.mean - pose.rx;
        rays.candidate_cells(&(rot_t * d), f.reach, &mut cells);
        for &cell in &cells {
            let n = rot * rays.local[cell];
            let depth = n.dot(&d);
            if depth <= params.margin {
                continue;
            }
            let line = LineDensity::eval(&f.mean, &f.precision, &pose.rx, &n);
            if line.q <= qmax {
                per_cell[cell].push(Member {
                    index: k,
                    line,
                    prefix: 0,
                });
            }
        }
    }
    for ray in &mut per_cell {
        sort_members(ray);
        assign_prefixes(ray, params.margin);
    }
    per_cell
}

/// Tx-side occluders of ellipsoid `m`: ellipsoids strictly between the
/// transmitter and `m` on the Tx-side plane.
pub fn select_tx_occluders(
    footprints: &[Footprint],
    p_t: &Vector3<f64>,
    m: usize,
    params: SelectionParams,
) -> Option<(Vector3<f64>, f64, Vec<Member>)> {
    let d = footprints[m].mean - p_t;
    let d_t = d.norm();
    if !(d_t > 0.0) {
        return None;
    }
    let n = d / d_t;
    let interval = DepthInterval::new(params.margin, d_t - params.margin);
    let members = select_on_line(footprints, p_t, &n, interval, params.eps_sel, Some(m));
    Some((n, d_t, members))
}

/// Ellipsoids strictly between Tx and Rx on the direct-path plane.
pub fn select_direct_occluders(
    footprints: &[Footprint],
    p_t: &Vector3<f64>,
    p_r: &Vector3<f64>,
    params: SelectionParams,
) -> Result<Vec<Member>> {
    let plane = direct_plane(p_t, p_r)?;
    let d_l = (p_r - p_t).norm();
    let interval = DepthInterval::new(-d_l + params.margin, -params.margin);
    Ok(select_on_line(
        footprints,
        &plane.anchor,
        &plane.normal,
        interval,
        params.eps_sel,
        None,
    ))
}

/// Builds every path set for a pose on the given ray grid.
pub fn select_path_sets(
    scene: &Scene,
    pose: &Pose,
    rays: &RayGrid,
    params: SelectionParams,
) -> Result<PathSets> {
    let footprints: Vec<Footprint> = scene
        .ellipsoids
        .iter()
        .map(|e| Footprint::new(e, params.eps_sel))
        .collect();
    let penetrated = select_rays(&footprints, pose, rays, params);
    let active = {
        let mut a = vec![false; footprints.len()];
        for ray in &penetrated {
            for m in ray {
                a[m.index] = true;
            }
        }
        a
    };
    let occluders_tx = (0..footprints.len())
        .map(|m| {
            if !active[m] {
                return Vec::new();
            }
            select_tx_occluders(&footprints, &pose.tx, m, params)
                .map(|(_, _, o)| o)
                .unwrap_or_default()
        })
        .collect();
    let direct_occluders = select_direct_occluders(&footprints, &pose.tx, &pose.rx, params)?;
    Ok(PathSets {
        penetrated,
        occluders_tx,
        direct_occluders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Aabb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn rand_v(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        v(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
    }

    fn rand_ellipsoid(rng: &mut ChaCha8Rng) -> GaussianEllipsoid {
        let mut e = GaussianEllipsoid::isotropic(rand_v(rng, 2.0), 1.0);
        e.rotation = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        e.normalize_rotation();
        e.log_scales = v(
            rng.gen_range(-2.0..0.0),
            rng.gen_range(-2.0..0.0),
            rng.gen_range(-2.0..0.0),
        );
        e
    }

    #[test]
    fn plane_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = ProjectionPlane::new(Vector3::zeros(), rand_v(&mut rng, 1.0)).unwrap();
            let w = p.frame();
            assert!((w * w.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((p.normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_constructors() {
        let n = tx_plane(&Vector3::zeros(), &v(1.0, 0.0, 0.0)).unwrap().normal;
        assert_eq!(n, v(1.0, 0.0, 0.0));
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let n = rx_plane(&Vector3::zeros(), 0.0, 0.7, &q).unwrap().normal;
        assert!((n - q * Vector3::z()).norm() < 1e-15);
        let n = direct_plane(&Vector3::zeros(), &v(0.0, 3.0, 4.0)).unwrap().normal;
        assert!((n - v(0.0, 0.6, 0.8)).norm() < 1e-15);
        assert!(matches!(
            tx_plane(&v(1.0, 1.0, 1.0), &v(1.0, 1.0, 1.0)),
            Err(CkmError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn splat_cases() {
        let anchor = v(1.0, 2.0, 3.0);
        let plane = ProjectionPlane::new(anchor, v(0.2, -0.5, 0.7)).unwrap();
        let e = GaussianEllipsoid::isotropic(anchor, 1.0);
        let s = splat(&e, &plane);
        assert!(s.mean2d.norm() < 1e-15 && s.depth.abs() < 1e-15);
        assert!((s.cov2d - Matrix2::identity()).norm() < 1e-14);

        let p_t = v(0.5, -1.0, 2.0);
        let p_m = v(3.0, 1.0, -1.0);
        let e = GaussianEllipsoid::isotropic(p_m, 0.3);
        let s = splat(&e, &tx_plane(&p_t, &p_m).unwrap());
        assert!((s.depth - (p_m - p_t).norm()).abs() < 1e-10);
        assert!(s.mean2d.norm() < 1e-12);
    }

    #[test]
    fn translation_along_normal_only_changes_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let e = rand_ellipsoid(&mut rng);
            let plane = ProjectionPlane::new(rand_v(&mut rng, 1.0), rand_v(&mut rng, 1.0)).unwrap();
            let mut moved = e.clone();
            let shift = rng.gen_range(-3.0..3.0);
            moved.mean += plane.normal * shift;
            let a = splat(&e, &plane);
            let b = splat(&moved, &plane);
            assert!((a.mean2d - b.mean2d).norm() < 1e-12);
            assert!((a.cov2d - b.cov2d).norm() < 1e-12);
            assert!((b.depth - a.depth - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_density_matches_splat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let e = rand_ellipsoid(&mut rng);
            let plane = ProjectionPlane::new(rand_v(&mut rng, 2.0), rand_v(&mut rng, 1.0)).unwrap();
            let s = splat(&e, &plane);
            let line = LineDensity::eval(&e.mean, &e.precision(), &plane.anchor, &plane.normal);
            assert!((s.depth - line.depth).abs() < 1e-12);
            let a = s.density_at_origin();
            assert!((a - line.density).abs() < 1e-10, "{a} vs {}", line.density);
        }
    }

    #[test]
    fn line_density_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..50 {
            let e = rand_ellipsoid(&mut rng);
            let p = e.precision();
            let anchor = rand_v(&mut rng, 1.0);
            let n = rand_v(&mut rng, 1.0).normalize();
            let l = LineDensity::eval(&e.mean, &p, &anchor, &n);
            let q = |m: &Vector3<f64>, p: &Matrix3<f64>, n: &Vector3<f64>| {
                LineDensity::eval(m, p, &anchor, n).q
            };
            let gm = l.dq_dmean(&p);
            let gn = l.dq_dnormal(&p);
            let gp = l.dq_dprecision();
            let scale = 1.0 + l.q;
            for i in 0..3 {
                let mut dm = Vector3::zeros();
                dm[i] = h;
                let fd = (q(&(e.mean + dm), &p, &n) - q(&(e.mean - dm), &p, &n)) / (2.0 * h);
                assert!((fd - gm[i]).abs() < 1e-5 * scale);
                let fd = (q(&e.mean, &p, &(n + dm)) - q(&e.mean, &p, &(n - dm))) / (2.0 * h);
                assert!((fd - gn[i]).abs() < 1e-5 * scale);
                for j in 0..3 {
                    let mut dp = Matrix3::zeros();
                    dp[(i, j)] = h;
                    let fd = (q(&e.mean, &(p + dp), &n) - q(&e.mean, &(p - dp), &n)) / (2.0 * h);
                    assert!((fd - gp[(i, j)]).abs() < 1e-5 * scale);
                }
            }
        }
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let e = rand_ellipsoid(&mut rng);
            let anchor = rand_v(&mut rng, 1.0);
            let n = rand_v(&mut rng, 1.0).normalize();
            let rot = UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            );
            let mut er = e.clone();
            er.mean = rot * e.mean;
            let q0 = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                e.rotation[0],
                e.rotation[1],
                e.rotation[2],
                e.rotation[3],
            ));
            let q1 = rot * q0;
            er.rotation = [q1.w, q1.i, q1.j, q1.k];
            let a = splat(&e, &ProjectionPlane::new(anchor, n).unwrap());
            let b = splat(&er, &ProjectionPlane::new(rot * anchor, rot * n).unwrap());
            assert!((a.depth - b.depth).abs() < 1e-9);
            assert!((a.density_at_origin() - b.density_at_origin()).abs() < 1e-9);
        }
    }

    fn scene_of(ells: Vec<GaussianEllipsoid>) -> Scene {
        let mut s = Scene::new(Aabb::new([-5.0; 3], [5.0; 3]), 0.05);
        s.ellipsoids = ells;
        s
    }

    #[test]
    fn selection_cases() {
        let params = SelectionParams::for_wavelength(0.05);
        let rays = RayGrid::new(AngleGrid::new(9, 9));
        let pose = Pose::new(v(-3.0, 0.0, 0.0), Vector3::zeros());
        let sets = select_path_sets(&scene_of(vec![]), &pose, &rays, params).unwrap();
        assert!(sets.penetrated.iter().all(|r| r.is_empty()));
        assert!(sets.direct_occluders.is_empty());

        // Center cell (θ = π/2, φ = 0) of a 9x9 grid points along +x.
        let center = 4 * 9 + 4;
        let on_ray = GaussianEllipsoid::isotropic(v(2.0, 0.0, 0.0), 1.0);
        let sets = select_path_sets(&scene_of(vec![on_ray.clone()]), &pose, &rays, params).unwrap();
        let m = &sets.penetrated[center][0];
        assert_eq!(m.index, 0);
        assert!((m.line.density - 1.0).abs() < 1e-12);
        assert!((m.line.depth - 2.0).abs() < 1e-12);

        let mut off = GaussianEllipsoid::isotropic(v(2.0, 0.0, 0.0), 0.1);
        off.mean.z += 1.0; // 10σ off the center ray
        let sets = select_path_sets(&scene_of(vec![off]), &pose, &rays, params).unwrap();
        assert!(sets.penetrated[center].is_empty());
    }

    #[test]
    fn tx_and_direct_occluders() {
        let params = SelectionParams::for_wavelength(0.05);
        let p_t = v(0.0, 0.0, 0.0);
        let p_r = v(4.0, 0.0, 0.0);
        let fps: Vec<Footprint> = [
            GaussianEllipsoid::isotropic(v(2.0, 0.0, 0.0), 0.2),
            GaussianEllipsoid::isotropic(v(4.0, 0.0, 0.0), 0.2),
            GaussianEllipsoid::isotropic(v(6.0, 0.0, 0.0), 0.2),
            GaussianEllipsoid::isotropic(v(-1.0, 0.0, 0.0), 0.2),
        ]
        .iter()
        .map(|e| Footprint::new(e, params.eps_sel))
        .collect();
        let (_, d_t, occ) = select_tx_occluders(&fps, &p_t, 2, params).unwrap();
        assert!((d_t - 6.0).abs() < 1e-12);
        let idx: Vec<usize> = occ.iter().map(|m| m.index).collect();
        assert_eq!(idx, vec![0, 1]);
        let direct = select_direct_occluders(&fps, &p_t, &p_r, params).unwrap();
        let idx: Vec<usize> = direct.iter().map(|m| m.index).collect();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn prefixes_exclude_self_and_ties() {
        let line = |depth: f64| LineDensity {
            depth,
            q: 0.0,
            density: 1.0,
            t_star: 0.0,
            offset: Vector3::zeros(),
        };
        let mut members: Vec<Member> = [1.0, 2.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| Member {
                index: i,
                line: line(d),
                prefix: 0,
            })
            .collect();
        assign_prefixes(&mut members, 1e-9);
        let p: Vec<usize> = members.iter().map(|m| m.prefix).collect();
        assert_eq!(p, vec![0, 1, 1, 3]);
    }

    /// Brute force over every cell and ellipsoid without the cone prefilter.
    fn brute_force_rays(
        scene: &Scene,
        pose: &Pose,
        rays: &RayGrid,
        params: SelectionParams,
    ) -> Vec<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for cell in 0..rays.grid.len() {
            let (t, p) = rays.grid.angles(cell);
            let plane = rx_plane(&pose.rx, t, p, &pose.rx_orientation).unwrap();
            let mut members: Vec<(usize, f64)> = scene
                .ellipsoids
                .iter()
                .enumerate()
                .filter_map(|(k, e)| {
                    let s = splat(e, &plane);
                    (s.depth > params.margin && s.density_at_origin() >= params.eps_sel)
                        .then_some((k, s.depth))
                })
                .collect();
            members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            out.push(members);
        }
        out
    }

    #[test]
    fn prefiltered_selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rays = RayGrid::new(AngleGrid::new(15, 15));
        let params = SelectionParams::for_wavelength(0.05);
        for _ in 0..10 {
            let ells: Vec<GaussianEllipsoid> = (0..20).map(|_| rand_ellipsoid(&mut rng)).collect();
            let scene = scene_of(ells);
            let mut pose = Pose::new(rand_v(&mut rng, 3.0), rand_v(&mut rng, 3.0));
            pose.rx_orientation = UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            );
            let sets = select_path_sets(&scene, &pose, &rays, params).unwrap();
            let brute = brute_force_rays(&scene, &pose, &rays, params);
            for (cell, want) in brute.iter().enumerate() {
                let got: Vec<usize> = sets.penetrated[cell].iter().map(|m| m.index).collect();
                let want: Vec<usize> = want.iter().map(|m| m.0).collect();
                assert_eq!(got, want, "cell {cell}");
            }
        }
    }
}
