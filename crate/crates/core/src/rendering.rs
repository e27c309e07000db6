//! Wireless rendering and the forward channel model.
//!
//! For every AOA grid ray and every ellipsoid `m` penetrated by it the model
//! adds
//!
//! ```text
//! b(ray) · [e^{-jκd_t} / (√(4π)·d_t)] · Θ_t · Z·V · [λ·e^{-jκd_r} / (4π·d_r)] · Θ_r
//! ```
//!
//! with `κ = 2π/λ`, plus the direct path `q_d · b(θ_L, φ_L) · λ·e^{-jκd_L}/(4π·d_L) · Θ_L`.
//! Every occluder on a path multiplies by `(1 - α·G)·e^{-jκ·γ·G}` where `G` is
//! its projected density on that path.
//!
//! [`trace`] records every intermediate the analytic backward pass needs, and
//! [`Trace::channel`] is the forward value.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use num_complex::Complex64;

use crate::error::{CkmError, Result};
use crate::harmonics::{
    angles_of, bound_magnitude, direction, sh_eval_dir, BshMatrix, ShDirEval, SH_COUNT,
};
use crate::scene::{AngleGrid, ArrayConfig, ChannelVector, Pose, Scene};
use crate::splatting::{
    select_direct_occluders, select_rays, select_tx_occluders, Footprint, Member, RayGrid,
    SelectionParams, DEFAULT_EPS_SEL, MARGIN_WAVELENGTHS,
};

/// Distances at or below this many wavelengths are treated as degenerate.
pub const DEPTH_FLOOR_WAVELENGTHS: f64 = 1e-3;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Complex amplitude and phase factor accumulated along a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexAttenuation {
    pub value: Complex64,
}

impl ComplexAttenuation {
    pub fn one() -> Self {
        Self { value: ONE }
    }
}

/// Activated values of one occluder on one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderSample {
    pub alpha_max: f64,
    pub gamma_max: f64,
    /// Projected density at the query point.
    pub density: f64,
}

impl OccluderSample {
    /// `(1 - α)·e^{-j2πγ/λ}` with `α = α^max·G`, `γ = γ^max·G`.
    pub fn factor(&self, wavelength: f64) -> Complex64 {
        occluder_factor(self.alpha_max, self.gamma_max, self.density, wavelength)
    }
}

pub fn occluder_factor(alpha_max: f64, gamma_max: f64, density: f64, wavelength: f64) -> Complex64 {
    let phase = -2.0 * PI * gamma_max * density / wavelength;
    Complex64::from_polar(1.0 - alpha_max * density, phase)
}

fn product(occluders: &[OccluderSample], wavelength: f64) -> Complex64 {
    occluders.iter().fold(ONE, |acc, o| acc * o.factor(wavelength))
}

/// Tx-side attenuation `Θ_t` of the path from the transmitter to an ellipsoid.
pub fn render_tx(occluders: &[OccluderSample], wavelength: f64) -> ComplexAttenuation {
    ComplexAttenuation {
        value: product(occluders, wavelength),
    }
}

/// Rx-side attenuation `Θ_r`: the ellipsoid's own opacity on the ray times the
/// occluders in front of it.
pub fn render_rx(
    own: &OccluderSample,
    occluders: &[OccluderSample],
    wavelength: f64,
) -> ComplexAttenuation {
    ComplexAttenuation {
        value: product(occluders, wavelength) * (own.alpha_max * own.density),
    }
}

/// Direct-path attenuation `Θ_L`.
pub fn render_direct(occluders: &[OccluderSample], wavelength: f64) -> ComplexAttenuation {
    ComplexAttenuation {
        value: product(occluders, wavelength),
    }
}

/// True when the transmitter lies in the receiver's closed reception
/// hemisphere (local `x >= 0`).
pub fn direct_indicator(
    p_t: &Vector3<f64>,
    p_r: &Vector3<f64>,
    rx_orientation: &UnitQuaternion<f64>,
) -> Result<bool> {
    let d = p_t - p_r;
    if !(d.norm() > 0.0) {
        return Err(CkmError::DegenerateGeometry("Tx and Rx coincide".into()));
    }
    Ok((rx_orientation.inverse() * d).x >= 0.0)
}

/// UPA response `b_v ⊗ b_h` with entries of magnitude `1/N`, vertical index major.
pub fn steering_vector(theta: f64, phi: f64, cfg: &ArrayConfig) -> ChannelVector {
    let mut entries = Vec::with_capacity(cfg.n());
    steering_into(theta, phi, cfg, &mut entries);
    ChannelVector { entries }
}

fn steering_into(theta: f64, phi: f64, cfg: &ArrayConfig, out: &mut Vec<Complex64>) {
    let (st, ct) = theta.sin_cos();
    let step_v = 2.0 * PI * cfg.d_v * ct;
    let step_h = 2.0 * PI * cfg.d_h * st * phi.sin();
    let inv_n = 1.0 / (cfg.n_v * cfg.n_h) as f64;
    for kv in 0..cfg.n_v {
        for kh in 0..cfg.n_h {
            let phase = step_v * kv as f64 + step_h * kh as f64;
            out.push(Complex64::from_polar(inv_n, phase));
        }
    }
}

/// Steering vectors of every cell of a grid, row-major `cell * N + antenna`.
#[derive(Debug, Clone)]
pub struct SteeringTable {
    pub grid: AngleGrid,
    pub n: usize,
    pub data: Vec<Complex64>,
}

impl SteeringTable {
    pub fn new(cfg: &ArrayConfig, grid: AngleGrid) -> Self {
        let mut data = Vec::with_capacity(grid.len() * cfg.n());
        for cell in 0..grid.len() {
            let (t, p) = grid.angles(cell);
            steering_into(t, p, cfg, &mut data);
        }
        Self {
            grid,
            n: cfg.n(),
            data,
        }
    }

    pub fn row(&self, cell: usize) -> &[Complex64] {
        &self.data[cell * self.n..(cell + 1) * self.n]
    }

    /// `bᴴ(cell)·h`.
    pub fn project(&self, cell: usize, h: &[Complex64]) -> Complex64 {
        self.row(cell)
            .iter()
            .zip(h)
            .fold(ZERO, |acc, (b, x)| acc + b.conj() * x)
    }
}

/// Angles and distances of a single-bounce path through an ellipsoid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGeometry {
    /// Scattering direction (ellipsoid to Rx), world frame.
    pub theta_m: f64,
    pub phi_m: f64,
    /// Incident direction (Tx to ellipsoid), world frame.
    pub theta_in: f64,
    pub phi_in: f64,
    pub d_t: f64,
    pub d_r: f64,
}

pub fn path_geometry(
    p_t: &Vector3<f64>,
    p_r: &Vector3<f64>,
    p_m: &Vector3<f64>,
) -> Result<PathGeometry> {
    let incident = p_m - p_t;
    let scattered = p_r - p_m;
    let (d_t, d_r) = (incident.norm(), scattered.norm());
    if !(d_t > 0.0 && d_r > 0.0) {
        return Err(CkmError::DegenerateGeometry(
            "ellipsoid coincides with Tx or Rx".into(),
        ));
    }
    let (theta_m, phi_m) = angles_of(&scattered);
    let (theta_in, phi_in) = angles_of(&incident);
    Ok(PathGeometry {
        theta_m,
        phi_m,
        theta_in,
        phi_in,
        d_t,
        d_r,
    })
}

/// Rendering discretization, independent from the spectrum grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub grid: AngleGrid,
    pub eps_sel: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            grid: AngleGrid::new(45, 45),
            eps_sel: DEFAULT_EPS_SEL,
        }
    }
}

/// Per-ellipsoid values the renderer reads, computed once per parameter state.
#[derive(Debug, Clone)]
pub struct ScatterKernel {
    pub footprint: Footprint,
    pub alpha_max: f64,
    pub gamma_max: f64,
    pub z: f64,
    pub a_re: BshMatrix,
    pub a_im: BshMatrix,
}

#[derive(Debug, Clone)]
pub struct SceneKernels {
    pub wavelength: f64,
    pub eps_sel: f64,
    pub kernels: Vec<ScatterKernel>,
    pub footprints: Vec<Footprint>,
}

impl SceneKernels {
    pub fn new(scene: &Scene, eps_sel: f64) -> Self {
        let kernels: Vec<ScatterKernel> = scene
            .ellipsoids
            .iter()
            .map(|e| {
                let act = e.activate(scene.wavelength);
                ScatterKernel {
                    footprint: Footprint::new(e, eps_sel),
                    alpha_max: act.alpha_max,
                    gamma_max: act.gamma_max,
                    z: e.z_coeff,
                    a_re: e.bsh_re.materialize(),
                    a_im: e.bsh_im.materialize(),
                }
            })
            .collect();
        let footprints = kernels.iter().map(|k| k.footprint).collect();
        Self {
            wavelength: scene.wavelength,
            eps_sel,
            kernels,
            footprints,
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Reusable geometry for one array and rendering grid.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub array: ArrayConfig,
    pub render: RenderConfig,
    pub rays: RayGrid,
    pub steering: SteeringTable,
}

impl Renderer {
    pub fn new(array: ArrayConfig, render: RenderConfig) -> Self {
        Self {
            array,
            render,
            rays: RayGrid::new(render.grid),
            steering: SteeringTable::new(&array, render.grid),
        }
    }

    pub fn selection(&self, wavelength: f64) -> SelectionParams {
        SelectionParams {
            eps_sel: self.render.eps_sel,
            margin: MARGIN_WAVELENGTHS * wavelength,
        }
    }
}

/// Occluders of one path with their complex factors and prefix products
/// (`prefix[i]` is the product of the first `i` factors).
#[derive(Debug, Clone, Default)]
pub struct OccluderChain {
    pub members: Vec<Member>,
    pub factors: Vec<Complex64>,
    pub prefix: Vec<Complex64>,
}

impl OccluderChain {
    fn new(members: Vec<Member>, kernels: &[ScatterKernel], wavelength: f64) -> Self {
        let factors: Vec<Complex64> = members
            .iter()
            .map(|m| {
                let k = &kernels[m.index];
                occluder_factor(k.alpha_max, k.gamma_max, m.line.density, wavelength)
            })
            .collect();
        let mut prefix = Vec::with_capacity(factors.len() + 1);
        prefix.push(ONE);
        for f in &factors {
            let last = *prefix.last().unwrap();
            prefix.push(last * f);
        }
        Self {
            members,
            factors,
            prefix,
        }
    }

    pub fn total(&self) -> Complex64 {
        *self.prefix.last().unwrap()
    }
}

/// Transmitter-side part `A_m = K_t(d_t)·Θ_t·Z·V` of one ellipsoid.
#[derive(Debug, Clone)]
pub struct TxPath {
    pub index: usize,
    /// Unit direction Tx to ellipsoid; also the incident direction.
    pub normal: Vector3<f64>,
    pub d_t: f64,
    pub chain: OccluderChain,
    pub k_t: Complex64,
    /// Unit direction ellipsoid to Rx and its length.
    pub s_out: Vector3<f64>,
    pub d_out: f64,
    pub y_out: ShDirEval,
    pub y_in: ShDirEval,
    pub v_raw: Complex64,
    pub v: Complex64,
    pub value: Complex64,
}

/// One ray of the rendering grid with the ellipsoids it penetrates.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub cell: usize,
    pub normal: Vector3<f64>,
    pub chain: OccluderChain,
    /// `λ·e^{-jκd_r}/(4π·d_r)` per member; zero below the depth floor.
    pub k_r: Vec<Complex64>,
    /// Index into [`Trace::tx_paths`] per member.
    pub tx_slot: Vec<Option<usize>>,
    pub sum: Complex64,
}

#[derive(Debug, Clone)]
pub struct DirectTrace {
    pub visible: bool,
    pub normal: Vector3<f64>,
    pub d_l: f64,
    pub steering: Vec<Complex64>,
    pub k_l: Complex64,
    pub chain: OccluderChain,
}

/// Everything computed for one pose.
#[derive(Debug, Clone)]
pub struct Trace {
    pub pose: Pose,
    pub rays: Vec<RayTrace>,
    pub tx_paths: Vec<TxPath>,
    pub direct: DirectTrace,
    pub channel: ChannelVector,
}

impl Trace {
    pub fn channel(&self) -> &ChannelVector {
        &self.channel
    }

    /// Flat encoding of every path set and of the dropped contributions;
    /// equal signatures mean equal membership.
    pub fn membership(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for r in &self.rays {
            sig.push(r.cell);
            sig.push(r.chain.members.len());
            for (j, m) in r.chain.members.iter().enumerate() {
                sig.extend([m.index, m.prefix, r.tx_slot[j].map_or(usize::MAX, |s| s)]);
                sig.push(usize::from(r.k_r[j] == Complex64::new(0.0, 0.0)));
            }
        }
        for t in &self.tx_paths {
            sig.extend([usize::MAX - 1, t.index, t.chain.members.len()]);
            sig.extend(t.chain.members.iter().map(|m| m.index));
        }
        sig.extend([usize::MAX - 2, usize::from(self.direct.visible)]);
        sig.extend(self.direct.chain.members.iter().map(|m| m.index));
        sig
    }
}

/// `e^{-jκd}/d` scaled by `scale`.
fn spherical(scale: f64, d: f64, wavelength: f64) -> Complex64 {
    Complex64::from_polar(scale / d, -2.0 * PI * d / wavelength)
}

pub fn tx_amplitude(d: f64, wavelength: f64) -> Complex64 {
    spherical(1.0 / (4.0 * PI).sqrt(), d, wavelength)
}

pub fn rx_amplitude(d: f64, wavelength: f64) -> Complex64 {
    spherical(wavelength / (4.0 * PI), d, wavelength)
}

/// Raw BSH value plus `A·y_in` rows, for reuse in the backward pass.
pub fn bsh_raw(a_re: &BshMatrix, a_im: &BshMatrix, y_out: &[f64; SH_COUNT], y_in: &[f64; SH_COUNT]) -> Complex64 {
    crate::harmonics::bsh_eval_raw_dirs(a_re, a_im, y_out, y_in)
}

/// Runs the forward model for one pose and records the intermediates.
pub fn trace(kernels: &SceneKernels, renderer: &Renderer, pose: &Pose) -> Result<Trace> {
    let wavelength = kernels.wavelength;
    let floor = DEPTH_FLOOR_WAVELENGTHS * wavelength;
    let params = renderer.selection(wavelength);
    let n = renderer.array.n();

    let to_tx = pose.tx - pose.rx;
    let d_l = to_tx.norm();
    if !(d_l > floor) {
        return Err(CkmError::DegenerateGeometry(format!(
            "Tx-Rx distance {d_l:e} m is below the depth floor"
        )));
    }

    let per_cell = select_rays(&kernels.footprints, pose, &renderer.rays, params);

    // Tx-side paths for every ellipsoid that some ray sees.
    let mut slot_of = vec![None; kernels.len()];
    let mut tx_paths = Vec::new();
    for ray in &per_cell {
        for m in ray {
            if slot_of[m.index].is_some() {
                continue;
            }
            slot_of[m.index] = Some(usize::MAX);
        }
    }
    for (idx, slot) in slot_of.iter_mut().enumerate() {
        if slot.is_none() {
            continue;
        }
        *slot = None;
        let Some((normal, d_t, occ)) =
            select_tx_occluders(&kernels.footprints, &pose.tx, idx, params)
        else {
            continue;
        };
        let k = &kernels.kernels[idx];
        let out = pose.rx - k.footprint.mean;
        let d_out = out.norm();
        if d_t <= floor || d_out <= floor {
            continue;
        }
        let s_out = out / d_out;
        let chain = OccluderChain::new(occ, &kernels.kernels, wavelength);
        let y_out = sh_eval_dir(&s_out);
        let y_in = sh_eval_dir(&normal);
        let v_raw = bsh_raw(&k.a_re, &k.a_im, &y_out.values, &y_in.values);
        let v = bound_magnitude(v_raw);
        let k_t = tx_amplitude(d_t, wavelength);
        let value = k_t * chain.total() * v * k.z;
        *slot = Some(tx_paths.len());
        tx_paths.push(TxPath {
            index: idx,
            normal,
            d_t,
            chain,
            k_t,
            s_out,
            d_out,
            y_out,
            y_in,
            v_raw,
            v,
            value,
        });
    }

    let rot: Rotation3<f64> = pose.rx_orientation.to_rotation_matrix();
    let mut h = vec![ZERO; n];
    let mut rays = Vec::new();
    for (cell, members) in per_cell.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let chain = OccluderChain::new(members, &kernels.kernels, wavelength);
        let mut k_r = Vec::with_capacity(chain.members.len());
        let mut tx_slot = Vec::with_capacity(chain.members.len());
        let mut sum = ZERO;
        for m in &chain.members {
            let slot = slot_of[m.index];
            let kr = if m.line.depth > floor && slot.is_some() {
                rx_amplitude(m.line.depth, wavelength)
            } else {
                ZERO
            };
            if let Some(s) = slot {
                let kern = &kernels.kernels[m.index];
                sum += tx_paths[s].value * kr * (kern.alpha_max * m.line.density) * chain.prefix[m.prefix];
            }
            k_r.push(kr);
            tx_slot.push(slot);
        }
        let b = renderer.steering.row(cell);
        for (hi, bi) in h.iter_mut().zip(b) {
            *hi += bi * sum;
        }
        rays.push(RayTrace {
            cell,
            normal: rot * renderer.rays.local[cell],
            chain,
            k_r,
            tx_slot,
            sum,
        });
    }

    let visible = direct_indicator(&pose.tx, &pose.rx, &pose.rx_orientation)?;
    let normal = -to_tx / d_l;
    let (direct_chain, steering, k_l) = if visible {
        let occ = select_direct_occluders(&kernels.footprints, &pose.tx, &pose.rx, params)?;
        let chain = OccluderChain::new(occ, &kernels.kernels, wavelength);
        let local = pose.rx_orientation.inverse() * to_tx;
        let (t, p) = angles_of(&local);
        let steering = steering_vector(t, p, &renderer.array).entries;
        let k_l = rx_amplitude(d_l, wavelength);
        let scale = k_l * chain.total();
        for (hi, bi) in h.iter_mut().zip(&steering) {
            *hi += bi * scale;
        }
        (chain, steering, k_l)
    } else {
        (OccluderChain::new(Vec::new(), &kernels.kernels, wavelength), Vec::new(), ZERO)
    };

    Ok(Trace {
        pose: *pose,
        rays,
        tx_paths,
        direct: DirectTrace {
            visible,
            normal,
            d_l,
            steering,
            k_l,
            chain: direct_chain,
        },
        channel: ChannelVector { entries: h },
    })
}

/// Predicted channel vector for a pose.
pub fn forward_channel(
    scene: &Scene,
    pose: &Pose,
    array: &ArrayConfig,
    render: &RenderConfig,
) -> Result<ChannelVector> {
    let kernels = SceneKernels::new(scene, render.eps_sel);
    let renderer = Renderer::new(*array, *render);
    Ok(trace(&kernels, &renderer, pose)?.channel)
}

/// World-frame scattering coefficient `Z·V` for an ellipsoid and explicit
/// incident/scattering directions.
pub fn scattering_coefficient(
    kernel: &ScatterKernel,
    s_out: &Vector3<f64>,
    s_in: &Vector3<f64>,
) -> Complex64 {
    let v = bsh_raw(
        &kernel.a_re,
        &kernel.a_im,
        &sh_eval_dir(s_out).values,
        &sh_eval_dir(s_in).values,
    );
    bound_magnitude(v) * kernel.z
}

/// Rotation of the receiver frame as a matrix.
pub fn rx_rotation(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

/// World direction of grid cell `(theta, phi)` for a receiver orientation.
pub fn ray_direction(theta: f64, phi: f64, q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q * direction(theta, phi)
}
