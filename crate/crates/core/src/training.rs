//! Analytic gradients, Adam, adaptive density control and the training loop.
//!
//! Complex adjoints use the `∂L/∂Re + j·∂L/∂Im` convention: for `w = a·z` the
//! adjoint of `z` receives `conj(a)·ḡ_w`, and a real input `x` of a complex
//! function `f` receives `Re(conj(∂f/∂x)·ḡ_f)`. Path-set membership is held
//! fixed during a step; gradients flow through the projected densities only.
//!
//! Per-sample gradients are gathered sparsely and reduced in sample order, so
//! results do not depend on the worker count.

use std::f64::consts::{LN_10, PI};
use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{CkmError, Result};
use crate::harmonics::{bound_magnitude_adjoint, free_index, mirror_sign, BSH_FREE_COUNT, SH_COUNT};
use crate::rendering::{trace, OccluderChain, RenderConfig, Renderer, SceneKernels, SteeringTable, Trace};
use crate::scene::{layout, logit, quat_matrix_adjoint, sigmoid, Aabb, AngleGrid, GaussianEllipsoid, Pose, Scene, PARAMS_PER_ELLIPSOID};
use crate::spectrum::{
    cbf_with_table, gain_db, mae, nmae, power_to_db, spectrum_loss_grad, ssim_normalized, normalize_db,
    LossWeights, POWER_FLOOR,
};
use crate::splatting::{LineDensity, Member};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Per-group learning rates. `mean` is multiplied by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mean: f64,
    pub rotation: f64,
    pub log_scales: f64,
    pub opacity: f64,
    pub gamma: f64,
    pub z: f64,
    pub bsh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            rotation: 1e-3,
            log_scales: 5e-3,
            opacity: 5e-2,
            gamma: 1e-2,
            z: 1e-2,
            bsh: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Learning rate of every slot of a parameter block.
    pub fn per_slot(&self, extent: f64) -> Vec<f64> {
        let mut out = vec![0.0; PARAMS_PER_ELLIPSOID];
        out[layout::MEAN..layout::ROTATION].fill(self.mean * extent);
        out[layout::ROTATION..layout::LOG_SCALES].fill(self.rotation);
        out[layout::LOG_SCALES..layout::RAW_OPACITY].fill(self.log_scales);
        out[layout::RAW_OPACITY] = self.opacity;
        out[layout::RAW_GAMMA] = self.gamma;
        out[layout::Z_COEFF] = self.z;
        out[layout::BSH_RE..].fill(self.bsh);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityControlConfig {
    pub enabled: bool,
    pub interval_steps: usize,
    pub start_step: usize,
    pub stop_step: usize,
    /// Mean positional-gradient norm above which an ellipsoid is densified.
    pub grad_threshold: f64,
    /// Split instead of clone when the largest scale reaches this fraction of
    /// the scene extent.
    pub scale_split_fraction: f64,
    pub prune_opacity: f64,
    pub max_ellipsoids: usize,
}

impl Default for DensityControlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval_steps: 100,
            start_step: 500,
            stop_step: 15_000,
            grad_threshold: 2e-4,
            scale_split_fraction: 0.05,
            prune_opacity: 0.005,
            max_ellipsoids: 50_000,
        }
    }
}

impl DensityControlConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.interval_steps > 0
            && self.start_step < self.stop_step
            && self.grad_threshold > 0.0
            && self.scale_split_fraction > 0.0
            && self.prune_opacity > 0.0
            && self.max_ellipsoids > 0;
        if ok {
            Ok(())
        } else {
            Err(CkmError::InvalidConfig("density control settings out of range".into()))
        }
    }

    fn due(&self, step: usize) -> bool {
        self.enabled
            && step >= self.start_step
            && step <= self.stop_step
            && step % self.interval_steps == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub count: usize,
    pub opacity: f64,
    /// Initial `γ^max / λ`.
    pub gamma_fraction: f64,
    /// `Z` is drawn from `U(0, z_max)`.
    pub z_max: f64,
    /// Initial `A_re[0,0]`; `2π` makes the initial pattern `V = 0.5` everywhere.
    pub bsh_dc: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            opacity: 0.1,
            gamma_fraction: 0.5,
            z_max: 0.01,
            bsh_dc: 2.0 * PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub loss: LossWeights,
    /// Rendering grid `[n_theta, n_phi]`.
    pub render_grid: [usize; 2],
    pub eps_sel: f64,
    /// Spectrum grid for the loss; the dataset's grid when absent.
    pub spectrum_grid: Option<[usize; 2]>,
    pub lr: LearningRates,
    /// Every learning rate decays exponentially to this fraction of its
    /// initial value at the last step.
    pub lr_final_fraction: f64,
    pub adam: AdamConfig,
    pub density: DensityControlConfig,
    pub init: InitConfig,
    /// Scene bounds; the dataset header's bounds when absent.
    pub bbox: Option<Aabb>,
    pub bbox_inflation: f64,
    pub log_every: usize,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 4,
            threads: 0,
            loss: LossWeights::default(),
            render_grid: [45, 45],
            eps_sel: crate::splatting::DEFAULT_EPS_SEL,
            spectrum_grid: None,
            lr: LearningRates::default(),
            lr_final_fraction: 1.0,
            adam: AdamConfig::default(),
            density: DensityControlConfig::default(),
            init: InitConfig::default(),
            bbox: None,
            bbox_inflation: 1.5,
            log_every: 10,
            eval_every: 0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.render_grid.contains(&0) {
            return Err(CkmError::InvalidConfig("batch size and render grid must be positive".into()));
        }
        if !(self.eps_sel > 0.0 && self.eps_sel < 1.0) {
            return Err(CkmError::InvalidConfig("eps_sel must be in (0, 1)".into()));
        }
        if let Some(g) = self.spectrum_grid {
            if g.contains(&0) {
                return Err(CkmError::InvalidConfig("empty spectrum grid".into()));
            }
        }
        if !(self.lr_final_fraction > 0.0) || !(self.bbox_inflation >= 1.0) {
            return Err(CkmError::InvalidConfig("bad learning-rate decay or bbox inflation".into()));
        }
        self.density.validate()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            grid: AngleGrid::new(self.render_grid[0], self.render_grid[1]),
            eps_sel: self.eps_sel,
        }
    }
}

/// A measurement with its loss targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub pose: Pose,
    pub gt_spectrum_db: Vec<f64>,
    pub gt_gain_db: f64,
}

/// Shared state for loss evaluation.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub renderer: Renderer,
    pub spectrum: SteeringTable,
    pub weights: LossWeights,
}

impl LossContext {
    pub fn new(renderer: Renderer, spectrum_grid: AngleGrid, weights: LossWeights) -> Self {
        let spectrum = SteeringTable::new(&renderer.array, spectrum_grid);
        Self {
            renderer,
            spectrum,
            weights,
        }
    }

    pub fn prepare(&self, dataset: &Dataset) -> Vec<PreparedSample> {
        dataset
            .records
            .iter()
            .map(|m| PreparedSample {
                id: m.id.clone(),
                pose: Pose::of(m),
                gt_spectrum_db: cbf_with_table(&m.channel, &self.spectrum)
                    .values
                    .iter()
                    .map(|p| power_to_db(*p))
                    .collect(),
                gt_gain_db: gain_db(&m.channel),
            })
            .collect()
    }
}

/// Loss parts of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub spectrum: f64,
    pub gain: f64,
    pub total: f64,
}

/// Loss value and `∂L/∂h` for a predicted channel.
pub fn sample_loss(
    h: &[Complex64],
    sample: &PreparedSample,
    ctx: &LossContext,
    want_grad: bool,
) -> (LossParts, Vec<Complex64>) {
    let cells = ctx.spectrum.grid.len();
    let proj: Vec<Complex64> = (0..cells).map(|c| ctx.spectrum.project(c, h)).collect();
    let power: Vec<f64> = proj.iter().map(|p| p.norm_sqr()).collect();
    let ls = power
        .iter()
        .zip(&sample.gt_spectrum_db)
        .map(|(p, g)| (power_to_db(*p) - g).powi(2))
        .sum::<f64>()
        / cells as f64;
    let norm2: f64 = h.iter().map(|x| x.norm_sqr()).sum();
    let gain = power_to_db(norm2);
    let lg = (gain - sample.gt_gain_db).abs();
    let w = ctx.weights;
    let parts = LossParts {
        spectrum: ls,
        gain: lg,
        total: w.spectrum * ls + w.gain * lg,
    };
    let mut grad = Vec::new();
    if want_grad {
        grad = vec![ZERO; h.len()];
        if w.spectrum != 0.0 {
            let dp = spectrum_loss_grad(&power, &sample.gt_spectrum_db);
            for (c, (d, pr)) in dp.iter().zip(&proj).enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let s = *pr * (2.0 * d * w.spectrum);
                for (g, b) in grad.iter_mut().zip(ctx.spectrum.row(c)) {
                    *g += b * s;
                }
            }
        }
        if w.gain != 0.0 && norm2 > POWER_FLOOR {
            let diff = gain - sample.gt_gain_db;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let s = w.gain * sign * 10.0 / (LN_10 * norm2) * 2.0;
            for (g, x) in grad.iter_mut().zip(h) {
                *g += x * s;
            }
        }
    }
    (parts, grad)
}

/// Gradients of one ellipsoid with respect to its activated quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivatedGrad {
    pub mean: Vector3<f64>,
    pub precision: Matrix3<f64>,
    pub alpha_max: f64,
    pub gamma_max: f64,
    pub z: f64,
}

impl Default for ActivatedGrad {
    fn default() -> Self {
        Self {
            mean: Vector3::zeros(),
            precision: Matrix3::zeros(),
            alpha_max: 0.0,
            gamma_max: 0.0,
            z: 0.0,
        }
    }
}

impl ActivatedGrad {
    fn add(&mut self, o: &ActivatedGrad) {
        self.mean += o.mean;
        self.precision += o.precision;
        self.alpha_max += o.alpha_max;
        self.gamma_max += o.gamma_max;
        self.z += o.z;
    }
}

/// BSH gradient contribution `Re/Im(ḡV_raw) · y_out y_inᵀ`.
#[derive(Debug, Clone)]
pub struct BshGrad {
    pub index: usize,
    pub grad: Complex64,
    pub y_out: [f64; SH_COUNT],
    pub y_in: [f64; SH_COUNT],
}

/// Sparse gradient of one sample.
#[derive(Debug, Clone, Default)]
pub struct SampleGrad {
    pub activated: Vec<(usize, ActivatedGrad)>,
    pub bsh: Vec<BshGrad>,
}

struct Scratch {
    grads: Vec<ActivatedGrad>,
    touched: Vec<bool>,
    order: Vec<usize>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            grads: vec![ActivatedGrad::default(); n],
            touched: vec![false; n],
            order: Vec::new(),
        }
    }

    fn at(&mut self, i: usize) -> &mut ActivatedGrad {
        if !self.touched[i] {
            self.touched[i] = true;
            self.order.push(i);
        }
        &mut self.grads[i]
    }

    fn finish(mut self) -> Vec<(usize, ActivatedGrad)> {
        self.order.sort_unstable();
        self.order.iter().map(|&i| (i, self.grads[i])).collect()
    }
}

fn re_dot(d: Complex64, g: Complex64) -> f64 {
    (d.conj() * g).re
}

/// Sends `ḡG` of a member density into its ellipsoid and returns `∂L/∂n`.
fn density_backward(
    scratch: &mut Scratch,
    kernels: &SceneKernels,
    m: &Member,
    grad_density: f64,
) -> Vector3<f64> {
    if grad_density == 0.0 {
        return Vector3::zeros();
    }
    let line: &LineDensity = &m.line;
    let gq = -0.5 * line.density * grad_density;
    let p = &kernels.kernels[m.index].footprint.precision;
    let g = scratch.at(m.index);
    g.mean += gq * line.dq_dmean(p);
    g.precision += gq * line.dq_dprecision();
    gq * line.dq_dnormal(p)
}

/// Backpropagates `ḡQ_i` (adjoints of the prefix products) through an
/// occluder chain; returns the accumulated `∂L/∂n` of the chain's plane.
fn chain_backward(
    scratch: &mut Scratch,
    kernels: &SceneKernels,
    chain: &OccluderChain,
    grad_prefix: &[Complex64],
) -> Vector3<f64> {
    let wavenumber = 2.0 * PI / kernels.wavelength;
    let mut dn = Vector3::zeros();
    let mut carry = ZERO;
    for i in (0..chain.factors.len()).rev() {
        let total = grad_prefix[i + 1] + carry;
        let gf = chain.prefix[i].conj() * total;
        carry = chain.factors[i].conj() * total;
        if gf == ZERO {
            continue;
        }
        let m = &chain.members[i];
        let k = &kernels.kernels[m.index];
        let f = chain.factors[i];
        let gdens = m.line.density;
        let e = Complex64::from_polar(1.0, -wavenumber * k.gamma_max * gdens);
        let minus_jk = Complex64::new(0.0, -wavenumber);
        let d_alpha = -e * gdens;
        let d_gamma = f * minus_jk * gdens;
        let d_dens = -e * k.alpha_max + f * minus_jk * k.gamma_max;
        {
            let g = scratch.at(m.index);
            g.alpha_max += re_dot(d_alpha, gf);
            g.gamma_max += re_dot(d_gamma, gf);
        }
        dn += density_backward(scratch, kernels, m, re_dot(d_dens, gf));
    }
    dn
}

fn tangent_project(u: &Vector3<f64>, g: &Vector3<f64>, len: f64) -> Vector3<f64> {
    (g - u * u.dot(g)) / len
}

/// Reverse pass of one traced sample given `∂L/∂h`.
pub fn backward_sample(
    kernels: &SceneKernels,
    renderer: &Renderer,
    tr: &Trace,
    grad_h: &[Complex64],
) -> SampleGrad {
    let wavelength = kernels.wavelength;
    let wavenumber = 2.0 * PI / wavelength;
    let mut scratch = Scratch::new(kernels.len());
    let mut grad_a = vec![ZERO; tr.tx_paths.len()];

    for ray in &tr.rays {
        let r = renderer.steering.project(ray.cell, grad_h);
        if r == ZERO {
            continue;
        }
        let chain = &ray.chain;
        let mut gq = vec![ZERO; chain.factors.len() + 1];
        for (j, m) in chain.members.iter().enumerate() {
            let (Some(slot), kr) = (ray.tx_slot[j], ray.k_r[j]) else {
                continue;
            };
            if kr == ZERO {
                continue;
            }
            let k = &kernels.kernels[m.index];
            let a_val = tr.tx_paths[slot].value;
            let dens = m.line.density;
            let own = k.alpha_max * dens;
            let q = chain.prefix[m.prefix];
            let d = m.line.depth;
            grad_a[slot] += (kr * own * q).conj() * r;
            let dkr = kr * Complex64::new(-1.0 / d, -wavenumber);
            let gd = re_dot(a_val * own * q * dkr, r);
            let ga = re_dot(a_val * kr * q, r);
            gq[m.prefix] += (a_val * kr * own).conj() * r;
            {
                let g = scratch.at(m.index);
                g.mean += gd * ray.normal;
                g.alpha_max += ga * dens;
            }
            density_backward(&mut scratch, kernels, m, ga * k.alpha_max);
        }
        chain_backward(&mut scratch, kernels, chain, &gq);
    }

    let mut bsh = Vec::new();
    for (slot, tp) in tr.tx_paths.iter().enumerate() {
        let g = grad_a[slot];
        if g == ZERO {
            continue;
        }
        let k = &kernels.kernels[tp.index];
        let theta = tp.chain.total();
        let dkt = tp.k_t * Complex64::new(-1.0 / tp.d_t, -wavenumber);
        let gd_t = re_dot(dkt * theta * tp.v * k.z, g);
        let gz = re_dot(tp.k_t * theta * tp.v, g);
        let gv = (tp.k_t * theta * k.z).conj() * g;
        let gv_raw = bound_magnitude_adjoint(tp.v_raw, gv);
        // Directional derivatives of V_raw.
        let mut row_in = [ZERO; SH_COUNT];
        let mut row_out = [ZERO; SH_COUNT];
        for i in 0..SH_COUNT {
            for kk in 0..SH_COUNT {
                let a = Complex64::new(k.a_re[(i, kk)], k.a_im[(i, kk)]);
                row_in[i] += a * tp.y_in.values[kk];
                row_out[kk] += a * tp.y_out.values[i];
            }
        }
        let mut g_out = Vector3::zeros();
        let mut g_in = Vector3::zeros();
        for c in 0..3 {
            let mut dv_out = ZERO;
            let mut dv_in = ZERO;
            for i in 0..SH_COUNT {
                dv_out += row_in[i] * tp.y_out.grads[i][c];
                dv_in += row_out[i] * tp.y_in.grads[i][c];
            }
            g_out[c] = re_dot(dv_out, gv_raw);
            g_in[c] = re_dot(dv_in, gv_raw);
        }
        let mut gq = vec![ZERO; tp.chain.factors.len() + 1];
        *gq.last_mut().unwrap() = (tp.k_t * k.z * tp.v).conj() * g;
        let dn = chain_backward(&mut scratch, kernels, &tp.chain, &gq);
        let gm = scratch.at(tp.index);
        gm.mean += gd_t * tp.normal;
        gm.mean -= tangent_project(&tp.s_out, &g_out, tp.d_out);
        gm.mean += tangent_project(&tp.normal, &(g_in + dn), tp.d_t);
        gm.z += gz;
        bsh.push(BshGrad {
            index: tp.index,
            grad: gv_raw,
            y_out: tp.y_out.values,
            y_in: tp.y_in.values,
        });
    }

    let direct = &tr.direct;
    if direct.visible && !direct.chain.factors.is_empty() {
        let proj = direct
            .steering
            .iter()
            .zip(grad_h)
            .fold(ZERO, |acc, (b, g)| acc + b.conj() * g);
        let mut gq = vec![ZERO; direct.chain.factors.len() + 1];
        *gq.last_mut().unwrap() = direct.k_l.conj() * proj;
        chain_backward(&mut scratch, kernels, &direct.chain, &gq);
    }

    SampleGrad {
        activated: scratch.finish(),
        bsh,
    }
}

/// Dense per-ellipsoid accumulator for a batch.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub activated: Vec<ActivatedGrad>,
    pub bsh_re: Vec<f64>,
    pub bsh_im: Vec<f64>,
    pub touched: Vec<bool>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            activated: vec![ActivatedGrad::default(); n],
            bsh_re: vec![0.0; n * BSH_FREE_COUNT],
            bsh_im: vec![0.0; n * BSH_FREE_COUNT],
            touched: vec![false; n],
        }
    }

    pub fn add(&mut self, g: &SampleGrad) {
        for (i, a) in &g.activated {
            self.activated[*i].add(a);
            self.touched[*i] = true;
        }
        for b in &g.bsh {
            let base = b.index * BSH_FREE_COUNT;
            let (re, im) = (b.grad.re, b.grad.im);
            for i in 0..SH_COUNT {
                for k in i..SH_COUNT {
                    let w = if i == k {
                        b.y_out[i] * b.y_in[i]
                    } else {
                        b.y_out[i] * b.y_in[k] + mirror_sign(i, k) * b.y_out[k] * b.y_in[i]
                    };
                    let idx = base + free_index(i, k);
                    self.bsh_re[idx] += re * w;
                    self.bsh_im[idx] += im * w;
                }
            }
        }
    }

    /// Gradient with respect to the raw parameters, scaled by `scale`.
    pub fn raw_gradient(&self, scene: &Scene, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; scene.len() * PARAMS_PER_ELLIPSOID];
        for (i, e) in scene.ellipsoids.iter().enumerate() {
            let block = &mut out[i * PARAMS_PER_ELLIPSOID..(i + 1) * PARAMS_PER_ELLIPSOID];
            raw_from_activated(e, scene.wavelength, &self.activated[i], block);
            block[layout::BSH_RE..layout::BSH_IM]
                .copy_from_slice(&self.bsh_re[i * BSH_FREE_COUNT..(i + 1) * BSH_FREE_COUNT]);
            block[layout::BSH_IM..]
                .copy_from_slice(&self.bsh_im[i * BSH_FREE_COUNT..(i + 1) * BSH_FREE_COUNT]);
            for v in block.iter_mut() {
                *v *= scale;
            }
        }
        out
    }
}

/// Chains activated-quantity gradients to the raw parameter block.
pub fn raw_from_activated(e: &GaussianEllipsoid, wavelength: f64, g: &ActivatedGrad, out: &mut [f64]) {
    out[layout::MEAN..layout::MEAN + 3].copy_from_slice(g.mean.as_slice());
    // P = R D Rᵀ with D = diag(exp(-2 s)).
    let r = e.rotation_matrix();
    let dvals = e.log_scales.map(|l| (-2.0 * l).exp());
    let d = Matrix3::from_diagonal(&dvals);
    let gp = g.precision;
    let gr = (gp + gp.transpose()) * r * d;
    let inner = r.transpose() * gp * r;
    let gq = quat_matrix_adjoint(&e.rotation, &gr);
    out[layout::ROTATION..layout::ROTATION + 4].copy_from_slice(&gq);
    for i in 0..3 {
        out[layout::LOG_SCALES + i] = -2.0 * dvals[i] * inner[(i, i)];
    }
    let so = sigmoid(e.raw_opacity);
    out[layout::RAW_OPACITY] = g.alpha_max * so * (1.0 - so);
    let sg = sigmoid(e.raw_gamma);
    out[layout::RAW_GAMMA] = g.gamma_max * wavelength * sg * (1.0 - sg);
    out[layout::Z_COEFF] = g.z;
}

/// Loss and optional raw gradient of a batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: LossParts,
    /// Mean over the batch of `∂L/∂raw`, `scene.len() × PARAMS_PER_ELLIPSOID`.
    pub gradient: Option<Vec<f64>>,
    /// Ellipsoids that received any gradient.
    pub touched: Vec<bool>,
}

/// Evaluates the mean loss of `samples` and, if requested, its gradient.
pub fn batch_loss(
    scene: &Scene,
    ctx: &LossContext,
    samples: &[&PreparedSample],
    want_grad: bool,
) -> Result<BatchResult> {
    if samples.is_empty() {
        return Err(CkmError::EmptyInput("empty batch".into()));
    }
    let kernels = SceneKernels::new(scene, ctx.renderer.render.eps_sel);
    let per_sample: Vec<Result<(LossParts, Option<SampleGrad>)>> = samples
        .par_iter()
        .map(|s| {
            let tr = trace(&kernels, &ctx.renderer, &s.pose)?;
            let (parts, gh) = sample_loss(&tr.channel.entries, s, ctx, want_grad);
            if !parts.total.is_finite() {
                return Err(CkmError::NonFiniteLoss {
                    sample_id: s.id.clone(),
                    detail: format!("spectrum {} gain {}", parts.spectrum, parts.gain),
                });
            }
            let g = want_grad.then(|| backward_sample(&kernels, &ctx.renderer, &tr, &gh));
            Ok((parts, g))
        })
        .collect();
    let n = samples.len() as f64;
    let mut loss = LossParts::default();
    let mut acc = want_grad.then(|| GradAccumulator::new(scene.len()));
    for r in per_sample {
        let (parts, g) = r?;
        loss.spectrum += parts.spectrum / n;
        loss.gain += parts.gain / n;
        loss.total += parts.total / n;
        if let (Some(acc), Some(g)) = (acc.as_mut(), g.as_ref()) {
            acc.add(g);
        }
    }
    let (gradient, touched) = match acc {
        Some(acc) => {
            let g = acc.raw_gradient(scene, 1.0 / n);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CkmError::NonFiniteLoss {
                    sample_id: samples[0].id.clone(),
                    detail: "non-finite gradient in batch".into(),
                });
            }
            (Some(g), acc.touched)
        }
        None => (None, vec![false; scene.len()]),
    };
    Ok(BatchResult {
        loss,
        gradient,
        touched,
    })
}

/// Adam moments for every raw parameter, with per-ellipsoid step counts so
/// that new ellipsoids start fresh.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(count: usize) -> Self {
        Self {
            m: vec![0.0; count * PARAMS_PER_ELLIPSOID],
            v: vec![0.0; count * PARAMS_PER_ELLIPSOID],
            steps: vec![0; count],
        }
    }

    /// Reorders the state after density control; `None` entries start fresh.
    pub fn remap(&self, origin: &[Option<usize>]) -> Self {
        let mut out = Self::new(origin.len());
        for (new, old) in origin.iter().enumerate() {
            if let Some(old) = old {
                let (a, b) = (old * PARAMS_PER_ELLIPSOID, new * PARAMS_PER_ELLIPSOID);
                out.m[b..b + PARAMS_PER_ELLIPSOID].copy_from_slice(&self.m[a..a + PARAMS_PER_ELLIPSOID]);
                out.v[b..b + PARAMS_PER_ELLIPSOID].copy_from_slice(&self.v[a..a + PARAMS_PER_ELLIPSOID]);
                out.steps[new] = self.steps[*old];
            }
        }
        out
    }
}

/// One Adam update of every ellipsoid; quaternions are renormalized after.
pub fn adam_step(
    state: &mut OptimizerState,
    gradient: &[f64],
    scene: &mut Scene,
    lr: &[f64],
    adam: &AdamConfig,
) -> Result<()> {
    let n = scene.len();
    if gradient.len() != n * PARAMS_PER_ELLIPSOID || state.steps.len() != n || lr.len() != PARAMS_PER_ELLIPSOID {
        return Err(CkmError::ShapeMismatch("optimizer state, gradient and scene differ".into()));
    }
    let mut params = vec![0.0; PARAMS_PER_ELLIPSOID];
    for (i, e) in scene.ellipsoids.iter_mut().enumerate() {
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let bc1 = 1.0 - adam.beta1.powi(t);
        let bc2 = 1.0 - adam.beta2.powi(t);
        e.write_params(&mut params);
        let base = i * PARAMS_PER_ELLIPSOID;
        for (j, p) in params.iter_mut().enumerate() {
            let g = gradient[base + j];
            let m = &mut state.m[base + j];
            let v = &mut state.v[base + j];
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr[j] * mh / (vh.sqrt() + adam.eps);
        }
        *e = GaussianEllipsoid::from_params(&params);
        e.normalize_rotation();
    }
    Ok(())
}

/// Running positional-gradient statistics for density control.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub norm_sum: Vec<f64>,
    pub vec_sum: Vec<Vector3<f64>>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            norm_sum: vec![0.0; n],
            vec_sum: vec![Vector3::zeros(); n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, gradient: &[f64], touched: &[bool]) {
        for (i, t) in touched.iter().enumerate() {
            if !t {
                continue;
            }
            let b = i * PARAMS_PER_ELLIPSOID + layout::MEAN;
            let g = Vector3::new(gradient[b], gradient[b + 1], gradient[b + 2]);
            self.norm_sum[i] += g.norm();
            self.vec_sum[i] += g;
            self.count[i] += 1;
        }
    }

    pub fn mean_norm(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }
}

/// Outcome of a density-control pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    /// For every ellipsoid of the new scene, the index it came from when it
    /// is a survivor; `None` for clones and split children.
    pub origin: Vec<Option<usize>>,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Prunes, clones and splits ellipsoids.
pub fn density_control(
    scene: &mut Scene,
    stats: &GradStats,
    cfg: &DensityControlConfig,
    extent: f64,
) -> DensityReport {
    let old = std::mem::take(&mut scene.ellipsoids);
    let wavelength = scene.wavelength;
    let mut kept: Vec<(GaussianEllipsoid, Option<usize>)> = Vec::with_capacity(old.len());
    let mut extra: Vec<GaussianEllipsoid> = Vec::new();
    let (mut pruned, mut cloned, mut split) = (0, 0, 0);
    let mut budget = cfg.max_ellipsoids as isize
        - old
            .iter()
            .filter(|e| e.activate(wavelength).alpha_max >= cfg.prune_opacity)
            .count() as isize;
    for (i, e) in old.into_iter().enumerate() {
        if e.activate(wavelength).alpha_max < cfg.prune_opacity {
            pruned += 1;
            continue;
        }
        let hot = stats.mean_norm(i) > cfg.grad_threshold;
        let big = e.max_scale() >= cfg.scale_split_fraction * extent;
        if hot && big && budget >= 1 {
            let (a, b) = split_children(&e);
            kept.push((a, None));
            extra.push(b);
            budget -= 1;
            split += 1;
        } else if hot && !big && budget >= 1 {
            let mut c = e.clone();
            let g = stats.vec_sum[i];
            if g.norm() > 0.0 {
                c.mean -= g.normalize() * (0.1 * e.max_scale());
            }
            extra.push(c);
            kept.push((e, Some(i)));
            budget -= 1;
            cloned += 1;
        } else {
            kept.push((e, Some(i)));
        }
    }
    let mut origin = Vec::with_capacity(kept.len() + extra.len());
    for (e, o) in kept {
        scene.ellipsoids.push(e);
        origin.push(o);
    }
    for e in extra {
        scene.ellipsoids.push(e);
        origin.push(None);
    }
    DensityReport {
        origin,
        pruned,
        cloned,
        split,
    }
}

fn split_children(e: &GaussianEllipsoid) -> (GaussianEllipsoid, GaussianEllipsoid) {
    let mut major = 0;
    for i in 1..3 {
        if e.log_scales[i] > e.log_scales[major] {
            major = i;
        }
    }
    let axis = e.rotation_matrix().column(major).into_owned();
    let offset = axis * (0.5 * e.log_scales[major].exp());
    let mut a = e.clone();
    let mut b = e.clone();
    a.mean += offset;
    b.mean -= offset;
    let shrink = SPLIT_SCALE_DIVISOR.ln();
    a.log_scales.add_scalar_mut(-shrink);
    b.log_scales.add_scalar_mut(-shrink);
    (a, b)
}

/// Initial scene: ellipsoids uniform in `bbox`, scaled by their mean
/// distance to the three nearest neighbours.
pub fn initialize_scene(bbox: &Aabb, wavelength: f64, init: &InitConfig, rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene::new(*bbox, wavelength);
    let means: Vec<Vector3<f64>> = (0..init.count)
        .map(|_| {
            Vector3::from_fn(|i, _| {
                if bbox.max[i] > bbox.min[i] {
                    rng.gen_range(bbox.min[i]..bbox.max[i])
                } else {
                    bbox.min[i]
                }
            })
        })
        .collect();
    let fallback = bbox.extent() * 0.05;
    for (i, m) in means.iter().enumerate() {
        let mut d: Vec<f64> = means
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| (o - m).norm())
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        let scale = if k == 0 {
            fallback
        } else {
            (d[..k].iter().sum::<f64>() / k as f64).max(1e-6)
        };
        let mut e = GaussianEllipsoid::isotropic(*m, scale);
        e.raw_opacity = logit(init.opacity);
        e.raw_gamma = logit(init.gamma_fraction);
        e.z_coeff = rng.gen::<f64>() * init.z_max;
        e.bsh_re.set(0, 0, init.bsh_dc);
        scene.ellipsoids.push(e);
    }
    scene
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_spectrum: f64,
    pub loss_gain: f64,
    pub loss: f64,
    pub ellipsoids: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scene: Scene,
    pub history: Vec<LogRecord>,
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
    Ok(pool.install(f))
}

/// Trains a scene on `dataset`. `init` replaces the random initialization.
/// Every logged record is also written to `log` as one JSON line.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<Scene>,
    log: &mut (dyn Write + Send),
) -> Result<TrainOutcome> {
    train_with_eval(dataset, None, cfg, init, log)
}

/// [`train`] with held-out metrics attached to the log every
/// `cfg.eval_every` steps.
pub fn train_with_eval(
    dataset: &Dataset,
    held_out: Option<&Dataset>,
    cfg: &TrainConfig,
    init: Option<Scene>,
    log: &mut (dyn Write + Send),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CkmError::EmptyInput("training dataset has no records".into()));
    }
    dataset.validate()?;
    if let Some(h) = held_out {
        h.validate()?;
        h.expect_array(&dataset.header.array)?;
    }
    with_pool(cfg.threads, || train_inner(dataset, held_out, cfg, init, log))?
}

fn train_inner(
    dataset: &Dataset,
    held_out: Option<&Dataset>,
    cfg: &TrainConfig,
    init: Option<Scene>,
    log: &mut (dyn Write + Send),
) -> Result<TrainOutcome> {
    let wavelength = dataset.header.wavelength;
    let bbox = cfg.bbox.unwrap_or(dataset.header.bbox);
    let extent = bbox.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = match init {
        Some(s) => s,
        None => initialize_scene(&bbox, wavelength, &cfg.init, &mut rng),
    };
    if scene.wavelength != wavelength {
        return Err(CkmError::InvalidConfig("scene and dataset wavelengths differ".into()));
    }
    let array = dataset.header.array;
    let spectrum_grid = cfg
        .spectrum_grid
        .map(|[a, b]| AngleGrid::new(a, b))
        .unwrap_or(array.grid);
    let ctx = LossContext::new(Renderer::new(array, cfg.render_config()), spectrum_grid, cfg.loss);
    let samples = ctx.prepare(dataset);
    let mut state = OptimizerState::new(scene.len());
    let mut stats = GradStats::new(scene.len());
    let base_lr = cfg.lr.per_slot(extent);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::new();
    let start = Instant::now();
    let inflated = bbox.inflated(cfg.bbox_inflation);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let res = batch_loss(&scene, &ctx, &batch, true)?;
        let grad = res.gradient.as_ref().unwrap();
        stats.record(grad, &res.touched);

        let mut lr = base_lr.clone();
        if cfg.lr_final_fraction != 1.0 && cfg.steps > 1 {
            let t = (step - 1) as f64 / (cfg.steps - 1) as f64;
            let f = cfg.lr_final_fraction.powf(t);
            lr.iter_mut().for_each(|v| *v *= f);
        }
        adam_step(&mut state, grad, &mut scene, &lr, &cfg.adam)?;
        for e in &mut scene.ellipsoids {
            for i in 0..3 {
                e.mean[i] = e.mean[i].clamp(inflated.min[i], inflated.max[i]);
            }
        }

        if cfg.density.due(step) {
            let report = density_control(&mut scene, &stats, &cfg.density, extent);
            state = state.remap(&report.origin);
            stats = GradStats::new(scene.len());
        }

        let eval = match held_out {
            Some(h) if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) => {
                Some(evaluate(&scene, h, &ctx.renderer.render, spectrum_grid)?)
            }
            _ => None,
        };
        let due = cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps);
        if due || eval.is_some() {
            let rec = LogRecord {
                step,
                loss_spectrum: res.loss.spectrum,
                loss_gain: res.loss.gain,
                loss: res.loss.total,
                ellipsoids: scene.len(),
                wall_time: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
                eval,
            };
            let line = serde_json::to_string(&rec).map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
            writeln!(log, "{line}")?;
            history.push(rec);
        }
    }
    log.flush()?;
    Ok(TrainOutcome { scene, history })
}

/// Held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub gain_mae_db: f64,
    pub gain_nmae: f64,
    pub ssim: f64,
}

/// Predicted channels for every record of a dataset.
pub fn predict_dataset(scene: &Scene, dataset: &Dataset, render: &RenderConfig) -> Result<Vec<crate::scene::ChannelVector>> {
    let kernels = SceneKernels::new(scene, render.eps_sel);
    let renderer = Renderer::new(dataset.header.array, *render);
    dataset
        .records
        .par_iter()
        .map(|m| Ok(trace(&kernels, &renderer, &Pose::of(m))?.channel))
        .collect()
}

/// Compares predicted channels to a dataset's ground truth.
pub fn evaluate_channels(
    predicted: &[crate::scene::ChannelVector],
    dataset: &Dataset,
    spectrum_grid: AngleGrid,
) -> Result<EvalSummary> {
    if dataset.is_empty() {
        return Err(CkmError::EmptyInput("evaluation dataset has no records".into()));
    }
    if predicted.len() != dataset.len() {
        return Err(CkmError::ShapeMismatch("prediction count differs from dataset".into()));
    }
    let table = SteeringTable::new(&dataset.header.array, spectrum_grid);
    let pred_gain: Vec<f64> = predicted.iter().map(gain_db).collect();
    let gt_gain: Vec<f64> = dataset.records.iter().map(|m| gain_db(&m.channel)).collect();
    let ssims: Vec<f64> = predicted
        .par_iter()
        .zip(&dataset.records)
        .map(|(p, m)| {
            let norm = |h: &crate::scene::ChannelVector| -> Vec<f64> {
                cbf_with_table(h, &table)
                    .values
                    .iter()
                    .map(|v| normalize_db(power_to_db(*v)))
                    .collect()
            };
            ssim_normalized(&norm(p), &norm(&m.channel), spectrum_grid.n_theta, spectrum_grid.n_phi)
        })
        .collect();
    Ok(EvalSummary {
        samples: dataset.len(),
        gain_mae_db: mae(&pred_gain, &gt_gain)?,
        gain_nmae: nmae(&pred_gain, &gt_gain)?,
        ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
    })
}

/// Renders every record with `scene` and evaluates it.
pub fn evaluate(scene: &Scene, dataset: &Dataset, render: &RenderConfig, spectrum_grid: AngleGrid) -> Result<EvalSummary> {
    let predicted = predict_dataset(scene, dataset, render)?;
    evaluate_channels(&predicted, dataset, spectrum_grid)
}

/// Analytic against central-difference derivative of one raw parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub ellipsoid: usize,
    pub slot: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn memberships(scene: &Scene, ctx: &LossContext, samples: &[&PreparedSample]) -> Result<Vec<Vec<usize>>> {
    let kernels = SceneKernels::new(scene, ctx.renderer.render.eps_sel);
    samples
        .iter()
        .map(|s| Ok(trace(&kernels, &ctx.renderer, &s.pose)?.membership()))
        .collect()
}

/// Central-difference derivative of the batch loss in one raw parameter,
/// using Ridders' extrapolation over steps shrinking from
/// `rel_step·max(|x|, 1)` by a factor 1.4. Steps whose perturbation changes a
/// path-set membership restart the tableau at the next smaller step. Returns
/// `None` when no usable estimate remains, i.e. the loss is not
/// differentiable at `x`. The estimate with the smallest tableau error is kept.
pub fn finite_difference(
    scene: &Scene,
    ctx: &LossContext,
    samples: &[&PreparedSample],
    analytic: &[f64],
    ellipsoid: usize,
    slot: usize,
    rel_step: f64,
) -> Result<Option<GradCheck>> {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 14;
    let base = memberships(scene, ctx, samples)?;
    let params = scene.ellipsoids[ellipsoid].params();
    let x = params[slot];
    let eval = |v: f64| -> Result<Option<f64>> {
        let mut p = params.clone();
        p[slot] = v;
        let mut s = scene.clone();
        s.ellipsoids[ellipsoid] = GaussianEllipsoid::from_params(&p);
        if memberships(&s, ctx, samples)? != base {
            return Ok(None);
        }
        Ok(Some(batch_loss(&s, ctx, samples, false)?.loss.total))
    };
    let mut h = rel_step * x.abs().max(1.0);
    let mut best: Option<(f64, f64, f64)> = None;
    // prev[j] holds the j-th extrapolation from the previous step.
    let mut prev: Vec<f64> = Vec::new();
    for _ in 0..LEVELS {
        let d = match (eval(x + h)?, eval(x - h)?) {
            (Some(up), Some(down)) => (up - down) / (2.0 * h),
            _ => {
                prev.clear();
                h /= SHRINK;
                continue;
            }
        };
        let mut row = vec![d];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if best.map_or(true, |(_, e, _)| err <= e) {
                best = Some((v, err, h));
            }
            row.push(v);
        }
        prev = row;
        h /= SHRINK;
    }
    Ok(best.map(|(numeric, _, step)| GradCheck {
        ellipsoid,
        slot,
        analytic: analytic[ellipsoid * PARAMS_PER_ELLIPSOID + slot],
        numeric,
        step,
    }))
}

/// Checks every ellipsoid invariant and the BSH symmetry of a scene.
pub fn check_scene_invariants(scene: &Scene) -> Result<()> {
    for e in &scene.ellipsoids {
        e.validate()?;
        for c in [&e.bsh_re, &e.bsh_im] {
            let a = c.materialize();
            for i in 0..SH_COUNT {
                for k in 0..SH_COUNT {
                    if a[(k, i)] != mirror_sign(i, k) * a[(i, k)] {
                        return Err(CkmError::InvalidConfig("BSH symmetry violated".into()));
                    }
                }
            }
        }
    }
    Ok(())
}
