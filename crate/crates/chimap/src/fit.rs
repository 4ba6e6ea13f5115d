//! Voxel-wise Newton estimation of (R1, R2*, PD, MTsat) maps.
//!
//! Each masked voxel minimises the negative log-likelihood of its N
//! observations under the chosen noise family. The gradient uses the
//! Bessel-ratio shrinkage factor xi = I_{nu/2}/I_{nu/2-1} (identically 1
//! for the Gaussian family); the Hessian approximation keeps the
//! Gauss-Newton term and the curvature term with the residual replaced by
//! its absolute value, plus Levenberg damping, which keeps it positive
//! definite. Optimisation runs in log-parameter space so positivity never
//! needs explicit constraints.
//!
//! Voxels are independent work items; with regularization off the result
//! is identical for any scheduling. The optional membrane penalty couples
//! neighbours through Jacobi sweeps that read the previous sweep's field,
//! which keeps the parallel output deterministic as well.

use crate::dist::{gaussian_logpdf, ncchi_logpdf, Family, NoiseModel};
use crate::error::{Error, Result};
use crate::forward::{signal, signal_grad, signal_hess, AcquisitionSettings, VoxelParams};
use crate::par;
use crate::special::bessel_ratio;
use crate::volume::EchoVolume;
use serde::{Deserialize, Serialize};

/// Solver settings (serialisable; the on-disk JSON interface).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Newton iteration cap per voxel (or sweep cap with regularization on).
    pub max_iters: usize,
    /// Stop when the objective improves by less than `tol * N` (N volumes).
    pub tol: f64,
    pub likelihood: Family,
    /// Membrane (squared log-gradient) weights per map
    /// (R1, R2*, PD, MTsat); all zero disables regularization.
    pub reg_weights: [f64; 4],
    /// Mask path, carried for metadata echoing; the library itself takes
    /// the mask as data.
    pub mask: Option<String>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iters: 50,
            tol: 1e-7,
            likelihood: Family::NcChi,
            reg_weights: [0.0; 4],
            mask: None,
        }
    }
}

/// A fully assembled fitting problem over co-registered volumes.
pub struct FitProblem<'a> {
    pub volumes: Vec<&'a EchoVolume>,
    pub settings: Vec<AcquisitionSettings>,
    /// One noise model per volume (volumes of a run share one in practice).
    pub noise: Vec<NoiseModel>,
    pub likelihood: Family,
    pub mask: &'a [bool],
}

impl<'a> FitProblem<'a> {
    pub fn validate(&self) -> Result<()> {
        let n = self.volumes.len();
        if n < 4 {
            return Err(Error::invalid(format!(
                "need at least 4 volumes for identifiability, got {n}"
            )));
        }
        if self.settings.len() != n || self.noise.len() != n {
            return Err(Error::invalid(
                "settings and noise lists must match the number of volumes",
            ));
        }
        let dims = self.volumes[0].dims;
        for (i, v) in self.volumes.iter().enumerate() {
            if v.dims != dims {
                return Err(Error::invalid(format!(
                    "volume {i} has dims {:?}, expected {:?}",
                    v.dims, dims
                )));
            }
        }
        if self.mask.len() != self.volumes[0].len() {
            return Err(Error::invalid(format!(
                "mask length {} does not match volume size {}",
                self.mask.len(),
                self.volumes[0].len()
            )));
        }
        let mut flips: Vec<u64> = self.settings.iter().map(|s| s.flip_rad.to_bits()).collect();
        flips.sort_unstable();
        flips.dedup();
        let mut tes: Vec<u64> = self.settings.iter().map(|s| s.te_s.to_bits()).collect();
        tes.sort_unstable();
        tes.dedup();
        if flips.len() < 2 || tes.len() < 2 {
            return Err(Error::invalid(
                "need at least two flip angles and two echo times",
            ));
        }
        for s in &self.settings {
            s.validate()?;
        }
        for m in &self.noise {
            m.validate()?;
        }
        if self.likelihood == Family::Chi {
            return Err(Error::invalid("fit likelihood must be gaussian or ncchi"));
        }
        Ok(())
    }
}

/// Per-volume observation bundle for a single voxel. Nonpositive
/// intensities are treated as missing and contribute nothing.
pub struct VoxelData<'a> {
    pub x: &'a [f64],
    pub settings: &'a [AcquisitionSettings],
    pub noise: &'a [NoiseModel],
    pub likelihood: Family,
}

/// Negative log-likelihood of one voxel's observations.
pub fn voxel_objective(theta: &VoxelParams, data: &VoxelData) -> f64 {
    let mut e = 0.0;
    for ((&x, s), m) in data.x.iter().zip(data.settings).zip(data.noise) {
        if !(x > 0.0) {
            continue;
        }
        let mu = signal(theta, s);
        let lp = match data.likelihood {
            Family::Gaussian => gaussian_logpdf(x, mu, m.sigma2),
            _ => ncchi_logpdf(x, mu, m).unwrap_or(f64::NEG_INFINITY),
        };
        e -= lp;
    }
    e
}

/// The shrinkage factor applied to the observation in the gradient.
#[inline]
fn xi_factor(family: Family, nu: f64, z: f64) -> f64 {
    match family {
        Family::Gaussian => 1.0,
        _ => {
            if z <= 0.0 {
                0.0
            } else {
                bessel_ratio(0.5 * nu, z).expect("valid ratio arguments")
            }
        }
    }
}

/// Gradient and positive-definite Hessian approximation of the objective
/// in native parameter space. Returns `None` when anything non-finite
/// shows up (the voxel is then flagged and skipped).
pub fn voxel_grad_hess(
    theta: &VoxelParams,
    data: &VoxelData,
) -> Option<([f64; 4], [[f64; 4]; 4])> {
    let mut g = [0.0f64; 4];
    let mut h = [[0.0f64; 4]; 4];
    for ((&x, s), m) in data.x.iter().zip(data.settings).zip(data.noise) {
        if !(x > 0.0) {
            continue;
        }
        let mu = signal(theta, s);
        let grad_mu = signal_grad(theta, s);
        let hess_mu = signal_hess(theta, s);
        let inv_s2 = 1.0 / m.sigma2;
        let xi = xi_factor(data.likelihood, m.nu, x * mu * inv_s2);
        let resid = mu - xi * x;
        let abs_resid = resid.abs();
        for i in 0..4 {
            g[i] += resid * inv_s2 * grad_mu[i];
            for j in i..4 {
                h[i][j] += (grad_mu[i] * grad_mu[j] + abs_resid * hess_mu[i][j]) * inv_s2;
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            h[i][j] = h[j][i];
        }
        if !g[i].is_finite() || h[i].iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    Some((g, h))
}

/// Cholesky factorisation of a symmetric 4x4; `None` if not positive
/// definite.
fn cholesky4(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut l = [[0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve4(l: &[[f64; 4]; 4], b: &[f64; 4]) -> [f64; 4] {
    let mut y = [0.0f64; 4];
    for i in 0..4 {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        let mut sum = y[i];
        for k in i + 1..4 {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

// Log-parameter bounds: generous envelopes that keep exp() sane.
const LOG_BOUNDS: [(f64, f64); 4] = [
    (-6.907755278982137, 6.907755278982137),    // R1 in [1e-3, 1e3]
    (-6.907755278982137, 9.210340371976184),    // R2* in [1e-3, 1e4]
    (-34.538776394910684, 34.538776394910684),  // PD in [1e-15, 1e15]
    (-27.631021115928547, -0.6931471805599453), // MTsat in [1e-12, 0.5]
];
const MAX_LOG_STEP: f64 = 4.0;

fn clamp_log(y: &mut [f64; 4]) {
    for (v, (lo, hi)) in y.iter_mut().zip(LOG_BOUNDS) {
        *v = v.clamp(lo, hi);
    }
}

fn theta_from_log(y: &[f64; 4]) -> VoxelParams {
    VoxelParams {
        r1: y[0].exp(),
        r2s: y[1].exp(),
        pd: y[2].exp(),
        mtsat: y[3].exp(),
    }
}

/// Per-voxel fit outcome.
#[derive(Clone, Copy, Debug)]
struct VoxelFit {
    theta: VoxelParams,
    objective: f64,
    iterations: u32,
    status: u8, // 0 ok, 1 line-search failure, 2 skipped (non-finite)
}

/// Additional quadratic pull toward fixed neighbour values in log space
/// (the membrane penalty seen from one voxel during a Jacobi sweep).
struct LocalReg<'a> {
    weights: &'a [f64; 4],
    /// Sum of neighbour log-values and the neighbour count, per map.
    nbr_sum: [f64; 4],
    nbr_count: f64,
}

impl LocalReg<'_> {
    fn energy(&self, y: &[f64; 4]) -> f64 {
        // sum_u w/2 (y - y_u)^2 up to a constant in y, kept quadratic so
        // line-search comparisons see the true local penalty shape.
        let mut e = 0.0;
        for i in 0..4 {
            e += 0.5
                * self.weights[i]
                * (self.nbr_count * y[i] * y[i] - 2.0 * y[i] * self.nbr_sum[i]);
        }
        e
    }

    fn add_grad_hess(&self, y: &[f64; 4], g: &mut [f64; 4], h: &mut [[f64; 4]; 4]) {
        for i in 0..4 {
            g[i] += self.weights[i] * (self.nbr_count * y[i] - self.nbr_sum[i]);
            h[i][i] += self.weights[i] * self.nbr_count;
        }
    }
}

const NO_REG: LocalReg<'static> = LocalReg {
    weights: &[0.0; 4],
    nbr_sum: [0.0; 4],
    nbr_count: 0.0,
};

/// Damped Newton with backtracking on one voxel, in log space.
fn fit_voxel(
    init: &[f64; 4],
    data: &VoxelData,
    opts: &SolverSettings,
    reg: &LocalReg,
    max_iters: usize,
) -> VoxelFit {
    let n_volumes = data.x.len() as f64;
    let mut y = *init;
    clamp_log(&mut y);
    let objective_at = |y: &[f64; 4]| voxel_objective(&theta_from_log(y), data) + reg.energy(y);
    let mut obj = objective_at(&y);
    if !obj.is_finite() {
        return VoxelFit {
            theta: theta_from_log(&y),
            objective: obj,
            iterations: 0,
            status: 2,
        };
    }
    let mut lambda = 1e-3;
    let mut consecutive_failures = 0u32;
    let mut status = 0u8;
    let mut iters = 0u32;
    for _ in 0..max_iters {
        iters += 1;
        let theta = theta_from_log(&y);
        let Some((g, h)) = voxel_grad_hess(&theta, data) else {
            status = 2;
            break;
        };
        // Chain rule to log space: y = ln(theta) is a diagonal rescaling.
        let t = theta.as_array();
        let mut gl = [0.0f64; 4];
        let mut hl = [[0.0f64; 4]; 4];
        for i in 0..4 {
            gl[i] = g[i] * t[i];
            for j in 0..4 {
                hl[i][j] = h[i][j] * t[i] * t[j];
            }
        }
        reg.add_grad_hess(&y, &mut gl, &mut hl);
        let trace: f64 = (0..4).map(|i| hl[i][i]).sum();
        let damp_unit = (trace / 4.0).max(1e-300);
        // Raise damping until the factorisation succeeds.
        let l = loop {
            let mut hd = hl;
            for (i, row) in hd.iter_mut().enumerate() {
                row[i] += lambda * damp_unit;
            }
            if let Some(l) = cholesky4(&hd) {
                break l;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                let d = (lambda * damp_unit).sqrt();
                break [
                    [d, 0.0, 0.0, 0.0],
                    [0.0, d, 0.0, 0.0],
                    [0.0, 0.0, d, 0.0],
                    [0.0, 0.0, 0.0, d],
                ];
            }
        };
        let mut step = cholesky_solve4(&l, &gl);
        for v in step.iter_mut() {
            *v = v.clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
        }
        // Backtracking: halve until the objective decreases.
        let mut t_ls = 1.0f64;
        let mut accepted = false;
        for _ in 0..=10 {
            let mut y_new = y;
            for i in 0..4 {
                y_new[i] -= t_ls * step[i];
            }
            clamp_log(&mut y_new);
            let obj_new = objective_at(&y_new);
            if obj_new.is_finite() && obj_new < obj {
                let delta = obj - obj_new;
                y = y_new;
                obj = obj_new;
                accepted = true;
                if delta < opts.tol * n_volumes {
                    return VoxelFit {
                        theta: theta_from_log(&y),
                        objective: obj,
                        iterations: iters,
                        status: 0,
                    };
                }
                break;
            }
            t_ls *= 0.5;
        }
        if accepted {
            consecutive_failures = 0;
            lambda = (lambda / 10.0).max(1e-10);
        } else {
            consecutive_failures += 1;
            lambda *= 100.0;
            if consecutive_failures >= 3 {
                status = 1;
                break;
            }
        }
    }
    VoxelFit {
        theta: theta_from_log(&y),
        objective: obj,
        iterations: iters,
        status,
    }
}

/// Fitted maps plus per-voxel convergence information.
pub struct ParameterMaps {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
    pub r1: Vec<f64>,
    pub r2s: Vec<f64>,
    pub pd: Vec<f64>,
    pub mtsat: Vec<f64>,
    /// Final objective value per voxel (0 outside the mask).
    pub objective: Vec<f64>,
    /// Newton iterations taken per voxel.
    pub iterations: Vec<u32>,
    /// 0 = ok, 1 = line-search failure, 2 = skipped (non-finite data).
    pub status: Vec<u8>,
}

impl ParameterMaps {
    pub fn theta_at(&self, v: usize) -> VoxelParams {
        VoxelParams {
            r1: self.r1[v],
            r2s: self.r2s[v],
            pd: self.pd[v],
            mtsat: self.mtsat[v],
        }
    }

    pub fn nonconverged_count(&self) -> usize {
        self.status.iter().filter(|&&s| s != 0).count()
    }
}

/// Log-linear least squares of ln(x) against TE for one run; returns
/// (amplitude at TE = 0, decay rate) when enough echoes are usable.
fn run_loglinear(x: &[f64], tes: &[f64]) -> Option<(f64, f64)> {
    let mut n = 0.0;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &te) in x.iter().zip(tes) {
        if v > 0.0 {
            let ly = v.ln();
            n += 1.0;
            st += te;
            sy += ly;
            stt += te * te;
            sty += te * ly;
        }
    }
    if n < 2.0 {
        return None;
    }
    let denom = n * stt - st * st;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (n * sty - st * sy) / denom;
    let intercept = (sy - slope * st) / n;
    Some((intercept.exp(), -slope))
}

/// Runs grouped by identical (TR, flip, MT, TR2), with echo-time lists.
struct RunLayout {
    members: Vec<Vec<usize>>,
    tes: Vec<Vec<f64>>,
}

fn run_layout(settings: &[AcquisitionSettings]) -> RunLayout {
    let members = crate::forward::group_runs(settings);
    let tes = members
        .iter()
        .map(|g| g.iter().map(|&i| settings[i].te_s).collect())
        .collect();
    RunLayout { members, tes }
}

const DEFAULT_R1: f64 = 0.7;
const DEFAULT_R2S: f64 = 20.0;
const DEFAULT_MTSAT: f64 = 0.02;

/// Initial log-parameters for one voxel: per-run log-linear echo fits for
/// R2* and amplitudes, a two-flip-angle rational estimate for R1 and PD,
/// and an MT-amplitude inversion for MTsat. Falls back to physiological
/// defaults wherever the algebra degenerates.
fn init_voxel(x: &[f64], settings: &[AcquisitionSettings], layout: &RunLayout) -> [f64; 4] {
    let mut amplitudes: Vec<Option<f64>> = Vec::with_capacity(layout.members.len());
    let mut rates: Vec<f64> = Vec::new();
    for (g, tes) in layout.members.iter().zip(&layout.tes) {
        let xs: Vec<f64> = g.iter().map(|&i| x[i]).collect();
        match run_loglinear(&xs, tes) {
            Some((amp, rate)) if amp.is_finite() && amp > 0.0 => {
                amplitudes.push(Some(amp));
                if rate.is_finite() {
                    rates.push(rate.clamp(0.5, 200.0));
                }
            }
            _ => amplitudes.push(None),
        }
    }
    let r2s = if rates.is_empty() {
        DEFAULT_R2S
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };

    // Two non-MT runs with distinct flips and a shared TR give R1 and PD.
    let mut flash: Vec<(usize, f64, f64)> = Vec::new(); // (run, flip, tr)
    for (k, g) in layout.members.iter().enumerate() {
        let s = &settings[g[0]];
        if !s.mt_pulse {
            flash.push((k, s.flip_rad, s.tr_s));
        }
    }
    let mut r1 = DEFAULT_R1;
    let mut pd = None;
    if flash.len() >= 2 {
        flash.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let (kp, flip_p, tr_p) = flash[0];
        let (kt, flip_t, tr_t) = flash[flash.len() - 1];
        if (tr_p - tr_t).abs() < 1e-12 && flip_p < flip_t {
            if let (Some(ap), Some(at)) = (amplitudes[kp], amplitudes[kt]) {
                let yp = ap / flip_p.sin();
                let xp = ap / flip_p.tan();
                let yt = at / flip_t.sin();
                let xt = at / flip_t.tan();
                if (xt - xp).abs() > 1e-30 {
                    let e = (yt - yp) / (xt - xp);
                    if e > 1e-6 && e < 1.0 - 1e-9 {
                        let r1_est = -e.ln() / tr_p;
                        let pd_est = (yp - e * xp) / (1.0 - e);
                        if r1_est.is_finite() && pd_est.is_finite() && pd_est > 0.0 {
                            r1 = r1_est.clamp(0.05, 10.0);
                            pd = Some(pd_est);
                        }
                    }
                }
            }
        }
    }
    // PD fallback: invert the lowest-flip amplitude at the default R1.
    if pd.is_none() {
        if let Some((k, flip, tr)) = flash.first() {
            if let Some(a) = amplitudes[*k] {
                let e = (-tr * r1).exp();
                let est = a * (1.0 - flip.cos() * e) / (flip.sin() * (1.0 - e));
                if est.is_finite() && est > 0.0 {
                    pd = Some(est);
                }
            }
        }
    }
    let pd = pd
        .or_else(|| {
            let m = x.iter().copied().filter(|v| *v > 0.0).fold(0.0, f64::max);
            if m > 0.0 {
                Some(m * 5.0)
            } else {
                None
            }
        })
        .unwrap_or(1.0);

    // MTsat from the MT run amplitude given (R1, PD).
    let mut mtsat = DEFAULT_MTSAT;
    for (k, g) in layout.members.iter().enumerate() {
        let s = &settings[g[0]];
        if !s.mt_pulse {
            continue;
        }
        if let Some(am) = amplitudes[k] {
            let e1 = (-(s.tr_s + s.tr2_s) * r1).exp();
            let e5 = (-s.tr2_s * r1).exp();
            let c = s.flip_rad.cos();
            let sa = s.flip_rad.sin();
            let num = pd * sa * (1.0 - e1) - am * (1.0 - c * e1);
            let den = am * c * e1 - pd * sa * (e1 - e5);
            if den.abs() > 1e-30 {
                let est = num / den;
                if est.is_finite() {
                    mtsat = est.clamp(1e-6, 0.4);
                }
            }
        }
        break;
    }
    [r1.ln(), r2s.ln(), pd.max(1e-12).ln(), mtsat.max(1e-6).ln()]
}

/// Fit parameter maps for every masked voxel.
pub fn fit_maps(problem: &FitProblem, opts: &SolverSettings) -> Result<ParameterMaps> {
    problem.validate()?;
    let n_vox = problem.volumes[0].len();
    let n_vol = problem.volumes.len();
    let layout = run_layout(&problem.settings);
    let masked: Vec<usize> = (0..n_vox).filter(|&v| problem.mask[v]).collect();

    let gather = |v: usize, buf: &mut Vec<f64>| {
        buf.clear();
        for vol in &problem.volumes {
            buf.push(vol.data[v] as f64);
        }
    };

    let reg_on = opts.reg_weights.iter().any(|&w| w > 0.0);
    let template = problem.volumes[0];
    let mut maps = ParameterMaps {
        dims: template.dims,
        voxel_size: template.voxel_size,
        affine: template.affine,
        r1: vec![0.0; n_vox],
        r2s: vec![0.0; n_vox],
        pd: vec![0.0; n_vox],
        mtsat: vec![0.0; n_vox],
        objective: vec![0.0; n_vox],
        iterations: vec![0; n_vox],
        status: vec![0; n_vox],
    };

    if !reg_on {
        let fits = par::map_blocks(&masked, |block| {
            let mut x = Vec::with_capacity(n_vol);
            block
                .iter()
                .map(|&v| {
                    gather(v, &mut x);
                    let data = VoxelData {
                        x: &x,
                        settings: &problem.settings,
                        noise: &problem.noise,
                        likelihood: problem.likelihood,
                    };
                    let init = init_voxel(&x, &problem.settings, &layout);
                    fit_voxel(&init, &data, opts, &NO_REG, opts.max_iters)
                })
                .collect::<Vec<VoxelFit>>()
        });
        for (block, fits) in masked.chunks(par::BLOCK).zip(fits) {
            for (&v, f) in block.iter().zip(fits) {
                store(&mut maps, v, &f);
            }
        }
        return Ok(maps);
    }

    // Membrane regularization: red-black Gauss-Seidel sweeps. Voxels of
    // one colour have all neighbours in the other, so updating a colour in
    // parallel is race-free and each accepted voxel step lowers the global
    // objective (its neighbours are held fixed during the step).
    let dims = template.dims;
    let mut field: Vec<[f64; 4]> = vec![[0.0; 4]; n_vox];
    {
        let mut x = Vec::with_capacity(n_vol);
        for &v in &masked {
            gather(v, &mut x);
            field[v] = init_voxel(&x, &problem.settings, &layout);
        }
    }
    let colour_of = |v: usize| {
        let x = v % dims[0];
        let y = (v / dims[0]) % dims[1];
        let z = v / (dims[0] * dims[1]);
        (x + y + z) % 2
    };
    let by_colour: [Vec<usize>; 2] = {
        let mut c = [Vec::new(), Vec::new()];
        for &v in &masked {
            c[colour_of(v)].push(v);
        }
        c
    };
    let mut prev_total = f64::INFINITY;
    for _ in 0..opts.max_iters {
        for colour in &by_colour {
            let field_ref = &field;
            let results = par::map_blocks(colour, |block| {
                let mut x = Vec::with_capacity(n_vol);
                block
                    .iter()
                    .map(|&v| {
                        gather(v, &mut x);
                        let data = VoxelData {
                            x: &x,
                            settings: &problem.settings,
                            noise: &problem.noise,
                            likelihood: problem.likelihood,
                        };
                        let (nbr_sum, nbr_count) =
                            neighbour_field(field_ref, problem.mask, dims, v);
                        let reg = LocalReg {
                            weights: &opts.reg_weights,
                            nbr_sum,
                            nbr_count,
                        };
                        // One damped step per sweep.
                        fit_voxel(&field_ref[v], &data, opts, &reg, 1)
                    })
                    .collect::<Vec<VoxelFit>>()
            });
            for (block, fits) in colour.chunks(par::BLOCK).zip(&results) {
                for (&v, f) in block.iter().zip(fits) {
                    field[v] = [
                        f.theta.r1.ln(),
                        f.theta.r2s.ln(),
                        f.theta.pd.ln(),
                        f.theta.mtsat.ln(),
                    ];
                    store(&mut maps, v, f);
                }
            }
        }
        let total: f64 = masked.iter().map(|&v| maps.objective[v]).sum();
        if (prev_total - total).abs() < opts.tol * (n_vol * masked.len().max(1)) as f64 {
            break;
        }
        prev_total = total;
    }
    Ok(maps)
}

/// Sum and count of masked 6-neighbour log-parameter values.
fn neighbour_field(
    field: &[[f64; 4]],
    mask: &[bool],
    dims: [usize; 3],
    v: usize,
) -> ([f64; 4], f64) {
    let (nx, ny) = (dims[0], dims[1]);
    let x = v % nx;
    let y = (v / nx) % ny;
    let z = v / (nx * ny);
    let mut sum = [0.0; 4];
    let mut count = 0.0;
    let mut push = |u: usize| {
        if mask[u] {
            for i in 0..4 {
                sum[i] += field[u][i];
            }
            count += 1.0;
        }
    };
    if x > 0 {
        push(v - 1);
    }
    if x + 1 < dims[0] {
        push(v + 1);
    }
    if y > 0 {
        push(v - nx);
    }
    if y + 1 < dims[1] {
        push(v + nx);
    }
    if z > 0 {
        push(v - nx * ny);
    }
    if z + 1 < dims[2] {
        push(v + nx * ny);
    }
    (sum, count)
}

fn store(maps: &mut ParameterMaps, v: usize, f: &VoxelFit) {
    maps.r1[v] = f.theta.r1;
    maps.r2s[v] = f.theta.r2s;
    maps.pd[v] = f.theta.pd;
    maps.mtsat[v] = f.theta.mtsat;
    maps.objective[v] = f.objective;
    maps.iterations[v] = f.iterations;
    maps.status[v] = f.status;
}
