//! Spoiled gradient-echo (FLASH) signal model and its derivatives.
//!
//! The voxel parameters are theta = (R1, R2*, PD, MTsat); each acquisition
//! is described by (TR, TE, flip angle, MT flag, second repeat time). The
//! non-MT steady state is the standard Ernst expression; acquisitions with
//! an MT pulse use a two-compartment generalisation where the saturation
//! parameter scales the longitudinal recovery across the two sub-periods
//! of the repetition.
//!
//! Note on the non-MT numerator: the recovery factor is `1 - exp(-TR * R1)`.
//! A positive exponent would diverge with TR and contradict the MT case at
//! MTsat = 0, so the negative-exponent steady state is used throughout.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-volume acquisition settings.
///
/// Times in seconds, flip angle in radians. `tr2_s` is the second repeat
/// time of MT-weighted scans and is ignored when `mt_pulse` is false.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSettings {
    pub tr_s: f64,
    pub te_s: f64,
    pub flip_rad: f64,
    pub mt_pulse: bool,
    pub tr2_s: f64,
}

impl AcquisitionSettings {
    pub fn new(tr_s: f64, te_s: f64, flip_rad: f64, mt_pulse: bool, tr2_s: f64) -> Result<Self> {
        let s = AcquisitionSettings {
            tr_s,
            te_s,
            flip_rad,
            mt_pulse,
            tr2_s: if mt_pulse { tr2_s } else { 0.0 },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr_s > 0.0) {
            return Err(Error::invalid(format!("TR must be > 0 s, got {}", self.tr_s)));
        }
        if !(self.te_s >= 0.0) {
            return Err(Error::invalid(format!("TE must be >= 0 s, got {}", self.te_s)));
        }
        if !(self.flip_rad > 0.0 && self.flip_rad < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid(format!(
                "flip angle must be in (0, pi/2) rad, got {}",
                self.flip_rad
            )));
        }
        if !(self.tr2_s >= 0.0) {
            return Err(Error::invalid(format!(
                "second repeat time must be >= 0 s, got {}",
                self.tr2_s
            )));
        }
        Ok(())
    }

    /// Key identifying an acquisition run: everything but the echo time.
    /// Volumes that differ only in TE belong to the same multi-echo run.
    pub fn run_key(&self) -> (u64, u64, bool, u64) {
        (
            self.tr_s.to_bits(),
            self.flip_rad.to_bits(),
            self.mt_pulse,
            self.tr2_s.to_bits(),
        )
    }
}

/// Group volume indices into acquisition runs, in order of first appearance.
pub fn group_runs(settings: &[AcquisitionSettings]) -> Vec<Vec<usize>> {
    let mut runs: Vec<(u64, u64, bool, u64)> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in settings.iter().enumerate() {
        let key = s.run_key();
        match runs.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                runs.push(key);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Human-readable contrast labels for a set of runs ("pdw", "t1w", "mtw").
///
/// MT runs are labelled `mtw`; among non-MT runs the smallest flip angle is
/// `pdw` and the largest `t1w`. Anything ambiguous falls back to `run<k>`.
pub fn contrast_labels(settings: &[AcquisitionSettings], runs: &[Vec<usize>]) -> Vec<String> {
    let flips: Vec<f64> = runs.iter().map(|g| settings[g[0]].flip_rad).collect();
    let non_mt: Vec<usize> = (0..runs.len())
        .filter(|&k| !settings[runs[k][0]].mt_pulse)
        .collect();
    let min_flip = non_mt.iter().map(|&k| flips[k]).fold(f64::INFINITY, f64::min);
    let max_flip = non_mt
        .iter()
        .map(|&k| flips[k])
        .fold(f64::NEG_INFINITY, f64::max);
    runs.iter()
        .enumerate()
        .map(|(k, g)| {
            let s = &settings[g[0]];
            if s.mt_pulse {
                "mtw".to_string()
            } else if non_mt.len() == 2 && min_flip < max_flip {
                if s.flip_rad == min_flip {
                    "pdw".to_string()
                } else {
                    "t1w".to_string()
                }
            } else {
                format!("run{k}")
            }
        })
        .collect()
}

/// Voxel tissue parameters: relaxation rates in 1/s, PD in native intensity
/// units, MTsat dimensionless in [0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelParams {
    pub r1: f64,
    pub r2s: f64,
    pub pd: f64,
    pub mtsat: f64,
}

impl VoxelParams {
    pub fn new(r1: f64, r2s: f64, pd: f64, mtsat: f64) -> Result<Self> {
        let p = VoxelParams { r1, r2s, pd, mtsat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r2s > 0.0 && self.pd > 0.0) {
            return Err(Error::invalid(format!(
                "R1, R2*, PD must be positive, got ({}, {}, {})",
                self.r1, self.r2s, self.pd
            )));
        }
        if !(0.0..1.0).contains(&self.mtsat) {
            return Err(Error::invalid(format!(
                "MTsat must be in [0, 1), got {}",
                self.mtsat
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.r1, self.r2s, self.pd, self.mtsat]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        VoxelParams {
            r1: a[0],
            r2s: a[1],
            pd: a[2],
            mtsat: a[3],
        }
    }
}

/// Rational part N/D of the steady state and the partials needed for the
/// chain rule, shared between the MT and non-MT cases.
struct SteadyState {
    ratio: f64,
    // first derivatives of the ratio w.r.t. (r1, mtsat)
    d_r1: f64,
    d_mt: f64,
    // second derivatives
    d_r1r1: f64,
    d_r1mt: f64,
    d_mtmt: f64,
}

fn steady_state(theta: &VoxelParams, s: &AcquisitionSettings) -> SteadyState {
    let cos_a = s.flip_rad.cos();
    if s.mt_pulse {
        let t_full = s.tr_s + s.tr2_s;
        let e1 = (-t_full * theta.r1).exp();
        let e5 = (-s.tr2_s * theta.r1).exp();
        let mt = theta.mtsat;
        // N = 1 + (mt-1) e1 - mt e5,  D = 1 + (mt-1) cos_a e1
        let n = 1.0 + (mt - 1.0) * e1 - mt * e5;
        let d = 1.0 + (mt - 1.0) * cos_a * e1;
        let n_r1 = (1.0 - mt) * t_full * e1 + mt * s.tr2_s * e5;
        let d_r1 = (1.0 - mt) * cos_a * t_full * e1;
        let n_mt = e1 - e5;
        let d_mt = cos_a * e1;
        let n_r1r1 = -(1.0 - mt) * t_full * t_full * e1 - mt * s.tr2_s * s.tr2_s * e5;
        let d_r1r1 = -(1.0 - mt) * cos_a * t_full * t_full * e1;
        let n_r1mt = -t_full * e1 + s.tr2_s * e5;
        let d_r1mt = -cos_a * t_full * e1;
        ratio_derivs(n, d, n_r1, d_r1, n_mt, d_mt, n_r1r1, d_r1r1, n_r1mt, d_r1mt)
    } else {
        let e = (-s.tr_s * theta.r1).exp();
        let n = 1.0 - e;
        let d = 1.0 - cos_a * e;
        let n_r1 = s.tr_s * e;
        let d_r1 = cos_a * s.tr_s * e;
        let n_r1r1 = -s.tr_s * s.tr_s * e;
        let d_r1r1 = -cos_a * s.tr_s * s.tr_s * e;
        ratio_derivs(n, d, n_r1, d_r1, 0.0, 0.0, n_r1r1, d_r1r1, 0.0, 0.0)
    }
}

/// Derivatives of r = N/D from those of N and D via r D = N.
#[allow(clippy::too_many_arguments)]
fn ratio_derivs(
    n: f64,
    d: f64,
    n_r1: f64,
    d_r1: f64,
    n_mt: f64,
    d_mt: f64,
    n_r1r1: f64,
    d_r1r1: f64,
    n_r1mt: f64,
    d_r1mt: f64,
) -> SteadyState {
    let ratio = n / d;
    let r_r1 = (n_r1 - ratio * d_r1) / d;
    let r_mt = (n_mt - ratio * d_mt) / d;
    let r_r1r1 = (n_r1r1 - 2.0 * r_r1 * d_r1 - ratio * d_r1r1) / d;
    let r_r1mt = (n_r1mt - r_r1 * d_mt - r_mt * d_r1 - ratio * d_r1mt) / d;
    // N and D are linear in mtsat, so the pure-mtsat second derivative of
    // the ratio only carries the cross term.
    let r_mtmt = (-2.0 * r_mt * d_mt) / d;
    SteadyState {
        ratio,
        d_r1: r_r1,
        d_mt: r_mt,
        d_r1r1: r_r1r1,
        d_r1mt: r_r1mt,
        d_mtmt: r_mtmt,
    }
}

/// Noise-free signal mu(theta; s). Positive and bounded by `theta.pd`.
pub fn signal(theta: &VoxelParams, s: &AcquisitionSettings) -> f64 {
    let ss = steady_state(theta, s);
    theta.pd * s.flip_rad.sin() * ss.ratio * (-s.te_s * theta.r2s).exp()
}

/// Analytic gradient of the signal w.r.t. (R1, R2*, PD, MTsat).
pub fn signal_grad(theta: &VoxelParams, s: &AcquisitionSettings) -> [f64; 4] {
    let ss = steady_state(theta, s);
    let decay = (-s.te_s * theta.r2s).exp();
    let k = theta.pd * s.flip_rad.sin() * decay;
    let mu = k * ss.ratio;
    [k * ss.d_r1, -s.te_s * mu, mu / theta.pd, k * ss.d_mt]
}

/// Analytic Hessian of the signal w.r.t. (R1, R2*, PD, MTsat); symmetric.
pub fn signal_hess(theta: &VoxelParams, s: &AcquisitionSettings) -> [[f64; 4]; 4] {
    let ss = steady_state(theta, s);
    let te = s.te_s;
    let decay = (-te * theta.r2s).exp();
    let k = theta.pd * s.flip_rad.sin() * decay;
    let mu = k * ss.ratio;
    let mut h = [[0.0f64; 4]; 4];
    h[0][0] = k * ss.d_r1r1;
    h[0][1] = -te * k * ss.d_r1;
    h[0][2] = k * ss.d_r1 / theta.pd;
    h[0][3] = k * ss.d_r1mt;
    h[1][1] = te * te * mu;
    h[1][2] = -te * mu / theta.pd;
    h[1][3] = -te * k * ss.d_mt;
    h[2][2] = 0.0;
    h[2][3] = k * ss.d_mt / theta.pd;
    h[3][3] = k * ss.d_mtmt;
    for i in 0..4 {
        for j in 0..i {
            h[i][j] = h[j][i];
        }
    }
    h
}
