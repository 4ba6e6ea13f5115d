//! Leave-one-echo-out cross-validation of the nc-chi model against the
//! Gaussian baseline.
//!
//! Fold k removes the k-th echo of every run, fits maps on the remaining
//! volumes under both noise families, predicts the held-out echoes with
//! each family's expected-signal rule, and scores the masked mean squared
//! error. The Gaussian prediction is the forward signal itself; the
//! nc-chi prediction is the distribution mean, which sits above the
//! signal (the noise floor).
//!
//! Noise parameters are taken from the problem as given (estimated once
//! from the full data); they are not re-estimated per fold.

use crate::dist::{ncchi_mean, Family, NoiseModel};
use crate::error::{Error, Result};
use crate::fit::{fit_maps, FitProblem, ParameterMaps, SolverSettings};
use crate::forward::{contrast_labels, group_runs, signal, AcquisitionSettings};
use crate::volume::EchoVolume;
use serde::{Deserialize, Serialize};

/// Predict one echo volume from fitted maps.
///
/// Gaussian family: the forward signal mu(theta; s). nc-chi family: the
/// distribution mean at that signal. Voxels outside the mask are zero.
pub fn predict_echo(
    maps: &ParameterMaps,
    mask: &[bool],
    s: &AcquisitionSettings,
    noise: &NoiseModel,
    family: Family,
) -> Result<EchoVolume> {
    s.validate()?;
    noise.validate()?;
    let n = maps.r1.len();
    if mask.len() != n {
        return Err(Error::invalid("mask length does not match maps"));
    }
    let mut data = vec![0.0f32; n];
    for v in 0..n {
        if !mask[v] {
            continue;
        }
        let mu = signal(&maps.theta_at(v), s);
        let value = match family {
            Family::Gaussian => mu,
            _ => ncchi_mean(noise, mu)?,
        };
        data[v] = value as f32;
    }
    let mut vol = EchoVolume::new(maps.dims, maps.voxel_size, maps.affine, data)?;
    vol.raw_header = None;
    Ok(vol)
}

/// One fold/contrast row of the cross-validation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoeoRow {
    pub contrast: String,
    pub held_out_echo: usize,
    pub mse_gauss: f64,
    pub mse_ncchi: f64,
    /// mse_ncchi - mse_gauss (negative favours the nc-chi model).
    pub diff: f64,
    /// Voxels that failed to converge in either family's fit for this fold.
    pub nonconverged: usize,
}

/// Per-contrast summary, averaged over held-out echoes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoeoSummary {
    pub contrast: String,
    pub mse_gauss: f64,
    pub mse_ncchi: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoeoReport {
    pub rows: Vec<LoeoRow>,
    pub summary: Vec<LoeoSummary>,
}

impl LoeoReport {
    /// CSV with columns contrast, held_out_echo, mse_gauss, mse_ncchi,
    /// diff, nonconverged. Summary rows use `all` as echo marker.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("contrast,held_out_echo,mse_gauss,mse_ncchi,diff,nonconverged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e},{:.17e},{}\n",
                r.contrast, r.held_out_echo, r.mse_gauss, r.mse_ncchi, r.diff, r.nonconverged
            ));
        }
        for s in &self.summary {
            out.push_str(&format!(
                "{},all,{:.17e},{:.17e},{:.17e},\n",
                s.contrast, s.mse_gauss, s.mse_ncchi, s.diff
            ));
        }
        out
    }
}

/// Fit both families on the problem without the volumes listed in `held_out`.
pub(crate) fn fold_fit(
    problem: &FitProblem,
    held_out: &[usize],
    opts: &SolverSettings,
) -> Result<(ParameterMaps, ParameterMaps)> {
    let keep: Vec<usize> = (0..problem.volumes.len())
        .filter(|i| !held_out.contains(i))
        .collect();
    let sub = FitProblem {
        volumes: keep.iter().map(|&i| problem.volumes[i]).collect(),
        settings: keep.iter().map(|&i| problem.settings[i]).collect(),
        noise: keep.iter().map(|&i| problem.noise[i]).collect(),
        likelihood: Family::Gaussian,
        mask: problem.mask,
    };
    let gauss_opts = SolverSettings {
        likelihood: Family::Gaussian,
        ..opts.clone()
    };
    let maps_gauss = fit_maps(&sub, &gauss_opts)?;
    let sub_nc = FitProblem {
        likelihood: Family::NcChi,
        ..sub
    };
    let nc_opts = SolverSettings {
        likelihood: Family::NcChi,
        ..opts.clone()
    };
    let maps_nc = fit_maps(&sub_nc, &nc_opts)?;
    Ok((maps_gauss, maps_nc))
}

fn masked_mse(pred: &EchoVolume, observed: &EchoVolume, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for v in 0..mask.len() {
        if mask[v] {
            let d = pred.data[v] as f64 - observed.data[v] as f64;
            s += d * d;
            n += 1.0;
        }
    }
    if n > 0.0 {
        s / n
    } else {
        0.0
    }
}

/// Run the leave-one-echo-out harness over all folds.
///
/// Every run must have at least 3 echoes. Fold k holds out the k-th echo
/// of each run that has one; results are keyed by (contrast, echo index)
/// and averaged per contrast.
pub fn loeo(problem: &FitProblem, opts: &SolverSettings) -> Result<LoeoReport> {
    problem.validate()?;
    let runs = group_runs(&problem.settings);
    let labels = contrast_labels(&problem.settings, &runs);
    let min_echoes = runs.iter().map(|g| g.len()).min().unwrap_or(0);
    if min_echoes < 3 {
        return Err(Error::invalid(format!(
            "every run needs at least 3 echoes for cross-validation, minimum is {min_echoes}"
        )));
    }
    let max_echoes = runs.iter().map(|g| g.len()).max().unwrap_or(0);
    let mut rows = Vec::new();
    for k in 0..max_echoes {
        let held_out: Vec<usize> = runs
            .iter()
            .filter_map(|g| g.get(k).copied())
            .collect();
        if held_out.is_empty() {
            continue;
        }
        let (maps_gauss, maps_nc) = fold_fit(problem, &held_out, opts)?;
        let nonconverged = maps_gauss.nonconverged_count() + maps_nc.nonconverged_count();
        for (run_idx, g) in runs.iter().enumerate() {
            let Some(&vol_idx) = g.get(k) else { continue };
            let s = &problem.settings[vol_idx];
            let noise = &problem.noise[vol_idx];
            let observed = problem.volumes[vol_idx];
            let pred_g = predict_echo(&maps_gauss, problem.mask, s, noise, Family::Gaussian)?;
            let pred_n = predict_echo(&maps_nc, problem.mask, s, noise, Family::NcChi)?;
            let mse_gauss = masked_mse(&pred_g, observed, problem.mask);
            let mse_ncchi = masked_mse(&pred_n, observed, problem.mask);
            rows.push(LoeoRow {
                contrast: labels[run_idx].clone(),
                held_out_echo: k,
                mse_gauss,
                mse_ncchi,
                diff: mse_ncchi - mse_gauss,
                nonconverged,
            });
        }
    }
    // Average per contrast over echoes, in first-appearance order.
    let mut summary: Vec<LoeoSummary> = Vec::new();
    for label in &labels {
        if summary.iter().any(|s| &s.contrast == label) {
            continue;
        }
        let members: Vec<&LoeoRow> = rows.iter().filter(|r| &r.contrast == label).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mg = members.iter().map(|r| r.mse_gauss).sum::<f64>() / n;
        let mn = members.iter().map(|r| r.mse_ncchi).sum::<f64>() / n;
        summary.push(LoeoSummary {
            contrast: label.clone(),
            mse_gauss: mg,
            mse_ncchi: mn,
            diff: mn - mg,
        });
    }
    Ok(LoeoReport { rows, summary })
}
