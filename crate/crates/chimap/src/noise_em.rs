//! Background noise estimation by EM fitting of a two-component chi mixture.
//!
//! One component captures the air outside the head, the other the tissue
//! intensities; assuming stationary noise, the air component gives a single
//! (nu, sigma^2) estimate for the acquisition. Mixing proportions update in
//! closed form; sigma and nu have no closed form and are updated by an
//! inner alternation of the exact sigma formula and damped Newton steps on
//! nu (gradient via digamma, curvature via trigamma).
//!
//! All reductions use the fixed-block scheme from [`crate::par`], so results
//! are reproducible run to run and across thread counts.

use crate::dist::{Family, NoiseModel};
use crate::error::{Error, Result};
use crate::par;
use crate::special::{digamma, ln_gamma, trigamma};
use serde::{Deserialize, Serialize};

const LN_2: f64 = std::f64::consts::LN_2;

/// One chi mixture component.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Component {
    pub nu: f64,
    pub sigma: f64,
    pub pi: f64,
}

/// EM state: per-component (nu, sigma, pi) with `sum(pi) = 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureState {
    pub components: Vec<Component>,
}

impl MixtureState {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture must have at least one component"));
        }
        let mut pi_sum = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.nu > 0.0 && c.sigma > 0.0) {
                return Err(Error::invalid(format!(
                    "component {k}: nu and sigma must be positive"
                )));
            }
            if !(c.pi > 0.0 && c.pi < 1.0 + 1e-12) {
                return Err(Error::DegenerateComponent { index: k, pi: c.pi });
            }
            pi_sum += c.pi;
        }
        if (pi_sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixing proportions sum to {pi_sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Posterior responsibilities, stored sample-major: `r[n * k_count + k]`.
#[derive(Clone, Debug)]
pub struct Responsibilities {
    pub k_count: usize,
    pub n_count: usize,
    pub data: Vec<f64>,
}

impl Responsibilities {
    #[inline]
    pub fn get(&self, k: usize, n: usize) -> f64 {
        self.data[n * self.k_count + k]
    }
}

/// EM settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Outer EM iteration cap.
    pub max_iters: usize,
    /// Stop when the log-likelihood improves by less than `tol * N`.
    pub tol: f64,
    /// Cap for the inner sigma/nu alternation within each M-step.
    pub inner_iters: usize,
    /// Initial degrees of freedom (twice the assumed coil-channel count;
    /// 2 when unknown).
    pub init_nu: f64,
    /// Volumes larger than this are subsampled with a deterministic stride.
    pub subsample_limit: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 500,
            tol: 1e-9,
            inner_iters: 50,
            init_nu: 2.0,
            subsample_limit: 2_000_000,
        }
    }
}

/// Precomputed per-sample quantities shared by the E- and M-steps.
#[derive(Clone, Copy)]
struct Sample {
    x2: f64,
    lnx: f64,
}

fn prepare(x: &[f64]) -> Vec<Sample> {
    let mut out = vec![Sample { x2: 0.0, lnx: 0.0 }; x.len()];
    par::for_each_zip(x, &mut out, |&v, s| {
        *s = Sample {
            x2: v * v,
            lnx: v.ln(),
        };
    });
    out
}

/// Per-component constants of the chi log-pdf:
/// `ln pi + (1 - nu/2) ln 2 - nu ln sigma - ln Gamma(nu/2)`, plus the
/// coefficients of `ln x` and `x^2`.
struct CompCoef {
    base: f64,
    lnx_coef: f64,
    x2_coef: f64,
}

fn coefficients(state: &MixtureState) -> Vec<CompCoef> {
    state
        .components
        .iter()
        .map(|c| CompCoef {
            base: c.pi.ln() + (1.0 - 0.5 * c.nu) * LN_2
                - c.nu * c.sigma.ln()
                - ln_gamma(0.5 * c.nu),
            lnx_coef: c.nu - 1.0,
            x2_coef: -0.5 / (c.sigma * c.sigma),
        })
        .collect()
}

fn e_step_inner(samples: &[Sample], state: &MixtureState) -> (Responsibilities, f64) {
    let k_count = state.components.len();
    let coef = coefficients(state);
    let mut r = Responsibilities {
        k_count,
        n_count: samples.len(),
        data: vec![0.0; samples.len() * k_count],
    };
    let partials = par::map_zip_blocks_mut(samples, &mut r.data, k_count, |sb, rb| {
        let mut ll = 0.0f64;
        let mut logp = vec![0.0f64; k_count];
        for (i, s) in sb.iter().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for (k, c) in coef.iter().enumerate() {
                let lp = c.base + c.lnx_coef * s.lnx + c.x2_coef * s.x2;
                logp[k] = lp;
                if lp > m {
                    m = lp;
                }
            }
            let mut sum = 0.0;
            for lp in logp.iter() {
                sum += (lp - m).exp();
            }
            let lse = m + sum.ln();
            ll += lse;
            for (k, lp) in logp.iter().enumerate() {
                rb[i * k_count + k] = (lp - lse).exp();
            }
        }
        ll
    });
    let loglik = partials.into_iter().fold(0.0, |a, b| a + b);
    (r, loglik)
}

/// E-step: responsibilities (in log space with max subtraction) plus the
/// observed-data log-likelihood of `state`.
pub fn e_step(x: &[f64], state: &MixtureState) -> Result<(Responsibilities, f64)> {
    state.validate()?;
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(
            "e_step requires strictly positive samples (exclude zeros upstream)",
        ));
    }
    let samples = prepare(x);
    Ok(e_step_inner(&samples, state))
}

/// Sufficient statistics per component: sum r, sum r ln x, sum r x^2.
#[derive(Clone, Copy, Debug, Default)]
struct SuffStats {
    r: f64,
    r_lnx: f64,
    r_x2: f64,
}

fn sufficient_stats(samples: &[Sample], r: &Responsibilities) -> Vec<SuffStats> {
    let k_count = r.k_count;
    let partials = par::map_zip_blocks(samples, &r.data, k_count, |sb, rb| {
        let mut acc = vec![SuffStats::default(); k_count];
        for (i, s) in sb.iter().enumerate() {
            for (k, a) in acc.iter_mut().enumerate() {
                let w = rb[i * k_count + k];
                a.r += w;
                a.r_lnx += w * s.lnx;
                a.r_x2 += w * s.x2;
            }
        }
        acc
    });
    partials.into_iter().fold(
        vec![SuffStats::default(); k_count],
        |mut acc, p| {
            for (a, q) in acc.iter_mut().zip(p) {
                a.r += q.r;
                a.r_lnx += q.r_lnx;
                a.r_x2 += q.r_x2;
            }
            acc
        },
    )
}

/// Expected complete-data log-likelihood of one component (up to the
/// entropy term, which is constant during the M-step).
fn component_ell(stats: &SuffStats, nu: f64, sigma: f64) -> f64 {
    (1.0 - 0.5 * nu) * LN_2 * stats.r + (nu - 1.0) * stats.r_lnx
        - stats.r_x2 / (2.0 * sigma * sigma)
        - nu * sigma.ln() * stats.r
        - ln_gamma(0.5 * nu) * stats.r
}

/// Ascent gradient of the expected log-likelihood w.r.t. nu.
fn nu_gradient(stats: &SuffStats, nu: f64, sigma: f64) -> f64 {
    stats.r_lnx - (0.5 * LN_2 + sigma.ln() + 0.5 * digamma(0.5 * nu).unwrap()) * stats.r
}

const NU_MIN: f64 = 0.5;
const NU_MAX: f64 = 4096.0;

/// Alternate the exact sigma update and safeguarded Newton steps on nu
/// until the inner tolerances are met.
fn update_component(stats: &SuffStats, mut nu: f64, inner_iters: usize) -> Result<(f64, f64)> {
    let mut sigma = (stats.r_x2 / (nu * stats.r)).sqrt();
    for _ in 0..inner_iters {
        let nu_prev = nu;
        let sigma_prev = sigma;
        sigma = (stats.r_x2 / (nu * stats.r)).sqrt();
        let grad = nu_gradient(stats, nu, sigma);
        let curv = 0.25 * trigamma(0.5 * nu)? * stats.r;
        if !(curv > 0.0) {
            return Err(Error::Internal(format!(
                "nonpositive curvature {curv} in nu update (trigamma must be positive)"
            )));
        }
        let mut step = grad / curv;
        // Keep nu positive, then backtrack until the expected complete-data
        // log-likelihood does not decrease.
        while nu + step <= 0.0 {
            step *= 0.5;
        }
        let ell0 = component_ell(stats, nu, sigma);
        let mut halvings = 0;
        while component_ell(stats, nu + step, sigma) < ell0 - 1e-12 * ell0.abs() {
            step *= 0.5;
            halvings += 1;
            if halvings > 30 {
                step = 0.0;
                break;
            }
        }
        nu = (nu + step).clamp(NU_MIN, NU_MAX);
        if (nu - nu_prev).abs() < 1e-6 && ((sigma - sigma_prev) / sigma_prev).abs() < 1e-8 {
            break;
        }
    }
    sigma = (stats.r_x2 / (nu * stats.r)).sqrt();
    Ok((nu, sigma))
}

/// M-step: closed-form mixing proportions, then the inner sigma/nu
/// alternation per component. Responsibilities stay fixed.
pub fn m_step(
    x: &[f64],
    r: &Responsibilities,
    state: &MixtureState,
    inner_iters: usize,
) -> Result<MixtureState> {
    if x.len() != r.n_count || state.components.len() != r.k_count {
        return Err(Error::invalid("m_step: shape mismatch"));
    }
    let samples = prepare(x);
    m_step_inner(&samples, r, state, inner_iters)
}

fn m_step_inner(
    samples: &[Sample],
    r: &Responsibilities,
    state: &MixtureState,
    inner_iters: usize,
) -> Result<MixtureState> {
    let stats = sufficient_stats(samples, r);
    let total: f64 = stats.iter().map(|s| s.r).sum();
    let mut components = Vec::with_capacity(stats.len());
    for (k, (st, c)) in stats.iter().zip(&state.components).enumerate() {
        if !(st.r > 1e-10 * total) {
            return Err(Error::DegenerateComponent {
                index: k,
                pi: st.r / total,
            });
        }
        let (nu, sigma) = update_component(st, c.nu, inner_iters)?;
        components.push(Component {
            nu,
            sigma,
            pi: st.r / total,
        });
    }
    Ok(MixtureState { components })
}

/// Result of a noise fit.
#[derive(Clone, Debug)]
pub struct NoiseFit {
    pub mixture: MixtureState,
    /// Index of the air component (smallest second moment nu * sigma^2).
    pub background_index: usize,
    /// The background noise model, tagged as the chi family.
    pub background: NoiseModel,
    /// Observed-data log-likelihood at the start of each outer iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Serializable noise report (the on-disk JSON interface).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseReport {
    pub components: Vec<ReportComponent>,
    pub background_index: usize,
    pub background: NoiseModel,
    pub loglik_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReportComponent {
    pub nu: f64,
    pub sigma2: f64,
    pub pi: f64,
}

impl NoiseFit {
    pub fn to_report(&self) -> NoiseReport {
        NoiseReport {
            components: self
                .mixture
                .components
                .iter()
                .map(|c| ReportComponent {
                    nu: c.nu,
                    sigma2: c.sigma * c.sigma,
                    pi: c.pi,
                })
                .collect(),
            background_index: self.background_index,
            background: self.background,
            loglik_history: self.history.clone(),
            converged: self.converged,
        }
    }
}

/// Otsu's threshold on a 256-bin histogram; used only for initialisation.
fn otsu_threshold(x: &[f64]) -> f64 {
    const BINS: usize = 256;
    let max = x.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut counts = [0usize; BINS];
    for &v in x {
        let b = ((v / max) * BINS as f64) as usize;
        counts[b.min(BINS - 1)] += 1;
    }
    let total = x.len() as f64;
    let bin_mid = |b: usize| (b as f64 + 0.5) * max / BINS as f64;
    let global_mean: f64 = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| c as f64 * bin_mid(b))
        .sum::<f64>()
        / total;
    let mut best_var = -1.0;
    let mut best_thresh = max * 0.5;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for b in 0..BINS - 1 {
        w0 += counts[b] as f64 / total;
        sum0 += counts[b] as f64 * bin_mid(b) / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (global_mean - sum0) / (1.0 - w0);
        let between = w0 * (1.0 - w0) * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best_thresh = bin_mid(b) + 0.5 * max / BINS as f64;
        }
    }
    best_thresh
}

/// Initial mixture from an Otsu split with per-class method-of-moments
/// sigma at the configured initial nu.
///
/// An Otsu split of a single chi population separates the per-class second
/// moments by at most ~9x (the nu = 1 worst case); air versus tissue is
/// two orders of magnitude. Below 16x the data is treated as effectively
/// single-population: a hard split there strands EM in a nearly flat
/// valley, so both components start from the global moments with a small
/// deterministic jitter (bimodal data can still peel apart).
fn initialize(x: &[f64], init_nu: f64) -> MixtureState {
    let thresh = otsu_threshold(x);
    let mut n_low = 0usize;
    let mut m2_low = 0.0;
    let mut n_high = 0usize;
    let mut m2_high = 0.0;
    for &v in x {
        if v <= thresh {
            n_low += 1;
            m2_low += v * v;
        } else {
            n_high += 1;
            m2_high += v * v;
        }
    }
    let n = x.len() as f64;
    let well_separated = n_low > 0
        && n_high > 0
        && (m2_high / n_high as f64) >= 16.0 * (m2_low / n_low.max(1) as f64)
        && n_low.min(n_high) as f64 >= 0.005 * n;
    if !well_separated {
        let m2 = x.iter().map(|v| v * v).sum::<f64>() / n;
        let sigma = (m2 / init_nu).sqrt().max(1e-12);
        return MixtureState {
            components: vec![
                Component {
                    nu: init_nu,
                    sigma: sigma * 0.98,
                    pi: 0.5,
                },
                Component {
                    nu: init_nu,
                    sigma: sigma * 1.02,
                    pi: 0.5,
                },
            ],
        };
    }
    let comp = |count: usize, m2: f64| Component {
        nu: init_nu,
        sigma: (m2 / count as f64 / init_nu).sqrt().max(1e-12),
        pi: (count as f64 / n).clamp(1e-3, 1.0 - 1e-3),
    };
    let mut c0 = comp(n_low, m2_low);
    let mut c1 = comp(n_high, m2_high);
    let norm = c0.pi + c1.pi;
    c0.pi /= norm;
    c1.pi /= norm;
    MixtureState {
        components: vec![c0, c1],
    }
}

/// Fit a two-component chi mixture to positive intensities and pick the
/// background (air) component.
///
/// Nonpositive samples are excluded up front; volumes above the subsample
/// limit are thinned with a deterministic stride. Returns the final state,
/// the per-iteration log-likelihood history, and a convergence flag (the
/// best state so far is returned even without convergence).
pub fn fit_noise(x: &[f64], config: &EmConfig) -> Result<NoiseFit> {
    let mut data: Vec<f64> = x.iter().copied().filter(|&v| v > 0.0 && v.is_finite()).collect();
    if data.is_empty() {
        return Err(Error::invalid(
            "noise fit requires at least one positive intensity sample",
        ));
    }
    if data.len() > config.subsample_limit {
        let stride = data.len().div_ceil(config.subsample_limit);
        data = data.iter().copied().step_by(stride).collect();
    }
    let n = data.len() as f64;
    let samples = prepare(&data);
    let mut state = initialize(&data, config.init_nu);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        state.validate()?;
        let (r, ll) = e_step_inner(&samples, &state);
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() < config.tol * n {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        state = m_step_inner(&samples, &r, &state, config.inner_iters)?;
    }
    let background_index = state
        .components
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let ma = a.nu * a.sigma * a.sigma;
            let mb = b.nu * b.sigma * b.sigma;
            ma.partial_cmp(&mb).unwrap()
        })
        .map(|(k, _)| k)
        .unwrap();
    let bg = &state.components[background_index];
    let background = NoiseModel::new(Family::Chi, bg.nu, bg.sigma * bg.sigma)?;
    Ok(NoiseFit {
        mixture: state,
        background_index,
        background,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_chi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chi_model(nu: f64, sigma: f64) -> NoiseModel {
        NoiseModel::new(Family::Chi, nu, sigma * sigma).unwrap()
    }

    fn draw_chi(nu: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
        let m = chi_model(nu, sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sample_chi(&m, &mut rng)).collect()
    }

    #[test]
    fn e_step_single_component_gives_unit_responsibilities() {
        let state = MixtureState {
            components: vec![Component {
                nu: 2.0,
                sigma: 1.0,
                pi: 1.0,
            }],
        };
        let x = vec![0.5, 1.0, 2.0];
        let (r, _) = e_step(&x, &state).unwrap();
        for n in 0..3 {
            assert_eq!(r.get(0, n), 1.0);
        }
    }

    #[test]
    fn e_step_identical_components_return_mixing_proportions() {
        let state = MixtureState {
            components: vec![
                Component {
                    nu: 3.0,
                    sigma: 2.0,
                    pi: 0.3,
                },
                Component {
                    nu: 3.0,
                    sigma: 2.0,
                    pi: 0.7,
                },
            ],
        };
        let x = vec![0.5, 1.0, 2.0, 5.0];
        let (r, _) = e_step(&x, &state).unwrap();
        for n in 0..4 {
            assert!((r.get(0, n) - 0.3).abs() < 1e-12);
            assert!((r.get(1, n) - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn e_step_separated_components_classify_low_intensities() {
        // 50/50 chi(2, 1) vs chi(2, 20): below x = 3 the posterior of the
        // low-sigma component should behave like a class indicator.
        let state = MixtureState {
            components: vec![
                Component {
                    nu: 2.0,
                    sigma: 1.0,
                    pi: 0.5,
                },
                Component {
                    nu: 2.0,
                    sigma: 20.0,
                    pi: 0.5,
                },
            ],
        };
        let x = vec![0.2, 0.5, 0.8, 1.1, 1.5, 1.9, 2.2, 2.5, 2.8, 2.95];
        let (r, _) = e_step(&x, &state).unwrap();
        // Hand Bayes rule on the same points.
        for (n, &xi) in x.iter().enumerate() {
            let p_low = xi / 1.0 * (-xi * xi / 2.0).exp();
            let p_high = xi / 400.0 * (-xi * xi / 800.0).exp();
            let hand = 0.5 * p_low / (0.5 * p_low + 0.5 * p_high);
            assert!((r.get(0, n) - hand).abs() < 1e-10, "n={n}");
            assert!(r.get(0, n) > 0.5, "x={xi}: r_low = {}", r.get(0, n));
        }
        // On a large labelled sample below x = 3 the posterior agrees with
        // the hand Bayes rule everywhere, and thresholding it at 0.5
        // recovers the true label at (essentially) the Bayes-optimal rate.
        let m_low = chi_model(2.0, 1.0);
        let m_high = chi_model(2.0, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut labeled = Vec::new();
        for i in 0..20_000 {
            let low = i % 2 == 0;
            let v = sample_chi(if low { &m_low } else { &m_high }, &mut rng);
            if v > 0.0 && v < 3.0 {
                labeled.push((v, low));
            }
        }
        let xs: Vec<f64> = labeled.iter().map(|(v, _)| *v).collect();
        let (r, _) = e_step(&xs, &state).unwrap();
        let mut agree_truth = 0usize;
        for (n, &(xi, low)) in labeled.iter().enumerate() {
            let p_low = xi * (-xi * xi / 2.0).exp();
            let p_high = xi / 400.0 * (-xi * xi / 800.0).exp();
            let bayes = p_low / (p_low + p_high);
            assert!((r.get(0, n) - bayes).abs() < 1e-10);
            if (r.get(0, n) > 0.5) == low {
                agree_truth += 1;
            }
        }
        // Bayes-optimal agreement here is ~98.9% (high-sigma contamination
        // below x = 3 is ~1.1% of the region).
        let frac = agree_truth as f64 / labeled.len() as f64;
        assert!(frac > 0.98, "classification agreement {frac}");
    }

    #[test]
    fn e_step_flags_degenerate_component() {
        let state = MixtureState {
            components: vec![
                Component {
                    nu: 2.0,
                    sigma: 1.0,
                    pi: 1.0,
                },
                Component {
                    nu: 2.0,
                    sigma: 2.0,
                    pi: 0.0,
                },
            ],
        };
        assert!(matches!(
            e_step(&[1.0], &state),
            Err(Error::DegenerateComponent { index: 1, .. })
        ));
    }

    #[test]
    fn m_step_pi_update_is_responsibility_fraction() {
        // r sums 30 / 70 across 100 samples -> pi = (0.3, 0.7).
        let n = 100;
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let r0 = if i < 30 { 1.0 } else { 0.0 };
            data.push(r0);
            data.push(1.0 - r0);
        }
        let r = Responsibilities {
            k_count: 2,
            n_count: n,
            data,
        };
        let x: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.01).collect();
        let state = MixtureState {
            components: vec![
                Component {
                    nu: 2.0,
                    sigma: 0.5,
                    pi: 0.5,
                },
                Component {
                    nu: 2.0,
                    sigma: 1.0,
                    pi: 0.5,
                },
            ],
        };
        let new = m_step(&x, &r, &state, 50).unwrap();
        assert!((new.components[0].pi - 0.3).abs() < 1e-12);
        assert!((new.components[1].pi - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sigma_update_formula() {
        // All r = 1, nu fixed at 2, x = {1, 2}: sigma^2 = (1 + 4) / (2 * 2).
        let stats = SuffStats {
            r: 2.0,
            r_lnx: 2.0f64.ln(),
            r_x2: 5.0,
        };
        let sigma2 = stats.r_x2 / (2.0 * stats.r);
        assert!((sigma2 - 1.25).abs() < 1e-15);
        // And update_component reproduces it when nu sits at its optimum:
        // choose r_lnx so the nu gradient vanishes at nu = 2.
        let sigma = 1.25f64.sqrt();
        let t = (0.5 * LN_2 + sigma.ln() + 0.5 * digamma(1.0).unwrap()) * stats.r;
        let stats_fixed = SuffStats {
            r_lnx: t,
            ..stats
        };
        let g = nu_gradient(&stats_fixed, 2.0, sigma);
        assert!(g.abs() < 1e-12);
        let (nu, s) = update_component(&stats_fixed, 2.0, 50).unwrap();
        assert!((nu - 2.0).abs() < 1e-9, "nu moved to {nu}");
        assert!((s * s - 1.25).abs() < 1e-12);
    }

    #[test]
    fn nu_step_direction_matches_finite_differences() {
        // Sign of the Newton step equals the sign of the central finite
        // difference of the expected complete-data log-likelihood.
        let cases = [
            (SuffStats { r: 50.0, r_lnx: 10.0, r_x2: 120.0 }, 3.0),
            (SuffStats { r: 20.0, r_lnx: -35.0, r_x2: 15.0 }, 6.0),
            (SuffStats { r: 80.0, r_lnx: 95.0, r_x2: 900.0 }, 1.5),
        ];
        for (stats, nu) in cases {
            let sigma = (stats.r_x2 / (nu * stats.r)).sqrt();
            let g = nu_gradient(&stats, nu, sigma);
            let h = 1e-4;
            let fd = (component_ell(&stats, nu + h, sigma) - component_ell(&stats, nu - h, sigma))
                / (2.0 * h);
            assert_eq!(g.signum(), fd.signum(), "stats {stats:?} nu {nu}");
            assert!((g - fd).abs() < 1e-5 * g.abs().max(1.0));
        }
    }

    #[test]
    fn fit_recovers_two_component_mixture() {
        // 30% chi(20, 5) + 70% chi(20, 60), 2e5 samples.
        let mut x = draw_chi(20.0, 5.0, 60_000, 11);
        x.extend(draw_chi(20.0, 60.0, 140_000, 12));
        let fit = fit_noise(&x, &EmConfig::default()).unwrap();
        let bg = &fit.mixture.components[fit.background_index];
        assert!(
            (bg.sigma - 5.0).abs() / 5.0 < 0.05,
            "background sigma {} (expected 5)",
            bg.sigma
        );
        assert!(
            (bg.nu - 20.0).abs() / 20.0 < 0.15,
            "background nu {} (expected 20)",
            bg.nu
        );
        assert!((fit.background.sigma2 - bg.sigma * bg.sigma).abs() < 1e-12);
        // Monotone history (up to slack).
        let slack = 1e-8 * x.len() as f64;
        for w in fit.history.windows(2) {
            assert!(w[1] >= w[0] - slack, "history decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fit_single_population_rayleigh() {
        let x = draw_chi(2.0, 1.0, 100_000, 21);
        let fit = fit_noise(&x, &EmConfig::default()).unwrap();
        let bg = &fit.mixture.components[fit.background_index];
        assert!(
            (bg.sigma * bg.sigma - 1.0).abs() < 0.05,
            "sigma^2 = {}",
            bg.sigma * bg.sigma
        );
        assert!((bg.nu - 2.0).abs() < 0.3, "nu = {}", bg.nu);
    }

    #[test]
    fn fit_converges_from_high_initial_nu() {
        // init_nu = 128 (a 64-channel head coil) on nu = 20 data.
        let mut x = draw_chi(20.0, 5.0, 60_000, 31);
        x.extend(draw_chi(20.0, 60.0, 140_000, 32));
        let cfg = EmConfig {
            init_nu: 128.0,
            ..Default::default()
        };
        let fit = fit_noise(&x, &cfg).unwrap();
        let bg = &fit.mixture.components[fit.background_index];
        assert!(
            (bg.nu - 20.0).abs() / 20.0 < 0.15,
            "background nu {} from init 128",
            bg.nu
        );
    }

    #[test]
    fn fit_scale_equivariance() {
        let x = {
            let mut v = draw_chi(8.0, 2.0, 50_000, 41);
            v.extend(draw_chi(8.0, 30.0, 50_000, 42));
            v
        };
        let scaled: Vec<f64> = x.iter().map(|&v| 10.0 * v).collect();
        let a = fit_noise(&x, &EmConfig::default()).unwrap();
        let b = fit_noise(&scaled, &EmConfig::default()).unwrap();
        for (ca, cb) in a.mixture.components.iter().zip(&b.mixture.components) {
            assert!(
                ((cb.sigma / ca.sigma) - 10.0).abs() < 1e-4 * 10.0,
                "sigma scaling: {} -> {}",
                ca.sigma,
                cb.sigma
            );
            assert!((cb.nu - ca.nu).abs() < 1e-4 * ca.nu, "nu changed under scaling");
            assert!((cb.pi - ca.pi).abs() < 1e-6, "pi changed under scaling");
        }
    }

    #[test]
    fn fit_component_order_is_relabeling_only() {
        // Feeding the samples in a different order must yield the same
        // component set (EM statistics are order-independent sums).
        let mut x = draw_chi(4.0, 1.0, 30_000, 51);
        x.extend(draw_chi(4.0, 15.0, 30_000, 52));
        let mut rev = x.clone();
        rev.reverse();
        let a = fit_noise(&x, &EmConfig::default()).unwrap();
        let b = fit_noise(&rev, &EmConfig::default()).unwrap();
        let mut pa: Vec<(f64, f64, f64)> = a
            .mixture
            .components
            .iter()
            .map(|c| (c.sigma, c.nu, c.pi))
            .collect();
        let mut pb: Vec<(f64, f64, f64)> = b
            .mixture
            .components
            .iter()
            .map(|c| (c.sigma, c.nu, c.pi))
            .collect();
        pa.sort_by(|u, v| u.0.partial_cmp(&v.0).unwrap());
        pb.sort_by(|u, v| u.0.partial_cmp(&v.0).unwrap());
        for (u, v) in pa.iter().zip(&pb) {
            assert!((u.0 - v.0).abs() < 1e-6 * u.0.max(1.0));
            assert!((u.1 - v.1).abs() < 1e-6 * u.1);
            assert!((u.2 - v.2).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_rejects_empty_and_zero_input() {
        assert!(fit_noise(&[], &EmConfig::default()).is_err());
        assert!(fit_noise(&[0.0, 0.0], &EmConfig::default()).is_err());
    }

    #[test]
    fn subsampling_is_deterministic() {
        let x = draw_chi(2.0, 1.0, 10_000, 61);
        let cfg = EmConfig {
            subsample_limit: 1000,
            ..Default::default()
        };
        let a = fit_noise(&x, &cfg).unwrap();
        let b = fit_noise(&x, &cfg).unwrap();
        assert_eq!(
            a.mixture.components[0].sigma.to_bits(),
            b.mixture.components[0].sigma.to_bits()
        );
    }
}
