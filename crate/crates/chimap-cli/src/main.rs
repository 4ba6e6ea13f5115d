//! Command-line front-end for chi-noise quantitative map estimation.
//!
//! Subcommands: `noise-estimate`, `fit`, `predict`, `xval`, `synth`.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.

mod commands;
mod logging;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "chimap",
    version,
    about = "Quantitative MRI parameter maps under a noncentral-chi noise model"
)]
struct Cli {
    /// Worker threads (default: all cores, or the CHIMAP_THREADS variable).
    /// Results do not depend on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Emit line-delimited JSON logs on standard error.
    #[arg(long, global = true)]
    log_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate background noise (nu, sigma2) from magnitude volumes by
    /// fitting a two-component chi mixture.
    NoiseEstimate {
        /// Input volumes (.nii / .nii.gz), pooled into one sample.
        #[arg(required = true)]
        vols: Vec<PathBuf>,
        /// Output noise report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Initial degrees of freedom (2x assumed coil channels; default 2).
        #[arg(long)]
        init_nu: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Fit PD / R1 / R2* / MTsat maps from co-registered volumes.
    Fit {
        /// Input volumes; sidecars default to the co-named .json files.
        #[arg(required = true)]
        vols: Vec<PathBuf>,
        /// Noise likelihood family.
        #[arg(long, value_parser = ["gauss", "ncchi"])]
        likelihood: Option<String>,
        /// Noise report(s): one for all volumes, or one per acquisition run.
        #[arg(long, value_delimiter = ',', required = true)]
        noise: Vec<PathBuf>,
        /// Acquisition sidecars, one per volume (defaults to co-named files).
        #[arg(long, value_delimiter = ',')]
        sidecars: Vec<PathBuf>,
        /// Head mask volume (nonzero = fit); default: voxels positive in
        /// every input volume.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output directory for map volumes and metadata.
        #[arg(long)]
        out: PathBuf,
        /// Solver settings JSON (flags override file values).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Membrane regularization weights: R1,R2*,PD,MTsat.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        reg: Option<Vec<f64>>,
    },
    /// Predict one echo volume from fitted maps.
    Predict {
        /// Directory holding pd/r1/r2s/mtsat.nii (and mask.nii).
        #[arg(long)]
        maps: PathBuf,
        /// Acquisition sidecar of the echo to predict.
        #[arg(long)]
        sidecar: PathBuf,
        /// Expected-signal rule.
        #[arg(long, value_parser = ["gauss", "ncchi"])]
        family: String,
        /// Noise report; required for the ncchi family.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Mask override (default: mask.nii in the maps directory).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-echo-out cross-validation of ncchi vs gaussian.
    Xval {
        /// Harness configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Report path (.csv, or .json for the structured report).
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a phantom acquisition.
    Synth {
        /// Simulation spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors mapped to process exit codes.
pub enum CliError {
    Usage(String),
    Data(String),
    NonConvergence(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NonConvergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::NonConvergence(m) => m,
        }
    }
}

impl From<chimap::Error> for CliError {
    fn from(e: chimap::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn setup_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var("CHIMAP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(n) = n {
        if n > 1 {
            log::info!("built without the parallel feature; --threads {n} ignored");
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    logging::install(cli.log_json);
    setup_threads(cli.threads);
    let result = match cli.command {
        Command::NoiseEstimate {
            vols,
            out,
            init_nu,
            max_iters,
            tol,
        } => commands::noise_estimate(&vols, &out, init_nu, max_iters, tol),
        Command::Fit {
            vols,
            likelihood,
            noise,
            sidecars,
            mask,
            out,
            config,
            max_iters,
            tol,
            reg,
        } => commands::fit(commands::FitArgs {
            vols,
            likelihood,
            noise,
            sidecars,
            mask,
            out,
            config,
            max_iters,
            tol,
            reg,
        }),
        Command::Predict {
            maps,
            sidecar,
            family,
            noise,
            mask,
            out,
        } => commands::predict(&maps, &sidecar, &family, noise.as_deref(), mask.as_deref(), &out),
        Command::Xval { config, out } => commands::xval(&config, &out),
        Command::Synth { spec, out } => commands::synth(&spec, &out),
    };
    if let Err(e) = result {
        log::error!("{}", e.message());
        std::process::exit(e.code());
    }
}
