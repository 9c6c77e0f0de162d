//! Run configuration: built-in defaults, overridden by a flat TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use esgvi::engine::ExpectationMode;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Map,
    Linearized,
    Sigmapoint,
}

impl Mode {
    pub fn expectation(self) -> ExpectationMode {
        match self {
            Mode::Map => ExpectationMode::MapAtMean,
            Mode::Linearized => ExpectationMode::Linearized,
            Mode::Sigmapoint => ExpectationMode::sigmapoint(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Learn {
    Qc,
    W,
    Wgt,
    Iw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Iw,
    Static,
}

/// Every configuration key. Flags and file keys share names (dashes on the
/// command line, underscores in the file).
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Flat TOML configuration file.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Position noise injected into measurements (m).
    #[arg(long, value_name = "F")]
    pub sigma: Option<f64>,
    #[arg(long, value_name = "F")]
    pub outlier_rate: Option<f64>,
    #[arg(long, value_name = "F")]
    pub outlier_mag: Option<f64>,
    #[arg(long, value_name = "F")]
    pub nu: Option<f64>,
    #[arg(long, value_name = "F")]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Parameters to learn; repeat the flag for several.
    #[arg(long, value_enum)]
    pub learn: Option<Vec<Learn>>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Measurement CSV, or g2o file for `posegraph`.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Groundtruth CSV, or g2o file of true vertices for `posegraph`.
    #[arg(long, value_name = "PATH")]
    pub groundtruth: Option<PathBuf>,
    /// Learned-parameter file.
    #[arg(long, value_name = "PATH")]
    pub params: Option<PathBuf>,
    /// Measurement weighting when not implied by `--learn`.
    #[arg(long, value_enum)]
    pub noise: Option<Noise>,
    #[arg(long, value_name = "N")]
    pub knots: Option<usize>,
    #[arg(long, value_name = "F")]
    pub dt: Option<f64>,
    /// Diagonal of the motion-prior power spectral density for `simulate`.
    #[arg(long, value_name = "F,...", value_delimiter = ',', num_args = 6)]
    pub qc: Option<Vec<f64>>,
    /// Diagonal of the measurement covariance for `simulate`.
    #[arg(long, value_name = "F,...", value_delimiter = ',', num_args = 6)]
    pub w: Option<Vec<f64>>,
    /// Groundtruth pose factor on every Nth knot when learning `wgt`.
    #[arg(long, value_name = "N")]
    pub gt_every: Option<usize>,
    #[arg(long, value_name = "N")]
    pub rounds: Option<usize>,
    #[arg(long, value_name = "F")]
    pub tol: Option<f64>,
    /// Gauss-Newton iterations per E-step.
    #[arg(long, value_name = "N")]
    pub max_iters: Option<usize>,
    /// Align the first estimated pose to groundtruth before scoring.
    #[arg(long)]
    pub align: Option<bool>,
    /// `simulate` writes a pose graph with false loop closures instead of a trajectory.
    #[arg(long)]
    pub posegraph: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub sigma: f64,
    pub outlier_rate: f64,
    pub outlier_mag: f64,
    pub nu: f64,
    pub beta: f64,
    pub mode: Mode,
    pub learn: Vec<Learn>,
    pub out: PathBuf,
    pub input: Option<PathBuf>,
    pub groundtruth: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub noise: Noise,
    pub knots: usize,
    pub dt: f64,
    pub qc: [f64; 6],
    pub w: [f64; 6],
    pub gt_every: usize,
    pub rounds: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub align: bool,
    pub posegraph: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = 1.0 / 169.0;
        Self {
            seed: 0,
            sigma: 0.0,
            outlier_rate: 0.0,
            outlier_mag: 200.0,
            nu: 6.0,
            beta: 1.0,
            mode: Mode::Linearized,
            learn: Vec::new(),
            out: PathBuf::from("out"),
            input: None,
            groundtruth: None,
            params: None,
            noise: Noise::Iw,
            knots: 2000,
            dt: 0.1,
            qc: [1.0, 0.5, 0.2, 0.005, 0.002, 0.01],
            w: [1.0, 1.0, 1.0, r, r, r],
            gt_every: 1,
            rounds: 40,
            tol: 1e-6,
            max_iters: 50,
            align: false,
            posegraph: false,
        }
    }
}

fn diagonal(v: Vec<f64>, key: &str) -> Result<[f64; 6], String> {
    v.try_into()
        .map_err(|v: Vec<f64>| format!("{key} needs 6 values, found {}", v.len()))
}

impl RunConfig {
    fn apply(&mut self, o: Overrides) -> Result<(), String> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field { self.$field = v; })*
            };
        }
        take!(seed, sigma, outlier_rate, outlier_mag, nu, beta, mode, learn, out, noise, knots, dt, gt_every, rounds, tol, max_iters, align, posegraph);
        if o.input.is_some() {
            self.input = o.input;
        }
        if o.groundtruth.is_some() {
            self.groundtruth = o.groundtruth;
        }
        if o.params.is_some() {
            self.params = o.params;
        }
        if let Some(v) = o.qc {
            self.qc = diagonal(v, "qc")?;
        }
        if let Some(v) = o.w {
            self.w = diagonal(v, "w")?;
        }
        Ok(())
    }

    /// Defaults, then the file named by `--config`, then the flags.
    pub fn resolve(flags: Overrides) -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            cfg.apply(read_file(path)?)?;
        }
        cfg.apply(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.learns(Learn::Iw) && self.learns(Learn::W) {
            return Err("--learn iw and --learn w are mutually exclusive: measurements use either IW or static weighting".into());
        }
        if !(self.sigma >= 0.0) {
            return Err(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(format!("outlier-rate must lie in [0, 1], got {}", self.outlier_rate));
        }
        if !(self.outlier_mag >= 0.0) {
            return Err(format!("outlier-mag must be non-negative, got {}", self.outlier_mag));
        }
        if !(self.nu > 5.0) || !(self.beta > 0.0) {
            return Err(format!("need nu > 5 and beta > 0, got nu={} beta={}", self.nu, self.beta));
        }
        if self.knots < 2 || !(self.dt > 0.0) {
            return Err("need knots >= 2 and dt > 0".into());
        }
        if self.qc.iter().chain(&self.w).any(|v| !(*v >= 0.0)) {
            return Err("qc and w diagonals must be non-negative".into());
        }
        Ok(())
    }

    pub fn learns(&self, l: Learn) -> bool {
        self.learn.contains(&l)
    }

    /// What `train` learns: the `--learn` list, or `qc` and `iw` when it is empty.
    pub fn training_set(&self) -> Vec<Learn> {
        if self.learn.is_empty() {
            vec![Learn::Qc, Learn::Iw]
        } else {
            self.learn.clone()
        }
    }

    /// Measurements are IW-weighted when `iw` is learned, or when `w` is not
    /// learned and `noise = iw`.
    pub fn use_iw(&self) -> bool {
        self.learns(Learn::Iw) || (!self.learns(Learn::W) && self.noise == Noise::Iw)
    }
}

fn read_file(path: &Path) -> Result<Overrides, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
}
