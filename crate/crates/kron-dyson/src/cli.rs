//! Command-line front end. Flags override values from `--config`, which override
//! built-in defaults; every command writes its artifacts and a `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::algebra::{self, c64, CMat};
use crate::clt::{self, TestFunction, Window};
use crate::ensemble::{self, to_entries, Ensemble, Pattern};
use crate::error::{Error, Result};
use crate::mde::{self, ContinuationOptions, MdeOptions};
use crate::sampler::{self, EtaRule};
use crate::stability::{self, Variant};

pub const THREADS_ENV: &str = "KRON_DYSON_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kron-dyson", version, about = "Matrix Dyson equation and mesoscopic CLT experiments for Kronecker random matrices")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; the KRON_DYSON_THREADS variable takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct EnsembleArg {
    /// Ensemble file (JSON).
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an ensemble file.
    Validate { path: PathBuf },
    /// Primitivity exponent and flatness constant estimate.
    Flatness {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Density of states on a uniform grid.
    Dos {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Solve the Dyson equation at one spectral parameter.
    MdeProbe {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long, allow_hyphen_values = true)]
        re: Option<f64>,
        #[arg(long)]
        im: Option<f64>,
    },
    /// Stability identities at a bulk energy.
    StabilityProbe {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long, allow_hyphen_values = true)]
        e0: Option<f64>,
    },
    /// Local-law sweep over a ladder of N.
    Locallaw {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long, value_delimiter = ',')]
        n_ladder: Option<Vec<usize>>,
        #[arg(long, allow_hyphen_values = true)]
        e0: Option<f64>,
        /// Fixed η.
        #[arg(long)]
        eta: Option<f64>,
        /// η = N^(-p); used when no fixed η is given.
        #[arg(long)]
        eta_power: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Sampled multiresolvents across the real axis against their leading terms.
    Twopoint {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long = "size")]
        size: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        e0: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Monte Carlo experiment for the mesoscopic linear statistic.
    Clt {
        #[command(flatten)]
        ens: EnsembleArg,
        #[arg(long = "size")]
        size: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        e0: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

/// All tunables of every command; absent fields fall back to defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    /// Flatness pattern; the support pattern of the ensemble by default.
    #[serde(rename = "Z", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub re: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub im: Option<f64>,
    #[serde(rename = "E0", skip_serializing_if = "Option::is_none")]
    pub e0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_power: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_ladder: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Real test matrix `B` for `twopoint`; the identity by default.
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_function: Option<TestFunction>,
    /// Bulk threshold on ρ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => { $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )* };
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `self` with every field set in `top` replaced.
    pub fn overlay(mut self, top: &ExperimentConfig) -> Self {
        overlay!(self, top, ensemble, out, seed, threads, points, budget, pattern, re, im, e0, eta, eta_power, n_ladder, samples, size, gamma, b, test_function, theta);
        self
    }

    fn from_cli(cli: &Cli) -> Self {
        let mut c = ExperimentConfig { out: cli.out.clone(), seed: cli.seed, threads: cli.threads, ..Default::default() };
        match &cli.command {
            Command::Validate { path } => c.ensemble = Some(path.clone()),
            Command::Flatness { ens, budget } => {
                c.ensemble = ens.ensemble.clone();
                c.budget = *budget;
            }
            Command::Dos { ens, points } => {
                c.ensemble = ens.ensemble.clone();
                c.points = *points;
            }
            Command::MdeProbe { ens, re, im } => {
                c.ensemble = ens.ensemble.clone();
                c.re = *re;
                c.im = *im;
            }
            Command::StabilityProbe { ens, e0 } => {
                c.ensemble = ens.ensemble.clone();
                c.e0 = *e0;
            }
            Command::Locallaw { ens, n_ladder, e0, eta, eta_power, samples } => {
                c.ensemble = ens.ensemble.clone();
                c.n_ladder = n_ladder.clone();
                c.e0 = *e0;
                c.eta = *eta;
                c.eta_power = *eta_power;
                c.samples = *samples;
            }
            Command::Twopoint { ens, size, e0, eta, samples } => {
                c.ensemble = ens.ensemble.clone();
                c.size = *size;
                c.e0 = *e0;
                c.eta = *eta;
                c.samples = *samples;
            }
            Command::Clt { ens, size, gamma, e0, samples } => {
                c.ensemble = ens.ensemble.clone();
                c.size = *size;
                c.gamma = *gamma;
                c.e0 = *e0;
                c.samples = *samples;
            }
        }
        c
    }

    /// Fills the defaults used by `command`.
    fn with_defaults(mut self, command: &str) -> Self {
        self.out.get_or_insert_with(|| PathBuf::from("out"));
        self.seed.get_or_insert(0);
        self.theta.get_or_insert(clt::BULK_THRESHOLD);
        match command {
            "flatness" => {
                self.budget.get_or_insert(200);
            }
            "dos" => {
                self.points.get_or_insert(2000);
            }
            "mde-probe" => {
                self.re.get_or_insert(0.0);
                self.im.get_or_insert(0.0);
            }
            "stability-probe" => {
                self.e0.get_or_insert(0.0);
            }
            "locallaw" => {
                self.n_ladder.get_or_insert_with(|| vec![128, 256, 512, 1024]);
                self.e0.get_or_insert(0.0);
                if self.eta_power.is_none() {
                    self.eta.get_or_insert(0.1);
                }
                self.samples.get_or_insert(20);
            }
            "twopoint" => {
                self.size.get_or_insert(512);
                self.e0.get_or_insert(0.0);
                self.eta.get_or_insert(0.04);
                self.samples.get_or_insert(20);
            }
            "clt" => {
                self.size.get_or_insert(1024);
                self.gamma.get_or_insert(0.2);
                self.e0.get_or_insert(0.0);
                self.samples.get_or_insert(400);
                self.test_function.get_or_insert(TestFunction::Bump3);
            }
            _ => {}
        }
        self
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Flatness { .. } => "flatness",
        Command::Dos { .. } => "dos",
        Command::MdeProbe { .. } => "mde-probe",
        Command::StabilityProbe { .. } => "stability-probe",
        Command::Locallaw { .. } => "locallaw",
        Command::Twopoint { .. } => "twopoint",
        Command::Clt { .. } => "clt",
    }
}

/// Worker count: the environment variable, then flag or file, then all cores.
pub fn thread_count(config: &ExperimentConfig) -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got {v:?}")));
    }
    Ok(config.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

/// Floats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn matrix_json(m: &CMat) -> serde_json::Value {
    serde_json::to_value(to_entries(m)).expect("serializable")
}

fn write(dir: &Path, name: &str, body: &str, outputs: &mut Vec<String>) -> Result<()> {
    std::fs::write(dir.join(name), body)?;
    outputs.push(name.to_string());
    Ok(())
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize, outputs: &mut Vec<String>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(dir, name, &s, outputs)
}

fn load_ensemble(c: &ExperimentConfig) -> Result<Ensemble> {
    let p = c.ensemble.as_ref().ok_or_else(|| Error::InvalidParameter("no ensemble file given (--ensemble or config)".into()))?;
    Ensemble::load(p)
}

fn b_matrix(c: &ExperimentConfig, n: usize) -> Result<CMat> {
    match &c.b {
        None => Ok(algebra::identity(n)),
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::DimensionMismatch(format!("B must be {n}x{n}")));
            }
            Ok(faer::Mat::from_fn(n, n, |i, j| algebra::re(rows[i][j])))
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let name = command_name(&cli.command);
    let config = file.overlay(&ExperimentConfig::from_cli(cli)).with_defaults(name);
    if let Command::Validate { .. } = cli.command {
        return cmd_validate(config.ensemble.as_deref().expect("path"));
    }
    if name == "clt" && config.samples == Some(0) {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let threads = thread_count(&config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let ens = load_ensemble(&config)?;
    let dir = config.out.clone().expect("default");
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    pool.install(|| match name {
        "flatness" => cmd_flatness(&ens, &config, &dir, &mut outputs),
        "dos" => cmd_dos(&ens, &config, &dir, &mut outputs),
        "mde-probe" => cmd_mde_probe(&ens, &config, &dir, &mut outputs),
        "stability-probe" => cmd_stability_probe(&ens, &config, &dir, &mut outputs),
        "locallaw" => cmd_locallaw(&ens, &config, &dir, &mut outputs),
        "twopoint" => cmd_twopoint(&ens, &config, &dir, &mut outputs),
        "clt" => cmd_clt(&ens, &config, &dir, &mut outputs),
        _ => unreachable!("validate handled above"),
    })?;
    let manifest = json!({
        "command": name,
        "version": concat!("kron-dyson v", env!("CARGO_PKG_VERSION")),
        "config": config,
        "config_hash": config.hash(),
        "seed": config.seed,
        "ensemble_hash": ens.hash(),
        "threads": threads,
        "started_unix": started,
        "wall_time_seconds": clock.elapsed().as_secs_f64(),
        "outputs": outputs,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn cmd_validate(path: &Path) -> Result<()> {
    let ens = Ensemble::load(path)?;
    let z = ensemble::support_pattern(&ens);
    let report = json!({
        "valid": true,
        "n": ens.n(),
        "d": ens.d(),
        "beta": ens.beta(),
        "hash": ens.hash(),
        "Z": z,
        "primitivity_exponent": ensemble::primitivity_exponent(&z, None),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn cmd_flatness(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let z = match &c.pattern {
        Some(z) => {
            if z.len() != ens.n() || z.iter().any(|r| r.len() != ens.n() || r.iter().any(|&v| v > 1)) {
                return Err(Error::InvalidParameter(format!("Z must be a {0}x{0} 0/1 matrix", ens.n())));
            }
            z.clone()
        }
        None => ensemble::support_pattern(ens),
    };
    let report = ensemble::estimate_flatness_constant(ens, &z, c.budget.expect("default"), c.seed.expect("default"));
    write_json(dir, "flatness.json", &report, out)
}

pub fn cmd_dos(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let grid = mde::default_grid(ens, c.points.expect("default"));
    let dos = mde::density_of_states(ens, &grid, &ContinuationOptions::default())?;
    let mut csv = String::from("x,rho,residual,eta_used,flagged\n");
    for k in 0..grid.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(dos.grid[k]),
            fmt_f64(dos.rho[k]),
            fmt_f64(dos.residual[k]),
            fmt_f64(dos.eta_used[k]),
            dos.flagged[k] as u8
        ));
    }
    write(dir, "dos.csv", &csv, out)?;
    let summary = json!({
        "mass": dos.mass,
        "eta_floor": dos.eta_floor,
        "flagged": dos.flagged.iter().filter(|&&f| f).count(),
        "bulk_points": dos.bulk(c.theta.expect("default")).len(),
    });
    write_json(dir, "dos.json", &summary, out)
}

pub fn cmd_mde_probe(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let (x, y) = (c.re.expect("default"), c.im.expect("default"));
    let p = if y == 0.0 { mde::solve_on_real_axis(ens, x)? } else { mde::solve_mde_any(ens, c64::new(x, y), &MdeOptions::default())? };
    let report = json!({
        "z": [x, y],
        "M": matrix_json(&p.m),
        "residual": p.residual,
        "iterations": p.iterations,
        "rho": algebra::avg_trace(&algebra::im_part(&p.m)).re.abs() / std::f64::consts::PI,
    });
    write_json(dir, "mde_probe.json", &report, out)
}

pub fn cmd_stability_probe(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let probe = stability::stability_probe(ens, c.e0.expect("default"), &eps, c.theta.expect("default"))?;
    write_json(dir, "stability_probe.json", &probe, out)
}

pub fn cmd_locallaw(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let rule = match (c.eta, c.eta_power) {
        (Some(e), _) => EtaRule::Fixed(e),
        (None, Some(p)) => EtaRule::Power(p),
        (None, None) => unreachable!("default"),
    };
    let ladder = c.n_ladder.clone().expect("default");
    if ladder.len() < 2 {
        return Err(Error::InvalidParameter("the N ladder needs at least two values".into()));
    }
    let sweep = sampler::local_law_sweep(ens, &ladder, c.e0.expect("default"), rule, c.samples.expect("default"), c.seed.expect("default"))?;
    let mut csv = String::from("N,eta,sample_index,entrywise_err,averaged_err\n");
    for r in &sweep.reports {
        for k in 0..r.entrywise_err.len() {
            csv.push_str(&format!("{},{},{k},{},{}\n", r.big_n, fmt_f64(r.z.1), fmt_f64(r.entrywise_err[k]), fmt_f64(r.averaged_err[k])));
        }
    }
    write(dir, "locallaw.csv", &csv, out)?;
    write_json(dir, "locallaw.json", &sweep, out)
}

pub fn cmd_twopoint(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let (e0, eta) = (c.e0.expect("default"), c.eta.expect("default"));
    let m0 = mde::bulk_point(ens, e0, c.theta.expect("default"))?;
    let b = b_matrix(c, ens.n())?;
    let (z, zeta) = (c64::new(e0, eta), c64::new(e0, -eta));
    let mut leads = vec![(Variant::Plain, stability::two_point_leading_term(&m0.m, z, zeta, &b, Variant::Plain)?)];
    if ens.beta() == 1 {
        leads.push((Variant::Tilde, stability::two_point_leading_term(&m0.m, z, zeta, &b, Variant::Tilde)?));
    }
    let batch = sampler::two_point_batch(ens, e0, &[eta], c.size.expect("default"), c.samples.expect("default"), c.seed.expect("default"), &b)?;
    let mut csv = String::from("sample_index,variant,relative_error\n");
    let mut summary = Vec::new();
    for (variant, lead) in &leads {
        let norm = algebra::hs_norm(lead);
        let errs: Vec<f64> = batch
            .iter()
            .map(|s| {
                let g = if *variant == Variant::Plain { &s.plain } else { s.tilde.as_ref().expect("beta = 1") };
                algebra::hs_norm(&(g - lead)) / norm
            })
            .collect();
        for (s, e) in batch.iter().zip(&errs) {
            let tag = if *variant == Variant::Plain { "plain" } else { "tilde" };
            csv.push_str(&format!("{},{tag},{}\n", s.index, fmt_f64(*e)));
        }
        let m = clt::moments(&errs);
        summary.push(json!({
            "variant": variant,
            "leading_term": matrix_json(lead),
            "mean_relative_error": m.mean,
            "standard_error": (m.variance / errs.len() as f64).sqrt(),
        }));
    }
    write(dir, "twopoint.csv", &csv, out)?;
    write_json(dir, "twopoint.json", &json!({"E0": e0, "eta": eta, "variants": summary}), out)
}

pub fn cmd_clt(ens: &Ensemble, c: &ExperimentConfig, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let g = c.test_function.clone().expect("default");
    let w = Window { e0: c.e0.expect("default"), gamma: c.gamma.expect("default") };
    let report = clt::run_clt_windows(ens, &g, &[w], c.size.expect("default"), c.samples.expect("default"), c.seed.expect("default"))?.remove(0);
    write(dir, "clt.csv", &report.statistics_csv(), out)?;
    write_json(dir, "clt.json", &report, out)
}
