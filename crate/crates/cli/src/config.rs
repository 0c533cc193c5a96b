//! TOML experiment configs. Energies are in units of h0 for the chain
//! experiments and ω_a for the Dicke ones; times in the inverse unit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FreefermionDs,
    DickeScan,
    DickeQuench,
    KbeCompare,
    GdrtVerify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::FreefermionDs => "freefermion-ds",
            Experiment::DickeScan => "dicke-scan",
            Experiment::DickeQuench => "dicke-quench",
            Experiment::KbeCompare => "kbe-compare",
            Experiment::GdrtVerify => "gdrt-verify",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(rename = "freefermion-ds", default)]
    pub freefermion_ds: FreefermionDs,
    #[serde(rename = "dicke-scan", default)]
    pub dicke_scan: DickeScan,
    #[serde(rename = "dicke-quench", default)]
    pub dicke_quench: DickeQuench,
    #[serde(rename = "kbe-compare", default)]
    pub kbe_compare: KbeCompare,
    #[serde(rename = "gdrt-verify", default)]
    pub gdrt_verify: GdrtVerify,
}

fn h0_unit() -> String {
    "h0".into()
}

fn omega_a_unit() -> String {
    "omega_a".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreefermionDs {
    #[serde(default = "h0_unit")]
    pub energy_unit: String,
    pub l: usize,
    pub n: usize,
    pub h0: f64,
    /// density-wave momentum in units of π
    pub q_over_pi: f64,
    pub gamma: f64,
    /// defaults to γ/5
    pub gamma_prime: Option<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub sigma_b: f64,
    pub grid_points: usize,
    pub omega_max: f64,
    pub rms_window: f64,
    pub refine_alpha: bool,
    pub peak_threshold: f64,
    pub refine_evals: usize,
}

impl Default for FreefermionDs {
    fn default() -> Self {
        FreefermionDs {
            energy_unit: h0_unit(),
            l: 10,
            n: 6,
            h0: 1.0,
            q_over_pi: 1.0,
            gamma: 0.01,
            gamma_prime: None,
            t_end: 110.0,
            dt: 0.02,
            sigma_b: 0.05,
            grid_points: 81,
            omega_max: 5.0,
            rms_window: 10.0,
            refine_alpha: true,
            peak_threshold: 0.1,
            refine_evals: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DickeAnalysis {
    Exponents,
    FiniteSize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DickeScan {
    #[serde(default = "omega_a_unit")]
    pub energy_unit: String,
    pub omega_c: f64,
    pub omega_a: f64,
    pub analysis: DickeAnalysis,
    /// one entry for exponents; one scan per entry for finite-size
    pub g_over_gc: Vec<f64>,
    pub n_atoms: Vec<usize>,
    pub rel_tol: f64,
    pub max_cutoff: usize,
    pub krylov_dim: usize,
}

impl Default for DickeScan {
    fn default() -> Self {
        DickeScan {
            energy_unit: omega_a_unit(),
            omega_c: 2.0,
            omega_a: 1.0,
            analysis: DickeAnalysis::Exponents,
            g_over_gc: vec![0.9998],
            n_atoms: vec![50, 75, 100, 150, 200, 300, 400, 500, 700, 1000],
            rel_tol: 1e-4,
            max_cutoff: 1200,
            krylov_dim: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DickeQuench {
    #[serde(default = "omega_a_unit")]
    pub energy_unit: String,
    pub omega_c: f64,
    pub omega_a: f64,
    pub g_over_gc: f64,
    pub n_atoms: usize,
    pub kappa: f64,
    pub t_end: f64,
    pub dt: f64,
    /// also run the Lindblad quench (small N only)
    pub lindblad: bool,
    /// photon cutoff of the Lindblad run
    pub lindblad_cutoff: usize,
    pub rel_tol: f64,
    pub max_cutoff: usize,
    pub krylov_dim: usize,
}

impl Default for DickeQuench {
    fn default() -> Self {
        DickeQuench {
            energy_unit: omega_a_unit(),
            omega_c: 2.0,
            omega_a: 1.0,
            g_over_gc: 0.9998,
            n_atoms: 1000,
            kappa: 0.05,
            t_end: 4.0,
            dt: 0.01,
            lindblad: false,
            lindblad_cutoff: 24,
            rel_tol: 1e-4,
            max_cutoff: 1200,
            krylov_dim: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KbeCompare {
    #[serde(default = "h0_unit")]
    pub energy_unit: String,
    pub l: usize,
    pub h0: f64,
    pub beta_s: f64,
    pub filling: f64,
    pub j: f64,
    pub v: f64,
    pub t_e: f64,
    pub dt: f64,
    pub t_max: f64,
    pub delta0: f64,
    pub corrector_iters: usize,
    /// "derived" or "printed"
    pub chi1_sign: String,
    /// memory-time scan at fixed v: values of J
    pub scan_j: Vec<f64>,
    /// dissipation-time scan at fixed J: values of V
    pub scan_v: Vec<f64>,
}

impl Default for KbeCompare {
    fn default() -> Self {
        KbeCompare {
            energy_unit: h0_unit(),
            l: 10,
            h0: 1.0,
            beta_s: 1.0,
            filling: 6.0,
            j: 2.0,
            v: 1.0,
            t_e: 0.0,
            dt: 0.02,
            t_max: 12.0,
            delta0: 0.2,
            corrector_iters: 1,
            chi1_sign: "derived".into(),
            scan_j: vec![],
            scan_v: vec![],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdrtVerify {
    #[serde(default = "h0_unit")]
    pub energy_unit: String,
    pub eta: f64,
    pub t: f64,
    pub h0: f64,
    pub onsite: [f64; 2],
    pub beta_s: f64,
    pub bath_energies: Vec<f64>,
    pub beta_e: f64,
    pub bath_hubbard: f64,
    pub density: usize,
    pub markov_gamma: f64,
    pub markov_widths: Vec<f64>,
    pub expansion_tau0: Vec<f64>,
    pub omega_tau0: f64,
}

impl Default for GdrtVerify {
    fn default() -> Self {
        GdrtVerify {
            energy_unit: h0_unit(),
            eta: 0.1,
            t: 2.0,
            h0: 1.0,
            onsite: [0.3, -0.2],
            beta_s: 1.0,
            bath_energies: vec![-0.7, 0.1, 0.9],
            beta_e: 2.0,
            bath_hubbard: 0.0,
            density: 200,
            markov_gamma: 0.05,
            markov_widths: vec![0.04, 0.02, 0.01],
            expansion_tau0: vec![0.1, 0.05, 0.025],
            omega_tau0: 1.0,
        }
    }
}

/// Sets `path = value` in a TOML tree; the value is parsed as TOML and taken
/// as a bare string when that fails.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    // parse twice: the first pass keeps line information in error messages
    let mut tree: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if overrides.is_empty() {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        validate(&cfg)?;
        return Ok(cfg);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn unit(table: &str, got: &str, want: &str) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::Config(format!("[{table}] energy_unit = \"{got}\", this experiment works in \"{want}\"")));
    }
    Ok(())
}

fn positive(table: &str, name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(CliError::Config(format!("[{table}] {name} = {v} must be positive")));
    }
    Ok(())
}

/// Checks of the table the experiment will use; the others keep defaults.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.workers == Some(0) {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    match cfg.experiment {
        Experiment::FreefermionDs => {
            let c = &cfg.freefermion_ds;
            unit("freefermion-ds", &c.energy_unit, "h0")?;
            for (n, v) in [("h0", c.h0), ("gamma", c.gamma), ("t_end", c.t_end), ("dt", c.dt), ("sigma_b", c.sigma_b), ("omega_max", c.omega_max)] {
                positive("freefermion-ds", n, v)?;
            }
            if let Some(gp) = c.gamma_prime {
                positive("freefermion-ds", "gamma_prime", gp)?;
                if gp > c.gamma {
                    return Err(CliError::Config(format!("[freefermion-ds] gamma_prime = {gp} exceeds gamma = {}", c.gamma)));
                }
            }
            if c.n > c.l || c.grid_points < 2 {
                return Err(CliError::Config("[freefermion-ds] need n ≤ l and at least 2 grid points".into()));
            }
        }
        Experiment::DickeScan => {
            let c = &cfg.dicke_scan;
            unit("dicke-scan", &c.energy_unit, "omega_a")?;
            positive("dicke-scan", "omega_c", c.omega_c)?;
            positive("dicke-scan", "omega_a", c.omega_a)?;
            if c.g_over_gc.is_empty() || c.n_atoms.is_empty() {
                return Err(CliError::Config("[dicke-scan] g_over_gc and n_atoms must be non-empty".into()));
            }
            if c.analysis == DickeAnalysis::Exponents && c.g_over_gc.len() != 1 {
                return Err(CliError::Config("[dicke-scan] the exponent analysis takes a single g_over_gc".into()));
            }
        }
        Experiment::DickeQuench => {
            let c = &cfg.dicke_quench;
            unit("dicke-quench", &c.energy_unit, "omega_a")?;
            for (n, v) in [("omega_c", c.omega_c), ("omega_a", c.omega_a), ("kappa", c.kappa), ("t_end", c.t_end), ("dt", c.dt)] {
                positive("dicke-quench", n, v)?;
            }
        }
        Experiment::KbeCompare => {
            let c = &cfg.kbe_compare;
            unit("kbe-compare", &c.energy_unit, "h0")?;
            for (n, v) in [("h0", c.h0), ("beta_s", c.beta_s), ("j", c.j), ("dt", c.dt), ("t_max", c.t_max), ("delta0", c.delta0)] {
                positive("kbe-compare", n, v)?;
            }
            if c.t_e < 0.0 || c.v < 0.0 {
                return Err(CliError::Config("[kbe-compare] t_e and v must be non-negative".into()));
            }
            if !matches!(c.chi1_sign.as_str(), "derived" | "printed") {
                return Err(CliError::Config(format!("[kbe-compare] chi1_sign = \"{}\", expected \"derived\" or \"printed\"", c.chi1_sign)));
            }
        }
        Experiment::GdrtVerify => {
            let c = &cfg.gdrt_verify;
            unit("gdrt-verify", &c.energy_unit, "h0")?;
            positive("gdrt-verify", "t", c.t)?;
            if c.eta < 0.0 {
                return Err(CliError::Config("[gdrt-verify] eta must be non-negative".into()));
            }
        }
    }
    Ok(())
}
