//! The run configuration: one TOML document with a section per subcommand.
//!
//! Every field has a default. Observable presets and CSV tables are
//! resolved into inline definitions and module seeds are derived from the
//! master seed, so the resolved document written into the manifest
//! reproduces the run on its own.

use crate::CliError;
use lorentz_core::dynamics::ProbeSettings;
use lorentz_core::estimators::{EstimatorConfig, InducedConfig};
use lorentz_core::lab::{EnsembleConfig, JointConfig, VarianceInput};
use lorentz_core::oracle::StepLabels;
use lorentz_core::rng::derive_seed;
use lorentz_core::{BaseProfile, Cell, CellObservable, Error, FlowObservable, ObstacleDisk, TableConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    /// Worker threads, 0 for all cores. Results do not depend on it.
    pub threads: usize,
    pub out: PathBuf,
    pub table: TableSpec,
    pub observables: Vec<ObservableSpec>,
    pub flow_observables: Vec<FlowObservableSpec>,
    pub validate: ValidateSection,
    pub estimate: EstimateSection,
    pub limit_test: LimitTestSection,
    pub oracle: OracleSection,
    pub moments: MomentsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 0,
            out: PathBuf::from("lorentz-out"),
            table: TableSpec::default(),
            observables: ["cell0", "dipole", "sin_phi_cell0"].map(ObservableSpec::preset).to_vec(),
            flow_observables: ["cell0", "dipole"].map(FlowObservableSpec::preset).to_vec(),
            validate: ValidateSection::default(),
            estimate: EstimateSection::default(),
            limit_test: LimitTestSection::default(),
            oracle: OracleSection::default(),
            moments: MomentsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSpec {
    pub obstacles: Vec<ObstacleSpec>,
    /// Declared bound on free flights, overriding the probe estimate.
    pub horizon_bound: Option<f64>,
    pub probe: ProbeSettings,
}

impl Default for TableSpec {
    fn default() -> Self {
        let t = TableConfig::default_two_disk();
        Self {
            obstacles: t
                .obstacles()
                .iter()
                .map(|o| ObstacleSpec {
                    center: o.center,
                    radius: o.radius,
                })
                .collect(),
            horizon_bound: None,
            probe: ProbeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

impl TableSpec {
    pub fn build(&self) -> Result<TableConfig, CliError> {
        let disks = self.obstacles.iter().map(|o| ObstacleDisk::new(o.center, o.radius)).collect();
        TableConfig::new(disks, self.horizon_bound).map_err(|e| {
            let field = match &e {
                Error::InvalidObstacle { index, .. } => format!("table.obstacles[{index}]"),
                Error::InvalidArgument(_) => "table.horizon_bound".to_string(),
                _ => "table.obstacles".to_string(),
            };
            CliError::Config(format!("{field}: {e}"))
        })
    }
}

/// A map observable: a named preset, an inline definition, or a CSV of
/// (cell_x, cell_y, coefficient) rows applied to `profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<CellObservable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<BaseProfile>,
    /// Exact ∫f dμ̃ when known; estimated otherwise.
    #[serde(default)]
    pub integral: Option<f64>,
}

impl ObservableSpec {
    fn preset(name: &str) -> Self {
        Self {
            name: name.to_string(),
            preset: Some(name.to_string()),
            observable: None,
            table_csv: None,
            profile: None,
            integral: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowObservableSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<FlowObservable>,
}

impl FlowObservableSpec {
    fn preset(name: &str) -> Self {
        Self {
            name: name.to_string(),
            preset: Some(name.to_string()),
            observable: None,
        }
    }
}

/// Built-in map observables with their exact integrals.
pub fn map_preset(name: &str) -> Option<(CellObservable, f64)> {
    Some(match name {
        "cell0" => (CellObservable::cell0(), 1.0),
        "dipole" => (CellObservable::dipole(), 0.0),
        "sin_phi_cell0" => (CellObservable::profile_at_origin(BaseProfile::SinPhi), 0.0),
        "sin_sq_phi_centered_cell0" => (CellObservable::profile_at_origin(BaseProfile::SinSqPhiCentered), 0.0),
        _ => return None,
    })
}

pub const MAP_PRESETS: &[&str] = &["cell0", "dipole", "sin_phi_cell0", "sin_sq_phi_centered_cell0"];
pub const FLOW_PRESETS: &[&str] = &["cell0", "dipole", "velocity_x_cell0"];

pub fn flow_preset(name: &str) -> Option<FlowObservable> {
    Some(match name {
        "cell0" => FlowObservable::cell0(),
        "dipole" => FlowObservable::dipole(),
        "velocity_x_cell0" => FlowObservable::VelocityX(vec![([0, 0], 1.0)]),
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub invariance_samples: usize,
    pub r_bins: usize,
    pub phi_bins: usize,
    pub seed: u64,
    /// Smallest accepted p-value of the joint invariance χ².
    pub min_p_value: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            invariance_samples: 100_000,
            r_bins: 16,
            phi_bins: 16,
            seed: 0,
            min_p_value: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub diffusion: EstimatorConfig,
    pub green_kubo: EstimatorConfig,
    pub induced: InducedConfig,
    /// Registered observables whose σ̃² and σ̂² are estimated.
    pub observables: Vec<String>,
    pub profile: ProfileSection,
    /// Largest accepted gap between two estimates, in combined stderr.
    pub max_z: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            diffusion: EstimatorConfig::default(),
            green_kubo: EstimatorConfig {
                trajectories: 1_000,
                window_cap: 400,
                direct_times: vec![],
                ..Default::default()
            },
            induced: InducedConfig {
                orbits: 2_000,
                ..Default::default()
            },
            observables: vec!["dipole".into(), "sin_phi_cell0".into()],
            profile: ProfileSection::default(),
            max_z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub ells: Vec<usize>,
    /// Cells a with |a|∞ ≤ radius are tabulated.
    pub radius: i64,
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            ells: vec![100, 1_000],
            radius: 2,
            trajectories: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitTestSection {
    pub ensemble: EnsembleConfig,
    pub joint: JointConfig,
    /// Integrable map observable g (exact integral required).
    pub integrable: String,
    /// Centered map observables tested against the Laplace law.
    pub centered: Vec<String>,
    pub flow_integrable: String,
    pub flow_centered: Vec<String>,
    /// Known constants; missing ones are estimated with the `estimate`
    /// section settings.
    pub phi0: Option<VarianceInput>,
    pub variances: BTreeMap<String, VarianceInput>,
    pub flow_variances: BTreeMap<String, VarianceInput>,
    pub thresholds: LimitThresholds,
}

impl Default for LimitTestSection {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            joint: JointConfig::default(),
            integrable: "cell0".into(),
            centered: vec!["dipole".into()],
            flow_integrable: "cell0".into(),
            flow_centered: vec!["dipole".into()],
            phi0: None,
            variances: BTreeMap::new(),
            flow_variances: BTreeMap::new(),
            thresholds: LimitThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitThresholds {
    /// KS distance to the standard Laplace law at the largest time.
    pub laplace_ks: f64,
    /// KS distance to the exponential law at the largest time.
    pub exponential_ks: f64,
    /// Log-slope gap in combined stderr.
    pub max_z: f64,
}

impl Default for LimitThresholds {
    fn default() -> Self {
        Self {
            laplace_ks: 0.12,
            exponential_ks: 0.12,
            max_z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    /// Row-stochastic transition matrix.
    pub matrix: Vec<Vec<f64>>,
    /// Step F per departing state or per edge.
    pub steps: StepLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Inline chain; the lazy walk when absent.
    pub chain: Option<ChainSpec>,
    /// Persistence ρ of the lazy walk with memory, checked alongside.
    pub persistence: f64,
    pub grid: usize,
    pub powers: usize,
    pub ells: Vec<usize>,
    /// Mark levels of the exact variance check (IID chains only).
    pub mark_levels: usize,
    pub green_kubo_lags: usize,
    pub local_times: LocalTimesSection,
    pub thresholds: OracleThresholds,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            chain: None,
            persistence: 0.5,
            grid: 101,
            powers: 40,
            ells: vec![25, 50, 100, 200, 400],
            mark_levels: 2,
            green_kubo_lags: 200,
            local_times: LocalTimesSection::default(),
            thresholds: OracleThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTimesSection {
    pub trajectories: usize,
    pub times: Vec<u64>,
    pub mark_levels: usize,
    pub seed: u64,
}

impl Default for LocalTimesSection {
    fn default() -> Self {
        Self {
            trajectories: 20_000,
            times: vec![1_000, 10_000, 100_000],
            mark_levels: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleThresholds {
    pub eigenvalue: f64,
    pub sigma2: f64,
    pub residual_rate: f64,
    /// Largest accepted log-log slope of the local limit sup-error.
    pub local_limit_slope: f64,
    pub local_limit_relative: f64,
    pub exponential_ks: f64,
    pub laplace_ks: f64,
    pub kurtosis: [f64; 2],
}

impl Default for OracleThresholds {
    fn default() -> Self {
        Self {
            eigenvalue: 1e-12,
            sigma2: 1e-10,
            residual_rate: 0.9,
            local_limit_slope: -1.2,
            local_limit_relative: 0.01,
            exponential_ks: 0.08,
            laplace_ks: 0.1,
            kurtosis: [1.5, 4.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsSection {
    pub max_m: usize,
    /// Rows (α, β, Φ₀, S₀, S₁) as exact rationals "p/q".
    pub parameters: Vec<[String; 5]>,
    /// Compositions are checked by brute force up to this m.
    pub brute_force_max_m: usize,
    pub mc_samples: usize,
    pub mc_phi0: f64,
    pub mc_sigma2: f64,
    pub mc_max_z: f64,
    pub seed: u64,
}

impl Default for MomentsSection {
    fn default() -> Self {
        let rows = [
            ["1", "1", "1", "1", "0"],
            ["1/2", "3", "2/7", "5/3", "1/4"],
            ["-2", "1/3", "3/5", "2", "-1/2"],
            ["7/4", "-5/6", "1/9", "1/8", "3/2"],
        ];
        Self {
            max_m: 8,
            parameters: rows.iter().map(|r| r.map(String::from)).collect(),
            brute_force_max_m: 7,
            mc_samples: 200_000,
            mc_phi0: 0.4,
            mc_sigma2: 2.0,
            mc_max_z: 4.0,
            seed: 0,
        }
    }
}

/// A resolved map observable.
#[derive(Debug, Clone)]
pub struct Registered {
    pub name: String,
    pub observable: CellObservable,
    pub integral: Option<f64>,
}

impl RunConfig {
    /// Parse a TOML configuration, or the `config` member of a manifest.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        let cfg = if text.trim_start().starts_with('{') {
            let v: serde_json::Value =
                serde_json::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
            let c = v.get("config").ok_or_else(|| CliError::Config("manifest: missing field `config`".into()))?;
            serde_json::from_value(c.clone()).map_err(|e| CliError::Config(format!("manifest config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?
        };
        Ok((cfg, bytes))
    }

    /// Materialize presets and CSV tables, derive module seeds and check
    /// cross references. `base` is the directory of the config file.
    pub fn resolve(&mut self, base: &Path) -> Result<(), CliError> {
        self.table.build()?;
        for (i, o) in self.observables.iter_mut().enumerate() {
            resolve_map(o, base).map_err(|e| CliError::Config(format!("observables[{i}] ({}): {e}", o.name)))?;
        }
        for (i, o) in self.flow_observables.iter_mut().enumerate() {
            if o.observable.is_none() {
                let p = o.preset.take().ok_or_else(|| {
                    CliError::Config(format!("flow_observables[{i}] ({}): needs `preset` or `observable`", o.name))
                })?;
                o.observable = Some(flow_preset(&p).ok_or_else(|| {
                    CliError::Config(format!(
                        "flow_observables[{i}].preset: unknown preset `{p}` (known: {})",
                        FLOW_PRESETS.join(", ")
                    ))
                })?);
            } else if o.preset.is_some() {
                return Err(CliError::Config(format!(
                    "flow_observables[{i}] ({}): `preset` and `observable` are exclusive",
                    o.name
                )));
            }
        }
        unique(self.observables.iter().map(|o| o.name.as_str()), "observables")?;
        unique(self.flow_observables.iter().map(|o| o.name.as_str()), "flow_observables")?;
        let map_names: Vec<&str> = self.observables.iter().map(|o| o.name.as_str()).collect();
        let flow_names: Vec<&str> = self.flow_observables.iter().map(|o| o.name.as_str()).collect();
        let known = |list: &[&str], name: &str, field: &str| {
            if list.contains(&name) {
                Ok(())
            } else {
                Err(CliError::Config(format!("{field}: no observable named `{name}`")))
            }
        };
        for n in &self.estimate.observables {
            known(&map_names, n, "estimate.observables")?;
        }
        let lt = &self.limit_test;
        known(&map_names, &lt.integrable, "limit_test.integrable")?;
        for n in &lt.centered {
            known(&map_names, n, "limit_test.centered")?;
        }
        known(&flow_names, &lt.flow_integrable, "limit_test.flow_integrable")?;
        for n in &lt.flow_centered {
            known(&flow_names, n, "limit_test.flow_centered")?;
        }
        if self.moments.max_m == 0 {
            return Err(CliError::Config("moments.max_m: must be at least 1".into()));
        }
        for (i, row) in self.moments.parameters.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                v.parse::<num_rational::BigRational>()
                    .map_err(|_| CliError::Config(format!("moments.parameters[{i}][{j}]: `{v}` is not a rational")))?;
            }
        }
        self.derive_seeds();
        Ok(())
    }

    fn derive_seeds(&mut self) {
        let s = self.seed;
        self.validate.seed = derive_seed(s, "validate.invariance");
        self.estimate.diffusion.seed = derive_seed(s, "estimate.diffusion");
        self.estimate.green_kubo.seed = derive_seed(s, "estimate.green_kubo");
        self.estimate.induced.seed = derive_seed(s, "estimate.induced");
        self.estimate.profile.seed = derive_seed(s, "estimate.profile");
        self.limit_test.ensemble.seed = derive_seed(s, "limit_test.ensemble");
        self.limit_test.joint.shuffle_seed = derive_seed(s, "limit_test.joint");
        self.oracle.local_times.seed = derive_seed(s, "oracle.local_times");
        self.moments.seed = derive_seed(s, "moments.monte_carlo");
    }

    pub fn registered(&self, name: &str) -> Option<Registered> {
        self.observables.iter().find(|o| o.name == name).map(|o| Registered {
            name: o.name.clone(),
            observable: o.observable.clone().expect("resolved"),
            integral: o.integral,
        })
    }

    pub fn flow_registered(&self, name: &str) -> Option<FlowObservable> {
        self.flow_observables.iter().find(|o| o.name == name).and_then(|o| o.observable.clone())
    }
}

fn unique<'a>(names: impl Iterator<Item = &'a str>, field: &str) -> Result<(), CliError> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(CliError::Config(format!("{field}: duplicate name `{n}`")));
        }
    }
    Ok(())
}

fn resolve_map(o: &mut ObservableSpec, base: &Path) -> Result<(), String> {
    let sources = o.preset.is_some() as u8 + o.observable.is_some() as u8 + o.table_csv.is_some() as u8;
    if sources != 1 {
        return Err("exactly one of `preset`, `observable`, `table_csv` is required".into());
    }
    if let Some(p) = o.preset.take() {
        let (obs, integral) =
            map_preset(&p).ok_or_else(|| format!("unknown preset `{p}` (known: {})", MAP_PRESETS.join(", ")))?;
        o.observable = Some(obs);
        o.integral = Some(o.integral.unwrap_or(integral));
    } else if let Some(path) = o.table_csv.take() {
        let path = if path.is_relative() { base.join(path) } else { path };
        let rows = read_cell_table(&path)?;
        let profile = o.profile.take().unwrap_or(BaseProfile::One);
        o.observable = Some(CellObservable::from_table(profile, rows));
    }
    if o.profile.is_some() {
        return Err("`profile` only applies to `table_csv`".into());
    }
    Ok(())
}

/// Rows (cell_x, cell_y, coefficient) with a header line.
pub fn read_cell_table(path: &Path) -> Result<Vec<(Cell, f64)>, String> {
    #[derive(Deserialize)]
    struct Row {
        cell_x: i64,
        cell_y: i64,
        coefficient: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    rdr.deserialize::<Row>()
        .map(|r| {
            r.map(|r| ([r.cell_x, r.cell_y], r.coefficient))
                .map_err(|e| format!("{}: {e}", path.display()))
        })
        .collect()
}
