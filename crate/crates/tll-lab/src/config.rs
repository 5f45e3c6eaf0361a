//! Experiment configuration: TOML parsing, defaults and validation.
//!
//! Physical quantities carry their unit in the key name (`j_rad_per_us`,
//! `duration_us`, ...). Parsing never stops at the first problem: every unknown
//! key, unit mismatch and range violation is collected and reported together.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use tll_core::analysis::FrontDefinition;
use tll_core::exact::{DsfRoute, KrylovOptions, LanczosOptions};
use tll_core::freefermion::FermionBoundary;
use tll_core::lattice::{
    table, Boundary, ChainGeometry, CouplingModel, Exponent, Sign, VdwEnergies,
};
use tll_core::protocol::{FriedelMode, NoiseModel, QuenchInitial, RampSchedule, QUENCH_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
pub enum Scenario {
    GroundStateCorrelations,
    AdiabaticRamp,
    BackAndForthRamp,
    Friedel,
    Quench,
    #[serde(rename = "DSF")]
    Dsf,
    DisorderedChain,
    ThermalComparison,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GroundStateCorrelations => "GroundStateCorrelations",
            Self::AdiabaticRamp => "AdiabaticRamp",
            Self::BackAndForthRamp => "BackAndForthRamp",
            Self::Friedel => "Friedel",
            Self::Quench => "Quench",
            Self::Dsf => "DSF",
            Self::DisorderedChain => "DisorderedChain",
            Self::ThermalComparison => "ThermalComparison",
        }
    }

    /// Optional sections this scenario reads. `geometry`, `coupling` and
    /// `solver` are accepted everywhere.
    fn sections(&self) -> &'static [&'static str] {
        match self {
            Self::GroundStateCorrelations => &["fit"],
            Self::AdiabaticRamp | Self::BackAndForthRamp => {
                &["schedule", "noise", "snapshots", "fit"]
            }
            Self::Friedel => &["friedel", "schedule"],
            Self::Quench => &["quench"],
            Self::Dsf => &["dsf", "fit"],
            Self::DisorderedChain => &["disorder"],
            Self::ThermalComparison => &["thermal", "fit"],
        }
    }
}

// ---------------------------------------------------------------------------
// Raw file layout

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawConfig {
    scenario: Option<Scenario>,
    seed: Option<u64>,
    workers: Option<usize>,
    output_dir: Option<PathBuf>,
    geometry: Option<RawGeometry>,
    coupling: Option<RawCoupling>,
    solver: Option<RawSolver>,
    fit: Option<RawFit>,
    schedule: Option<RawSchedule>,
    noise: Option<RawNoise>,
    snapshots: Option<RawSnapshots>,
    quench: Option<RawQuench>,
    friedel: Option<RawFriedel>,
    dsf: Option<RawDsf>,
    disorder: Option<RawDisorder>,
    thermal: Option<RawThermal>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawGeometry {
    n_sites: Option<usize>,
    boundary: Option<String>,
    removed_site: Option<usize>,
    holes: Vec<usize>,
    n_up: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawBond {
    i: usize,
    j: usize,
    scale: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawCoupling {
    sign: Option<String>,
    range: Option<String>,
    exponent: Option<f64>,
    sequence: Option<String>,
    j_rad_per_us: Option<f64>,
    vdw: Option<bool>,
    vdw_uu_rad_per_us: Option<f64>,
    vdw_dd_rad_per_us: Option<f64>,
    vdw_ud_rad_per_us: Option<f64>,
    bond_overrides: Vec<RawBond>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawSolver {
    lanczos_tol: Option<f64>,
    lanczos_max_iter: Option<usize>,
    lanczos_krylov_dim: Option<usize>,
    lanczos_seed: Option<u64>,
    krylov_dt_us: Option<f64>,
    krylov_dim: Option<usize>,
    krylov_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawFit {
    cutoffs_sites: Option<Vec<f64>>,
    cutoff_tolerance: Option<f64>,
    cutoff_sites: Option<f64>,
    envelope: Option<bool>,
    rescale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawSchedule {
    delta0_rad_per_us: Option<f64>,
    duration_us: Option<f64>,
    alpha: Option<f64>,
    addressed: Option<toml::Value>,
    checkpoints_us: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawNoise {
    p_init: Option<f64>,
    gamma_per_us: Option<f64>,
    eps_up: Option<f64>,
    eps_dn: Option<f64>,
    holes: Option<bool>,
    decay: Option<bool>,
    detection: Option<bool>,
    n_trajectories: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawSnapshots {
    n_shots: Option<usize>,
    z_basis: Option<bool>,
    theta_deg: Vec<f64>,
    angular_scan_deg: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawQuench {
    initial: Option<String>,
    t_max_us: Option<f64>,
    dt_us: Option<f64>,
    front: Option<String>,
    d_min_sites: Option<usize>,
    intercept: Option<bool>,
    relative_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawFriedel {
    mz: Vec<i64>,
    mode: Option<String>,
    pin_kf: Option<bool>,
    edge_exclusion_sites: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawDsf {
    n_up: Option<usize>,
    route: Option<String>,
    lanczos_steps: Option<usize>,
    n_omega: Option<usize>,
    omega_max_rad_per_us: Option<f64>,
    eta_rad_per_us: Option<f64>,
    k_luttinger: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawDisorder {
    p: Option<f64>,
    weak_scale: Option<f64>,
    n_realizations: Option<usize>,
    r_max_sites: Option<usize>,
    edge_exclusion_sites: Option<usize>,
    tail_min_sites: Option<f64>,
    tail_max_sites: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawThermal {
    temperature_rad_per_us: Option<f64>,
    transverse_field_rad_per_us: Option<f64>,
    hole_density: Option<f64>,
    n_realizations: Option<usize>,
    var_mz_target: Option<f64>,
}

/// Accepted keys per section, used for unknown-key hints.
const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("", &["scenario", "seed", "workers", "output_dir"]),
    (
        "geometry",
        &["n_sites", "boundary", "removed_site", "holes", "n_up"],
    ),
    (
        "coupling",
        &[
            "sign",
            "range",
            "exponent",
            "sequence",
            "j_rad_per_us",
            "vdw",
            "vdw_uu_rad_per_us",
            "vdw_dd_rad_per_us",
            "vdw_ud_rad_per_us",
            "bond_overrides",
        ],
    ),
    (
        "solver",
        &[
            "lanczos_tol",
            "lanczos_max_iter",
            "lanczos_krylov_dim",
            "lanczos_seed",
            "krylov_dt_us",
            "krylov_dim",
            "krylov_tol",
        ],
    ),
    (
        "fit",
        &[
            "cutoffs_sites",
            "cutoff_tolerance",
            "cutoff_sites",
            "envelope",
            "rescale",
        ],
    ),
    (
        "schedule",
        &[
            "delta0_rad_per_us",
            "duration_us",
            "alpha",
            "addressed",
            "checkpoints_us",
        ],
    ),
    (
        "noise",
        &[
            "p_init",
            "gamma_per_us",
            "eps_up",
            "eps_dn",
            "holes",
            "decay",
            "detection",
            "n_trajectories",
        ],
    ),
    (
        "snapshots",
        &["n_shots", "z_basis", "theta_deg", "angular_scan_deg"],
    ),
    (
        "quench",
        &[
            "initial",
            "t_max_us",
            "dt_us",
            "front",
            "d_min_sites",
            "intercept",
            "relative_floor",
        ],
    ),
    ("friedel", &["mz", "mode", "pin_kf", "edge_exclusion_sites"]),
    (
        "dsf",
        &[
            "n_up",
            "route",
            "lanczos_steps",
            "n_omega",
            "omega_max_rad_per_us",
            "eta_rad_per_us",
            "k_luttinger",
        ],
    ),
    (
        "disorder",
        &[
            "p",
            "weak_scale",
            "n_realizations",
            "r_max_sites",
            "edge_exclusion_sites",
            "tail_min_sites",
            "tail_max_sites",
        ],
    ),
    (
        "thermal",
        &[
            "temperature_rad_per_us",
            "transverse_field_rad_per_us",
            "hole_density",
            "n_realizations",
            "var_mz_target",
        ],
    ),
];

const UNIT_SUFFIXES: &[&str] = &[
    "_rad_per_us",
    "_per_us",
    "_us",
    "_ms",
    "_ns",
    "_s",
    "_mhz",
    "_khz",
    "_hz",
    "_sites",
    "_deg",
    "_rad",
];

/// Common unit-less spellings and the stem of the key that replaces them.
const ALIASES: &[(&str, &str)] = &[("j_xy", "j"), ("t", "duration"), ("t_us", "duration")];

fn strip_unit(key: &str) -> &str {
    for s in UNIT_SUFFIXES {
        if let Some(stem) = key.strip_suffix(s) {
            return stem;
        }
    }
    key
}

/// Message for a key that no section accepts.
fn unknown_key_message(path: &str) -> String {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    };
    let known = KNOWN_KEYS
        .iter()
        .find(|(s, _)| *s == section)
        .map(|(_, k)| *k)
        .unwrap_or(&[]);
    let lower = key.to_ascii_lowercase();
    let stem = match lower.as_str() {
        "j_xy" | "t" | "t_us" => ALIASES
            .iter()
            .find(|(a, _)| *a == lower)
            .map(|(_, s)| s.to_string())
            .unwrap_or_default(),
        _ => strip_unit(&lower).to_string(),
    };
    if let Some(k) = known.iter().find(|k| strip_unit(k) == stem && **k != key) {
        return format!(
            "unit mismatch: `{path}` is not accepted; use `{k}` (units are part of the key)"
        );
    }
    match known.iter().find(|k| k.eq_ignore_ascii_case(key)) {
        Some(k) => format!("unknown key `{path}` (did you mean `{k}`?)"),
        None => format!("unknown key `{path}`"),
    }
}

// ---------------------------------------------------------------------------
// Validated configuration

#[derive(Debug, Clone)]
pub struct FitSettings {
    /// Candidate cutoffs in chord distance; the scan picks the first stable one.
    pub cutoffs: Vec<f64>,
    pub tolerance: f64,
    /// Skip the scan and fit at this cutoff.
    pub fixed_cutoff: Option<f64>,
    pub envelope: bool,
    pub rescale: f64,
}

#[derive(Debug, Clone)]
pub struct SnapshotSettings {
    pub n_shots: usize,
    pub z_basis: bool,
    pub theta_deg: Vec<f64>,
    pub angular_scan_deg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuenchSettings {
    pub initial: QuenchInitial,
    pub times: Vec<f64>,
    pub front: FrontDefinition,
    pub d_min: usize,
    pub intercept: bool,
    pub relative_floor: f64,
}

#[derive(Debug, Clone)]
pub struct FriedelSettings {
    pub n_spins: usize,
    pub mz: Vec<i64>,
    pub mode: FriedelMode,
    pub pin_kf: bool,
    pub edge_exclusion: usize,
}

#[derive(Debug, Clone)]
pub struct DsfSettings {
    pub n_up: usize,
    pub route: DsfRoute,
    pub n_omega: usize,
    pub omega_max: Option<f64>,
    pub eta: Option<f64>,
    pub k_luttinger: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DisorderSettings {
    pub n_sites: usize,
    pub boundary: FermionBoundary,
    pub p: f64,
    pub weak_scale: f64,
    pub n_realizations: usize,
    pub r_max: usize,
    pub edge_exclusion: usize,
    pub tail: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ThermalSettings {
    pub temperature: f64,
    pub transverse_field: f64,
    pub hole_density: f64,
    pub n_realizations: usize,
    pub var_mz_target: Option<f64>,
}

/// A fully validated experiment. Every field has its default filled in.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    /// 0 means one worker per core.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
    /// The config file as read, copied next to the results.
    pub source: String,
    pub geometry: ChainGeometry,
    /// Up spins among the active sites.
    pub n_up: usize,
    pub model: CouplingModel,
    pub lanczos: LanczosOptions,
    pub krylov: KrylovOptions,
    pub fit: FitSettings,
    /// `[fit]` appeared in the file; optional fits only run when it did.
    pub fit_requested: bool,
    pub schedule: Option<RampSchedule>,
    pub noise: NoiseModel,
    pub n_trajectories: usize,
    pub snapshots: SnapshotSettings,
    pub quench: Option<QuenchSettings>,
    pub friedel: Option<FriedelSettings>,
    pub dsf: Option<DsfSettings>,
    pub disorder: Option<DisorderSettings>,
    pub thermal: Option<ThermalSettings>,
}

/// All problems found in a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config_str(&text)
}

/// Parse from a string; the output directory defaults to `results/<scenario>`.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let mut errors = vec![];
    let mut unknown = vec![];
    let raw: RawConfig = match serde_ignored::deserialize(toml::Deserializer::new(text), |p| {
        // optional sections show up as `?` segments
        unknown.push(p.to_string().replace("?.", ""))
    }) {
        Ok(r) => r,
        Err(e) => {
            let mut all: Vec<String> = unknown.iter().map(|p| unknown_key_message(p)).collect();
            all.push(format!("malformed config: {}", e.message().trim()));
            return Err(ConfigErrors(all));
        }
    };
    errors.extend(unknown.iter().map(|p| unknown_key_message(p)));
    let hash = hex(&Sha256::digest(text.as_bytes()));
    let mut v = Validator { errors };
    let cfg = v.resolve(raw, hash).map(|mut c| {
        c.source = text.to_string();
        c
    });
    match cfg {
        Some(c) if v.errors.is_empty() => Ok(c),
        _ => Err(ConfigErrors(v.errors)),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Validator {
    errors: Vec<String>,
}

impl Validator {
    fn err(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errors.push(msg());
        }
    }

    fn positive(&mut self, key: &str, v: f64) {
        self.check(v > 0.0 && v.is_finite(), || {
            format!("`{key}` must be positive and finite, got {v}")
        });
    }

    fn probability(&mut self, key: &str, v: f64) {
        self.check((0.0..=1.0).contains(&v), || {
            format!("`{key}` must lie in [0, 1], got {v}")
        });
    }

    fn choice<T: Copy>(&mut self, key: &str, value: &str, options: &[(&str, T)]) -> Option<T> {
        let found = options
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(value))
            .map(|(_, t)| *t);
        if found.is_none() {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            self.err(format!(
                "`{key}` must be one of {}, got \"{value}\"",
                names.join(", ")
            ));
        }
        found
    }

    fn resolve(&mut self, raw: RawConfig, config_hash: String) -> Option<ExperimentConfig> {
        let Some(scenario) = raw.scenario else {
            self.err("missing required key `scenario`");
            return None;
        };
        let present = [
            ("fit", raw.fit.is_some()),
            ("schedule", raw.schedule.is_some()),
            ("noise", raw.noise.is_some()),
            ("snapshots", raw.snapshots.is_some()),
            ("quench", raw.quench.is_some()),
            ("friedel", raw.friedel.is_some()),
            ("dsf", raw.dsf.is_some()),
            ("disorder", raw.disorder.is_some()),
            ("thermal", raw.thermal.is_some()),
        ];
        for (name, is) in present {
            if is && !scenario.sections().contains(&name) {
                self.err(format!(
                    "section [{name}] is not used by scenario {}",
                    scenario.name()
                ));
            }
        }
        let workers = raw.workers.unwrap_or(0);
        let seed = raw.seed.unwrap_or(0);
        let output_dir = raw
            .output_dir
            .unwrap_or_else(|| PathBuf::from("results").join(scenario.name()));

        let g = raw.geometry.unwrap_or_default();
        let c = raw.coupling.unwrap_or_default();
        let model = self.coupling(scenario, &c);
        let (lanczos, krylov) = self.solver(raw.solver.unwrap_or_default());
        let fit_requested = raw.fit.is_some();
        let fit = self.fit(raw.fit.unwrap_or_default());
        let snapshots = self.snapshots(raw.snapshots.unwrap_or_default());
        let (noise, n_trajectories) = self.noise(scenario, raw.noise.unwrap_or_default());

        let Some(n_sites) = g.n_sites else {
            self.err("missing required key `geometry.n_sites`");
            return None;
        };
        if n_sites < 2 {
            self.err(format!(
                "`geometry.n_sites` must be >= 2 (N >= 2), got {n_sites}"
            ));
            return None;
        }

        let mut friedel = None;
        let mut disorder = None;
        let geometry = match scenario {
            Scenario::Friedel => {
                friedel = self.friedel(n_sites, &g, raw.friedel.unwrap_or_default());
                // the chain is cut from an (N+1)-site ring by the protocol itself
                ChainGeometry::open(n_sites + 1, 0).ok()
            }
            Scenario::DisorderedChain => {
                disorder = self.disorder(n_sites, &g, &c, raw.disorder.unwrap_or_default());
                ChainGeometry::periodic(n_sites).ok()
            }
            _ => self.geometry(n_sites, &g),
        };
        let geometry = geometry?;
        let n_active = geometry.n_active();
        if scenario != Scenario::Friedel && scenario != Scenario::DisorderedChain {
            self.check(n_active >= 2, || {
                format!("geometry leaves {n_active} active site(s); need at least 2")
            });
            self.check(n_active <= tll_core::hilbert::MAX_SITES, || {
                format!(
                    "{n_active} active sites exceed the exact-diagonalization limit of {}",
                    tll_core::hilbert::MAX_SITES
                )
            });
        }
        let n_up = g.n_up.unwrap_or(n_active / 2);
        self.check(n_up <= n_active, || {
            format!("`geometry.n_up` = {n_up} exceeds the {n_active} active sites")
        });

        let schedule = if matches!(
            scenario,
            Scenario::AdiabaticRamp | Scenario::BackAndForthRamp | Scenario::Friedel
        ) {
            let sign = model.as_ref().map(|m| m.sign).unwrap_or(Sign::Ferro);
            let need = scenario != Scenario::Friedel
                || friedel.as_ref().map(|f| f.mode) == Some(FriedelMode::AdiabaticRamp);
            if need || raw.schedule.is_some() {
                self.schedule(scenario, &geometry, sign, raw.schedule.unwrap_or_default())
            } else {
                None
            }
        } else {
            None
        };
        if matches!(
            scenario,
            Scenario::AdiabaticRamp | Scenario::BackAndForthRamp
        ) {
            let dense = snapshots_need_dense(&snapshots);
            self.check(
                n_active <= tll_core::protocol::DENSE_MEASUREMENT_CAP || !dense,
                || {
                    format!(
                        "rotated-basis snapshots and angular scans are limited to {} spins",
                        tll_core::protocol::DENSE_MEASUREMENT_CAP
                    )
                },
            );
        }

        let quench = if scenario == Scenario::Quench {
            self.quench(&geometry, raw.quench.unwrap_or_default())
        } else {
            None
        };
        let dsf = if scenario == Scenario::Dsf {
            self.check(
                geometry.boundary() == Boundary::PeriodicRing && geometry.holes().is_empty(),
                || "DSF needs a clean periodic ring".into(),
            );
            self.dsf(n_active, n_up, raw.dsf.unwrap_or_default())
        } else {
            None
        };
        let thermal = if scenario == Scenario::ThermalComparison {
            self.check(n_active <= 16, || {
                format!("thermal states use the full 2^N space; {n_active} sites exceed the 16-site limit")
            });
            self.thermal(raw.thermal.unwrap_or_default())
        } else {
            None
        };

        Some(ExperimentConfig {
            scenario,
            seed,
            workers,
            output_dir,
            config_hash,
            source: String::new(),
            geometry,
            n_up,
            model: model?,
            lanczos,
            krylov,
            fit,
            fit_requested,
            schedule,
            noise,
            n_trajectories,
            snapshots,
            quench,
            friedel,
            dsf,
            disorder,
            thermal,
        })
    }

    fn geometry(&mut self, n: usize, g: &RawGeometry) -> Option<ChainGeometry> {
        let boundary = match g.boundary.as_deref().unwrap_or("periodic") {
            b if b.eq_ignore_ascii_case("periodic") => {
                self.check(g.removed_site.is_none(), || {
                    "`geometry.removed_site` needs boundary = \"open\"".into()
                });
                Boundary::PeriodicRing
            }
            b if b.eq_ignore_ascii_case("open") => Boundary::OpenRing {
                removed: g.removed_site.unwrap_or(0),
            },
            b => {
                self.err(format!(
                    "`geometry.boundary` must be \"periodic\" or \"open\", got \"{b}\""
                ));
                return None;
            }
        };
        match ChainGeometry::new(n, boundary, g.holes.iter().copied()) {
            Ok(geom) => Some(geom),
            Err(e) => {
                self.err(format!("geometry: {e}"));
                None
            }
        }
    }

    fn coupling(&mut self, scenario: Scenario, c: &RawCoupling) -> Option<CouplingModel> {
        let sign = match c.sign.as_deref() {
            None => Some(Sign::Ferro),
            Some(s) => self.choice(
                "coupling.sign",
                s,
                &[("FM", Sign::Ferro), ("AFM", Sign::Antiferro)],
            ),
        };
        let nn = match c.range.as_deref() {
            None => Some(scenario == Scenario::DisorderedChain),
            Some(r) => self.choice(
                "coupling.range",
                r,
                &[("dipolar", false), ("nearest_neighbor", true)],
            ),
        };
        let default_seq = if scenario == Scenario::Quench {
            "quench"
        } else {
            "adiabatic"
        };
        let quench_seq = self.choice(
            "coupling.sequence",
            c.sequence.as_deref().unwrap_or(default_seq),
            &[("adiabatic", false), ("quench", true)],
        );
        let (sign, nn, quench_seq) = (sign?, nn?, quench_seq?);
        let (j_default, vdw_default) = if quench_seq {
            (table::J_QUENCH, table::VDW_QUENCH)
        } else {
            (table::J_ADIABATIC, table::VDW_ADIABATIC)
        };
        let j = c.j_rad_per_us.unwrap_or(j_default);
        self.positive("coupling.j_rad_per_us", j);
        let use_vdw = c.vdw.unwrap_or(!nn);
        let overrides_vdw = c.vdw_uu_rad_per_us.is_some()
            || c.vdw_dd_rad_per_us.is_some()
            || c.vdw_ud_rad_per_us.is_some();
        if overrides_vdw && !use_vdw {
            self.err("vdw_* energies given but `coupling.vdw` is false");
        }
        let vdw = if use_vdw {
            let ud = c.vdw_ud_rad_per_us.unwrap_or(vdw_default.ud);
            VdwEnergies {
                uu: c.vdw_uu_rad_per_us.unwrap_or(vdw_default.uu),
                dd: c.vdw_dd_rad_per_us.unwrap_or(vdw_default.dd),
                ud,
                du: ud,
            }
        } else {
            VdwEnergies::zero()
        };
        let mut model = if nn {
            if c.exponent.is_some() {
                self.err("`coupling.exponent` has no meaning with range = \"nearest_neighbor\"");
            }
            CouplingModel {
                sign,
                vdw,
                ..CouplingModel::nearest_neighbor(j)
            }
        } else {
            let p = c.exponent.unwrap_or(3.0);
            self.positive("coupling.exponent", p);
            CouplingModel {
                exponent: Exponent::Power(p),
                ..CouplingModel::dipolar(j, sign, vdw)
            }
        };
        for b in &c.bond_overrides {
            self.check(b.i != b.j, || {
                format!("bond override ({}, {}) joins a site to itself", b.i, b.j)
            });
            self.check(b.scale.is_finite(), || {
                "bond override scale must be finite".into()
            });
            model = model.with_override(b.i, b.j, b.scale);
        }
        Some(model)
    }

    fn solver(&mut self, s: RawSolver) -> (LanczosOptions, KrylovOptions) {
        let ld = LanczosOptions::default();
        let kd = KrylovOptions::default();
        let lanczos = LanczosOptions {
            tol: s.lanczos_tol.unwrap_or(ld.tol),
            max_iter: s.lanczos_max_iter.unwrap_or(ld.max_iter),
            krylov_dim: s.lanczos_krylov_dim.unwrap_or(ld.krylov_dim),
            seed: s.lanczos_seed.unwrap_or(ld.seed),
        };
        let krylov = KrylovOptions {
            dt: s.krylov_dt_us.unwrap_or(kd.dt),
            krylov_dim: s.krylov_dim.unwrap_or(kd.krylov_dim),
            tol: s.krylov_tol.unwrap_or(kd.tol),
        };
        self.positive("solver.lanczos_tol", lanczos.tol);
        self.positive("solver.krylov_dt_us", krylov.dt);
        self.positive("solver.krylov_tol", krylov.tol);
        self.check(lanczos.krylov_dim >= 4, || {
            "`solver.lanczos_krylov_dim` must be >= 4".into()
        });
        self.check(krylov.krylov_dim >= 2, || {
            "`solver.krylov_dim` must be >= 2".into()
        });
        self.check(lanczos.max_iter > 0, || {
            "`solver.lanczos_max_iter` must be > 0".into()
        });
        (lanczos, krylov)
    }

    fn fit(&mut self, f: RawFit) -> FitSettings {
        let cutoffs = f
            .cutoffs_sites
            .unwrap_or_else(|| (1..=8).map(|k| k as f64).collect());
        self.check(cutoffs.len() >= 2 || f.cutoff_sites.is_some(), || {
            "`fit.cutoffs_sites` needs at least two values".into()
        });
        self.check(cutoffs.windows(2).all(|w| w[0] < w[1]), || {
            "`fit.cutoffs_sites` must be strictly increasing".into()
        });
        let tolerance = f.cutoff_tolerance.unwrap_or(0.05);
        self.positive("fit.cutoff_tolerance", tolerance);
        let rescale = f.rescale.unwrap_or(1.0);
        self.positive("fit.rescale", rescale);
        if let Some(rc) = f.cutoff_sites {
            self.check(rc >= 0.0, || "`fit.cutoff_sites` must be >= 0".into());
        }
        FitSettings {
            cutoffs,
            tolerance,
            fixed_cutoff: f.cutoff_sites,
            envelope: f.envelope.unwrap_or(false),
            rescale,
        }
    }

    fn snapshots(&mut self, s: RawSnapshots) -> SnapshotSettings {
        SnapshotSettings {
            n_shots: s.n_shots.unwrap_or(0),
            z_basis: s.z_basis.unwrap_or(true),
            theta_deg: s.theta_deg,
            angular_scan_deg: s.angular_scan_deg,
        }
    }

    fn noise(&mut self, scenario: Scenario, n: RawNoise) -> (NoiseModel, usize) {
        // noise is only modelled for ramps; other scenarios are ideal
        let base = match scenario {
            Scenario::AdiabaticRamp | Scenario::BackAndForthRamp => NoiseModel::default(),
            _ => NoiseModel::ideal(),
        };
        let noise = NoiseModel {
            p_init: n.p_init.unwrap_or(base.p_init),
            gamma: n.gamma_per_us.unwrap_or(base.gamma),
            eps_up: n.eps_up.unwrap_or(base.eps_up),
            eps_dn: n.eps_dn.unwrap_or(base.eps_dn),
            holes: n.holes.unwrap_or(base.holes),
            decay: n.decay.unwrap_or(base.decay),
            detection: n.detection.unwrap_or(base.detection),
        };
        self.probability("noise.p_init", noise.p_init);
        self.probability("noise.eps_up", noise.eps_up);
        self.probability("noise.eps_dn", noise.eps_dn);
        self.check(noise.gamma >= 0.0 && noise.gamma.is_finite(), || {
            format!("`noise.gamma_per_us` must be >= 0, got {}", noise.gamma)
        });
        let stochastic = noise.holes || noise.decay;
        let n_traj = n.n_trajectories.unwrap_or(if stochastic { 100 } else { 1 });
        self.check(n_traj >= 1, || "`noise.n_trajectories` must be >= 1".into());
        (noise, n_traj)
    }

    fn schedule(
        &mut self,
        scenario: Scenario,
        geom: &ChainGeometry,
        sign: Sign,
        s: RawSchedule,
    ) -> Option<RampSchedule> {
        let delta0 = s.delta0_rad_per_us.unwrap_or(2.0 * PI * 23.0);
        let duration = s.duration_us.unwrap_or(15.0);
        let alpha = s.alpha.unwrap_or(match sign {
            Sign::Ferro => 20.0,
            Sign::Antiferro => 100.0,
        });
        self.positive("schedule.delta0_rad_per_us", delta0);
        self.positive("schedule.duration_us", duration);
        self.check(alpha >= 1.0, || {
            format!("`schedule.alpha` must be >= 1, got {alpha}")
        });
        let addressed: Option<BTreeSet<usize>> = match &s.addressed {
            None => Some(tll_core::protocol::sublattice(geom, 1)),
            Some(toml::Value::String(p)) => self
                .choice(
                    "schedule.addressed",
                    p,
                    &[("even", 0usize), ("odd", 1usize)],
                )
                .map(|parity| tll_core::protocol::sublattice(geom, parity)),
            Some(toml::Value::Array(items)) => {
                let sites: Option<BTreeSet<usize>> = items
                    .iter()
                    .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()))
                    .collect();
                match sites {
                    Some(set) if set.iter().all(|&i| i < geom.n_sites()) => Some(set),
                    _ => {
                        self.err(
                            "`schedule.addressed` lists must hold site indices inside the ring",
                        );
                        None
                    }
                }
            }
            Some(_) => {
                self.err("`schedule.addressed` must be \"even\", \"odd\" or a list of sites");
                None
            }
        };
        if scenario == Scenario::Friedel && s.addressed.is_some() {
            self.err("`schedule.addressed` is fixed by M_z in Friedel runs");
        }
        let reverse = scenario == Scenario::BackAndForthRamp;
        let total = if reverse { 2.0 * duration } else { duration };
        for &t in &s.checkpoints_us {
            self.check((0.0..=total).contains(&t), || {
                format!("checkpoint {t} us lies outside [0, {total}] us")
            });
        }
        let sched = RampSchedule::new(delta0, duration, alpha, sign, addressed?)
            .ok()?
            .with_checkpoints(s.checkpoints_us)
            .reversed(reverse);
        sched.validate().ok()?;
        Some(sched)
    }

    fn quench(&mut self, geom: &ChainGeometry, q: RawQuench) -> Option<QuenchSettings> {
        let n = geom.n_sites();
        self.check(
            geom.boundary() == Boundary::PeriodicRing && geom.holes().is_empty(),
            || "quenches run on a clean periodic ring".into(),
        );
        self.check(n <= QUENCH_CAP, || {
            format!("quench on {n} sites exceeds the {QUENCH_CAP}-site limit")
        });
        let initial = self.choice(
            "quench.initial",
            q.initial.as_deref().unwrap_or("css_y"),
            &[
                ("css_y", QuenchInitial::CssY),
                ("staggered_css_y", QuenchInitial::StaggeredCssY),
            ],
        );
        let front = self.choice(
            "quench.front",
            q.front.as_deref().unwrap_or("half_rise"),
            &[
                ("half_rise", FrontDefinition::HalfRise),
                ("first_maximum", FrontDefinition::FirstMaximum),
            ],
        );
        let t_max = q.t_max_us.unwrap_or(0.6);
        let dt = q.dt_us.unwrap_or(0.0025);
        self.positive("quench.t_max_us", t_max);
        self.positive("quench.dt_us", dt);
        let steps = (t_max / dt).round();
        self.check(steps.is_finite() && steps <= 1e5, || {
            format!("quench grid of {steps} steps is too fine")
        });
        let relative_floor = q.relative_floor.unwrap_or(0.5);
        self.probability("quench.relative_floor", relative_floor);
        let d_min = q.d_min_sites.unwrap_or(2);
        self.check(d_min >= 1, || "`quench.d_min_sites` must be >= 1".into());
        let times = (0..=steps as usize).map(|k| k as f64 * dt).collect();
        Some(QuenchSettings {
            initial: initial?,
            times,
            front: front?,
            d_min,
            intercept: q.intercept.unwrap_or(false),
            relative_floor,
        })
    }

    fn friedel(&mut self, n: usize, g: &RawGeometry, f: RawFriedel) -> Option<FriedelSettings> {
        if let Some(b) = &g.boundary {
            self.check(b.eq_ignore_ascii_case("open"), || {
                "Friedel chains are open; `geometry.boundary` must be \"open\" or absent".into()
            });
        }
        self.check(g.removed_site.is_none() && g.holes.is_empty() && g.n_up.is_none(), || {
            "Friedel runs fix the filling by `friedel.mz`; removed_site, holes and n_up are not accepted".into()
        });
        self.check(n % 2 == 1, || {
            format!("Friedel runs need an odd number of spins, got n_sites = {n}")
        });
        self.check(n <= tll_core::hilbert::MAX_SITES, || {
            format!("{n} spins exceed the exact-diagonalization limit")
        });
        if f.mz.is_empty() {
            self.err("`friedel.mz` needs at least one magnetization");
        }
        for &mz in &f.mz {
            if (n as i64 + mz).rem_euclid(2) != 0 {
                self.err(format!(
                    "parity mismatch: M_z = {mz} cannot be reached with {n} spins (n_sites + M_z must be even)"
                ));
            } else if mz.unsigned_abs() as usize > n {
                self.err(format!("|M_z| = {} exceeds {n} spins", mz.abs()));
            }
        }
        let mode = self.choice(
            "friedel.mode",
            f.mode.as_deref().unwrap_or("direct"),
            &[
                ("direct", FriedelMode::DirectGroundState),
                ("adiabatic", FriedelMode::AdiabaticRamp),
            ],
        )?;
        Some(FriedelSettings {
            n_spins: n,
            mz: f.mz,
            mode,
            pin_kf: f.pin_kf.unwrap_or(false),
            edge_exclusion: f.edge_exclusion_sites.unwrap_or(0),
        })
    }

    fn dsf(&mut self, n_active: usize, n_up: usize, d: RawDsf) -> Option<DsfSettings> {
        let n_up = d.n_up.unwrap_or(n_up);
        self.check(n_up <= n_active, || {
            format!("`dsf.n_up` = {n_up} exceeds N")
        });
        let route = match d.route.as_deref().unwrap_or("lanczos") {
            r if r.eq_ignore_ascii_case("dense") => {
                self.check(d.lanczos_steps.is_none(), || {
                    "`dsf.lanczos_steps` needs route = \"lanczos\"".into()
                });
                Some(DsfRoute::Dense)
            }
            r if r.eq_ignore_ascii_case("lanczos") => Some(DsfRoute::Lanczos {
                steps: d.lanczos_steps.unwrap_or(200),
            }),
            r => {
                self.err(format!(
                    "`dsf.route` must be \"dense\" or \"lanczos\", got \"{r}\""
                ));
                None
            }
        };
        let n_omega = d.n_omega.unwrap_or(200);
        self.check(n_omega >= 2, || "`dsf.n_omega` must be >= 2".into());
        if let Some(w) = d.omega_max_rad_per_us {
            self.positive("dsf.omega_max_rad_per_us", w);
        }
        if let Some(e) = d.eta_rad_per_us {
            self.positive("dsf.eta_rad_per_us", e);
        }
        if let Some(k) = d.k_luttinger {
            self.positive("dsf.k_luttinger", k);
        }
        Some(DsfSettings {
            n_up,
            route: route?,
            n_omega,
            omega_max: d.omega_max_rad_per_us,
            eta: d.eta_rad_per_us,
            k_luttinger: d.k_luttinger,
        })
    }

    fn disorder(
        &mut self,
        n: usize,
        g: &RawGeometry,
        c: &RawCoupling,
        d: RawDisorder,
    ) -> Option<DisorderSettings> {
        if let Some(r) = &c.range {
            self.check(r.eq_ignore_ascii_case("nearest_neighbor"), || {
                "disordered chains are solved by free fermions and need range = \"nearest_neighbor\"".into()
            });
        }
        self.check(c.vdw != Some(true), || {
            "disordered chains have no van der Waals term".into()
        });
        self.check(
            g.holes.is_empty() && g.removed_site.is_none() && g.n_up.is_none(),
            || "disordered chains take neither holes, removed_site nor n_up (half filling)".into(),
        );
        let boundary = match g.boundary.as_deref().unwrap_or("open") {
            b if b.eq_ignore_ascii_case("open") => Some(FermionBoundary::Open),
            b if b.eq_ignore_ascii_case("periodic") => Some(FermionBoundary::Periodic),
            b => {
                self.err(format!(
                    "`geometry.boundary` must be \"periodic\" or \"open\", got \"{b}\""
                ));
                None
            }
        };
        let p = d.p.unwrap_or(0.06);
        self.probability("disorder.p", p);
        let weak_scale = d.weak_scale.unwrap_or(0.125);
        self.check(weak_scale.is_finite() && weak_scale >= 0.0, || {
            "`disorder.weak_scale` must be >= 0".into()
        });
        let n_realizations = d.n_realizations.unwrap_or(200);
        self.check(n_realizations >= 2, || {
            "`disorder.n_realizations` must be >= 2".into()
        });
        let r_max = d.r_max_sites.unwrap_or(n / 2);
        self.check(r_max >= 2 && r_max < n, || {
            format!("`disorder.r_max_sites` must lie in [2, {}]", n - 1)
        });
        let edge_exclusion = d.edge_exclusion_sites.unwrap_or(1);
        self.check(
            2 * edge_exclusion + r_max < n || boundary != Some(FermionBoundary::Open),
            || "edge exclusion leaves no pairs at r_max".into(),
        );
        let tail = (
            d.tail_min_sites.unwrap_or(20.0),
            d.tail_max_sites.unwrap_or(r_max as f64),
        );
        self.check(tail.0 > 0.0 && tail.0 < tail.1, || {
            "`disorder.tail_min_sites` must be positive and below `tail_max_sites`".into()
        });
        Some(DisorderSettings {
            n_sites: n,
            boundary: boundary?,
            p,
            weak_scale,
            n_realizations,
            r_max,
            edge_exclusion,
            tail,
        })
    }

    fn thermal(&mut self, t: RawThermal) -> Option<ThermalSettings> {
        let Some(temperature) = t.temperature_rad_per_us else {
            self.err("missing required key `thermal.temperature_rad_per_us`");
            return None;
        };
        self.positive("thermal.temperature_rad_per_us", temperature);
        let transverse_field = t.transverse_field_rad_per_us.unwrap_or(0.0);
        self.check(transverse_field >= 0.0, || {
            "`thermal.transverse_field_rad_per_us` must be >= 0".into()
        });
        let hole_density = t.hole_density.unwrap_or(0.0);
        self.probability("thermal.hole_density", hole_density);
        let n_realizations = t
            .n_realizations
            .unwrap_or(if hole_density > 0.0 { 50 } else { 1 });
        self.check(n_realizations >= 1, || {
            "`thermal.n_realizations` must be >= 1".into()
        });
        if let Some(v) = t.var_mz_target {
            self.check(v >= 0.0, || "`thermal.var_mz_target` must be >= 0".into());
        }
        Some(ThermalSettings {
            temperature,
            transverse_field,
            hole_density,
            n_realizations,
            var_mz_target: t.var_mz_target,
        })
    }
}

fn snapshots_need_dense(s: &SnapshotSettings) -> bool {
    (s.n_shots > 0 && !s.theta_deg.is_empty()) || !s.angular_scan_deg.is_empty()
}
