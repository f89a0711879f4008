//! Scenario parameters, unit conversion, scheme flags and seeded RNG streams.
//!
//! Every optimizer consumes a validated [`SystemConfig`]. Powers are held in
//! linear watts internally; dBm only appears in the TOML document, where each
//! power may be given either as `*_dbm` or as `*_watt`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Converts a power in dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts a power in watts to dBm.
pub fn watt_to_dbm(watt: f64) -> f64 {
    10.0 * watt.log10() + 30.0
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid `{field}` = {value}: must satisfy {constraint}")]
    Invalid {
        field: &'static str,
        value: String,
        constraint: &'static str,
    },
    #[error("`{0}_dbm` and `{0}_watt` are mutually exclusive")]
    Ambiguous(&'static str),
    #[error("unknown scheme `{0}` (expected MA-ME, MA-FE, FA-ME or FA-FE)")]
    UnknownScheme(String),
}

fn invalid(field: &'static str, value: impl fmt::Display, constraint: &'static str) -> ConfigError {
    ConfigError::Invalid {
        field,
        value: value.to_string(),
        constraint,
    }
}

/// Mobility of the BS antennas and of the RIS elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemeFlags {
    pub bs_movable: bool,
    pub ris_movable: bool,
}

impl SchemeFlags {
    pub const MA_ME: Self = Self::new(true, true);
    pub const FA_ME: Self = Self::new(false, true);
    pub const MA_FE: Self = Self::new(true, false);
    pub const FA_FE: Self = Self::new(false, false);

    /// The four benchmark schemes, in the order they are usually reported.
    pub const ALL: [Self; 4] = [Self::MA_ME, Self::FA_ME, Self::MA_FE, Self::FA_FE];

    pub const fn new(bs_movable: bool, ris_movable: bool) -> Self {
        Self {
            bs_movable,
            ris_movable,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.bs_movable, self.ris_movable) {
            (true, true) => "MA-ME",
            (false, true) => "FA-ME",
            (true, false) => "MA-FE",
            (false, false) => "FA-FE",
        }
    }
}

impl Default for SchemeFlags {
    fn default() -> Self {
        Self::MA_ME
    }
}

impl fmt::Display for SchemeFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeFlags {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|scheme| scheme.name() == norm)
            .ok_or_else(|| ConfigError::UnknownScheme(s.to_string()))
    }
}

/// Convergence tolerances and trust-region mechanics shared by the optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceSet {
    /// Absolute EE improvement below which the AO loop stops.
    pub ao_eps: f64,
    /// Terminal |F(λ)| of the Dinkelbach loop.
    pub dinkelbach_eps: f64,
    /// Objective improvement below which an SCA loop stops.
    pub sca_eps: f64,
    /// Feasibility slack used by the constraint audit and the convex solver.
    pub kkt_eps: f64,
    pub n_max_ao: usize,
    pub n_max_inner: usize,
    /// Initial trust radius for the phase vector (rad).
    pub phase_trust_radius: f64,
    /// Initial trust radius for positions, in wavelengths.
    pub position_trust_radius_wavelengths: f64,
    pub trust_shrink: f64,
    pub trust_grow: f64,
    pub trust_accept_ratio: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self {
            ao_eps: 1e-4,
            dinkelbach_eps: 1e-6,
            sca_eps: 1e-5,
            kkt_eps: 1e-7,
            n_max_ao: 50,
            n_max_inner: 100,
            phase_trust_radius: 0.25,
            position_trust_radius_wavelengths: 0.1,
            trust_shrink: 0.5,
            trust_grow: 2.0,
            trust_accept_ratio: 0.25,
        }
    }
}

impl ToleranceSet {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("ao_eps", self.ao_eps),
            ("dinkelbach_eps", self.dinkelbach_eps),
            ("sca_eps", self.sca_eps),
            ("kkt_eps", self.kkt_eps),
            ("phase_trust_radius", self.phase_trust_radius),
            (
                "position_trust_radius_wavelengths",
                self.position_trust_radius_wavelengths,
            ),
            ("trust_accept_ratio", self.trust_accept_ratio),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(field, value, "finite and > 0"));
            }
        }
        if !(self.trust_shrink > 0.0 && self.trust_shrink < 1.0) {
            return Err(invalid("trust_shrink", self.trust_shrink, "0 < trust_shrink < 1"));
        }
        if !(self.trust_grow > 1.0 && self.trust_grow.is_finite()) {
            return Err(invalid("trust_grow", self.trust_grow, "trust_grow > 1"));
        }
        if self.n_max_inner == 0 {
            return Err(invalid("n_max_inner", self.n_max_inner, "n_max_inner >= 1"));
        }
        Ok(())
    }
}

/// Path-loss exponents of the three link types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossExponents {
    /// Direct user–BS links (h_k).
    pub user_bs: f64,
    /// RIS–BS link (H).
    pub ris_bs: f64,
    /// User–RIS links (g_k).
    pub user_ris: f64,
}

impl Default for PathLossExponents {
    fn default() -> Self {
        Self {
            user_bs: 3.9,
            ris_bs: 2.0,
            user_ris: 2.2,
        }
    }
}

/// Number of dominant paths per link type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub ris_bs: usize,
    pub user_bs: usize,
    pub user_ris: usize,
}

impl PathCounts {
    pub fn max(&self) -> usize {
        self.ris_bs.max(self.user_bs).max(self.user_ris)
    }
}

/// Validated scenario parameters. All powers are in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub num_bs_antennas: usize,
    pub num_ris_elements: usize,
    pub num_users: usize,
    pub paths: PathCounts,
    pub carrier_freq_hz: f64,
    pub wavelength_m: f64,
    pub region_side_m: f64,
    pub min_spacing_m: f64,
    pub pmax_watt: f64,
    /// Per-user override of `pmax_watt` (length K when present).
    pub pmax_per_user_watt: Option<Vec<f64>>,
    pub noise_watt: f64,
    pub circuit_power_watt: f64,
    pub amp_efficiency: f64,
    pub rate_threshold_bpshz: f64,
    pub path_loss: PathLossExponents,
    pub ref_gain_beta0: f64,
    pub bs_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    pub user_ring_min_m: f64,
    pub user_ring_max_m: f64,
    pub user_height_m: f64,
    pub scheme: SchemeFlags,
    pub tolerances: ToleranceSet,
    /// Channel redraws allowed when a trial's initialization is infeasible.
    pub max_redraws: usize,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        // An empty document always validates.
        load_config("").expect("default config is valid")
    }
}

impl SystemConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        load_config(&text)
    }

    /// Maximum transmit power of user `k`.
    pub fn pmax(&self, k: usize) -> f64 {
        match &self.pmax_per_user_watt {
            Some(v) => v[k],
            None => self.pmax_watt,
        }
    }

    pub fn pmax_vec(&self) -> Vec<f64> {
        (0..self.num_users).map(|k| self.pmax(k)).collect()
    }

    /// SINR target equivalent to the rate threshold.
    pub fn sinr_threshold(&self) -> f64 {
        2f64.powf(self.rate_threshold_bpshz) - 1.0
    }

    pub fn position_trust_radius_m(&self) -> f64 {
        self.tolerances.position_trust_radius_wavelengths * self.wavelength_m
    }

    /// Serializes to the TOML document format, with powers in watts so that
    /// reloading reproduces every field exactly.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        let doc = ConfigDocument {
            seed: Some(self.seed),
            max_redraws: Some(self.max_redraws),
            system: SystemSection {
                bs_antennas: Some(self.num_bs_antennas),
                ris_elements: Some(self.num_ris_elements),
                users: Some(self.num_users),
                paths: None,
                paths_ris_bs: Some(self.paths.ris_bs),
                paths_user_bs: Some(self.paths.user_bs),
                paths_user_ris: Some(self.paths.user_ris),
                carrier_freq_hz: Some(self.carrier_freq_hz),
                region_side_m: Some(self.region_side_m),
                min_spacing_m: Some(self.min_spacing_m),
            },
            power: PowerSection {
                pmax_dbm: None,
                pmax_watt: Some(self.pmax_watt),
                pmax_per_user_dbm: None,
                pmax_per_user_watt: self.pmax_per_user_watt.clone(),
                noise_dbm: None,
                noise_watt: Some(self.noise_watt),
                circuit_dbm: None,
                circuit_watt: Some(self.circuit_power_watt),
                amp_efficiency: Some(self.amp_efficiency),
                rate_threshold_bpshz: Some(self.rate_threshold_bpshz),
            },
            channel: ChannelSection {
                path_loss: Some(self.path_loss),
                ref_gain_beta0: Some(self.ref_gain_beta0),
                bs_position_m: Some(self.bs_pos),
                ris_position_m: Some(self.ris_pos),
                user_ring_m: Some([self.user_ring_min_m, self.user_ring_max_m]),
                user_height_m: Some(self.user_height_m),
            },
            scheme: Some(SchemeSection {
                bs_movable: self.scheme.bs_movable,
                ris_movable: self.scheme.ris_movable,
            }),
            tolerances: Some(self.tolerances.clone()),
        };
        Ok(toml::to_string(&doc)?)
    }

    /// Re-checks every invariant. Called by [`load_config`]; call it again
    /// after mutating fields by hand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, n) in [
            ("bs_antennas", self.num_bs_antennas),
            ("ris_elements", self.num_ris_elements),
            ("users", self.num_users),
            ("paths_ris_bs", self.paths.ris_bs),
            ("paths_user_bs", self.paths.user_bs),
            ("paths_user_ris", self.paths.user_ris),
        ] {
            if n == 0 {
                return Err(invalid(field, n, "a positive integer"));
            }
        }
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("wavelength_m", self.wavelength_m),
            ("region_side_m", self.region_side_m),
            ("min_spacing_m", self.min_spacing_m),
            ("pmax", self.pmax_watt),
            ("noise", self.noise_watt),
            ("circuit", self.circuit_power_watt),
            ("ref_gain_beta0", self.ref_gain_beta0),
            ("path_loss.user_bs", self.path_loss.user_bs),
            ("path_loss.ris_bs", self.path_loss.ris_bs),
            ("path_loss.user_ris", self.path_loss.user_ris),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(field, value, "finite and > 0"));
            }
        }
        let expected = SPEED_OF_LIGHT / self.carrier_freq_hz;
        if ((self.wavelength_m - expected) / expected).abs() > 1e-9 {
            return Err(invalid("wavelength_m", self.wavelength_m, "wavelength = c / carrier_freq_hz"));
        }
        if self.min_spacing_m > self.region_side_m {
            return Err(invalid("min_spacing_m", self.min_spacing_m, "d0 <= A (min spacing within region side)"));
        }
        if let Some(v) = &self.pmax_per_user_watt {
            if v.len() != self.num_users {
                return Err(invalid("pmax_per_user", v.len(), "one entry per user"));
            }
            if v.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(invalid("pmax_per_user", format!("{v:?}"), "all entries finite and > 0"));
            }
        }
        if !(self.amp_efficiency > 0.0 && self.amp_efficiency <= 1.0) {
            return Err(invalid("amp_efficiency", self.amp_efficiency, "0 < eta <= 1"));
        }
        if !(self.rate_threshold_bpshz.is_finite() && self.rate_threshold_bpshz >= 0.0) {
            return Err(invalid("rate_threshold_bpshz", self.rate_threshold_bpshz, "finite and >= 0"));
        }
        if !(self.user_ring_min_m >= 0.0 && self.user_ring_min_m < self.user_ring_max_m) {
            return Err(invalid(
                "user_ring_m",
                format!("[{}, {}]", self.user_ring_min_m, self.user_ring_max_m),
                "0 <= inner radius < outer radius",
            ));
        }
        if self
            .bs_pos
            .iter()
            .chain(&self.ris_pos)
            .chain(std::iter::once(&self.user_height_m))
            .any(|c| !c.is_finite())
        {
            return Err(invalid("positions", "non-finite", "finite coordinates"));
        }
        self.tolerances.validate()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_redraws: Option<usize>,
    #[serde(default)]
    system: SystemSection,
    #[serde(default)]
    power: PowerSection,
    #[serde(default)]
    channel: ChannelSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    scheme: Option<SchemeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerances: Option<ToleranceSet>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    bs_antennas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ris_elements: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paths_ris_bs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paths_user_bs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paths_user_ris: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    carrier_freq_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    region_side_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_spacing_m: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PowerSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pmax_dbm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pmax_watt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pmax_per_user_dbm: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pmax_per_user_watt: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_dbm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_watt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    circuit_dbm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    circuit_watt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    amp_efficiency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate_threshold_bpshz: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    path_loss: Option<PathLossExponents>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ref_gain_beta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bs_position_m: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ris_position_m: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    user_ring_m: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    user_height_m: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeSection {
    bs_movable: bool,
    ris_movable: bool,
}

fn power_field(
    name: &'static str,
    dbm: Option<f64>,
    watt: Option<f64>,
    default_dbm: f64,
) -> Result<f64, ConfigError> {
    match (dbm, watt) {
        (Some(_), Some(_)) => Err(ConfigError::Ambiguous(name)),
        (Some(d), None) if !d.is_finite() => Err(invalid(name, d, "finite dBm value")),
        (Some(d), None) => Ok(dbm_to_watt(d)),
        (None, Some(w)) => Ok(w),
        (None, None) => Ok(dbm_to_watt(default_dbm)),
    }
}

/// Parses and validates a TOML config document. Missing keys take the
/// defaults of the reference scenario (N = 49, K = 4, M = 8, L = 4,
/// R_th = 1.5 bps/Hz, P_max = 20 dBm at 3 GHz).
pub fn load_config(source: &str) -> Result<SystemConfig, ConfigError> {
    let doc: ConfigDocument = toml::from_str(source)?;
    let sys = doc.system;
    let pw = doc.power;
    let ch = doc.channel;

    let carrier_freq_hz = sys.carrier_freq_hz.unwrap_or(3e9);
    if !(carrier_freq_hz.is_finite() && carrier_freq_hz > 0.0) {
        return Err(invalid("carrier_freq_hz", carrier_freq_hz, "finite and > 0"));
    }
    let wavelength_m = SPEED_OF_LIGHT / carrier_freq_hz;
    let paths = sys.paths.unwrap_or(4);
    let pmax_per_user_watt = match (pw.pmax_per_user_dbm, pw.pmax_per_user_watt) {
        (Some(_), Some(_)) => return Err(ConfigError::Ambiguous("pmax_per_user")),
        (Some(d), None) => Some(d.into_iter().map(dbm_to_watt).collect()),
        (None, w) => w,
    };
    let ring = ch.user_ring_m.unwrap_or([50.0, 70.0]);
    let scheme = doc
        .scheme
        .map(|s| SchemeFlags::new(s.bs_movable, s.ris_movable))
        .unwrap_or_default();

    let config = SystemConfig {
        num_bs_antennas: sys.bs_antennas.unwrap_or(8),
        num_ris_elements: sys.ris_elements.unwrap_or(49),
        num_users: sys.users.unwrap_or(4),
        paths: PathCounts {
            ris_bs: sys.paths_ris_bs.unwrap_or(paths),
            user_bs: sys.paths_user_bs.unwrap_or(paths),
            user_ris: sys.paths_user_ris.unwrap_or(paths),
        },
        carrier_freq_hz,
        wavelength_m,
        region_side_m: sys.region_side_m.unwrap_or(4.0 * wavelength_m),
        min_spacing_m: sys.min_spacing_m.unwrap_or(0.5 * wavelength_m),
        pmax_watt: power_field("pmax", pw.pmax_dbm, pw.pmax_watt, 20.0)?,
        pmax_per_user_watt,
        noise_watt: power_field("noise", pw.noise_dbm, pw.noise_watt, -90.0)?,
        circuit_power_watt: power_field("circuit", pw.circuit_dbm, pw.circuit_watt, 20.0)?,
        amp_efficiency: pw.amp_efficiency.unwrap_or(0.3),
        rate_threshold_bpshz: pw.rate_threshold_bpshz.unwrap_or(1.5),
        path_loss: ch.path_loss.unwrap_or_default(),
        ref_gain_beta0: ch.ref_gain_beta0.unwrap_or(1e-3),
        bs_pos: ch.bs_position_m.unwrap_or([0.0, 0.0, 15.0]),
        ris_pos: ch.ris_position_m.unwrap_or([10.0, 10.0, 10.0]),
        user_ring_min_m: ring[0],
        user_ring_max_m: ring[1],
        user_height_m: ch.user_height_m.unwrap_or(1.5),
        scheme,
        tolerances: doc.tolerances.unwrap_or_default(),
        max_redraws: doc.max_redraws.unwrap_or(10),
        seed: doc.seed.unwrap_or(0),
    };
    config.validate()?;
    Ok(config)
}

/// Independent random streams within one Monte Carlo trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Geometry = 0,
    Positions = 1,
    Phases = 2,
}

/// Deterministic RNG stream for `(seed, trial, purpose)`.
///
/// Streams depend only on these three values, so the same trial sees the
/// same channel draw whatever the scheme or swept parameter.
pub fn trial_rng(seed: u64, trial: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}
