//! Synthetic channel scenarios: a mobile transmitter loops around a fixed
//! receiver while weather and clutter drift as mean-reverting processes. The
//! generated path loss is free-space loss plus rain, water-vapor and clutter
//! attenuation plus correlated shadowing; the 19 context features expose the
//! geometry and environment that explain everything except the shadowing.
//!
//! docs/channel-generator.md records the attenuation tables and process
//! parameters; they define this synthetic world's ground truth.

use crate::error::{ensure_all_finite, Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

/// Context features in their canonical CSV order.
pub const FEATURE_NAMES: [&str; 19] = [
    "tx_x", "tx_y", "tx_z", "rx_x", "rx_y", "rx_z", "rel_dist", "rel_az", "rel_el", "tx_vx",
    "tx_vy", "tx_vz", "temp_c", "pressure_hpa", "wvd_g_m3", "rain_mm_h", "clutter_m", "freq_ghz",
    "txpow_dbm",
];

pub const CSV_HEADER: &str = "t,pl_db,tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,rel_dist,rel_az,rel_el,tx_vx,tx_vy,tx_vz,temp_c,pressure_hpa,wvd_g_m3,rain_mm_h,clutter_m,freq_ghz,txpow_dbm,silent";

/// One step of side information, in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextVector {
    pub tx_x: f64,
    pub tx_y: f64,
    pub tx_z: f64,
    pub rx_x: f64,
    pub rx_y: f64,
    pub rx_z: f64,
    pub rel_dist: f64,
    pub rel_az: f64,
    pub rel_el: f64,
    pub tx_vx: f64,
    pub tx_vy: f64,
    pub tx_vz: f64,
    pub temp_c: f64,
    pub pressure_hpa: f64,
    pub wvd_g_m3: f64,
    pub rain_mm_h: f64,
    pub clutter_m: f64,
    pub freq_ghz: f64,
    pub txpow_dbm: f64,
}

impl ContextVector {
    pub fn as_array(&self) -> [f64; 19] {
        [
            self.tx_x,
            self.tx_y,
            self.tx_z,
            self.rx_x,
            self.rx_y,
            self.rx_z,
            self.rel_dist,
            self.rel_az,
            self.rel_el,
            self.tx_vx,
            self.tx_vy,
            self.tx_vz,
            self.temp_c,
            self.pressure_hpa,
            self.wvd_g_m3,
            self.rain_mm_h,
            self.clutter_m,
            self.freq_ghz,
            self.txpow_dbm,
        ]
    }

    pub fn from_array(a: [f64; 19]) -> Self {
        ContextVector {
            tx_x: a[0],
            tx_y: a[1],
            tx_z: a[2],
            rx_x: a[3],
            rx_y: a[4],
            rx_z: a[5],
            rel_dist: a[6],
            rel_az: a[7],
            rel_el: a[8],
            tx_vx: a[9],
            tx_vy: a[10],
            tx_vz: a[11],
            temp_c: a[12],
            pressure_hpa: a[13],
            wvd_g_m3: a[14],
            rain_mm_h: a[15],
            clutter_m: a[16],
            freq_ghz: a[17],
            txpow_dbm: a[18],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.as_array().to_vec()
    }
}

/// The five named deployment scenarios of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    FiveG5W28GHz,
    FiveG1W28GHz,
    FiveG200mW3_5GHz,
    SixG100mW95GHz,
    SixG360mW100GHz,
}

pub const ALL_SCENARIOS: [ScenarioKind; 5] = [
    ScenarioKind::FiveG5W28GHz,
    ScenarioKind::FiveG1W28GHz,
    ScenarioKind::FiveG200mW3_5GHz,
    ScenarioKind::SixG100mW95GHz,
    ScenarioKind::SixG360mW100GHz,
];

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioKind::FiveG5W28GHz => "5G_5W_28GHz",
            ScenarioKind::FiveG1W28GHz => "5G_1W_28GHz",
            ScenarioKind::FiveG200mW3_5GHz => "5G_200mW_3.5GHz",
            ScenarioKind::SixG100mW95GHz => "6G_100mW_95GHz",
            ScenarioKind::SixG360mW100GHz => "6G_360mW_100GHz",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "5G_5W_28GHz" => Ok(ScenarioKind::FiveG5W28GHz),
            "5G_1W_28GHz" => Ok(ScenarioKind::FiveG1W28GHz),
            "5G_200mW_3.5GHz" => Ok(ScenarioKind::FiveG200mW3_5GHz),
            "6G_100mW_95GHz" => Ok(ScenarioKind::SixG100mW95GHz),
            "6G_360mW_100GHz" => Ok(ScenarioKind::SixG360mW100GHz),
            other => Err(Error::Parse {
                location: "scenario name".into(),
                reason: format!("unknown scenario '{other}'"),
            }),
        }
    }
}

impl ScenarioKind {
    pub fn all_names() -> Vec<String> {
        ALL_SCENARIOS.iter().map(|k| k.to_string()).collect()
    }

    pub fn carrier_ghz(self) -> f64 {
        match self {
            ScenarioKind::FiveG5W28GHz | ScenarioKind::FiveG1W28GHz => 28.0,
            ScenarioKind::FiveG200mW3_5GHz => 3.5,
            ScenarioKind::SixG100mW95GHz => 95.0,
            ScenarioKind::SixG360mW100GHz => 100.0,
        }
    }

    /// Transmit power in dBm (10 log10 of milliwatts).
    pub fn tx_power_dbm(self) -> f64 {
        match self {
            ScenarioKind::FiveG5W28GHz => 10.0 * 5000.0f64.log10(),
            ScenarioKind::FiveG1W28GHz => 10.0 * 1000.0f64.log10(),
            ScenarioKind::FiveG200mW3_5GHz => 10.0 * 200.0f64.log10(),
            ScenarioKind::SixG100mW95GHz => 10.0 * 100.0f64.log10(),
            ScenarioKind::SixG360mW100GHz => 10.0 * 360.0f64.log10(),
        }
    }
}

/// Mean-reverting scalar process x' = mean + rho (x - mean) + innov_sigma eps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Spec {
    pub mean: f64,
    pub rho: f64,
    pub innov_sigma: f64,
    pub floor: Option<f64>,
}

impl Ar1Spec {
    fn init_state(&self, rng: &mut ChaCha8Rng) -> f64 {
        let stationary = if self.rho.abs() < 1.0 {
            self.innov_sigma / (1.0 - self.rho * self.rho).sqrt()
        } else {
            0.0
        };
        let e: f64 = rng.sample(StandardNormal);
        let x = self.mean + stationary * e;
        self.clamp(x)
    }

    fn step(&self, state: f64, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.clamp(self.mean + self.rho * (state - self.mean) + self.innov_sigma * e)
    }

    fn clamp(&self, x: f64) -> f64 {
        match self.floor {
            Some(f) if x < f => f,
            _ => x,
        }
    }
}

/// Transmitter loop geometry: a breathing circle around `center` at varying
/// height, receiver fixed at `rx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub center: [f64; 2],
    pub rx: [f64; 3],
    pub radius_m: f64,
    pub radius_amp_m: f64,
    pub radius_period_s: f64,
    pub angular_period_s: f64,
    pub height_m: f64,
    pub height_amp_m: f64,
    pub height_period_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherSpec {
    pub temp: Ar1Spec,
    pub pressure: Ar1Spec,
    pub vapor: Ar1Spec,
    pub rain: Ar1Spec,
    /// Slow obstruction-depth drift; its sum with `clutter_fast` is the
    /// `clutter_m` feature.
    pub clutter: Ar1Spec,
    /// Fast zero-mean fluttering around the slow depth (swaying foliage).
    pub clutter_fast: Ar1Spec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowSpec {
    pub rho: f64,
    pub innov_sigma: f64,
}

/// Multipliers on the environment-driven attenuation terms. All ones for the
/// physical scenarios; zeroed by the null regime where context explains
/// nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationGains {
    pub rain: f64,
    pub vapor: f64,
    pub clutter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub freq_ghz: f64,
    pub txpow_dbm: f64,
    pub dt_s: f64,
    pub trajectory: TrajectorySpec,
    pub weather: WeatherSpec,
    pub shadow: ShadowSpec,
    pub gains: PropagationGains,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn preset(kind: ScenarioKind, seed: u64) -> Self {
        // Slightly different loop geometry per scenario so the five grids do
        // not share a trajectory. The orbital and height periods both fit
        // inside a 200-sample training window, so a trained model has seen
        // every phase of the geometric cycle; the slow weather processes are
        // what drift into new territory during silence.
        let (radius, height, rain_mean) = match kind {
            ScenarioKind::FiveG5W28GHz => (200.0, 80.0, 4.0),
            ScenarioKind::FiveG1W28GHz => (190.0, 70.0, 4.0),
            ScenarioKind::FiveG200mW3_5GHz => (195.0, 90.0, 5.0),
            ScenarioKind::SixG100mW95GHz => (185.0, 60.0, 2.5),
            ScenarioKind::SixG360mW100GHz => (205.0, 65.0, 2.5),
        };
        ScenarioConfig {
            name: kind.to_string(),
            freq_ghz: kind.carrier_ghz(),
            txpow_dbm: kind.tx_power_dbm(),
            dt_s: 0.1,
            trajectory: TrajectorySpec {
                center: [250.0, 0.0],
                rx: [0.0, 0.0, 25.0],
                radius_m: radius,
                radius_amp_m: 0.0,
                radius_period_s: 18.7,
                angular_period_s: 15.1,
                height_m: height,
                height_amp_m: 15.0,
                height_period_s: 16.3,
            },
            weather: WeatherSpec {
                temp: Ar1Spec {
                    mean: 20.0,
                    rho: 0.99,
                    innov_sigma: 0.1,
                    floor: None,
                },
                pressure: Ar1Spec {
                    mean: 1013.25,
                    rho: 0.99,
                    innov_sigma: 0.1,
                    floor: None,
                },
                vapor: Ar1Spec {
                    mean: 7.5,
                    rho: 0.997,
                    innov_sigma: 0.03,
                    floor: Some(0.1),
                },
                rain: Ar1Spec {
                    mean: rain_mean,
                    rho: 0.998,
                    innov_sigma: 0.08,
                    floor: Some(0.0),
                },
                // The dominant slow driver: obstruction depth wanders over
                // several metres on a minutes scale, moving the path loss by
                // whole dB in a way only the context reveals.
                clutter: Ar1Spec {
                    mean: 6.0,
                    rho: 0.9995,
                    innov_sigma: 0.3,
                    floor: Some(0.0),
                },
                // Seconds-scale sway on top of the drift. Any training window
                // sees its full range, so it widens the span a model learns
                // on while staying predictable from the context alone.
                clutter_fast: Ar1Spec {
                    mean: 0.0,
                    rho: 0.9,
                    innov_sigma: 0.9,
                    floor: None,
                },
            },
            shadow: ShadowSpec {
                rho: 0.995,
                innov_sigma: 0.01,
            },
            gains: PropagationGains {
                rain: 1.0,
                vapor: 1.0,
                clutter: 1.0,
            },
            seed,
        }
    }

    /// Falsification probe: static geometry, environment decoupled from the
    /// path loss, shadowing a pure random walk. Context carries no usable
    /// signal here, so a context-driven model should not beat the
    /// context-free one.
    pub fn null_regime(seed: u64) -> Self {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::FiveG1W28GHz, seed);
        cfg.name = "null_regime".into();
        cfg.trajectory.radius_amp_m = 0.0;
        cfg.trajectory.height_amp_m = 0.0;
        cfg.trajectory.angular_period_s = f64::INFINITY;
        cfg.trajectory.radius_period_s = f64::INFINITY;
        cfg.trajectory.height_period_s = f64::INFINITY;
        cfg.gains = PropagationGains {
            rain: 0.0,
            vapor: 0.0,
            clutter: 0.0,
        };
        cfg.shadow = ShadowSpec {
            rho: 1.0,
            innov_sigma: 0.05,
        };
        cfg
    }

    fn validate(&self) -> Result<()> {
        if !(self.freq_ghz.is_finite() && self.freq_ghz > 0.0) {
            return Err(Error::param("freq_ghz", format!("{}", self.freq_ghz)));
        }
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(Error::param("dt_s", format!("{}", self.dt_s)));
        }
        if self.trajectory.radius_m <= self.trajectory.radius_amp_m {
            return Err(Error::param("radius_m", "loop radius must exceed its breathing amplitude"));
        }
        Ok(())
    }
}

/// Free-space path loss, d in km, f in MHz: 32.45 + 20 log10(d f).
pub fn fspl_db(d_km: f64, f_mhz: f64) -> Result<f64> {
    if d_km <= 0.0 || f_mhz <= 0.0 {
        return Err(Error::param("fspl", format!("d_km {d_km}, f_mhz {f_mhz} must be positive")));
    }
    Ok(32.45 + 20.0 * (d_km * f_mhz).log10())
}

// Rain attenuation power-law coefficients, tabulated against frequency and
// interpolated in log-frequency (k also in log). See docs/channel-generator.md.
const RAIN_TABLE: [(f64, f64, f64); 7] = [
    (1.0, 3.87e-5, 0.912),
    (4.0, 6.5e-4, 1.121),
    (10.0, 1.217e-2, 1.2571),
    (20.0, 9.164e-2, 1.0568),
    (30.0, 2.403e-1, 0.9485),
    (60.0, 8.606e-1, 0.7656),
    (100.0, 1.3671, 0.6843),
];

// Water-vapor specific attenuation per unit density, dB/km per g/m^3.
const VAPOR_TABLE: [(f64, f64); 7] = [
    (1.0, 6.0e-6),
    (3.5, 7.0e-5),
    (10.0, 9.0e-4),
    (22.0, 2.5e-2),
    (28.0, 1.3e-2),
    (60.0, 2.2e-2),
    (100.0, 5.5e-2),
];

fn interp_log_f(table: &[(f64, f64)], f_ghz: f64, log_value: bool) -> f64 {
    let lf = f_ghz.ln();
    let first = table.first().unwrap();
    let last = table.last().unwrap();
    if f_ghz <= first.0 {
        return first.1;
    }
    if f_ghz >= last.0 {
        return last.1;
    }
    for w in table.windows(2) {
        let (f0, v0) = w[0];
        let (f1, v1) = w[1];
        if f_ghz <= f1 {
            let t = (lf - f0.ln()) / (f1.ln() - f0.ln());
            return if log_value {
                (v0.ln() * (1.0 - t) + v1.ln() * t).exp()
            } else {
                v0 * (1.0 - t) + v1 * t
            };
        }
    }
    last.1
}

/// Specific rain attenuation k R^alpha in dB/km at rain rate R mm/h.
pub fn rain_attenuation_db_per_km(f_ghz: f64, rain_mm_h: f64) -> Result<f64> {
    if !(f_ghz.is_finite() && f_ghz > 0.0) {
        return Err(Error::param("f_ghz", format!("{f_ghz}")));
    }
    if rain_mm_h < 0.0 {
        return Err(Error::param("rain_mm_h", format!("{rain_mm_h} negative")));
    }
    if rain_mm_h == 0.0 {
        return Ok(0.0);
    }
    let k_table: Vec<(f64, f64)> = RAIN_TABLE.iter().map(|&(f, k, _)| (f, k)).collect();
    let a_table: Vec<(f64, f64)> = RAIN_TABLE.iter().map(|&(f, _, a)| (f, a)).collect();
    let k = interp_log_f(&k_table, f_ghz, true);
    let alpha = interp_log_f(&a_table, f_ghz, false);
    Ok(k * rain_mm_h.powf(alpha))
}

/// Water-vapor attenuation coefficient in dB/km per g/m^3.
pub fn vapor_coeff_db_per_km(f_ghz: f64) -> f64 {
    interp_log_f(&VAPOR_TABLE, f_ghz, true)
}

/// Clutter excess loss per metre of obstruction depth (foliage-like),
/// mildly increasing with frequency.
pub fn clutter_coeff_db_per_m(f_ghz: f64) -> f64 {
    0.9 * (f_ghz / 28.0).powf(0.2)
}

/// A generated or loaded trace. CSI values are private: observed samples are
/// read through [`Trace::csi_at`], which refuses silence-masked indices; the
/// masked ground truth is reachable only through the clearly named
/// [`Trace::silence_truth`], reserved for final error measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    timestamps: Vec<f64>,
    csi_db: Vec<f64>,
    contexts: Vec<ContextVector>,
    silent: Vec<bool>,
}

impl Trace {
    pub fn new(timestamps: Vec<f64>, csi_db: Vec<f64>, contexts: Vec<ContextVector>, silent: Vec<bool>) -> Result<Self> {
        let n = timestamps.len();
        if csi_db.len() != n || contexts.len() != n || silent.len() != n {
            return Err(Error::shape(
                "Trace::new",
                format!("{n} rows"),
                format!("csi {}, contexts {}, silent {}", csi_db.len(), contexts.len(), silent.len()),
            ));
        }
        ensure_all_finite(&timestamps, "Trace timestamps")?;
        ensure_all_finite(&csi_db, "Trace csi")?;
        for c in &contexts {
            ensure_all_finite(&c.as_array(), "Trace context")?;
        }
        Ok(Trace {
            timestamps,
            csi_db,
            contexts,
            silent,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn contexts(&self) -> &[ContextVector] {
        &self.contexts
    }

    pub fn silent(&self) -> &[bool] {
        &self.silent
    }

    /// Observed CSI at one step. Masked steps are a taint violation: during
    /// silence the pipeline must not see the truth.
    pub fn csi_at(&self, t: usize) -> Result<f64> {
        if t >= self.len() {
            return Err(Error::param("t", format!("index {t} out of range {}", self.len())));
        }
        if self.silent[t] {
            return Err(Error::Taint(format!("sample {t} is silence-masked")));
        }
        Ok(self.csi_db[t])
    }

    /// Observed CSI over a range; errors if any step is masked.
    pub fn observed_csi(&self, range: Range<usize>) -> Result<Vec<f64>> {
        range.clone().map(|t| self.csi_at(t)).collect()
    }

    /// Ground truth regardless of masking. This is the single sanctioned
    /// leak, meant for the final error measurement only.
    pub fn silence_truth(&self, range: Range<usize>) -> Result<Vec<f64>> {
        if range.end > self.len() {
            return Err(Error::param("range", format!("{range:?} exceeds {}", self.len())));
        }
        Ok(self.csi_db[range].to_vec())
    }

    /// Clone with the given range additionally marked silent.
    pub fn with_silence(&self, range: Range<usize>) -> Result<Trace> {
        if range.end > self.len() {
            return Err(Error::param("range", format!("{range:?} exceeds {}", self.len())));
        }
        let mut out = self.clone();
        for t in range {
            out.silent[t] = true;
        }
        Ok(out)
    }

    /// Clone with every masked CSI value replaced. Supports the leakage
    /// audit: outputs must be identical whatever the masked truth holds.
    pub fn with_masked_values_replaced(&self, value: f64) -> Result<Trace> {
        if !value.is_finite() {
            return Err(Error::param("value", format!("{value} not finite")));
        }
        let mut out = self.clone();
        for t in 0..out.len() {
            if out.silent[t] {
                out.csi_db[t] = value;
            }
        }
        Ok(out)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(self.len() * 220 + CSV_HEADER.len() + 1);
        s.push_str(CSV_HEADER);
        s.push('\n');
        for t in 0..self.len() {
            s.push_str(&format!("{}", self.timestamps[t]));
            s.push(',');
            s.push_str(&format!("{}", self.csi_db[t]));
            for v in self.contexts[t].as_array() {
                s.push(',');
                s.push_str(&format!("{v}"));
            }
            s.push(',');
            s.push(if self.silent[t] { '1' } else { '0' });
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Trace> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::schema("trace csv", "empty file"))?;
        if header.trim_end() != CSV_HEADER {
            return Err(Error::schema("trace csv", format!("unexpected header '{header}'")));
        }
        let mut timestamps = Vec::new();
        let mut csi = Vec::new();
        let mut contexts = Vec::new();
        let mut silent = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 22 {
                return Err(Error::Parse {
                    location: format!("line {}", lineno + 2),
                    reason: format!("expected 22 fields, found {}", fields.len()),
                });
            }
            let parse = |idx: usize| -> Result<f64> {
                fields[idx].parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("line {}, column {}", lineno + 2, idx + 1),
                    reason: e.to_string(),
                })
            };
            timestamps.push(parse(0)?);
            csi.push(parse(1)?);
            let mut ctx = [0.0; 19];
            for (i, slot) in ctx.iter_mut().enumerate() {
                *slot = parse(2 + i)?;
            }
            contexts.push(ContextVector::from_array(ctx));
            silent.push(match fields[21].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        location: format!("line {}, column 22", lineno + 2),
                        reason: format!("silent flag must be 0 or 1, found '{other}'"),
                    })
                }
            });
        }
        Trace::new(timestamps, csi, contexts, silent)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Trace> {
        let text = std::fs::read_to_string(path)?;
        Trace::from_csv_str(&text)
    }
}

/// Generate a trace of `len` samples from the configured scenario.
pub fn generate_trace(cfg: &ScenarioConfig, len: usize) -> Result<Trace> {
    cfg.validate()?;
    if len < 2 {
        return Err(Error::InsufficientData {
            context: "generate_trace",
            need: 2,
            have: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tau = std::f64::consts::TAU;
    let phase_theta: f64 = rng.random::<f64>() * tau;
    let phase_radius: f64 = rng.random::<f64>() * tau;
    let phase_height: f64 = rng.random::<f64>() * tau;

    let w = &cfg.weather;
    let mut temp = w.temp.init_state(&mut rng);
    let mut pressure = w.pressure.init_state(&mut rng);
    let mut vapor = w.vapor.init_state(&mut rng);
    let mut rain = w.rain.init_state(&mut rng);
    let mut clutter = w.clutter.init_state(&mut rng);
    let mut clutter_fast = w.clutter_fast.init_state(&mut rng);
    let mut shadow = 0.0f64;

    let traj = &cfg.trajectory;
    let f_mhz = cfg.freq_ghz * 1e3;
    let vapor_c = vapor_coeff_db_per_km(cfg.freq_ghz);
    let clutter_c = clutter_coeff_db_per_m(cfg.freq_ghz);

    let mut timestamps = Vec::with_capacity(len);
    let mut csi = Vec::with_capacity(len);
    let mut contexts = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 * cfg.dt_s;
        let ang_rate = if traj.angular_period_s.is_finite() { tau / traj.angular_period_s } else { 0.0 };
        let rad_rate = if traj.radius_period_s.is_finite() { tau / traj.radius_period_s } else { 0.0 };
        let hgt_rate = if traj.height_period_s.is_finite() { tau / traj.height_period_s } else { 0.0 };
        let theta = ang_rate * t + phase_theta;
        let radius = traj.radius_m + traj.radius_amp_m * (rad_rate * t + phase_radius).sin();
        let d_radius = traj.radius_amp_m * rad_rate * (rad_rate * t + phase_radius).cos();
        let height = traj.height_m + traj.height_amp_m * (hgt_rate * t + phase_height).sin();
        let d_height = traj.height_amp_m * hgt_rate * (hgt_rate * t + phase_height).cos();
        let (sin_t, cos_t) = theta.sin_cos();
        let tx = [
            traj.center[0] + radius * cos_t,
            traj.center[1] + radius * sin_t,
            height,
        ];
        let vel = [
            d_radius * cos_t - radius * sin_t * ang_rate,
            d_radius * sin_t + radius * cos_t * ang_rate,
            d_height,
        ];
        let dx = tx[0] - traj.rx[0];
        let dy = tx[1] - traj.rx[1];
        let dz = tx[2] - traj.rx[2];
        let dist = (dx * dx + dy * dy + dz * dz).sqrt();
        let d_km = dist / 1e3;

        let depth = (clutter + clutter_fast).max(0.0);
        let pl = fspl_db(d_km, f_mhz)?
            + cfg.gains.rain * rain_attenuation_db_per_km(cfg.freq_ghz, rain)? * d_km
            + cfg.gains.vapor * vapor_c * vapor * d_km
            + cfg.gains.clutter * clutter_c * depth
            + shadow;

        timestamps.push(t);
        csi.push(pl);
        contexts.push(ContextVector {
            tx_x: tx[0],
            tx_y: tx[1],
            tx_z: tx[2],
            rx_x: traj.rx[0],
            rx_y: traj.rx[1],
            rx_z: traj.rx[2],
            rel_dist: dist,
            rel_az: dy.atan2(dx),
            rel_el: dz.atan2((dx * dx + dy * dy).sqrt()),
            tx_vx: vel[0],
            tx_vy: vel[1],
            tx_vz: vel[2],
            temp_c: temp,
            pressure_hpa: pressure,
            wvd_g_m3: vapor,
            rain_mm_h: rain,
            clutter_m: depth,
            freq_ghz: cfg.freq_ghz,
            txpow_dbm: cfg.txpow_dbm,
        });

        temp = w.temp.step(temp, &mut rng);
        pressure = w.pressure.step(pressure, &mut rng);
        vapor = w.vapor.step(vapor, &mut rng);
        rain = w.rain.step(rain, &mut rng);
        clutter = w.clutter.step(clutter, &mut rng);
        clutter_fast = w.clutter_fast.step(clutter_fast, &mut rng);
        let e: f64 = rng.sample(StandardNormal);
        shadow = cfg.shadow.rho * shadow + cfg.shadow.innov_sigma * e;
    }
    Trace::new(timestamps, csi, contexts, vec![false; len])
}
