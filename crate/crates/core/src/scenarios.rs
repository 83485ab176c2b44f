//! Seeded synthetic loading scenarios and their on-disk format.
//!
//! Each scenario is one time instant of a short window. Per bus, the active
//! load is `p_nom · u` with `u` a smooth random profile inside the window's
//! load envelope (a subset of `[0.3, 1]`), and the reactive load follows from a
//! lagging power factor drawn from `U[0.9, 1]`. DER buses add solar generation
//! `p̂ · I · c`, where `p̂ = 1.6 · p_nom`, `I` is a feeder-wide irradiance profile
//! and `c ∈ [0.85, 1]` a per-site cloud factor. Injections are positive:
//! `p̃ = generation − load`, `q̃ = −p_load tan(acos pf)`.
//!
//! Smooth profiles are AR(1) sequences over the scenario index passed through
//! a logistic squashing into their envelope.
//!
//! The CSV format is a version line, a header `p_1..p_N,q_1..q_N`, and one row
//! per scenario. Provenance is kept in a TOML side file (`<stem>.meta.toml`).

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::grid_model::Scenario;

/// Header line of the scenario CSV format.
pub const SCENARIOS_CSV_VERSION: &str = "# voltvar-scenarios v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadProfile {
    /// Mid-afternoon: strong irradiance, light load.
    HighSolar,
    /// Early evening: little irradiance, heavy load.
    EveningPeak,
    /// Full envelopes for both.
    Mixed,
}

impl LoadProfile {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoadProfile::HighSolar => "high_solar",
            LoadProfile::EveningPeak => "evening_peak",
            LoadProfile::Mixed => "mixed",
        }
    }

    /// `(load envelope, irradiance envelope)`.
    pub fn envelopes(&self) -> ((f64, f64), (f64, f64)) {
        match self {
            LoadProfile::HighSolar => ((0.3, 0.7), (0.7, 1.0)),
            LoadProfile::EveningPeak => ((0.6, 1.0), (0.0, 0.1)),
            LoadProfile::Mixed => ((0.3, 1.0), (0.0, 1.0)),
        }
    }
}

impl fmt::Display for LoadProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoadProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high_solar" => Ok(LoadProfile::HighSolar),
            "evening_peak" => Ok(LoadProfile::EveningPeak),
            "mixed" => Ok(LoadProfile::Mixed),
            other => Err(Error::UnknownName {
                what: "load profile",
                name: other.to_string(),
                expected: "high_solar, evening_peak, mixed",
            }),
        }
    }
}

/// Generator constants recorded with every synthetic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub load_range: (f64, f64),
    pub irradiance_range: (f64, f64),
    pub cloud_range: (f64, f64),
    pub pf_range: (f64, f64),
    /// AR(1) coefficient between consecutive scenarios.
    pub correlation: f64,
}

impl GeneratorParams {
    pub fn for_profile(profile: LoadProfile) -> Self {
        let (load_range, irradiance_range) = profile.envelopes();
        Self {
            load_range,
            irradiance_range,
            cloud_range: (0.85, 1.0),
            pf_range: (0.9, 1.0),
            correlation: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioMeta {
    /// Number of non-substation buses.
    pub n: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub profile: Option<LoadProfile>,
    pub params: Option<GeneratorParams>,
    /// File the set was loaded from, if any.
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario<f64>>,
    pub meta: ScenarioMeta,
}

/// Smooth sequence in `[lo, hi]`: a unit-variance AR(1) path squashed by a logistic.
fn smooth_profile(rng: &mut ChaCha8Rng, len: usize, rho: f64, (lo, hi): (f64, f64)) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            let e: f64 = rng.sample(StandardNormal);
            x = rho * x + innovation * e;
        }
        out.push(lo + (hi - lo) / (1.0 + (-1.7 * x).exp()));
    }
    out
}

/// Reactive injection of a load drawing `p_load` at lagging power factor `pf`.
pub fn reactive_load(p_load: f64, pf: f64) -> f64 {
    -p_load * pf.acos().tan()
}

pub fn generate_synthetic(feeder: &FeederModel, count: usize, seed: u64, profile: LoadProfile) -> Result<ScenarioSet> {
    generate_with(feeder, count, seed, profile, GeneratorParams::for_profile(profile))
}

pub fn generate_with(feeder: &FeederModel, count: usize, seed: u64, profile: LoadProfile, params: GeneratorParams) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::Dimension {
            what: "scenario count",
            expected: 1,
            got: 0,
        });
    }
    for (name, (lo, hi)) in [
        ("load_range", params.load_range),
        ("irradiance_range", params.irradiance_range),
        ("cloud_range", params.cloud_range),
        ("pf_range", params.pf_range),
    ] {
        if !(lo <= hi && lo >= 0.0) {
            return Err(Error::InvalidParameter {
                name,
                value: lo,
                reason: "envelope must satisfy 0 <= lo <= hi",
            });
        }
    }
    if params.pf_range.1 > 1.0 {
        return Err(Error::InvalidParameter {
            name: "pf_range",
            value: params.pf_range.1,
            reason: "power factor cannot exceed one",
        });
    }
    if !(0.0..1.0).contains(&params.correlation) {
        return Err(Error::InvalidParameter {
            name: "correlation",
            value: params.correlation,
            reason: "AR(1) coefficient must lie in [0, 1)",
        });
    }
    let n = feeder.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = params.correlation;
    let irradiance = smooth_profile(&mut rng, count, rho, params.irradiance_range);
    let loads: Vec<Vec<f64>> = (0..n).map(|_| smooth_profile(&mut rng, count, rho, params.load_range)).collect();
    let clouds: Vec<Vec<f64>> = feeder
        .ders
        .iter()
        .map(|_| smooth_profile(&mut rng, count, rho, params.cloud_range))
        .collect();
    let (pf_lo, pf_hi) = params.pf_range;

    let mut scenarios = Vec::with_capacity(count);
    for s in 0..count {
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let bus = &feeder.buses[i + 1];
            let pf = if pf_hi > pf_lo { rng.random_range(pf_lo..=pf_hi) } else { pf_lo };
            let p_load = bus.p_nom * loads[i][s];
            p[i] = -p_load;
            q[i] = reactive_load(p_load, pf);
        }
        for (d, cloud) in feeder.ders.iter().zip(&clouds) {
            p[d.bus - 1] += d.p_hat * irradiance[s] * cloud[s];
        }
        scenarios.push(Scenario::new(p, q)?);
    }
    Ok(ScenarioSet {
        scenarios,
        meta: ScenarioMeta {
            n,
            count,
            seed: Some(seed),
            profile: Some(profile),
            params: Some(params),
            source: None,
        },
    })
}

/// Path of the metadata document that accompanies a scenario CSV.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.toml")
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn to_csv_string(&self) -> String {
        let n = self.n();
        let mut buf = Vec::new();
        writeln!(buf, "{SCENARIOS_CSV_VERSION}").unwrap();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let header: Vec<String> = (1..=n).map(|i| format!("p_{i}")).chain((1..=n).map(|i| format!("q_{i}"))).collect();
            w.write_record(&header).unwrap();
            for s in &self.scenarios {
                w.write_record(s.p_tilde.iter().chain(&s.q_tilde).map(|x| x.to_string())).unwrap();
            }
            w.flush().unwrap();
        }
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn from_csv_str(text: &str, context: &str) -> Result<Self> {
        match text.lines().next() {
            Some(h) if h.trim() == SCENARIOS_CSV_VERSION => {}
            _ => return Err(Error::parse(context, 1, format!("expected version line `{SCENARIOS_CSV_VERSION}`"))),
        }
        let body = text.split_once('\n').map_or("", |(_, rest)| rest);
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(body.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::parse(context, 2, e.to_string()))?.clone();
        if headers.len() % 2 != 0 || headers.is_empty() {
            return Err(Error::parse(context, 2, format!("expected 2N columns, found {}", headers.len())));
        }
        let n = headers.len() / 2;
        for (j, h) in headers.iter().enumerate() {
            let expected = if j < n {
                format!("p_{}", j + 1)
            } else {
                format!("q_{}", j - n + 1)
            };
            if h.trim() != expected {
                return Err(Error::parse(
                    context,
                    2,
                    format!("column {} should be `{expected}`, found `{h}`", j + 1),
                ));
            }
        }
        let mut scenarios = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 3;
            let rec = rec.map_err(|e| Error::parse(context, line, e.to_string()))?;
            if rec.len() != 2 * n {
                return Err(Error::parse(
                    context,
                    line,
                    format!("scenario {} has {} columns, expected {}", row + 1, rec.len(), 2 * n),
                ));
            }
            let vals = rec
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::parse(context, line, format!("column {}: {e}", headers[j].trim())))
                })
                .collect::<Result<Vec<f64>>>()?;
            let s = Scenario::new(vals[..n].to_vec(), vals[n..].to_vec()).map_err(|e| Error::parse(context, line, e.to_string()))?;
            scenarios.push(s);
        }
        if scenarios.is_empty() {
            return Err(Error::parse(context, 3, "no scenarios"));
        }
        Ok(Self {
            meta: ScenarioMeta {
                n,
                count: scenarios.len(),
                seed: None,
                profile: None,
                params: None,
                source: Some(context.to_string()),
            },
            scenarios,
        })
    }

    /// Writes the CSV and its metadata side file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))?;
        let meta = meta_path(path);
        let text = toml::to_string(&self.meta).expect("metadata serializes");
        std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    /// Reads a scenario CSV; provenance comes from the side file when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut set = Self::from_csv_str(&text, &ctx)?;
        let meta = meta_path(path);
        if meta.exists() {
            let mtext = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
            let m: ScenarioMeta = toml::from_str(&mtext).map_err(|e| {
                let line = e.span().map_or(0, |s| mtext[..s.start].matches('\n').count() + 1);
                Error::parse(meta.display().to_string(), line, e.message().to_string())
            })?;
            if m.n != set.meta.n || m.count != set.meta.count {
                return Err(Error::parse(
                    meta.display().to_string(),
                    0,
                    format!(
                        "metadata describes {}x{} but the CSV holds {}x{}",
                        m.count, m.n, set.meta.count, set.meta.n
                    ),
                ));
            }
            set.meta = ScenarioMeta { source: Some(ctx), ..m };
        }
        Ok(set)
    }
}
