//! Radial feeder description and its TOML file format.
//!
//! ```toml
//! v0 = 1.0                  # substation voltage, pu
//!
//! [[bus]]                   # ids must be exactly 0..=N, bus 0 is the substation
//! id = 0
//! name = "799"              # optional label
//! p_nom = 0.0               # nominal active load, pu (optional, default 0)
//! q_nom = 0.0               # nominal reactive load, pu (optional, default 0)
//!
//! [[line]]                  # exactly N lines forming a tree rooted at bus 0
//! from = 0
//! to = 1
//! r = 0.0035                # pu, > 0
//! x = 0.0035                # pu, > 0
//!
//! [[der]]
//! bus = 9
//! p_hat = 0.1488            # peak active rating, pu
//! q_hat = 0.0682            # reactive capability, pu (optional)
//! ```
//!
//! When `q_hat` is omitted it defaults to `√(1.1² − 1)·p_hat`, the capability
//! left by an inverter oversized 10% in apparent power.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reactive capability per unit of active rating for a 10% oversized inverter.
pub const Q_HAT_FACTOR: f64 = 0.458_257_569_495_584; // sqrt(1.1^2 - 1)

const IEEE37_TOML: &str = include_str!("../data/ieee37.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub p_nom: f64,
    #[serde(default)]
    pub q_nom: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Der {
    pub bus: usize,
    pub p_hat: f64,
    pub q_hat: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DerRecord {
    bus: usize,
    p_hat: f64,
    q_hat: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    v0: f64,
    #[serde(default)]
    bus: Vec<Bus>,
    #[serde(default)]
    line: Vec<Line>,
    #[serde(default)]
    der: Vec<DerRecord>,
}

#[derive(Serialize)]
struct FeederFileOut<'a> {
    v0: f64,
    bus: &'a [Bus],
    line: &'a [Line],
    der: &'a [Der],
}

/// A validated radial feeder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeederModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub v0: f64,
    pub ders: Vec<Der>,
    parent: Vec<Option<(usize, usize)>>,
}

impl FeederModel {
    /// Validates the topology and DER records and builds the parent table.
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>, v0: f64, ders: Vec<Der>) -> Result<Self> {
        let n = buses.len().checked_sub(1).ok_or_else(|| Error::Topology("no buses".into()))?;
        if n == 0 {
            return Err(Error::Topology("feeder needs at least one bus besides the substation".into()));
        }
        let mut seen = vec![false; n + 1];
        for b in &buses {
            if b.id > n || std::mem::replace(&mut seen[b.id], true) {
                return Err(Error::Topology(format!(
                    "bus ids must be exactly 0..={n} without repeats (offending id {})",
                    b.id
                )));
            }
            if !(b.p_nom.is_finite() && b.q_nom.is_finite()) {
                return Err(Error::Topology(format!("bus {} has non-finite nominal load", b.id)));
            }
        }
        if !(v0.is_finite() && v0 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "v0",
                value: v0,
                reason: "substation voltage must be positive",
            });
        }
        if lines.len() != n {
            return Err(Error::Topology(format!(
                "a radial feeder with {} buses needs {n} lines, found {}",
                n + 1,
                lines.len()
            )));
        }
        for (index, l) in lines.iter().enumerate() {
            if l.from > n || l.to > n || l.from == l.to {
                return Err(Error::Topology(format!(
                    "line {index} ({}->{}) references an invalid bus pair",
                    l.from, l.to
                )));
            }
            if !(l.r > 0.0 && l.x > 0.0 && l.r.is_finite() && l.x.is_finite()) {
                return Err(Error::Impedance {
                    index,
                    from: l.from,
                    to: l.to,
                    r: l.r,
                    x: l.x,
                });
            }
        }

        let mut adj = vec![Vec::new(); n + 1];
        for (i, l) in lines.iter().enumerate() {
            adj[l.from].push((l.to, i));
            adj[l.to].push((l.from, i));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + 1];
        let mut visited = vec![false; n + 1];
        visited[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &(v, li) in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some((u, li));
                    queue.push_back(v);
                }
            }
        }
        if let Some(orphan) = visited.iter().position(|&v| !v) {
            return Err(Error::Topology(format!(
                "bus {orphan} is not connected to the substation (graph has a cycle or is disconnected)"
            )));
        }

        let mut has_der = vec![false; n + 1];
        for (index, d) in ders.iter().enumerate() {
            let bad = |reason: &str| Error::InvalidDer {
                index,
                bus: d.bus,
                reason: reason.to_string(),
            };
            if d.bus == 0 || d.bus > n {
                return Err(bad("DER must sit on a non-substation bus"));
            }
            if std::mem::replace(&mut has_der[d.bus], true) {
                return Err(bad("duplicate DER on bus"));
            }
            if !(d.p_hat >= 0.0 && d.p_hat.is_finite()) {
                return Err(bad("p_hat must be nonnegative"));
            }
            if !(d.q_hat > 0.0 && d.q_hat.is_finite()) {
                return Err(bad("q_hat must be positive"));
            }
        }

        let mut buses = buses;
        buses.sort_by_key(|b| b.id);
        let mut ders = ders;
        ders.sort_by_key(|d| d.bus);
        Ok(Self {
            buses,
            lines,
            v0,
            ders,
            parent,
        })
    }

    /// The bundled IEEE 37-bus single-phase equivalent with 10 DERs.
    pub fn ieee37() -> Self {
        Self::from_toml_str(IEEE37_TOML, "bundled ieee37.toml").expect("bundled feeder is valid")
    }

    pub fn from_toml_str(text: &str, context: &str) -> Result<Self> {
        let file: FeederFile = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(context, line, e.message())
        })?;
        let ders = file
            .der
            .into_iter()
            .map(|d| Der {
                bus: d.bus,
                p_hat: d.p_hat,
                q_hat: d.q_hat.unwrap_or(Q_HAT_FACTOR * d.p_hat),
            })
            .collect();
        Self::new(file.bus, file.line, file.v0, ders)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FeederFileOut {
            v0: self.v0,
            bus: &self.buses,
            line: &self.lines,
            der: &self.ders,
        })
        .expect("feeder serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    /// Parent bus and connecting line index of `bus`; `None` for the substation.
    pub fn parent(&self, bus: usize) -> Option<(usize, usize)> {
        self.parent[bus]
    }

    /// Buses from `bus` up to (excluding) the substation.
    pub fn path_to_root(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(bus), move |&b| self.parent[b].map(|(p, _)| p)).take_while(|&b| b != 0)
    }

    /// Buses ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.n();
        let mut depth = vec![0usize; n + 1];
        for b in 1..=n {
            depth[b] = self.path_to_root(b).count();
        }
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by_key(|&b| (depth[b], b));
        order
    }

    pub fn der_buses(&self) -> Vec<usize> {
        self.ders.iter().map(|d| d.bus).collect()
    }

    pub fn q_hat(&self) -> Vec<f64> {
        self.ders.iter().map(|d| d.q_hat).collect()
    }

    /// Returns a copy with a different DER placement.
    pub fn with_ders(&self, ders: Vec<Der>) -> Result<Self> {
        Self::new(self.buses.clone(), self.lines.clone(), self.v0, ders)
    }
}
