//! IEEE 1547 Volt/VAR rules: odd-symmetric, non-increasing, piecewise-linear
//! maps from local voltage to reactive injection with a deadband of half-width
//! `δ` around `v̄` and saturation at `±q̄` beyond `v̄ ± σ`.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{relu, relu_active, Real};

/// Header line of the rule CSV format.
pub const RULES_CSV_VERSION: &str = "# voltvar-rules v1";

/// Box constraints the standard imposes on rule shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeBounds {
    pub v_bar_min: f64,
    pub v_bar_max: f64,
    pub delta_max: f64,
    /// Minimum `σ − δ`.
    pub sigma_gap: f64,
    pub sigma_max: f64,
}

impl Default for ShapeBounds {
    fn default() -> Self {
        Self {
            v_bar_min: 0.95,
            v_bar_max: 1.05,
            delta_max: 0.03,
            sigma_gap: 0.02,
            sigma_max: 0.18,
        }
    }
}

/// Parameters of one rule. `q̄ = α (σ − δ)` is derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuleParams<T = f64> {
    pub v_bar: T,
    pub delta: T,
    pub sigma: T,
    pub alpha: T,
}

/// Slope of the non-flat segments, `α = q̄ / (σ − δ)`.
pub fn slope_from<T: Real>(q_bar: T, delta: T, sigma: T) -> Result<T> {
    if !(sigma > delta) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            value: sigma.to_f64_lossy(),
            reason: "saturation half-width must exceed the deadband half-width",
        });
    }
    if q_bar < T::zero() {
        return Err(Error::InvalidParameter {
            name: "q_bar",
            value: q_bar.to_f64_lossy(),
            reason: "saturation level must be nonnegative",
        });
    }
    Ok(q_bar / (sigma - delta))
}

/// Active ReLU units of the four-ramp decomposition at a given voltage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RampMask(pub [bool; 4]);

/// Local derivatives of one rule evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RulePartials<T> {
    pub dv: T,
    pub d_v_bar: T,
    pub d_alpha: T,
    pub d_delta: T,
    pub d_sigma: T,
}

impl<T: Real> RuleParams<T> {
    pub fn new(v_bar: T, delta: T, sigma: T, alpha: T) -> Self {
        Self {
            v_bar,
            delta,
            sigma,
            alpha,
        }
    }

    pub fn q_bar(&self) -> T {
        self.alpha * (self.sigma - self.delta)
    }

    /// Direct evaluation of the rule shape.
    pub fn eval_piecewise(&self, v: T) -> T {
        let d = v - self.v_bar;
        if d > self.delta {
            if d >= self.sigma {
                -self.q_bar()
            } else {
                -self.alpha * (d - self.delta)
            }
        } else if d < -self.delta {
            if d <= -self.sigma {
                self.q_bar()
            } else {
                self.alpha * (-d - self.delta)
            }
        } else {
            T::zero()
        }
    }

    /// The four ramp arguments `(v−v̄−δ, v−v̄−σ, v̄−δ−v, v̄−σ−v)`.
    #[inline]
    fn ramp_args(&self, v: T) -> [T; 4] {
        let d = v - self.v_bar;
        [d - self.delta, d - self.sigma, -d - self.delta, -d - self.sigma]
    }

    /// Evaluation as `−α ρ(v−v̄−δ) + α ρ(v−v̄−σ) + α ρ(v̄−δ−v) − α ρ(v̄−σ−v)`.
    pub fn eval_relu(&self, v: T) -> T {
        let [a1, a2, a3, a4] = self.ramp_args(v);
        self.alpha * (-relu(a1) + relu(a2) + relu(a3) - relu(a4))
    }

    pub fn ramp_mask(&self, v: T) -> RampMask {
        RampMask(self.ramp_args(v).map(relu_active))
    }

    /// Derivatives of [`eval_relu`](Self::eval_relu) w.r.t. its input and
    /// parameters, with `ρ'(0) = 0` at kinks and `(v̄, α, δ, σ)` independent.
    pub fn partials(&self, v: T) -> RulePartials<T> {
        let args = self.ramp_args(v);
        let on = |k: usize| if relu_active(args[k]) { T::one() } else { T::zero() };
        let (s1, s2, s3, s4) = (on(0), on(1), on(2), on(3));
        let a = self.alpha;
        let dv = a * (-s1 + s2 - s3 + s4);
        RulePartials {
            dv,
            d_v_bar: -dv,
            d_alpha: -relu(args[0]) + relu(args[1]) + relu(args[2]) - relu(args[3]),
            d_delta: a * (s1 - s3),
            d_sigma: a * (s4 - s2),
        }
    }

    /// Smallest distance from `v` to any of the four breakpoints.
    pub fn kink_distance(&self, v: T) -> T {
        self.ramp_args(v).iter().fold(T::infinity(), |m, a| m.min(a.abs()))
    }
}

/// Which shape constraint a violation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeConstraint {
    /// `0.95 ≤ v̄ ≤ 1.05`
    CenterVoltage,
    /// `0 ≤ δ ≤ 0.03`
    Deadband,
    /// `δ + 0.02 ≤ σ ≤ 0.18`
    Saturation,
    /// `0 ≤ q̄ ≤ q̂`
    Capability,
    /// `α ≥ 0`
    Slope,
}

impl fmt::Display for ShapeConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeConstraint::CenterVoltage => "center voltage bounds",
            ShapeConstraint::Deadband => "deadband bounds",
            ShapeConstraint::Saturation => "saturation bounds",
            ShapeConstraint::Capability => "reactive capability",
            ShapeConstraint::Slope => "nonnegative slope",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub bus: usize,
    pub constraint: ShapeConstraint,
    /// Amount by which the constraint is exceeded (positive).
    pub margin: f64,
}

/// Per-DER rules, ordered by ascending bus id.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleSet<T = f64> {
    pub buses: Vec<usize>,
    pub v_bar: Vec<T>,
    pub alpha: Vec<T>,
    pub delta: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> RuleSet<T> {
    pub fn uniform(buses: &[usize], v_bar: T, delta: T, sigma: T, alpha: T) -> Self {
        let k = buses.len();
        Self {
            buses: buses.to_vec(),
            v_bar: vec![v_bar; k],
            alpha: vec![alpha; k],
            delta: vec![delta; k],
            sigma: vec![sigma; k],
        }
    }

    /// Default rules of the standard: `v̄ = 1`, `δ = 0.02`, `σ = 0.08`, `q̄ = q̂`.
    pub fn ieee_default(buses: &[usize], q_hat: &[T]) -> Self {
        let mut rs = Self::uniform(buses, T::one(), T::lit(0.02), T::lit(0.08), T::zero());
        for (a, &q) in rs.alpha.iter_mut().zip(q_hat) {
            *a = q / T::lit(0.06);
        }
        rs
    }

    /// Zero-slope rules, i.e. no reactive support.
    pub fn flat(buses: &[usize]) -> Self {
        Self::uniform(buses, T::one(), T::lit(0.02), T::lit(0.08), T::zero())
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn get(&self, i: usize) -> RuleParams<T> {
        RuleParams::new(self.v_bar[i], self.delta[i], self.sigma[i], self.alpha[i])
    }

    pub fn q_bar(&self) -> Vec<T> {
        (0..self.len()).map(|i| self.get(i).q_bar()).collect()
    }

    /// Flattened design vector `z = [v̄; α; δ; σ]`.
    pub fn to_vector(&self) -> Vec<T> {
        let mut z = Vec::with_capacity(4 * self.len());
        z.extend_from_slice(&self.v_bar);
        z.extend_from_slice(&self.alpha);
        z.extend_from_slice(&self.delta);
        z.extend_from_slice(&self.sigma);
        z
    }

    pub fn from_vector(buses: &[usize], z: &[T]) -> Result<Self> {
        let k = buses.len();
        if z.len() != 4 * k {
            return Err(Error::Dimension {
                what: "rule parameter vector",
                expected: 4 * k,
                got: z.len(),
            });
        }
        Ok(Self {
            buses: buses.to_vec(),
            v_bar: z[..k].to_vec(),
            alpha: z[k..2 * k].to_vec(),
            delta: z[2 * k..3 * k].to_vec(),
            sigma: z[3 * k..].to_vec(),
        })
    }

    /// Evaluates every rule at its own bus voltage.
    pub fn eval(&self, v_der: &[T]) -> Vec<T> {
        v_der.iter().enumerate().map(|(i, &v)| self.get(i).eval_relu(v)).collect()
    }

    pub fn cast<U: Real>(&self) -> RuleSet<U> {
        use crate::scalar::cast_vec;
        RuleSet {
            buses: self.buses.clone(),
            v_bar: cast_vec(&self.v_bar),
            alpha: cast_vec(&self.alpha),
            delta: cast_vec(&self.delta),
            sigma: cast_vec(&self.sigma),
        }
    }
}

/// Absolute slack allowed when checking shape constraints on solver output.
pub const SHAPE_TOL: f64 = 1e-9;

/// Checks the standard's shape constraints; empty means compliant.
pub fn validate_1547<T: Real>(rules: &RuleSet<T>, q_hat: &[T]) -> Vec<Violation> {
    validate_1547_with(rules, q_hat, &ShapeBounds::default(), SHAPE_TOL)
}

pub fn validate_1547_with<T: Real>(rules: &RuleSet<T>, q_hat: &[T], b: &ShapeBounds, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..rules.len() {
        let p = rules.get(i);
        let f = |x: T| x.to_f64_lossy();
        let (v_bar, delta, sigma, alpha) = (f(p.v_bar), f(p.delta), f(p.sigma), f(p.alpha));
        let q_bar = f(p.q_bar());
        let q_max = q_hat.get(i).map_or(f64::INFINITY, |&q| f(q));
        let checks = [
            (ShapeConstraint::CenterVoltage, (b.v_bar_min - v_bar).max(v_bar - b.v_bar_max)),
            (ShapeConstraint::Deadband, (-delta).max(delta - b.delta_max)),
            (ShapeConstraint::Saturation, (delta + b.sigma_gap - sigma).max(sigma - b.sigma_max)),
            (ShapeConstraint::Capability, (-q_bar).max(q_bar - q_max)),
            (ShapeConstraint::Slope, -alpha),
        ];
        for (constraint, excess) in checks {
            if excess > tol || excess.is_nan() {
                out.push(Violation {
                    bus: rules.buses[i],
                    constraint,
                    margin: excess,
                });
            }
        }
    }
    out
}

impl RuleSet<f64> {
    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        writeln!(buf, "{RULES_CSV_VERSION}").unwrap();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["bus", "v_bar", "delta", "sigma", "alpha", "q_bar"]).unwrap();
            for i in 0..self.len() {
                let p = self.get(i);
                w.write_record([
                    self.buses[i].to_string(),
                    p.v_bar.to_string(),
                    p.delta.to_string(),
                    p.sigma.to_string(),
                    p.alpha.to_string(),
                    p.q_bar().to_string(),
                ])
                .unwrap();
            }
            w.flush().unwrap();
        }
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv_str(text: &str, context: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == RULES_CSV_VERSION => {}
            _ => return Err(Error::parse(context, 1, format!("expected version line `{RULES_CSV_VERSION}`"))),
        }
        let body = text.split_once('\n').map_or("", |(_, rest)| rest);
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::parse(context, 2, e.to_string()))?.clone();
        let expected = ["bus", "v_bar", "delta", "sigma", "alpha", "q_bar"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::parse(context, 2, format!("expected columns {}", expected.join(","))));
        }
        let mut rs = RuleSet::uniform(&[], 0.0, 0.0, 0.0, 0.0);
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 3;
            let rec = rec.map_err(|e| Error::parse(context, line, e.to_string()))?;
            let field = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(context, line, format!("column {}: {e}", expected[k])))
            };
            let bus = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(context, line, format!("column bus: {e}")))?;
            let (v_bar, delta, sigma, alpha, q_bar) = (field(1)?, field(2)?, field(3)?, field(4)?, field(5)?);
            let implied = alpha * (sigma - delta);
            if (implied - q_bar).abs() > 1e-9 * (1.0 + q_bar.abs()) {
                return Err(Error::parse(
                    context,
                    line,
                    format!("q_bar {q_bar} inconsistent with alpha*(sigma-delta) = {implied}"),
                ));
            }
            if rs.buses.last().is_some_and(|&b| b >= bus) {
                return Err(Error::parse(context, line, "bus ids must be strictly ascending"));
            }
            rs.buses.push(bus);
            rs.v_bar.push(v_bar);
            rs.delta.push(delta);
            rs.sigma.push(sigma);
            rs.alpha.push(alpha);
        }
        Ok(rs)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }
}
