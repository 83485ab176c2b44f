//! Linearized (LinDistFlow) feeder model.
//!
//! The model is `v ≈ X q + ṽ` with `ṽ = R p̃ + X q̃ + v₀ 1`, where
//! `R[n][m] = 2 Σ r` and `X[n][m] = 2 Σ x` over the lines shared by the
//! substation paths of buses `n` and `m`. With the factor of two, `v` is the
//! squared voltage magnitude in pu (for magnitudes near one it tracks
//! `1 + 2 (|V| − 1)`), and `v₀` is the squared substation magnitude. Every
//! downstream quantity labelled "voltage" in this crate uses that convention,
//! including the AC validation which reports `|V|²`.

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::Matrix;
use crate::scalar::{cast_vec, Real};

/// Uncontrollable loading `θ = [p̃; q̃]` on buses `1..=N` (index `n − 1`).
/// Injections are positive, so loads are negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario<T = f64> {
    pub p_tilde: Vec<T>,
    pub q_tilde: Vec<T>,
}

impl<T: Real> Scenario<T> {
    pub fn new(p_tilde: Vec<T>, q_tilde: Vec<T>) -> Result<Self> {
        let s = Self { p_tilde, q_tilde };
        s.check(s.p_tilde.len())?;
        Ok(s)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            p_tilde: vec![T::zero(); n],
            q_tilde: vec![T::zero(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.p_tilde.len()
    }

    pub fn check(&self, n: usize) -> Result<()> {
        for (what, v) in [("scenario p_tilde", &self.p_tilde), ("scenario q_tilde", &self.q_tilde)] {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what, index });
            }
        }
        Ok(())
    }

    pub fn scaled(&self, a: T) -> Self {
        Self {
            p_tilde: self.p_tilde.iter().map(|&x| a * x).collect(),
            q_tilde: self.q_tilde.iter().map(|&x| a * x).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Scenario<U> {
        Scenario {
            p_tilde: cast_vec(&self.p_tilde),
            q_tilde: cast_vec(&self.q_tilde),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridModel<T = f64> {
    pub r: Matrix<T>,
    pub x: Matrix<T>,
    /// Linearization base, `v₀²`.
    pub v0: T,
    /// DER bus ids (1-based), ascending.
    pub der_buses: Vec<usize>,
    /// Reactive capability of each DER, aligned with `der_buses`.
    pub q_hat: Vec<T>,
    der_index: Vec<usize>,
    x_der: Matrix<T>,
    x_cols: Matrix<T>,
}

/// Builds `R` and `X` from the path-sum formula and checks positive definiteness.
pub fn build_sensitivities<T: Real>(feeder: &FeederModel) -> Result<GridModel<T>> {
    let n = feeder.n();
    // ancestors[b] = lines on the path from the substation to bus b, keyed by child bus.
    let paths: Vec<Vec<usize>> = (0..=n).map(|b| feeder.path_to_root(b).collect()).collect();
    let mut r = Matrix::zeros(n, n);
    let mut x = Matrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let (mut rs, mut xs) = (0.0f64, 0.0f64);
            // A line belongs to a path iff its child bus does.
            for &b in &paths[i] {
                if paths[j].contains(&b) {
                    let (_, li) = feeder.parent(b).expect("non-root bus has a parent");
                    rs += feeder.lines[li].r;
                    xs += feeder.lines[li].x;
                }
            }
            let (rv, xv) = (T::lit(2.0 * rs), T::lit(2.0 * xs));
            r[(i - 1, j - 1)] = rv;
            r[(j - 1, i - 1)] = rv;
            x[(i - 1, j - 1)] = xv;
            x[(j - 1, i - 1)] = xv;
        }
    }
    for (name, m) in [("R", &r), ("X", &x)] {
        let min_ev = m.symmetric_eigenvalues()[0];
        if !(min_ev > T::zero()) {
            return Err(Error::NotPositiveDefinite(name, min_ev.to_f64_lossy()));
        }
    }
    let der_buses = feeder.der_buses();
    let q_hat = cast_vec(&feeder.q_hat());
    GridModel::from_parts(r, x, T::lit(feeder.v0 * feeder.v0), der_buses, q_hat)
}

impl<T: Real> GridModel<T> {
    /// Assembles a model from explicit matrices (used for hand-built test plants).
    pub fn from_parts(r: Matrix<T>, x: Matrix<T>, v0: T, der_buses: Vec<usize>, q_hat: Vec<T>) -> Result<Self> {
        let n = r.rows();
        for (what, m) in [("R", &r), ("X", &x)] {
            if m.rows() != n || m.cols() != n {
                return Err(Error::Dimension {
                    what: if what == "R" { "R matrix" } else { "X matrix" },
                    expected: n,
                    got: m.cols(),
                });
            }
        }
        if q_hat.len() != der_buses.len() {
            return Err(Error::Dimension {
                what: "q_hat",
                expected: der_buses.len(),
                got: q_hat.len(),
            });
        }
        if der_buses.windows(2).any(|w| w[0] >= w[1]) || der_buses.iter().any(|&b| b == 0 || b > n) {
            return Err(Error::Topology("DER buses must be ascending ids in 1..=N".into()));
        }
        let der_index: Vec<usize> = der_buses.iter().map(|&b| b - 1).collect();
        let x_der = x.select(&der_index, &der_index);
        let all: Vec<usize> = (0..n).collect();
        let x_cols = x.select(&all, &der_index);
        Ok(Self {
            r,
            x,
            v0,
            der_buses,
            q_hat,
            der_index,
            x_der,
            x_cols,
        })
    }

    pub fn n(&self) -> usize {
        self.r.rows()
    }

    pub fn num_ders(&self) -> usize {
        self.der_buses.len()
    }

    /// Vector positions (`bus − 1`) of the DER buses.
    pub fn der_index(&self) -> &[usize] {
        &self.der_index
    }

    /// `X` restricted to DER rows and columns.
    pub fn x_der(&self) -> &Matrix<T> {
        &self.x_der
    }

    /// `X` restricted to DER columns (N × #DER).
    pub fn x_der_cols(&self) -> &Matrix<T> {
        &self.x_cols
    }

    /// Scatters DER injections into a full length-N vector.
    pub fn embed(&self, q_der: &[T]) -> Vec<T> {
        let mut q = vec![T::zero(); self.n()];
        for (&i, &v) in self.der_index.iter().zip(q_der) {
            q[i] = v;
        }
        q
    }

    pub fn gather(&self, full: &[T]) -> Vec<T> {
        self.der_index.iter().map(|&i| full[i]).collect()
    }

    /// `ṽ = R p̃ + X q̃ + v₀ 1`.
    pub fn uncompensated_voltage(&self, s: &Scenario<T>) -> Result<Vec<T>> {
        s.check(self.n())?;
        let rp = self.r.matvec(&s.p_tilde);
        let xq = self.x.matvec(&s.q_tilde);
        Ok(rp.iter().zip(&xq).map(|(&a, &b)| a + b + self.v0).collect())
    }

    /// `ℓ = (q + q̃)ᵀ R (q + q̃) + p̃ᵀ R p̃` for a full length-N injection vector `q`.
    pub fn approx_losses(&self, q: &[T], s: &Scenario<T>) -> Result<T> {
        s.check(self.n())?;
        if q.len() != self.n() {
            return Err(Error::Dimension {
                what: "reactive injections",
                expected: self.n(),
                got: q.len(),
            });
        }
        let qt: Vec<T> = q.iter().zip(&s.q_tilde).map(|(&a, &b)| a + b).collect();
        Ok(self.r.quad_form(&qt) + self.r.quad_form(&s.p_tilde))
    }

    /// Voltages `X q + ṽ` for DER injections `q_der`.
    pub fn voltage_with(&self, q_der: &[T], v_tilde: &[T]) -> Vec<T> {
        let xq = self.x_cols.matvec(q_der);
        xq.iter().zip(v_tilde).map(|(&a, &b)| a + b).collect()
    }

    pub fn cast<U: Real>(&self) -> GridModel<U> {
        GridModel::from_parts(
            self.r.cast(),
            self.x.cast(),
            U::lit(self.v0.to_f64_lossy()),
            self.der_buses.clone(),
            cast_vec(&self.q_hat),
        )
        .expect("cast preserves a valid model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Bus, Der, Line};

    fn chain(lines: &[(f64, f64)]) -> FeederModel {
        let buses = (0..=lines.len())
            .map(|id| Bus {
                id,
                name: None,
                p_nom: 0.0,
                q_nom: 0.0,
            })
            .collect();
        let ls = lines
            .iter()
            .enumerate()
            .map(|(i, &(r, x))| Line { from: i, to: i + 1, r, x })
            .collect();
        let ders = vec![Der {
            bus: lines.len(),
            p_hat: 1.0,
            q_hat: 0.46,
        }];
        FeederModel::new(buses, ls, 1.0, ders).unwrap()
    }

    #[test]
    fn two_bus_sensitivities() {
        let m: GridModel = build_sensitivities(&chain(&[(0.01, 0.02)])).unwrap();
        assert_eq!(m.r, Matrix::from_rows(&[[0.02]]));
        assert_eq!(m.x, Matrix::from_rows(&[[0.04]]));
    }

    #[test]
    fn three_bus_chain_common_path() {
        let (x1, x2) = (0.03, 0.05);
        let m: GridModel = build_sensitivities(&chain(&[(0.01, x1), (0.02, x2)])).unwrap();
        assert_eq!(m.x, Matrix::from_rows(&[[2.0 * x1, 2.0 * x1], [2.0 * x1, 2.0 * (x1 + x2)]]));
    }

    #[test]
    fn ieee37_matrices_symmetric_positive() {
        let m: GridModel = build_sensitivities(&FeederModel::ieee37()).unwrap();
        assert!(m.r.is_symmetric() && m.x.is_symmetric());
        assert!(m.r.as_slice().iter().all(|&v| v > 0.0));
        assert!(m.x.as_slice().iter().all(|&v| v > 0.0));
        assert!(m.x.symmetric_eigenvalues()[0] > 0.0);
    }

    #[test]
    fn zero_loading_gives_v0() {
        let m: GridModel = build_sensitivities(&FeederModel::ieee37()).unwrap();
        let v = m.uncompensated_voltage(&Scenario::zeros(m.n())).unwrap();
        assert!(v.iter().all(|&x| x == m.v0));
    }

    #[test]
    fn single_load_voltage_drop() {
        let m: GridModel = build_sensitivities(&chain(&[(0.01, 0.02)])).unwrap();
        let s = Scenario::new(vec![-0.5], vec![0.0]).unwrap();
        let v = m.uncompensated_voltage(&s).unwrap();
        assert!((v[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m: GridModel = build_sensitivities(&chain(&[(0.01, 0.02)])).unwrap();
        let s = Scenario::<f64>::zeros(2);
        assert!(matches!(m.uncompensated_voltage(&s), Err(Error::Dimension { .. })));
        assert!(matches!(
            m.approx_losses(&[0.0, 0.0], &Scenario::zeros(1)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn losses_vanish_when_q_cancels_q_tilde() {
        let m: GridModel = build_sensitivities(&FeederModel::ieee37()).unwrap();
        let qt: Vec<f64> = (0..m.n()).map(|i| -0.01 * (i as f64 % 5.0)).collect();
        let s = Scenario::new(vec![0.0; m.n()], qt.clone()).unwrap();
        let q: Vec<f64> = qt.iter().map(|v| -v).collect();
        assert_eq!(m.approx_losses(&q, &s).unwrap(), 0.0);
        let l0 = m.approx_losses(&vec![0.0; m.n()], &s).unwrap();
        assert!((l0 - m.r.quad_form(&qt)).abs() < 1e-18);
    }

    #[test]
    fn f32_model_builds() {
        let m: GridModel<f32> = build_sensitivities(&FeederModel::ieee37()).unwrap();
        let m64: GridModel<f64> = build_sensitivities(&FeederModel::ieee37()).unwrap();
        assert!((m.x[(5, 7)] as f64 - m64.x[(5, 7)]).abs() < 1e-7);
    }
}
