//! Closed-form analytics for the five-level absorbing chain.
//!
//! With transient block `Q` (SAFE..CRITICAL) and absorbing column `R`:
//! `N = (I - Q)^-1`, absorption probabilities `B = N R`, expected steps to
//! absorption `t = N 1`. Finite-horizon probabilities are the VIOLATED column
//! of `P^h`, computed by repeated matrix-vector products.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{TransitionMatrix, LEVELS};
use crate::linalg;
use crate::state::RiskLevel;

const TRANSIENT: usize = LEVELS - 1;
const V: usize = LEVELS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbsorbingDecomposition {
    /// Transient-to-transient block, rows/columns in SAFE..CRITICAL order.
    pub q: [[f64; TRANSIENT]; TRANSIENT],
    /// Transient-to-VIOLATED column.
    pub r: [f64; TRANSIENT],
}

impl AbsorbingDecomposition {
    /// Reassembles the full 5×5 matrix.
    pub fn to_matrix(&self) -> [[f64; LEVELS]; LEVELS] {
        let mut p = [[0.0; LEVELS]; LEVELS];
        for i in 0..TRANSIENT {
            p[i][..TRANSIENT].copy_from_slice(&self.q[i]);
            p[i][V] = self.r[i];
        }
        p[V][V] = 1.0;
        p
    }
}

fn first_order_rows(p: &TransitionMatrix) -> Result<[[f64; LEVELS]; LEVELS]> {
    if p.order() != 1 {
        return Err(Error::NotFirstOrder(p.order()));
    }
    let mut out = [[0.0; LEVELS]; LEVELS];
    out.copy_from_slice(p.rows());
    Ok(out)
}

pub fn decompose(p: &TransitionMatrix) -> Result<AbsorbingDecomposition> {
    let rows = first_order_rows(p)?;
    let absorbing = rows[V][..V].iter().all(|x| x.abs() <= 1e-12) && (rows[V][V] - 1.0).abs() <= 1e-12;
    if !absorbing {
        return Err(Error::NotAbsorbing);
    }
    let mut q = [[0.0; TRANSIENT]; TRANSIENT];
    let mut r = [0.0; TRANSIENT];
    for i in 0..TRANSIENT {
        q[i].copy_from_slice(&rows[i][..TRANSIENT]);
        r[i] = rows[i][V];
    }
    Ok(AbsorbingDecomposition { q, r })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbsorptionReport {
    pub fundamental: [[f64; TRANSIENT]; TRANSIENT],
    pub absorption: [f64; TRANSIENT],
    pub mean_steps: [f64; TRANSIENT],
}

impl AbsorptionReport {
    /// `(I - Q) N - I`, largest absolute entry.
    pub fn residual(&self, dec: &AbsorbingDecomposition) -> f64 {
        let mut i_minus_q = linalg::identity::<TRANSIENT>();
        for i in 0..TRANSIENT {
            for j in 0..TRANSIENT {
                i_minus_q[i][j] -= dec.q[i][j];
            }
        }
        let prod = linalg::mat_mul(&i_minus_q, &self.fundamental);
        let id = linalg::identity::<TRANSIENT>();
        prod.iter()
            .flatten()
            .zip(id.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn absorption_report(dec: &AbsorbingDecomposition) -> Result<AbsorptionReport> {
    let mut i_minus_q = linalg::identity::<TRANSIENT>();
    for i in 0..TRANSIENT {
        for j in 0..TRANSIENT {
            i_minus_q[i][j] -= dec.q[i][j];
        }
    }
    let fundamental = linalg::invert(&i_minus_q).map_err(|s| {
        Error::SingularChain(RiskLevel::from_rank(s.column).expect("transient column"))
    })?;
    let absorption = linalg::mat_vec(&fundamental, &dec.r);
    let mean_steps = linalg::mat_vec(&fundamental, &[1.0; TRANSIENT]);
    Ok(AbsorptionReport {
        fundamental,
        absorption,
        mean_steps,
    })
}

/// `values[h - 1][level]` = P(VIOLATED within h steps | level), h = 1..=H.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonCurve {
    values: Vec<[f64; LEVELS]>,
}

impl HorizonCurve {
    pub fn max_horizon(&self) -> usize {
        self.values.len()
    }

    /// Probability at horizon `h` (1-based).
    pub fn at(&self, level: RiskLevel, h: usize) -> f64 {
        self.values[h - 1][level.rank()]
    }

    /// All five levels at horizon `h`.
    pub fn column(&self, h: usize) -> [f64; LEVELS] {
        self.values[h - 1]
    }

    /// `level,h,probability` rows, level-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,h,probability\n");
        for level in RiskLevel::ALL {
            for (h, col) in self.values.iter().enumerate() {
                writeln!(out, "{},{},{}", level, h + 1, col[level.rank()]).expect("write to String");
            }
        }
        out
    }
}

pub fn finite_horizon(p: &TransitionMatrix, horizon: usize) -> Result<HorizonCurve> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let rows = first_order_rows(p)?;
    let mut v = [0.0; LEVELS];
    v[V] = 1.0;
    let values = (0..horizon)
        .map(|_| {
            v = linalg::mat_vec(&rows, &v);
            v
        })
        .collect();
    Ok(HorizonCurve { values })
}

/// Transient levels whose `h`-step violation probability exceeds `theta`.
pub fn points_of_no_return(p: &TransitionMatrix, horizon: usize, theta: f64) -> Result<Vec<RiskLevel>> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidConfig(format!("theta must be in [0, 1), got {theta}")));
    }
    let curve = finite_horizon(p, horizon)?;
    Ok(RiskLevel::TRANSIENT
        .into_iter()
        .filter(|l| curve.at(*l, horizon) > theta)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use RiskLevel::*;

    fn reference() -> TransitionMatrix {
        TransitionMatrix::reference_aggregate()
    }

    /// Plain repeated matrix multiplication, kept apart from the vector recursion.
    fn matrix_power_last_column(p: &TransitionMatrix, h: usize) -> [f64; LEVELS] {
        let mut base = [[0.0; LEVELS]; LEVELS];
        base.copy_from_slice(p.rows());
        let mut acc = linalg::identity::<LEVELS>();
        for _ in 0..h {
            acc = linalg::mat_mul(&acc, &base);
        }
        std::array::from_fn(|i| acc[i][V])
    }

    #[test]
    fn decomposition_of_reference_matrix() {
        let dec = decompose(&reference()).unwrap();
        assert_eq!(dec.q[3], [0.0, 0.0, 0.0, 0.93]);
        assert_eq!(dec.r[3], 0.07);
        let mut rows = [[0.0; LEVELS]; LEVELS];
        rows.copy_from_slice(reference().rows());
        assert_eq!(dec.to_matrix(), rows);
    }

    #[test]
    fn non_absorbing_matrix_rejected() {
        let p = TransitionMatrix::from_rows(1, vec![[0.2; 5]; 5]).unwrap();
        assert!(matches!(decompose(&p), Err(Error::NotAbsorbing)));
    }

    #[test]
    fn reference_absorbs_with_certainty() {
        let dec = decompose(&reference()).unwrap();
        let rep = absorption_report(&dec).unwrap();
        for b in rep.absorption {
            assert!((b - 1.0).abs() < 1e-9);
        }
        assert!(rep.residual(&dec) < 1e-9);
        assert!((rep.mean_steps[3] - 1.0 / 0.07).abs() < 1e-9);
        assert!(rep.fundamental.iter().flatten().all(|x| *x >= 0.0));
    }

    #[test]
    fn immediate_absorption_gives_identity() {
        let mut rows = vec![[0.0, 0.0, 0.0, 0.0, 1.0]; 5];
        rows[4] = [0.0, 0.0, 0.0, 0.0, 1.0];
        let p = TransitionMatrix::from_rows(1, rows).unwrap();
        let rep = absorption_report(&decompose(&p).unwrap()).unwrap();
        assert_eq!(rep.fundamental, linalg::identity::<4>());
        assert_eq!(rep.mean_steps, [1.0; 4]);
    }

    #[test]
    fn closed_class_is_singular() {
        let mut rows = reference().rows().to_vec();
        rows[0] = [1.0, 0.0, 0.0, 0.0, 0.0];
        let p = TransitionMatrix::from_rows(1, rows).unwrap();
        let dec = decompose(&p).unwrap();
        assert_eq!(dec.r[0], 0.0);
        assert!(matches!(absorption_report(&dec), Err(Error::SingularChain(Safe))));
        // Finite horizon remains defined.
        assert_eq!(finite_horizon(&p, 5).unwrap().at(Safe, 5), 0.0);
    }

    #[test]
    fn one_step_is_the_last_column() {
        let c = finite_horizon(&reference(), 1).unwrap();
        assert_eq!(c.column(1), [0.0, 0.13, 0.07, 0.07, 1.0]);
    }

    #[test]
    fn five_step_values() {
        // Hand recursion on the rounded matrix: MILD 0.45393, CRITICAL 1 - 0.93^5.
        let c = finite_horizon(&reference(), 5).unwrap();
        assert!((c.at(Mild, 5) - 0.454).abs() < 1e-3);
        assert!((c.at(Critical, 5) - 0.304).abs() < 1e-3);
        assert!((c.at(Critical, 5) - (1.0 - 0.93f64.powi(5))).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_matrix_powers() {
        let p = reference();
        let c = finite_horizon(&p, 30).unwrap();
        for h in 1..=30 {
            let exact = matrix_power_last_column(&p, h);
            for l in RiskLevel::ALL {
                assert!((c.at(*l, h) - exact[l.rank()]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn long_horizon_converges_to_absorption() {
        let p = reference();
        let b = absorption_report(&decompose(&p).unwrap()).unwrap().absorption;
        let c = finite_horizon(&p, 200).unwrap();
        for (i, l) in RiskLevel::TRANSIENT.iter().enumerate() {
            assert!((c.at(*l, 200) - b[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn curve_is_monotone_and_violated_is_one() {
        let c = finite_horizon(&reference(), 25).unwrap();
        for h in 2..=25 {
            for l in RiskLevel::ALL {
                assert!(c.at(*l, h) >= c.at(*l, h - 1));
            }
            assert_eq!(c.at(Violated, h), 1.0);
        }
    }

    #[test]
    fn reference_has_no_points_of_no_return() {
        assert!(points_of_no_return(&reference(), 5, 0.85).unwrap().is_empty());
        assert_eq!(
            points_of_no_return(&reference(), 5, 0.0).unwrap(),
            vec![Safe, Mild, Elevated, Critical]
        );
        // SAFE cannot violate in one step.
        assert_eq!(
            points_of_no_return(&reference(), 1, 0.0).unwrap(),
            vec![Mild, Elevated, Critical]
        );
    }

    #[test]
    fn csv_layout() {
        let csv = finite_horizon(&reference(), 2).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "level,h,probability");
        assert_eq!(lines[1], "SAFE,1,0");
        assert_eq!(lines[3], "MILD,1,0.13");
        assert_eq!(lines.len(), 1 + 5 * 2);
    }

    #[test]
    fn higher_order_input_rejected() {
        let m = crate::estimate::embed_higher_order(&[vec![Safe, Mild, Violated]], 2).unwrap();
        assert!(matches!(finite_horizon(&m, 3), Err(Error::NotFirstOrder(2))));
    }
}
