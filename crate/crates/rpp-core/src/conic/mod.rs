//! Solver-agnostic second-order cone programs and the solve contract.
//!
//! A [`ConicProgram`] holds linear equalities, linear inequalities, SOC
//! constraints of the form `|| M x + m ||_2 <= p' x + p0`, variable bounds,
//! and an objective that is linear plus an optional sum of squared affine
//! terms. [`solve`] runs the built-in homogeneous self-dual interior-point
//! method; an external backend can be swapped in behind the same contract.

mod ipm;

pub use ipm::{RowPatch, SolveWorkspace, Tolerances};

use serde::Serialize;
use std::fmt::Write as _;

/// Sparse linear expression over the program variables: `sum coeffs[i] * x[cols[i]]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> Self {
        let mut r = Self::new();
        for &(c, v) in pairs {
            r.push(c, v);
        }
        r
    }

    /// Append a term. Zero coefficients are kept: they pin down the sparsity
    /// pattern for workspaces that rewrite values in place.
    pub fn push(&mut self, col: usize, val: f64) {
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.cols
            .iter()
            .zip(&self.vals)
            .map(|(&c, &v)| v * x[c])
            .sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|v| v * k).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// One convex quadratic objective term `weight * (expr . x + offset)^2`.
#[derive(Debug, Clone)]
pub struct QuadTerm {
    pub weight: f64,
    pub expr: SparseRow,
    pub offset: f64,
}

/// `|| norm_rows . x + norm_offsets ||_2 <= rhs . x + rhs_offset`
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub norm_rows: Vec<SparseRow>,
    pub norm_offsets: Vec<f64>,
    pub rhs: SparseRow,
    pub rhs_offset: f64,
}

/// A continuous SOC program in natural (pre-standard-form) shape.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub n_vars: usize,
    /// linear objective, minimized
    pub objective: Vec<f64>,
    pub quad_terms: Vec<QuadTerm>,
    /// `row . x = rhs`
    pub eq: Vec<(SparseRow, f64)>,
    /// `row . x <= rhs`
    pub ineq: Vec<(SparseRow, f64)>,
    pub cones: Vec<SocConstraint>,
    /// per-variable `(lower, upper)`; use infinities for free
    pub bounds: Vec<(f64, f64)>,
}

impl ConicProgram {
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            objective: vec![0.0; n_vars],
            quad_terms: Vec::new(),
            eq: Vec::new(),
            ineq: Vec::new(),
            cones: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n_vars],
        }
    }

    /// Add a fresh variable, returning its column.
    pub fn add_var(&mut self, lo: f64, hi: f64, obj: f64) -> usize {
        let idx = self.n_vars;
        self.n_vars += 1;
        self.objective.push(obj);
        self.bounds.push((lo, hi));
        idx
    }

    /// Objective value of a candidate point, including quadratic terms.
    pub fn eval_objective(&self, x: &[f64]) -> f64 {
        let mut v: f64 = self
            .objective
            .iter()
            .zip(x)
            .map(|(&c, &xi)| c * xi)
            .sum();
        for t in &self.quad_terms {
            let e = t.expr.dot(x) + t.offset;
            v += t.weight * e * e;
        }
        v
    }

    /// Dump every block in the sectioned `row col value` triplet text format.
    pub fn dump_triplets(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# conic program: {} variables", self.n_vars);
        let _ = writeln!(out, "[objective]");
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                let _ = writeln!(out, "0 {} {:.17e}", j, c);
            }
        }
        let _ = writeln!(out, "[eq]");
        for (i, (row, rhs)) in self.eq.iter().enumerate() {
            for (&c, &v) in row.cols.iter().zip(&row.vals) {
                let _ = writeln!(out, "{} {} {:.17e}", i, c, v);
            }
            let _ = writeln!(out, "{} rhs {:.17e}", i, rhs);
        }
        let _ = writeln!(out, "[ineq]");
        for (i, (row, rhs)) in self.ineq.iter().enumerate() {
            for (&c, &v) in row.cols.iter().zip(&row.vals) {
                let _ = writeln!(out, "{} {} {:.17e}", i, c, v);
            }
            let _ = writeln!(out, "{} rhs {:.17e}", i, rhs);
        }
        let _ = writeln!(out, "[bounds]");
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_finite() || hi.is_finite() {
                let _ = writeln!(out, "{} lo {:.17e} hi {:.17e}", j, lo, hi);
            }
        }
        for (k, cone) in self.cones.iter().enumerate() {
            let _ = writeln!(out, "[cone {}]", k);
            for (i, row) in cone.norm_rows.iter().enumerate() {
                for (&c, &v) in row.cols.iter().zip(&row.vals) {
                    let _ = writeln!(out, "{} {} {:.17e}", i, c, v);
                }
                let _ = writeln!(out, "{} offset {:.17e}", i, cone.norm_offsets[i]);
            }
            for (&c, &v) in cone.rhs.cols.iter().zip(&cone.rhs.vals) {
                let _ = writeln!(out, "rhs {} {:.17e}", c, v);
            }
            let _ = writeln!(out, "rhs offset {:.17e}", cone.rhs_offset);
        }
        let _ = writeln!(out, "[quad]");
        for (k, t) in self.quad_terms.iter().enumerate() {
            for (&c, &v) in t.expr.cols.iter().zip(&t.expr.vals) {
                let _ = writeln!(out, "{} {} {:.17e}", k, c, v);
            }
            let _ = writeln!(out, "{} weight {:.17e} offset {:.17e}", k, t.weight, t.offset);
        }
        out
    }
}

/// Rewrite squared affine objective terms into SOC epigraph form.
///
/// Each term `w (e.x + o)^2` gains an epigraph variable `t` with
/// `|| (e.x + o, (t-1)/2) ||_2 <= (t+1)/2` (exactly `t >= (e.x + o)^2`),
/// and `w t` joins the linear objective. The optimal value is unchanged.
pub fn reformulate_quadratic(p: &ConicProgram) -> ConicProgram {
    let mut out = p.clone();
    let terms = std::mem::take(&mut out.quad_terms);
    for term in terms {
        assert!(
            term.weight >= 0.0,
            "non-PSD quadratic term cannot occur by construction"
        );
        let t = out.add_var(f64::NEG_INFINITY, f64::INFINITY, term.weight);
        let mut half_t_minus = SparseRow::new();
        half_t_minus.push(t, 0.5);
        let mut rhs = SparseRow::new();
        rhs.push(t, 0.5);
        out.cones.push(SocConstraint {
            norm_rows: vec![term.expr.clone(), half_t_minus],
            norm_offsets: vec![term.offset, -0.5],
            rhs,
            rhs_offset: 0.5,
        });
    }
    out
}

/// Solve status for a continuous conic program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Residuals reported with every outcome.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub rel_gap: f64,
}

/// Result of a conic solve, with dual values per row class.
#[derive(Debug, Clone)]
pub struct ConicOutcome {
    pub status: ConicStatus,
    /// primal point (original variables only; epigraph columns stripped)
    pub x: Vec<f64>,
    pub objective: f64,
    /// multiplier per equality row
    pub eq_duals: Vec<f64>,
    /// nonnegative multiplier per inequality row
    pub ineq_duals: Vec<f64>,
    /// `(lambda, pi)` per SOC constraint with `||pi|| <= lambda`, oriented so
    /// that stationarity reads `... + M' pi - p lambda = -c`
    pub cone_duals: Vec<(f64, Vec<f64>)>,
    /// `(lower, upper)` multipliers per variable bound
    pub bound_duals: Vec<(f64, f64)>,
    pub residuals: Residuals,
    /// unbounded ray (status Unbounded) or dual certificate scale
    /// (status Infeasible: eq_duals/ineq_duals/cone_duals hold the certificate
    /// with `b'y + h'z = -1`)
    pub ray: Option<Vec<f64>>,
    pub iterations: usize,
}

impl ConicOutcome {
    /// Dual objective value matching the primal sign convention (minimize).
    pub fn dual_objective(&self, p: &ConicProgram) -> f64 {
        let mut v = 0.0;
        for ((_, rhs), &y) in p.eq.iter().zip(&self.eq_duals) {
            v -= rhs * y;
        }
        for ((_, rhs), &z) in p.ineq.iter().zip(&self.ineq_duals) {
            v -= rhs * z;
        }
        for (cone, (lam, pi)) in p.cones.iter().zip(&self.cone_duals) {
            v -= cone.rhs_offset * lam;
            for (o, pv) in cone.norm_offsets.iter().zip(pi) {
                v += o * pv;
            }
        }
        for ((lo, hi), (zl, zu)) in p.bounds.iter().zip(&self.bound_duals) {
            if lo.is_finite() {
                v += lo * zl;
            }
            if hi.is_finite() {
                v -= hi * zu;
            }
        }
        v
    }
}

/// Solve a conic program with the built-in interior-point backend.
///
/// Deterministic for identical inputs and settings. Quadratic objective
/// terms are reformulated to epigraph form internally; the reported primal
/// point and objective refer to the original variables.
pub fn solve(p: &ConicProgram, tol: &Tolerances) -> ConicOutcome {
    if p.quad_terms.is_empty() {
        let mut ws = SolveWorkspace::new(p);
        ws.solve_base(tol)
    } else {
        let n_orig = p.n_vars;
        let refm = reformulate_quadratic(p);
        let mut ws = SolveWorkspace::new(&refm);
        let mut out = ws.solve_base(tol);
        if out.status == ConicStatus::Optimal {
            out.objective = p.eval_objective(&out.x[..n_orig]);
        }
        out.x.truncate(n_orig);
        out.bound_duals.truncate(n_orig);
        if let Some(r) = &mut out.ray {
            r.truncate(n_orig);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn min_x_above_bound() {
        // min x s.t. x >= 3
        let mut p = ConicProgram::new(1);
        p.objective[0] = 1.0;
        p.bounds[0] = (3.0, f64::INFINITY);
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Optimal);
        assert!((out.x[0] - 3.0).abs() < 1e-6, "x = {}", out.x[0]);
        assert!((out.bound_duals[0].0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn euclidean_norm_epigraph() {
        // min t s.t. ||(3,4)|| <= t
        let mut p = ConicProgram::new(1);
        p.objective[0] = 1.0;
        p.cones.push(SocConstraint {
            norm_rows: vec![SparseRow::new(), SparseRow::new()],
            norm_offsets: vec![3.0, 4.0],
            rhs: SparseRow::from_pairs(&[(0, 1.0)]),
            rhs_offset: 0.0,
        });
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Optimal);
        assert!((out.x[0] - 5.0).abs() < 1e-6, "t = {}", out.x[0]);
    }

    #[test]
    fn crossing_bounds_are_infeasible() {
        // x <= 0 and x >= 1
        let mut p = ConicProgram::new(1);
        p.ineq.push((SparseRow::from_pairs(&[(0, 1.0)]), 0.0));
        p.ineq.push((SparseRow::from_pairs(&[(0, -1.0)]), -1.0));
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Infeasible);
        // certificate: z >= 0 with h'z < 0 after normalization
        let hz: f64 = out.ineq_duals[0] * 0.0 + out.ineq_duals[1] * (-1.0);
        assert!(hz < -0.5, "certificate value {hz}");
    }

    #[test]
    fn unbounded_ray() {
        // min -x, x >= 0
        let mut p = ConicProgram::new(1);
        p.objective[0] = -1.0;
        p.bounds[0] = (0.0, f64::INFINITY);
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Unbounded);
        let ray = out.ray.expect("ray");
        assert!(ray[0] > 0.0);
    }

    #[test]
    fn quadratic_epigraph_floor() {
        // min (x-2)^2 with x in [0,1]: optimum 1 at x = 1
        let mut p = ConicProgram::new(1);
        p.bounds[0] = (0.0, 1.0);
        p.quad_terms.push(QuadTerm {
            weight: 1.0,
            expr: SparseRow::from_pairs(&[(0, 1.0)]),
            offset: -2.0,
        });
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Optimal);
        assert!((out.x[0] - 1.0).abs() < 1e-6);
        assert!((out.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_two_terms_unconstrained() {
        // min (a-l)^2 + (b-u)^2 -> a = l, b = u, value 0
        let mut p = ConicProgram::new(2);
        p.quad_terms.push(QuadTerm {
            weight: 1.0,
            expr: SparseRow::from_pairs(&[(0, 1.0)]),
            offset: 2.5,
        });
        p.quad_terms.push(QuadTerm {
            weight: 1.0,
            expr: SparseRow::from_pairs(&[(1, 1.0)]),
            offset: -7.25,
        });
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Optimal);
        assert!((out.x[0] + 2.5).abs() < 1e-5);
        assert!((out.x[1] - 7.25).abs() < 1e-5);
        assert!(out.objective.abs() < 1e-8);
    }

    #[test]
    fn equality_and_inequality_duals() {
        // min x + y s.t. x + y = 2, x - y <= 0.5, free vars
        let mut p = ConicProgram::new(2);
        p.objective = vec![1.0, 1.0];
        p.eq
            .push((SparseRow::from_pairs(&[(0, 1.0), (1, 1.0)]), 2.0));
        p.ineq
            .push((SparseRow::from_pairs(&[(0, 1.0), (1, -1.0)]), 0.5));
        let out = solve(&p, &tol());
        assert_eq!(out.status, ConicStatus::Optimal);
        assert!((out.objective - 2.0).abs() < 1e-7);
        // stationarity: c + A'y + G'z = 0 per column
        let y = out.eq_duals[0];
        let z = out.ineq_duals[0];
        assert!((1.0 + y + z).abs() < 1e-6);
        assert!((1.0 + y - z).abs() < 1e-6);
    }
}
