//! Branch-and-bound over binaries and SOS1 pairs on top of the conic core.
//!
//! SOS1 pairs are handled by complementarity branching (fix one member of a
//! pair to zero per child), never big-M: the dual multipliers paired here
//! have no a-priori valid bound. Node selection is best-bound with
//! depth-first plunging so incumbents appear early, which lets callers
//! cut off subproblem solves through `objective_limit`.

use crate::conic::{
    reformulate_quadratic, ConicProgram, ConicStatus, RowPatch, SolveWorkspace, SparseRow,
    Tolerances,
};
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

/// A conic program plus integrality structure.
#[derive(Debug, Clone)]
pub struct DiscreteProgram {
    pub base: ConicProgram,
    /// variable indices restricted to {0, 1}; must carry [0, 1] bounds
    pub binaries: Vec<usize>,
    /// pairs of nonnegative variables of which at most one may be nonzero
    pub sos1_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct BnbLimits {
    pub max_nodes: usize,
    pub time_limit: Option<Duration>,
    /// relative optimality gap accepted for the incumbent
    pub mip_gap: f64,
    /// stop as soon as an incumbent crosses this value (in the caller's
    /// sense: above it for Maximize, below it for Minimize)
    pub objective_limit: Option<f64>,
}

impl Default for BnbLimits {
    fn default() -> Self {
        Self {
            max_nodes: 50_000,
            time_limit: None,
            mip_gap: 1e-4,
            objective_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MipStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// an incumbent crossed `objective_limit`; search stopped early
    ObjectiveLimit,
    /// node or time limit hit, or unresolved numerical failures: the
    /// incumbent (if any) is best-effort and the bound is not proven
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct MipSolution {
    pub status: MipStatus,
    /// best integral solution found (empty if none)
    pub x: Vec<f64>,
    /// objective of `x` in the caller's sense
    pub objective: f64,
    /// proven bound in the caller's sense
    pub bound: f64,
    pub nodes: usize,
    /// (parent relaxation bound, node relaxation bound) per solved node,
    /// minimization orientation; used by the bound-monotonicity checks
    pub bound_trace: Vec<(f64, f64)>,
}

/// One open node: a set of fixings relative to the root relaxation.
#[derive(Debug, Clone)]
pub struct BnbNode {
    pub fixings: Vec<Fixing>,
    /// relaxation bound inherited from the parent (minimization sense)
    pub bound: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fixing {
    BinaryZero(usize),
    BinaryOne(usize),
    /// force this SOS1 member to zero
    Sos1Zero(usize),
}

/// A violation found in a node relaxation, in branching priority order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Violation {
    /// (pair index, member values)
    Sos1(usize, f64, f64),
    /// (variable, fractional value)
    Fractional(usize, f64),
}

pub const INT_TOL: f64 = 1e-6;
pub const SOS1_TOL: f64 = 1e-9;

/// Locate the violation to branch on: SOS1 pairs first (largest smaller
/// member), then the most fractional binary.
pub fn find_violation(p: &DiscreteProgram, x: &[f64], fixed: &[Fixing]) -> Option<Violation> {
    let mut best_pair: Option<(usize, f64, f64, f64)> = None;
    for (k, &(a, b)) in p.sos1_pairs.iter().enumerate() {
        let side_fixed = fixed
            .iter()
            .any(|f| matches!(f, Fixing::Sos1Zero(v) if *v == a || *v == b));
        if side_fixed {
            continue;
        }
        let (va, vb) = (x[a].abs(), x[b].abs());
        let viol = va.min(vb);
        if viol > SOS1_TOL && best_pair.map(|(_, _, _, w)| viol > w).unwrap_or(true) {
            best_pair = Some((k, x[a], x[b], viol));
        }
    }
    if let Some((k, va, vb, _)) = best_pair {
        return Some(Violation::Sos1(k, va, vb));
    }
    let mut best_bin: Option<(usize, f64, f64)> = None;
    for &j in &p.binaries {
        let frac = (x[j] - x[j].round()).abs();
        if frac > INT_TOL {
            let dist = (x[j] - x[j].floor() - 0.5).abs();
            if best_bin.map(|(_, _, d)| dist < d).unwrap_or(true) {
                best_bin = Some((j, x[j], dist));
            }
        }
    }
    best_bin.map(|(j, v, _)| Violation::Fractional(j, v))
}

/// Split a node on a violation of its relaxation solution. SOS1 children fix
/// one member each; binary children round the variable down and up.
pub fn branch(
    p: &DiscreteProgram,
    node: &BnbNode,
    relaxation_bound: f64,
    violation: &Violation,
) -> (BnbNode, BnbNode) {
    let child = |fix: Fixing| -> BnbNode {
        let mut fixings = node.fixings.clone();
        fixings.push(fix);
        BnbNode {
            fixings,
            bound: relaxation_bound,
            depth: node.depth + 1,
        }
    };
    match *violation {
        Violation::Sos1(k, _, _) => {
            let (a, b) = p.sos1_pairs[k];
            (child(Fixing::Sos1Zero(a)), child(Fixing::Sos1Zero(b)))
        }
        Violation::Fractional(j, _) => (child(Fixing::BinaryZero(j)), child(Fixing::BinaryOne(j))),
    }
}

struct HeapEntry {
    bound: f64,
    seq: usize,
    node: BnbNode,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap: prefer the smallest bound, then FIFO
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Searcher<'a> {
    prog: &'a DiscreteProgram,
    ws: SolveWorkspace,
    /// index of the forcing row added per SOS1 member variable
    force_rows: Vec<(usize, usize)>,
    negate: bool,
    tol: Tolerances,
}

impl<'a> Searcher<'a> {
    fn patches(&self, fixings: &[Fixing]) -> Vec<RowPatch> {
        let mut patches = Vec::with_capacity(fixings.len());
        for f in fixings {
            match *f {
                Fixing::BinaryZero(j) => patches.push(RowPatch {
                    g_row: self.ws.bound_row(j, true).expect("binary upper bound"),
                    coeff: None,
                    rhs: Some(0.0),
                }),
                Fixing::BinaryOne(j) => patches.push(RowPatch {
                    g_row: self.ws.bound_row(j, false).expect("binary lower bound"),
                    coeff: None,
                    rhs: Some(-1.0),
                }),
                Fixing::Sos1Zero(v) => {
                    let row = self
                        .force_rows
                        .iter()
                        .find(|(var, _)| *var == v)
                        .map(|(_, r)| *r)
                        .expect("forcing row exists for SOS1 member");
                    patches.push(RowPatch {
                        g_row: row,
                        coeff: Some((v, 1.0)),
                        rhs: Some(0.0),
                    });
                }
            }
        }
        patches
    }

    fn solve_node(&mut self, fixings: &[Fixing]) -> crate::conic::ConicOutcome {
        let patches = self.patches(fixings);
        let out = self.ws.solve_with(&self.tol, &patches);
        if out.status == ConicStatus::NumericalFailure {
            let relaxed = Tolerances {
                feas: self.tol.feas * 100.0,
                gap_abs: self.tol.gap_abs * 1e4,
                gap_rel: self.tol.gap_rel * 1e4,
                reduced_feas: self.tol.reduced_feas * 100.0,
                reduced_gap_abs: self.tol.reduced_gap_abs * 100.0,
                reduced_gap_rel: self.tol.reduced_gap_rel * 100.0,
                max_iter: self.tol.max_iter,
            };
            return self.ws.solve_with(&relaxed, &patches);
        }
        out
    }
}

/// Solve a mixed-integer SOC program by branch and bound.
pub fn solve_misocp(p: &DiscreteProgram, sense: Sense, limits: &BnbLimits) -> MipSolution {
    for &j in &p.binaries {
        let (lo, hi) = p.base.bounds[j];
        assert!(
            lo == 0.0 && hi == 1.0,
            "binary variable {j} must have [0,1] bounds"
        );
    }
    for &(a, b) in &p.sos1_pairs {
        assert!(
            p.base.bounds[a].0 >= 0.0 && p.base.bounds[b].0 >= 0.0,
            "SOS1 members must be nonnegative"
        );
    }

    // epigraph-reformulate up front so the workspace sees a pure-conic base
    let n_orig = p.base.n_vars;
    let mut base = if p.base.quad_terms.is_empty() {
        p.base.clone()
    } else {
        reformulate_quadratic(&p.base)
    };
    let negate = sense == Sense::Maximize;
    if negate {
        for c in base.objective.iter_mut() {
            *c = -*c;
        }
    }
    // forcing rows (0 * v <= 1) that node patches turn into v <= 0
    let mut force_rows = Vec::new();
    {
        let mut members: Vec<usize> = p.sos1_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        members.sort_unstable();
        members.dedup();
        for v in members {
            force_rows.push((v, base.ineq.len()));
            base.ineq.push((SparseRow::from_pairs(&[(v, 0.0)]), 1.0));
        }
    }

    let ws = SolveWorkspace::new(&base);
    let mut searcher = Searcher {
        prog: p,
        ws,
        force_rows,
        negate,
        tol: Tolerances::default(),
    };

    let start = Instant::now();
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let mut seq = 0usize;
    let mut nodes = 0usize;
    let mut incumbent: Option<(f64, Vec<f64>)> = None; // minimization sense
    let mut bound_trace: Vec<(f64, f64)> = Vec::new();
    let mut had_failures = false;
    let mut hit_limit = false;

    let root = BnbNode {
        fixings: Vec::new(),
        bound: f64::NEG_INFINITY,
        depth: 0,
    };
    heap.push(HeapEntry {
        bound: root.bound,
        seq,
        node: root,
    });
    seq += 1;

    let gap_ok = |inc: f64, bound: f64, limits: &BnbLimits| -> bool {
        inc - bound <= limits.mip_gap * inc.abs().max(1.0)
    };

    let finish = |status: MipStatus,
                  incumbent: Option<(f64, Vec<f64>)>,
                  bound: f64,
                  nodes: usize,
                  bound_trace: Vec<(f64, f64)>,
                  negate: bool| {
        let (obj, x) = incumbent
            .map(|(o, x)| (o, x))
            .unwrap_or((f64::INFINITY, Vec::new()));
        let (objective, bound) = if negate {
            (-obj, -bound)
        } else {
            (obj, bound)
        };
        MipSolution {
            status,
            x,
            objective,
            bound,
            nodes,
            bound_trace,
        }
    };

    let mut dive: Option<BnbNode> = None;
    loop {
        // pick the next node: continue the dive or take the best bound
        let node = match dive.take() {
            Some(n) => n,
            None => match heap.pop() {
                Some(e) => e.node,
                None => break,
            },
        };
        // prune against the incumbent before solving
        if let Some((inc, _)) = &incumbent {
            if node.bound.is_finite() && gap_ok(*inc, node.bound, limits) {
                continue;
            }
        }
        if nodes >= limits.max_nodes
            || limits
                .time_limit
                .map(|tl| start.elapsed() > tl)
                .unwrap_or(false)
        {
            hit_limit = true;
            break;
        }

        nodes += 1;
        let out = searcher.solve_node(&node.fixings);
        match out.status {
            ConicStatus::Infeasible => continue,
            ConicStatus::NumericalFailure => {
                had_failures = true;
                continue;
            }
            ConicStatus::Unbounded => {
                // branching can only remove unboundedness through a fixing;
                // with nothing left to fix the discrete program is unbounded
                if let Some(v) = first_unfixed(searcher.prog, &node.fixings) {
                    let (a, b) = branch(searcher.prog, &node, node.bound, &v);
                    dive = Some(a);
                    heap.push(HeapEntry {
                        bound: b.bound,
                        seq,
                        node: b,
                    });
                    seq += 1;
                    continue;
                }
                return finish(
                    MipStatus::Unbounded,
                    incumbent,
                    f64::NEG_INFINITY,
                    nodes,
                    bound_trace,
                    negate,
                );
            }
            ConicStatus::Optimal => {}
        }
        let relax_obj = out.objective;
        bound_trace.push((node.bound, relax_obj));
        if let Some((inc, _)) = &incumbent {
            if gap_ok(*inc, relax_obj, limits) {
                continue; // fathomed by bound
            }
        }
        match find_violation(searcher.prog, &out.x, &node.fixings) {
            None => {
                // integral and SOS1-clean: snap and record as incumbent
                let mut x = out.x.clone();
                x.truncate(n_orig);
                for &j in &searcher.prog.binaries {
                    x[j] = x[j].round();
                }
                for &(a, b) in &searcher.prog.sos1_pairs {
                    if x[a].abs() <= x[b].abs() {
                        x[a] = 0.0;
                    } else {
                        x[b] = 0.0;
                    }
                }
                if incumbent
                    .as_ref()
                    .map(|(inc, _)| relax_obj < *inc)
                    .unwrap_or(true)
                {
                    incumbent = Some((relax_obj, x));
                    if let Some(lim) = limits.objective_limit {
                        let lim_min = if negate { -lim } else { lim };
                        if relax_obj < lim_min {
                            let bound = heap
                                .iter()
                                .map(|e| e.bound)
                                .fold(relax_obj, f64::min);
                            return finish(
                                MipStatus::ObjectiveLimit,
                                incumbent,
                                bound,
                                nodes,
                                bound_trace,
                                negate,
                            );
                        }
                    }
                }
            }
            Some(v) => {
                let (a, b) = branch(searcher.prog, &node, relax_obj, &v);
                dive = Some(a);
                heap.push(HeapEntry {
                    bound: b.bound,
                    seq,
                    node: b,
                });
                seq += 1;
            }
        }
    }

    let open_bound = heap.iter().map(|e| e.bound).fold(f64::INFINITY, f64::min);
    match incumbent {
        Some((inc, _)) => {
            let bound = inc.min(open_bound);
            // a numerically failed node was discarded unexplored, so the
            // proof of optimality is incomplete
            let status = if hit_limit || had_failures {
                MipStatus::Inconclusive
            } else {
                MipStatus::Optimal
            };
            finish(status, incumbent, bound, nodes, bound_trace, negate)
        }
        None => {
            if hit_limit || had_failures {
                finish(
                    MipStatus::Inconclusive,
                    None,
                    open_bound,
                    nodes,
                    bound_trace,
                    negate,
                )
            } else {
                finish(
                    MipStatus::Infeasible,
                    None,
                    f64::INFINITY,
                    nodes,
                    bound_trace,
                    negate,
                )
            }
        }
    }
}

fn first_unfixed(p: &DiscreteProgram, fixings: &[Fixing]) -> Option<Violation> {
    for (k, &(a, b)) in p.sos1_pairs.iter().enumerate() {
        let side_fixed = fixings
            .iter()
            .any(|f| matches!(f, Fixing::Sos1Zero(v) if *v == a || *v == b));
        if !side_fixed {
            return Some(Violation::Sos1(k, f64::NAN, f64::NAN));
        }
    }
    for &j in &p.binaries {
        let fixed = fixings.iter().any(|f| {
            matches!(f, Fixing::BinaryZero(v) if *v == j)
                || matches!(f, Fixing::BinaryOne(v) if *v == j)
        });
        if !fixed {
            return Some(Violation::Fractional(j, f64::NAN));
        }
    }
    None
}
