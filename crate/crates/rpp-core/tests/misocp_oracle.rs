//! Oracle equivalence for the branch-and-bound: on random instances the
//! search must match exhaustive enumeration (every binary assignment times
//! every SOS1 side choice, each leaf solved as a continuous conic program).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rpp_core::conic::{solve, ConicProgram, ConicStatus, SocConstraint, SparseRow, Tolerances};
use rpp_core::misocp::{solve_misocp, BnbLimits, DiscreteProgram, MipStatus, Sense};

fn dense_row(vals: &[f64]) -> SparseRow {
    SparseRow::from_pairs(
        &vals
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect::<Vec<_>>(),
    )
}

struct Instance {
    prog: DiscreteProgram,
    n_binaries: usize,
    n_pairs: usize,
}

/// Random mixed instance: `nb` binaries, `ns` SOS1 pairs, a few continuous
/// variables, box bounds throughout, one cone, and linear rows offset to
/// hold at a witness with integral binaries and one-sided pairs.
fn gen_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (nb, ns) = if seed % 5 == 4 {
        // occasionally large, capped so enumeration stays affordable
        (rng.random_range(6..=12usize), rng.random_range(0..=2usize))
    } else {
        (rng.random_range(0..=5usize), rng.random_range(0..=3usize))
    };
    let ncont = rng.random_range(1..=3usize);
    let nv = nb + 2 * ns + ncont;
    let mut p = ConicProgram::new(nv);

    let binaries: Vec<usize> = (0..nb).collect();
    let pairs: Vec<(usize, usize)> = (0..ns).map(|k| (nb + 2 * k, nb + 2 * k + 1)).collect();

    let mut witness = vec![0.0; nv];
    for &j in &binaries {
        p.bounds[j] = (0.0, 1.0);
        witness[j] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    for &(a, b) in &pairs {
        p.bounds[a] = (0.0, rng.random_range(0.5..3.0));
        p.bounds[b] = (0.0, rng.random_range(0.5..3.0));
        if rng.random_bool(0.5) {
            witness[a] = rng.random_range(0.0..p.bounds[a].1);
        } else {
            witness[b] = rng.random_range(0.0..p.bounds[b].1);
        }
    }
    for j in nb + 2 * ns..nv {
        p.bounds[j] = (-3.0, 3.0);
        witness[j] = rng.random_range(-2.0..2.0);
    }
    for j in 0..nv {
        p.objective[j] = rng.random_range(-1.0..1.0);
    }
    let n_rows = rng.random_range(1..=3usize);
    for _ in 0..n_rows {
        let row: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at_w: f64 = row.iter().zip(&witness).map(|(a, b)| a * b).sum();
        p.ineq
            .push((dense_row(&row), at_w + rng.random_range(0.05..1.5)));
    }
    // one cone keeping the witness strictly inside
    let dim = rng.random_range(1..3usize);
    let mut norm_rows = Vec::new();
    let mut norm_offsets = Vec::new();
    let mut at_w_sq = 0.0;
    for _ in 0..dim {
        let row: Vec<f64> = (0..nv).map(|_| rng.random_range(-0.6..0.6)).collect();
        let off = rng.random_range(-0.5..0.5);
        let v: f64 = row.iter().zip(&witness).map(|(a, b)| a * b).sum::<f64>() + off;
        at_w_sq += v * v;
        norm_rows.push(dense_row(&row));
        norm_offsets.push(off);
    }
    p.cones.push(SocConstraint {
        norm_rows,
        norm_offsets,
        rhs: SparseRow::new(),
        rhs_offset: at_w_sq.sqrt() + rng.random_range(0.2..1.0),
    });

    Instance {
        prog: DiscreteProgram {
            base: p,
            binaries,
            sos1_pairs: pairs,
        },
        n_binaries: nb,
        n_pairs: ns,
    }
}

/// Exhaustive oracle: fix every combination through variable bounds and
/// solve the continuous program.
fn enumerate_optimum(inst: &Instance) -> Option<f64> {
    let prog = &inst.prog;
    let mut best: Option<f64> = None;
    let tol = Tolerances::default();
    let mut failures = 0usize;
    for bin_mask in 0..(1u32 << inst.n_binaries) {
        for side_mask in 0..(1u32 << inst.n_pairs) {
            let mut leaf = prog.base.clone();
            // fixings as equality rows: bound pairs with lo == hi leave the
            // slack cone without interior and needlessly strain the solve
            for (k, &j) in prog.binaries.iter().enumerate() {
                let v = if bin_mask >> k & 1 == 1 { 1.0 } else { 0.0 };
                leaf.eq.push((SparseRow::from_pairs(&[(j, 1.0)]), v));
            }
            for (k, &(a, b)) in prog.sos1_pairs.iter().enumerate() {
                let zeroed = if side_mask >> k & 1 == 1 { a } else { b };
                leaf.eq
                    .push((SparseRow::from_pairs(&[(zeroed, 1.0)]), 0.0));
            }
            let out = solve(&leaf, &tol);
            match out.status {
                ConicStatus::Optimal => {
                    best = Some(best.map_or(out.objective, |b: f64| b.min(out.objective)));
                }
                ConicStatus::NumericalFailure => failures += 1,
                _ => {}
            }
        }
    }
    assert_eq!(failures, 0, "oracle leaf solves must be clean");
    best
}

#[test]
fn search_matches_exhaustive_enumeration() {
    let mut checked = 0;
    for seed in 0..50u64 {
        let inst = gen_instance(seed);
        let oracle = enumerate_optimum(&inst);
        let sol = solve_misocp(&inst.prog, Sense::Minimize, &BnbLimits::default());
        match oracle {
            Some(reference) => {
                assert_eq!(
                    sol.status,
                    MipStatus::Optimal,
                    "seed {seed}: bnb status {:?} but enumeration found {reference}",
                    sol.status
                );
                let denom = reference.abs().max(1.0);
                assert!(
                    (sol.objective - reference).abs() / denom < 1e-6,
                    "seed {seed} ({} bins, {} pairs): bnb {} enumeration {}",
                    inst.n_binaries,
                    inst.n_pairs,
                    sol.objective,
                    reference
                );
                // SOS1 semantics: never both members nonzero
                for &(a, b) in &inst.prog.sos1_pairs {
                    assert!(
                        sol.x[a].abs() <= 1e-9 || sol.x[b].abs() <= 1e-9,
                        "seed {seed}: SOS1 violated in incumbent"
                    );
                }
                for &j in &inst.prog.binaries {
                    assert!((sol.x[j] - sol.x[j].round()).abs() <= 1e-6);
                }
                checked += 1;
            }
            None => {
                assert_eq!(sol.status, MipStatus::Infeasible, "seed {seed}");
            }
        }
    }
    assert!(checked >= 40, "too few feasible instances: {checked}");
}
