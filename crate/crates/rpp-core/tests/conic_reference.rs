//! Cross-validation of the conic solver against an independent reference.
//!
//! `gen_program` builds seeded random feasible SOC programs. Their optimal
//! objectives were computed offline with an established interior-point
//! solver and frozen in `fixtures/conic_reference.json`; the test replays
//! the same programs and compares. Set RPP_DUMP_CONIC_FIXTURES=dir to
//! re-emit the program files the offline run consumes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rpp_core::conic::{solve, ConicProgram, ConicStatus, SocConstraint, SparseRow, Tolerances};

fn dense_row(vals: &[f64]) -> SparseRow {
    SparseRow::from_pairs(
        &vals
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, v))
            .collect::<Vec<_>>(),
    )
}

/// Random feasible, bounded SOC program. A strictly feasible witness point
/// is drawn first and every constraint is offset to hold there.
fn gen_program(seed: u64) -> ConicProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = rng.random_range(3..9usize);
    let mut p = ConicProgram::new(nv);
    let witness: Vec<f64> = (0..nv).map(|_| rng.random_range(-2.0..2.0)).collect();

    for j in 0..nv {
        p.objective[j] = rng.random_range(-1.0..1.0);
        p.bounds[j] = (-5.0, 5.0);
    }
    let n_eq = rng.random_range(0..3usize.min(nv - 1));
    for _ in 0..n_eq {
        let row: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rhs: f64 = row.iter().zip(&witness).map(|(a, b)| a * b).sum();
        p.eq.push((dense_row(&row), rhs));
    }
    let n_ineq = rng.random_range(1..4usize);
    for _ in 0..n_ineq {
        let row: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at_w: f64 = row.iter().zip(&witness).map(|(a, b)| a * b).sum();
        p.ineq
            .push((dense_row(&row), at_w + rng.random_range(0.1..2.0)));
    }
    let n_cones = rng.random_range(1..3usize);
    for _ in 0..n_cones {
        let dim = rng.random_range(1..4usize);
        let mut norm_rows = Vec::new();
        let mut norm_offsets = Vec::new();
        let mut at_w_sq = 0.0;
        for _ in 0..dim {
            let row: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
            let off = rng.random_range(-1.0..1.0);
            let v: f64 = row.iter().zip(&witness).map(|(a, b)| a * b).sum::<f64>() + off;
            at_w_sq += v * v;
            norm_rows.push(dense_row(&row));
            norm_offsets.push(off);
        }
        let rhs_row: Vec<f64> = (0..nv).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rhs_at_w: f64 = rhs_row.iter().zip(&witness).map(|(a, b)| a * b).sum();
        let rhs_offset =
            at_w_sq.sqrt() + rng.random_range(0.1..1.5) - rhs_at_w;
        p.cones.push(SocConstraint {
            norm_rows,
            norm_offsets,
            rhs: dense_row(&rhs_row),
            rhs_offset,
        });
    }
    p
}

const N_PROGRAMS: u64 = 30;

fn program_json(p: &ConicProgram) -> serde_json::Value {
    let row = |r: &SparseRow| -> serde_json::Value {
        serde_json::json!({ "cols": r.cols, "vals": r.vals })
    };
    serde_json::json!({
        "n_vars": p.n_vars,
        "objective": p.objective,
        "eq": p.eq.iter().map(|(r, b)| serde_json::json!([row(r), b])).collect::<Vec<_>>(),
        "ineq": p.ineq.iter().map(|(r, b)| serde_json::json!([row(r), b])).collect::<Vec<_>>(),
        "cones": p.cones.iter().map(|c| serde_json::json!({
            "norm_rows": c.norm_rows.iter().map(&row).collect::<Vec<_>>(),
            "norm_offsets": c.norm_offsets,
            "rhs": row(&c.rhs),
            "rhs_offset": c.rhs_offset,
        })).collect::<Vec<_>>(),
        "bounds": p.bounds,
    })
}

#[test]
fn matches_committed_reference_objectives() {
    if let Some(dir) = std::env::var_os("RPP_DUMP_CONIC_FIXTURES") {
        let dir = std::path::PathBuf::from(dir);
        std::fs::create_dir_all(&dir).unwrap();
        let progs: Vec<_> = (0..N_PROGRAMS).map(|s| program_json(&gen_program(s))).collect();
        std::fs::write(
            dir.join("conic_programs.json"),
            serde_json::to_string(&progs).unwrap(),
        )
        .unwrap();
        eprintln!("dumped {} programs to {:?}", N_PROGRAMS, dir);
        return;
    }

    let fixture: Vec<f64> = serde_json::from_str(include_str!("fixtures/conic_reference.json"))
        .expect("reference fixture parses");
    assert_eq!(fixture.len() as u64, N_PROGRAMS);
    let tol = Tolerances::default();
    for (seed, &reference) in fixture.iter().enumerate() {
        let p = gen_program(seed as u64);
        let out = solve(&p, &tol);
        assert_eq!(
            out.status,
            ConicStatus::Optimal,
            "program {seed} should solve"
        );
        let denom = reference.abs().max(1.0);
        assert!(
            (out.objective - reference).abs() / denom < 1e-6,
            "program {seed}: got {} reference {}",
            out.objective,
            reference
        );
        // weak duality holds on every optimal outcome
        let dual = out.dual_objective(&p);
        assert!(
            out.objective >= dual - 1e-6,
            "program {seed}: weak duality violated: primal {} dual {}",
            out.objective,
            dual
        );
    }
}

#[test]
fn argmin_invariant_under_objective_scaling() {
    for seed in 0..8u64 {
        let p = gen_program(seed);
        let mut scaled = p.clone();
        for c in scaled.objective.iter_mut() {
            *c *= 37.5;
        }
        let tol = Tolerances::default();
        let a = solve(&p, &tol);
        let b = solve(&scaled, &tol);
        assert_eq!(a.status, ConicStatus::Optimal);
        assert_eq!(b.status, ConicStatus::Optimal);
        // primal accuracy at the optimum scales like sqrt(gap_tol)
        for (xa, xb) in a.x.iter().zip(&b.x) {
            assert!(
                (xa - xb).abs() < 1e-4,
                "seed {seed}: argmin moved: {xa} vs {xb}"
            );
        }
    }
}
