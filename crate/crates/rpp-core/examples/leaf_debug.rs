use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rpp_core::conic::{solve, ConicProgram, SocConstraint, SparseRow, Tolerances};

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

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (nb, ns) = if seed % 5 == 4 {
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
        p.ineq.push((dense_row(&row), at_w + rng.random_range(0.05..1.5)));
    }
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

    println!("nb={nb} ns={ns} nv={nv}");
    for bin_mask in 0..(1u32 << nb) {
        for side_mask in 0..(1u32 << ns) {
            let mut leaf = p.clone();
            for (k, &j) in binaries.iter().enumerate() {
                let v = if bin_mask >> k & 1 == 1 { 1.0 } else { 0.0 };
                leaf.eq.push((SparseRow::from_pairs(&[(j, 1.0)]), v));
            }
            for (k, &(a, b)) in pairs.iter().enumerate() {
                let zeroed = if side_mask >> k & 1 == 1 { a } else { b };
                leaf.eq.push((SparseRow::from_pairs(&[(zeroed, 1.0)]), 0.0));
            }
            let out = solve(&leaf, &Tolerances::default());
            println!(
                "mask=({bin_mask},{side_mask}) status={:?} obj={:.9} it={} res={:.2e}/{:.2e}/{:.2e}",
                out.status, out.objective, out.iterations,
                out.residuals.primal, out.residuals.dual, out.residuals.gap
            );
        }
    }
}
