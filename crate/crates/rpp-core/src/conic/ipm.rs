//! Homogeneous self-dual interior-point method for SOC programs.
//!
//! Solves the standard form
//!
//! ```text
//! min c'x   s.t.  A x = b,   G x + s = h,   s in K
//! ```
//!
//! where `K` is a product of a nonnegative orthant and second-order cones.
//! The embedding carries `(x, y, z, s, tau, kappa)`; `tau -> 0` with
//! `kappa > 0` yields infeasibility or unboundedness certificates instead of
//! a solution. Search directions come from a Mehrotra predictor-corrector
//! with Nesterov-Todd scaling; the KKT systems are solved by the sparse
//! LDL^T in [`crate::sparse`] with dynamic regularization plus iterative
//! refinement.

use super::{ConicOutcome, ConicProgram, ConicStatus, Residuals, SparseRow};
use crate::sparse::{KktSolver, SymTriplets};

/// Solve tolerances; `feas` and the gap pair default to 1e-8.
///
/// The `reduced_*` tier applies only when the iteration stalls: a best
/// iterate within the reduced tolerances is still reported Optimal (with its
/// achieved residuals), matching how ECOS and Clarabel grade
/// reduced-accuracy solutions. Degenerate branch-and-bound leaves routinely
/// end there.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub feas: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub reduced_feas: f64,
    pub reduced_gap_abs: f64,
    pub reduced_gap_rel: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            feas: 1e-8,
            gap_abs: 1e-8,
            gap_rel: 1e-8,
            reduced_feas: 1e-6,
            reduced_gap_abs: 1e-6,
            reduced_gap_rel: 1e-6,
            max_iter: 200,
        }
    }
}

/// In-place override of a single inequality row for a repeated solve:
/// optionally retarget the coefficient of one variable (the slot must exist
/// structurally) and/or the right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct RowPatch {
    pub g_row: usize,
    pub coeff: Option<(usize, f64)>,
    pub rhs: Option<f64>,
}

struct SocScaling {
    eta: f64,
    wbar: Vec<f64>,
    lam: Vec<f64>,
    /// jnorm_sq of lambda, computed stably as jnrm(s) * jnrm(z)
    lam_det: f64,
}

struct Scaling {
    w_nn: Vec<f64>,
    lam_nn: Vec<f64>,
    socs: Vec<SocScaling>,
}

/// v0^2 - ||v1||^2 in the cancellation-resistant product form.
fn jnorm_sq(v: &[f64]) -> f64 {
    let tail = v[1..].iter().map(|t| t * t).sum::<f64>().sqrt();
    (v[0] - tail) * (v[0] + tail)
}

/// Workspace that owns the standard-form data and the symbolic KKT analysis
/// so that repeated solves (branch-and-bound nodes) only refactor numerics.
pub struct SolveWorkspace {
    nv: usize,
    ne: usize,
    m: usize,
    nonneg: usize,
    socs: Vec<usize>,

    // equilibrated data; `col_scale`/`row_scale_*` map back to the original
    c: Vec<f64>,
    c_orig: Vec<f64>,
    b: Vec<f64>,
    h_base: Vec<f64>,
    a_rows: Vec<SparseRow>,
    g_rows_base: Vec<SparseRow>,
    col_scale: Vec<f64>,
    row_scale_a: Vec<f64>,
    row_scale_g: Vec<f64>,

    // result mapping
    n_ineq: usize,
    bound_rows: Vec<(Option<usize>, Option<usize>)>,

    // KKT machinery
    kkt: KktSolver,
    values_template: Vec<f64>,
    a_slots: Vec<Vec<usize>>,
    g_slots: Vec<Vec<usize>>,
    soc_block_slots: Vec<Vec<usize>>,
    soc_union_cols: Vec<Vec<usize>>,
}

/// Ruiz equilibration over the stacked [A; G] matrix. Rows belonging to one
/// SOC block share a single scale factor so the cone is preserved.
fn ruiz_scales(
    a_rows: &[SparseRow],
    g_rows: &[SparseRow],
    nv: usize,
    nonneg: usize,
    socs: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ne = a_rows.len();
    let m = g_rows.len();
    let mut d = vec![1.0f64; nv];
    let mut ea = vec![1.0f64; ne];
    let mut eg = vec![1.0f64; m];
    for _ in 0..8 {
        let mut col_max = vec![0.0f64; nv];
        let mut row_max_a = vec![0.0f64; ne];
        let mut row_max_g = vec![0.0f64; m];
        for (i, row) in a_rows.iter().enumerate() {
            for (&cidx, &v) in row.cols.iter().zip(&row.vals) {
                let sv = (v * d[cidx] * ea[i]).abs();
                row_max_a[i] = row_max_a[i].max(sv);
                col_max[cidx] = col_max[cidx].max(sv);
            }
        }
        for (r, row) in g_rows.iter().enumerate() {
            for (&cidx, &v) in row.cols.iter().zip(&row.vals) {
                let sv = (v * d[cidx] * eg[r]).abs();
                row_max_g[r] = row_max_g[r].max(sv);
                col_max[cidx] = col_max[cidx].max(sv);
            }
        }
        // cone blocks: one factor per block
        let mut base = nonneg;
        for &dim in socs {
            let mx = row_max_g[base..base + dim]
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            for r in base..base + dim {
                row_max_g[r] = mx;
            }
            base += dim;
        }
        let mut done = true;
        let adjust = |s: &mut f64, mx: f64, done: &mut bool| {
            if mx > 0.0 {
                let f = 1.0 / mx.sqrt();
                let f = f.clamp(1e-4, 1e4);
                if (f - 1.0).abs() > 1e-2 {
                    *done = false;
                }
                *s *= f;
            }
        };
        for j in 0..nv {
            adjust(&mut d[j], col_max[j], &mut done);
        }
        for i in 0..ne {
            adjust(&mut ea[i], row_max_a[i], &mut done);
        }
        for r in 0..m {
            adjust(&mut eg[r], row_max_g[r], &mut done);
        }
        if done {
            break;
        }
    }
    (d, ea, eg)
}

impl SolveWorkspace {
    pub fn new(p: &ConicProgram) -> Self {
        assert!(
            p.quad_terms.is_empty(),
            "reformulate quadratic terms before building a workspace"
        );
        let nv = p.n_vars;
        let ne = p.eq.len();

        // G layout: declared inequalities, bound rows, then cone blocks.
        let mut g_rows: Vec<SparseRow> = Vec::new();
        let mut h: Vec<f64> = Vec::new();
        for (row, rhs) in &p.ineq {
            g_rows.push(row.clone());
            h.push(*rhs);
        }
        let n_ineq = g_rows.len();
        let mut bound_rows = vec![(None, None); nv];
        for (j, &(lo, hi)) in p.bounds.iter().enumerate() {
            if lo.is_finite() {
                bound_rows[j].0 = Some(g_rows.len());
                g_rows.push(SparseRow::from_pairs(&[(j, -1.0)]));
                h.push(-lo);
            }
            if hi.is_finite() {
                bound_rows[j].1 = Some(g_rows.len());
                g_rows.push(SparseRow::from_pairs(&[(j, 1.0)]));
                h.push(hi);
            }
        }
        let nonneg = g_rows.len();
        let mut socs = Vec::new();
        for cone in &p.cones {
            let d = cone.norm_rows.len() + 1;
            assert!(d >= 2, "cone needs at least one norm row");
            socs.push(d);
            // head: h0 - g0'x = p'x + p0
            g_rows.push(cone.rhs.scaled(-1.0));
            h.push(cone.rhs_offset);
            for (row, off) in cone.norm_rows.iter().zip(&cone.norm_offsets) {
                g_rows.push(row.scaled(-1.0));
                h.push(*off);
            }
        }
        let m = g_rows.len();

        let mut a_rows: Vec<SparseRow> = p.eq.iter().map(|(r, _)| r.clone()).collect();
        let mut b: Vec<f64> = p.eq.iter().map(|(_, rhs)| *rhs).collect();

        // equilibrate in place
        let (col_scale, row_scale_a, row_scale_g) =
            ruiz_scales(&a_rows, &g_rows, nv, nonneg, &socs);
        for (i, row) in a_rows.iter_mut().enumerate() {
            for (cidx, v) in row.cols.iter().zip(row.vals.iter_mut()) {
                *v *= row_scale_a[i] * col_scale[*cidx];
            }
            b[i] *= row_scale_a[i];
        }
        for (r, row) in g_rows.iter_mut().enumerate() {
            for (cidx, v) in row.cols.iter().zip(row.vals.iter_mut()) {
                *v *= row_scale_g[r] * col_scale[*cidx];
            }
            h[r] *= row_scale_g[r];
        }
        let c_orig = p.objective.clone();
        let c_scaled: Vec<f64> = p
            .objective
            .iter()
            .zip(&col_scale)
            .map(|(&cv, &dv)| cv * dv)
            .collect();

        // KKT pattern, CVXOPT form: [0 A' Gb'; A 0 0; Gb 0 -I] where
        // Gb = W^{-1} G is refreshed per iteration. Cone block rows carry the
        // union of the block's columns since W^{-1} mixes rows within a block.
        let dim = nv + ne + m;
        let mut trip = SymTriplets::new(dim);
        for k in 0..dim {
            trip.add(k, k, 0.0);
        }
        let mut a_entry_counts = Vec::new();
        for (i, row) in a_rows.iter().enumerate() {
            for &cidx in row.cols.iter() {
                a_entry_counts.push(i);
                trip.add(nv + i, cidx, 0.0);
            }
        }
        // nonneg rows keep their own pattern
        let mut g_entry_counts = Vec::new();
        for (r, row) in g_rows.iter().enumerate().take(nonneg) {
            for &cidx in row.cols.iter() {
                g_entry_counts.push(r);
                trip.add(nv + ne + r, cidx, 0.0);
            }
        }
        // per cone block: union of columns, dense d x k slot grid
        let mut soc_union_cols: Vec<Vec<usize>> = Vec::new();
        {
            let mut base = nonneg;
            for &d in &socs {
                let mut cols: Vec<usize> = g_rows[base..base + d]
                    .iter()
                    .flat_map(|r| r.cols.iter().copied())
                    .collect();
                cols.sort_unstable();
                cols.dedup();
                for i in 0..d {
                    for &cidx in &cols {
                        trip.add(nv + ne + base + i, cidx, 0.0);
                    }
                }
                soc_union_cols.push(cols);
                base += d;
            }
        }

        let (csc, slots) = trip.build_with_slots();
        let values_template = vec![0.0; csc.values.len()];

        // recover slot maps in insertion order
        let mut cursor = 0usize;
        let diag_slots: Vec<usize> = (0..dim).map(|k| slots[cursor + k]).collect();
        cursor += dim;
        let mut a_slots: Vec<Vec<usize>> = vec![Vec::new(); ne];
        for &i in &a_entry_counts {
            a_slots[i].push(slots[cursor]);
            cursor += 1;
        }
        let mut g_slots: Vec<Vec<usize>> = vec![Vec::new(); m];
        for &r in &g_entry_counts {
            g_slots[r].push(slots[cursor]);
            cursor += 1;
        }
        // soc block slots, row-major over (d, union columns)
        let mut soc_block_slots: Vec<Vec<usize>> = Vec::new();
        for (k, &d) in socs.iter().enumerate() {
            let kcols = soc_union_cols[k].len();
            let mut list = Vec::with_capacity(d * kcols);
            for _ in 0..d * kcols {
                list.push(slots[cursor]);
                cursor += 1;
            }
            soc_block_slots.push(list);
        }
        debug_assert_eq!(cursor, slots.len());

        let mut sign = vec![1.0; nv];
        sign.extend(vec![-1.0; ne + m]);
        let kkt = KktSolver::new(csc, sign, diag_slots, 1e-8, 1e-10);

        Self {
            nv,
            ne,
            m,
            nonneg,
            socs,
            c: c_scaled,
            c_orig,
            b,
            h_base: h,
            a_rows,
            g_rows_base: g_rows,
            col_scale,
            row_scale_a,
            row_scale_g,
            n_ineq,
            bound_rows,
            kkt,
            values_template,
            a_slots,
            g_slots,
            soc_block_slots,
            soc_union_cols,
        }
    }

    /// G row index carrying a variable's lower/upper bound, when finite.
    pub fn bound_row(&self, var: usize, upper: bool) -> Option<usize> {
        if upper {
            self.bound_rows[var].1
        } else {
            self.bound_rows[var].0
        }
    }

    pub fn solve_base(&mut self, tol: &Tolerances) -> ConicOutcome {
        self.solve_with(tol, &[])
    }

    pub fn solve_with(&mut self, tol: &Tolerances, patches: &[RowPatch]) -> ConicOutcome {
        let mut g_rows = self.g_rows_base.clone();
        let mut h = self.h_base.clone();
        for p in patches {
            let e = self.row_scale_g[p.g_row];
            if let Some((var, coeff)) = p.coeff {
                let row = &mut g_rows[p.g_row];
                let mut hit = false;
                for (c, v) in row.cols.iter().zip(row.vals.iter_mut()) {
                    if *c == var {
                        *v = coeff * e * self.col_scale[var];
                        hit = true;
                    }
                }
                assert!(hit, "patched entry must exist structurally");
            }
            if let Some(rhs) = p.rhs {
                h[p.g_row] = rhs * e;
            }
        }
        self.run_ipm(&g_rows, &h, tol)
    }

    fn soc_range(&self, k: usize) -> (usize, usize) {
        let mut start = self.nonneg;
        for &d in &self.socs[..k] {
            start += d;
        }
        (start, self.socs[k])
    }

    // --- cone helpers over the composite slack space -----------------------

    fn cone_identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.m];
        for v in e.iter_mut().take(self.nonneg) {
            *v = 1.0;
        }
        let mut base = self.nonneg;
        for &d in &self.socs {
            e[base] = 1.0;
            base += d;
        }
        e
    }

    fn cone_degree(&self) -> f64 {
        (self.nonneg + self.socs.len()) as f64
    }

    /// Smallest "interior margin" over blocks: nonneg values themselves,
    /// `v0 - ||v1||` per cone.
    fn cone_margin(&self, v: &[f64]) -> f64 {
        let mut margin = f64::INFINITY;
        for &t in &v[..self.nonneg] {
            margin = margin.min(t);
        }
        let mut base = self.nonneg;
        for &d in &self.socs {
            let head = v[base];
            let tail: f64 = v[base + 1..base + d].iter().map(|t| t * t).sum::<f64>().sqrt();
            margin = margin.min(head - tail);
            base += d;
        }
        margin
    }

    fn max_step(&self, v: &[f64], dv: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..self.nonneg {
            if dv[i] < 0.0 {
                alpha = alpha.min(-v[i] / dv[i]);
            }
        }
        let mut base = self.nonneg;
        for &d in &self.socs {
            let (v0, d0) = (v[base], dv[base]);
            let v1 = &v[base + 1..base + d];
            let d1 = &dv[base + 1..base + d];
            let a = d0 * d0 - d1.iter().map(|t| t * t).sum::<f64>();
            let bq = 2.0 * (v0 * d0 - v1.iter().zip(d1).map(|(x, y)| x * y).sum::<f64>());
            let cq = v0 * v0 - v1.iter().map(|t| t * t).sum::<f64>();
            let lim = if a.abs() < 1e-300 {
                if bq < 0.0 {
                    -cq / bq
                } else {
                    f64::INFINITY
                }
            } else {
                let disc = bq * bq - 4.0 * a * cq;
                if disc < 0.0 {
                    if a > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                } else {
                    let sq = disc.sqrt();
                    let r1 = (-bq - sq) / (2.0 * a);
                    let r2 = (-bq + sq) / (2.0 * a);
                    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
                    if a > 0.0 {
                        if lo > 0.0 {
                            lo
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        hi.max(0.0)
                    }
                }
            };
            alpha = alpha.min(lim);
            if d0 < 0.0 {
                alpha = alpha.min(-v0 / d0);
            }
            base += d;
        }
        alpha
    }

    fn compute_scaling(&self, s: &[f64], z: &[f64]) -> Scaling {
        let mut w_nn = Vec::with_capacity(self.nonneg);
        let mut lam_nn = Vec::with_capacity(self.nonneg);
        for i in 0..self.nonneg {
            w_nn.push((s[i] / z[i]).sqrt());
            lam_nn.push((s[i] * z[i]).sqrt());
        }
        let mut socs = Vec::with_capacity(self.socs.len());
        let mut base = self.nonneg;
        for &d in &self.socs {
            let sb = &s[base..base + d];
            let zb = &z[base..base + d];
            let a = jnorm_sq(sb).max(1e-300).sqrt();
            let bn = jnorm_sq(zb).max(1e-300).sqrt();
            let sbar: Vec<f64> = sb.iter().map(|v| v / a).collect();
            let zbar: Vec<f64> = zb.iter().map(|v| v / bn).collect();
            let dot: f64 = sbar.iter().zip(&zbar).map(|(x, y)| x * y).sum();
            let gamma = ((1.0 + dot) / 2.0).max(1e-300).sqrt();
            let mut wbar = vec![0.0; d];
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for i in 1..d {
                wbar[i] = (sbar[i] - zbar[i]) / (2.0 * gamma);
            }
            // the hyperbolic Householder point is the Jordan square root of
            // wbar: W = eta (2 v v' - J) with v = (wbar + e)/sqrt(2(wbar0+1))
            let mut v = wbar;
            v[0] += 1.0;
            let scale = (2.0 * v[0]).sqrt();
            for t in v.iter_mut() {
                *t /= scale;
            }
            let eta = (a / bn).sqrt();
            // stable scaled point: lam = sqrt(ab) (gamma; c1 sbar1 + c2 zbar1)
            let denom = 2.0 * gamma + sbar[0] + zbar[0];
            let c1 = (gamma + zbar[0]) / denom;
            let c2 = (gamma + sbar[0]) / denom;
            let root = (a * bn).sqrt();
            let mut lam = vec![0.0; d];
            lam[0] = root * gamma;
            for i in 1..d {
                lam[i] = root * (c1 * sbar[i] + c2 * zbar[i]);
            }
            socs.push(SocScaling {
                eta,
                wbar: v,
                lam,
                lam_det: a * bn,
            });
            base += d;
        }
        Scaling {
            w_nn,
            lam_nn,
            socs,
        }
    }

    /// Fill the scaled `W^{-1} G` block plus the `-I` dual diagonal, refactor.
    fn refactor(&mut self, g_rows: &[SparseRow], scal: &Scaling) {
        let mut vals = self.values_template.clone();
        for (i, row) in self.a_rows.iter().enumerate() {
            for (k, &v) in row.vals.iter().enumerate() {
                vals[self.a_slots[i][k]] += v;
            }
        }
        for r in 0..self.m {
            vals[self.kkt.diag_slot(self.nv + self.ne + r)] += -1.0;
        }
        for (r, row) in g_rows.iter().enumerate().take(self.nonneg) {
            let wi = 1.0 / scal.w_nn[r];
            for (k, &v) in row.vals.iter().enumerate() {
                vals[self.g_slots[r][k]] += v * wi;
            }
        }
        for (k, sc) in scal.socs.iter().enumerate() {
            let d = self.socs[k];
            let (start, _) = self.soc_range(k);
            let cols = &self.soc_union_cols[k];
            let kc = cols.len();
            // dense G block over the union columns
            let mut dense = vec![0.0; d * kc];
            for i in 0..d {
                let row = &g_rows[start + i];
                for (&cidx, &v) in row.cols.iter().zip(&row.vals) {
                    let pos = cols.binary_search(&cidx).unwrap();
                    dense[i * kc + pos] += v;
                }
            }
            // apply W^{-1} column-wise
            let mut colbuf = vec![0.0; d];
            for j in 0..kc {
                for i in 0..d {
                    colbuf[i] = dense[i * kc + j];
                }
                let scaled = apply_winv_block(sc, &colbuf);
                for i in 0..d {
                    vals[self.soc_block_slots[k][i * kc + j]] += scaled[i];
                }
            }
        }
        self.kkt.update_values(&vals);
    }

    /// Solve the original-space system
    /// `[0 A' G'; A 0 0; G 0 -W^2][dx;dy;dz] = [rx;ry;rz]`
    /// through the scaled form with `xi = W dz`.
    fn kkt_solve(
        &self,
        scal: &Scaling,
        rx: &[f64],
        ry: &[f64],
        rz: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dim = self.nv + self.ne + self.m;
        let mut rhs = vec![0.0; dim];
        rhs[..self.nv].copy_from_slice(rx);
        rhs[self.nv..self.nv + self.ne].copy_from_slice(ry);
        let rz_scaled = self.apply_winv_vec(scal, rz);
        rhs[self.nv + self.ne..].copy_from_slice(&rz_scaled);
        let mut sol = vec![0.0; dim];
        self.kkt.solve_refined(&rhs, &mut sol);
        let dz = self.apply_winv_vec(scal, &sol[self.nv + self.ne..]);
        (
            sol[..self.nv].to_vec(),
            sol[self.nv..self.nv + self.ne].to_vec(),
            dz,
        )
    }

    fn run_ipm(&mut self, g_rows: &[SparseRow], h: &[f64], tol: &Tolerances) -> ConicOutcome {
        let (nv, ne, m) = (self.nv, self.ne, self.m);
        let norm_b = norm2(&self.b).max(1.0);
        let norm_h = norm2(h).max(1.0);
        let norm_c = norm2(&self.c).max(1.0);

        let a_rows_local = self.a_rows.clone();
        let a_mul = |x: &[f64]| -> Vec<f64> { mat_vec(&a_rows_local, x) };
        let at_mul = |y: &[f64]| -> Vec<f64> { mat_t_vec(&a_rows_local, y, nv) };
        let g_mul = |x: &[f64]| -> Vec<f64> { mat_vec(g_rows, x) };
        let gt_mul = |z: &[f64]| -> Vec<f64> { mat_t_vec(g_rows, z, nv) };

        // ---- initial point -------------------------------------------------
        let ident_scaling = Scaling {
            w_nn: vec![1.0; self.nonneg],
            lam_nn: vec![1.0; self.nonneg],
            socs: self
                .socs
                .iter()
                .map(|&d| {
                    let mut wbar = vec![0.0; d];
                    wbar[0] = 1.0;
                    let mut lam = vec![0.0; d];
                    lam[0] = 1.0;
                    SocScaling {
                        eta: 1.0,
                        wbar,
                        lam,
                        lam_det: 1.0,
                    }
                })
                .collect(),
        };
        self.refactor(g_rows, &ident_scaling);
        let e = self.cone_identity();

        let (x0, _, zt) = self.kkt_solve(&ident_scaling, &vec![0.0; nv], &self.b, h);
        let mut s: Vec<f64> = zt.iter().map(|v| -v).collect();
        let marg = if m > 0 { self.cone_margin(&s) } else { 1.0 };
        let scale_s = s.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        if marg <= 1e-8 * scale_s {
            let shift = 1.0 - marg;
            for (si, ei) in s.iter_mut().zip(&e) {
                *si += shift * ei;
            }
        }
        let negc: Vec<f64> = self.c.iter().map(|v| -v).collect();
        let (_, y0, z0raw) = self.kkt_solve(&ident_scaling, &negc, &vec![0.0; ne], &vec![0.0; m]);
        let mut z = z0raw;
        let marg = if m > 0 { self.cone_margin(&z) } else { 1.0 };
        let scale_z = z.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        if marg <= 1e-8 * scale_z {
            let shift = 1.0 - marg;
            for (zi, ei) in z.iter_mut().zip(&e) {
                *zi += shift * ei;
            }
        }
        let mut x = x0;
        let mut y = y0;
        let mut tau = 1.0f64;
        let mut kappa = 1.0f64;

        let deg = self.cone_degree() + 1.0;
        let mut best: Option<(f64, ConicOutcome)> = None;
        let mut iterations = 0usize;
        let mut stalls = 0usize;

        for iter in 0..tol.max_iter {
            iterations = iter;
            // residuals
            let aty = at_mul(&y);
            let gtz = gt_mul(&z);
            let mut hrx = vec![0.0; nv];
            for j in 0..nv {
                hrx[j] = aty[j] + gtz[j] + self.c[j] * tau;
            }
            let ax = a_mul(&x);
            let mut hry = vec![0.0; ne];
            for i in 0..ne {
                hry[i] = ax[i] - self.b[i] * tau;
            }
            let gx = g_mul(&x);
            let mut hrz = vec![0.0; m];
            for r in 0..m {
                hrz[r] = gx[r] + s[r] - h[r] * tau;
            }
            let cx = dot(&self.c, &x);
            let by = dot(&self.b, &y);
            let hz = dot(h, &z);
            let hrt = cx + by + hz + kappa;

            let sz: f64 = dot(&s, &z);
            let mu = (sz + tau * kappa) / deg;

            if std::env::var_os("RPP_IPM_TRACE").is_some() {
                eprintln!(
                    "it {iter}: tau={tau:.3e} kap={kappa:.3e} mu={mu:.3e} rx={:.3e} ry={:.3e} rz={:.3e} rt={:.3e} s_margin={:.3e} z_margin={:.3e}",
                    norm2(&hrx), norm2(&hry), norm2(&hrz), hrt,
                    self.cone_margin(&s), self.cone_margin(&z)
                );
            }

            // convergence bookkeeping (all quantities scaled by 1/tau)
            let pres = (norm2(&hry) / norm_b).max(norm2(&hrz) / norm_h) / tau;
            let dres = norm2(&hrx) / norm_c / tau;
            let pcost = cx / tau;
            let dcost = -(by + hz) / tau;
            let gap = sz / (tau * tau);
            let relgap = if pcost < 0.0 {
                gap / (-pcost)
            } else if dcost > 0.0 {
                gap / dcost
            } else {
                f64::INFINITY
            };

            let score = pres.max(dres) + gap.min(relgap);
            let make_outcome = |status: ConicStatus| -> ConicOutcome {
                let xh: Vec<f64> = x.iter().map(|v| v / tau).collect();
                let yh: Vec<f64> = y.iter().map(|v| v / tau).collect();
                let zh: Vec<f64> = z.iter().map(|v| v / tau).collect();
                self.extract(status, xh, yh, zh, pcost, pres, dres, gap, relgap, iter, None)
            };

            if pres <= tol.feas && dres <= tol.feas && (gap <= tol.gap_abs || relgap <= tol.gap_rel)
            {
                return make_outcome(ConicStatus::Optimal);
            }
            // infeasibility certificates
            let bhz = by + hz;
            if bhz < 0.0 {
                let res = norm2(&add_vec(&aty, &gtz)) / norm_c;
                if res / (-bhz) <= tol.feas * 1.0 {
                    let scale = -1.0 / bhz;
                    let yh: Vec<f64> = y.iter().map(|v| v * scale).collect();
                    let zh: Vec<f64> = z.iter().map(|v| v * scale).collect();
                    return self.extract(
                        ConicStatus::Infeasible,
                        vec![0.0; nv],
                        yh,
                        zh,
                        f64::INFINITY,
                        pres,
                        dres,
                        gap,
                        relgap,
                        iter,
                        None,
                    );
                }
            }
            if cx < 0.0 {
                let resp = (norm2(&ax) / norm_b).max(norm2(&add_vec(&gx, &s)) / norm_h);
                if resp / (-cx) <= tol.feas * 1.0 {
                    let scale = -1.0 / cx;
                    let ray: Vec<f64> = x.iter().map(|v| v * scale).collect();
                    let xh: Vec<f64> = x.iter().map(|v| v / tau.max(1e-300)).collect();
                    return self.extract(
                        ConicStatus::Unbounded,
                        xh,
                        vec![0.0; ne],
                        vec![0.0; m],
                        f64::NEG_INFINITY,
                        pres,
                        dres,
                        gap,
                        relgap,
                        iter,
                        Some(ray),
                    );
                }
            }

            if best.as_ref().map(|(sc, _)| score < *sc).unwrap_or(true) {
                best = Some((score, make_outcome(ConicStatus::NumericalFailure)));
                stalls = 0;
            } else {
                stalls += 1;
                if stalls > 20 {
                    break;
                }
            }

            // ---- NT scaling and factorization ------------------------------
            let scal = self.compute_scaling(&s, &z);
            self.refactor(g_rows, &scal);

            let negc: Vec<f64> = self.c.iter().map(|v| -v).collect();
            let (x1, y1, z1) = self.kkt_solve(&scal, &negc, &self.b, &h.to_vec());
            // c'x1 + b'y1 + h'z1 = -||W z1||^2 exactly; the norm form avoids
            // the cancellation that otherwise flips the sign of the tau
            // denominator near convergence
            let wz1 = self.apply_w_vec(&scal, &z1);
            let denom_base = -dot(&wz1, &wz1);

            // lambda o lambda
            let mut lam_sq = vec![0.0; m];
            for i in 0..self.nonneg {
                lam_sq[i] = scal.lam_nn[i] * scal.lam_nn[i];
            }
            {
                let mut base = self.nonneg;
                for (k, &d) in self.socs.iter().enumerate() {
                    let lam = &scal.socs[k].lam;
                    lam_sq[base] = lam.iter().map(|v| v * v).sum();
                    for i in 1..d {
                        lam_sq[base + i] = 2.0 * lam[0] * lam[i];
                    }
                    base += d;
                }
            }

            // Solve the 6-equation Newton system for arbitrary targets:
            //   A'dy + G'dz + c dtau              = bx
            //   A dx - b dtau                     = by
            //   G dx + ds - h dtau                = bz
            //   c'dx + b'dy + h'dz + dkappa       = bt
            //   lam o (W^-T ds + W dz)            = d_s
            //   kappa dtau + tau dkappa           = d_tk
            type Dir = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64);
            let solve_once = |bx: &[f64],
                              by: &[f64],
                              bz: &[f64],
                              bt: f64,
                              d_s: &[f64],
                              d_tk: f64|
             -> Dir {
                let linv_ds = self.circ_inv_lambda(&scal, d_s);
                let w_linv = self.apply_w_vec(&scal, &linv_ds);
                let mut bz_red: Vec<f64> = vec![0.0; m];
                for r in 0..m {
                    bz_red[r] = bz[r] - w_linv[r];
                }
                let (x2, y2, z2) = self.kkt_solve(&scal, bx, by, &bz_red);
                let num =
                    bt - (dot(&self.c, &x2) + dot(&self.b, &y2) + dot(h, &z2)) - d_tk / tau;
                let den = denom_base - kappa / tau;
                let dtau = num / den;
                let dx: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a + dtau * b).collect();
                let dy: Vec<f64> = y2.iter().zip(&y1).map(|(a, b)| a + dtau * b).collect();
                let dz: Vec<f64> = z2.iter().zip(&z1).map(|(a, b)| a + dtau * b).collect();
                let wdz = self.apply_w_vec(&scal, &dz);
                let mut inner = vec![0.0; m];
                for r in 0..m {
                    inner[r] = linv_ds[r] - wdz[r];
                }
                let ds = self.apply_w_vec(&scal, &inner);
                let dkappa = (d_tk - kappa * dtau) / tau;
                (dx, dy, dz, ds, dtau, dkappa)
            };
            let newton_residual = |d: &Dir,
                                   bx: &[f64],
                                   by: &[f64],
                                   bz: &[f64],
                                   bt: f64,
                                   d_s: &[f64],
                                   d_tk: f64|
             -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, Vec<f64>, f64) {
                let (dx, dy, dz, ds, dtau, dkappa) = d;
                let aty = at_mul(dy);
                let gtz = gt_mul(dz);
                let mut rbx = vec![0.0; nv];
                for j in 0..nv {
                    rbx[j] = bx[j] - (aty[j] + gtz[j] + self.c[j] * dtau);
                }
                let adx = a_mul(dx);
                let mut rby = vec![0.0; ne];
                for i in 0..ne {
                    rby[i] = by[i] - (adx[i] - self.b[i] * dtau);
                }
                let gdx = g_mul(dx);
                let mut rbz = vec![0.0; m];
                for r in 0..m {
                    rbz[r] = bz[r] - (gdx[r] + ds[r] - h[r] * dtau);
                }
                let rbt =
                    bt - (dot(&self.c, dx) + dot(&self.b, dy) + dot(h, dz) + dkappa);
                let wids = self.apply_winv_vec(&scal, ds);
                let wdz = self.apply_w_vec(&scal, dz);
                let sum: Vec<f64> = wids.iter().zip(&wdz).map(|(a, b)| a + b).collect();
                let lam_sum = self.circ_prod_lambda(&scal, &sum);
                let mut rds = vec![0.0; m];
                for r in 0..m {
                    rds[r] = d_s[r] - lam_sum[r];
                }
                let rtk = d_tk - (kappa * dtau + tau * dkappa);
                (rbx, rby, rbz, rbt, rds, rtk)
            };
            let direction = |sigma: f64,
                             ds_extra: Option<&[f64]>,
                             dtk_extra: f64|
             -> Dir {
                let mut d_s = vec![0.0; m];
                for r in 0..m {
                    d_s[r] = -lam_sq[r] + sigma * mu * e[r];
                }
                if let Some(extra) = ds_extra {
                    for r in 0..m {
                        d_s[r] -= extra[r];
                    }
                }
                let d_tk = -tau * kappa + sigma * mu - dtk_extra;
                let one_minus = 1.0 - sigma;
                let bx: Vec<f64> = hrx.iter().map(|v| -one_minus * v).collect();
                let by_r: Vec<f64> = hry.iter().map(|v| -one_minus * v).collect();
                let bz: Vec<f64> = hrz.iter().map(|v| -one_minus * v).collect();
                let bt = -one_minus * hrt;
                let mut d = solve_once(&bx, &by_r, &bz, bt, &d_s, d_tk);
                // one refinement pass over the full system
                for _ in 0..2 {
                    let (rbx, rby, rbz, rbt, rds, rtk) =
                        newton_residual(&d, &bx, &by_r, &bz, bt, &d_s, d_tk);
                    let err = norm2(&rbx).max(norm2(&rby)).max(norm2(&rbz)).max(rbt.abs());
                    if err <= 1e-12 * (1.0 + norm2(&bx).max(norm2(&bz))) {
                        break;
                    }
                    let corr = solve_once(&rbx, &rby, &rbz, rbt, &rds, rtk);
                    for j in 0..nv {
                        d.0[j] += corr.0[j];
                    }
                    for i in 0..ne {
                        d.1[i] += corr.1[i];
                    }
                    for r in 0..m {
                        d.2[r] += corr.2[r];
                        d.3[r] += corr.3[r];
                    }
                    d.4 += corr.4;
                    d.5 += corr.5;
                }
                d
            };

            // affine direction
            let (_dx_a, _dy_a, dz_a, ds_a, dtau_a, dkap_a) = direction(0.0, None, 0.0);
            let alpha_aff = {
                let mut a = self.max_step(&s, &ds_a).min(self.max_step(&z, &dz_a));
                if dtau_a < 0.0 {
                    a = a.min(-tau / dtau_a);
                }
                if dkap_a < 0.0 {
                    a = a.min(-kappa / dkap_a);
                }
                a.min(1.0)
            };
            // Mehrotra centering from the affine complementarity decrease
            let mu_aff = {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += (s[r] + alpha_aff * ds_a[r]) * (z[r] + alpha_aff * dz_a[r]);
                }
                acc += (tau + alpha_aff * dtau_a) * (kappa + alpha_aff * dkap_a);
                acc / deg
            };
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

            // Mehrotra correction: (W^-T ds_a) o (W dz_a) and dtau*dkappa
            let winv_ds = self.apply_winv_vec(&scal, &ds_a);
            let w_dz = self.apply_w_vec(&scal, &dz_a);
            let corr = self.circ_prod(&winv_ds, &w_dz);
            let (dx, dy, dz, ds, dtau, dkappa) =
                direction(sigma, Some(&corr), dtau_a * dkap_a);

            let mut alpha = self.max_step(&s, &ds).min(self.max_step(&z, &dz));
            if dtau < 0.0 {
                alpha = alpha.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                alpha = alpha.min(-kappa / dkappa);
            }
            let mut alpha = (0.99 * alpha).min(1.0);
            if !alpha.is_finite() || alpha <= 1e-10 {
                break;
            }

            // step guard: a corrupted direction must not poison a nearly
            // converged iterate; halve the step until residuals stay sane
            let res_now = norm2(&hrx) + norm2(&hry) + norm2(&hrz) + hrt.abs();
            let mut accepted = false;
            for _ in 0..6 {
                let cand_res = {
                    let xc: Vec<f64> = x.iter().zip(&dx).map(|(v, d)| v + alpha * d).collect();
                    let yc: Vec<f64> = y.iter().zip(&dy).map(|(v, d)| v + alpha * d).collect();
                    let zc: Vec<f64> = z.iter().zip(&dz).map(|(v, d)| v + alpha * d).collect();
                    let sc: Vec<f64> = s.iter().zip(&ds).map(|(v, d)| v + alpha * d).collect();
                    let tc = tau + alpha * dtau;
                    let aty = at_mul(&yc);
                    let gtz = gt_mul(&zc);
                    let mut acc = 0.0f64;
                    for j in 0..nv {
                        let v = aty[j] + gtz[j] + self.c[j] * tc;
                        acc += v * v;
                    }
                    let ax = a_mul(&xc);
                    for i in 0..ne {
                        let v = ax[i] - self.b[i] * tc;
                        acc += v * v;
                    }
                    let gx = g_mul(&xc);
                    for r in 0..m {
                        let v = gx[r] + sc[r] - h[r] * tc;
                        acc += v * v;
                    }
                    acc.sqrt()
                };
                if cand_res <= 10.0 * res_now + 1e-8 {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }

            for j in 0..nv {
                x[j] += alpha * dx[j];
            }
            for i in 0..ne {
                y[i] += alpha * dy[i];
            }
            for r in 0..m {
                z[r] += alpha * dz[r];
                s[r] += alpha * ds[r];
            }
            tau += alpha * dtau;
            kappa += alpha * dkappa;
            if tau <= 0.0 || kappa < 0.0 || !tau.is_finite() {
                break;
            }
        }

        // no clean exit: grade the best iterate against the reduced tier
        let mut out = best
            .map(|(_, o)| o)
            .unwrap_or_else(|| self.extract(
                ConicStatus::NumericalFailure,
                vec![0.0; nv],
                vec![0.0; ne],
                vec![0.0; m],
                f64::NAN,
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
                iterations,
                None,
            ));
        let r = out.residuals;
        if r.primal <= tol.reduced_feas
            && r.dual <= tol.reduced_feas
            && (r.gap <= tol.reduced_gap_abs || r.rel_gap <= tol.reduced_gap_rel)
        {
            out.status = ConicStatus::Optimal;
        }
        out.iterations = iterations;
        out
    }

    fn circ_prod_lambda(&self, scal: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut lam_full = vec![0.0; self.m];
        lam_full[..self.nonneg].copy_from_slice(&scal.lam_nn);
        let mut base = self.nonneg;
        for (k, &d) in self.socs.iter().enumerate() {
            lam_full[base..base + d].copy_from_slice(&scal.socs[k].lam);
            base += d;
        }
        self.circ_prod(&lam_full, v)
    }

    fn circ_prod(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.nonneg {
            out[i] = a[i] * b[i];
        }
        let mut base = self.nonneg;
        for &d in &self.socs {
            let av = &a[base..base + d];
            let bv = &b[base..base + d];
            out[base] = dot(av, bv);
            for i in 1..d {
                out[base + i] = av[0] * bv[i] + bv[0] * av[i];
            }
            base += d;
        }
        out
    }

    fn circ_inv_lambda(&self, scal: &Scaling, dv: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.nonneg {
            out[i] = dv[i] / scal.lam_nn[i];
        }
        let mut base = self.nonneg;
        for (k, &d) in self.socs.iter().enumerate() {
            let lam = &scal.socs[k].lam;
            let dvb = &dv[base..base + d];
            let det = scal.socs[k].lam_det;
            let x0 = (lam[0] * dvb[0]
                - lam[1..].iter().zip(&dvb[1..]).map(|(l, v)| l * v).sum::<f64>())
                / det;
            out[base] = x0;
            for i in 1..d {
                out[base + i] = (dvb[i] - x0 * lam[i]) / lam[0];
            }
            base += d;
        }
        out
    }

    fn apply_w_vec(&self, scal: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.nonneg {
            out[i] = scal.w_nn[i] * v[i];
        }
        let mut base = self.nonneg;
        for (k, &d) in self.socs.iter().enumerate() {
            let r = apply_w(&scal.socs[k], &v[base..base + d]);
            out[base..base + d].copy_from_slice(&r);
            base += d;
        }
        out
    }

    fn apply_winv_vec(&self, scal: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.nonneg {
            out[i] = v[i] / scal.w_nn[i];
        }
        let mut base = self.nonneg;
        for (k, &d) in self.socs.iter().enumerate() {
            let sc = &scal.socs[k];
            let vb = &v[base..base + d];
            // W^-1 v = (1/eta) (2 (J wbar)(J wbar)' v - J v)
            let mut u = sc.wbar.clone();
            for t in u.iter_mut().skip(1) {
                *t = -*t;
            }
            let udot = dot(&u, vb);
            out[base] = (2.0 * u[0] * udot - vb[0]) / sc.eta;
            for i in 1..d {
                out[base + i] = (2.0 * u[i] * udot + vb[i]) / sc.eta;
            }
            base += d;
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn extract(
        &self,
        status: ConicStatus,
        xh: Vec<f64>,
        yh: Vec<f64>,
        zh: Vec<f64>,
        objective: f64,
        pres: f64,
        dres: f64,
        gap: f64,
        relgap: f64,
        iterations: usize,
        ray: Option<Vec<f64>>,
    ) -> ConicOutcome {
        // map the equilibrated iterate back to original coordinates
        let xh: Vec<f64> = xh
            .iter()
            .zip(&self.col_scale)
            .map(|(&v, &s)| v * s)
            .collect();
        let yh: Vec<f64> = yh
            .iter()
            .zip(&self.row_scale_a)
            .map(|(&v, &s)| v * s)
            .collect();
        let zh: Vec<f64> = zh
            .iter()
            .zip(&self.row_scale_g)
            .map(|(&v, &s)| v * s)
            .collect();
        let ray = ray.map(|r| {
            r.iter()
                .zip(&self.col_scale)
                .map(|(&v, &s)| v * s)
                .collect::<Vec<f64>>()
        });
        let objective = if objective.is_finite() {
            dot(&self.c_orig, &xh)
        } else {
            objective
        };
        let ineq_duals = zh[..self.n_ineq].to_vec();
        let mut bound_duals = vec![(0.0, 0.0); self.nv];
        for (j, &(lo, hi)) in self.bound_rows.iter().enumerate() {
            if let Some(r) = lo {
                bound_duals[j].0 = zh[r];
            }
            if let Some(r) = hi {
                bound_duals[j].1 = zh[r];
            }
        }
        let mut cone_duals = Vec::with_capacity(self.socs.len());
        let mut base = self.nonneg;
        for &d in &self.socs {
            let lam = zh[base];
            let pi: Vec<f64> = zh[base + 1..base + d].iter().map(|v| -v).collect();
            cone_duals.push((lam, pi));
            base += d;
        }
        ConicOutcome {
            status,
            x: xh,
            objective,
            eq_duals: yh,
            ineq_duals,
            cone_duals,
            bound_duals,
            residuals: Residuals {
                primal: pres,
                dual: dres,
                gap,
                rel_gap: relgap,
            },
            ray,
            iterations,
        }
    }
}

fn apply_w(sc: &SocScaling, v: &[f64]) -> Vec<f64> {
    // W v = eta (2 wbar (wbar' v) - J v)
    let d = v.len();
    let wd = dot(&sc.wbar, v);
    let mut out = vec![0.0; d];
    out[0] = sc.eta * (2.0 * sc.wbar[0] * wd - v[0]);
    for i in 1..d {
        out[i] = sc.eta * (2.0 * sc.wbar[i] * wd + v[i]);
    }
    out
}

fn apply_winv_block(sc: &SocScaling, v: &[f64]) -> Vec<f64> {
    // W^-1 v = (1/eta) (2 (J wbar)((J wbar)' v) - J v)
    let d = v.len();
    let mut u = sc.wbar.clone();
    for t in u.iter_mut().skip(1) {
        *t = -*t;
    }
    let udot = dot(&u, v);
    let mut out = vec![0.0; d];
    out[0] = (2.0 * u[0] * udot - v[0]) / sc.eta;
    for i in 1..d {
        out[i] = (2.0 * u[i] * udot + v[i]) / sc.eta;
    }
    out
}

fn mat_vec(rows: &[SparseRow], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.dot(x)).collect()
}

fn mat_t_vec(rows: &[SparseRow], v: &[f64], n_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_cols];
    for (i, row) in rows.iter().enumerate() {
        for (&cidx, &val) in row.cols.iter().zip(&row.vals) {
            out[cidx] += val * v[i];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
