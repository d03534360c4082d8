//! Sparse symmetric linear algebra for the interior-point KKT systems.
//!
//! Provides a column-compressed symmetric matrix (upper triangle stored),
//! a fill-reducing minimum-degree ordering, and an up-looking LDL^T
//! factorization with sign-controlled dynamic regularization. The KKT
//! matrices solved here are symmetric quasi-definite once regularized, so
//! the factorization never needs pivoting.

/// Symmetric sparse matrix, upper triangle in compressed-column form.
///
/// Entry (i, j) with i <= j is stored in column j. Row indices within a
/// column are strictly increasing.
#[derive(Debug, Clone)]
pub struct SymCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

/// Accumulates (row, col, value) triplets for the upper triangle of a
/// symmetric matrix. Duplicate entries are summed.
#[derive(Debug, Clone)]
pub struct SymTriplets {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymTriplets {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    /// Add a value at (i, j); the pair is mirrored into the upper triangle.
    /// Structural zeros are kept so the pattern survives value updates.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, v));
    }

    pub fn build(self) -> SymCsc {
        self.build_with_slots().0
    }

    /// Build the CSC form and a map from insertion order to value slot,
    /// letting callers rewrite values in place across refactorizations.
    pub fn build_with_slots(self) -> (SymCsc, Vec<usize>) {
        let n_entries = self.entries.len();
        let mut order: Vec<usize> = (0..n_entries).collect();
        order.sort_unstable_by_key(|&e| {
            let (r, c, _) = self.entries[e];
            (c, r)
        });
        let mut row_idx: Vec<usize> = Vec::with_capacity(n_entries);
        let mut values: Vec<f64> = Vec::with_capacity(n_entries);
        let mut cols: Vec<usize> = Vec::with_capacity(n_entries);
        let mut slots = vec![0usize; n_entries];
        for &e in &order {
            let (r, c, v) = self.entries[e];
            if let (Some(&lr), Some(&lc)) = (row_idx.last(), cols.last()) {
                if lr == r && lc == c {
                    *values.last_mut().unwrap() += v;
                    slots[e] = row_idx.len() - 1;
                    continue;
                }
            }
            row_idx.push(r);
            values.push(v);
            cols.push(c);
            slots[e] = row_idx.len() - 1;
        }
        let mut col_ptr = vec![0usize; self.n + 1];
        for &c in &cols {
            col_ptr[c + 1] += 1;
        }
        for c in 0..self.n {
            col_ptr[c + 1] += col_ptr[c];
        }
        (
            SymCsc {
                n: self.n,
                col_ptr,
                row_idx,
                values,
            },
            slots,
        )
    }
}

impl SymCsc {
    /// y += alpha * A * x using the full symmetric matrix.
    pub fn mul_add(&self, x: &[f64], y: &mut [f64], alpha: f64) {
        for j in 0..self.n {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[k];
                let v = self.values[k] * alpha;
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }
}

/// Minimum-degree ordering on the adjacency structure of a symmetric matrix.
///
/// Plain greedy minimum degree with clique formation on elimination. Ties
/// break on the lowest vertex index so the ordering is deterministic.
pub fn min_degree_order(a: &SymCsc) -> Vec<usize> {
    let n = a.n;
    // adjacency as sorted vecs, rebuilt lazily; sets would be cleaner but
    // this keeps allocation churn low at these sizes
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for k in a.col_ptr[j]..a.col_ptr[j + 1] {
            let i = a.row_idx[k];
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }

    let mut eliminated = vec![false; n];
    let mut degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    let mut order = Vec::with_capacity(n);
    // once the remaining graph has gone dense, exact degrees stop paying for
    // themselves; dump the tail in index order
    let dense_cutoff = 192usize.max(n / 8);
    for _step in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = usize::MAX;
        for v in 0..n {
            if !eliminated[v] && degree[v] < best_deg {
                best_deg = degree[v];
                best = v;
            }
        }
        if best == usize::MAX {
            break;
        }
        if best_deg > dense_cutoff {
            for v in 0..n {
                if !eliminated[v] {
                    order.push(v);
                }
            }
            break;
        }
        let v = best;
        eliminated[v] = true;
        order.push(v);

        // neighbors of v form a clique among the survivors
        let nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !eliminated[u]).collect();
        for &u in &nbrs {
            adj[u].retain(|&w| !eliminated[w]);
        }
        for (ai, &u) in nbrs.iter().enumerate() {
            for &w in nbrs[ai + 1..].iter() {
                if !adj[u].contains(&w) {
                    adj[u].push(w);
                    adj[w].push(u);
                }
            }
        }
        for &u in &nbrs {
            degree[u] = adj[u].len();
        }
    }
    order
}

/// Symbolic structure of an LDL^T factorization.
pub struct LdlSymbolic {
    pub n: usize,
    /// fill-reducing permutation: perm[k] = original index of the k-th pivot
    pub perm: Vec<usize>,
    pub perm_inv: Vec<usize>,
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
    /// permuted upper-triangular copy of the matrix pattern
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// map from permuted entry slot to original value slot
    aval_map: Vec<usize>,
}

pub struct LdlFactor {
    pub n: usize,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    /// count of diagonal entries whose sign had to be forced
    pub regularized: usize,
}

impl LdlSymbolic {
    /// Analyze the pattern of `a` under the given permutation
    /// (use `min_degree_order` or the identity).
    pub fn analyze(a: &SymCsc, perm: Vec<usize>) -> Self {
        let n = a.n;
        assert_eq!(perm.len(), n);
        let mut perm_inv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            perm_inv[p] = k;
        }

        // Build permuted upper-triangular pattern: entry (i,j) of A maps to
        // (pi, pj) = (perm_inv[i], perm_inv[j]), stored at (min, max).
        let nnz = a.row_idx.len();
        let mut tri: Vec<(usize, usize, usize)> = Vec::with_capacity(nnz);
        for j in 0..n {
            for k in a.col_ptr[j]..a.col_ptr[j + 1] {
                let i = a.row_idx[k];
                let (pi, pj) = (perm_inv[i], perm_inv[j]);
                let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
                tri.push((c, r, k));
            }
        }
        tri.sort_unstable();
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::with_capacity(nnz);
        let mut aval_map = Vec::with_capacity(nnz);
        for &(c, r, k) in &tri {
            ai.push(r);
            aval_map.push(k);
            ap[c + 1] = ai.len();
        }
        for c in 0..n {
            if ap[c + 1] == 0 {
                ap[c + 1] = ap[c];
            }
        }

        // Elimination tree and column counts (Davis, LDL).
        let mut parent = vec![-1isize; n];
        let mut l_nz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                while i < k && flag[i] != k {
                    if parent[i] == -1 {
                        parent[i] = k as isize;
                    }
                    l_nz[i] += 1;
                    flag[i] = k;
                    i = parent[i] as usize;
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + l_nz[k];
        }
        Self {
            n,
            perm,
            perm_inv,
            parent,
            l_col_ptr,
            ap,
            ai,
            aval_map,
        }
    }

    pub fn l_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    /// Numeric factorization P A P^T = L D L^T.
    ///
    /// `sign[k]` (in original indexing) is the expected sign of D[k]; when a
    /// pivot crosses zero it is forced to `sign * reg` and counted, which
    /// keeps the quasi-definite factorization alive. Callers compensate with
    /// iterative refinement.
    pub fn factor(&self, a: &SymCsc, sign: &[f64], reg: f64) -> LdlFactor {
        let n = self.n;
        let mut l_values = vec![0.0f64; self.l_nnz()];
        let mut l_row_idx = vec![0usize; self.l_nnz()];
        let mut d = vec![0.0f64; n];
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut l_next = self.l_col_ptr[..n].to_vec();
        let mut regularized = 0usize;

        for k in 0..n {
            // scatter the permuted column k of A into y
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let i = self.ai[p];
                let v = a.values[self.aval_map[p]];
                y[i] += v;
                // walk up the etree recording the pattern in topological order
                let mut len = 0usize;
                let mut ii = i;
                while flag[ii] != k {
                    pattern[len] = ii;
                    len += 1;
                    flag[ii] = k;
                    ii = self.parent[ii] as usize;
                }
                // reverse into the stack region
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            // sparse triangular solve: L(k, 0..k) and D
            let mut dk = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p2 = l_next[i];
                for p in self.l_col_ptr[i]..p2 {
                    y[l_row_idx[p]] -= l_values[p] * yi;
                }
                let lki = yi / d[i];
                dk -= lki * yi;
                l_row_idx[p2] = k;
                l_values[p2] = lki;
                l_next[i] = p2 + 1;
            }
            let s = sign[self.perm[k]];
            if s == 0.0 {
                if dk.abs() < reg {
                    dk = if dk >= 0.0 { reg } else { -reg };
                    regularized += 1;
                }
            } else if s * dk < reg {
                dk = s * reg;
                regularized += 1;
            }
            d[k] = dk;
        }
        LdlFactor {
            n,
            l_col_ptr: self.l_col_ptr.clone(),
            l_row_idx,
            l_values,
            d,
            regularized,
        }
    }
}

impl LdlFactor {
    /// Solve (P A P^T) (P x) = P b in place given `b` in original indexing.
    pub fn solve(&self, sym: &LdlSymbolic, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        let mut w = vec![0.0f64; n];
        for k in 0..n {
            w[k] = b[sym.perm[k]];
        }
        // forward: L w = w
        for j in 0..n {
            let wj = w[j];
            if wj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    w[self.l_row_idx[p]] -= self.l_values[p] * wj;
                }
            }
        }
        for j in 0..n {
            w[j] /= self.d[j];
        }
        // backward: L^T w = w
        for j in (0..n).rev() {
            let mut wj = w[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                wj -= self.l_values[p] * w[self.l_row_idx[p]];
            }
            w[j] = wj;
        }
        for k in 0..n {
            x[sym.perm[k]] = w[k];
        }
    }
}

/// KKT solver: factors a statically regularized copy, then refines solves
/// against the true matrix.
pub struct KktSolver {
    a: SymCsc,
    a_reg: SymCsc,
    sym: LdlSymbolic,
    sign: Vec<f64>,
    diag_slots: Vec<usize>,
    factor: Option<LdlFactor>,
    static_reg: f64,
    dyn_reg: f64,
}

impl KktSolver {
    /// `diag_slots[k]` must point at the value slot of the explicit (k,k)
    /// entry, which the caller is required to have added to the pattern.
    pub fn new(
        a: SymCsc,
        sign: Vec<f64>,
        diag_slots: Vec<usize>,
        static_reg: f64,
        dyn_reg: f64,
    ) -> Self {
        let order = min_degree_order(&a);
        let sym = LdlSymbolic::analyze(&a, order);
        let a_reg = a.clone();
        Self {
            a,
            a_reg,
            sym,
            sign,
            diag_slots,
            factor: None,
            static_reg,
            dyn_reg,
        }
    }

    pub fn diag_slot(&self, k: usize) -> usize {
        self.diag_slots[k]
    }

    /// Replace the numeric values (same pattern) and refactor.
    pub fn update_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.a.values.len());
        self.a.values.copy_from_slice(values);
        self.a_reg.values.copy_from_slice(values);
        for k in 0..self.a.n {
            self.a_reg.values[self.diag_slots[k]] += self.sign[k] * self.static_reg;
        }
        self.factor = Some(self.sym.factor(&self.a_reg, &self.sign, self.dyn_reg));
    }

    pub fn values_len(&self) -> usize {
        self.a.values.len()
    }

    pub fn regularized(&self) -> usize {
        self.factor.as_ref().map(|f| f.regularized).unwrap_or(0)
    }

    /// Solve A x = b with iterative refinement against the true matrix.
    pub fn solve_refined(&self, b: &[f64], x: &mut [f64]) {
        let f = self.factor.as_ref().expect("factor before solve");
        let n = self.a.n;
        f.solve(&self.sym, b, x);
        let mut resid = vec![0.0f64; n];
        let mut corr = vec![0.0f64; n];
        let mut best = f64::INFINITY;
        let mut best_x: Option<Vec<f64>> = None;
        for _ in 0..4 {
            resid.copy_from_slice(b);
            self.a.mul_add(x, &mut resid, -1.0);
            let rn = resid.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            let bn = b.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
            if rn <= 1e-13 * bn {
                return;
            }
            if rn < best {
                best = rn;
                best_x = Some(x.to_vec());
            } else {
                // refinement stopped paying off; keep the best iterate
                if let Some(bx) = best_x {
                    x.copy_from_slice(&bx);
                }
                return;
            }
            f.solve(&self.sym, &resid, &mut corr);
            for i in 0..n {
                x[i] += corr[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_from(a: &SymCsc) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; a.n]; a.n];
        for j in 0..a.n {
            for k in a.col_ptr[j]..a.col_ptr[j + 1] {
                let i = a.row_idx[k];
                m[i][j] += a.values[k];
                if i != j {
                    m[j][i] += a.values[k];
                }
            }
        }
        m
    }

    #[test]
    fn triplets_dedup_and_mul() {
        let mut t = SymTriplets::new(3);
        t.add(0, 0, 2.0);
        t.add(0, 1, 1.0);
        t.add(1, 0, 0.5); // mirrored duplicate, sums to 1.5
        t.add(2, 2, 3.0);
        let a = t.build();
        let d = dense_from(&a);
        assert_eq!(d[0][1], 1.5);
        assert_eq!(d[1][0], 1.5);
        let mut y = vec![0.0; 3];
        a.mul_add(&[1.0, 2.0, 3.0], &mut y, 1.0);
        assert!((y[0] - (2.0 + 3.0)).abs() < 1e-14);
        assert!((y[1] - 1.5).abs() < 1e-14);
        assert!((y[2] - 9.0).abs() < 1e-14);
    }

    #[test]
    fn ldl_solves_spd_system() {
        // small SPD matrix: tridiagonal with weak off-diagonals
        let n = 50;
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            t.add(i, i, 4.0);
        }
        for i in 0..n {
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
            }
            if i + 7 < n {
                t.add(i, i + 7, -0.5);
            }
        }
        let (a, slots) = t.build_with_slots();
        let diag_slots: Vec<usize> = (0..n).map(|k| slots[k]).collect();
        let sign = vec![1.0; n];
        let mut solver = KktSolver::new(a.clone(), sign, diag_slots, 0.0, 1e-12);
        let vals = a.values.clone();
        solver.update_values(&vals);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = vec![0.0; n];
        solver.solve_refined(&b, &mut x);
        let mut r = b.clone();
        a.mul_add(&x, &mut r, -1.0);
        let rn = r.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(rn < 1e-10, "residual {rn}");
    }

    #[test]
    fn ldl_solves_quasi_definite_kkt() {
        // [ I  B^T; B  -I ] style saddle system
        let n1 = 20;
        let n2 = 10;
        let n = n1 + n2;
        let mut t = SymTriplets::new(n);
        for i in 0..n1 {
            t.add(i, i, 1.0 + (i as f64) * 0.01);
        }
        for r in 0..n2 {
            t.add(n1 + r, n1 + r, -0.5);
        }
        for r in 0..n2 {
            t.add(r, n1 + r, 1.0);
            t.add((r * 2 + 3) % n1, n1 + r, -2.0);
        }
        let (a, slots) = t.build_with_slots();
        let diag_slots: Vec<usize> = (0..n).map(|k| slots[k]).collect();
        let mut sign = vec![1.0; n1];
        sign.extend(vec![-1.0; n2]);
        let mut solver = KktSolver::new(a.clone(), sign, diag_slots, 1e-9, 1e-10);
        solver.update_values(&a.values.clone());
        let b: Vec<f64> = (0..n).map(|i| ((i * i) as f64 * 0.11).cos()).collect();
        let mut x = vec![0.0; n];
        solver.solve_refined(&b, &mut x);
        let mut r = b.clone();
        a.mul_add(&x, &mut r, -1.0);
        let rn = r.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(rn < 1e-8, "residual {rn}");
    }

    #[test]
    fn min_degree_is_a_permutation() {
        let mut t = SymTriplets::new(6);
        for i in 0..6 {
            t.add(i, i, 1.0);
        }
        t.add(0, 5, 1.0);
        t.add(1, 4, 1.0);
        t.add(2, 3, 1.0);
        let a = t.build();
        let mut p = min_degree_order(&a);
        p.sort_unstable();
        assert_eq!(p, (0..6).collect::<Vec<_>>());
    }
}
