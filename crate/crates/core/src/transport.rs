//! Exact discrete optimal transport by the transportation simplex.
//!
//! The basis is a spanning tree over `rows + cols` nodes. The initial basis
//! comes from the matrix-minimum rule; entering cells are priced in blocks
//! and the flow is moved around the unique tree cycle. After a run of
//! degenerate pivots the solver switches to Bland's smallest-index rule until
//! the objective moves again, which rules out cycling.

use crate::error::{Error, Result};

/// Consecutive degenerate pivots tolerated before Bland's rule takes over.
const DEGENERATE_RUN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    /// Row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("cost matrix must be nonempty".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {x}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Optimal plan with the dual potentials that certify it.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    plan: Vec<f64>,
    /// Basic cells `(i, j)`; every positive entry of the plan is among them.
    basis: Vec<(usize, usize)>,
    pub value: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    pub pivots: usize,
}

impl TransportPlan {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Nonzero entries `(i, j, mass)`.
    pub fn flows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.basis.iter().map(move |&(i, j)| (i, j, self.get(i, j))).filter(|&(_, _, f)| f > 0.0)
    }

    /// Basic cells of the optimal tree, usable as a warm start.
    pub fn basis(&self) -> &[(usize, usize)] {
        &self.basis
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).sum()).collect()
    }
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<f64> {
    if m.len() != len {
        return Err(Error::DimensionMismatch { expected: len, found: m.len() });
    }
    if let Some(x) = m.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InfeasibleMarginals(format!("{name} has entry {x}")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InfeasibleMarginals(format!("{name} sums to {total}, expected 1")));
    }
    Ok(total)
}

/// `min ⟨P, C⟩` subject to `P 1 = r`, `Pᵀ 1 = s`, `P ≥ 0`.
pub fn solve_transport(cost: &CostMatrix, r: &[f64], s: &[f64]) -> Result<TransportPlan> {
    check_marginal("row marginal", r, cost.rows)?;
    check_marginal("column marginal", s, cost.cols)?;
    Simplex::new(cost, r, s).run()
}

/// Like [`solve_transport`], starting from `basis` when it is a spanning tree
/// whose flows under `r`, `s` are nonnegative, and from scratch otherwise.
pub fn solve_transport_from(
    cost: &CostMatrix,
    r: &[f64],
    s: &[f64],
    basis: &[(usize, usize)],
) -> Result<TransportPlan> {
    check_marginal("row marginal", r, cost.rows)?;
    check_marginal("column marginal", s, cost.cols)?;
    match Simplex::from_basis(cost, r, s, basis) {
        Some(sim) => sim.run(),
        None => Simplex::new(cost, r, s).run(),
    }
}

struct Simplex<'a> {
    cost: &'a CostMatrix,
    v: usize,
    w: usize,
    flow: Vec<f64>,
    in_basis: Vec<bool>,
    adj: Vec<Vec<usize>>,
    // per-pivot tree data
    pot: Vec<f64>,
    parent_cell: Vec<usize>,
    parent_node: Vec<usize>,
    depth: Vec<usize>,
    stack: Vec<usize>,
}

const NONE: usize = usize::MAX;

/// Remaining marginal mass below this is treated as exhausted by the start.
const MASS_EPS: f64 = 1e-15;

/// Negative tree flow tolerated when reusing a basis; clamped to zero.
const WARM_SLACK: f64 = 1e-14;

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets of `a` and `b`; false if they were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

impl<'a> Simplex<'a> {
    fn new(cost: &'a CostMatrix, r: &[f64], s: &[f64]) -> Self {
        let mut sim = Self::empty(cost);
        sim.least_cost_start(r, s);
        sim
    }

    fn empty(cost: &'a CostMatrix) -> Self {
        let (v, w) = (cost.rows, cost.cols);
        let n = v + w;
        Self {
            cost,
            v,
            w,
            flow: vec![0.0; v * w],
            in_basis: vec![false; v * w],
            adj: vec![Vec::new(); n],
            pot: vec![0.0; n],
            parent_cell: vec![NONE; n],
            parent_node: vec![NONE; n],
            depth: vec![0; n],
            stack: Vec::with_capacity(n),
        }
    }

    /// Flows on a given tree are fixed by the marginals; peel leaves to find them.
    fn from_basis(cost: &'a CostMatrix, r: &[f64], s: &[f64], basis: &[(usize, usize)]) -> Option<Self> {
        let (v, w) = (cost.rows, cost.cols);
        if basis.len() != v + w - 1 {
            return None;
        }
        let mut sets = DisjointSets::new(v + w);
        for &(i, j) in basis {
            if i >= v || j >= w || !sets.union(i, v + j) {
                return None;
            }
        }
        let mut sim = Self::empty(cost);
        for &(i, j) in basis {
            sim.enter(i * w + j, 0.0);
        }
        let mut rest: Vec<f64> = r.iter().chain(s).copied().collect();
        let mut degree: Vec<usize> = sim.adj.iter().map(Vec::len).collect();
        let mut done = vec![false; v * w];
        let mut leaves: Vec<usize> = (0..v + w).filter(|&k| degree[k] == 1).collect();
        while let Some(node) = leaves.pop() {
            if degree[node] != 1 {
                continue;
            }
            let cell = *sim.adj[node].iter().find(|&&c| !done[c])?;
            done[cell] = true;
            let (a, b) = sim.nodes_of(cell);
            let other = if a == node { b } else { a };
            let f = rest[node];
            if f < -WARM_SLACK {
                return None;
            }
            let f = f.max(0.0);
            sim.flow[cell] = f;
            rest[other] -= f;
            degree[node] = 0;
            degree[other] -= 1;
            if degree[other] == 1 {
                leaves.push(other);
            }
        }
        Some(sim)
    }

    #[inline]
    fn nodes_of(&self, cell: usize) -> (usize, usize) {
        (cell / self.w, self.v + cell % self.w)
    }

    /// Matrix-minimum start: fill cells in increasing cost order, then
    /// complete the forest to a spanning tree with zero-flow cells.
    fn least_cost_start(&mut self, r: &[f64], s: &[f64]) {
        let (v, w) = (self.v, self.w);
        let mut order: Vec<u32> = (0..(v * w) as u32).collect();
        let data = &self.cost.data;
        order.sort_unstable_by(|&a, &b| data[a as usize].total_cmp(&data[b as usize]).then(a.cmp(&b)));
        let mut sets = DisjointSets::new(v + w);
        let (mut a, mut b) = (r.to_vec(), s.to_vec());
        let mut rows_open = a.iter().filter(|x| **x > 0.0).count();
        let mut edges = 0;
        for &cell in &order {
            if rows_open == 0 {
                break;
            }
            let cell = cell as usize;
            let (i, j) = (cell / w, cell % w);
            if a[i] <= 0.0 || b[j] <= 0.0 || !sets.union(i, v + j) {
                continue;
            }
            let amount = a[i].min(b[j]);
            a[i] -= amount;
            b[j] -= amount;
            if a[i] <= MASS_EPS {
                a[i] = 0.0;
                rows_open -= 1;
            }
            if b[j] <= MASS_EPS {
                b[j] = 0.0;
            }
            self.enter(cell, amount);
            edges += 1;
        }
        for &cell in &order {
            if edges == v + w - 1 {
                break;
            }
            let cell = cell as usize;
            if sets.union(cell / w, v + cell % w) {
                self.enter(cell, 0.0);
                edges += 1;
            }
        }
    }

    fn enter(&mut self, cell: usize, amount: f64) {
        let (a, b) = self.nodes_of(cell);
        self.flow[cell] = amount;
        self.in_basis[cell] = true;
        self.adj[a].push(cell);
        self.adj[b].push(cell);
    }

    fn leave(&mut self, cell: usize) {
        let (a, b) = self.nodes_of(cell);
        self.flow[cell] = 0.0;
        self.in_basis[cell] = false;
        self.adj[a].retain(|&c| c != cell);
        self.adj[b].retain(|&c| c != cell);
    }

    /// Rebuilds parents, depths and potentials from row 0.
    fn index_tree(&mut self) {
        self.parent_cell.fill(NONE);
        self.parent_node.fill(NONE);
        self.stack.clear();
        self.stack.push(0);
        self.pot[0] = 0.0;
        self.depth[0] = 0;
        self.parent_node[0] = 0;
        while let Some(node) = self.stack.pop() {
            for k in 0..self.adj[node].len() {
                let cell = self.adj[node][k];
                if cell == self.parent_cell[node] {
                    continue;
                }
                let (a, b) = self.nodes_of(cell);
                let other = if a == node { b } else { a };
                self.parent_cell[other] = cell;
                self.parent_node[other] = node;
                self.depth[other] = self.depth[node] + 1;
                self.pot[other] = self.cost.data[cell] - self.pot[node];
                self.stack.push(other);
            }
        }
    }

    #[inline]
    fn reduced_cost(&self, cell: usize) -> f64 {
        let (a, b) = self.nodes_of(cell);
        self.cost.data[cell] - self.pot[a] - self.pot[b]
    }

    fn price_block(&self, cursor: &mut usize, block: usize, tol: f64) -> Option<usize> {
        let total = self.v * self.w;
        let w = self.w;
        let mut scanned = 0;
        let (mut i, mut j) = (*cursor / w, *cursor % w);
        while scanned < total {
            let mut best = NONE;
            let mut best_rc = -tol;
            let end = (scanned + block).min(total);
            let mut k = scanned;
            while k < end {
                let row = i * w;
                let pu = self.pot[i];
                let stop = (j + (end - k)).min(w);
                for jj in j..stop {
                    let cell = row + jj;
                    if self.in_basis[cell] {
                        continue;
                    }
                    let rc = self.cost.data[cell] - pu - self.pot[self.v + jj];
                    if rc < best_rc {
                        best_rc = rc;
                        best = cell;
                    }
                }
                k += stop - j;
                j = stop;
                if j == w {
                    j = 0;
                    i = if i + 1 == self.v { 0 } else { i + 1 };
                }
            }
            scanned = end;
            if best != NONE {
                *cursor = i * w + j;
                return Some(best);
            }
        }
        None
    }

    fn price_bland(&self, tol: f64) -> Option<usize> {
        (0..self.v * self.w).find(|&cell| !self.in_basis[cell] && self.reduced_cost(cell) < -tol)
    }

    /// Cells of the cycle closed by `entering`, in orientation order after it.
    fn cycle(&self, entering: usize) -> Vec<usize> {
        let (row, col) = self.nodes_of(entering);
        let (mut a, mut b) = (row, col);
        let mut a_path = Vec::new();
        let mut b_path = Vec::new();
        while self.depth[a] > self.depth[b] {
            a_path.push(self.parent_cell[a]);
            a = self.parent_node[a];
        }
        while self.depth[b] > self.depth[a] {
            b_path.push(self.parent_cell[b]);
            b = self.parent_node[b];
        }
        while a != b {
            a_path.push(self.parent_cell[a]);
            a = self.parent_node[a];
            b_path.push(self.parent_cell[b]);
            b = self.parent_node[b];
        }
        b_path.extend(a_path.into_iter().rev());
        b_path
    }

    fn run(mut self) -> Result<TransportPlan> {
        let max_cost = self.cost.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tol = 1e-12 * max_cost.max(1.0);
        let total = self.v * self.w;
        let block = ((total as f64).sqrt().ceil() as usize).max(16).min(total);
        let max_pivots = 50 * total + 10_000;
        let mut cursor = 0usize;
        let mut degenerate_run = 0usize;
        let mut pivots = 0usize;
        loop {
            self.index_tree();
            let bland = degenerate_run >= DEGENERATE_RUN;
            let entering = if bland { self.price_bland(tol) } else { self.price_block(&mut cursor, block, tol) };
            let Some(entering) = entering else { break };
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::NonFinite(format!("transportation simplex exceeded {max_pivots} pivots")));
            }
            let cycle = self.cycle(entering);
            // cells at even positions lose mass
            let mut leaving = NONE;
            let mut theta = f64::INFINITY;
            for (k, &cell) in cycle.iter().enumerate() {
                if k % 2 == 0 {
                    let f = self.flow[cell];
                    if f < theta || (f == theta && cell < leaving) {
                        theta = f;
                        leaving = cell;
                    }
                }
            }
            let theta = theta.max(0.0);
            for (k, &cell) in cycle.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[cell] = (self.flow[cell] - theta).max(0.0);
                } else {
                    self.flow[cell] += theta;
                }
            }
            self.leave(leaving);
            self.enter(entering, theta);
            if theta <= 1e-15 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
        }

        let mut plan = vec![0.0; total];
        let mut basis = Vec::with_capacity(self.v + self.w - 1);
        let mut value = 0.0;
        #[allow(clippy::needless_range_loop)]
        for cell in 0..total {
            if self.in_basis[cell] {
                plan[cell] = self.flow[cell];
                value += self.flow[cell] * self.cost.data[cell];
                basis.push((cell / self.w, cell % self.w));
            }
        }
        Ok(TransportPlan {
            rows: self.v,
            cols: self.w,
            plan,
            basis,
            value,
            row_potentials: self.pot[..self.v].to_vec(),
            col_potentials: self.pot[self.v..].to_vec(),
            pivots,
        })
    }
}
