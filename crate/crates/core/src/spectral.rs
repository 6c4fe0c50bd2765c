//! Discrete spectrum of the generator
//!
//! ```text
//! L = -∇V·∇ + β⁻¹ Δ
//! ```
//!
//! on a rectangular window, with reflecting (Neumann) or absorbing
//! (Dirichlet) faces. The operator is discretized as a generalized pencil
//! `K u = θ M u`: `K` is the weighted graph Laplacian with edge weights
//! `exp(-βV(midedge))`, `M` the lumped diagonal mass `exp(-βV(node))` times
//! the node's cell overlap with the domain. Eigenvalues of `-L` are `θ/β`.
//! This form keeps the problem symmetric, so Sturm bisection (1D) and
//! deflated inverse iteration with conjugate gradients (2D) apply directly,
//! and the huge dynamic range of the Boltzmann weights only ever enters
//! through ratios between neighboring nodes.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{truncation_box, Domain, Potential};
use crate::rng::stream_rng;
use rand::Rng;

/// Relative tolerance on eigenvalue increments in the iterative solvers.
const EIG_TOL: f64 = 1e-11;

/// A rectangular spectral window with per-face boundary conditions.
/// Faces are reflecting unless marked absorbing; nodes falling outside the
/// potential's own domain (inside obstacles, beyond walls) are masked out,
/// which reflects at those internal faces as well.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    /// `absorbing[axis][side]`, side 0 = lo face, 1 = hi face.
    absorbing: [[bool; 2]; 2],
}

impl Window {
    pub fn interval(a: f64, b: f64) -> Result<Window> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::config("window needs finite bounds with lo < hi"));
        }
        Ok(Window { dim: 1, lo: [a, 0.0], hi: [b, 1.0], absorbing: [[false; 2]; 2] })
    }

    pub fn rectangle(lo: [f64; 2], hi: [f64; 2]) -> Result<Window> {
        for a in 0..2 {
            if !(lo[a] < hi[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
                return Err(Error::config("window needs finite bounds with lo < hi"));
            }
        }
        Ok(Window { dim: 2, lo, hi, absorbing: [[false; 2]; 2] })
    }

    /// Mark one face absorbing (axis 0/1, side 0 = lo, 1 = hi).
    pub fn absorbing(mut self, axis: usize, side: usize) -> Window {
        self.absorbing[axis][side] = true;
        self
    }

    /// Mark every face absorbing.
    pub fn absorbing_all(mut self) -> Window {
        for ax in 0..self.dim {
            self.absorbing[ax] = [true, true];
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        (self.lo, self.hi)
    }

    pub fn is_pure_neumann(&self) -> bool {
        (0..self.dim).all(|a| !self.absorbing[a][0] && !self.absorbing[a][1])
    }

    /// Whether the given face (axis 0/1, side 0 = lo, 1 = hi) absorbs.
    pub fn face_absorbing(&self, axis: usize, side: usize) -> bool {
        self.absorbing[axis][side]
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0..self.dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }
}

/// Reflecting window covering everything the measure can see: the domain
/// box for hard walls, the Boltzmann truncation box on all of space.
pub fn default_window(p: &Potential, beta: f64) -> Result<Window> {
    let (lo, hi) = match p.domain().bounds() {
        Some(b) => b,
        None => truncation_box(p, beta)?,
    };
    if p.dim() == 1 {
        Window::interval(lo[0], hi[0])
    } else {
        Window::rectangle(lo, hi)
    }
}

/// Two smallest nontrivial eigenpairs of `-L` on a window.
///
/// With any absorbing face these are the two smallest eigenvalues; on a
/// pure-reflecting window the trivial zero mode is skipped. Eigenfunctions
/// are normalized against the window-restricted canonical probability
/// weights (`sum m_i u_i² = sum m_i`), vanish on masked and absorbing
/// nodes, and the ground state is taken nonnegative.
#[derive(Debug, Clone)]
pub struct SpectralSolution {
    pub grid: Grid,
    pub beta: f64,
    pub lambda: [f64; 2],
    pub vectors: [Vec<f64>; 2],
    /// Unnormalized node masses `exp(-βV)·|cell ∩ domain|` (zero on masked
    /// nodes); their sum is the discrete partition function of the window.
    pub mass: Vec<f64>,
    /// Relative pencil residuals, a direct quality check on each pair.
    pub residual: [f64; 2],
}

impl SpectralSolution {
    pub fn mass_total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Spectral gap λ2 - λ1 (for pure-reflecting windows this is the gap
    /// above the first nontrivial eigenvalue).
    pub fn gap(&self) -> f64 {
        self.lambda[1] - self.lambda[0]
    }
}

struct Assembly {
    grid: Grid,
    /// Grid index of each active node.
    nodes: Vec<usize>,
    mass: Vec<f64>,
    /// (active i, active j, weight), i < j in grid order.
    edges: Vec<(usize, usize, f64)>,
    /// Extra diagonal stiffness from edges into absorbing boundary nodes;
    /// this is what actually pins the eigenfunctions to zero there.
    dirichlet: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum NodeState {
    /// Outside the domain (or zero Boltzmann mass): reflecting face.
    Masked,
    /// Dropped by an absorbing window face: eigenfunction is zero here.
    Absorbing,
    Active(usize),
}

fn assemble(p: &Potential, beta: f64, window: &Window, n: usize) -> Result<Assembly> {
    if window.dim() != p.dim() {
        return Err(Error::config("window dimension does not match the potential"));
    }
    if p.domain().is_periodic(0) || p.domain().is_periodic(1) {
        return Err(Error::config("eigensolve does not support periodic domains"));
    }
    let grid = if window.dim == 1 {
        Grid::new_1d(window.lo[0], window.hi[0], n)?
    } else {
        Grid::new_2d(window.lo, window.hi, [n, n])?
    };
    let domain = p.domain();
    let dims = [grid.n_axis(0), if window.dim == 2 { grid.n_axis(1) } else { 1 }];
    let mut h = [grid.h(0), 0.0];
    if window.dim == 2 {
        h[1] = grid.h(1);
    }
    let mut state = vec![NodeState::Masked; grid.len()];
    let mut nodes = Vec::new();
    let mut mass = Vec::new();
    for g in 0..grid.len() {
        let idx = grid.unravel(g);
        let x = grid.coords(g);
        let mut absorbing = false;
        for a in 0..window.dim {
            if (window.absorbing[a][0] && idx[a] == 0)
                || (window.absorbing[a][1] && idx[a] == dims[a] - 1)
            {
                absorbing = true;
            }
        }
        // Closed-box containment keeps wall nodes active (Neumann nodes);
        // nodes inside obstacles drop out entirely.
        if !domain.contains(x) {
            continue;
        }
        if absorbing {
            state[g] = NodeState::Absorbing;
            continue;
        }
        // Exact cell volume inside domain ∩ window: half cells at the
        // window faces, partial cells against walls and block faces.
        let mut clo = [0.0; 2];
        let mut chi = [0.0; 2];
        for a in 0..window.dim {
            clo[a] = (x[a] - h[a] / 2.0).max(window.lo[a]);
            chi[a] = (x[a] + h[a] / 2.0).min(window.hi[a]);
        }
        if window.dim == 1 {
            clo[1] = 0.0;
            chi[1] = 1.0;
        }
        let vol = domain.cell_overlap(clo, chi);
        let m = vol * (-beta * p.energy(x)).exp();
        if m > 0.0 {
            state[g] = NodeState::Active(nodes.len());
            nodes.push(g);
            mass.push(m);
        }
    }
    if nodes.len() < 3 {
        return Err(Error::config("window too small: fewer than 3 active nodes"));
    }
    let mut edges = Vec::new();
    let mut dirichlet = vec![0.0; nodes.len()];
    for (ci, &g) in nodes.iter().enumerate() {
        let idx = grid.unravel(g);
        let x = grid.coords(g);
        for a in 0..window.dim {
            // Both directions, so edges into absorbing neighbors on either
            // side are seen; active-active pairs only once (lower index).
            for dir in [-1i64, 1i64] {
                let jn = idx[a] as i64 + dir;
                if jn < 0 || jn as usize >= dims[a] {
                    continue;
                }
                let mut jdx = idx;
                jdx[a] = jn as usize;
                let gj = grid.ravel(jdx);
                let mut mid = x;
                mid[a] += dir as f64 * h[a] / 2.0;
                if !domain.contains(mid) {
                    continue;
                }
                // Transverse extent of the dual face, clipped to the
                // window (1 in one dimension).
                let mut perp = 1.0;
                if window.dim == 2 {
                    let o = 1 - a;
                    let plo = (mid[o] - h[o] / 2.0).max(window.lo[o]);
                    let phi = (mid[o] + h[o] / 2.0).min(window.hi[o]);
                    perp = (phi - plo).max(0.0);
                }
                let w = (-beta * p.energy(mid)).exp() * perp / h[a];
                if w <= 0.0 {
                    continue;
                }
                match state[gj] {
                    NodeState::Active(cj) if dir > 0 => edges.push((ci, cj, w)),
                    NodeState::Active(_) => {}
                    NodeState::Absorbing => dirichlet[ci] += w,
                    NodeState::Masked => {}
                }
            }
        }
    }
    Ok(Assembly { grid, nodes, mass, edges, dirichlet })
}

// ---------------------------------------------------------------------------
// 1D: Sturm bisection + inverse iteration on the symmetric tridiagonal form.
// ---------------------------------------------------------------------------

/// Symmetric tridiagonal matrix `C = M^{-1/2} K M^{-1/2}`.
struct SymTri {
    d: Vec<f64>,
    e: Vec<f64>,
}

impl SymTri {
    /// Number of eigenvalues strictly below `x` (Sturm/LDL count).
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.d[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.d.len() {
            let denom = if q == 0.0 { 1e-307 } else { q };
            q = self.d[i] - x - self.e[i - 1] * self.e[i - 1] / denom;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn smallest(&self, k: usize) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.d.len() {
            let mut r = 0.0;
            if i > 0 {
                r += self.e[i - 1].abs();
            }
            if i < self.e.len() {
                r += self.e[i].abs();
            }
            lo = lo.min(self.d[i] - r);
            hi = hi.max(self.d[i] + r);
        }
        let span = (hi - lo).max(1e-300);
        (0..k.min(self.d.len()))
            .map(|j| {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..90 {
                    let m = 0.5 * (a + b);
                    if self.count_below(m) >= j + 1 {
                        b = m;
                    } else {
                        a = m;
                    }
                    if b - a <= 1e-15 * span {
                        break;
                    }
                }
                0.5 * (a + b)
            })
            .collect()
    }

    /// Solve `(C - σI) x = b` by elimination with partial pivoting.
    fn solve_shifted(&self, sigma: f64, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        // Band storage: three upper diagonals after pivoting.
        let mut u0: Vec<f64> = self.d.iter().map(|v| v - sigma).collect();
        let mut u1 = self.e.clone();
        u1.push(0.0);
        let mut u2 = vec![0.0; n];
        let mut lower = vec![0.0; n];
        let mut swapped = vec![false; n];
        let mut rhs = b.to_vec();
        for i in 0..n - 1 {
            let sub = self.e[i];
            if sub.abs() > u0[i].abs() {
                swapped[i] = true;
                let (a0, a1) = (u0[i], u1[i]);
                u0[i] = sub;
                u1[i] = u0[i + 1];
                u2[i] = if i + 1 < n - 1 { u1[i + 1] } else { 0.0 };
                u0[i + 1] = a1;
                if i + 1 < n - 1 {
                    u1[i + 1] = 0.0;
                }
                rhs.swap(i, i + 1);
                // Eliminate using the swapped row.
                let l = a0 / u0[i];
                lower[i] = l;
                u0[i + 1] = a1 - l * u1[i];
                if i + 1 < n - 1 {
                    u1[i + 1] = -l * u2[i];
                }
                rhs[i + 1] -= l * rhs[i];
            } else {
                let denom = if u0[i] == 0.0 { 1e-307 } else { u0[i] };
                let l = sub / denom;
                lower[i] = l;
                u0[i + 1] -= l * u1[i];
                rhs[i + 1] -= l * rhs[i];
            }
        }
        // Back substitution.
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = rhs[i];
            if i + 1 < n {
                s -= u1[i] * x[i + 1];
            }
            if i + 2 < n {
                s -= u2[i] * x[i + 2];
            }
            let denom = if u0[i] == 0.0 { 1e-307 } else { u0[i] };
            x[i] = s / denom;
        }
        x
    }

    /// Inverse iteration at (converged) eigenvalue `theta`, kept orthogonal
    /// to previously found vectors.
    fn eigenvector(&self, theta: f64, prior: &[Vec<f64>]) -> Vec<f64> {
        let n = self.d.len();
        let scale = self.d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let sigma = theta - 1e-13 * scale;
        let mut rng = stream_rng(0x5eed, 17);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        for _ in 0..6 {
            for p in prior {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(p) {
                    *vi -= dot * pi;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            v = self.solve_shifted(sigma, &v);
        }
        for p in prior {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(p) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        v
    }
}

/// Contiguous chains of active nodes coupled by positive edge weights.
fn chains_1d(asm: &Assembly) -> Vec<Vec<usize>> {
    let mut edge_weight = vec![0.0; asm.nodes.len()];
    for &(i, j, w) in &asm.edges {
        if j == i + 1 {
            edge_weight[i] = w;
        }
    }
    let mut chains = Vec::new();
    let mut current = vec![0usize];
    for ci in 1..asm.nodes.len() {
        let joined = asm.nodes[ci] == asm.nodes[ci - 1] + 1 && edge_weight[ci - 1] > 0.0;
        if joined {
            current.push(ci);
        } else {
            chains.push(std::mem::take(&mut current));
            current.push(ci);
        }
    }
    chains.push(current);
    chains
}

fn solve_1d(asm: &Assembly, beta: f64, skip_trivial: bool) -> Result<SpectralSolution> {
    let mut edge_weight = vec![0.0; asm.nodes.len()];
    for &(i, j, w) in &asm.edges {
        if j == i + 1 {
            edge_weight[i] = w;
        }
    }
    // (theta, chain id, vector in C coordinates over that chain)
    let mut found: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    for (chain_id, chain) in chains_1d(asm).into_iter().enumerate() {
        if chain.len() < 3 {
            continue;
        }
        let m: Vec<f64> = chain.iter().map(|&c| asm.mass[c]).collect();
        let sq: Vec<f64> = m.iter().map(|v| v.sqrt()).collect();
        let mut d: Vec<f64> =
            chain.iter().enumerate().map(|(k, &c)| asm.dirichlet[c] / m[k]).collect();
        let mut e = vec![0.0; chain.len() - 1];
        for k in 0..chain.len() - 1 {
            let w = edge_weight[chain[k]];
            d[k] += w / m[k];
            d[k + 1] += w / m[k + 1];
            e[k] = -w / (sq[k] * sq[k + 1]);
        }
        let tri = SymTri { d, e };
        let want = 3.min(chain.len());
        let thetas = tri.smallest(want);
        let mut vecs: Vec<Vec<f64>> = Vec::new();
        for &t in &thetas {
            let v = tri.eigenvector(t, &vecs);
            vecs.push(v);
        }
        for (t, v) in thetas.into_iter().zip(vecs) {
            found.push((t, chain_id, v));
        }
    }
    if found.is_empty() {
        return Err(Error::numerics("no spectral chain with at least 3 nodes"));
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
    let start = usize::from(skip_trivial);
    if found.len() < start + 2 {
        return Err(Error::numerics("window supports fewer than two nontrivial modes"));
    }
    let chains = chains_1d(asm);
    let mut lambda = [0.0; 2];
    let mut vectors = [vec![0.0; asm.grid.len()], vec![0.0; asm.grid.len()]];
    let mut residual = [0.0; 2];
    for k in 0..2 {
        let (theta, chain_id, ref v) = found[start + k];
        lambda[k] = theta / beta;
        let chain = &chains[chain_id];
        // Transform back u = M^{-1/2} v and write onto the grid.
        let mut u = vec![0.0; asm.nodes.len()];
        for (pos, &c) in chain.iter().enumerate() {
            u[c] = v[pos] / asm.mass[c].sqrt();
        }
        normalize_and_store(asm, &mut u, &mut vectors[k]);
        residual[k] = pencil_residual(asm, &u, theta);
    }
    Ok(SpectralSolution {
        grid: asm.grid.clone(),
        beta,
        lambda,
        vectors,
        mass: full_mass(asm),
        residual,
    })
}

// ---------------------------------------------------------------------------
// 2D: deflated inverse iteration with conjugate gradients.
// ---------------------------------------------------------------------------

fn kmul(asm: &Assembly, x: &[f64], y: &mut [f64]) {
    for (i, v) in y.iter_mut().enumerate() {
        *v = asm.dirichlet[i] * x[i];
    }
    for &(i, j, w) in &asm.edges {
        let d = w * (x[i] - x[j]);
        y[i] += d;
        y[j] -= d;
    }
}

fn m_dot(mass: &[f64], a: &[f64], b: &[f64]) -> f64 {
    mass.iter().zip(a.iter().zip(b)).map(|(m, (x, y))| m * x * y).sum()
}

fn m_project(mass: &[f64], v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot = m_dot(mass, v, b);
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= dot * bi;
        }
    }
}

/// Jacobi-preconditioned CG for `K x = b`; `b` must be consistent.
fn cg_solve(asm: &Assembly, diag: &[f64], b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let precond = |r: &[f64], z: &mut Vec<f64>| {
        z.clear();
        z.extend(r.iter().zip(diag).map(|(ri, di)| ri / di.max(1e-300)));
    };
    let mut z = Vec::with_capacity(n);
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut kp = vec![0.0; n];
    for _ in 0..(40 * n.max(200)) {
        kmul(asm, &p, &mut kp);
        let pkp: f64 = p.iter().zip(&kp).map(|(a, b)| a * b).sum();
        if pkp <= 0.0 {
            return Err(Error::numerics("stiffness matrix lost positivity in CG"));
        }
        let alpha = rz / pkp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        precond(&r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::numerics("conjugate gradients failed to converge"))
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations; returns (values ascending, column eigenvectors).
fn small_sym_eig(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let b = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..64 {
        let mut off = 0.0;
        for p in 0..b {
            for q in p + 1..b {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..b {
            for q in p + 1..b {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let tau = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..b {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..b {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| m[i][i].partial_cmp(&m[j][j]).expect("finite Ritz values"));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order
        .iter()
        .map(|&i| (0..b).map(|k| v[k][i]).collect())
        .collect();
    (vals, vecs)
}

/// Block inverse iteration with Rayleigh-Ritz extraction. The block is one
/// wider than the two wanted pairs, so degenerate or clustered eigenvalues
/// converge against the contraction to the mode outside the block instead
/// of stalling inside a near-invariant plane.
fn solve_2d(asm: &Assembly, beta: f64, skip_trivial: bool) -> Result<SpectralSolution> {
    const BLOCK: usize = 3;
    let n = asm.nodes.len();
    let mut diag = asm.dirichlet.clone();
    for &(i, j, w) in &asm.edges {
        diag[i] += w;
        diag[j] += w;
    }
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::numerics("isolated node in the spectral window"));
    }
    let mut defl: Vec<Vec<f64>> = Vec::new();
    if skip_trivial {
        let total: f64 = asm.mass.iter().sum();
        defl.push(vec![1.0 / total.sqrt(); n]);
    }
    let mut rng = stream_rng(0x5eed, 23);
    let mut xs: Vec<Vec<f64>> = (0..BLOCK)
        .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let orthonormalize = |cols: &mut Vec<Vec<f64>>, defl: &[Vec<f64>]| -> Result<()> {
        for k in 0..cols.len() {
            // Two Gram-Schmidt passes keep the basis orthogonal even when
            // the raw columns are nearly parallel.
            for _ in 0..2 {
                let (head, tail) = cols.split_at_mut(k);
                m_project(&asm.mass, &mut tail[0], defl);
                m_project(&asm.mass, &mut tail[0], head);
            }
            let norm = m_dot(&asm.mass, &cols[k], &cols[k]).sqrt();
            if !(norm > 1e-150) {
                return Err(Error::numerics("block iteration basis collapsed"));
            }
            cols[k].iter_mut().for_each(|v| *v /= norm);
        }
        Ok(())
    };
    orthonormalize(&mut xs, &defl)?;
    let mut thetas = vec![f64::INFINITY; BLOCK];
    let mut converged = false;
    for _ in 0..400 {
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(BLOCK);
        for x in &xs {
            let b: Vec<f64> = asm.mass.iter().zip(x).map(|(m, v)| m * v).collect();
            ys.push(cg_solve(asm, &diag, &b, 1e-12)?);
        }
        orthonormalize(&mut ys, &defl)?;
        let kys: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| {
                let mut ky = vec![0.0; n];
                kmul(asm, y, &mut ky);
                ky
            })
            .collect();
        let a: Vec<Vec<f64>> = (0..BLOCK)
            .map(|i| {
                (0..BLOCK)
                    .map(|j| ys[i].iter().zip(&kys[j]).map(|(p, q)| p * q).sum())
                    .collect()
            })
            .collect();
        let (vals, vecs) = small_sym_eig(&a);
        xs = (0..BLOCK)
            .map(|k| {
                let mut col = vec![0.0; n];
                for (j, y) in ys.iter().enumerate() {
                    let c = vecs[k][j];
                    for (ci, yi) in col.iter_mut().zip(y) {
                        *ci += c * yi;
                    }
                }
                col
            })
            .collect();
        let done = (0..2).all(|k| {
            (vals[k] - thetas[k]).abs() <= EIG_TOL * vals[k].abs().max(1e-300)
        });
        thetas = vals;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerics("block inverse iteration failed to converge"));
    }
    let mut lambda = [0.0; 2];
    let mut residual = [0.0; 2];
    let mut vectors = [vec![0.0; asm.grid.len()], vec![0.0; asm.grid.len()]];
    for k in 0..2 {
        lambda[k] = thetas[k] / beta;
        residual[k] = pencil_residual(asm, &xs[k], thetas[k]);
        normalize_and_store(asm, &mut xs[k], &mut vectors[k]);
    }
    Ok(SpectralSolution {
        grid: asm.grid.clone(),
        beta,
        lambda,
        vectors,
        mass: full_mass(asm),
        residual,
    })
}

// ---------------------------------------------------------------------------
// Shared post-processing.
// ---------------------------------------------------------------------------

fn full_mass(asm: &Assembly) -> Vec<f64> {
    let mut mass = vec![0.0; asm.grid.len()];
    for (c, &g) in asm.nodes.iter().enumerate() {
        mass[g] = asm.mass[c];
    }
    mass
}

/// Normalize so that the mean square against the window probability
/// weights is 1, flip the dominant sign positive, and scatter to the grid.
fn normalize_and_store(asm: &Assembly, u: &mut [f64], out: &mut [f64]) {
    let total: f64 = asm.mass.iter().sum();
    let ms = m_dot(&asm.mass, u, u) / total;
    let scale = ms.sqrt().max(1e-300);
    let mut extreme = 0.0f64;
    for v in u.iter_mut() {
        *v /= scale;
        if v.abs() > extreme.abs() {
            extreme = *v;
        }
    }
    if extreme < 0.0 {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    for (c, &g) in asm.nodes.iter().enumerate() {
        out[g] = u[c];
    }
}

fn pencil_residual(asm: &Assembly, u: &[f64], theta: f64) -> f64 {
    let mut ku = vec![0.0; u.len()];
    kmul(asm, u, &mut ku);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..u.len() {
        let mu = asm.mass[i] * u[i];
        num += (ku[i] - theta * mu) * (ku[i] - theta * mu);
        den += ku[i] * ku[i] + theta * theta * mu * mu;
    }
    (num / den.max(1e-300)).sqrt()
}

/// Two smallest nontrivial eigenpairs of `-L` on the window, discretized
/// with `n` nodes per axis.
pub fn eigensolve(p: &Potential, beta: f64, window: &Window, n: usize) -> Result<SpectralSolution> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::config("beta must be positive and finite"));
    }
    if n < 16 {
        return Err(Error::config("eigensolve needs at least 16 nodes per axis"));
    }
    let asm = assemble(p, beta, window, n)?;
    let skip = window.is_pure_neumann();
    if window.dim() == 1 {
        solve_1d(&asm, beta, skip)
    } else {
        solve_2d(&asm, beta, skip)
    }
}

/// First nontrivial eigenvalue of `-L` over the whole accessible region:
/// the exponential relaxation rate of the dynamics.
pub fn spectral_gap(p: &Potential, beta: f64, n: usize) -> Result<f64> {
    let w = default_window(p, beta)?;
    Ok(eigensolve(p, beta, &w, n)?.lambda[0])
}

/// Spectral gap of the conditional measure on the section `{ξ = z}` of a
/// 2D potential, where ξ is the coordinate along `rc_axis`. Sections cut
/// into several segments by obstacles have gap zero by convention (the
/// conditional measure is then disconnected).
pub fn section_gap(p: &Potential, beta: f64, rc_axis: usize, z: f64, n: usize) -> Result<f64> {
    if p.dim() != 2 {
        return Err(Error::config("section gaps need a 2D potential"));
    }
    if rc_axis > 1 {
        return Err(Error::config("axis must be 0 or 1"));
    }
    let other = 1 - rc_axis;
    let segments: Vec<(f64, f64)> = match p.domain().bounds() {
        Some(_) => p.domain().sections(rc_axis, z)?,
        None => vec![section_bounds(p, beta, rc_axis, z)?],
    };
    if segments.is_empty() {
        return Err(Error::config("section lies outside the domain"));
    }
    let mut thetas: Vec<f64> = Vec::new();
    for (a, b) in segments {
        let line = Potential::custom(
            "section",
            Domain::interval(a, b)?,
            {
                let p = p.clone();
                move |y: [f64; 2]| {
                    let mut q = [0.0; 2];
                    q[rc_axis] = z;
                    q[other] = y[0];
                    p.energy(q)
                }
            },
            {
                let p = p.clone();
                move |y: [f64; 2]| {
                    let mut q = [0.0; 2];
                    q[rc_axis] = z;
                    q[other] = y[0];
                    [p.gradient(q)[other], 0.0]
                }
            },
        );
        let w = Window::interval(a, b)?;
        let sol = eigensolve(&line, beta, &w, n)?;
        // Each connected segment contributes its zero mode.
        thetas.push(0.0);
        thetas.push(sol.lambda[0]);
        thetas.push(sol.lambda[1]);
    }
    thetas.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(thetas[1])
}

/// Truncated transverse extent of the section `{ξ = z}` for a confining
/// potential on all of space.
fn section_bounds(p: &Potential, beta: f64, rc_axis: usize, z: f64) -> Result<(f64, f64)> {
    let other = 1 - rc_axis;
    let n = 8192;
    let half = 32.0;
    let h = 2.0 * half / n as f64;
    let eval = |t: f64| {
        let mut q = [0.0; 2];
        q[rc_axis] = z;
        q[other] = t;
        p.energy(q)
    };
    let mut vmin = f64::INFINITY;
    let values: Vec<f64> = (0..=n).map(|i| eval(-half + h * i as f64)).collect();
    for v in &values {
        vmin = vmin.min(*v);
    }
    if !vmin.is_finite() {
        return Err(Error::numerics("section has no finite minimum"));
    }
    let threshold = vmin + 32.3 / beta;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate() {
        if *v <= threshold {
            let t = -half + h * i as f64;
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    if !lo.is_finite() || hi - 2.0 * h >= half - 3.0 * h {
        return Err(Error::numerics("section potential does not confine"));
    }
    Ok((lo - 2.0 * h, hi + 2.0 * h))
}
