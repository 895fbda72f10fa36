//! Deterministic numerical layer: kernel evaluation, time-integrated kernels,
//! L2 inner products (covariances) by singularity-aware quadrature, and the
//! dyadic decomposition norms.
//!
//! The central object is the integrated kernel
//! `G(x) = ∫ over s in (s_lo, s_hi] of ∏_ℓ (s − x_ℓ)₊^α ds` with
//! `α = (h−1)/d − 1/2`. For `d = 1` the antiderivative is closed-form; for
//! `d ≥ 2` the `s`-integral gets a power-graded mesh matched to the endpoint
//! exponent. Products of two such kernels are integrated over `x`-space on
//! tensorized meshes restricted to the simplex `x₁ < … < x_d` (times `d!`),
//! which keeps nodes off the diagonal where the integrand for `d ≥ 2` blows
//! up. For `d = 2` the cells touching the diagonal get a dedicated local rule
//! graded like `|x₁ − x₂|^γ`; for `d = 3` the diagonal slabs are thin enough
//! to be dropped (their mass vanishes with the mesh, see the cell-size notes
//! on `bilinear_on_mesh`).
//!
//! Reduction order is fixed and documented: ascending mesh index, compensated
//! (Neumaier) summation, no intra-integral threading. Parallel sweeps, if
//! any, parallelize over whole integrals and collect in input order, so every
//! number here is run-to-run identical at any thread count.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use crate::error::{LabError, LabResult, Warning};
use crate::quad::{End, Mesh1d, NeumaierSum, QuadratureGrid, Scheme, Segment};
use crate::types::HurstFunction;

/// s-nodes for kernel evaluations feeding tensor quadratures.
const N_S: usize = 96;
/// s-nodes for standalone point evaluations of the integrated kernel.
const N_S_POINT: usize = 128;
/// Local rule size for near-diagonal cell pairs: x-nodes × transverse cells
/// (each transverse cell carries two Gauss nodes).
const NEAR_NX: usize = 6;
const NEAR_NY: usize = 5;
/// Per-axis cell cap for d ≥ 3 tensor quadratures.
const MAX_CELLS_D3: usize = 64;

/// Singularity exponent of one kernel factor: `(h−1)/d − 1/2`.
pub fn alpha(d: u32, h: f64) -> f64 {
    (h - 1.0) / d as f64 - 0.5
}

pub fn factorial(d: u32) -> f64 {
    (1..=d as u64).product::<u64>() as f64
}

fn require_h(h: f64) -> LabResult<()> {
    if h > 0.5 && h < 1.0 && h.is_finite() {
        Ok(())
    } else {
        Err(LabError::BadParameter(format!(
            "Hurst value {h} outside (1/2, 1)"
        )))
    }
}

fn require_grid(grid: &QuadratureGrid) -> LabResult<()> {
    if !(grid.x_min < 0.0 && grid.x_max > 0.0) {
        return Err(LabError::GridMismatch(format!(
            "need x_min < 0 < x_max, got [{}, {}]",
            grid.x_min, grid.x_max
        )));
    }
    if grid.n_cells < 8 {
        return Err(LabError::GridMismatch(format!(
            "need at least 8 cells per axis, got {}",
            grid.n_cells
        )));
    }
    Ok(())
}

fn require_dim(d: u32, max_d: u32, what: &str) -> LabResult<()> {
    if d == 0 || d > max_d {
        return Err(LabError::BadParameter(format!(
            "{what} supports 1 ≤ d ≤ {max_d}, got d = {d}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernel specification and pointwise evaluation
// ---------------------------------------------------------------------------

/// One integrated kernel: `G(x) = ∫_{s_lo}^{s_hi} ∏ (s − x_ℓ)₊^α ds`.
/// `s_lo = 0` gives the process kernel at time `t = s_hi`; `s_lo = t1`,
/// `s_hi = t2` gives the increment kernel of the window `(t1, t2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct KernelSpec {
    pub d: u32,
    pub h: f64,
    pub s_lo: f64,
    pub s_hi: f64,
}

impl KernelSpec {
    pub fn process(d: u32, h: f64, t: f64) -> KernelSpec {
        KernelSpec {
            d,
            h,
            s_lo: 0.0,
            s_hi: t,
        }
    }

    pub fn alpha(&self) -> f64 {
        alpha(self.d, self.h)
    }

    /// Closed-form value for d = 1 (valid for any s-interval since the
    /// antiderivative of `(s−x)₊^α` is `(s−x)₊^{α+1}/(α+1)`).
    pub fn g1(&self, x: f64) -> f64 {
        let p = self.h - 0.5;
        let hi = (self.s_hi - x).max(0.0).powf(p);
        let lo = (self.s_lo - x).max(0.0).powf(p);
        (hi - lo) / p
    }

    /// Quadrature evaluation for any d. Sorts the coordinates internally, so
    /// the result is exactly permutation-invariant. Returns `+∞` when the
    /// coordinate multiplicity at the maximum makes the s-integral diverge
    /// (possible for d ≥ 2 with coincident coordinates).
    pub fn eval_g(&self, x: &[f64], n_s: usize, scheme: Scheme) -> f64 {
        debug_assert_eq!(x.len(), self.d as usize);
        let mut xs = [0.0f64; 8];
        let d = self.d as usize;
        xs[..d].copy_from_slice(x);
        let xs = &mut xs[..d];
        xs.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        let x_max = xs[0];
        if x_max >= self.s_hi || self.s_hi <= self.s_lo {
            return 0.0;
        }
        let a = self.alpha();
        let mult = xs.iter().take_while(|v| **v == x_max).count();
        let p_raw = 1.0 + mult as f64 * a;
        if x_max >= self.s_lo && p_raw <= 0.0 {
            return f64::INFINITY;
        }
        let tau0 = (self.s_lo - x_max).max(0.0);
        let tau1 = self.s_hi - x_max;
        let sub = SSubmesh::build(tau0, tau1, p_raw.max(0.05), n_s, scheme);
        let mut acc = NeumaierSum::new();
        let ma = mult as f64 * a;
        for (&tau, &w) in sub.tau.iter().zip(&sub.w) {
            // The anchor factor comes straight from the distance variable
            // (exact by construction), the rest from exact coordinate gaps.
            let mut prod = w * tau.powf(ma);
            for &xl in xs[mult..].iter() {
                prod *= ((x_max - xl) + tau).powf(a);
            }
            acc.add(prod);
        }
        acc.value()
    }
}

/// s-quadrature in the distance variable `τ = s − anchor`, built through the
/// power substitution `u = τ^p`. For an integrand `τ^{p−1}·(smooth)` the
/// substitution scheme is exact on the power factor for *any* `τ0 ≥ 0`, which
/// covers both the singular case (anchor inside the support, `τ0 = 0`) and
/// the merely steep case (anchor below `s_lo`, `τ0 > 0`). Working in `τ`
/// keeps nodes exactly positive: no catastrophic `s − anchor` cancellation.
pub(crate) struct SSubmesh {
    pub(crate) tau: Vec<f64>,
    pub(crate) w: Vec<f64>,
}

impl SSubmesh {
    pub(crate) fn build(tau0: f64, tau1: f64, p: f64, n: usize, scheme: Scheme) -> SSubmesh {
        debug_assert!(tau1 > tau0 && tau0 >= 0.0 && p > 0.0);
        let u0 = if tau0 == 0.0 { 0.0 } else { tau0.powf(p) };
        let u1 = tau1.powf(p);
        let du = (u1 - u0) / n as f64;
        let inv_p = 1.0 / p;
        let mut tau = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        match scheme {
            Scheme::Substitution => {
                for i in 0..n {
                    let um = u0 + (i as f64 + 0.5) * du;
                    let t = um.powf(inv_p);
                    tau.push(t);
                    // dτ/du = (1/p) u^{1/p − 1} = τ/(p u).
                    w.push(du * t / (p * um));
                }
            }
            Scheme::MidpointGraded => {
                // Quadratic clustering of the u-boundaries toward the steep
                // end: with uniform u-cells the first cell would carry 1/n of
                // the section's power-law mass at ~40% midpoint error, a bias
                // that dominates the scheme's error; clustered boundaries
                // push that bias to O(1/n²).
                let mut ta = if tau0 == 0.0 { 0.0 } else { tau0 };
                for i in 0..n {
                    let frac = (i as f64 + 1.0) / n as f64;
                    let ub = u0 + frac * frac * (u1 - u0);
                    let tb = if i + 1 == n { tau1 } else { ub.powf(inv_p) };
                    tau.push(0.5 * (ta + tb));
                    w.push(tb - ta);
                    ta = tb;
                }
            }
        }
        SSubmesh { tau, w }
    }

    /// Two-point Gauss variant (2`n_cells` nodes) in the transformed
    /// coordinate. The near-diagonal local rule needs it: there the integrand
    /// carries a second, weaker singular exponent beyond the matched one, and
    /// midpoint-in-`u` resolves it one order too slowly for a small budget.
    fn gauss2(tau0: f64, tau1: f64, p: f64, n_cells: usize) -> SSubmesh {
        debug_assert!(tau1 > tau0 && tau0 >= 0.0 && p > 0.0);
        let u0 = if tau0 == 0.0 { 0.0 } else { tau0.powf(p) };
        let u1 = tau1.powf(p);
        let du = (u1 - u0) / n_cells as f64;
        let inv_p = 1.0 / p;
        let off = 0.5 / 3f64.sqrt();
        let mut tau = Vec::with_capacity(2 * n_cells);
        let mut w = Vec::with_capacity(2 * n_cells);
        for i in 0..n_cells {
            for s in [-off, off] {
                let u = u0 + (i as f64 + 0.5 + s) * du;
                let t = u.powf(inv_p);
                tau.push(t);
                w.push(0.5 * du * t / (p * u));
            }
        }
        SSubmesh { tau, w }
    }
}

/// Pointwise kernel factor product `∏_ℓ (s − x_ℓ)₊^α`.
///
/// Evaluating exactly on the singularity (`x_ℓ = s`) is an error so that
/// quadrature schemes are forced to keep nodes off the diagonal.
pub fn kernel_eval(d: u32, h: f64, s: f64, x: &[f64]) -> LabResult<f64> {
    require_dim(d, 8, "kernel_eval")?;
    require_h(h)?;
    if x.len() != d as usize {
        return Err(LabError::BadParameter(format!(
            "x has {} coordinates, expected {d}",
            x.len()
        )));
    }
    if x.iter().any(|&v| v == s) {
        return Err(LabError::SingularEvaluation { s });
    }
    let a = alpha(d, h);
    let mut prod = 1.0;
    for &xl in x {
        let base = s - xl;
        if base <= 0.0 {
            return Ok(0.0);
        }
        prod *= base.powf(a);
    }
    Ok(prod)
}

/// Time-integrated kernel `G_{t,h}(x)`: exact antiderivative for d = 1,
/// graded s-quadrature for d ≥ 2 (relative error ≤ 1e−6 against a
/// doubled-resolution reference on non-coincident inputs).
pub fn integrated_kernel(d: u32, h: f64, t: f64, x: &[f64]) -> LabResult<f64> {
    require_dim(d, 8, "integrated_kernel")?;
    require_h(h)?;
    if x.len() != d as usize {
        return Err(LabError::BadParameter(format!(
            "x has {} coordinates, expected {d}",
            x.len()
        )));
    }
    if !(t >= 0.0) {
        return Err(LabError::BadParameter(format!("negative time t = {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let spec = KernelSpec::process(d, h, t);
    if d == 1 {
        Ok(spec.g1(x[0]))
    } else {
        Ok(spec.eval_g(x, N_S_POINT, Scheme::Substitution))
    }
}

/// Quadrature path of the integrated kernel for any d (including d = 1,
/// where it cross-checks the antiderivative).
pub fn integrated_kernel_with(
    d: u32,
    h: f64,
    t: f64,
    x: &[f64],
    n_s: usize,
    scheme: Scheme,
) -> LabResult<f64> {
    require_dim(d, 8, "integrated_kernel")?;
    require_h(h)?;
    if x.len() != d as usize {
        return Err(LabError::BadParameter(format!(
            "x has {} coordinates, expected {d}",
            x.len()
        )));
    }
    if !(t >= 0.0) {
        return Err(LabError::BadParameter(format!("negative time t = {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(KernelSpec::process(d, h, t).eval_g(x, n_s, scheme))
}

/// A bound integrated kernel: order, time, Hurst value, and an `eval` map.
/// Symmetric under coordinate permutation, nonnegative, vanishes when every
/// coordinate is ≥ t, and is pointwise nondecreasing in t.
#[derive(Debug, Clone, Copy)]
pub struct IntegratedKernel {
    pub d: u32,
    pub t: f64,
    pub h: f64,
}

impl IntegratedKernel {
    pub fn new(d: u32, t: f64, h: f64) -> LabResult<IntegratedKernel> {
        require_dim(d, 8, "IntegratedKernel")?;
        require_h(h)?;
        if !(t >= 0.0) {
            return Err(LabError::BadParameter(format!("negative time t = {t}")));
        }
        Ok(IntegratedKernel { d, t, h })
    }

    pub fn eval(&self, x: &[f64]) -> LabResult<f64> {
        integrated_kernel(self.d, self.h, self.t, x)
    }
}

// ---------------------------------------------------------------------------
// Bilinear tensor engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pairing {
    /// Integrate `G_a · G_b` (covariances, squared norms).
    Product,
    /// Integrate `(G_a − G_b)²` (increment norms; exactly zero for
    /// identical kernels, no cancellation).
    DiffSquare,
}

#[inline]
fn pair_val(p: Pairing, ga: f64, gb: f64) -> f64 {
    match p {
        Pairing::Product => ga * gb,
        Pairing::DiffSquare => {
            let r = ga - gb;
            r * r
        }
    }
}

/// Per-kernel scratch for the grouped evaluation: for the current "maximum
/// coordinate" cell `c`, `a[s]` holds `w_s (s − x_c)^α` on the s-mesh anchored
/// at `x_c`, and `k[j*n_s + s]` holds `(s − x_j)^α` for every lower node.
struct HalfCtx {
    alpha: f64,
    s_lo: f64,
    s_hi: f64,
    n_s: usize,
    a: Vec<f64>,
    k: Vec<f64>,
    active: bool,
}

impl HalfCtx {
    fn new(spec: &KernelSpec, n: usize, n_s: usize) -> HalfCtx {
        HalfCtx {
            alpha: spec.alpha(),
            s_lo: spec.s_lo,
            s_hi: spec.s_hi,
            n_s,
            a: vec![0.0; n_s],
            k: vec![0.0; n * n_s],
            active: false,
        }
    }

    fn fill(&mut self, nodes: &[f64], c: usize, scheme: Scheme) {
        let xc = nodes[c];
        self.active = xc < self.s_hi && self.s_hi > self.s_lo;
        if !self.active {
            return;
        }
        let tau0 = (self.s_lo - xc).max(0.0);
        let tau1 = self.s_hi - xc;
        let sub = SSubmesh::build(tau0, tau1, 1.0 + self.alpha, self.n_s, scheme);
        for si in 0..self.n_s {
            self.a[si] = sub.w[si] * sub.tau[si].powf(self.alpha);
        }
        for (j, &xj) in nodes[..c].iter().enumerate() {
            let gap = xc - xj;
            let col = &mut self.k[j * self.n_s..(j + 1) * self.n_s];
            for si in 0..self.n_s {
                col[si] = (gap + sub.tau[si]).powf(self.alpha);
            }
        }
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.k[j * self.n_s..(j + 1) * self.n_s]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn dot3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i] * c[i];
    }
    s
}

/// Local integral of `pair(G_a, G_b)` over the cell pair `cx × cy`
/// (`same = true` integrates the full square `cx × cx` using symmetry).
/// The y-direction works in the distance variable `τ = y − x`, whose
/// power-matched submesh is exact on the transverse singularity `τ^γ` even
/// when the cells only touch at a corner (`τ` bounded away from zero); the
/// x-direction is graded like the resulting `(b − x)^{1+γ}` envelope.
fn near_cell_pair(
    cx: (f64, f64),
    cy: (f64, f64),
    same: bool,
    ka: &KernelSpec,
    kb: &KernelSpec,
    pairing: Pairing,
    gamma: f64,
    n_s: usize,
) -> f64 {
    let same_kernel = pairing == Pairing::Product && ka == kb;
    let xmesh = Mesh1d::build(
        &[Segment::power(cx.0, cx.1, NEAR_NX, End::Hi, 1.0 + gamma)],
        Scheme::Substitution,
    );
    let mut acc = NeumaierSum::new();
    for (&x, &wx) in xmesh.nodes.iter().zip(&xmesh.weights) {
        let tau0 = if same { 0.0 } else { (cy.0 - x).max(0.0) };
        let tau1 = cy.1 - x;
        if tau1 <= tau0 {
            continue;
        }
        let ymesh = SSubmesh::gauss2(tau0, tau1, 1.0 + gamma, NEAR_NY);
        for (&tau, &wy) in ymesh.tau.iter().zip(&ymesh.w) {
            let tup = [x, x + tau];
            let ga = ka.eval_g(&tup, n_s, Scheme::Substitution);
            let gb = if same_kernel {
                ga
            } else {
                kb.eval_g(&tup, n_s, Scheme::Substitution)
            };
            acc.add(wx * wy * pair_val(pairing, ga, gb));
        }
    }
    if same {
        2.0 * acc.value()
    } else {
        acc.value()
    }
}

/// Integral of `pair(G_a, G_b)` over `[mesh domain]^d` (no `d!` factor).
///
/// d = 1: plain compensated sum with exact antiderivative kernels.
/// d = 2: strict simplex (index gap ≥ 2) via grouped s-meshes, ×2 for the
///        two orderings, plus same-cell and adjacent-cell pairs by the local
///        near-diagonal rule where the diagonal is singular (plain midpoint
///        where it is not).
/// d = 3: strict simplex ×3!, diagonal slabs dropped; their mass scales like
///        a positive power of the cell width and is covered by the grid
///        budget policy for d = 3.
pub(crate) fn bilinear_on_mesh(
    d: u32,
    mesh: &Mesh1d,
    ka: &KernelSpec,
    kb: &KernelSpec,
    pairing: Pairing,
    gamma_near: f64,
    n_s: usize,
    scheme: Scheme,
) -> f64 {
    let n = mesh.len();
    if n == 0 {
        return 0.0;
    }
    let nodes = &mesh.nodes;
    let w = &mesh.weights;
    match d {
        1 => {
            let mut acc = NeumaierSum::new();
            for i in 0..n {
                let ga = ka.g1(nodes[i]);
                let gb = kb.g1(nodes[i]);
                acc.add(w[i] * pair_val(pairing, ga, gb));
            }
            acc.value()
        }
        2 => {
            let shared = ka == kb && pairing == Pairing::Product;
            let mut ca = HalfCtx::new(ka, n, n_s);
            let mut cb = HalfCtx::new(kb, n, n_s);
            let sing_lo = ka.s_lo.min(kb.s_lo);
            let mut acc = NeumaierSum::new();
            for c in 0..n {
                ca.fill(nodes, c, scheme);
                if !shared {
                    cb.fill(nodes, c, scheme);
                }
                for j in 0..c.saturating_sub(1) {
                    let ga = if ca.active { dot(&ca.a, ca.col(j)) } else { 0.0 };
                    let gb = if shared {
                        ga
                    } else if cb.active {
                        dot(&cb.a, cb.col(j))
                    } else {
                        0.0
                    };
                    acc.add(2.0 * w[j] * w[c] * pair_val(pairing, ga, gb));
                }
            }
            // Same-cell and adjacent-cell supplements.
            for i in 0..n {
                if mesh.cells[i].1 > sing_lo {
                    acc.add(near_cell_pair(
                        mesh.cells[i],
                        mesh.cells[i],
                        true,
                        ka,
                        kb,
                        pairing,
                        gamma_near,
                        n_s,
                    ));
                } else {
                    let tup = [nodes[i], nodes[i]];
                    let ga = ka.eval_g(&tup, n_s, scheme);
                    let gb = kb.eval_g(&tup, n_s, scheme);
                    acc.add(w[i] * w[i] * pair_val(pairing, ga, gb));
                }
                if i + 1 < n {
                    if mesh.cells[i + 1].1 > sing_lo {
                        acc.add(
                            2.0 * near_cell_pair(
                                mesh.cells[i],
                                mesh.cells[i + 1],
                                false,
                                ka,
                                kb,
                                pairing,
                                gamma_near,
                                n_s,
                            ),
                        );
                    } else {
                        let tup = [nodes[i], nodes[i + 1]];
                        let ga = ka.eval_g(&tup, n_s, scheme);
                        let gb = kb.eval_g(&tup, n_s, scheme);
                        acc.add(2.0 * w[i] * w[i + 1] * pair_val(pairing, ga, gb));
                    }
                }
            }
            acc.value()
        }
        3 => {
            let shared = ka == kb && pairing == Pairing::Product;
            let mut ca = HalfCtx::new(ka, n, n_s);
            let mut cb = HalfCtx::new(kb, n, n_s);
            let mut acc = NeumaierSum::new();
            for c in 0..n {
                ca.fill(nodes, c, scheme);
                if !shared {
                    cb.fill(nodes, c, scheme);
                }
                for j2 in 1..c {
                    for j1 in 0..j2 {
                        let ga = if ca.active {
                            dot3(&ca.a, ca.col(j1), ca.col(j2))
                        } else {
                            0.0
                        };
                        let gb = if shared {
                            ga
                        } else if cb.active {
                            dot3(&cb.a, cb.col(j1), cb.col(j2))
                        } else {
                            0.0
                        };
                        acc.add(6.0 * w[j1] * w[j2] * w[c] * pair_val(pairing, ga, gb));
                    }
                }
            }
            acc.value()
        }
        _ => unreachable!("tensor quadrature is limited to d ≤ 3 by the callers"),
    }
}

// ---------------------------------------------------------------------------
// Axis meshes
// ---------------------------------------------------------------------------

fn geo_cells_for(len: f64, w_target: f64, ratio: f64) -> usize {
    if len <= 0.0 {
        return 0;
    }
    let n = ((1.0 + len * (ratio - 1.0) / w_target).ln() / ratio.ln()).ceil();
    (n as usize).clamp(4, 400)
}

/// Mesh for one axis of a product `G_a · G_b` (or difference) integral over
/// `[x_min, upper]`. Breakpoints: the kinks at 0 and at `kink_mid` (when an
/// interior time separates the two kernels' supports), the vanishing end at
/// `upper`, and a geometric tail toward `x_min`. The tail adds cells on top
/// of `n_cells` (about 17 per decade of depth), so deep truncation never
/// starves the core region.
fn pair_axis_mesh(
    upper: f64,
    kink_mid: Option<f64>,
    beta_kink: f64,
    grid: &QuadratureGrid,
    budget: usize,
    scheme: Scheme,
) -> Mesh1d {
    let scale = upper;
    let neg_lo = (-2.0 * scale).max(grid.x_min);
    let mut segs: Vec<Segment> = Vec::new();
    if grid.x_min < neg_lo {
        let n_tail = geo_cells_for(neg_lo - grid.x_min, 0.5 * scale, 1.15);
        segs.push(Segment::geometric(grid.x_min, neg_lo, n_tail, End::Hi, 1.15));
    }
    let n_neg = (budget * 3 / 10).max(2);
    if neg_lo < 0.0 {
        segs.push(Segment::geometric(neg_lo, 0.0, n_neg, End::Hi, 1.10));
    }
    let pos_budget = budget.saturating_sub(n_neg);
    match kink_mid {
        Some(m) if m < upper => {
            let q = (pos_budget / 4).max(2);
            let mid1 = 0.5 * m;
            let mid2 = 0.5 * (m + upper);
            segs.push(Segment::power(0.0, mid1, q, End::Lo, beta_kink));
            segs.push(Segment::power(mid1, m, q, End::Hi, beta_kink));
            segs.push(Segment::power(m, mid2, q, End::Lo, beta_kink));
            segs.push(Segment::power(mid2, upper, q, End::Hi, beta_kink));
        }
        _ => {
            let q = (pos_budget / 2).max(2);
            let mid = 0.5 * upper;
            segs.push(Segment::power(0.0, mid, q, End::Lo, beta_kink));
            segs.push(Segment::power(mid, upper, q, End::Hi, beta_kink));
        }
    }
    Mesh1d::build(&segs, scheme)
}

fn effective_budget(d: u32, grid: &QuadratureGrid) -> usize {
    if d >= 3 {
        grid.n_cells.min(MAX_CELLS_D3)
    } else {
        grid.n_cells
    }
}

// ---------------------------------------------------------------------------
// Covariance and increment norms
// ---------------------------------------------------------------------------

fn covariance_impl(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
    n_cells: usize,
) -> f64 {
    let upper = t.min(u).min(grid.x_max);
    if upper <= grid.x_min {
        return 0.0;
    }
    let ka = KernelSpec::process(d, h1, t);
    let kb = KernelSpec::process(d, h2, u);
    let a_min = ka.alpha().min(kb.alpha());
    let mesh = pair_axis_mesh(upper, None, 1.0 + a_min, grid, n_cells, grid.scheme);
    let e1 = 2.0 * (h1 - 1.0) / d as f64;
    let e2 = 2.0 * (h2 - 1.0) / d as f64;
    let gamma = e1 + e2;
    factorial(d)
        * bilinear_on_mesh(
            d,
            &mesh,
            &ka,
            &kb,
            Pairing::Product,
            gamma,
            N_S,
            grid.scheme,
        )
}

/// `d!·∫ G_{t,h1}(x) G_{u,h2}(x) dx` over the truncated grid. Exactly
/// symmetric in `(t,h1) ↔ (u,h2)` (arguments are canonicalized), and a
/// variance call (`t = u`, `h1 = h2`) is a sum of nonnegative terms.
///
/// Supports d ≤ 3; the d = 3 tensor is capped at 64 cells per axis.
pub fn covariance_quadrature(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
) -> LabResult<f64> {
    require_dim(d, 3, "covariance_quadrature")?;
    require_h(h1)?;
    require_h(h2)?;
    require_grid(grid)?;
    if !(t >= 0.0 && u >= 0.0) {
        return Err(LabError::BadParameter(format!(
            "negative time (t = {t}, u = {u})"
        )));
    }
    if t == 0.0 || u == 0.0 {
        return Ok(0.0);
    }
    // Canonical argument order makes the symmetry invariant exact in bits.
    let ((t, h1), (u, h2)) = sort_pair((t, h1), (u, h2));
    Ok(covariance_impl(
        d,
        t,
        h1,
        u,
        h2,
        grid,
        effective_budget(d, grid),
    ))
}

/// Covariance with a resolution diagnostic: recomputes at doubled `n_cells`
/// and warns when the value moves by more than 1%.
pub fn covariance_quadrature_checked(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
) -> LabResult<(f64, Vec<Warning>)> {
    let v = covariance_quadrature(d, t, h1, u, h2, grid)?;
    let mut fine = *grid;
    fine.n_cells *= 2;
    let v2 = covariance_quadrature(d, t, h1, u, h2, &fine)?;
    let mut warnings = Vec::new();
    let rel = (v2 - v).abs() / v2.abs().max(f64::MIN_POSITIVE);
    if rel > 0.01 {
        warnings.push(Warning::GridTooCoarse {
            rel_change: rel,
            threshold: 0.01,
        });
    }
    Ok((v, warnings))
}

fn sort_pair(a: (f64, f64), b: (f64, f64)) -> ((f64, f64), (f64, f64)) {
    if (b.0, b.1) < (a.0, a.1) {
        (b, a)
    } else {
        (a, b)
    }
}

fn increment_norm_impl(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
    n_cells: usize,
) -> f64 {
    let m = t.min(u);
    let upper = t.max(u).min(grid.x_max);
    if upper <= grid.x_min || upper <= 0.0 {
        return 0.0;
    }
    let ka = KernelSpec::process(d, h1, t);
    let kb = KernelSpec::process(d, h2, u);
    let a_min = ka.alpha().min(kb.alpha());
    let kink = (m > 0.0 && m < upper).then_some(m);
    let mesh = pair_axis_mesh(upper, kink, 1.0 + a_min, grid, n_cells, grid.scheme);
    let e_min = (2.0 * (h1 - 1.0) / d as f64).min(2.0 * (h2 - 1.0) / d as f64);
    let gamma = 2.0 * e_min;
    let sq = factorial(d)
        * bilinear_on_mesh(
            d,
            &mesh,
            &ka,
            &kb,
            Pairing::DiffSquare,
            gamma,
            N_S,
            grid.scheme,
        );
    sq.max(0.0).sqrt()
}

/// `‖X_d(t,h1) − X_d(u,h2)‖_{L²}` by quadrature of the squared kernel
/// difference on one shared mesh. The difference is formed inside the
/// integrand (never as a difference of large covariances), so identical
/// arguments give exactly zero and there is no cancellation for close ones.
pub fn l2_increment_norm(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
) -> LabResult<f64> {
    require_dim(d, 3, "l2_increment_norm")?;
    require_h(h1)?;
    require_h(h2)?;
    require_grid(grid)?;
    if !(t >= 0.0 && u >= 0.0) {
        return Err(LabError::BadParameter(format!(
            "negative time (t = {t}, u = {u})"
        )));
    }
    if t == u && h1 == h2 {
        return Ok(0.0);
    }
    let ((t, h1), (u, h2)) = sort_pair((t, h1), (u, h2));
    Ok(increment_norm_impl(
        d,
        t,
        h1,
        u,
        h2,
        grid,
        effective_budget(d, grid),
    ))
}

/// Increment norm with the same doubled-resolution diagnostic as
/// `covariance_quadrature_checked`.
pub fn l2_increment_norm_checked(
    d: u32,
    t: f64,
    h1: f64,
    u: f64,
    h2: f64,
    grid: &QuadratureGrid,
) -> LabResult<(f64, Vec<Warning>)> {
    let v = l2_increment_norm(d, t, h1, u, h2, grid)?;
    let mut fine = *grid;
    fine.n_cells *= 2;
    let v2 = l2_increment_norm(d, t, h1, u, h2, &fine)?;
    let mut warnings = Vec::new();
    let rel = (v2 - v).abs() / v2.abs().max(f64::MIN_POSITIVE);
    if rel > 0.01 {
        warnings.push(Warning::GridTooCoarse {
            rel_change: rel,
            threshold: 0.01,
        });
    }
    Ok((v, warnings))
}

// ---------------------------------------------------------------------------
// Reference grids and the variance constant
// ---------------------------------------------------------------------------

/// Truncation depth (decades) at which the tail error of the variance
/// integral drops below ~1e−4 (d = 1) / 1e−3 (d = 2); capped to keep the
/// geometric tail short. d = 3 uses a fixed shallow depth because the
/// per-axis budget is capped at 64 cells.
pub fn deep_grid(d: u32, h: f64, t_max: f64) -> QuadratureGrid {
    let (decades, n_cells) = match d {
        1 => ((4.0 / (2.0 - 2.0 * h)).ceil().min(18.0), 240),
        2 => ((3.0 / (1.0 - h)).ceil().min(12.0), 180),
        _ => (4.0, 64),
    };
    QuadratureGrid::new(
        -t_max * 10f64.powf(decades),
        t_max,
        n_cells,
        Scheme::Substitution,
    )
}

static VARIANCE_MEMO: OnceLock<Mutex<HashMap<(u32, u64), f64>>> = OnceLock::new();

/// Variance of the generator at `t = 1`: `c_h := covariance(1, h; 1, h)` on a
/// deep reference grid. This quadrature value *is* the constant's definition
/// here (no closed-form evaluation); results are memoized per `(d, h)`.
pub fn variance_constant(d: u32, h: f64) -> LabResult<f64> {
    require_dim(d, 3, "variance_constant")?;
    require_h(h)?;
    let key = (d, h.to_bits());
    let memo = VARIANCE_MEMO.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = memo.lock().unwrap().get(&key) {
        return Ok(v);
    }
    let grid = deep_grid(d, h, 1.0);
    let v = covariance_quadrature(d, 1.0, h, 1.0, h, &grid)?;
    memo.lock().unwrap().insert(key, v);
    Ok(v)
}

/// Fractional-Brownian-motion covariance with an explicitly pinned variance
/// constant: `(c_h/2)(|t|^{2h} + |u|^{2h} − |t−u|^{2h})`.
pub fn fbm_covariance(c_h: f64, h: f64, t: f64, u: f64) -> f64 {
    0.5 * c_h * (t.abs().powf(2.0 * h) + u.abs().powf(2.0 * h) - (t - u).abs().powf(2.0 * h))
}

// ---------------------------------------------------------------------------
// Decomposition norms
// ---------------------------------------------------------------------------

/// The three L² norms of the dyadic increment split at level `j`, index `k`,
/// with enlargement `M`: the part carried by the enlarged box
/// `((k−M)/2^j, (k+1)/2^j]^d` (`tilde`), the part carried by its complement
/// inside `(−∞, (k+1)/2^j]^d` (`check`), and the fixed-time norm between the
/// two Hurst values at the interval ends (`hat`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionNorms {
    pub tilde: f64,
    pub check: f64,
    pub hat: f64,
    pub warnings: Vec<Warning>,
}

fn box_mesh(lo: f64, t1: f64, t2: f64, a: f64, budget: usize, scheme: Scheme) -> Mesh1d {
    let beta = 1.0 + a;
    let mut segs = Vec::new();
    let n1 = (budget * 35 / 100).max(6);
    let n2 = (budget * 25 / 100).max(4);
    let n3 = (budget * 40 / 100).max(6);
    if lo < t1 {
        segs.push(Segment::power(lo, t1, n1, End::Hi, beta));
    }
    let mid = 0.5 * (t1 + t2);
    segs.push(Segment::power(t1, mid, n2, End::Lo, beta));
    segs.push(Segment::power(mid, t2, n3, End::Hi, beta));
    Mesh1d::build(&segs, scheme)
}

fn outer_mesh(x_min: f64, lo: f64, approach: f64, scheme: Scheme) -> Mesh1d {
    let n = geo_cells_for(lo - x_min, approach, 1.12);
    Mesh1d::build(&[Segment::geometric(x_min, lo, n, End::Hi, 1.12)], scheme)
}

fn inner_mesh(x_min: f64, t1: f64, t2: f64, a: f64, budget: usize, scheme: Scheme) -> Mesh1d {
    let beta = 1.0 + a;
    let width = t2 - t1;
    let n_tail = geo_cells_for(t1 - x_min, 0.125 * width, 1.12);
    let n2 = (budget * 40 / 100).max(6);
    let n3 = (budget * 60 / 100).max(8);
    let mid = 0.5 * (t1 + t2);
    Mesh1d::build(
        &[
            Segment::geometric(x_min, t1, n_tail, End::Hi, 1.12),
            Segment::power(t1, mid, n2, End::Lo, beta),
            Segment::power(mid, t2, n3, End::Hi, beta),
        ],
        scheme,
    )
}

/// Decomposition norms for d ≤ 2 (the complement integrals for d ≥ 3 need
/// singular handling on interior diagonal slabs that this layer does not
/// implement; nothing downstream requires them).
pub fn decomposition_norms(
    d: u32,
    j: u32,
    k: u64,
    m_box: u32,
    hurst: &HurstFunction,
    grid: &QuadratureGrid,
) -> LabResult<DecompositionNorms> {
    require_dim(d, 2, "decomposition_norms")?;
    require_grid(grid)?;
    if j > 40 {
        return Err(LabError::BadParameter(format!("level j = {j} too deep")));
    }
    if k >= (1u64 << j) {
        return Err(LabError::BadParameter(format!(
            "index k = {k} outside [0, 2^{j})"
        )));
    }
    if m_box == 0 {
        return Err(LabError::BadParameter("enlargement M must be ≥ 1".into()));
    }
    let scale = (2f64).powi(-(j as i32));
    let t1 = k as f64 * scale;
    let t2 = (k as f64 + 1.0) * scale;
    let h_star = hurst.eval(t2);
    let h_lo = hurst.eval(t1);
    let inc = KernelSpec {
        d,
        h: h_star,
        s_lo: t1,
        s_hi: t2,
    };
    let a = inc.alpha();
    let gamma = 4.0 * (h_star - 1.0) / d as f64;
    let budget = effective_budget(d, grid);
    let box_lo = (k as f64 - m_box as f64) * scale;
    let lo_eff = box_lo.max(grid.x_min);
    let mut warnings = Vec::new();

    let mesh_box = box_mesh(lo_eff, t1, t2, a, budget, grid.scheme);
    let tilde2 = factorial(d)
        * bilinear_on_mesh(
            d,
            &mesh_box,
            &inc,
            &inc,
            Pairing::Product,
            gamma,
            N_S,
            grid.scheme,
        );

    // Complement part via inclusion–exclusion over product domains: with
    // A_i = {x_i ≤ box_lo} inside the ambient box (−∞, t2]^d, the complement
    // of the enlarged box is ∪A_i, which is smooth territory (no coordinate
    // can reach the singular window (t1, t2]).
    let check2;
    if box_lo <= grid.x_min {
        check2 = 0.0;
        warnings.push(Warning::TruncationDominates {
            tail_fraction: 1.0,
            threshold: 0.1,
        });
    } else {
        let approach = (t1 - lo_eff).max(0.25 * (t2 - t1)) / 8.0;
        let outer = outer_mesh(grid.x_min, lo_eff, approach, grid.scheme);
        let inner = inner_mesh(grid.x_min, t1, t2, a, budget, grid.scheme);
        let g2 = |x: &[f64]| -> f64 {
            let v = inc.eval_g(x, N_S, Scheme::Substitution);
            v * v
        };
        match d {
            1 => {
                let mut acc = NeumaierSum::new();
                let mut rows = Vec::with_capacity(outer.len());
                for i in 0..outer.len() {
                    let gi = inc.g1(outer.nodes[i]);
                    let row = outer.weights[i] * gi * gi;
                    rows.push((outer.nodes[i], row));
                    acc.add(row);
                }
                check2 = acc.value();
                push_truncation_warning(&mut warnings, &rows, grid.x_min, check2);
            }
            _ => {
                // d = 2: check² = d!·(2 J₁ − J₂) with J₁ over outer × inner
                // and J₂ over outer × outer; rows are grouped by the outer
                // node to estimate the mass lost beyond x_min.
                let mut inner_row = vec![0.0; outer.len()];
                for i in 0..outer.len() {
                    let mut acc = NeumaierSum::new();
                    for l in 0..inner.len() {
                        acc.add(inner.weights[l] * g2(&[outer.nodes[i], inner.nodes[l]]));
                    }
                    inner_row[i] = acc.value();
                }
                let mut outer_row = vec![0.0; outer.len()];
                for i in 0..outer.len() {
                    let mut acc = NeumaierSum::new();
                    for l in 0..outer.len() {
                        acc.add(outer.weights[l] * g2(&[outer.nodes[i], outer.nodes[l]]));
                    }
                    outer_row[i] = acc.value();
                }
                let mut acc = NeumaierSum::new();
                let mut rows = Vec::with_capacity(outer.len());
                for i in 0..outer.len() {
                    let row =
                        factorial(d) * outer.weights[i] * (2.0 * inner_row[i] - outer_row[i]);
                    rows.push((outer.nodes[i], row));
                    acc.add(row);
                }
                check2 = acc.value();
                push_truncation_warning(&mut warnings, &rows, grid.x_min, check2);
            }
        }
    }

    let hat = l2_increment_norm(d, t1, h_star, t1, h_lo, grid)?;
    Ok(DecompositionNorms {
        tilde: tilde2.max(0.0).sqrt(),
        check: check2.max(0.0).sqrt(),
        hat,
        warnings,
    })
}

/// Estimate the mass beyond the truncation boundary by comparing the two
/// deepest decades of per-node contributions and extrapolating the observed
/// geometric decay.
fn push_truncation_warning(
    warnings: &mut Vec<Warning>,
    rows: &[(f64, f64)],
    x_min: f64,
    total: f64,
) {
    if total <= 0.0 {
        return;
    }
    let depth = x_min.abs();
    let (mut last, mut prev) = (0.0, 0.0);
    for &(x, row) in rows {
        let r = x.abs();
        if r >= depth / 10.0 {
            last += row;
        } else if r >= depth / 100.0 {
            prev += row;
        }
    }
    if prev <= 0.0 {
        return;
    }
    let rho = last / prev;
    let est = if rho < 1.0 {
        last * rho / (1.0 - rho)
    } else {
        f64::INFINITY
    };
    let frac = est / total;
    if frac > 0.1 {
        warnings.push(Warning::TruncationDominates {
            tail_fraction: frac,
            threshold: 0.1,
        });
    }
}

// ---------------------------------------------------------------------------
// Sweep output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub norm: f64,
    pub stderr: f64,
}

/// Emit sweep results in the `param,value,norm,stderr` CSV layout the
/// verification harness consumes.
pub fn write_sweep_csv(path: &Path, param: &str, rows: &[SweepRow]) -> LabResult<()> {
    let mut out = String::from("param,value,norm,stderr\n");
    for r in rows {
        out.push_str(&format!("{param},{},{},{}\n", r.value, r.norm, r.stderr));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
