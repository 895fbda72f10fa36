//! Monte Carlo engine: sample paths and generator-field samples built from
//! discretized multiple Wiener–Itô integrals over one shared Brownian driver,
//! plus an exact Gaussian sampler for order 1 that serves as an oracle.
//!
//! The discrete chaos value at `(t, h)` is the off-diagonal sum
//! `Σ_{j₁<…<j_d} d!·Ḡ(x_{j₁},…,x_{j_d})·ΔB_{j₁}⋯ΔB_{j_d}` with `x_j` the
//! driver-cell midpoints and `Ḡ` the time-integrated kernel. Evaluated
//! naively this costs `O(n^d)`; instead the time integral is kept as an
//! explicit quadrature `Ḡ = Σ_s w_s ∏_ℓ (s−x_ℓ)₊^α`, the two summations are
//! exchanged, and the inner sum becomes the degree-`d` elementary symmetric
//! polynomial of the vector `v_s[j] = (s−x_j)₊^α ΔB_j` — computable from
//! power sums in `O(n·d)` per `s`-node via Newton's identities. The strictly
//! increasing index constraint (diagonal exclusion) is exactly the definition
//! of the elementary symmetric polynomial, so no diagonal correction terms
//! appear. With the shared `s`-rule the engine is `O(n_s · n)` per value,
//! and because the `s`-nodes are processed in ascending order, every time on
//! an ascending grid is a running snapshot: a whole constant-`h` path costs
//! the same single pass as its endpoint.
//!
//! The `s`-rule places, inside every driver cell, one midpoint node below the
//! cell's own midpoint and a short power-matched submesh above it, so each
//! tuple's `(s−x_max)^α` endpoint singularity is integrated by nodes graded
//! for exactly that exponent (off-diagonal tuples have multiplicity one at
//! the maximum). The s-rule is the *definition* of the discrete kernel here;
//! its agreement with the continuous quadrature is checked statistically by
//! the variance/covariance tests rather than asserted at fixed `n_grid`.
//!
//! Determinism: all randomness is counter-based (seed, stream, replica,
//! index), each replica's accumulation order is fixed, and ensembles collect
//! replicas in index order — results are bit-identical for a given seed at
//! any thread count.

use rayon::prelude::*;

use crate::error::{LabError, LabResult};
use crate::kernels::{self, KernelSpec, SSubmesh};
use crate::quad::{NeumaierSum, Scheme};
use crate::rng::{self, Stream};
use crate::types::{
    DiscretizationParams, GeneratorFieldSample, HurstFunction, SampleMeta, SamplePath,
    SCHEMA_VERSION,
};

/// Graded sub-nodes above each driver-cell midpoint (the singular side).
const S_NODES_ABOVE: usize = 2;
/// Replicas per work block; one block shares each powf row of the kernel.
const REPLICA_BLOCK: usize = 64;
/// Work ceiling (inner-loop multiply-adds) for a single simulated value
/// request; ensembles get a larger one.
const WORK_BUDGET_SINGLE: f64 = 4e10;
const WORK_BUDGET_ENSEMBLE: f64 = 1e12;

/// Largest driver resolution (cells per unit time) per chaos order. The
/// streamed sum is quadratic in the cell count, so resolution trades directly
/// against replica counts at desk scale.
pub fn n_grid_cap(d: u32) -> u32 {
    match d {
        1 => 1 << 14,
        2 => 1 << 10,
        3 => 1 << 7,
        _ => 1 << 5,
    }
}

// ---------------------------------------------------------------------------
// Brownian driver
// ---------------------------------------------------------------------------

/// The shared Brownian increments over `[x_min, t_max]` for one replica.
/// Increment `i` has variance `dx` and is a pure function of
/// `(seed, replica, i)`, so drivers can be rebuilt anywhere (e.g. by the
/// sign-flip transform) without storing them alongside samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianDriver {
    pub disc: DiscretizationParams,
    pub seed: u64,
    pub replica: u64,
    pub increments: Vec<f64>,
}

impl BrownianDriver {
    pub fn sample(disc: &DiscretizationParams, seed: u64, replica: u64) -> BrownianDriver {
        let n = disc.n_cells();
        let sd = disc.dx().sqrt();
        let increments = (0..n)
            .map(|i| sd * rng::gaussian(seed, Stream::Driver, replica, i as u64))
            .collect();
        BrownianDriver {
            disc: *disc,
            seed,
            replica,
            increments,
        }
    }

    /// The same driver with every increment negated (exact sign flip).
    pub fn flipped(&self) -> BrownianDriver {
        BrownianDriver {
            increments: self.increments.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Shared s-rule
// ---------------------------------------------------------------------------

/// Quadrature nodes for the time integral over `(0, t_hi]`, shared by every
/// index tuple. Within each driver cell: one midpoint node on the sub-segment
/// below the cell midpoint (no tuple is singular there — midpoints are the
/// only singular points and each cell contains exactly one), and a
/// power-matched submesh on the sub-segment above it, graded for the
/// `(s−x_mid)^α` behavior of tuples anchored in that cell.
struct SRule {
    s: Vec<f64>,
    w: Vec<f64>,
}

fn build_s_rule(disc: &DiscretizationParams, t_hi: f64, alpha: f64) -> SRule {
    let dx = disc.dx();
    let mut s = Vec::new();
    let mut w = Vec::new();
    let n = disc.n_cells();
    for i in 0..n {
        let lo = disc.x_min + i as f64 * dx;
        let hi = lo + dx;
        let seg_lo = lo.max(0.0);
        let seg_hi = hi.min(t_hi);
        if seg_hi <= seg_lo {
            if lo >= t_hi {
                break;
            }
            continue;
        }
        let xm = disc.midpoint(i);
        // Below the midpoint: smooth for every tuple, one midpoint node.
        if seg_lo < xm {
            let b = seg_hi.min(xm);
            s.push(0.5 * (seg_lo + b));
            w.push(b - seg_lo);
        }
        // Above the midpoint: graded like (s - xm)^alpha.
        let r_lo = seg_lo.max(xm);
        if seg_hi > r_lo {
            let sub = SSubmesh::build(
                r_lo - xm,
                seg_hi - xm,
                1.0 + alpha,
                S_NODES_ABOVE,
                Scheme::Substitution,
            );
            for (&tau, &wt) in sub.tau.iter().zip(&sub.w) {
                s.push(xm + tau);
                w.push(wt);
            }
        }
    }
    SRule { s, w }
}

// ---------------------------------------------------------------------------
// Core streamed engine
// ---------------------------------------------------------------------------

/// Degree-`d` elementary symmetric polynomial from power sums `p[0..d]`
/// (Newton's identities); `p[m-1]` holds `Σ v^m`.
#[inline]
fn elementary_from_power_sums(d: u32, p: &[f64; 4]) -> f64 {
    match d {
        1 => p[0],
        2 => 0.5 * (p[0] * p[0] - p[1]),
        3 => (p[0] * p[0] * p[0] - 3.0 * p[0] * p[1] + 2.0 * p[2]) / 6.0,
        _ => {
            let p1 = p[0];
            (p1 * p1 * p1 * p1 - 6.0 * p1 * p1 * p[1] + 3.0 * p[1] * p[1] + 8.0 * p1 * p[2]
                - 6.0 * p[3])
                / 24.0
        }
    }
}

/// Streamed off-diagonal chaos sums for one `h` and a block of replicas.
/// Returns `out[replica][time]` on the ascending `t_grid`. `drivers` holds
/// each replica's increment vector.
fn chaos_block(
    d: u32,
    h: f64,
    t_grid: &[f64],
    disc: &DiscretizationParams,
    drivers: &[&[f64]],
) -> Vec<Vec<f64>> {
    let n_cells = disc.n_cells();
    let mids: Vec<f64> = (0..n_cells).map(|i| disc.midpoint(i)).collect();
    let a = kernels::alpha(d, h);
    let fact = kernels::factorial(d);
    let t_hi = *t_grid.last().expect("nonempty t grid");
    let n_rep = drivers.len();
    let mut out = vec![vec![0.0; t_grid.len()]; n_rep];
    let mut acc: Vec<NeumaierSum> = vec![NeumaierSum::new(); n_rep];
    if t_hi <= 0.0 {
        return out;
    }
    let rule = build_s_rule(disc, t_hi, a);
    let mut krow = vec![0.0f64; n_cells];
    let mut prefix = 0usize;
    let mut t_ptr = 0usize;
    for (&s, &w) in rule.s.iter().zip(&rule.w) {
        while t_ptr < t_grid.len() && t_grid[t_ptr] < s {
            for (r, acc_r) in acc.iter().enumerate() {
                out[r][t_ptr] = fact * acc_r.value();
            }
            t_ptr += 1;
        }
        while prefix < n_cells && mids[prefix] < s {
            prefix += 1;
        }
        for (k, &x) in krow[..prefix].iter_mut().zip(&mids[..prefix]) {
            *k = (s - x).powf(a);
        }
        for (r, db) in drivers.iter().enumerate() {
            let mut p = [0.0f64; 4];
            match d {
                1 => {
                    let mut p1 = 0.0;
                    for (&k, &b) in krow[..prefix].iter().zip(&db[..prefix]) {
                        p1 += k * b;
                    }
                    p[0] = p1;
                }
                2 => {
                    let (mut p1, mut p2) = (0.0, 0.0);
                    for (&k, &b) in krow[..prefix].iter().zip(&db[..prefix]) {
                        let v = k * b;
                        p1 += v;
                        p2 += v * v;
                    }
                    p = [p1, p2, 0.0, 0.0];
                }
                3 => {
                    let (mut p1, mut p2, mut p3) = (0.0, 0.0, 0.0);
                    for (&k, &b) in krow[..prefix].iter().zip(&db[..prefix]) {
                        let v = k * b;
                        let v2 = v * v;
                        p1 += v;
                        p2 += v2;
                        p3 += v2 * v;
                    }
                    p = [p1, p2, p3, 0.0];
                }
                _ => {
                    let (mut p1, mut p2, mut p3, mut p4) = (0.0, 0.0, 0.0, 0.0);
                    for (&k, &b) in krow[..prefix].iter().zip(&db[..prefix]) {
                        let v = k * b;
                        let v2 = v * v;
                        p1 += v;
                        p2 += v2;
                        p3 += v2 * v;
                        p4 += v2 * v2;
                    }
                    p = [p1, p2, p3, p4];
                }
            }
            acc[r].add(w * elementary_from_power_sums(d, &p));
        }
    }
    while t_ptr < t_grid.len() {
        for (r, acc_r) in acc.iter().enumerate() {
            out[r][t_ptr] = fact * acc_r.value();
        }
        t_ptr += 1;
    }
    out
}

/// Order-1 values on an ascending time grid, using the exact closed-form
/// integrated kernel (no s-rule): `X(t) = Σ_j G_{t,h}(x_j) ΔB_j`.
fn direct_order1_block(
    h: f64,
    t_grid: &[f64],
    disc: &DiscretizationParams,
    drivers: &[&[f64]],
) -> Vec<Vec<f64>> {
    let n_cells = disc.n_cells();
    let mids: Vec<f64> = (0..n_cells).map(|i| disc.midpoint(i)).collect();
    let mut out = vec![vec![0.0; t_grid.len()]; drivers.len()];
    let mut gtab = vec![0.0f64; n_cells];
    for (ti, &t) in t_grid.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        let spec = KernelSpec::process(1, h, t);
        let prefix = mids.partition_point(|&x| x < t);
        for (g, &x) in gtab[..prefix].iter_mut().zip(&mids[..prefix]) {
            *g = spec.g1(x);
        }
        for (r, db) in drivers.iter().enumerate() {
            let mut acc = NeumaierSum::new();
            for (&g, &b) in gtab[..prefix].iter().zip(&db[..prefix]) {
                acc.add(g * b);
            }
            out[r][ti] = acc.value();
        }
    }
    out
}

/// Discrete integrated kernel `Ḡ` for one index tuple, evaluated with the
/// same shared s-rule the streamed engine uses. This is the enumeration
/// oracle's kernel: summing `d!·Ḡ·∏ΔB` over strictly increasing tuples must
/// reproduce the streamed value to floating-point accuracy.
pub(crate) fn discrete_g(
    d: u32,
    h: f64,
    t: f64,
    disc: &DiscretizationParams,
    cells: &[usize],
) -> f64 {
    assert_eq!(cells.len(), d as usize);
    let a = kernels::alpha(d, h);
    let rule = build_s_rule(disc, t, a);
    let mut acc = NeumaierSum::new();
    for (&s, &w) in rule.s.iter().zip(&rule.w) {
        let mut prod = w;
        for &c in cells {
            let x = disc.midpoint(c);
            if x >= s {
                prod = 0.0;
                break;
            }
            prod *= (s - x).powf(a);
        }
        acc.add(prod);
    }
    acc.value()
}

// ---------------------------------------------------------------------------
// Validation and budget guard
// ---------------------------------------------------------------------------

fn require_h(h: f64) -> LabResult<()> {
    if h > 0.5 && h < 1.0 && h.is_finite() {
        Ok(())
    } else {
        Err(LabError::BadParameter(format!(
            "Hurst value {h} outside (1/2, 1)"
        )))
    }
}

fn require_t_grid(t_grid: &[f64], disc: &DiscretizationParams) -> LabResult<()> {
    if t_grid.is_empty() {
        return Err(LabError::BadParameter("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::BadParameter(
            "time grid must be strictly increasing".into(),
        ));
    }
    let (lo, hi) = (t_grid[0], *t_grid.last().unwrap());
    if !(lo >= 0.0 && hi <= disc.t_max) {
        return Err(LabError::BadParameter(format!(
            "time grid [{lo}, {hi}] leaves [0, {}]",
            disc.t_max
        )));
    }
    Ok(())
}

/// Inner-loop work (multiply-adds) for `n_evals` streamed single evaluations
/// at horizon `t_hi`, one replica.
fn column_work(d: u32, disc: &DiscretizationParams, t_hi: f64) -> f64 {
    let cells = disc.n_cells() as f64;
    if d == 1 {
        cells
    } else {
        let n_s = (S_NODES_ABOVE as f64 + 1.0) * t_hi.max(0.0) * disc.n_grid as f64;
        n_s * cells * d as f64
    }
}

fn budget_guard(
    d: u32,
    disc: &DiscretizationParams,
    work: f64,
    budget: f64,
    context: &str,
) -> LabResult<()> {
    if d == 0 || d > 8 {
        return Err(LabError::BadParameter(format!(
            "chaos order must be in 1..=8, got {d}"
        )));
    }
    let cap = n_grid_cap(d);
    if disc.n_grid > cap {
        return Err(LabError::BudgetExceeded {
            estimated: disc.n_grid as f64,
            budget: cap as f64,
            context: format!("{context}: n_grid cap for order {d} is {cap}"),
        });
    }
    if work > budget {
        return Err(LabError::BudgetExceeded {
            estimated: work,
            budget,
            context: context.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public simulation API
// ---------------------------------------------------------------------------

fn field_meta(d: u32, h0: f64, disc: &DiscretizationParams, seed: u64, replica: u64) -> SampleMeta {
    SampleMeta {
        d,
        // A field spans many h values; the sidecar records the first column's
        // as a representative (the full h grid lives in the sample itself).
        hurst: HurstFunction::Constant { h: h0 },
        disc: *disc,
        seed,
        replica,
        schema_version: SCHEMA_VERSION,
    }
}

fn simulate_field_with_drivers(
    d: u32,
    t_grid: &[f64],
    h_grid: &[f64],
    disc: &DiscretizationParams,
    drivers: &[&[f64]],
    metas: (u64, u64),
) -> Vec<GeneratorFieldSample> {
    let n_rep = drivers.len();
    let mut columns: Vec<Vec<Vec<f64>>> = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let col = if d == 1 {
            direct_order1_block(h, t_grid, disc, drivers)
        } else {
            chaos_block(d, h, t_grid, disc, drivers)
        };
        columns.push(col);
    }
    (0..n_rep)
        .map(|r| {
            let mut values = vec![0.0; t_grid.len() * h_grid.len()];
            for (hi, col) in columns.iter().enumerate() {
                for (ti, &v) in col[r].iter().enumerate() {
                    values[ti * h_grid.len() + hi] = v;
                }
            }
            GeneratorFieldSample {
                t_grid: t_grid.to_vec(),
                h_grid: h_grid.to_vec(),
                values,
                meta: field_meta(d, h_grid[0], disc, metas.0, metas.1 + r as u64),
            }
        })
        .collect()
}

/// One coupled sample of the generator field on `t_grid × h_grid`: every
/// `(t, h)` value is built from the same Brownian driver (same seed and
/// replica), so columns are dependent exactly as the construction demands.
pub fn simulate_field(
    d: u32,
    t_grid: &[f64],
    h_grid: &[f64],
    disc: &DiscretizationParams,
    seed: u64,
    replica: u64,
) -> LabResult<GeneratorFieldSample> {
    require_t_grid(t_grid, disc)?;
    if h_grid.is_empty() {
        return Err(LabError::BadParameter("empty h grid".into()));
    }
    for &h in h_grid {
        require_h(h)?;
    }
    let work = h_grid.len() as f64 * column_work(d, disc, *t_grid.last().unwrap());
    budget_guard(
        d,
        disc,
        work,
        WORK_BUDGET_SINGLE,
        &format!(
            "simulate_field(d={d}, n_grid={}, {} times x {} h-values)",
            disc.n_grid,
            t_grid.len(),
            h_grid.len()
        ),
    )?;
    let driver = BrownianDriver::sample(disc, seed, replica);
    let mut out = simulate_field_with_drivers(
        d,
        t_grid,
        h_grid,
        disc,
        &[&driver.increments],
        (seed, replica),
    );
    Ok(out.pop().expect("one replica in, one sample out"))
}

/// Independent replicas `0..n_paths` of the coupled field, parallelized over
/// replica blocks and returned in replica order.
pub fn field_ensemble(
    d: u32,
    t_grid: &[f64],
    h_grid: &[f64],
    disc: &DiscretizationParams,
    seed: u64,
    n_paths: usize,
) -> LabResult<Vec<GeneratorFieldSample>> {
    require_t_grid(t_grid, disc)?;
    if h_grid.is_empty() || n_paths == 0 {
        return Err(LabError::BadParameter(
            "need at least one h value and one path".into(),
        ));
    }
    for &h in h_grid {
        require_h(h)?;
    }
    let work =
        n_paths as f64 * h_grid.len() as f64 * column_work(d, disc, *t_grid.last().unwrap());
    budget_guard(
        d,
        disc,
        work,
        WORK_BUDGET_ENSEMBLE,
        &format!(
            "field_ensemble(d={d}, n_grid={}, {} paths)",
            disc.n_grid, n_paths
        ),
    )?;
    let blocks: Vec<(usize, usize)> = (0..n_paths)
        .step_by(REPLICA_BLOCK)
        .map(|lo| (lo, (lo + REPLICA_BLOCK).min(n_paths)))
        .collect();
    let per_block: Vec<Vec<GeneratorFieldSample>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let drivers: Vec<BrownianDriver> = (lo..hi)
                .map(|r| BrownianDriver::sample(disc, seed, r as u64))
                .collect();
            let views: Vec<&[f64]> = drivers.iter().map(|d| d.increments.as_slice()).collect();
            simulate_field_with_drivers(d, t_grid, h_grid, disc, &views, (seed, lo as u64))
        })
        .collect();
    Ok(per_block.into_iter().flatten().collect())
}

/// One multifractional path `t -> X_d(t, H(t))` from one driver. A constant
/// `H` collapses to a single field column (one streamed pass); a genuinely
/// time-varying `H` needs one pass per time point, since the kernel exponent
/// changes with `t` — the budget guard accounts for that.
pub fn simulate_mfh_path(
    d: u32,
    hurst: &HurstFunction,
    t_grid: &[f64],
    disc: &DiscretizationParams,
    seed: u64,
    replica: u64,
) -> LabResult<SamplePath> {
    let values = mfh_values(d, hurst, t_grid, disc, seed, replica, WORK_BUDGET_SINGLE)?;
    Ok(SamplePath {
        times: t_grid.to_vec(),
        values,
        meta: SampleMeta {
            d,
            hurst: hurst.clone(),
            disc: *disc,
            seed,
            replica,
            schema_version: SCHEMA_VERSION,
        },
    })
}

fn mfh_values(
    d: u32,
    hurst: &HurstFunction,
    t_grid: &[f64],
    disc: &DiscretizationParams,
    seed: u64,
    replica: u64,
    budget: f64,
) -> LabResult<Vec<f64>> {
    require_t_grid(t_grid, disc)?;
    let (h_lo, h_hi) = hurst.global_range();
    if !(h_lo > 0.5 && h_hi < 1.0) {
        return Err(LabError::HurstRange { lo: h_lo, hi: h_hi });
    }
    let constant_h = matches!(hurst, HurstFunction::Constant { .. });
    let t_hi = *t_grid.last().unwrap();
    let work = if constant_h || d == 1 {
        t_grid.len().max(1) as f64 * column_work(d, disc, t_hi) / if d == 1 { 1.0 } else { t_grid.len() as f64 }
    } else {
        // One full streamed pass per time point.
        t_grid.iter().map(|&t| column_work(d, disc, t)).sum()
    };
    budget_guard(
        d,
        disc,
        work,
        budget,
        &format!(
            "simulate_mfh_path(d={d}, n_grid={}, {} times)",
            disc.n_grid,
            t_grid.len()
        ),
    )?;
    let driver = BrownianDriver::sample(disc, seed, replica);
    let views = [driver.increments.as_slice()];
    if constant_h {
        let h = hurst.eval(0.0);
        let col = if d == 1 {
            direct_order1_block(h, t_grid, disc, &views)
        } else {
            chaos_block(d, h, t_grid, disc, &views)
        };
        return Ok(col.into_iter().next().unwrap());
    }
    if d == 1 {
        // Exact kernels: one table per time point, same cost shape as a column.
        let n_cells = disc.n_cells();
        let mids: Vec<f64> = (0..n_cells).map(|i| disc.midpoint(i)).collect();
        let db = &driver.increments;
        let mut out = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            if t <= 0.0 {
                out.push(0.0);
                continue;
            }
            let spec = KernelSpec::process(1, hurst.eval(t), t);
            let prefix = mids.partition_point(|&x| x < t);
            let mut acc = NeumaierSum::new();
            for (&x, &b) in mids[..prefix].iter().zip(&db[..prefix]) {
                acc.add(spec.g1(x) * b);
            }
            out.push(acc.value());
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if t <= 0.0 {
            out.push(0.0);
            continue;
        }
        let col = chaos_block(d, hurst.eval(t), &[t], disc, &views);
        out.push(col[0][0]);
    }
    Ok(out)
}

/// Independent replicas of one multifractional path, in replica order.
pub fn path_ensemble(
    d: u32,
    hurst: &HurstFunction,
    t_grid: &[f64],
    disc: &DiscretizationParams,
    seed: u64,
    n_paths: usize,
) -> LabResult<Vec<SamplePath>> {
    if n_paths == 0 {
        return Err(LabError::BadParameter("need at least one path".into()));
    }
    // Validate once up front (also applies the ensemble-level budget).
    let single = mfh_values(d, hurst, t_grid, disc, 0, 0, f64::INFINITY).map(|_| ());
    single?;
    let constant_h = matches!(hurst, HurstFunction::Constant { .. });
    let t_hi = *t_grid.last().unwrap();
    let per_path = if constant_h || d == 1 {
        column_work(d, disc, t_hi)
    } else {
        t_grid.iter().map(|&t| column_work(d, disc, t)).sum()
    };
    budget_guard(
        d,
        disc,
        n_paths as f64 * per_path,
        WORK_BUDGET_ENSEMBLE,
        &format!(
            "path_ensemble(d={d}, n_grid={}, {} paths)",
            disc.n_grid, n_paths
        ),
    )?;
    if constant_h {
        // Replica blocks share the streamed pass structure.
        let h = hurst.eval(0.0);
        let blocks: Vec<(usize, usize)> = (0..n_paths)
            .step_by(REPLICA_BLOCK)
            .map(|lo| (lo, (lo + REPLICA_BLOCK).min(n_paths)))
            .collect();
        let per_block: Vec<Vec<Vec<f64>>> = blocks
            .par_iter()
            .map(|&(lo, hi)| {
                let drivers: Vec<BrownianDriver> = (lo..hi)
                    .map(|r| BrownianDriver::sample(disc, seed, r as u64))
                    .collect();
                let views: Vec<&[f64]> = drivers.iter().map(|d| d.increments.as_slice()).collect();
                if d == 1 {
                    direct_order1_block(h, t_grid, disc, &views)
                } else {
                    chaos_block(d, h, t_grid, disc, &views)
                }
            })
            .collect();
        let hurst = hurst.clone();
        return Ok(per_block
            .into_iter()
            .flatten()
            .enumerate()
            .map(|(r, values)| SamplePath {
                times: t_grid.to_vec(),
                values,
                meta: SampleMeta {
                    d,
                    hurst: hurst.clone(),
                    disc: *disc,
                    seed,
                    replica: r as u64,
                    schema_version: SCHEMA_VERSION,
                },
            })
            .collect());
    }
    (0..n_paths)
        .into_par_iter()
        .map(|r| simulate_mfh_path(d, hurst, t_grid, disc, seed, r as u64))
        .collect()
}

/// Recompute a field sample with the driver's signs flipped. The output
/// equals `(−1)^d` times the input *exactly* (bit for bit): negation commutes
/// with every floating-point operation in the accumulation.
pub fn sign_flip_transform(field: &GeneratorFieldSample) -> LabResult<GeneratorFieldSample> {
    let m = &field.meta;
    let driver = BrownianDriver::sample(&m.disc, m.seed, m.replica).flipped();
    let mut out = simulate_field_with_drivers(
        m.d,
        &field.t_grid,
        &field.h_grid,
        &m.disc,
        &[&driver.increments],
        (m.seed, m.replica),
    );
    Ok(out.pop().expect("one replica in, one sample out"))
}

// ---------------------------------------------------------------------------
// Exact Gaussian oracle (order 1)
// ---------------------------------------------------------------------------

/// Exact fractional Gaussian sample on `t_grid` with covariance
/// `(c_h/2)(t^{2h} + u^{2h} − |t−u|^{2h})`, by Cholesky factorization. For
/// `h` in (1/2, 1) the variance constant is pinned to the same deep
/// quadrature the simulator is checked against, so both generators share one
/// normalization; outside that range (this sampler is an oracle and also
/// covers plain Brownian motion at `h = 1/2`) the constant is 1.
pub struct FbmSampler {
    t_grid: Vec<f64>,
    h: f64,
    c_h: f64,
    /// Lower-triangular factor for the strictly positive times.
    chol: nalgebra::DMatrix<f64>,
    /// Indices of strictly positive times (t = 0 rows are exactly zero).
    pos: Vec<usize>,
}

impl FbmSampler {
    pub fn new(h: f64, t_grid: &[f64]) -> LabResult<FbmSampler> {
        if !(h > 0.0 && h < 1.0) {
            return Err(LabError::BadParameter(format!(
                "fractional exponent {h} outside (0, 1)"
            )));
        }
        if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] < 0.0 {
            return Err(LabError::BadParameter(
                "time grid must be nonnegative and strictly increasing".into(),
            ));
        }
        let c_h = if h > 0.5 {
            kernels::variance_constant(1, h)?
        } else {
            1.0
        };
        let pos: Vec<usize> = (0..t_grid.len()).filter(|&i| t_grid[i] > 0.0).collect();
        let n = pos.len();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                cov[(a, b)] = kernels::fbm_covariance(c_h, h, t_grid[pos[a]], t_grid[pos[b]]);
            }
        }
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| {
                LabError::NotPositiveDefinite(format!(
                    "fractional covariance on {n} times at h = {h}"
                ))
            })?
            .unpack();
        Ok(FbmSampler {
            t_grid: t_grid.to_vec(),
            h,
            c_h,
            chol,
            pos,
        })
    }

    pub fn variance_constant(&self) -> f64 {
        self.c_h
    }

    /// Draw replica `r`: values = L·z with z standard normal from the
    /// counter stream, zeros at t = 0.
    pub fn sample(&self, seed: u64, replica: u64) -> SamplePath {
        let n = self.pos.len();
        let z: Vec<f64> = (0..n)
            .map(|i| rng::gaussian(seed, Stream::CholeskyPath, replica, i as u64))
            .collect();
        let mut values = vec![0.0; self.t_grid.len()];
        for a in 0..n {
            let mut acc = 0.0;
            for b in 0..=a {
                acc += self.chol[(a, b)] * z[b];
            }
            values[self.pos[a]] = acc;
        }
        SamplePath {
            times: self.t_grid.clone(),
            values,
            meta: SampleMeta {
                d: 1,
                // Direct construction: the oracle's exponent range (0,1) is
                // wider than the Hermite-admissible interval.
                hurst: HurstFunction::Constant { h: self.h },
                disc: DiscretizationParams {
                    n_grid: 2,
                    x_min: -1.0,
                    t_max: *self.t_grid.last().unwrap(),
                },
                seed,
                replica,
                schema_version: SCHEMA_VERSION,
            },
        }
    }
}

/// One exact fractional Gaussian path (see [`FbmSampler`]).
pub fn exact_fbm_path(h: f64, t_grid: &[f64], seed: u64, replica: u64) -> LabResult<SamplePath> {
    Ok(FbmSampler::new(h, t_grid)?.sample(seed, replica))
}

/// Replicas `0..n_paths` from one factorization, in replica order.
pub fn exact_fbm_ensemble(
    h: f64,
    t_grid: &[f64],
    seed: u64,
    n_paths: usize,
) -> LabResult<Vec<SamplePath>> {
    let sampler = FbmSampler::new(h, t_grid)?;
    Ok((0..n_paths)
        .into_par_iter()
        .map(|r| sampler.sample(seed, r as u64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{covariance_quadrature, deep_grid};
    use crate::types::DiscretizationParams;

    const SEED: u64 = 0x4845_524d;

    fn tiny_disc(n_grid: u32) -> DiscretizationParams {
        DiscretizationParams::new(n_grid, -1.0, 1.0).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    /// Mean and standard error of a sample.
    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn streamed_sum_equals_exhaustive_enumeration() {
        // The structural oracle: for a tiny driver grid, enumerate every
        // strictly increasing index tuple directly and compare against the
        // streamed elementary-symmetric evaluation, replica by replica.
        let disc = tiny_disc(8);
        let n = disc.n_cells();
        for (d, h, t) in [(2u32, 0.75, 1.0), (2, 0.6, 0.75), (3, 0.8, 1.0)] {
            let driver = BrownianDriver::sample(&disc, SEED, 5);
            let db = &driver.increments;
            let views = [db.as_slice()];
            let streamed = chaos_block(d, h, &[t], &disc, &views)[0][0];
            let mut brute = NeumaierSum::new();
            if d == 2 {
                for j1 in 0..n {
                    for j2 in j1 + 1..n {
                        let g = discrete_g(2, h, t, &disc, &[j1, j2]);
                        brute.add(2.0 * g * db[j1] * db[j2]);
                    }
                }
            } else {
                for j1 in 0..n {
                    for j2 in j1 + 1..n {
                        for j3 in j2 + 1..n {
                            let g = discrete_g(3, h, t, &disc, &[j1, j2, j3]);
                            brute.add(6.0 * g * db[j1] * db[j2] * db[j3]);
                        }
                    }
                }
            }
            assert!(
                rel(streamed, brute.value()) < 1e-11,
                "d={d} h={h} t={t}: streamed {streamed} vs brute {}",
                brute.value()
            );
        }
    }

    #[test]
    fn streamed_engine_at_order_one_matches_its_enumeration() {
        let disc = tiny_disc(16);
        let driver = BrownianDriver::sample(&disc, SEED, 2);
        let views = [driver.increments.as_slice()];
        let streamed = chaos_block(1, 0.7, &[0.9], &disc, &views)[0][0];
        let mut brute = NeumaierSum::new();
        for j in 0..disc.n_cells() {
            brute.add(discrete_g(1, 0.7, 0.9, &disc, &[j]) * driver.increments[j]);
        }
        assert!(rel(streamed, brute.value()) < 1e-12);
    }

    #[test]
    fn tiny_grid_second_moment_matches_exact_enumeration() {
        // E[X²] of the discrete quadratic form is exactly d!²·Σ Ḡ²·dx^d over
        // increasing tuples; the Monte Carlo mean must sit within its own
        // error bars, and the empirical mean near zero.
        let disc = tiny_disc(8);
        let n = disc.n_cells();
        let (d, h, t) = (2u32, 0.75, 1.0);
        let dx = disc.dx();
        let mut exact = NeumaierSum::new();
        for j1 in 0..n {
            for j2 in j1 + 1..n {
                let g = discrete_g(d, h, t, &disc, &[j1, j2]);
                exact.add((2.0 * g) * (2.0 * g) * dx * dx);
            }
        }
        let exact = exact.value();
        let n_rep = 100_000usize;
        let samples: Vec<f64> = (0..n_rep)
            .map(|r| {
                let driver = BrownianDriver::sample(&disc, SEED, r as u64);
                chaos_block(d, h, &[t], &disc, &[&driver.increments])[0][0]
            })
            .collect();
        let sq: Vec<f64> = samples.iter().map(|x| x * x).collect();
        let (m2, se2) = mean_se(&sq);
        assert!(
            (m2 - exact).abs() < 3.0 * se2,
            "second moment {m2} vs exact {exact} (se {se2})"
        );
        let (m1, se1) = mean_se(&samples);
        assert!(m1.abs() < 4.0 * se1, "mean {m1} (se {se1})");
    }

    #[test]
    fn variance_matches_continuous_quadrature_order1() {
        // d = 1 uses exact kernels, so the discrete variance converges fast:
        // Σ G(x_j)² dx vs the continuous ∫ G² — compare deterministically
        // (no Monte Carlo error) and tightly.
        let disc = DiscretizationParams::new(1 << 10, -33.0, 1.0).unwrap();
        let mids: Vec<f64> = (0..disc.n_cells()).map(|i| disc.midpoint(i)).collect();
        for h in [0.6, 0.75, 0.9] {
            let spec = KernelSpec::process(1, h, 1.0);
            let mut acc = NeumaierSum::new();
            for &x in &mids {
                if x < 1.0 {
                    let g = spec.g1(x);
                    acc.add(g * g * disc.dx());
                }
            }
            let discrete = acc.value();
            let cont = covariance_quadrature(1, 1.0, h, 1.0, h, &deep_grid(1, h, 1.0)).unwrap();
            // Truncation at -33 and the midpoint rule leave sub-percent gaps.
            assert!(
                rel(discrete, cont) < 8e-3,
                "h={h}: discrete {discrete} vs quadrature {cont}"
            );
        }
    }

    #[test]
    fn variance_matches_continuous_quadrature_order2() {
        // Statistical isometry check at order 2: empirical variance vs the
        // deep covariance quadrature, within three standard errors of the
        // squared-sample mean.
        let disc = DiscretizationParams::new(1 << 7, -17.0, 1.0).unwrap();
        let h = 0.75;
        let t = 1.0;
        let n_rep = 3000usize;
        let fields = field_ensemble(2, &[t], &[h], &disc, SEED, n_rep).unwrap();
        let sq: Vec<f64> = fields.iter().map(|f| f.value(0, 0) * f.value(0, 0)).collect();
        let (m2, se2) = mean_se(&sq);
        let cont = covariance_quadrature(2, t, h, t, h, &deep_grid(2, h, t)).unwrap();
        assert!(
            (m2 - cont).abs() < 3.0 * se2 + 0.02 * cont,
            "Var {m2} vs quadrature {cont} (se {se2})"
        );
        let samples: Vec<f64> = fields.iter().map(|f| f.value(0, 0)).collect();
        let (m1, se1) = mean_se(&samples);
        assert!(m1.abs() < 4.0 * se1, "mean {m1} (se {se1})");
    }

    #[test]
    fn coupled_columns_reproduce_cross_covariance() {
        let disc = DiscretizationParams::new(1 << 7, -17.0, 1.0).unwrap();
        let (h1, h2) = (0.65, 0.85);
        let t = 1.0;
        let n_rep = 3000usize;
        let fields = field_ensemble(2, &[t], &[h1, h2], &disc, SEED ^ 0x11, n_rep).unwrap();
        let prods: Vec<f64> = fields.iter().map(|f| f.value(0, 0) * f.value(0, 1)).collect();
        let (m, se) = mean_se(&prods);
        let cross = covariance_quadrature(2, t, h1, t, h2, &deep_grid(2, 0.75, t)).unwrap();
        assert!(
            (m - cross).abs() < 3.0 * se + 0.02 * cross.abs(),
            "cross-moment {m} vs quadrature {cross} (se {se})"
        );
    }

    #[test]
    fn field_values_at_time_zero_vanish() {
        let disc = tiny_disc(32);
        let f = simulate_field(2, &[0.0, 0.5], &[0.6, 0.8], &disc, SEED, 0).unwrap();
        assert_eq!(f.value(0, 0), 0.0);
        assert_eq!(f.value(0, 1), 0.0);
        assert!(f.value(1, 0) != 0.0);
    }

    #[test]
    fn constant_hurst_path_is_a_field_column() {
        let disc = tiny_disc(64);
        let t_grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let h = HurstFunction::constant(0.8).unwrap();
        for d in [1u32, 2] {
            let path = simulate_mfh_path(d, &h, &t_grid, &disc, SEED, 7).unwrap();
            let field = simulate_field(d, &t_grid, &[0.8], &disc, SEED, 7).unwrap();
            for (ti, v) in path.values.iter().enumerate() {
                assert_eq!(v.to_bits(), field.value(ti, 0).to_bits(), "d={d} ti={ti}");
            }
            assert_eq!(path.values[0], 0.0);
        }
    }

    #[test]
    fn varying_hurst_path_matches_pointwise_field_values() {
        let disc = tiny_disc(32);
        let hurst = HurstFunction::new(HurstFunction::Sinusoidal {
            a: 0.75,
            b: 0.1,
            c: 3.0,
        })
        .unwrap();
        let t_grid = [0.0, 0.3, 0.7, 1.0];
        let path = simulate_mfh_path(2, &hurst, &t_grid, &disc, SEED, 3).unwrap();
        for (ti, &t) in t_grid.iter().enumerate() {
            if t == 0.0 {
                assert_eq!(path.values[ti], 0.0);
                continue;
            }
            let f = simulate_field(2, &[t], &[hurst.eval(t)], &disc, SEED, 3).unwrap();
            assert_eq!(path.values[ti].to_bits(), f.value(0, 0).to_bits(), "t={t}");
        }
    }

    #[test]
    fn sign_flip_parity_is_exact() {
        let disc = tiny_disc(32);
        let t_grid = [0.25, 0.5, 1.0];
        let h_grid = [0.6, 0.75];
        for d in [1u32, 2, 3] {
            let f = simulate_field(d, &t_grid, &h_grid, &disc, SEED, 11).unwrap();
            let flipped = sign_flip_transform(&f).unwrap();
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            for (a, b) in f.values.iter().zip(&flipped.values) {
                assert_eq!((sign * a).to_bits(), b.to_bits(), "d={d}");
            }
        }
    }

    #[test]
    fn driver_mean_is_centered() {
        let disc = tiny_disc(64);
        let n_rep = 400;
        let mut means = Vec::with_capacity(n_rep);
        for r in 0..n_rep {
            let drv = BrownianDriver::sample(&disc, SEED, r as u64);
            means.push(drv.increments.iter().sum::<f64>() / drv.increments.len() as f64);
        }
        let (m, se) = mean_se(&means);
        assert!(m.abs() < 4.0 * se, "driver mean {m} (se {se})");
        assert_eq!(
            BrownianDriver::sample(&disc, SEED, 0).increments.len(),
            disc.n_cells()
        );
    }

    #[test]
    fn budget_guard_refuses_oversized_requests() {
        let too_fine = DiscretizationParams::new(1 << 11, -4.0, 1.0).unwrap();
        let err = simulate_field(2, &[1.0], &[0.75], &too_fine, SEED, 0).unwrap_err();
        match err {
            LabError::BudgetExceeded {
                estimated, budget, ..
            } => {
                assert!(estimated > budget);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
        let d3 = DiscretizationParams::new(1 << 9, -4.0, 1.0).unwrap();
        assert!(matches!(
            simulate_field(3, &[1.0], &[0.75], &d3, SEED, 0),
            Err(LabError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn ensembles_are_deterministic_and_thread_count_independent() {
        let disc = tiny_disc(32);
        let t_grid = [0.5, 1.0];
        let run = |threads: usize| -> Vec<f64> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                field_ensemble(2, &t_grid, &[0.7], &disc, SEED, 130)
                    .unwrap()
                    .iter()
                    .flat_map(|f| f.values.clone())
                    .collect()
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn exact_sampler_pins_variance_and_brownian_case() {
        let t_grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let sampler = FbmSampler::new(0.75, &t_grid).unwrap();
        let c_h = sampler.variance_constant();
        // Var at t = 1 equals c_h by construction: the Cholesky row for the
        // last time reproduces the diagonal of the covariance.
        let row = sampler.chol.row(sampler.pos.len() - 1);
        let var: f64 = row.iter().map(|v| v * v).sum();
        assert!(rel(var, c_h) < 1e-10, "Var(1) {var} vs c_h {c_h}");

        // h = 1/2: disjoint increments are uncorrelated, exactly, at the
        // covariance level.
        let c = |t: f64, u: f64| kernels::fbm_covariance(1.0, 0.5, t, u);
        let inc_cov = c(0.75, 0.25) - c(0.75, 0.1) - c(0.5, 0.25) + c(0.5, 0.1);
        assert!(inc_cov.abs() < 1e-14, "disjoint increments: {inc_cov}");
        // And empirically on sampled paths.
        let paths = exact_fbm_ensemble(0.5, &t_grid, SEED, 4000).unwrap();
        let prods: Vec<f64> = paths
            .iter()
            .map(|p| (p.values[2] - p.values[1]) * (p.values[4] - p.values[3]))
            .collect();
        let (m, se) = mean_se(&prods);
        assert!(m.abs() < 4.0 * se, "increment correlation {m} (se {se})");
    }

    #[test]
    fn order1_simulation_matches_exact_sampler_covariance() {
        // The two d = 1 generators (discrete chaos sum, exact Cholesky) share
        // the same normalization; their covariances must agree statistically.
        let disc = DiscretizationParams::new(1 << 10, -33.0, 1.0).unwrap();
        let h = 0.7;
        let t_grid = [0.25, 0.5, 0.75, 1.0];
        let hurst = HurstFunction::constant(h).unwrap();
        let n_rep = 2000usize;
        let paths = path_ensemble(1, &hurst, &t_grid, &disc, SEED ^ 0x77, n_rep).unwrap();
        let c_h = kernels::variance_constant(1, h).unwrap();
        for (a, b) in [(0usize, 2usize), (1, 3), (3, 3)] {
            let prods: Vec<f64> = paths.iter().map(|p| p.values[a] * p.values[b]).collect();
            let (m, se) = mean_se(&prods);
            let exact = kernels::fbm_covariance(c_h, h, t_grid[a], t_grid[b]);
            assert!(
                (m - exact).abs() < 3.0 * se + 0.01 * exact.abs(),
                "cov(t{a}, t{b}): {m} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn degenerate_time_grids_are_rejected() {
        let disc = tiny_disc(32);
        assert!(simulate_field(2, &[], &[0.7], &disc, SEED, 0).is_err());
        assert!(simulate_field(2, &[0.5, 0.5], &[0.7], &disc, SEED, 0).is_err());
        assert!(simulate_field(2, &[0.5, 2.0], &[0.7], &disc, SEED, 0).is_err());
        assert!(simulate_field(2, &[0.5], &[0.5], &disc, SEED, 0).is_err());
        assert!(FbmSampler::new(0.75, &[0.5, 0.25]).is_err());
    }
}
