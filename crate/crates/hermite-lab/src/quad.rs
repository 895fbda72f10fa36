//! One-dimensional quadrature meshes for integrands with algebraic endpoint
//! behavior and slowly decaying tails.
//!
//! A mesh is a flat list of `(node, weight)` pairs assembled from segments.
//! Each segment knows how its integrand behaves:
//!
//! * `Power { beta }` — integrand ~ `|x - end|^beta` near one endpoint
//!   (`beta > -1`, singular for negative beta, a derivative kink for
//!   beta in (0, 1)),
//! * `Geometric` — smooth power-law decay, resolved by geometrically
//!   growing cells away from the active end; each cell carries a two-point
//!   Gauss rule (two nodes sharing one cell), which keeps coarse ratios
//!   accurate on slowly decaying tails,
//! * `Uniform` — plain midpoint cells.
//!
//! Two node-placement schemes are supported and must agree on well-resolved
//! problems: `MidpointGraded` places midpoint nodes on power-graded cell
//! boundaries; `Substitution` grades boundaries through the power-law change
//! of variable and places each node where a width-weight rule reproduces the
//! cell's `|x − end|^beta` mass exactly (the "power centroid"). Both schemes
//! therefore integrate constants exactly — grading an endpoint more strongly
//! than the integrand requires costs accuracy order nothing — and both
//! evaluate the raw integrand (weights never absorb the singular factor), so
//! the same closure can be integrated on any mesh.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    MidpointGraded,
    Substitution,
}

/// Coarse user-facing description of a quadrature domain: truncation bounds
/// and a per-axis cell budget. Concrete meshes are derived from this plus
/// the breakpoint structure of the integrand at hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub x_min: f64,
    pub x_max: f64,
    /// Per-axis cell budget.
    pub n_cells: usize,
    pub scheme: Scheme,
}

impl QuadratureGrid {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize, scheme: Scheme) -> QuadratureGrid {
        assert!(x_min < x_max, "empty quadrature domain");
        assert!(n_cells >= 8, "need at least 8 cells per axis");
        QuadratureGrid {
            x_min,
            x_max,
            n_cells,
            scheme,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Lo,
    Hi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegKind {
    Uniform,
    /// Integrand behaves like `|x - endpoint|^beta` at the given end.
    Power { end: End, beta: f64 },
    /// Cells grow geometrically by `ratio` moving away from the given end.
    Geometric { end: End, ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub kind: SegKind,
}

impl Segment {
    pub fn uniform(a: f64, b: f64, n: usize) -> Segment {
        Segment {
            a,
            b,
            n,
            kind: SegKind::Uniform,
        }
    }

    pub fn power(a: f64, b: f64, n: usize, end: End, beta: f64) -> Segment {
        assert!(beta > -1.0, "non-integrable endpoint exponent {beta}");
        Segment {
            a,
            b,
            n,
            kind: SegKind::Power { end, beta },
        }
    }

    pub fn geometric(a: f64, b: f64, n: usize, end: End, ratio: f64) -> Segment {
        assert!(ratio > 1.0, "geometric ratio must exceed 1");
        Segment {
            a,
            b,
            n,
            kind: SegKind::Geometric { end, ratio },
        }
    }
}

/// Nodes, weights, and cell boundaries of an assembled mesh. Node order is
/// ascending; `cells[i]` is the interval the `i`-th node represents, which
/// tensor-product consumers use to integrate near-diagonal cell pairs by a
/// dedicated local rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub cells: Vec<(f64, f64)>,
}

impl Mesh1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn build(segments: &[Segment], scheme: Scheme) -> Mesh1d {
        let total: usize = segments.iter().map(|s| s.n).sum();
        let mut mesh = Mesh1d {
            nodes: Vec::with_capacity(total),
            weights: Vec::with_capacity(total),
            cells: Vec::with_capacity(total),
        };
        for seg in segments {
            append_segment(&mut mesh, seg, scheme);
        }
        debug_assert!(mesh.nodes.windows(2).all(|w| w[0] < w[1]));
        mesh
    }

    /// Integrate a scalar function over the mesh (compensated summation).
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = NeumaierSum::new();
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * f(x));
        }
        acc.value()
    }

    /// Total mass of the weights (the measure of the meshed domain).
    pub fn mass(&self) -> f64 {
        let mut acc = NeumaierSum::new();
        for &w in &self.weights {
            acc.add(w);
        }
        acc.value()
    }
}

fn append_segment(mesh: &mut Mesh1d, seg: &Segment, scheme: Scheme) {
    assert!(seg.b > seg.a, "segment out of order");
    assert!(seg.n > 0, "empty segment");
    let len = seg.b - seg.a;
    let start = mesh.nodes.len();
    match seg.kind {
        SegKind::Uniform => {
            let h = len / seg.n as f64;
            for i in 0..seg.n {
                mesh.nodes.push(seg.a + (i as f64 + 0.5) * h);
                mesh.weights.push(h);
                mesh.cells.push((seg.a + i as f64 * h, seg.a + (i + 1) as f64 * h));
            }
        }
        SegKind::Power { end, beta } => match scheme {
            Scheme::Substitution => {
                // Boundaries from the power-law change of variable; each node
                // at the cell's power centroid with a plain width weight, so
                // both constants and |x-end|^beta are exact cell by cell.
                // Grading never weaker than quadratic: centroid placement is
                // exact for any boundary law, and a vanishing kink (beta > 0)
                // is usually accompanied by higher unmatched exponents whose
                // first-cell mass must still shrink at second order.
                let q = (1.0 / (1.0 + beta)).max(2.0);
                let edge = |i: usize| -> f64 { ((i as f64) / seg.n as f64).powf(q) * len };
                for i in 0..seg.n {
                    let (u0, u1) = (edge(i), edge(i + 1));
                    let u = power_centroid(u0, u1, beta);
                    let (x, cell) = match end {
                        End::Lo => (seg.a + u, (seg.a + u0, seg.a + u1)),
                        End::Hi => (seg.b - u, (seg.b - u1, seg.b - u0)),
                    };
                    mesh.nodes.push(x);
                    mesh.weights.push(u1 - u0);
                    mesh.cells.push(cell);
                }
            }
            Scheme::MidpointGraded => {
                // Graded boundaries u_i = (i/n)^gamma with gamma chosen to
                // restore second-order convergence of the midpoint rule.
                let gamma = (2.0 / (1.0 + beta)).max(1.0);
                let bound = |i: usize| -> f64 { ((i as f64) / seg.n as f64).powf(gamma) * len };
                for i in 0..seg.n {
                    let (u0, u1) = (bound(i), bound(i + 1));
                    let (x0, x1) = match end {
                        End::Lo => (seg.a + u0, seg.a + u1),
                        End::Hi => (seg.b - u1, seg.b - u0),
                    };
                    mesh.nodes.push(0.5 * (x0 + x1));
                    mesh.weights.push(x1 - x0);
                    mesh.cells.push((x0, x1));
                }
            }
        },
        SegKind::Geometric { end, ratio } => {
            // Widths w0, w0 r, ..., w0 r^(n-1) starting at the active end;
            // two Gauss–Legendre nodes per cell (weight w/2 each), so wide
            // tail cells stay accurate.
            let grow = if seg.n as f64 * (ratio - 1.0) < 1e-9 {
                seg.n as f64
            } else {
                (ratio.powi(seg.n as i32) - 1.0) / (ratio - 1.0)
            };
            let w0 = len / grow;
            let off = 0.5 / 3f64.sqrt();
            let mut widths = Vec::with_capacity(seg.n);
            let mut w = w0;
            for _ in 0..seg.n {
                widths.push(w);
                w *= ratio;
            }
            match end {
                End::Lo => {
                    let mut x = seg.a;
                    for &w in &widths {
                        let mid = x + 0.5 * w;
                        for node in [mid - off * w, mid + off * w] {
                            mesh.nodes.push(node);
                            mesh.weights.push(0.5 * w);
                            mesh.cells.push((x, x + w));
                        }
                        x += w;
                    }
                }
                End::Hi => {
                    let mut x = seg.b;
                    for &w in &widths {
                        let mid = x - 0.5 * w;
                        for node in [mid + off * w, mid - off * w] {
                            mesh.nodes.push(node);
                            mesh.weights.push(0.5 * w);
                            mesh.cells.push((x - w, x));
                        }
                        x -= w;
                    }
                }
            }
        }
    }
    // Keep ascending order within the segment regardless of the active end.
    if mesh
        .nodes
        .get(start)
        .zip(mesh.nodes.last())
        .is_some_and(|(a, b)| a > b)
    {
        mesh.nodes[start..].reverse();
        mesh.weights[start..].reverse();
        mesh.cells[start..].reverse();
    }
}

/// The point `u*` in `[u0, u1]` at which a width weight reproduces the exact
/// integral of `u^beta` over the cell: `u* = [(u1^p - u0^p) / (p (u1 - u0))]
/// ^(1/beta)` with `p = 1 + beta`. Falls back to the midpoint when `beta` is
/// too small for the `1/beta` root to be well conditioned (the two placements
/// coincide to `O(beta)` there anyway).
fn power_centroid(u0: f64, u1: f64, beta: f64) -> f64 {
    if beta.abs() < 1e-3 {
        return 0.5 * (u0 + u1);
    }
    let p = 1.0 + beta;
    let num = if u0 == 0.0 {
        u1.powf(p)
    } else {
        u1.powf(p) - u0.powf(p)
    };
    (num / (p * (u1 - u0))).powf(1.0 / beta)
}

/// Neumaier-compensated accumulator: deterministic, order-stable summation
/// with error far below anything the quadrature itself commits.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> NeumaierSum {
        NeumaierSum::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
