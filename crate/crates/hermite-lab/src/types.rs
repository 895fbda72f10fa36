//! Shared domain types: Hurst functionals, dyadic interval bookkeeping,
//! discretization records, and sample containers with their on-disk formats.
//!
//! File formats are deliberately plain: two-column CSV for paths, a matrix
//! CSV for field samples, and a JSON sidecar carrying everything needed to
//! regenerate the data (dimension, Hurst descriptor, discretization, seed).
//! Floating-point values are written with Rust's shortest round-trip
//! formatting, so save → load → save is byte-identical.

use crate::error::{LabError, LabResult};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Open interval of admissible Hurst exponents.
pub const H_LO: f64 = 0.5;
pub const H_HI: f64 = 1.0;

// ---------------------------------------------------------------------------
// Hurst functionals
// ---------------------------------------------------------------------------

/// A time-varying Hurst exponent `t -> H(t)` with range inside (1/2, 1).
///
/// The variants are the shapes used throughout the experiments; all of them
/// are Lipschitz in `t`, so the smoothness exponent defaults to 1 (strictly
/// larger than any admissible `H`), which is what the regularity statements
/// require. A custom table may declare a smaller exponent explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HurstFunction {
    Constant {
        h: f64,
    },
    /// `clamp(intercept + slope * t, lo, hi)`.
    AffineClamped {
        intercept: f64,
        slope: f64,
        lo: f64,
        hi: f64,
    },
    /// `a + b * sin(c * t)`.
    Sinusoidal {
        a: f64,
        b: f64,
        c: f64,
    },
    /// Piecewise-linear interpolation through `(t, h)` knots, extended as a
    /// constant beyond the first/last knot.
    CustomTable {
        knots: Vec<(f64, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
}

impl HurstFunction {
    /// Validated constructor; rejects any shape whose range leaves (1/2, 1).
    pub fn new(raw: HurstFunction) -> LabResult<HurstFunction> {
        let (lo, hi) = raw.global_range();
        if !(lo > H_LO && hi < H_HI && lo <= hi) {
            return Err(LabError::HurstRange { lo, hi });
        }
        if let HurstFunction::CustomTable { knots, gamma } = &raw {
            if knots.is_empty() {
                return Err(LabError::BadParameter("custom table needs knots".into()));
            }
            if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(LabError::BadParameter(
                    "custom table knots must have strictly increasing times".into(),
                ));
            }
            if let Some(g) = gamma {
                if !(*g > 0.0 && *g <= 1.0) {
                    return Err(LabError::BadParameter(format!(
                        "declared smoothness exponent must lie in (0, 1], got {g}"
                    )));
                }
            }
        }
        if let HurstFunction::AffineClamped { lo, hi, .. } = &raw {
            if lo > hi {
                return Err(LabError::BadParameter(format!(
                    "clamp bounds out of order: lo {lo} > hi {hi}"
                )));
            }
        }
        Ok(raw)
    }

    pub fn constant(h: f64) -> LabResult<HurstFunction> {
        Self::new(HurstFunction::Constant { h })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            HurstFunction::Constant { h } => *h,
            HurstFunction::AffineClamped {
                intercept,
                slope,
                lo,
                hi,
            } => (intercept + slope * t).clamp(*lo, *hi),
            HurstFunction::Sinusoidal { a, b, c } => a + b * (c * t).sin(),
            HurstFunction::CustomTable { knots, .. } => {
                let n = knots.len();
                if t <= knots[0].0 {
                    return knots[0].1;
                }
                if t >= knots[n - 1].0 {
                    return knots[n - 1].1;
                }
                let i = knots.partition_point(|k| k.0 <= t);
                let (t0, h0) = knots[i - 1];
                let (t1, h1) = knots[i];
                h0 + (h1 - h0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Range of `H` over all of `t >= 0` (conservative for the clamped
    /// affine shape: the clamp bounds themselves).
    pub fn global_range(&self) -> (f64, f64) {
        match self {
            HurstFunction::Constant { h } => (*h, *h),
            HurstFunction::AffineClamped { lo, hi, .. } => (*lo, *hi),
            HurstFunction::Sinusoidal { a, b, .. } => (a - b.abs(), a + b.abs()),
            HurstFunction::CustomTable { knots, .. } => knots
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
                    (lo.min(k.1), hi.max(k.1))
                }),
        }
    }

    /// Exact min/max of `H` over a closed interval `[t0, t1]`.
    pub fn range_on(&self, t0: f64, t1: f64) -> (f64, f64) {
        assert!(t0 <= t1, "interval out of order");
        match self {
            HurstFunction::Constant { h } => (*h, *h),
            HurstFunction::AffineClamped { .. } => {
                // Monotone between clamps, so endpoint values bound the range.
                let a = self.eval(t0);
                let b = self.eval(t1);
                (a.min(b), a.max(b))
            }
            HurstFunction::Sinusoidal { a, b, c } => {
                let mut lo = self.eval(t0).min(self.eval(t1));
                let mut hi = self.eval(t0).max(self.eval(t1));
                if *c != 0.0 {
                    // Critical points: c t = pi/2 + k pi.
                    let half_pi = std::f64::consts::FRAC_PI_2;
                    let pi = std::f64::consts::PI;
                    let k0 = ((c * t0 - half_pi) / pi).ceil() as i64;
                    let k1 = ((c * t1 - half_pi) / pi).floor() as i64;
                    for k in k0..=k1 {
                        let t = (half_pi + pi * k as f64) / c;
                        if t >= t0 && t <= t1 {
                            let v = a + b * (c * t).sin();
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                }
                (lo, hi)
            }
            HurstFunction::CustomTable { knots, .. } => {
                let mut lo = self.eval(t0).min(self.eval(t1));
                let mut hi = self.eval(t0).max(self.eval(t1));
                for &(t, h) in knots {
                    if t > t0 && t < t1 {
                        lo = lo.min(h);
                        hi = hi.max(h);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Declared Hölder smoothness exponent of `t -> H(t)`. All built-in
    /// shapes are Lipschitz, hence exponent 1; a custom table may declare
    /// less.
    pub fn gamma(&self) -> f64 {
        match self {
            HurstFunction::CustomTable { gamma: Some(g), .. } => *g,
            _ => 1.0,
        }
    }

    /// The regularity statements need the Hurst functional to be smoother
    /// than the process it modulates: `gamma > max H`.
    pub fn smoothness_dominates_range(&self) -> bool {
        self.gamma() > self.global_range().1
    }
}

// ---------------------------------------------------------------------------
// Dyadic intervals
// ---------------------------------------------------------------------------

/// Index of the dyadic interval `[k 2^-j, (k+1) 2^-j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicIndex {
    pub j: u32,
    pub k: u64,
}

impl DyadicIndex {
    pub fn new(j: u32, k: u64) -> DyadicIndex {
        DyadicIndex { j, k }
    }

    pub fn width(&self) -> f64 {
        (0.5f64).powi(self.j as i32)
    }

    /// Half-open interval `[k 2^-j, (k+1) 2^-j)`.
    pub fn interval(&self) -> (f64, f64) {
        let w = self.width();
        (self.k as f64 * w, (self.k + 1) as f64 * w)
    }

    /// The two sub-intervals at scale `j + 1`.
    pub fn children(&self) -> (DyadicIndex, DyadicIndex) {
        (
            DyadicIndex::new(self.j + 1, 2 * self.k),
            DyadicIndex::new(self.j + 1, 2 * self.k + 1),
        )
    }

    pub fn parent(&self) -> Option<DyadicIndex> {
        (self.j > 0).then(|| DyadicIndex::new(self.j - 1, self.k / 2))
    }

    /// The same-scale neighborhood `{k-1, k, k+1}`, clipped to `[0, k_max]`.
    pub fn triple(&self, k_max: u64) -> Vec<DyadicIndex> {
        let lo = self.k.saturating_sub(1);
        let hi = (self.k + 1).min(k_max);
        (lo..=hi).map(|k| DyadicIndex::new(self.j, k)).collect()
    }
}

/// Dyadic interval at scale `j` containing the point `t >= 0`.
pub fn dyadic_of_point(t: f64, j: u32) -> DyadicIndex {
    assert!(t >= 0.0, "dyadic indexing needs t >= 0");
    let scaled = t * (2.0f64).powi(j as i32);
    DyadicIndex::new(j, scaled.floor() as u64)
}

// ---------------------------------------------------------------------------
// Discretization record
// ---------------------------------------------------------------------------

/// Discretization of the Brownian driver underlying a chaos simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationParams {
    /// Cells per unit time.
    pub n_grid: u32,
    /// Left truncation of the driver's time axis (< 0).
    pub x_min: f64,
    /// Right end of the driver's time axis; simulated times must stay below.
    pub t_max: f64,
}

impl DiscretizationParams {
    pub fn new(n_grid: u32, x_min: f64, t_max: f64) -> LabResult<DiscretizationParams> {
        if n_grid < 2 {
            return Err(LabError::BadParameter(format!(
                "n_grid must be at least 2, got {n_grid}"
            )));
        }
        if !(x_min < 0.0) {
            return Err(LabError::BadParameter(format!(
                "x_min must be negative, got {x_min}"
            )));
        }
        if !(t_max > 0.0) {
            return Err(LabError::BadParameter(format!(
                "t_max must be positive, got {t_max}"
            )));
        }
        Ok(DiscretizationParams {
            n_grid,
            x_min,
            t_max,
        })
    }

    /// Default truncation for horizon `t`: sixteen times `(t + 1)` to the left.
    pub fn default_for(n_grid: u32, t_max: f64) -> LabResult<DiscretizationParams> {
        Self::new(n_grid, -16.0 * (t_max + 1.0), t_max)
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_grid as f64
    }

    /// Number of driver cells covering `[x_min, t_max]`.
    pub fn n_cells(&self) -> usize {
        ((self.t_max - self.x_min) * self.n_grid as f64).round() as usize
    }

    /// Midpoint of driver cell `i`.
    pub fn midpoint(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }
}

// ---------------------------------------------------------------------------
// Sample containers
// ---------------------------------------------------------------------------

/// Metadata sidecar stored next to every sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub d: u32,
    pub hurst: HurstFunction,
    pub disc: DiscretizationParams,
    pub seed: u64,
    pub replica: u64,
    pub schema_version: u32,
}

/// A single simulated trajectory `t -> X(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: SampleMeta,
}

impl SamplePath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Write `<stem>.csv` and `<stem>.meta.json`.
    pub fn save(&self, stem: &Path) -> LabResult<()> {
        let csv_path = stem.with_extension("csv");
        let mut out = String::with_capacity(self.len() * 24 + 16);
        out.push_str("t,value\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t},{v}\n"));
        }
        write_atomic(&csv_path, out.as_bytes())?;
        let meta_path = stem.with_extension("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta)?;
        write_atomic(&meta_path, meta.as_bytes())?;
        Ok(())
    }

    /// Load a pair written by [`SamplePath::save`].
    pub fn load(stem: &Path) -> LabResult<SamplePath> {
        let csv_path = stem.with_extension("csv");
        let meta_path = stem.with_extension("meta.json");
        let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(LabError::Parse(format!(
                "unsupported schema version {} (expected {})",
                meta.schema_version, SCHEMA_VERSION
            )));
        }
        let file = std::fs::File::open(&csv_path)?;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "t,value" {
                    return Err(LabError::Parse(format!(
                        "unexpected header {line:?} in {csv_path:?}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| {
                LabError::Parse(format!("line {} of {csv_path:?}: missing comma", lineno + 1))
            })?;
            times.push(parse_f64(a, &csv_path, lineno)?);
            values.push(parse_f64(b, &csv_path, lineno)?);
        }
        Ok(SamplePath {
            times,
            values,
            meta,
        })
    }
}

/// Joint sample of the generator field `X(t, h)` on a `(t, h)` product grid,
/// all columns driven by one shared Brownian driver.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorFieldSample {
    pub t_grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    /// Row-major `t_grid.len() x h_grid.len()`.
    pub values: Vec<f64>,
    pub meta: SampleMeta,
}

impl GeneratorFieldSample {
    pub fn value(&self, ti: usize, hi: usize) -> f64 {
        self.values[ti * self.h_grid.len() + hi]
    }

    /// Matrix CSV: first row is the `h` grid, first column the `t` grid.
    pub fn save(&self, stem: &Path) -> LabResult<()> {
        let csv_path = stem.with_extension("csv");
        let mut out = String::new();
        out.push_str("t\\h");
        for h in &self.h_grid {
            out.push_str(&format!(",{h}"));
        }
        out.push('\n');
        for (ti, t) in self.t_grid.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for hi in 0..self.h_grid.len() {
                out.push_str(&format!(",{}", self.value(ti, hi)));
            }
            out.push('\n');
        }
        write_atomic(&csv_path, out.as_bytes())?;
        let meta_path = stem.with_extension("meta.json");
        write_atomic(
            &meta_path,
            serde_json::to_string_pretty(&self.meta)?.as_bytes(),
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> LabResult<GeneratorFieldSample> {
        let csv_path = stem.with_extension("csv");
        let meta: SampleMeta =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("meta.json"))?)?;
        let text = std::fs::read_to_string(&csv_path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| LabError::Parse(format!("{csv_path:?} is empty")))?;
        let mut h_grid = Vec::new();
        for (i, cell) in header.split(',').enumerate() {
            if i == 0 {
                continue;
            }
            h_grid.push(
                cell.parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("h grid entry {cell:?}: {e}")))?,
            );
        }
        let mut t_grid = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            for (i, cell) in line.split(',').enumerate() {
                let v = cell
                    .parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("row {}: {e}", lineno + 2)))?;
                if i == 0 {
                    t_grid.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        if values.len() != t_grid.len() * h_grid.len() {
            return Err(LabError::Parse(format!(
                "ragged field matrix in {csv_path:?}"
            )));
        }
        Ok(GeneratorFieldSample {
            t_grid,
            h_grid,
            values,
            meta,
        })
    }
}

fn parse_f64(s: &str, path: &Path, lineno: usize) -> LabResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| LabError::Parse(format!("line {} of {path:?}: {e}", lineno + 1)))
}

/// Write via a temp file + rename so partially written artifacts never
/// masquerade as results.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_hurst_evaluates_everywhere() {
        let h = HurstFunction::constant(0.7).unwrap();
        for t in [0.0, 0.3, 1.0, 7.5] {
            assert_eq!(h.eval(t), 0.7);
        }
        assert_eq!(h.global_range(), (0.7, 0.7));
    }

    #[test]
    fn sinusoidal_hits_quoted_values() {
        let h = HurstFunction::new(HurstFunction::Sinusoidal {
            a: 0.75,
            b: 0.15,
            c: std::f64::consts::TAU,
        })
        .unwrap();
        assert!((h.eval(0.0) - 0.75).abs() < 1e-15);
        assert!((h.eval(0.25) - 0.9).abs() < 1e-12);
        let (lo, hi) = h.global_range();
        assert!((lo - 0.6).abs() < 1e-15 && (hi - 0.9).abs() < 1e-15);
        // Interior extremum is found even when endpoints do not attain it.
        let (lo, hi) = h.range_on(0.1, 0.4);
        assert!((hi - 0.9).abs() < 1e-12, "max on [0.1,0.4] is at t=0.25");
        assert!(lo > 0.6);
    }

    #[test]
    fn out_of_range_shapes_are_rejected() {
        assert!(HurstFunction::constant(0.5).is_err());
        assert!(HurstFunction::constant(1.0).is_err());
        assert!(HurstFunction::new(HurstFunction::Sinusoidal {
            a: 0.75,
            b: 0.30,
            c: 1.0
        })
        .is_err());
    }

    #[test]
    fn custom_table_interpolates_linearly() {
        let h = HurstFunction::new(HurstFunction::CustomTable {
            knots: vec![(0.0, 0.6), (1.0, 0.8)],
            gamma: None,
        })
        .unwrap();
        assert!((h.eval(0.5) - 0.7).abs() < 1e-15);
        assert_eq!(h.eval(-1.0), 0.6);
        assert_eq!(h.eval(2.0), 0.8);
        assert_eq!(h.gamma(), 1.0);
    }

    #[test]
    fn dyadic_point_location() {
        let ix = dyadic_of_point(0.3, 3);
        assert_eq!((ix.j, ix.k), (3, 2));
        let (a, b) = ix.interval();
        assert!(a <= 0.3 && 0.3 < b);
        // Exact dyadic point lands in the interval that starts there.
        assert_eq!(dyadic_of_point(0.5, 1).k, 1);
    }

    #[test]
    fn refinement_containment() {
        for &t in &[0.0, 0.137, 0.25, 0.5, 0.803, 0.999] {
            for j in 0..12 {
                let k = dyadic_of_point(t, j).k;
                let k_next = dyadic_of_point(t, j + 1).k;
                assert!(k_next == 2 * k || k_next == 2 * k + 1);
            }
        }
    }

    #[test]
    fn triple_clips_at_boundaries() {
        let ix = DyadicIndex::new(3, 0);
        let tr: Vec<u64> = ix.triple(7).iter().map(|d| d.k).collect();
        assert_eq!(tr, vec![0, 1]);
        let ix = DyadicIndex::new(3, 7);
        let tr: Vec<u64> = ix.triple(7).iter().map(|d| d.k).collect();
        assert_eq!(tr, vec![6, 7]);
        let ix = DyadicIndex::new(3, 4);
        let tr: Vec<u64> = ix.triple(7).iter().map(|d| d.k).collect();
        assert_eq!(tr, vec![3, 4, 5]);
    }

    #[test]
    fn path_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        let path = SamplePath {
            times: vec![0.0, 0.1, 0.2, 1.0 / 3.0],
            values: vec![0.0, -1.5e-13, 2.25, 0.1 + 0.2],
            meta: SampleMeta {
                d: 2,
                hurst: HurstFunction::constant(0.75).unwrap(),
                disc: DiscretizationParams::new(256, -4.0, 1.0).unwrap(),
                seed: 0x4845_524d,
                replica: 3,
                schema_version: SCHEMA_VERSION,
            },
        };
        path.save(&stem).unwrap();
        let loaded = SamplePath::load(&stem).unwrap();
        assert_eq!(loaded, path);
        // Byte identity of a re-save.
        let csv1 = std::fs::read(stem.with_extension("csv")).unwrap();
        loaded.save(&stem).unwrap();
        let csv2 = std::fs::read(stem.with_extension("csv")).unwrap();
        assert_eq!(csv1, csv2);
    }

    #[test]
    fn field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("f");
        let field = GeneratorFieldSample {
            t_grid: vec![0.25, 0.5],
            h_grid: vec![0.6, 0.75, 0.9],
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            meta: SampleMeta {
                d: 1,
                hurst: HurstFunction::constant(0.7).unwrap(),
                disc: DiscretizationParams::new(64, -2.0, 1.0).unwrap(),
                seed: 9,
                replica: 0,
                schema_version: SCHEMA_VERSION,
            },
        };
        field.save(&stem).unwrap();
        let loaded = GeneratorFieldSample::load(&stem).unwrap();
        assert_eq!(loaded, field);
    }
}
