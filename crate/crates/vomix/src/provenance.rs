//! Provenance tracking: how much each original token contributed to each
//! surviving token, and the heatmap/region-map renderings built from it.
//!
//! The assignment matrix is column-stochastic: column `j` holds the convex
//! weights of the original tokens inside current token `j`. Every mixing
//! layer updates it with the same size-weighted mixture the queries use, so
//! total provenance mass per original token (weighted by sizes) stays 1.

use crate::attention::LayerTrace;
use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

#[derive(Clone, Debug)]
pub struct AssignmentMatrix {
    /// N0 x N_l, column-stochastic.
    pub m: Matrix,
}

/// Identity assignment: every token is its own source.
pub fn init_assignment(n0: usize) -> AssignmentMatrix {
    AssignmentMatrix {
        m: Matrix::identity(n0),
    }
}

/// Applies one layer's mixing to the assignment. Needs a trace collected
/// with tracing enabled (mixture weights and size vectors present).
pub fn update_assignment(a: &AssignmentMatrix, trace: &LayerTrace) -> Result<AssignmentMatrix> {
    let n0 = a.m.rows();
    if a.m.cols() != trace.n_in {
        return Err(Error::Config(format!(
            "assignment has {} columns but the trace entered with {} tokens",
            a.m.cols(),
            trace.n_in
        )));
    }
    if !trace.mass_conserved {
        // Discard mode: pruned columns drop, surviving columns pass through.
        let mut out = Matrix::zeros(n0, trace.retained.len());
        for (new_col, &old_col) in trace.retained.iter().enumerate() {
            for t in 0..n0 {
                out.set(t, new_col, a.m.get(t, old_col));
            }
        }
        return Ok(AssignmentMatrix { m: out });
    }
    let (w, s_before, s_after) = match (&trace.mix_weights, &trace.sizes_before, &trace.sizes_after)
    {
        (Some(w), Some(sb), Some(sa)) => (w, sb, sa),
        _ => {
            return Err(Error::Config(
                "trace has no mixture data; run the forward with tracing enabled".into(),
            ))
        }
    };

    let mut out = Matrix::zeros(n0, trace.retained.len());
    for (new_col, &ri) in trace.retained.iter().enumerate() {
        let s_new = s_after[new_col];
        let inv = 1.0 / s_new;
        for t in 0..n0 {
            let mut acc = a.m.get(t, ri) * s_before[ri];
            for (jj, &pj) in trace.pruned.iter().enumerate() {
                acc += w.get(jj, new_col) * a.m.get(t, pj) * s_before[pj];
            }
            out.set(t, new_col, acc * inv);
        }
    }
    let result = AssignmentMatrix { m: out };
    for (col, sum) in column_sums(&result.m).into_iter().enumerate() {
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Invariant(format!(
                "assignment column {col} sums to {sum}, drifted past 1e-4"
            )));
        }
    }
    Ok(result)
}

/// Folds a full forward's traces into the final assignment.
pub fn assignment_from_traces(n0: usize, traces: &[LayerTrace]) -> Result<AssignmentMatrix> {
    let mut a = init_assignment(n0);
    for t in traces {
        a = update_assignment(&a, t)?;
    }
    Ok(a)
}

pub fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut sums = vec![0.0f32; m.cols()];
    for i in 0..m.rows() {
        for (s, &v) in sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Spatial layout of the patch tokens: `frames` grids of `h x w`, rendered
/// side by side. Class tokens are excluded from the grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn image(h: usize, w: usize) -> Self {
        Self { frames: 1, h, w }
    }

    pub fn patch_tokens(&self) -> usize {
        self.frames * self.h * self.w
    }

    fn pixel_dims(&self, scale: usize) -> (usize, usize) {
        (self.frames * self.w * scale, self.h * scale)
    }
}

/// Monochrome-to-hot color ramp: black through red and yellow to white.
/// `t` in [0, 1]; channels are `255 * clamp(3t - k, 0, 1)` for k = 0, 1, 2.
pub fn heat_ramp(t: f32) -> [u8; 3] {
    let ch = |k: f32| ((3.0 * t - k).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(0.0), ch(1.0), ch(2.0)]
}

/// Deterministic palette keyed by destination index: golden-angle hue walk
/// with a secondary value walk, converted from HSV (s = 0.65).
pub fn palette(idx: usize) -> [u8; 3] {
    let frac = |x: f64| x - x.floor();
    let h = frac(idx as f64 * 0.618_033_988_749_895);
    let s = 0.65f64;
    let v = 0.95 - 0.25 * frac(idx as f64 * 0.381_966_011_250_105);
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

fn check_grid(a: &AssignmentMatrix, grid: &TokenGrid, class_token: bool) -> Result<usize> {
    let offset = usize::from(class_token);
    if a.m.rows() != grid.patch_tokens() + offset {
        return Err(Error::Config(format!(
            "assignment has {} original tokens but the grid expects {} (+{offset} class)",
            a.m.rows(),
            grid.patch_tokens()
        )));
    }
    Ok(offset)
}

fn paint(
    grid: &TokenGrid,
    scale: usize,
    color_of: impl Fn(usize) -> [u8; 3],
) -> (usize, usize, Vec<u8>) {
    let (pw, ph) = grid.pixel_dims(scale);
    let mut pixels = vec![0u8; pw * ph * 3];
    for frame in 0..grid.frames {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let tok = frame * grid.h * grid.w + gy * grid.w + gx;
                let c = color_of(tok);
                let x0 = (frame * grid.w + gx) * scale;
                let y0 = gy * scale;
                for dy in 0..scale {
                    for dx in 0..scale {
                        let off = ((y0 + dy) * pw + x0 + dx) * 3;
                        pixels[off..off + 3].copy_from_slice(&c);
                    }
                }
            }
        }
    }
    (pw, ph, pixels)
}

/// Source heatmap for one surviving token: its assignment column, min-max
/// normalized over the patch tokens, through the hot ramp. Returns
/// `(width, height, rgb)`; one cell per patch scaled up by `scale`.
pub fn render_heatmap(
    a: &AssignmentMatrix,
    token_index: usize,
    grid: &TokenGrid,
    class_token: bool,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if token_index >= a.m.cols() {
        return Err(Error::Config(format!(
            "token index {token_index} out of range for {} surviving tokens",
            a.m.cols()
        )));
    }
    let offset = check_grid(a, grid, class_token)?;
    let n_patch = grid.patch_tokens();
    let col: Vec<f32> = (0..n_patch)
        .map(|t| a.m.get(t + offset, token_index))
        .collect();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &col {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let norm = |v: f32| if span > 0.0 { (v - lo) / span } else { 0.0 };
    Ok(paint(grid, scale.max(1), |tok| heat_ramp(norm(col[tok]))))
}

/// Region map: each original patch token colored by its dominant surviving
/// destination (argmax of its assignment row, lowest index on ties).
pub fn render_region_map(
    a: &AssignmentMatrix,
    grid: &TokenGrid,
    class_token: bool,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let offset = check_grid(a, grid, class_token)?;
    let n_patch = grid.patch_tokens();
    let dests: Vec<usize> = (0..n_patch)
        .map(|t| tensor::argmax_first(a.m.row(t + offset)))
        .collect();
    Ok(paint(grid, scale.max(1), |tok| palette(dests[tok])))
}

/// Dominant destination per original token; exposed for tests.
pub fn dominant_destinations(a: &AssignmentMatrix, class_token: bool) -> Vec<usize> {
    let offset = usize::from(class_token);
    (offset..a.m.rows())
        .map(|t| tensor::argmax_first(a.m.row(t)))
        .collect()
}
