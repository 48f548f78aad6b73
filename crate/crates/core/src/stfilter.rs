//! Space-time nonlinear diffusion.
//!
//! Each outer step solves, slice by slice,
//!
//! ```text
//! u⁺ᵢⱼ = uᵢⱼ + (τ/h²) · clt(u)ᵢⱼ · Σₗₘ gᵢⱼˡᵐ (u⁺ᵢ₊ₗ,ⱼ₊ₘ − u⁺ᵢⱼ)
//! ```
//!
//! where `clt` measures how far a pixel is from moving along a smooth,
//! intensity-preserving trajectory through the neighbouring slices, and the
//! edge weights `g = 1/(1 + K s²)` come from diamond-cell gradients of the
//! Gaussian-presmoothed current slice. Slices only talk to each other
//! through `clt`, which is evaluated on the previous iterate, so every slice
//! solve is independent.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{mirror, Frame, ImageStack};
use crate::sor::{SorParams, SorStats, StencilSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    /// Scale step `τ_F`.
    pub tau: f64,
    /// Edge sensitivity `K`.
    pub k: f64,
    /// Presmoothing Gaussian variance (physical units).
    pub sigma: f64,
    /// Pixel side used by the finite-volume discretisation.
    pub h: f64,
    /// Chebyshev radius of the motion search in `clt`.
    pub rho: usize,
    /// Time increment between slices.
    pub dtheta: f64,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub sor: SorParams,
    /// Compute `clt` once from the input and reuse it every step.
    pub freeze_clt: bool,
    /// Replace `clt` by a constant (diagnostics and conservation checks).
    pub force_clt: Option<f64>,
    /// Replace every edge weight by a constant.
    pub force_g: Option<f64>,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            tau: 0.25,
            k: 100.0,
            sigma: 0.1,
            h: 0.1,
            rho: 2,
            dtheta: 1.0,
            outer_tol: 1e-3,
            max_outer: 3,
            sor: SorParams::default(),
            freeze_clt: false,
            force_clt: None,
            force_g: None,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::param("filter.tau", format!("{} must be positive", self.tau)));
        }
        if !(self.k > 0.0) {
            return Err(Error::param("filter.k", format!("{} must be positive", self.k)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("filter.sigma", format!("{} must be non-negative", self.sigma)));
        }
        if !(self.h > 0.0) {
            return Err(Error::param("filter.h", format!("{} must be positive", self.h)));
        }
        if !(self.dtheta > 0.0) {
            return Err(Error::param("filter.dtheta", format!("{} must be positive", self.dtheta)));
        }
        if !(self.outer_tol > 0.0) {
            return Err(Error::param("filter.outer_tol", format!("{} must be positive", self.outer_tol)));
        }
        if !(self.sor.omega > 1.0 && self.sor.omega < 2.0) {
            return Err(Error::param("filter.sor_omega", format!("{} outside (1, 2)", self.sor.omega)));
        }
        self.sor.validate()
    }
}

/// Normalised 1D Gaussian of the given variance (physical units) sampled at
/// pixel spacing `h`, truncated at three standard deviations.
pub fn gaussian_kernel(variance: f64, h: f64) -> Vec<f64> {
    if variance <= 0.0 {
        return vec![1.0];
    }
    let std_px = variance.sqrt() / h;
    let radius = (3.0 * std_px).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * std_px * std_px)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian convolution with mirrored boundaries. `σ = 0` is the
/// identity.
pub fn presmooth(frame: &Frame, variance: f64, h: f64) -> Frame {
    if variance <= 0.0 {
        return frame.clone();
    }
    let kernel = gaussian_kernel(variance, h);
    let r = (kernel.len() / 2) as isize;
    let (w, ht) = frame.dims();
    let mut tmp = Frame::new(w, ht);
    for j in 0..ht {
        for i in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = mirror(i as isize + t as isize - r, w);
                acc += kv * frame.get(ii, j);
            }
            tmp.set(i, j, acc);
        }
    }
    let mut out = Frame::new(w, ht);
    for j in 0..ht {
        for i in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = mirror(j as isize + t as isize - r, ht);
                acc += kv * tmp.get(i, jj);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Perona–Malik edge detector `g(s) = 1 / (1 + K s²)`.
#[inline]
pub fn edge_detector(s: f64, k: f64) -> f64 {
    1.0 / (1.0 + k * s * s)
}

/// Diamond-cell gradients on the four pixel edges of `(i, j)`, ordered as
/// [`crate::sor::NEIGHBORS`]: `∇¹⁰, ∇⁻¹⁰, ∇⁰¹, ∇⁰⁻¹`.
///
/// The normal component is the difference across the edge; the tangential
/// one is the difference of the two corner averages bounding it.
pub fn diamond_gradients(frame: &Frame, i: usize, j: usize, h: f64) -> [[f64; 2]; 4] {
    let (i, j) = (i as isize, j as isize);
    let u = |di: isize, dj: isize| frame.get_mirrored(i + di, j + dj);
    let c = u(0, 0);
    let corner = |l: isize, m: isize| 0.25 * (c + u(0, m) + u(l, 0) + u(l, m));
    let (pp, pm, mm, mp) = (corner(1, 1), corner(1, -1), corner(-1, -1), corner(-1, 1));
    [
        [(u(1, 0) - c) / h, (pp - pm) / h],
        [(u(-1, 0) - c) / h, (mp - mm) / h],
        [(pp - mp) / h, (u(0, 1) - c) / h],
        [(pm - mm) / h, (u(0, -1) - c) / h],
    ]
}

/// Per-pixel edge weights `g(|∇ˡᵐ u|)`, ordered as [`crate::sor::NEIGHBORS`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    pub width: usize,
    pub height: usize,
    pub g: Vec<[f64; 4]>,
}

impl EdgeField {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        EdgeField {
            width,
            height,
            g: vec![[value; 4]; width * height],
        }
    }

    /// Edge weights from the diamond-cell gradients of `smoothed`.
    pub fn from_frame(smoothed: &Frame, k: f64, h: f64) -> Self {
        let (w, ht) = smoothed.dims();
        let mut g = Vec::with_capacity(w * ht);
        for j in 0..ht {
            for i in 0..w {
                let grads = diamond_gradients(smoothed, i, j, h);
                g.push(grads.map(|[a, b]| edge_detector((a * a + b * b).sqrt(), k)));
            }
        }
        EdgeField { width: w, height: ht, g }
    }
}

/// Neighbouring slice indices with reflection at the ends of the sequence.
#[inline]
fn temporal_neighbors(k: usize, n: usize) -> (usize, usize) {
    let prev = if k > 0 {
        k - 1
    } else if n > 1 {
        1
    } else {
        k
    };
    let next = if k + 1 < n {
        k + 1
    } else if k > 0 {
        k - 1
    } else {
        k
    };
    (prev, next)
}

#[inline]
fn half_central_gradient(frame: &Frame, i: usize, j: usize) -> (f64, f64) {
    let (ii, jj) = (i as isize, j as isize);
    (
        0.5 * (frame.get_mirrored(ii + 1, jj) - frame.get_mirrored(ii - 1, jj)),
        0.5 * (frame.get_mirrored(ii, jj + 1) - frame.get_mirrored(ii, jj - 1)),
    )
}

/// One candidate of the `clt` minimisation. The gradient is the central
/// difference scaled so that pixel offsets can be used directly.
#[inline(always)]
fn pair_cost(gx: f64, gy: f64, w1: (isize, isize), w2: (isize, isize), a: f64, b: f64) -> f64 {
    let dx = (w1.0 - w2.0) as f64;
    let dy = (w1.1 - w2.1) as f64;
    ((gx * dx + gy * dy).abs() + a) + b
}

/// `clt` at one pixel by exhaustive search over all offset pairs with
/// Chebyshev norm at most `rho`.
pub fn clt_value(frames: &[Frame], k: usize, i: usize, j: usize, rho: usize, dtheta: f64) -> f64 {
    let (prev, next) = temporal_neighbors(k, frames.len());
    let cur = &frames[k];
    let center = cur.get(i, j);
    let (gx, gy) = half_central_gradient(cur, i, j);
    let r = rho as isize;
    let (ii, jj) = (i as isize, j as isize);
    let mut best = f64::INFINITY;
    for w1y in -r..=r {
        for w1x in -r..=r {
            let a = (frames[prev].get_mirrored(ii - w1x, jj - w1y) - center).abs();
            for w2y in -r..=r {
                for w2x in -r..=r {
                    let b = (frames[next].get_mirrored(ii + w2x, jj + w2y) - center).abs();
                    let v = pair_cost(gx, gy, (w1x, w1y), (w2x, w2y), a, b);
                    if v < best {
                        best = v;
                    }
                }
            }
        }
    }
    best / (dtheta * dtheta)
}

/// `clt` over a whole slice.
///
/// Returns exactly the values of [`clt_value`]. Pairs with equal offsets
/// have no gradient term, so the smallest of their intensity sums is a
/// starting bound; any other pair whose intensity terms alone reach the
/// bound is skipped. Rounding is monotone, so skipped pairs could never
/// have won.
pub fn clt_field(frames: &[Frame], k: usize, rho: usize, dtheta: f64) -> Frame {
    let (prev, next) = temporal_neighbors(k, frames.len());
    let (cur, before, after) = (&frames[k], &frames[prev], &frames[next]);
    let (w, h) = cur.dims();
    let r = rho as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (x, y)))
        .collect();
    let linear: Vec<isize> = offsets.iter().map(|&(x, y)| x + y * w as isize).collect();
    let n = offsets.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut cand_b = vec![0usize; n];
    let scale = dtheta * dtheta;
    let (cd, bd, ad) = (cur.data(), before.data(), after.data());

    let mut out = Frame::new(w, h);
    for j in 0..h {
        for i in 0..w {
            let (ii, jj) = (i as isize, j as isize);
            let p = j * w + i;
            let center = cd[p];
            let interior = ii >= r && jj >= r && ii + r < w as isize && jj + r < h as isize;
            let (gx, gy) = if interior && rho > 0 {
                (0.5 * (cd[p + 1] - cd[p - 1]), 0.5 * (cd[p + w] - cd[p - w]))
            } else {
                half_central_gradient(cur, i, j)
            };
            if interior {
                let pi = p as isize;
                for t in 0..n {
                    a[t] = (bd[(pi - linear[t]) as usize] - center).abs();
                    b[t] = (ad[(pi + linear[t]) as usize] - center).abs();
                }
            } else {
                for (t, &(ox, oy)) in offsets.iter().enumerate() {
                    a[t] = (before.get_mirrored(ii - ox, jj - oy) - center).abs();
                    b[t] = (after.get_mirrored(ii + ox, jj + oy) - center).abs();
                }
            }
            let mut best = f64::INFINITY;
            let (mut a_min, mut b_min) = (f64::INFINITY, f64::INFINITY);
            for t in 0..n {
                let same = pair_cost(gx, gy, offsets[t], offsets[t], a[t], b[t]);
                best = best.min(same);
                a_min = a_min.min(a[t]);
                b_min = b_min.min(b[t]);
            }
            let mut nb = 0;
            for t in 0..n {
                if a_min + b[t] < best {
                    cand_b[nb] = t;
                    nb += 1;
                }
            }
            for q1 in 0..n {
                let ap = a[q1];
                if ap + b_min >= best {
                    continue;
                }
                for &q2 in &cand_b[..nb] {
                    if ap + b[q2] >= best {
                        continue;
                    }
                    let v = pair_cost(gx, gy, offsets[q1], offsets[q2], ap, b[q2]);
                    if v < best {
                        best = v;
                    }
                }
            }
            out.set(i, j, best / scale);
        }
    }
    out
}

/// Assembles the semi-implicit system for one slice.
pub fn filter_system(current: &Frame, clt: &Frame, edges: &EdgeField, tau: f64, h: f64) -> StencilSystem {
    let scale = tau / (h * h);
    let coeffs = clt
        .data()
        .iter()
        .zip(&edges.g)
        .map(|(&c, g)| g.map(|gv| scale * c * gv))
        .collect();
    StencilSystem::new(current.width(), current.height(), coeffs, current.data().to_vec())
}

/// Per-slice bookkeeping of one outer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceStep {
    /// `Σᵢⱼ |u⁺ − u|` over the slice.
    pub change: f64,
    pub sor: SorStats,
}

fn slice_clt(frames: &[Frame], k: usize, params: &FilterParams) -> Frame {
    match params.force_clt {
        Some(c) => Frame::filled(frames[k].width(), frames[k].height(), c),
        None => clt_field(frames, k, params.rho, params.dtheta),
    }
}

fn step_slice(frames: &[Frame], k: usize, clt: &Frame, params: &FilterParams) -> Result<(Frame, SliceStep)> {
    let cur = &frames[k];
    let edges = match params.force_g {
        Some(g) => EdgeField::constant(cur.width(), cur.height(), g),
        None => EdgeField::from_frame(&presmooth(cur, params.sigma, params.h), params.k, params.h),
    };
    let system = filter_system(cur, clt, &edges, params.tau, params.h);
    let mut u = cur.data().to_vec();
    let sor = system.solve(&mut u, &params.sor)?;
    let next = Frame::from_vec(cur.width(), cur.height(), u)?;
    let change = next.l1_distance(cur);
    Ok((next, SliceStep { change, sor }))
}

fn outer_step_impl(
    frames: &[Frame],
    params: &FilterParams,
    frozen: Option<&[Frame]>,
) -> Result<(Vec<Frame>, Vec<SliceStep>)> {
    let results: Vec<Result<(Frame, SliceStep)>> = (0..frames.len())
        .into_par_iter()
        .map(|k| {
            let owned;
            let clt = match frozen {
                Some(f) => &f[k],
                None => {
                    owned = slice_clt(frames, k, params);
                    &owned
                }
            };
            step_slice(frames, k, clt, params)
        })
        .collect();
    let mut out = Vec::with_capacity(frames.len());
    let mut stats = Vec::with_capacity(frames.len());
    for r in results {
        let (f, s) = r?;
        out.push(f);
        stats.push(s);
    }
    Ok((out, stats))
}

/// One semi-implicit step `uⁿ → uⁿ⁺¹` for every slice.
pub fn filter_outer_step(frames: &[Frame], params: &FilterParams) -> Result<(Vec<Frame>, Vec<SliceStep>)> {
    params.validate()?;
    outer_step_impl(frames, params, None)
}

/// Outcome of [`filter_stack`].
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub stack: ImageStack,
    pub params: FilterParams,
    /// One entry per outer step, one [`SliceStep`] per slice.
    pub steps: Vec<Vec<SliceStep>>,
    pub converged: bool,
}

impl FilterRun {
    /// Plain-text run report.
    pub fn report(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        writeln!(s, "stage=filter").unwrap();
        writeln!(s, "tau_f={}", p.tau).unwrap();
        writeln!(s, "k={}", p.k).unwrap();
        writeln!(s, "sigma={}", p.sigma).unwrap();
        writeln!(s, "h={}", p.h).unwrap();
        writeln!(s, "rho={}", p.rho).unwrap();
        writeln!(s, "dtheta={}", p.dtheta).unwrap();
        writeln!(s, "outer_tol={}", p.outer_tol).unwrap();
        writeln!(s, "max_outer={}", p.max_outer).unwrap();
        writeln!(s, "sor_omega={}", p.sor.omega).unwrap();
        writeln!(s, "sor_tol={}", p.sor.tol).unwrap();
        writeln!(s, "freeze_clt={}", p.freeze_clt).unwrap();
        writeln!(s, "outer_iterations={}", self.steps.len()).unwrap();
        writeln!(s, "converged={}", self.converged).unwrap();
        for (n, step) in self.steps.iter().enumerate() {
            let changes: Vec<String> = step.iter().map(|x| format!("{:.6e}", x.change)).collect();
            let sweeps: Vec<String> = step.iter().map(|x| x.sor.sweeps.to_string()).collect();
            let residuals: Vec<String> = step.iter().map(|x| format!("{:.3e}", x.sor.residual)).collect();
            writeln!(s, "step{}.change={}", n + 1, changes.join(",")).unwrap();
            writeln!(s, "step{}.sor_sweeps={}", n + 1, sweeps.join(",")).unwrap();
            writeln!(s, "step{}.sor_residual={}", n + 1, residuals.join(",")).unwrap();
        }
        s
    }
}

/// Repeats [`filter_outer_step`] until every slice changes by less than
/// `outer_tol` (in the `Σ|Δu|` sense) or `max_outer` steps have run.
pub fn filter_stack(stack: &ImageStack, params: &FilterParams) -> Result<FilterRun> {
    params.validate()?;
    let mut frames = stack.frames().to_vec();
    let frozen: Option<Vec<Frame>> = if params.freeze_clt {
        Some(
            (0..frames.len())
                .into_par_iter()
                .map(|k| slice_clt(&frames, k, params))
                .collect(),
        )
    } else {
        None
    };
    let mut steps = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_outer {
        let (next, stats) = outer_step_impl(&frames, params, frozen.as_deref())?;
        frames = next;
        converged = stats.iter().all(|s| s.change < params.outer_tol);
        steps.push(stats);
        if converged {
            break;
        }
    }
    Ok(FilterRun {
        stack: stack.with_frames(frames, stack.range)?,
        params: params.clone(),
        steps,
        converged,
    })
}
