//! Subjective-surface (SUBSURF) level-set evolution.
//!
//! Starting from a binary mask, the level-set function moves by regularised
//! mean curvature, slowed down by edges of the original image:
//!
//! ```text
//! u⁺ − u = (τ/h²) Q̄ Σₗₘ gˡᵐ (u⁺ₙ − u⁺) / Qˡᵐ
//! Qˡᵐ = √(ε² + |∇ˡᵐu|²),   Q̄ = √(ε² + ¼ Σₗₘ |∇ˡᵐu|²)
//! ```
//!
//! Isolated specks shrink away, notches fill in, and the evolved function
//! is cut at a level to give the cleaned mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::centers::label_regions;
use crate::grid::{BinaryStack, Frame, ImageStack, Mask};
use crate::sor::{SorParams, SorStats, StencilSystem};
use crate::stfilter::{diamond_gradients, presmooth, EdgeField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsurfParams {
    /// Scale step `τ_S`.
    pub tau: f64,
    /// Regularisation `ε²`.
    pub eps2: f64,
    /// Edge sensitivity on the original image.
    pub k: f64,
    /// Presmoothing variance on the original image.
    pub sigma: f64,
    pub h: f64,
    /// Stop once `Σ|u⁺ − u|` over the slice drops below this.
    pub stop_tol: f64,
    /// Upper bound on evolution steps per slice.
    pub max_steps: usize,
    pub sor: SorParams,
    /// Level at which the evolved function is cut.
    pub level: f64,
    /// Evolve only inside the bounding boxes of the mask components grown
    /// by this many pixels. `None` evolves the whole frame.
    pub margin: Option<usize>,
}

impl Default for SubsurfParams {
    fn default() -> Self {
        SubsurfParams {
            tau: 0.25,
            eps2: 1e-8,
            k: 10.0,
            sigma: 1.0,
            h: 1.0,
            stop_tol: 0.01,
            max_steps: 20,
            // speckled masks make for stiff systems that need more than the
            // usual 1000 sweeps
            sor: SorParams {
                max_sweeps: 5000,
                ..SorParams::default()
            },
            level: 0.5,
            margin: Some(12),
        }
    }
}

impl SubsurfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::param("subsurf.tau", format!("{} must be positive", self.tau)));
        }
        if !(self.eps2 > 0.0) {
            return Err(Error::param("subsurf.eps2", format!("{} must be positive", self.eps2)));
        }
        if !(self.k > 0.0) {
            return Err(Error::param("subsurf.k", format!("{} must be positive", self.k)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("subsurf.sigma", format!("{} must be non-negative", self.sigma)));
        }
        if !(self.h > 0.0) {
            return Err(Error::param("subsurf.h", format!("{} must be positive", self.h)));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::param("subsurf.stop_tol", format!("{} must be positive", self.stop_tol)));
        }
        self.sor.validate()
    }
}

/// Edge weights from the presmoothed original image.
pub fn subsurf_edge_field(original: &Frame, k: f64, sigma: f64, h: f64) -> EdgeField {
    EdgeField::from_frame(&presmooth(original, sigma, h), k, h)
}

/// Assembles the semi-implicit system for one step from `u`.
pub fn subsurf_system(u: &Frame, edges: &EdgeField, params: &SubsurfParams) -> StencilSystem {
    let (w, h) = u.dims();
    let scale = params.tau / (params.h * params.h);
    let mut coeffs = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let grads = diamond_gradients(u, i, j, params.h);
            let sq = grads.map(|[a, b]| a * a + b * b);
            let q_bar = (params.eps2 + 0.25 * sq.iter().sum::<f64>()).sqrt();
            let g = &edges.g[j * w + i];
            let mut a = [0.0; 4];
            for e in 0..4 {
                a[e] = scale * q_bar * g[e] / (params.eps2 + sq[e]).sqrt();
            }
            coeffs.push(a);
        }
    }
    StencilSystem::new(w, h, coeffs, u.data().to_vec())
}

/// One evolution step `uⁿ → uⁿ⁺¹`.
pub fn subsurf_step(u: &Frame, edges: &EdgeField, params: &SubsurfParams) -> Result<(Frame, SorStats)> {
    let system = subsurf_system(u, edges, params);
    let mut next = u.data().to_vec();
    let stats = system.solve(&mut next, &params.sor)?;
    Ok((Frame::from_vec(u.width(), u.height(), next)?, stats))
}

/// Per-slice summary of an evolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveStats {
    pub steps: usize,
    pub last_change: f64,
    pub converged: bool,
}

/// Evolves a level-set function until the per-step change falls below
/// `stop_tol` or `max_steps` is reached.
pub fn evolve_frame(initial: &Frame, edges: &EdgeField, params: &SubsurfParams) -> Result<(Frame, EvolveStats)> {
    let mut u = initial.clone();
    let mut stats = EvolveStats {
        steps: 0,
        last_change: f64::INFINITY,
        converged: false,
    };
    while stats.steps < params.max_steps {
        let (next, _) = subsurf_step(&u, edges, params)?;
        stats.last_change = next.l1_distance(&u);
        stats.steps += 1;
        u = next;
        if stats.last_change < params.stop_tol {
            stats.converged = true;
            break;
        }
    }
    Ok((u, stats))
}

/// Inclusive pixel rectangle `(i0, j0, i1, j1)`.
type Rect = (usize, usize, usize, usize);

/// Bounding boxes of the mask components grown by `margin`, with
/// overlapping boxes merged.
fn evolution_boxes(mask: &Mask, margin: usize) -> Vec<Rect> {
    let (w, h) = mask.dims();
    let mut boxes: Vec<Rect> = label_regions(mask)
        .iter()
        .map(|r| {
            let (i0, j0, i1, j1) = r.bbox();
            (
                i0.saturating_sub(margin),
                j0.saturating_sub(margin),
                (i1 + margin).min(w - 1),
                (j1 + margin).min(h - 1),
            )
        })
        .collect();
    let overlap = |a: &Rect, b: &Rect| a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3;
    loop {
        let mut merged = false;
        'outer: for x in 0..boxes.len() {
            for y in x + 1..boxes.len() {
                if overlap(&boxes[x], &boxes[y]) {
                    let b = boxes.swap_remove(y);
                    let a = &mut boxes[x];
                    *a = (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3));
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    boxes.sort_by_key(|b| (b.1, b.0));
    boxes
}

fn crop_frame(f: &Frame, r: Rect) -> Frame {
    Frame::from_fn(r.2 - r.0 + 1, r.3 - r.1 + 1, |i, j| f.get(r.0 + i, r.1 + j))
}

fn crop_edges(e: &EdgeField, r: Rect) -> EdgeField {
    let (w, h) = (r.2 - r.0 + 1, r.3 - r.1 + 1);
    let mut g = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            g.push(e.g[(r.1 + j) * e.width + r.0 + i]);
        }
    }
    EdgeField { width: w, height: h, g }
}

/// Evolves the level set started from `mask`, returning the final function.
///
/// With a margin set, each padded component box is solved as its own
/// zero-flux problem; all boxes advance in lockstep and stop on the summed
/// change, as a whole-frame run would.
pub fn evolve_mask(mask: &Mask, original: &Frame, params: &SubsurfParams) -> Result<(Frame, EvolveStats)> {
    params.validate()?;
    if mask.dims() != original.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            found: original.dims(),
        });
    }
    let (w, h) = mask.dims();
    if mask.is_blank() {
        let stats = EvolveStats {
            steps: 0,
            last_change: 0.0,
            converged: true,
        };
        return Ok((Frame::new(w, h), stats));
    }
    let edges = subsurf_edge_field(original, params.k, params.sigma, params.h);
    let full = mask.to_frame();
    let Some(margin) = params.margin else {
        return evolve_frame(&full, &edges, params);
    };
    let boxes = evolution_boxes(mask, margin);
    let box_edges: Vec<EdgeField> = boxes.iter().map(|&b| crop_edges(&edges, b)).collect();
    let mut us: Vec<Frame> = boxes.iter().map(|&b| crop_frame(&full, b)).collect();
    let mut stats = EvolveStats {
        steps: 0,
        last_change: f64::INFINITY,
        converged: false,
    };
    while stats.steps < params.max_steps {
        let mut change = 0.0;
        for (u, e) in us.iter_mut().zip(&box_edges) {
            let (next, _) = subsurf_step(u, e, params)?;
            change += next.l1_distance(u);
            *u = next;
        }
        stats.steps += 1;
        stats.last_change = change;
        if change < params.stop_tol {
            stats.converged = true;
            break;
        }
    }
    let mut out = Frame::new(w, h);
    for (u, b) in us.iter().zip(&boxes) {
        for j in 0..u.height() {
            for i in 0..u.width() {
                out.set(b.0 + i, b.1 + j, u.get(i, j));
            }
        }
    }
    Ok((out, stats))
}

/// Cleans one mask, with edges taken from `original`.
pub fn subsurf_mask(mask: &Mask, original: &Frame, params: &SubsurfParams) -> Result<(Mask, EvolveStats)> {
    let (u, stats) = evolve_mask(mask, original, params)?;
    Ok((u.threshold(params.level), stats))
}

/// Cleans every slice independently.
pub fn subsurf_evolve(masks: &[Mask], original: &ImageStack, params: &SubsurfParams) -> Result<BinaryStack> {
    Ok(subsurf_evolve_with_stats(masks, original, params)?.0)
}

pub fn subsurf_evolve_with_stats(
    masks: &[Mask],
    original: &ImageStack,
    params: &SubsurfParams,
) -> Result<(BinaryStack, Vec<EvolveStats>)> {
    params.validate()?;
    if masks.len() != original.len() {
        return Err(Error::param(
            "subsurf",
            format!("{} masks for {} slices", masks.len(), original.len()),
        ));
    }
    let results: Vec<Result<(Mask, EvolveStats)>> = masks
        .par_iter()
        .zip(original.frames().par_iter())
        .map(|(m, f)| subsurf_mask(m, f, params))
        .collect();
    let mut out = Vec::with_capacity(masks.len());
    let mut stats = Vec::with_capacity(masks.len());
    for r in results {
        let (m, s) = r?;
        out.push(m);
        stats.push(s);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::IntensityRange;
    use crate::sor::NEIGHBORS;
    use crate::stfilter::edge_detector;
    use proptest::prelude::*;

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(w, h, |i, j| (i as f64 - cx).hypot(j as f64 - cy) <= r)
    }

    #[test]
    fn constant_original_gives_unit_edges() {
        let e = subsurf_edge_field(&Frame::filled(6, 5, 0.4), 10.0, 1.0, 1.0);
        assert!(e.g.iter().all(|g| g.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn step_edge_lowers_g_only_near_the_step() {
        let f = Frame::from_fn(30, 10, |i, _| if i < 15 { 0.0 } else { 1.0 });
        let e = subsurf_edge_field(&f, 10.0, 1.0, 1.0);
        // direct evaluation on the presmoothed gradients
        let s = presmooth(&f, 1.0, 1.0);
        let grads = diamond_gradients(&s, 14, 5, 1.0);
        let expected = edge_detector(grads[0][0].hypot(grads[0][1]), 10.0);
        assert_eq!(e.g[5 * 30 + 14][0], expected);
        assert!(expected < 0.5);
        assert!(e.g[5 * 30 + 2].iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_level_set_is_stationary() {
        let u = Frame::filled(5, 5, 0.3);
        let e = EdgeField::constant(5, 5, 1.0);
        let (next, _) = subsurf_step(&u, &e, &SubsurfParams::default()).unwrap();
        assert_eq!(next, u);
    }

    #[test]
    fn dense_solve_agrees_on_four_by_four() {
        use nalgebra::{DMatrix, DVector};
        let u = Frame::from_fn(4, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let orig = Frame::from_fn(4, 4, |i, j| ((i + 2 * j) % 5) as f64 / 5.0);
        let params = SubsurfParams {
            eps2: 1e-2,
            sor: SorParams { tol: 1e-14, max_sweeps: 100_000, ..Default::default() },
            ..Default::default()
        };
        let edges = subsurf_edge_field(&orig, params.k, params.sigma, params.h);
        let (next, _) = subsurf_step(&u, &edges, &params).unwrap();

        let mut a = DMatrix::<f64>::zeros(16, 16);
        let mut rhs = DVector::<f64>::zeros(16);
        for j in 0..4 {
            for i in 0..4 {
                let p = j * 4 + i;
                let grads = diamond_gradients(&u, i, j, 1.0);
                let norms: Vec<f64> = grads.iter().map(|g| g[0] * g[0] + g[1] * g[1]).collect();
                let q_bar = (params.eps2 + norms.iter().sum::<f64>() / 4.0).sqrt();
                a[(p, p)] += 1.0;
                rhs[p] = u.get(i, j);
                for (e, &(l, m)) in NEIGHBORS.iter().enumerate() {
                    let (ni, nj) = (i as isize + l, j as isize + m);
                    if !(0..4).contains(&ni) || !(0..4).contains(&nj) {
                        continue;
                    }
                    let c = params.tau * q_bar * edges.g[p][e] / (params.eps2 + norms[e]).sqrt();
                    a[(p, p)] += c;
                    a[(p, nj as usize * 4 + ni as usize)] -= c;
                }
            }
        }
        let x = a.lu().solve(&rhs).unwrap();
        for p in 0..16 {
            assert!((x[p] - next.data()[p]).abs() < 1e-10, "pixel {p}");
        }
    }

    #[test]
    fn blank_mask_stays_blank() {
        let m = Mask::new(12, 9);
        let (out, _) = subsurf_mask(&m, &Frame::filled(12, 9, 0.5), &SubsurfParams::default()).unwrap();
        assert!(out.is_blank());
    }

    #[test]
    fn speckles_vanish_and_disc_survives() {
        let (w, h) = (64usize, 64usize);
        let truth = disc(w, h, 32.0, 32.0, 12.0);
        let mut noisy = truth.clone();
        let specks = [
            (3, 3), (60, 4), (5, 58), (58, 59), (10, 20), (20, 8), (50, 12), (12, 45), (45, 52), (55, 30),
            (4, 30), (30, 4), (30, 60), (60, 40), (15, 15), (50, 50), (8, 52), (54, 20), (22, 56), (40, 6),
        ];
        for &(i, j) in &specks {
            assert!(!truth.get(i, j));
            noisy.set(i, j, true);
        }
        let original = truth.to_frame();
        let (out, _) = subsurf_mask(&noisy, &original, &SubsurfParams::default()).unwrap();
        for &(i, j) in &specks {
            assert!(!out.get(i, j), "speck ({i},{j}) survived");
        }
        let (a, b) = (out.count() as f64, truth.count() as f64);
        assert!((a - b).abs() / b <= 0.1, "area {a} vs {b}");
    }

    #[test]
    fn boundary_notch_is_closed() {
        let (w, h) = (64usize, 64usize);
        let truth = disc(w, h, 32.0, 32.0, 12.0);
        let mut notched = truth.clone();
        notched.set(43, 32, false);
        notched.set(42, 32, false);
        let (out, _) = subsurf_mask(&notched, &truth.to_frame(), &SubsurfParams::default()).unwrap();
        assert!(out.get(43, 32) && out.get(42, 32));
    }

    #[test]
    fn slices_are_independent() {
        let masks = vec![disc(24, 24, 10.0, 12.0, 5.0), disc(24, 24, 14.0, 9.0, 6.0), Mask::new(24, 24)];
        let frames: Vec<Frame> = masks.iter().map(Mask::to_frame).collect();
        let stack = ImageStack::new(frames.clone(), 1.0, IntensityRange::Unit).unwrap();
        let out = subsurf_evolve(&masks, &stack, &SubsurfParams::default()).unwrap();
        let order = [2usize, 0, 1];
        let pm: Vec<Mask> = order.iter().map(|&k| masks[k].clone()).collect();
        let pf: Vec<Frame> = order.iter().map(|&k| frames[k].clone()).collect();
        let ps = ImageStack::new(pf, 1.0, IntensityRange::Unit).unwrap();
        let pout = subsurf_evolve(&pm, &ps, &SubsurfParams::default()).unwrap();
        for (pos, &k) in order.iter().enumerate() {
            assert_eq!(pout[pos], out[k]);
        }
    }

    #[test]
    fn unit_edges_never_grow_a_large_disc() {
        let (w, h) = (48usize, 48usize);
        let mut u = disc(w, h, 24.0, 24.0, 15.0).to_frame();
        let e = EdgeField::constant(w, h, 1.0);
        let params = SubsurfParams::default();
        let mut area = u.threshold(0.5).count();
        for _ in 0..8 {
            u = subsurf_step(&u, &e, &params).unwrap().0;
            let a = u.threshold(0.5).count();
            assert!(a <= area);
            area = a;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn step_obeys_maximum_principle(vals in proptest::collection::vec(0.0f64..1.0, 36), k in 0.1f64..20.0) {
            let u = Frame::from_vec(6, 6, vals).unwrap();
            let orig = Frame::from_fn(6, 6, |i, j| ((i * j) % 4) as f64 / 4.0);
            let params = SubsurfParams { k, ..Default::default() };
            let edges = subsurf_edge_field(&orig, params.k, params.sigma, params.h);
            let (next, _) = subsurf_step(&u, &edges, &params).unwrap();
            let (lo, hi) = u.min_max();
            let (a, b) = next.min_max();
            prop_assert!(a >= lo - 1e-6 && b <= hi + 1e-6);
        }
    }

    #[test]
    fn boxed_evolution_matches_whole_frame() {
        let (w, h) = (72usize, 60usize);
        let a = disc(w, h, 20.0, 20.0, 9.0);
        let b = disc(w, h, 50.0, 38.0, 7.0);
        let mut m = Mask::from_fn(w, h, |i, j| a.get(i, j) || b.get(i, j));
        m.set(5, 50, true);
        m.set(20, 21, false);
        let original = Frame::from_fn(w, h, |i, j| if a.get(i, j) || b.get(i, j) { 0.8 } else { 0.1 });
        let params = SubsurfParams { max_steps: 15, ..Default::default() };
        let (boxed, sb) = evolve_mask(&m, &original, &params).unwrap();
        let (full, sf) = evolve_mask(&m, &original, &SubsurfParams { margin: None, ..params }).unwrap();
        assert_eq!(sb.steps, sf.steps);
        let worst = boxed.data().iter().zip(full.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max deviation {worst}");
        assert_eq!(boxed.threshold(0.5), full.threshold(0.5));
    }
}
