//! Connected regions, in-region distance functions and region centres.
//!
//! The distance to the region boundary comes from the time-relaxed eikonal
//! equation `∂d/∂t + |∇d| = 1`, stepped explicitly with the Rouy–Tourin
//! upwind scheme. A region's centre is the pixel where that distance peaks,
//! which always lies inside the region even for non-convex shapes.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Frame, Mask};

/// Distance value marking pixels outside every region.
pub const BIG: f64 = 1e9;

/// One 8-connected component of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Zero-based label in row-major discovery order.
    pub label: usize,
    /// Member pixels `(i, j)` in row-major order.
    pub pixels: Vec<(usize, usize)>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Inclusive bounding box `(i_min, j_min, i_max, j_max)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        self.pixels.iter().fold(
            (usize::MAX, usize::MAX, 0, 0),
            |(a, b, c, d), &(i, j)| (a.min(i), b.min(j), c.max(i), d.max(j)),
        )
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Region membership of every pixel of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub width: usize,
    pub height: usize,
    /// `0` for background, `l + 1` for region `l`.
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl Labeling {
    /// 8-connected labelling by union–find.
    pub fn new(mask: &Mask) -> Self {
        let (w, h) = mask.dims();
        let mut parent: Vec<usize> = (0..w * h).collect();
        for j in 0..h {
            for i in 0..w {
                if !mask.get(i, j) {
                    continue;
                }
                let p = j * w + i;
                // already-visited neighbours: W, NW, N, NE
                let (ii, jj) = (i as isize, j as isize);
                for (di, dj) in [(-1, 0), (-1, -1), (0, -1), (1, -1)] {
                    if mask.get_or_false(ii + di, jj + dj) {
                        let q = (jj + dj) as usize * w + (ii + di) as usize;
                        union(&mut parent, p, q);
                    }
                }
            }
        }
        let mut labels = vec![0u32; w * h];
        let mut root_label = vec![u32::MAX; w * h];
        let mut regions: Vec<Region> = Vec::new();
        for j in 0..h {
            for i in 0..w {
                if !mask.get(i, j) {
                    continue;
                }
                let p = j * w + i;
                let r = find(&mut parent, p);
                if root_label[r] == u32::MAX {
                    root_label[r] = regions.len() as u32;
                    regions.push(Region {
                        label: regions.len(),
                        pixels: Vec::new(),
                    });
                }
                let l = root_label[r];
                labels[p] = l + 1;
                regions[l as usize].pixels.push((i, j));
            }
        }
        Labeling {
            width: w,
            height: h,
            labels,
            regions,
        }
    }

    /// Region containing `(i, j)`, if any.
    #[inline]
    pub fn region_at(&self, i: usize, j: usize) -> Option<usize> {
        match self.labels[j * self.width + i] {
            0 => None,
            l => Some(l as usize - 1),
        }
    }
}

/// 8-connected components in row-major discovery order.
pub fn label_regions(mask: &Mask) -> Vec<Region> {
    Labeling::new(mask).regions
}

/// Removes regions smaller than `min_area` pixels.
pub fn drop_small_regions(mask: &Mask, min_area: usize) -> Mask {
    if min_area <= 1 {
        return mask.clone();
    }
    let mut out = mask.clone();
    for r in label_regions(mask) {
        if r.area() < min_area {
            for &(i, j) in &r.pixels {
                out.set(i, j, false);
            }
        }
    }
    out
}

/// When the eikonal iteration stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMode {
    /// Total update summed over all slices.
    Joint,
    /// Each slice on its own total update.
    PerSlice,
}

impl StopMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopMode::Joint => "joint",
            StopMode::PerSlice => "per_slice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EikonalParams {
    /// Pixel side `h`; the time step is `h/2`.
    pub h: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub stop: StopMode,
}

impl Default for EikonalParams {
    fn default() -> Self {
        EikonalParams {
            h: 1.0,
            tol: 1e-3,
            max_iter: 100_000,
            stop: StopMode::Joint,
        }
    }
}

/// Explicit solver state for one slice.
struct EikonalSlice {
    width: usize,
    height: usize,
    d: Vec<f64>,
    /// Pixels updated by the scheme (inside a region, not on its boundary).
    interior: Vec<usize>,
    scratch: Vec<f64>,
}

impl EikonalSlice {
    fn new(mask: &Mask) -> Self {
        let (w, h) = mask.dims();
        let d: Vec<f64> = mask.data().iter().map(|&b| if b { 0.0 } else { BIG }).collect();
        let mut interior = Vec::new();
        for j in 0..h {
            for i in 0..w {
                let (ii, jj) = (i as isize, j as isize);
                // neighbours outside the image count as outside the region
                if mask.get(i, j)
                    && mask.get_or_false(ii + 1, jj)
                    && mask.get_or_false(ii - 1, jj)
                    && mask.get_or_false(ii, jj + 1)
                    && mask.get_or_false(ii, jj - 1)
                {
                    interior.push(j * w + i);
                }
            }
        }
        let scratch = vec![0.0; interior.len()];
        EikonalSlice {
            width: w,
            height: h,
            d,
            interior,
            scratch,
        }
    }

    /// One explicit step; returns `Σ|dⁿ⁺¹ − dⁿ|`.
    fn step(&mut self, h: f64) -> f64 {
        let tau = 0.5 * h;
        let w = self.width;
        let d = &self.d;
        for (slot, &p) in self.scratch.iter_mut().zip(&self.interior) {
            let c = d[p];
            let sq = |nb: f64| {
                let v = (nb - c).min(0.0);
                v * v
            };
            let mx = sq(d[p - 1]).max(sq(d[p + 1]));
            let my = sq(d[p - w]).max(sq(d[p + w]));
            *slot = c + tau - tau / h * (mx + my).sqrt();
        }
        let mut change = 0.0;
        for (&v, &p) in self.scratch.iter().zip(&self.interior) {
            change += (v - self.d[p]).abs();
            self.d[p] = v;
        }
        change
    }

    fn into_frame(self) -> Frame {
        Frame::from_vec(self.width, self.height, self.d).expect("consistent dimensions")
    }
}

/// Outcome of a distance computation over a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EikonalReport {
    pub stop: StopMode,
    /// Iterations used per slice.
    pub iterations: Vec<usize>,
    pub converged: bool,
}

/// In-region distance to the region boundary for one slice. Pixels outside
/// every region hold [`BIG`]; boundary pixels hold 0.
pub fn eikonal_distance(mask: &Mask, params: &EikonalParams) -> Frame {
    let mut s = EikonalSlice::new(mask);
    for _ in 0..params.max_iter {
        if s.step(params.h) < params.tol {
            break;
        }
    }
    s.into_frame()
}

/// Distance fields for every slice, stopping as `params.stop` prescribes.
pub fn distance_stack(masks: &[Mask], params: &EikonalParams) -> (Vec<Frame>, EikonalReport) {
    let mut slices: Vec<EikonalSlice> = masks.par_iter().map(EikonalSlice::new).collect();
    let n = slices.len();
    let (iterations, converged) = match params.stop {
        StopMode::Joint => {
            let mut iters = 0;
            let mut converged = false;
            while iters < params.max_iter {
                let changes: Vec<f64> = slices.par_iter_mut().map(|s| s.step(params.h)).collect();
                iters += 1;
                if changes.iter().sum::<f64>() < params.tol {
                    converged = true;
                    break;
                }
            }
            (vec![iters; n], converged)
        }
        StopMode::PerSlice => {
            let res: Vec<(usize, bool)> = slices
                .par_iter_mut()
                .map(|s| {
                    for it in 1..=params.max_iter {
                        if s.step(params.h) < params.tol {
                            return (it, true);
                        }
                    }
                    (params.max_iter, false)
                })
                .collect();
            let converged = res.iter().all(|r| r.1);
            (res.into_iter().map(|r| r.0).collect(), converged)
        }
    };
    let frames = slices.into_iter().map(EikonalSlice::into_frame).collect();
    (
        frames,
        EikonalReport {
            stop: params.stop,
            iterations,
            converged,
        },
    )
}

/// Pixel of maximal distance in the region; the first in row-major order
/// wins ties.
pub fn region_center(distance: &Frame, region: &Region) -> (usize, usize) {
    let mut best = region.pixels[0];
    let mut best_d = distance.get(best.0, best.1);
    for &(i, j) in &region.pixels[1..] {
        let v = distance.get(i, j);
        if v > best_d {
            best_d = v;
            best = (i, j);
        }
    }
    best
}

/// Regions, distances and centres of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRegions {
    pub labeling: Labeling,
    pub distance: Frame,
    /// Centre of each region, indexed by label.
    pub centers: Vec<(usize, usize)>,
}

impl SliceRegions {
    #[inline]
    pub fn inside(&self, i: usize, j: usize) -> bool {
        self.distance.get(i, j) != BIG
    }
}

/// Labels, distance fields and centres for a whole mask stack.
pub fn analyze_stack(masks: &[Mask], params: &EikonalParams) -> (Vec<SliceRegions>, EikonalReport) {
    let (distances, report) = distance_stack(masks, params);
    let slices = masks
        .par_iter()
        .zip(distances.into_par_iter())
        .map(|(m, d)| {
            let labeling = Labeling::new(m);
            let centers = labeling.regions.iter().map(|r| region_center(&d, r)).collect();
            SliceRegions {
                labeling,
                distance: d,
                centers,
            }
        })
        .collect();
    (slices, report)
}

/// One row of the centres table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenterRecord {
    pub theta: usize,
    pub label: usize,
    pub cx: usize,
    pub cy: usize,
    pub area: usize,
}

pub fn center_records(slices: &[SliceRegions]) -> Vec<CenterRecord> {
    slices
        .iter()
        .enumerate()
        .flat_map(|(theta, s)| {
            s.labeling.regions.iter().map(move |r| CenterRecord {
                theta,
                label: r.label,
                cx: s.centers[r.label].0,
                cy: s.centers[r.label].1,
                area: r.area(),
            })
        })
        .collect()
}

/// Writes `theta,label,cx,cy,area`.
pub fn write_centers_csv(path: &Path, records: &[CenterRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["theta", "label", "cx", "cy", "area"])?;
    for r in records {
        wtr.write_record([
            r.theta.to_string(),
            r.label.to_string(),
            r.cx.to_string(),
            r.cy.to_string(),
            r.area.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_centers_csv(path: &Path) -> Result<Vec<CenterRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("bad field {k} in {:?}", rec),
                })
        };
        out.push(CenterRecord {
            theta: field(0)?,
            label: field(1)?,
            cx: field(2)?,
            cy: field(3)?,
            area: field(4)?,
        });
    }
    Ok(out)
}

/// Writes a distance field as plain text (one row per line), `BIG` as `inf`.
pub fn write_distance_text(out: &mut impl Write, d: &Frame) -> std::io::Result<()> {
    for j in 0..d.height() {
        let row: Vec<String> = (0..d.width())
            .map(|i| {
                let v = d.get(i, j);
                if v == BIG {
                    "inf".to_string()
                } else {
                    format!("{v:.4}")
                }
            })
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn flood_fill_partition(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = mask.dims();
        let mut seen = vec![false; w * h];
        let mut parts = Vec::new();
        for j in 0..h {
            for i in 0..w {
                if !mask.get(i, j) || seen[j * w + i] {
                    continue;
                }
                let mut part = Vec::new();
                let mut q = VecDeque::from([(i, j)]);
                seen[j * w + i] = true;
                while let Some((x, y)) = q.pop_front() {
                    part.push((x, y));
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if mask.get_or_false(nx, ny) && !seen[ny as usize * w + nx as usize] {
                                seen[ny as usize * w + nx as usize] = true;
                                q.push_back((nx as usize, ny as usize));
                            }
                        }
                    }
                }
                part.sort_by_key(|&(x, y)| (y, x));
                parts.push(part);
            }
        }
        parts
    }

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(w, h, |i, j| (i as f64 - cx).hypot(j as f64 - cy) <= r)
    }

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(label_regions(&Mask::new(7, 5)).is_empty());
    }

    #[test]
    fn separated_discs_are_two_regions() {
        let a = disc(40, 20, 8.0, 10.0, 5.0);
        let b = disc(40, 20, 25.0, 10.0, 5.0);
        let m = Mask::from_fn(40, 20, |i, j| a.get(i, j) || b.get(i, j));
        let r = label_regions(&m);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].area(), a.count());
    }

    #[test]
    fn diagonal_touch_joins_regions() {
        let m = Mask::from_fn(4, 4, |i, j| (i, j) == (1, 1) || (i, j) == (2, 2));
        assert_eq!(label_regions(&m).len(), 1);
    }

    #[test]
    fn single_pixel_distance_is_zero() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let d = eikonal_distance(&m, &EikonalParams::default());
        assert_eq!(d.get(2, 2), 0.0);
        assert_eq!(d.get(0, 0), BIG);
    }

    #[test]
    fn three_by_three_square_center_value() {
        let m = Mask::from_fn(7, 7, |i, j| (2..=4).contains(&i) && (2..=4).contains(&j));
        for h in [1.0, 0.5] {
            let d = eikonal_distance(&m, &EikonalParams { h, ..Default::default() });
            // fixed point of d = d + h/2 − (1/2)·√(2d²)
            assert!((d.get(3, 3) - h / 2f64.sqrt()).abs() < 1e-3);
            assert_eq!(d.get(2, 3), 0.0);
            let r = &label_regions(&m)[0];
            assert_eq!(region_center(&d, r), (3, 3));
        }
    }

    #[test]
    fn disc_distance_close_to_exact() {
        let h = 1.0;
        let m = disc(60, 60, 30.0, 30.0, 20.0);
        let d = eikonal_distance(&m, &EikonalParams { h, ..Default::default() });
        let boundary: Vec<(usize, usize)> = m
            .pixels()
            .filter(|&(i, j)| {
                let (ii, jj) = (i as isize, j as isize);
                [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|&(a, b)| !m.get_or_false(ii + a, jj + b))
            })
            .collect();
        let mut worst: f64 = 0.0;
        for (i, j) in m.pixels() {
            let exact = boundary
                .iter()
                .map(|&(a, b)| (a as f64 - i as f64).hypot(b as f64 - j as f64))
                .fold(f64::INFINITY, f64::min)
                * h;
            worst = worst.max((d.get(i, j) - exact).abs());
        }
        assert!(worst <= 2.0 * h, "max error {worst}");
        let r = &label_regions(&m)[0];
        assert_eq!(region_center(&d, r), (30, 30));
    }

    #[test]
    fn dumbbell_tie_picks_row_major_first() {
        // two identical 3×3 blocks joined by a one-pixel bridge
        let m = Mask::from_fn(11, 5, |i, j| {
            ((1..=3).contains(&i) && (1..=3).contains(&j)) || ((7..=9).contains(&i) && (1..=3).contains(&j)) || (j == 2 && (4..=6).contains(&i))
        });
        let d = eikonal_distance(&m, &EikonalParams::default());
        let r = &label_regions(&m)[0];
        assert_eq!(d.get(2, 2), d.get(8, 2));
        assert_eq!(region_center(&d, r), (2, 2));
    }

    #[test]
    fn joint_and_per_slice_modes_are_recorded() {
        let masks = vec![disc(30, 30, 15.0, 15.0, 8.0), disc(30, 30, 12.0, 14.0, 4.0)];
        for stop in [StopMode::Joint, StopMode::PerSlice] {
            let (d, rep) = distance_stack(&masks, &EikonalParams { stop, ..Default::default() });
            assert_eq!(rep.stop, stop);
            assert!(rep.converged);
            let single = eikonal_distance(&masks[0], &EikonalParams::default());
            for (a, b) in d[0].data().iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn centers_csv_round_trip() {
        let masks = vec![disc(20, 20, 6.0, 6.0, 3.0), Mask::new(20, 20)];
        let (slices, _) = analyze_stack(&masks, &EikonalParams::default());
        let recs = center_records(&slices);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("centers.csv");
        write_centers_csv(&p, &recs).unwrap();
        assert_eq!(read_centers_csv(&p).unwrap(), recs);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("theta,label,cx,cy,area"));
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        (2usize..14, 2usize..14).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::bool::weighted(0.45), w * h)
                .prop_map(move |v| Mask::from_vec(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn labeling_matches_flood_fill(m in mask_strategy()) {
            let regions = label_regions(&m);
            let parts = flood_fill_partition(&m);
            let got: Vec<Vec<(usize, usize)>> = regions.into_iter().map(|r| r.pixels).collect();
            prop_assert_eq!(got, parts);
        }

        #[test]
        fn centers_lie_inside_and_big_never_leaks(m in mask_strategy()) {
            let d = eikonal_distance(&m, &EikonalParams::default());
            for r in label_regions(&m) {
                let c = region_center(&d, &r);
                prop_assert!(m.get(c.0, c.1));
                for &(i, j) in &r.pixels {
                    prop_assert!(d.get(i, j) < BIG && d.get(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn growth_never_lowers_distance(m in mask_strategy(), extra in proptest::collection::vec(any::<bool>(), 196)) {
            let (w, h) = m.dims();
            let grown = Mask::from_fn(w, h, |i, j| m.get(i, j) || extra[(j * w + i) % extra.len()]);
            let p = EikonalParams { tol: 1e-12, ..Default::default() };
            let d0 = eikonal_distance(&m, &p);
            let d1 = eikonal_distance(&grown, &p);
            for (i, j) in m.pixels() {
                prop_assert!(d1.get(i, j) >= d0.get(i, j) - 1e-9);
            }
        }
    }
}
