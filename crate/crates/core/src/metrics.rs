//! Segmentation and tracking quality measures.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::tracker::Trajectory;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean over `from` of the distance to the nearest point of `to`.
fn directed_mean(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Symmetrised mean nearest-neighbour distance between two point sets.
pub fn mean_hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    Ok((directed_mean(a, b) + directed_mean(b, a)) / 2.0)
}

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(())
}

/// `(|A ∩ B|, |A ∪ B|)` in pixels.
pub fn overlap_counts(a: &Mask, b: &Mask) -> Result<(usize, usize)> {
    check_dims(a, b)?;
    let mut inter = 0;
    let mut uni = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok((inter, uni))
}

/// Intersection over union; two empty masks agree perfectly and score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, uni) = overlap_counts(a, b)?;
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Dice coefficient; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, _) = overlap_counts(a, b)?;
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Mask pixels with at least one 4-neighbour outside the mask (pixels
/// beyond the image edge count as outside).
pub fn boundary_extract(mask: &Mask) -> Vec<[f64; 2]> {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let inside = |di: isize, dj: isize| mask.get_or_false(i as isize + di, j as isize + dj);
            if !(inside(1, 0) && inside(-1, 0) && inside(0, 1) && inside(0, -1)) {
                out.push([i as f64, j as f64]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStats {
    pub perimeter: f64,
    pub area: f64,
    pub circularity: f64,
}

/// Area as pixel count, perimeter as the number of exposed pixel edges,
/// both scaled by the pixel size `h`. The edge count overestimates the
/// perimeter of curved shapes, so circularity is only comparable between
/// masks measured the same way.
pub fn shape_stats(mask: &Mask, h: f64) -> Result<ShapeStats> {
    let (w, ht) = mask.dims();
    let mut area = 0usize;
    let mut edges = 0usize;
    for j in 0..ht {
        for i in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            area += 1;
            for (di, dj) in crate::sor::NEIGHBORS {
                if !mask.get_or_false(i as isize + di, j as isize + dj) {
                    edges += 1;
                }
            }
        }
    }
    if area == 0 {
        return Err(Error::Empty("mask"));
    }
    let area = area as f64 * h * h;
    let perimeter = edges as f64 * h;
    Ok(ShapeStats {
        perimeter,
        area,
        circularity: 4.0 * std::f64::consts::PI * area / (perimeter * perimeter),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryDistance {
    /// Mean Hausdorff distance between the two point sets.
    pub hausdorff: f64,
    /// Mean distance between the points on shared slices.
    pub mean_distance: f64,
    pub length_reference: f64,
    pub length_candidate: f64,
}

/// Compares a reference trajectory with a computed one.
pub fn trajectory_distance(reference: &Trajectory, candidate: &Trajectory) -> Result<TrajectoryDistance> {
    let pts = |t: &Trajectory| t.points.iter().map(|p| p.pos()).collect::<Vec<_>>();
    let hausdorff = mean_hausdorff(&pts(reference), &pts(candidate))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in &reference.points {
        if let Some(q) = candidate.at(p.theta) {
            sum += dist(p.pos(), q.pos());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoCommonSlices);
    }
    Ok(TrajectoryDistance {
        hausdorff,
        mean_distance: sum / n as f64,
        length_reference: reference.length(),
        length_candidate: candidate.length(),
    })
}

/// A forward link between two object identities. `None` marks an endpoint
/// that matches no reference object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectLink {
    pub theta: usize,
    pub theta_to: usize,
    pub from: Option<usize>,
    pub to: Option<usize>,
}

/// Links between consecutive observed points of reference trajectories,
/// identified by trajectory id.
pub fn reference_links(reference: &[Trajectory]) -> Vec<ObjectLink> {
    reference
        .iter()
        .flat_map(|t| {
            t.links().into_iter().map(move |(a, b)| ObjectLink {
                theta: a.theta,
                theta_to: b.theta,
                from: Some(t.id),
                to: Some(t.id),
            })
        })
        .collect()
}

/// Nearest reference object at slice `theta` within `radius`.
fn match_object(reference: &[Trajectory], theta: usize, pos: [f64; 2], radius: f64) -> Option<usize> {
    reference
        .iter()
        .filter_map(|t| t.at(theta).filter(|p| !p.estimated).map(|p| (dist(p.pos(), pos), t.id)))
        .filter(|&(d, _)| d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Identifies the endpoints of computed links with the nearest reference
/// object within `radius`.
pub fn label_links(computed: &[Trajectory], reference: &[Trajectory], radius: f64) -> Vec<ObjectLink> {
    computed
        .iter()
        .flat_map(|t| t.links())
        .map(|(a, b)| ObjectLink {
            theta: a.theta,
            theta_to: b.theta,
            from: match_object(reference, a.theta, a.pos(), radius),
            to: match_object(reference, b.theta, b.pos(), radius),
        })
        .collect()
}

/// Mean per-slice link accuracy. In each slice with links, accuracy is the
/// number of correct computed links divided by the number of true links
/// plus the number of wrong computed links, so both missing and spurious
/// links lower it. Slices without any link are skipped; with no links at
/// all the result is 1.
pub fn link_accuracy(computed: &[ObjectLink], truth: &[ObjectLink]) -> f64 {
    let truth_set: HashSet<&ObjectLink> = truth.iter().collect();
    // per slice: (true links, correct, wrong)
    let mut per: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for l in truth_set.iter() {
        per.entry(l.theta).or_default().0 += 1;
    }
    let mut seen = HashSet::new();
    for l in computed {
        let e = per.entry(l.theta).or_default();
        if truth_set.contains(l) && seen.insert(*l) {
            e.1 += 1;
        } else {
            e.2 += 1;
        }
    }
    let scores: Vec<f64> = per
        .values()
        .filter(|(t, _, w)| t + w > 0)
        .map(|&(t, c, w)| c as f64 / (t + w) as f64)
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Mean over reference points of the distance to the nearest computed
/// observed point at the same slice; `None` when no slice has both.
pub fn mean_center_error(computed: &[Trajectory], reference: &[Trajectory]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in reference {
        for p in r.points.iter().filter(|p| !p.estimated) {
            let best = computed
                .iter()
                .filter_map(|t| t.at(p.theta).filter(|q| !q.estimated))
                .map(|q| dist(p.pos(), q.pos()))
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                sum += best;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-slice segmentation comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEval {
    pub theta: usize,
    pub iou: f64,
    pub dice: f64,
    /// Mean Hausdorff distance of the boundaries; NaN if only one side is empty.
    pub hausdorff: f64,
    pub shape: Option<ShapeStats>,
}

pub fn evaluate_frame(theta: usize, reference: &Mask, computed: &Mask, h: f64) -> Result<FrameEval> {
    let (ba, bb) = (boundary_extract(reference), boundary_extract(computed));
    let hausdorff = match (ba.is_empty(), bb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => h * mean_hausdorff(&ba, &bb)?,
        _ => f64::NAN,
    };
    Ok(FrameEval {
        theta,
        iou: iou(reference, computed)?,
        dice: dice(reference, computed)?,
        hausdorff,
        shape: shape_stats(computed, h).ok(),
    })
}

/// Summary of trajectory comparison against a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEval {
    pub mean_accuracy: f64,
    pub mean_center_error: Option<f64>,
    /// Averages over reference trajectories of the comparison with their
    /// closest computed trajectory.
    pub hausdorff: f64,
    pub mean_distance: f64,
    pub length_reference: f64,
    pub length_candidate: f64,
    pub n_reference: usize,
    pub n_computed: usize,
}

/// Compares computed trajectories to a reference set. Each reference
/// trajectory is paired with the computed one of smallest mean distance.
pub fn evaluate_tracks(computed: &[Trajectory], reference: &[Trajectory], match_radius: f64) -> TrackEval {
    let truth = reference_links(reference);
    let labelled = label_links(computed, reference, match_radius);
    let mut acc = [0.0; 4];
    let mut n = 0usize;
    for r in reference {
        let best = computed
            .iter()
            .filter_map(|c| trajectory_distance(r, c).ok())
            .min_by(|a, b| a.mean_distance.total_cmp(&b.mean_distance));
        if let Some(d) = best {
            acc[0] += d.hausdorff;
            acc[1] += d.mean_distance;
            acc[2] += d.length_reference;
            acc[3] += d.length_candidate;
            n += 1;
        }
    }
    let avg = |x: f64| if n > 0 { x / n as f64 } else { f64::NAN };
    TrackEval {
        mean_accuracy: link_accuracy(&labelled, &truth),
        mean_center_error: mean_center_error(computed, reference),
        hausdorff: avg(acc[0]),
        mean_distance: avg(acc[1]),
        length_reference: avg(acc[2]),
        length_candidate: avg(acc[3]),
        n_reference: reference.len(),
        n_computed: computed.len(),
    }
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub tracks: Option<TrackEval>,
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn evaluate_masks(reference: &[Mask], computed: &[Mask], h: f64) -> Result<Vec<FrameEval>> {
        if reference.len() != computed.len() {
            return Err(Error::param(
                "eval",
                format!("{} reference slices but {} computed", reference.len(), computed.len()),
            ));
        }
        reference
            .iter()
            .zip(computed)
            .enumerate()
            .map(|(k, (r, c))| evaluate_frame(k, r, c, h))
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        mean_finite(self.frames.iter().map(|f| f.iou))
    }

    pub fn mean_dice(&self) -> f64 {
        mean_finite(self.frames.iter().map(|f| f.dice))
    }

    pub fn mean_hausdorff(&self) -> f64 {
        mean_finite(self.frames.iter().map(|f| f.hausdorff))
    }

    /// Plain-text `key=value` summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "stage=eval").unwrap();
        if !self.frames.is_empty() {
            writeln!(s, "slices={}", self.frames.len()).unwrap();
            writeln!(s, "mean_iou={:.6}", self.mean_iou()).unwrap();
            writeln!(s, "mean_dice={:.6}", self.mean_dice()).unwrap();
            writeln!(s, "mean_hausdorff={:.6}", self.mean_hausdorff()).unwrap();
        }
        if let Some(t) = &self.tracks {
            writeln!(s, "mean_accuracy={:.6}", t.mean_accuracy).unwrap();
            match t.mean_center_error {
                Some(e) => writeln!(s, "mean_center_error={e:.6}").unwrap(),
                None => writeln!(s, "mean_center_error=nan").unwrap(),
            }
            writeln!(s, "trajectory_hausdorff={:.6}", t.hausdorff).unwrap();
            writeln!(s, "trajectory_mean_distance={:.6}", t.mean_distance).unwrap();
            writeln!(s, "length_reference={:.6}", t.length_reference).unwrap();
            writeln!(s, "length_computed={:.6}", t.length_candidate).unwrap();
            writeln!(s, "n_reference={}", t.n_reference).unwrap();
            writeln!(s, "n_computed={}", t.n_computed).unwrap();
        }
        s
    }

    /// One CSV row per slice.
    pub fn write_frames_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["theta", "iou", "dice", "hausdorff", "perimeter", "area", "circularity"])?;
        for f in &self.frames {
            let (p, a, c) = f
                .shape
                .map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.perimeter, s.area, s.circularity));
            wtr.write_record([
                f.theta.to_string(),
                f.iou.to_string(),
                f.dice.to_string(),
                f.hausdorff.to_string(),
                p.to_string(),
                a.to_string(),
                c.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
