//! Trajectory extraction and linking.
//!
//! Partial trajectories are grown backwards in time through overlapping
//! regions: a region at slice `θ` continues into the region at `θ − 1`
//! that contains its centre, or failing that into the first region its own
//! pixels overlap. Every region feeds at most one trajectory.
//!
//! Partial trajectories are then joined in two passes. The first bridges
//! objects that moved too fast to overlap (or vanished for one slice) by
//! extrapolating the end tangents. The second merges fragments of one object
//! that were tracked in parallel for a few slices.

use std::fmt::Write as _;
use std::path::Path;

use crate::centers::{analyze_stack, drop_small_regions, EikonalParams, EikonalReport, SliceRegions};
use crate::error::{Error, Result};
use crate::grid::Mask;

/// One trajectory point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub theta: usize,
    pub x: f64,
    pub y: f64,
    /// Inserted by extrapolation across a gap rather than observed.
    pub estimated: bool,
    /// `(theta, label)` of the region this point is the centre of.
    pub source: Option<(usize, usize)>,
}

impl TrackPoint {
    pub fn observed(theta: usize, x: f64, y: f64, label: usize) -> Self {
        TrackPoint {
            theta,
            x,
            y,
            estimated: false,
            source: Some((theta, label)),
        }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// A time-ordered chain of points over consecutive slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub points: Vec<TrackPoint>,
}

/// Which end of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    /// Earliest point.
    Head,
    /// Latest point.
    Tail,
}

impl Trajectory {
    /// Builds a trajectory from `(x, y)` positions starting at slice `start`.
    pub fn from_positions(id: usize, start: usize, positions: &[[f64; 2]]) -> Self {
        Trajectory {
            id,
            points: positions
                .iter()
                .enumerate()
                .map(|(k, p)| TrackPoint {
                    theta: start + k,
                    x: p[0],
                    y: p[1],
                    estimated: false,
                    source: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> usize {
        self.points[0].theta
    }

    pub fn end(&self) -> usize {
        self.points[self.points.len() - 1].theta
    }

    /// Point at slice `theta`, if there is one. Computed trajectories are
/// contiguous; reference trajectories may skip slices.
    pub fn at(&self, theta: usize) -> Option<&TrackPoint> {
        if self.is_empty() || theta < self.start() || theta > self.end() {
            return None;
        }
        match self.points.get(theta - self.start()) {
            Some(p) if p.theta == theta => Some(p),
            _ => self
                .points
                .binary_search_by_key(&theta, |p| p.theta)
                .ok()
                .map(|k| &self.points[k]),
        }
    }

    /// Number of slices both trajectories cover.
    pub fn common_slices(&self, other: &Trajectory) -> usize {
        let lo = self.start().max(other.start());
        let hi = self.end().min(other.end());
        if hi >= lo {
            hi - lo + 1
        } else {
            0
        }
    }

    /// Consecutive observed points, skipping estimated ones.
    pub fn links(&self) -> Vec<(TrackPoint, TrackPoint)> {
        let real: Vec<&TrackPoint> = self.points.iter().filter(|p| !p.estimated).collect();
        real.windows(2).map(|w| (*w[0], *w[1])).collect()
    }

    /// Polyline length over all points.
    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .sum()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One-sided difference weights for the tangent, nearest point first.
fn tangent_weights(n: usize) -> &'static [f64] {
    match n {
        0 | 1 => &[],
        2 => &[1.0, -1.0],
        3 => &[1.5, -2.0, 0.5],
        _ => &[11.0 / 6.0, -3.0, 1.5, -1.0 / 3.0],
    }
}

/// Up to four points from the chosen end inwards.
fn end_points(traj: &Trajectory, end: End) -> Vec<[f64; 2]> {
    let n = traj.len().min(4);
    match end {
        End::Tail => traj.points.iter().rev().take(n).map(TrackPoint::pos).collect(),
        End::Head => traj.points.iter().take(n).map(TrackPoint::pos).collect(),
    }
}

/// Finite-difference tangent at one end: backward at the tail, forward at
/// the head, of order up to three depending on the available points. A
/// single point has zero tangent.
pub fn tangent(traj: &Trajectory, end: End, dtheta: f64) -> [f64; 2] {
    let pts = end_points(traj, end);
    let w = tangent_weights(pts.len());
    let sign = match end {
        End::Tail => 1.0,
        End::Head => -1.0,
    };
    let mut v = [0.0; 2];
    for (c, p) in w.iter().zip(&pts) {
        v[0] += c * p[0];
        v[1] += c * p[1];
    }
    [sign * v[0] / dtheta, sign * v[1] / dtheta]
}

/// Estimated position one slice beyond the chosen end, assuming the end
/// tangent stays the same there.
pub fn extrapolate(traj: &Trajectory, end: End, dtheta: f64) -> [f64; 2] {
    let pts = end_points(traj, end);
    let v = tangent(traj, end, dtheta);
    let sign = match end {
        End::Tail => 1.0,
        End::Head => -1.0,
    };
    let (vc, coeffs): (f64, &[f64]) = match pts.len() {
        1 => return pts[0],
        2 => (1.0, &[1.0]),
        3 => (2.0 / 3.0, &[4.0 / 3.0, -1.0 / 3.0]),
        _ => (6.0 / 11.0, &[18.0 / 11.0, -9.0 / 11.0, 2.0 / 11.0]),
    };
    let mut r = [sign * vc * v[0] * dtheta, sign * vc * v[1] * dtheta];
    for (c, p) in coeffs.iter().zip(&pts) {
        r[0] += c * p[0];
        r[1] += c * p[1];
    }
    r
}

/// Grows partial trajectories backwards through overlapping regions.
///
/// Slices are processed from the last one down. At each starting slice,
/// every region not yet used by a trajectory seeds a new one (in label
/// order); each open trajectory then steps back one slice at a time until
/// it finds no unused overlapping region.
pub fn extract_partial(slices: &[SliceRegions]) -> Vec<Trajectory> {
    let n = slices.len();
    if n == 0 {
        return Vec::new();
    }
    let mut claimed: Vec<Vec<bool>> = slices
        .iter()
        .map(|s| vec![false; s.labeling.regions.len()])
        .collect();
    // each chain lists (theta, label) from its latest slice backwards
    let mut chains: Vec<Vec<(usize, usize)>> = Vec::new();
    for theta_l in (0..n).rev() {
        let mut active: Vec<usize> = Vec::new();
        for label in 0..slices[theta_l].labeling.regions.len() {
            if !claimed[theta_l][label] {
                claimed[theta_l][label] = true;
                active.push(chains.len());
                chains.push(vec![(theta_l, label)]);
            }
        }
        for theta in (1..=theta_l).rev() {
            if active.is_empty() {
                break;
            }
            let prev = &slices[theta - 1];
            let cur = &slices[theta];
            active.retain(|&c| {
                let (_, label) = *chains[c].last().expect("chains are never empty");
                let (cx, cy) = cur.centers[label];
                let free = |i: usize, j: usize| {
                    prev.labeling
                        .region_at(i, j)
                        .filter(|&r| !claimed[theta - 1][r])
                };
                let next = free(cx, cy).or_else(|| {
                    cur.labeling.regions[label]
                        .pixels
                        .iter()
                        .find_map(|&(i, j)| free(i, j))
                });
                match next {
                    Some(r) => {
                        claimed[theta - 1][r] = true;
                        chains[c].push((theta - 1, r));
                        true
                    }
                    None => false,
                }
            });
        }
    }
    chains
        .into_iter()
        .enumerate()
        .map(|(id, chain)| Trajectory {
            id,
            points: chain
                .into_iter()
                .rev()
                .map(|(theta, label)| {
                    let (cx, cy) = slices[theta].centers[label];
                    TrackPoint::observed(theta, cx as f64, cy as f64, label)
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// First-pass radius `Δr` (pixels).
    pub dr: f64,
    /// Second-pass radius `Δr₂` (pixels).
    pub dr2: f64,
    /// Largest number of shared slices for a second-pass merge.
    pub dr_theta: usize,
    pub dtheta: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            dr: 30.0,
            dr2: 120.0,
            dr_theta: 5,
            dtheta: 1.0,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dr >= 0.0) {
            return Err(Error::param("track.dr", format!("{} must be non-negative", self.dr)));
        }
        if !(self.dr2 >= 0.0) {
            return Err(Error::param("track.dr2", format!("{} must be non-negative", self.dr2)));
        }
        if !(self.dtheta > 0.0) {
            return Err(Error::param("track.dtheta", format!("{} must be positive", self.dtheta)));
        }
        Ok(())
    }
}

/// A proposed join of `first` (earlier) and `second`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    first: usize,
    second: usize,
    /// Estimated point to insert in a one-slice gap.
    bridge: Option<[f64; 2]>,
}

/// Picks the candidate with the smallest distance; ties go to the lower
/// pair of trajectory ids.
fn best(cands: impl Iterator<Item = Candidate>, trajs: &[Trajectory]) -> Option<Candidate> {
    cands.min_by(|a, b| {
        a.distance.total_cmp(&b.distance).then_with(|| {
            let ka = (trajs[a.first].id.min(trajs[a.second].id), trajs[a.first].id.max(trajs[a.second].id));
            let kb = (trajs[b.first].id.min(trajs[b.second].id), trajs[b.first].id.max(trajs[b.second].id));
            ka.cmp(&kb)
        })
    })
}

fn pass1_candidate(a: &Trajectory, b: &Trajectory, p: &LinkParams) -> Option<(f64, Option<[f64; 2]>)> {
    let forward = extrapolate(a, End::Tail, p.dtheta);
    let backward = extrapolate(b, End::Head, p.dtheta);
    if b.start() == a.end() + 1 {
        let d_fwd = dist(forward, b.points[0].pos());
        let d_bwd = dist(backward, a.points[a.len() - 1].pos());
        let d = d_fwd.min(d_bwd);
        (d <= p.dr).then_some((d, None))
    } else if b.start() == a.end() + 2 {
        let d = dist(forward, backward);
        let mid = [0.5 * (forward[0] + backward[0]), 0.5 * (forward[1] + backward[1])];
        (d <= p.dr).then_some((d, Some(mid)))
    } else {
        None
    }
}

fn join_sequential(a: &Trajectory, b: &Trajectory, bridge: Option<[f64; 2]>) -> Trajectory {
    let mut points = a.points.clone();
    if let Some(m) = bridge {
        points.push(TrackPoint {
            theta: a.end() + 1,
            x: m[0],
            y: m[1],
            estimated: true,
            source: None,
        });
    }
    points.extend_from_slice(&b.points);
    Trajectory {
        id: a.id.min(b.id),
        points,
    }
}

/// First linking pass: joins trajectories whose ends are one or two slices
/// apart when the extrapolated position lands within `dr`. A one-slice gap
/// receives the midpoint of the two estimates as an estimated point.
/// The closest candidate is joined first, then candidates are recomputed.
pub fn link_pass1(mut trajs: Vec<Trajectory>, params: &LinkParams) -> Vec<Trajectory> {
    loop {
        let n = trajs.len();
        let cands = (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).filter(|&(x, y)| x != y);
        let found = best(
            cands.filter_map(|(x, y)| {
                pass1_candidate(&trajs[x], &trajs[y], params).map(|(distance, bridge)| Candidate {
                    distance,
                    first: x,
                    second: y,
                    bridge,
                })
            }),
            &trajs,
        );
        let Some(c) = found else {
            return trajs;
        };
        let joined = join_sequential(&trajs[c.first], &trajs[c.second], c.bridge);
        replace_pair(&mut trajs, c.first, c.second, joined);
    }
}

fn replace_pair(trajs: &mut Vec<Trajectory>, x: usize, y: usize, merged: Trajectory) {
    let (lo, hi) = if x < y { (x, y) } else { (y, x) };
    trajs.remove(hi);
    trajs[lo] = merged;
}

/// Merges two overlapping trajectories; on shared slices the longer one's
/// points are kept (the lower id on equal length).
pub fn merge_overlapping(a: &Trajectory, b: &Trajectory) -> Trajectory {
    let a_wins = (a.len(), std::cmp::Reverse(a.id)) >= (b.len(), std::cmp::Reverse(b.id));
    let (major, minor) = if a_wins { (a, b) } else { (b, a) };
    let lo = a.start().min(b.start());
    let hi = a.end().max(b.end());
    let points = (lo..=hi)
        .filter_map(|t| major.at(t).or_else(|| minor.at(t)).copied())
        .collect();
    Trajectory {
        id: a.id.min(b.id),
        points,
    }
}

fn pass2_candidate(a: &Trajectory, b: &Trajectory, p: &LinkParams) -> Option<f64> {
    let common = a.common_slices(b);
    if common == 0 || common > p.dr_theta {
        return None;
    }
    let mut best: Option<f64> = None;
    let mut consider = |est: [f64; 2], theta: Option<usize>| {
        if let Some(pt) = theta.and_then(|t| b.at(t)).filter(|pt| !pt.estimated) {
            let d = dist(est, pt.pos());
            if d <= p.dr2 && best.map_or(true, |x| d < x) {
                best = Some(d);
            }
        }
    };
    consider(extrapolate(a, End::Tail, p.dtheta), Some(a.end() + 1));
    consider(extrapolate(a, End::Head, p.dtheta), a.start().checked_sub(1));
    best
}

/// Second linking pass: an end estimate of one trajectory falls within
/// `dr2` of an observed point of another, and the two share between 1 and
/// `dr_theta` slices.
pub fn link_pass2(mut trajs: Vec<Trajectory>, params: &LinkParams) -> Vec<Trajectory> {
    loop {
        let n = trajs.len();
        let cands = (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).filter(|&(x, y)| x != y);
        let found = best(
            cands.filter_map(|(x, y)| {
                pass2_candidate(&trajs[x], &trajs[y], params).map(|distance| Candidate {
                    distance,
                    first: x,
                    second: y,
                    bridge: None,
                })
            }),
            &trajs,
        );
        let Some(c) = found else {
            return trajs;
        };
        let merged = merge_overlapping(&trajs[c.first], &trajs[c.second]);
        replace_pair(&mut trajs, c.first, c.second, merged);
    }
}

/// Orders trajectories by start slice, then first position, and numbers
/// them from 0.
pub fn renumber(mut trajs: Vec<Trajectory>) -> Vec<Trajectory> {
    trajs.sort_by(|a, b| {
        (a.start(), a.points[0].y, a.points[0].x)
            .partial_cmp(&(b.start(), b.points[0].y, b.points[0].x))
            .expect("finite coordinates")
    });
    for (k, t) in trajs.iter_mut().enumerate() {
        t.id = k;
    }
    trajs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    pub link: LinkParams,
    pub eikonal: EikonalParams,
    /// Regions with fewer pixels are ignored.
    pub min_area: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            link: LinkParams::default(),
            eikonal: EikonalParams::default(),
            min_area: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub n_partial: usize,
    pub n_after_pass1: usize,
    pub n_after_pass2: usize,
    /// Mean number of points per final trajectory.
    pub mean_length: f64,
    pub eikonal: EikonalReport,
}

impl TrackReport {
    /// Plain-text `key=value` report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "stage=track").unwrap();
        writeln!(s, "n_partial={}", self.n_partial).unwrap();
        writeln!(s, "n_after_pass1={}", self.n_after_pass1).unwrap();
        writeln!(s, "n_after_pass2={}", self.n_after_pass2).unwrap();
        writeln!(s, "mean_length={:.4}", self.mean_length).unwrap();
        writeln!(s, "eikonal_stop={}", self.eikonal.stop.as_str()).unwrap();
        writeln!(s, "eikonal_converged={}", self.eikonal.converged).unwrap();
        let max_iter = self.eikonal.iterations.iter().max().copied().unwrap_or(0);
        writeln!(s, "eikonal_max_iterations={max_iter}").unwrap();
        s
    }
}

/// Links already-extracted partial trajectories.
pub fn link_all(partial: Vec<Trajectory>, params: &LinkParams) -> (Vec<Trajectory>, usize) {
    let after1 = link_pass1(partial, params);
    let n1 = after1.len();
    (renumber(link_pass2(after1, params)), n1)
}

/// Full tracking of a mask stack: centres, partial trajectories, both
/// linking passes.
pub fn track(masks: &[Mask], params: &TrackParams) -> Result<(Vec<Trajectory>, TrackReport)> {
    params.link.validate()?;
    let cleaned: Vec<Mask>;
    let masks = if params.min_area > 1 {
        cleaned = masks.iter().map(|m| drop_small_regions(m, params.min_area)).collect();
        &cleaned[..]
    } else {
        masks
    };
    let (slices, eikonal) = analyze_stack(masks, &params.eikonal);
    let partial = extract_partial(&slices);
    let n_partial = partial.len();
    let (trajs, n1) = link_all(partial, &params.link);
    let mean_length = if trajs.is_empty() {
        0.0
    } else {
        trajs.iter().map(|t| t.len() as f64).sum::<f64>() / trajs.len() as f64
    };
    let report = TrackReport {
        n_partial,
        n_after_pass1: n1,
        n_after_pass2: trajs.len(),
        mean_length,
        eikonal,
    };
    Ok((trajs, report))
}

/// Writes `traj_id,theta,x,y,estimated`.
pub fn write_trajectories_csv(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["traj_id", "theta", "x", "y", "estimated"])?;
    for t in trajs {
        for p in &t.points {
            wtr.write_record([
                t.id.to_string(),
                p.theta.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                (p.estimated as u8).to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad trajectory row {:?}", rec),
        };
        let get = |k: usize| rec.get(k).map(str::trim).ok_or_else(bad);
        let id: usize = get(0)?.parse().map_err(|_| bad())?;
        let theta: usize = get(1)?.parse().map_err(|_| bad())?;
        let x: f64 = get(2)?.parse().map_err(|_| bad())?;
        let y: f64 = get(3)?.parse().map_err(|_| bad())?;
        let estimated = match get(4)? {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        let point = TrackPoint {
            theta,
            x,
            y,
            estimated,
            source: None,
        };
        match out.last_mut() {
            Some(t) if t.id == id => {
                if theta != t.end() + 1 {
                    return Err(bad());
                }
                t.points.push(point);
            }
            _ => out.push(Trajectory {
                id,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}
