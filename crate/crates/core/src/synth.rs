//! Synthetic moving-object stacks with exact ground truth.
//!
//! Each mover is a bright disc travelling at constant velocity. It can
//! vanish on chosen slices (gaps) or split into two half-discs 3 px apart
//! (fragments). Intensities use a one-pixel soft edge; reference masks use
//! centre-in-circle rasterisation. Noise is uniform and clamped to `[0, 1]`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Frame, ImageStack, IntensityRange, Mask};
use crate::metrics::{reference_links, ObjectLink};
use crate::tracker::{TrackPoint, Trajectory};

/// Half the distance between the two pieces of a fragmented disc.
const FRAGMENT_HALF_GAP: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MoverSpec {
    /// Centre at slice 0 (pixels).
    pub start: [f64; 2],
    /// Displacement per slice (pixels).
    pub velocity: [f64; 2],
    pub radius: f64,
    /// Disc intensity in `[0, 1]`.
    pub intensity: f64,
    /// Slices on which the mover is not drawn.
    pub gaps: BTreeSet<usize>,
    /// Slices on which the disc is split in two.
    pub fragments: BTreeSet<usize>,
}

impl Default for MoverSpec {
    fn default() -> Self {
        MoverSpec {
            start: [0.0, 0.0],
            velocity: [0.0, 0.0],
            radius: 10.0,
            intensity: 0.8,
            gaps: BTreeSet::new(),
            fragments: BTreeSet::new(),
        }
    }
}

impl MoverSpec {
    pub fn center(&self, theta: usize) -> [f64; 2] {
        let t = theta as f64;
        [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t]
    }

    pub fn visible(&self, theta: usize) -> bool {
        !self.gaps.contains(&theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    /// Background intensity before noise.
    pub background: f64,
}

impl Default for Domain {
    fn default() -> Self {
        Domain {
            width: 512,
            height: 512,
            slices: 60,
            background: 0.1,
        }
    }
}

/// Generated stack with its reference data.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub stack: ImageStack,
    pub masks: Vec<Mask>,
    /// One trajectory per mover, id = mover index, without gap slices.
    pub trajectories: Vec<Trajectory>,
    pub links: Vec<ObjectLink>,
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Coverage of pixel `(x, y)` by the mover at slice `theta`, and whether
/// the pixel centre lies inside it.
fn coverage(m: &MoverSpec, theta: usize, x: f64, y: f64) -> (f64, bool) {
    let [cx, cy] = m.center(theta);
    let r = m.radius;
    if !m.fragments.contains(&theta) {
        let d = (x - cx).hypot(y - cy);
        return (clamp01(r + 0.5 - d), d <= r);
    }
    // two half-discs, moved apart along x
    let left_c = cx - FRAGMENT_HALF_GAP;
    let right_c = cx + FRAGMENT_HALF_GAP;
    let dl = (x - left_c).hypot(y - cy);
    let dr = (x - right_c).hypot(y - cy);
    let left = clamp01(r + 0.5 - dl) * clamp01(left_c - x + 0.5);
    let right = clamp01(r + 0.5 - dr) * clamp01(x - right_c + 0.5);
    let inside = (dl <= r && x < left_c) || (dr <= r && x >= right_c);
    (left.max(right), inside)
}

fn check_domain(specs: &[MoverSpec], domain: &Domain) -> Result<()> {
    if domain.width == 0 || domain.height == 0 || domain.slices == 0 {
        return Err(Error::param("synth.domain", "width, height and slices must be positive".to_string()));
    }
    for (k, m) in specs.iter().enumerate() {
        if !(m.radius > 0.0) {
            return Err(Error::param("synth.radius", format!("mover {k}: radius {} must be positive", m.radius)));
        }
        for theta in (0..domain.slices).filter(|&t| m.visible(t)) {
            let [cx, cy] = m.center(theta);
            let reach = m.radius + if m.fragments.contains(&theta) { FRAGMENT_HALF_GAP } else { 0.0 };
            let inside = cx - reach >= 0.0
                && cy - m.radius >= 0.0
                && cx + reach <= (domain.width - 1) as f64
                && cy + m.radius <= (domain.height - 1) as f64;
            if !inside {
                return Err(Error::OutOfDomain { mover: k, theta });
            }
        }
    }
    Ok(())
}

/// Renders the movers and their reference data. The same seed always
/// gives the same stack, whatever the thread count.
pub fn generate(specs: &[MoverSpec], domain: &Domain, noise: f64, seed: u64) -> Result<SynthOutput> {
    check_domain(specs, domain)?;
    if !(noise >= 0.0) {
        return Err(Error::param("synth.noise", format!("{noise} must be non-negative")));
    }
    let (w, h) = (domain.width, domain.height);
    let slices: Vec<(Frame, Mask)> = (0..domain.slices)
        .into_par_iter()
        .map(|theta| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(theta as u64);
            let mut frame = Frame::filled(w, h, domain.background);
            let mut mask = Mask::new(w, h);
            for m in specs.iter().filter(|m| m.visible(theta)) {
                let [cx, cy] = m.center(theta);
                let pad = m.radius + FRAGMENT_HALF_GAP + 2.0;
                let i0 = (cx - pad).floor().max(0.0) as usize;
                let j0 = (cy - pad).floor().max(0.0) as usize;
                let i1 = ((cx + pad).ceil() as usize).min(w - 1);
                let j1 = ((cy + pad).ceil() as usize).min(h - 1);
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        let (c, inside) = coverage(m, theta, i as f64, j as f64);
                        if c > 0.0 {
                            let v = frame.get(i, j);
                            frame.set(i, j, v + (m.intensity - v) * c);
                        }
                        if inside {
                            mask.set(i, j, true);
                        }
                    }
                }
            }
            if noise > 0.0 {
                for v in frame.data_mut() {
                    *v = clamp01(*v + rng.gen_range(-noise..=noise));
                }
            }
            (frame, mask)
        })
        .collect();
    let (frames, masks): (Vec<Frame>, Vec<Mask>) = slices.into_iter().unzip();
    let trajectories: Vec<Trajectory> = specs
        .iter()
        .enumerate()
        .map(|(k, m)| Trajectory {
            id: k,
            points: (0..domain.slices)
                .filter(|&t| m.visible(t))
                .map(|t| {
                    let [x, y] = m.center(t);
                    TrackPoint {
                        theta: t,
                        x,
                        y,
                        estimated: false,
                        source: None,
                    }
                })
                .collect(),
        })
        .filter(|t| !t.is_empty())
        .collect();
    let links = reference_links(&trajectories);
    Ok(SynthOutput {
        stack: ImageStack::new(frames, 1.0, IntensityRange::Unit)?,
        masks,
        trajectories,
        links,
    })
}

/// Five movers on a 512×512 domain over 60 slices: two of them vanish for
/// a single slice each, at different times. Discs stay more than 20 px
/// apart at all times.
pub fn five_movers() -> (Vec<MoverSpec>, Domain) {
    let m = |start: [f64; 2], velocity: [f64; 2], radius: f64, intensity: f64, gaps: &[usize]| MoverSpec {
        start,
        velocity,
        radius,
        intensity,
        gaps: gaps.iter().copied().collect(),
        fragments: BTreeSet::new(),
    };
    (
        vec![
            m([60.0, 60.0], [6.0, 1.0], 14.0, 0.8, &[]),
            m([450.0, 100.0], [-5.0, 3.0], 12.0, 0.7, &[]),
            m([80.0, 420.0], [5.0, -1.0], 16.0, 0.9, &[20]),
            m([300.0, 470.0], [0.0, -5.0], 13.0, 0.75, &[35]),
            m([470.0, 450.0], [-4.0, -3.0], 15.0, 0.85, &[]),
        ],
        Domain::default(),
    )
}

fn parse_slices(value: &str) -> std::result::Result<BTreeSet<usize>, String> {
    let mut out = BTreeSet::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("bad slice index {s:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(parse(part)?);
            }
        }
    }
    Ok(out)
}

fn parse_pair(value: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.parse().map_err(|_| format!("bad number {a:?}"))?,
            b.parse().map_err(|_| format!("bad number {b:?}"))?,
        ]),
        _ => Err(format!("expected two comma-separated numbers, got {value:?}")),
    }
}

/// Parses mover blocks: `key=value` lines, blocks separated by blank
/// lines, `#` starts a comment. Keys: `start=x,y`, `velocity=vx,vy`,
/// `radius`, `intensity`, `gaps` and `fragments` (comma lists with
/// `a-b` ranges).
pub fn parse_movers(text: &str) -> Result<Vec<MoverSpec>> {
    use crate::config::ConfigError;
    let mut specs = Vec::new();
    let mut current: Option<MoverSpec> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            specs.extend(current.take());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
            line: n + 1,
            text: raw.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let m = current.get_or_insert_with(MoverSpec::default);
        let invalid = |reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            reason,
        };
        let number = || value.parse::<f64>().map_err(|_| invalid(format!("bad number {value:?}")));
        match key {
            "start" => m.start = parse_pair(value).map_err(invalid)?,
            "velocity" => m.velocity = parse_pair(value).map_err(invalid)?,
            "radius" => m.radius = number()?,
            "intensity" => m.intensity = number()?,
            "gaps" => m.gaps = parse_slices(value).map_err(invalid)?,
            "fragments" => m.fragments = parse_slices(value).map_err(invalid)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: n + 1,
                }
                .into())
            }
        }
    }
    specs.extend(current);
    Ok(specs)
}

fn format_slices(s: &BTreeSet<usize>) -> String {
    s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// Inverse of [`parse_movers`].
pub fn format_movers(specs: &[MoverSpec]) -> String {
    specs
        .iter()
        .map(|m| {
            let mut s = format!(
                "start={},{}\nvelocity={},{}\nradius={}\nintensity={}\n",
                m.start[0], m.start[1], m.velocity[0], m.velocity[1], m.radius, m.intensity
            );
            if !m.gaps.is_empty() {
                s += &format!("gaps={}\n", format_slices(&m.gaps));
            }
            if !m.fragments.is_empty() {
                s += &format!("fragments={}\n", format_slices(&m.fragments));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn read_movers(path: &Path) -> Result<Vec<MoverSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_movers(&text)
}

/// Writes `theta,from,to` rows for the reference links (`from`/`to` are
/// mover indices, `theta_to` the slice the link arrives at).
pub fn write_links_csv(path: &Path, links: &[ObjectLink]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["theta", "theta_to", "from", "to"])?;
    let id = |o: Option<usize>| o.map_or_else(|| "-".to_string(), |v| v.to_string());
    for l in links {
        wtr.write_record([l.theta.to_string(), l.theta_to.to_string(), id(l.from), id(l.to)])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn domain(w: usize, h: usize, n: usize) -> Domain {
        Domain {
            width: w,
            height: h,
            slices: n,
            background: 0.1,
        }
    }

    fn mover(start: [f64; 2], velocity: [f64; 2], radius: f64) -> MoverSpec {
        MoverSpec {
            start,
            velocity,
            radius,
            ..Default::default()
        }
    }

    #[test]
    fn static_disc_without_noise_is_constant() {
        let out = generate(&[mover([20.0, 20.0], [0.0, 0.0], 6.0)], &domain(40, 40, 4), 0.0, 1).unwrap();
        for f in out.stack.frames() {
            assert_eq!(f, out.stack.frame(0));
        }
        let t = &out.trajectories[0];
        assert!(t.points.iter().all(|p| (p.x, p.y) == (20.0, 20.0)));
        assert_eq!(out.links.len(), 3);
    }

    #[test]
    fn same_seed_same_stack() {
        let specs = vec![mover([20.0, 20.0], [1.0, 0.5], 5.0)];
        let a = generate(&specs, &domain(50, 40, 5), 0.1, 42).unwrap();
        let b = generate(&specs, &domain(50, 40, 5), 0.1, 42).unwrap();
        let c = generate(&specs, &domain(50, 40, 5), 0.1, 43).unwrap();
        assert_eq!(a.stack.frames(), b.stack.frames());
        assert_ne!(a.stack.frames(), c.stack.frames());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d = single.install(|| generate(&specs, &domain(50, 40, 5), 0.1, 42).unwrap());
        assert_eq!(a.stack.frames(), d.stack.frames());
    }

    #[test]
    fn gap_links_skip_the_missing_slice() {
        let mut m = mover([15.0, 20.0], [5.0, 0.0], 6.0);
        m.gaps.insert(10);
        let out = generate(&[m], &domain(120, 40, 15), 0.0, 0).unwrap();
        assert!(out.masks[10].is_blank());
        assert!(out.trajectories[0].at(10).is_none());
        let thetas: Vec<(usize, usize)> = out.links.iter().map(|l| (l.theta, l.theta_to)).collect();
        assert!(thetas.contains(&(9, 11)));
        assert!(!thetas.iter().any(|&(a, b)| a == 10 || b == 10));
        assert_eq!(thetas.len(), 13);
    }

    #[test]
    fn fragment_slices_split_the_disc() {
        let mut m = mover([30.0, 30.0], [0.0, 0.0], 8.0);
        m.fragments.insert(1);
        let out = generate(&[m], &domain(60, 60, 2), 0.0, 0).unwrap();
        assert_eq!(crate::centers::label_regions(&out.masks[1]).len(), 2);
        assert_eq!(crate::centers::label_regions(&out.masks[0]).len(), 1);
        // a 3-px wide strip at the centre is empty
        for j in 25..35 {
            for i in 29..=30 {
                assert!(!out.masks[1].get(i, j));
            }
        }
    }

    #[test]
    fn reference_centers_are_mask_centers() {
        let specs = vec![mover([20.0, 25.0], [2.0, 1.0], 7.0), mover([60.0, 20.0], [-1.0, 2.0], 5.0)];
        let out = generate(&specs, &domain(90, 60, 6), 0.0, 0).unwrap();
        for (theta, mask) in out.masks.iter().enumerate() {
            let lab = crate::centers::Labeling::new(mask);
            assert_eq!(lab.regions.len(), 2);
            for t in &out.trajectories {
                let p = t.at(theta).unwrap();
                let region = lab.region_at(p.x as usize, p.y as usize).unwrap();
                let px = &lab.regions[region].pixels;
                let mx = px.iter().map(|q| q.0 as f64).sum::<f64>() / px.len() as f64;
                let my = px.iter().map(|q| q.1 as f64).sum::<f64>() / px.len() as f64;
                assert!((mx - p.x).abs() < 1e-9 && (my - p.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_masks_recovered_by_midlevel_threshold() {
        let specs = vec![mover([20.3, 25.7], [2.2, 1.1], 7.5), mover([60.0, 20.0], [-1.0, 2.0], 5.0)];
        let out = generate(&specs, &domain(90, 60, 5), 0.0, 0).unwrap();
        let mid = 0.5 * (0.1 + 0.8);
        for (theta, (f, m)) in out.stack.frames().iter().zip(&out.masks).enumerate() {
            // the soft edge spans half a pixel either side of the circle,
            // so only pixels within half a pixel of it may disagree
            for j in 0..60 {
                for i in 0..90 {
                    if (f.get(i, j) > mid) != m.get(i, j) {
                        let near = specs.iter().any(|s| {
                            let c = s.center(theta);
                            ((i as f64 - c[0]).hypot(j as f64 - c[1]) - s.radius).abs() <= 0.5
                        });
                        assert!(near);
                    }
                }
            }
        }
    }

    #[test]
    fn leaving_the_domain_is_an_error() {
        let m = mover([10.0, 10.0], [5.0, 0.0], 5.0);
        assert!(matches!(
            generate(&[m.clone()], &domain(30, 30, 5), 0.0, 0),
            Err(Error::OutOfDomain { mover: 0, theta: 3 })
        ));
        // hidden on the offending slices is fine
        let mut hidden = m;
        hidden.gaps.extend([3, 4]);
        assert!(generate(&[hidden], &domain(30, 30, 5), 0.0, 0).is_ok());
    }

    #[test]
    fn five_movers_fit_their_domain() {
        let (specs, d) = five_movers();
        check_domain(&specs, &d).unwrap();
        for a in 0..specs.len() {
            for b in a + 1..specs.len() {
                for t in 0..d.slices {
                    let (p, q) = (specs[a].center(t), specs[b].center(t));
                    let gap = (p[0] - q[0]).hypot(p[1] - q[1]) - specs[a].radius - specs[b].radius;
                    assert!(gap > 20.0, "movers {a} and {b} come within {gap} px at slice {t}");
                }
            }
        }
    }

    #[test]
    fn mover_text_round_trip() {
        let text = "# first\nstart=10,20\nvelocity=1.5,-2\nradius=8\nintensity=0.7\ngaps=3,5-6\n\nstart=1,1\nfragments=2\n";
        let specs = parse_movers(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].gaps, [3, 5, 6].into_iter().collect());
        assert_eq!(specs[0].velocity, [1.5, -2.0]);
        assert_eq!(specs[1].radius, 10.0);
        assert_eq!(parse_movers(&format_movers(&specs)).unwrap(), specs);
        let err = parse_movers("start=1,1\nspeed=3\n").unwrap_err();
        assert!(err.to_string().contains("speed"));
    }

    proptest! {
        #[test]
        fn noise_stays_in_unit_range(noise in 0.0f64..1.0, seed in 0u64..1000) {
            let out = generate(&[mover([15.0, 15.0], [0.0, 0.0], 5.0)], &domain(30, 30, 2), noise, seed).unwrap();
            for f in out.stack.frames() {
                prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
