//! Windowed Otsu thresholding with a background-presence test.
//!
//! Every pixel gets its own threshold from the histogram of the `s × s`
//! window around it. A window whose two Otsu classes have similar means is
//! taken to hold background only, and its pixel is set to 0 whatever its
//! intensity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{mirror, BinaryStack, Frame, ImageStack, Mask};

/// Number of histogram bins (8-bit intensities).
pub const BINS: usize = 256;

pub type Histogram = [u32; BINS];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuParams {
    /// Window side `s` in pixels. `None` uses the whole image as the window.
    pub window: Option<usize>,
    /// Presence threshold `δ` on the relative class-mean difference.
    pub delta: f64,
    /// When false every window counts as containing an object.
    pub presence_test: bool,
    /// Maximum intensity `L`; thresholds range over `0..L`.
    pub max_intensity: u8,
}

impl Default for OtsuParams {
    fn default() -> Self {
        OtsuParams {
            window: Some(50),
            delta: 0.5,
            presence_test: true,
            max_intensity: 255,
        }
    }
}

impl OtsuParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == Some(0) {
            return Err(Error::param("otsu.window", "window side must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::param("otsu.delta", format!("{} must be positive", self.delta)));
        }
        Ok(())
    }
}

/// Class statistics at the optimal threshold of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub threshold: u8,
    /// Between-class variance `σ_B²` at `threshold`.
    pub sigma_b2: f64,
    pub omega0: f64,
    pub omega1: f64,
    /// Mean of the class `I ≤ threshold`; `NaN` when that class is empty.
    pub mu0: f64,
    /// Mean of the class `I > threshold`; `NaN` when that class is empty.
    pub mu1: f64,
    pub mu_tot: f64,
}

#[inline]
fn to_level(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Histogram of the `s × s` window whose top-left pixel is
/// `(i − ⌊s/2⌋, j − ⌊s/2⌋)`, mirroring outside the image.
pub fn window_histogram(frame: &Frame, i: usize, j: usize, s: usize) -> Histogram {
    let mut hist = [0u32; BINS];
    let half = (s / 2) as isize;
    let (w, h) = frame.dims();
    for dy in 0..s as isize {
        let jj = mirror(j as isize - half + dy, h);
        for dx in 0..s as isize {
            let ii = mirror(i as isize - half + dx, w);
            hist[to_level(frame.get(ii, jj)) as usize] += 1;
        }
    }
    hist
}

/// Histogram of a whole frame.
pub fn frame_histogram(frame: &Frame) -> Histogram {
    let mut hist = [0u32; BINS];
    for &v in frame.data() {
        hist[to_level(v) as usize] += 1;
    }
    hist
}

/// Between-class variance score as an exact fraction `num / den`, up to the
/// factor `1/N²` shared by every threshold of one histogram.
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    /// `n0`, `s0`: count and intensity sum of the lower class; `n`, `s`: totals.
    #[inline]
    fn new(n0: u64, s0: u64, n: u64, s: u64) -> Score {
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            return Score { num: 0, den: 1 };
        }
        let d = (s as i128 * n0 as i128 - s0 as i128 * n as i128).unsigned_abs();
        Score {
            num: d * d,
            den: n0 as u128 * n1 as u128,
        }
    }

    #[inline]
    fn greater_than(&self, other: &Score) -> bool {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            _ => self.num as f64 / self.den as f64 > other.num as f64 / other.den as f64,
        }
    }

    fn value(&self, n: u64) -> f64 {
        self.num as f64 / (self.den as f64 * (n as f64) * (n as f64))
    }
}

fn stats_at(hist: &Histogram, t: u8, n: u64, s: u64) -> WindowStats {
    let (mut n0, mut s0) = (0u64, 0u64);
    for r in 0..=t as usize {
        n0 += hist[r] as u64;
        s0 += r as u64 * hist[r] as u64;
    }
    let n1 = n - n0;
    let s1 = s - s0;
    let score = Score::new(n0, s0, n, s);
    WindowStats {
        threshold: t,
        sigma_b2: score.value(n),
        omega0: n0 as f64 / n as f64,
        omega1: n1 as f64 / n as f64,
        mu0: if n0 > 0 { s0 as f64 / n0 as f64 } else { f64::NAN },
        mu1: if n1 > 0 { s1 as f64 / n1 as f64 } else { f64::NAN },
        mu_tot: s as f64 / n as f64,
    }
}

/// Otsu's optimal threshold: the smallest `T ∈ [0, L)` maximising the
/// between-class variance, or 0 when every `T` scores zero.
///
/// Candidates are compared as exact fractions, so ties are genuine ties.
///
/// # Panics
/// On an empty histogram.
pub fn otsu_optimal(hist: &Histogram, max_intensity: u8) -> WindowStats {
    let (n, s) = totals(hist);
    assert!(n > 0, "empty histogram");
    let mut best_t = 0u8;
    let mut best = Score { num: 0, den: 1 };
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 0..max_intensity as usize {
        let c = hist[t] as u64;
        if c == 0 {
            continue;
        }
        // the score only changes where a bin is occupied
        n0 += c;
        s0 += t as u64 * c;
        let sc = Score::new(n0, s0, n, s);
        if sc.greater_than(&best) {
            best = sc;
            best_t = t as u8;
        }
    }
    stats_at(hist, best_t, n, s)
}

fn totals(hist: &Histogram) -> (u64, u64) {
    hist.iter()
        .enumerate()
        .fold((0, 0), |(n, s), (r, &c)| (n + c as u64, s + r as u64 * c as u64))
}

/// Relative class-mean test `|μ₀ − μ₁| / μ₀ > δ`.
///
/// An empty class means no object. With `μ₀ = 0` any brighter class counts
/// as an object.
pub fn object_presence(stats: &WindowStats, delta: f64) -> bool {
    if stats.omega0 == 0.0 || stats.omega1 == 0.0 {
        return false;
    }
    if stats.mu0 == 0.0 {
        return stats.mu1 > 0.0;
    }
    (stats.mu0 - stats.mu1).abs() / stats.mu0 > delta
}

/// Sliding-window histogram with an occupancy bitmap over the bins.
struct Sliding {
    hist: Histogram,
    occupied: [u64; 4],
    n: u64,
    s: u64,
}

impl Sliding {
    fn new() -> Self {
        Sliding {
            hist: [0; BINS],
            occupied: [0; 4],
            n: 0,
            s: 0,
        }
    }

    #[inline]
    fn add(&mut self, v: u8) {
        let b = v as usize;
        if self.hist[b] == 0 {
            self.occupied[b >> 6] |= 1 << (b & 63);
        }
        self.hist[b] += 1;
        self.n += 1;
        self.s += b as u64;
    }

    #[inline]
    fn remove(&mut self, v: u8) {
        let b = v as usize;
        self.hist[b] -= 1;
        if self.hist[b] == 0 {
            self.occupied[b >> 6] &= !(1 << (b & 63));
        }
        self.n -= 1;
        self.s -= b as u64;
    }

    /// Same result as [`otsu_optimal`], visiting only occupied bins.
    fn optimal(&self, max_intensity: u8) -> WindowStats {
        let (n, s) = (self.n, self.s);
        let mut best_t = 0u8;
        let mut best = Score { num: 0, den: 1 };
        let (mut n0, mut s0) = (0u64, 0u64);
        let (mut best_n0, mut best_s0) = (0u64, 0u64);
        let limit = max_intensity as usize;
        'words: for (wi, &word) in self.occupied.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let t = wi * 64 + bits.trailing_zeros() as usize;
                bits &= bits - 1;
                if t >= limit {
                    break 'words;
                }
                let c = self.hist[t] as u64;
                n0 += c;
                s0 += t as u64 * c;
                let sc = Score::new(n0, s0, n, s);
                if sc.greater_than(&best) {
                    best = sc;
                    best_t = t as u8;
                    best_n0 = n0;
                    best_s0 = s0;
                }
            }
        }
        if best.num == 0 {
            // every threshold ties at zero
            return stats_at(&self.hist, 0, n, s);
        }
        let n1 = n - best_n0;
        WindowStats {
            threshold: best_t,
            sigma_b2: best.value(n),
            omega0: best_n0 as f64 / n as f64,
            omega1: n1 as f64 / n as f64,
            mu0: best_s0 as f64 / best_n0 as f64,
            mu1: (s - best_s0) as f64 / n1 as f64,
            mu_tot: s as f64 / n as f64,
        }
    }
}

fn decide(value: u8, stats: &WindowStats, params: &OtsuParams) -> bool {
    value > stats.threshold && (!params.presence_test || object_presence(stats, params.delta))
}

/// Per-pixel thresholds of one frame (intensities in `[0, 255]`).
pub fn threshold_frame(frame: &Frame, params: &OtsuParams) -> Result<Vec<WindowStats>> {
    params.validate()?;
    let (w, h) = frame.dims();
    let levels: Vec<u8> = frame.data().iter().map(|&v| to_level(v)).collect();
    let Some(side) = params.window else {
        let stats = otsu_optimal(&frame_histogram(frame), params.max_intensity);
        return Ok(vec![stats; w * h]);
    };
    let half = (side / 2) as isize;
    let rows: Vec<Vec<WindowStats>> = (0..h)
        .into_par_iter()
        .map(|j| {
            let row_idx: Vec<usize> = (0..side as isize)
                .map(|dy| mirror(j as isize - half + dy, h) * w)
                .collect();
            let column = |slide: &mut Sliding, x: isize, add: bool| {
                let ii = mirror(x, w);
                for &r in &row_idx {
                    if add {
                        slide.add(levels[r + ii]);
                    } else {
                        slide.remove(levels[r + ii]);
                    }
                }
            };
            let mut slide = Sliding::new();
            for dx in 0..side as isize {
                column(&mut slide, dx - half, true);
            }
            let mut out = Vec::with_capacity(w);
            for i in 0..w as isize {
                if i > 0 {
                    column(&mut slide, i - 1 - half, false);
                    column(&mut slide, i - 1 - half + side as isize, true);
                }
                out.push(slide.optimal(params.max_intensity));
            }
            out
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Binary mask of one frame.
pub fn binarize_frame(frame: &Frame, params: &OtsuParams) -> Result<Mask> {
    let stats = threshold_frame(frame, params)?;
    let data = frame
        .data()
        .iter()
        .zip(&stats)
        .map(|(&v, st)| decide(to_level(v), st, params))
        .collect();
    Mask::from_vec(frame.width(), frame.height(), data)
}

/// Binary mask per slice of a `[0, 255]` stack.
pub fn binarize_stack(stack: &ImageStack, params: &OtsuParams) -> Result<BinaryStack> {
    params.validate()?;
    stack
        .frames()
        .par_iter()
        .map(|f| binarize_frame(f, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Eq.-16 style score `ω₀ ω₁ (μ₁ − μ₀)²` as an exact fraction
    /// `(s₁n₀ − s₀n₁)² / (n₀ n₁)` (common `1/N²` dropped).
    fn reference_threshold(hist: &Histogram, max_intensity: u8) -> u8 {
        let n: i128 = hist.iter().map(|&c| c as i128).sum();
        let s: i128 = hist.iter().enumerate().map(|(r, &c)| r as i128 * c as i128).sum();
        let mut best: Option<(i128, i128, u8)> = None;
        for t in 0..max_intensity as usize {
            let n0: i128 = hist[..=t].iter().map(|&c| c as i128).sum();
            let s0: i128 = hist[..=t].iter().enumerate().map(|(r, &c)| r as i128 * c as i128).sum();
            let (n1, s1) = (n - n0, s - s0);
            let (num, den) = if n0 == 0 || n1 == 0 {
                (0, 1)
            } else {
                let d = s1 * n0 - s0 * n1;
                (d * d, n0 * n1)
            };
            match best {
                Some((bn, bd, _)) if num * bd <= bn * den => {}
                _ => best = Some((num, den, t as u8)),
            }
        }
        let (num, _, t) = best.unwrap();
        if num == 0 {
            0
        } else {
            t
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        let modes = [rng.gen_range(0..128u32), rng.gen_range(100..256u32)];
        Frame::from_fn(w, h, |_, _| {
            let m = modes[rng.gen_range(0..2)] as i32 + rng.gen_range(-30..=30);
            m.clamp(0, 255) as f64
        })
    }

    #[test]
    fn constant_window_and_single_pixel_window() {
        let f = Frame::filled(5, 5, 77.0);
        let h = window_histogram(&f, 2, 2, 3);
        assert_eq!(h[77], 9);
        assert_eq!(h.iter().sum::<u32>(), 9);
        let g = Frame::from_fn(3, 3, |i, j| (i * 10 + j) as f64);
        let h1 = window_histogram(&g, 2, 1, 1);
        assert_eq!(h1[21], 1);
        assert_eq!(h1.iter().sum::<u32>(), 1);
    }

    #[test]
    fn corner_window_is_mirrored() {
        let f = Frame::from_fn(4, 4, |i, j| (j * 4 + i) as f64);
        let h = window_histogram(&f, 0, 0, 3);
        // rows/cols −1,0,1 mirror to 0,0,1
        let mut expected = [0u32; BINS];
        for jj in [0usize, 0, 1] {
            for ii in [0usize, 0, 1] {
                expected[jj * 4 + ii] += 1;
            }
        }
        assert_eq!(h, expected);
    }

    #[test]
    fn even_window_spans_asymmetric_range() {
        let f = Frame::from_fn(6, 6, |i, j| (j * 6 + i) as f64);
        let h = window_histogram(&f, 3, 3, 4);
        let mut expected = [0u32; BINS];
        for jj in 1..5 {
            for ii in 1..5 {
                expected[jj * 6 + ii] += 1;
            }
        }
        assert_eq!(h, expected);
    }

    #[test]
    fn two_spikes_tie_to_lower_threshold() {
        let mut h = [0u32; BINS];
        h[10] = 100;
        h[200] = 100;
        let st = otsu_optimal(&h, 255);
        assert_eq!(st.threshold, 10);
        assert_eq!(reference_threshold(&h, 255), 10);
        assert_eq!(st.mu0, 10.0);
        assert_eq!(st.mu1, 200.0);
        assert!((st.sigma_b2 - 0.25 * 190.0 * 190.0).abs() < 1e-9);
    }

    #[test]
    fn single_value_histogram_is_degenerate() {
        let mut h = [0u32; BINS];
        h[42] = 17;
        let st = otsu_optimal(&h, 255);
        assert_eq!(st.threshold, 0);
        assert_eq!(st.sigma_b2, 0.0);
        assert!(!object_presence(&st, 0.5));
    }

    #[test]
    fn presence_arithmetic() {
        let mk = |mu0: f64, mu1: f64| WindowStats {
            threshold: 0,
            sigma_b2: 0.0,
            omega0: 0.5,
            omega1: 0.5,
            mu0,
            mu1,
            mu_tot: 0.5 * (mu0 + mu1),
        };
        assert!(object_presence(&mk(100.0, 200.0), 0.5));
        assert!(!object_presence(&mk(100.0, 140.0), 0.5));
        assert!(object_presence(&mk(0.0, 3.0), 0.5));
    }

    #[test]
    fn flat_noise_window_has_no_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Frame::from_fn(20, 20, |_, _| 50.0 + rng.gen_range(-1..=1) as f64);
        let st = otsu_optimal(&frame_histogram(&f), 255);
        assert!(!object_presence(&st, 0.5));
    }

    #[test]
    fn sliding_windows_match_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(w, h, s) in &[(13usize, 9usize, 5usize), (8, 8, 4), (7, 11, 1), (6, 5, 12)] {
            let f = random_frame(&mut rng, w, h);
            let params = OtsuParams {
                window: Some(s),
                ..Default::default()
            };
            let stats = threshold_frame(&f, &params).unwrap();
            for j in 0..h {
                for i in 0..w {
                    let naive = otsu_optimal(&window_histogram(&f, i, j, s), 255);
                    let fast = stats[j * w + i];
                    assert_eq!(naive.threshold, fast.threshold);
                    assert_eq!(naive.sigma_b2.to_bits(), fast.sigma_b2.to_bits());
                    assert_eq!(naive.mu0.to_bits(), fast.mu0.to_bits());
                    assert_eq!(naive.mu1.to_bits(), fast.mu1.to_bits());
                }
            }
        }
    }

    #[test]
    fn whole_image_window_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let f = random_frame(&mut rng, 24, 16);
            let params = OtsuParams {
                window: None,
                presence_test: false,
                ..Default::default()
            };
            let t = reference_threshold(&frame_histogram(&f), 255);
            let mask = binarize_frame(&f, &params).unwrap();
            let expected = Mask::from_fn(24, 16, |i, j| f.get(i, j) > t as f64);
            assert_eq!(mask, expected);
        }
    }

    #[test]
    fn uniform_background_gives_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Frame> = (0..2)
            .map(|_| Frame::from_fn(40, 30, |_, _| 20.0 + rng.gen_range(-2..=2) as f64))
            .collect();
        let stack = ImageStack::new(frames, 1.0, crate::grid::IntensityRange::Byte).unwrap();
        let params = OtsuParams {
            window: Some(10),
            ..Default::default()
        };
        for m in binarize_stack(&stack, &params).unwrap() {
            assert!(m.is_blank());
        }
    }

    #[test]
    fn bright_disc_on_dark_noise_is_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (w, h, r) = (80usize, 80usize, 12.0f64);
        let inside = |i: usize, j: usize| (i as f64 - 40.0).hypot(j as f64 - 40.0) <= r;
        let f = Frame::from_fn(w, h, |i, j| {
            if inside(i, j) {
                200.0
            } else {
                rng.gen_range(0..=20) as f64
            }
        });
        let mask = binarize_frame(&f, &OtsuParams { window: Some(50), ..Default::default() }).unwrap();
        for j in 0..h {
            for i in 0..w {
                if inside(i, j) {
                    assert!(mask.get(i, j), "({i},{j}) missed");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn score_formulas_agree(counts in proptest::collection::vec(0u32..50, BINS)) {
            let mut hist = [0u32; BINS];
            hist.copy_from_slice(&counts);
            let (n, s) = totals(&hist);
            prop_assume!(n > 0);
            let nf = n as f64;
            let mu_tot = s as f64 / nf;
            let (mut n0, mut s0) = (0u64, 0u64);
            for t in 0..255usize {
                n0 += hist[t] as u64;
                s0 += t as u64 * hist[t] as u64;
                let w0 = n0 as f64 / nf;
                let w1 = 1.0 - w0;
                if n0 == 0 || n0 == n {
                    continue;
                }
                let mu0 = s0 as f64 / n0 as f64;
                let mu1 = (s - s0) as f64 / (n - n0) as f64;
                let eq16 = w0 * w1 * (mu1 - mu0).powi(2);
                let mu_t = s0 as f64 / nf;
                let eq17 = (mu_tot * w0 - mu_t).powi(2) / (w0 * w1);
                let exact = Score::new(n0, s0, n, s).value(n);
                prop_assert!((eq16 - eq17).abs() <= 1e-9 * eq16.max(1.0));
                prop_assert!((eq16 - exact).abs() <= 1e-9 * eq16.max(1.0));
            }
        }

        #[test]
        fn optimal_threshold_matches_reference(counts in proptest::collection::vec(0u32..6, BINS)) {
            let mut hist = [0u32; BINS];
            hist.copy_from_slice(&counts);
            prop_assume!(hist.iter().any(|&c| c > 0));
            let st = otsu_optimal(&hist, 255);
            prop_assert_eq!(st.threshold, reference_threshold(&hist, 255));
            prop_assert!((st.omega0 + st.omega1 - 1.0).abs() < 1e-9);
            if st.omega0 > 0.0 && st.omega1 > 0.0 {
                prop_assert!((st.omega0 * st.mu0 + st.omega1 * st.mu1 - st.mu_tot).abs() < 1e-9);
            }
        }

        #[test]
        fn larger_delta_gives_subset(seed in 0u64..1000, d1 in 0.05f64..2.0, extra in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frame(&mut rng, 16, 12);
            let lo = binarize_frame(&f, &OtsuParams { window: Some(6), delta: d1, ..Default::default() }).unwrap();
            let hi = binarize_frame(&f, &OtsuParams { window: Some(6), delta: d1 + extra, ..Default::default() }).unwrap();
            for (a, b) in hi.data().iter().zip(lo.data()) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn shifting_intensities_shifts_threshold(seed in 0u64..1000, shift in 1u32..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hist = [0u32; BINS];
            for _ in 0..200 {
                hist[rng.gen_range(0..200usize)] += 1;
            }
            let base = otsu_optimal(&hist, 255);
            prop_assume!(base.sigma_b2 > 0.0);
            let mut shifted = [0u32; BINS];
            for r in 0..200usize {
                shifted[r + shift as usize] = hist[r];
            }
            let moved = otsu_optimal(&shifted, 255);
            prop_assert_eq!(moved.threshold as u32, base.threshold as u32 + shift);
        }
    }
}
