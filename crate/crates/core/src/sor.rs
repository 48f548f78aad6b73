//! Successive over-relaxation for the five-point finite-volume systems.
//!
//! Both the space-time filter and the level-set evolution produce, for
//! every pixel `p`, an equation
//!
//! ```text
//! (1 + Σₙ aₚₙ) uₚ − Σₙ aₚₙ uₙ = bₚ
//! ```
//!
//! over the four edge neighbours `n`. Neighbours outside the image are the
//! mirrored pixel itself, so their terms cancel and zero-flux boundaries
//! fall out for free.

use crate::error::{Error, Result};

/// Edge-neighbour offsets `(l, m)` in the order used for coefficient arrays.
pub const NEIGHBORS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SorParams {
    pub omega: f64,
    /// Stop once the sum of diagonally scaled residuals over one sweep drops below this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SorParams {
    fn default() -> Self {
        SorParams {
            omega: 1.8,
            tol: 1e-6,
            max_sweeps: 1000,
        }
    }
}

impl SorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::param("sor_omega", format!("{} outside (0, 2)", self.omega)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("sor_tol", format!("{} must be positive", self.tol)));
        }
        Ok(())
    }
}

/// Sparse M-matrix system on a `width × height` grid.
#[derive(Debug, Clone)]
pub struct StencilSystem {
    pub width: usize,
    pub height: usize,
    /// Off-diagonal weights per pixel, ordered as [`NEIGHBORS`].
    pub coeffs: Vec<[f64; 4]>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SorStats {
    pub sweeps: usize,
    pub residual: f64,
}

impl StencilSystem {
    pub fn new(width: usize, height: usize, coeffs: Vec<[f64; 4]>, rhs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), width * height);
        assert_eq!(rhs.len(), width * height);
        StencilSystem {
            width,
            height,
            coeffs,
            rhs,
        }
    }

    /// Coefficients with out-of-domain neighbours zeroed.
    fn effective(&self, idx: usize) -> [f64; 4] {
        let (i, j) = (idx % self.width, idx / self.width);
        let mut a = self.coeffs[idx];
        if i + 1 == self.width {
            a[0] = 0.0;
        }
        if i == 0 {
            a[1] = 0.0;
        }
        if j + 1 == self.height {
            a[2] = 0.0;
        }
        if j == 0 {
            a[3] = 0.0;
        }
        a
    }

    /// `A u` for the assembled operator.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let w = self.width;
        (0..u.len())
            .map(|p| {
                let a = self.effective(p);
                let mut acc = (1.0 + a.iter().sum::<f64>()) * u[p];
                if a[0] != 0.0 {
                    acc -= a[0] * u[p + 1];
                }
                if a[1] != 0.0 {
                    acc -= a[1] * u[p - 1];
                }
                if a[2] != 0.0 {
                    acc -= a[2] * u[p + w];
                }
                if a[3] != 0.0 {
                    acc -= a[3] * u[p - w];
                }
                acc
            })
            .collect()
    }

    /// Solves in place starting from `u` with red-black SOR sweeps.
    ///
    /// The reported residual is the sum over the last sweep of the local
    /// residuals divided by their diagonal entries, each evaluated just
    /// before its pixel was updated. Scaling by the diagonal keeps the
    /// measure meaningful when coefficients are very large.
    pub fn solve(&self, u: &mut [f64], params: &SorParams) -> Result<SorStats> {
        let (w, h) = (self.width, self.height);
        assert_eq!(u.len(), w * h);
        let omega = params.omega;
        // Each colour lives in its own array, `stride` entries per row, so
        // that a pixel `(i, j)` sits at `j * stride + i / 2` of colour
        // `(i + j) % 2`. Updating one colour then streams contiguous memory
        // and only reads the other colour. Next to the values go the four
        // weights, the right-hand side and the diagonal of every pixel.
        let stride = w.div_ceil(2);
        let mut values = [vec![0.0; h * stride], vec![0.0; h * stride]];
        let mut packed = [vec![[0.0; 6]; h * stride], vec![[0.0; 6]; h * stride]];
        for j in 0..h {
            for i in 0..w {
                let p = j * w + i;
                let (c, q) = ((i + j) % 2, j * stride + i / 2);
                let a = self.effective(p);
                values[c][q] = u[p];
                packed[c][q] = [a[0], a[1], a[2], a[3], self.rhs[p], 1.0 + a[0] + a[1] + a[2] + a[3]];
            }
        }
        let grid = Grid { w, h, stride, omega };
        let mut residual = f64::INFINITY;
        let mut outcome = None;
        for sweep in 1..=params.max_sweeps {
            residual = 0.0;
            // Red-black order: pixels of one colour only read the other
            // colour. Black row j-1 runs right after red row j, which is
            // the same as a full red pass followed by a full black pass
            // but touches memory once.
            for j in 0..=h {
                if j < h {
                    let [red, black] = &mut values;
                    residual += grid.update_row(red, black, &packed[0], j, j % 2);
                }
                if j > 0 {
                    let [red, black] = &mut values;
                    residual += grid.update_row(black, red, &packed[1], j - 1, j % 2);
                }
            }
            if residual < params.tol {
                outcome = Some(sweep);
                break;
            }
        }
        for j in 0..h {
            for i in 0..w {
                u[j * w + i] = values[(i + j) % 2][j * stride + i / 2];
            }
        }
        match outcome {
            Some(sweeps) => Ok(SorStats { sweeps, residual }),
            None => Err(Error::NotConverged {
                sweeps: params.max_sweeps,
                residual,
            }),
        }
    }
}

/// Shape of a colour-split grid.
struct Grid {
    w: usize,
    h: usize,
    stride: usize,
    omega: f64,
}

/// One pixel update from its own value, the right, left, lower and upper
/// neighbour values and its packed coefficients. Written as differences so
/// that flat data gives an exact zero. Returns the new value and the size
/// of the scaled residual.
#[inline(always)]
fn relax(up: f64, n: [f64; 4], c: &[f64; 6], omega: f64) -> (f64, f64) {
    let flux = c[0] * (n[0] - up) + c[1] * (n[1] - up) + c[2] * (n[2] - up) + c[3] * (n[3] - up);
    let correction = ((c[4] - up) + flux) / c[5];
    (up + omega * correction, correction.abs())
}

impl Grid {
    /// Pixel `i` of row `j` with bounds checks on every neighbour.
    /// Neighbours outside the grid carry zero weight; any finite value
    /// does, so the pixel's own value is used.
    fn edge_pixel(&self, me: &mut [f64], other: &[f64], packed: &[[f64; 6]], i: usize, j: usize) -> f64 {
        let (w, h, s) = (self.w, self.h, self.stride);
        let q = j * s + i / 2;
        let up = me[q];
        let n = [
            if i + 1 < w { other[j * s + (i + 1) / 2] } else { up },
            if i > 0 { other[j * s + (i - 1) / 2] } else { up },
            if j + 1 < h { other[q + s] } else { up },
            if j > 0 { other[q - s] } else { up },
        ];
        let (value, r) = relax(up, n, &packed[q], self.omega);
        me[q] = value;
        r
    }

    /// Updates the pixels of row `j` stored in `me`, whose first pixel is
    /// at column `first`, in column order.
    fn update_row(&self, me: &mut [f64], other: &[f64], packed: &[[f64; 6]], j: usize, first: usize) -> f64 {
        let (w, h, s) = (self.w, self.h, self.stride);
        let mut sum = 0.0;
        if j == 0 || j + 1 == h || w < 3 {
            for i in (first..w).step_by(2) {
                sum += self.edge_pixel(me, other, packed, i, j);
            }
            return sum;
        }
        if first == 0 {
            sum += self.edge_pixel(me, other, packed, 0, j);
        }
        // interior columns 1..w-1; slot k holds column first + 2k, whose
        // right neighbour is other-colour slot k + first
        let lo = 1 - first;
        let hi = (w - first) / 2;
        let n = hi - lo;
        let row = j * s;
        let me_row = &mut me[row + lo..row + lo + n];
        let coeffs = &packed[row + lo..row + lo + n];
        let right = &other[row + lo + first..row + lo + first + n];
        let left = &other[row + lo + first - 1..row + lo + first - 1 + n];
        let below = &other[row + s + lo..row + s + lo + n];
        let above = &other[row - s + lo..row - s + lo + n];
        for t in 0..n {
            let (value, r) = relax(me_row[t], [right[t], left[t], below[t], above[t]], &coeffs[t], self.omega);
            me_row[t] = value;
            sum += r;
        }
        if (w - 1) % 2 == first {
            sum += self.edge_pixel(me, other, packed, w - 1, j);
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_return_rhs_after_one_sweep() {
        let sys = StencilSystem::new(3, 2, vec![[0.0; 4]; 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut u = sys.rhs.clone();
        let stats = sys.solve(&mut u, &SorParams::default()).unwrap();
        assert_eq!(stats.sweeps, 1);
        assert_eq!(u, sys.rhs);
    }

    #[test]
    fn one_sweep_visits_every_pixel_once() {
        for (w, h) in [(5, 4), (4, 5), (6, 6), (7, 3), (1, 5), (2, 2)] {
            let n = w * h;
            let rhs: Vec<f64> = (0..n).map(|k| k as f64 + 1.0).collect();
            let sys = StencilSystem::new(w, h, vec![[0.0; 4]; n], rhs.clone());
            // omega = 1 with zero coupling: each visit moves u to rhs, a
            // second visit in the same sweep would change nothing, a missed
            // pixel would keep its zero
            let mut u = vec![0.0; n];
            let params = SorParams { omega: 1.0, max_sweeps: 1, tol: f64::INFINITY };
            sys.solve(&mut u, &params).unwrap();
            assert_eq!(u, rhs, "{w}x{h}");
            // with over-relaxation a double visit would overshoot differently
            let mut v = vec![0.0; n];
            sys.solve(&mut v, &SorParams { omega: 1.5, ..params }).unwrap();
            let expected: Vec<f64> = rhs.iter().map(|r| 1.5 * r).collect();
            assert_eq!(v, expected, "{w}x{h}");
        }
    }

    #[test]
    fn solution_satisfies_operator() {
        let n = 5;
        let coeffs = (0..n * n)
            .map(|k| [0.3 + 0.01 * k as f64, 0.2, 0.5, 0.1 + 0.02 * k as f64])
            .collect();
        let rhs: Vec<f64> = (0..n * n).map(|k| (k as f64 * 0.37).sin()).collect();
        let sys = StencilSystem::new(n, n, coeffs, rhs.clone());
        let mut u = rhs.clone();
        sys.solve(&mut u, &SorParams { tol: 1e-14, ..Default::default() }).unwrap();
        for (a, b) in sys.apply(&u).iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn exhausted_sweeps_report_residual() {
        let sys = StencilSystem::new(4, 4, vec![[50.0; 4]; 16], (0..16).map(|k| k as f64).collect());
        let mut u = vec![0.0; 16];
        let err = sys
            .solve(&mut u, &SorParams { omega: 1.8, tol: 1e-300, max_sweeps: 3 })
            .unwrap_err();
        match err {
            Error::NotConverged { sweeps, residual } => {
                assert_eq!(sweeps, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
