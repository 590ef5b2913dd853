//! First-stage bidimensional empirical mode decomposition.
//!
//! Upper and lower envelopes are thin-plate spline interpolants through the
//! strict local maxima and minima of a plane. Their mean is the residue; the
//! first intrinsic mode function is what remains.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::RasterImage;

/// A real-valued single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub x: usize,
    pub y: usize,
    pub value: f64,
    /// Corner anchor rather than a detected extremum.
    pub anchor: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtremaSet {
    pub maxima: Vec<Extremum>,
    pub minima: Vec<Extremum>,
}

impl ExtremaSet {
    pub fn interior_maxima(&self) -> impl Iterator<Item = &Extremum> {
        self.maxima.iter().filter(|e| !e.anchor)
    }

    pub fn interior_minima(&self) -> impl Iterator<Item = &Extremum> {
        self.minima.iter().filter(|e| !e.anchor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverLimits {
    /// Largest number of centers per envelope, corners included.
    pub n_max: usize,
}

impl Default for SolverLimits {
    fn default() -> Self {
        SolverLimits { n_max: 2000 }
    }
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Strict 8-neighbour extrema over the interior, with the four corners
/// appended to both sets.
pub fn find_extrema(plane: &Plane) -> Result<ExtremaSet> {
    let (w, h) = (plane.width, plane.height);
    if w < 3 || h < 3 {
        return Err(Error::PlaneTooSmall {
            width: w,
            height: h,
        });
    }
    let mut set = ExtremaSet::default();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = plane.get(x, y);
            let mut is_max = true;
            let mut is_min = true;
            for (dx, dy) in NEIGHBORS {
                let n = plane.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                is_max &= v > n;
                is_min &= v < n;
            }
            let e = Extremum {
                x,
                y,
                value: v,
                anchor: false,
            };
            if is_max {
                set.maxima.push(e);
            } else if is_min {
                set.minima.push(e);
            }
        }
    }
    for (x, y) in [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)] {
        let e = Extremum {
            x,
            y,
            value: plane.get(x, y),
            anchor: true,
        };
        set.maxima.push(e);
        set.minima.push(e);
    }
    Ok(set)
}

/// Keeps all anchors and at most `n_max - anchors` interior points, chosen by
/// farthest-point sampling seeded at the most extreme value.
pub fn subsample_extrema(points: &[Extremum], n_max: usize, maxima: bool) -> Vec<Extremum> {
    if points.len() <= n_max {
        return points.to_vec();
    }
    let anchors: Vec<Extremum> = points.iter().copied().filter(|e| e.anchor).collect();
    let interior: Vec<Extremum> = points.iter().copied().filter(|e| !e.anchor).collect();
    let budget = n_max.saturating_sub(anchors.len());
    let mut chosen = Vec::with_capacity(budget);
    if budget > 0 && !interior.is_empty() {
        let seed = interior
            .iter()
            .enumerate()
            .reduce(|best, cur| {
                let better = if maxima {
                    cur.1.value > best.1.value
                } else {
                    cur.1.value < best.1.value
                };
                if better {
                    cur
                } else {
                    best
                }
            })
            .map(|(i, _)| i)
            .unwrap();
        let sq = |a: &Extremum, b: &Extremum| {
            let dx = a.x as f64 - b.x as f64;
            let dy = a.y as f64 - b.y as f64;
            dx * dx + dy * dy
        };
        let mut dist = vec![f64::INFINITY; interior.len()];
        let mut next = seed;
        for _ in 0..budget.min(interior.len()) {
            let p = interior[next];
            chosen.push(p);
            dist[next] = -1.0;
            let mut far = (0, -1.0);
            for (i, q) in interior.iter().enumerate() {
                if dist[i] < 0.0 {
                    continue;
                }
                dist[i] = dist[i].min(sq(&p, q));
                if dist[i] > far.1 {
                    far = (i, dist[i]);
                }
            }
            if far.1 < 0.0 {
                break;
            }
            next = far.0;
        }
    }
    chosen.extend(anchors);
    chosen
}

/// Thin-plate kernel r^2 ln r, written in terms of r^2.
#[inline]
fn tps(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Thin-plate spline with an affine term.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfModel {
    pub centers: Vec<(f64, f64)>,
    pub lambda: Vec<f64>,
    /// a0 + a1 x + a2 y
    pub poly: [f64; 3],
}

impl RbfModel {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut s = self.poly[0] + self.poly[1] * x + self.poly[2] * y;
        for (&(cx, cy), &l) in self.centers.iter().zip(&self.lambda) {
            let (dx, dy) = (x - cx, y - cy);
            s += l * tps(dx * dx + dy * dy);
        }
        s
    }

    /// Values at every integer pixel of a `width` x `height` grid.
    pub fn eval_grid(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = vec![0.0; width * height];
        out.par_chunks_mut(width.max(1))
            .enumerate()
            .for_each(|(y, row)| {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = self.eval(x as f64, y as f64);
                }
            });
        out
    }
}

fn check_geometry(points: &[(f64, f64, f64)]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 centers, got {}",
            points.len()
        )));
    }
    let mut seen = HashSet::with_capacity(points.len());
    for &(x, y, _) in points {
        if !seen.insert((x.to_bits(), y.to_bits())) {
            return Err(Error::DegenerateGeometry(format!(
                "duplicate center ({x}, {y})"
            )));
        }
    }
    // Collinear iff the coordinate covariance is rank deficient.
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y, _) in points {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let det = sxx * syy - sxy * sxy;
    let tr = sxx + syy;
    if det <= 1e-12 * tr * tr {
        return Err(Error::DegenerateGeometry("centers are collinear".into()));
    }
    Ok(())
}

/// Dense LU factorization with partial pivoting, blocked so the trailing
/// updates go through a matrix multiply.
struct Lu {
    n: usize,
    a: Vec<f64>,
    perm: Vec<usize>,
}

const LU_BLOCK: usize = 48;

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Lu> {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = scale * 1e-14 * n as f64;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut k0 = 0;
        while k0 < n {
            let kb = LU_BLOCK.min(n - k0);
            let kend = k0 + kb;
            for j in k0..kend {
                let mut p = j;
                let mut best = a[j * n + j].abs();
                for i in j + 1..n {
                    let v = a[i * n + j].abs();
                    if v > best {
                        best = v;
                        p = i;
                    }
                }
                if !(best > tol) {
                    return Err(Error::SingularSystem);
                }
                if p != j {
                    perm.swap(p, j);
                    for c in 0..n {
                        a.swap(j * n + c, p * n + c);
                    }
                }
                let pivot = a[j * n + j];
                for i in j + 1..n {
                    let f = a[i * n + j] / pivot;
                    a[i * n + j] = f;
                    if f != 0.0 {
                        for c in j + 1..kend {
                            a[i * n + c] -= f * a[j * n + c];
                        }
                    }
                }
            }
            if kend < n {
                for j in k0..kend {
                    for i in j + 1..kend {
                        let f = a[i * n + j];
                        if f != 0.0 {
                            for c in kend..n {
                                a[i * n + c] -= f * a[j * n + c];
                            }
                        }
                    }
                }
                let m = n - kend;
                let ptr = a.as_mut_ptr();
                // SAFETY: the three blocks are disjoint regions of `a`:
                // L21 = rows kend.., cols k0..kend; U12 = rows k0..kend,
                // cols kend..; A22 = rows kend.., cols kend...
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        kb,
                        m,
                        -1.0,
                        ptr.add(kend * n + k0),
                        n as isize,
                        1,
                        ptr.add(k0 * n + kend),
                        n as isize,
                        1,
                        1.0,
                        ptr.add(kend * n + kend),
                        n as isize,
                        1,
                    );
                }
            }
            k0 = kend;
        }
        Ok(Lu { n, a, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.a[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.a[i * n + i + 1..(i + 1) * n];
            let s: f64 = row.iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / self.a[i * n + i];
        }
        x
    }
}

fn mat_vec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(n)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Solves the thin-plate interpolation system through `(x, y, value)` points.
pub fn fit_rbf(points: &[(f64, f64, f64)]) -> Result<RbfModel> {
    check_geometry(points)?;
    let np = points.len();
    let n = np + 3;
    let mut m = vec![0.0; n * n];
    for i in 0..np {
        let (xi, yi, _) = points[i];
        for j in i + 1..np {
            let (dx, dy) = (xi - points[j].0, yi - points[j].1);
            let v = tps(dx * dx + dy * dy);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
        for (k, p) in [1.0, xi, yi].into_iter().enumerate() {
            m[i * n + np + k] = p;
            m[(np + k) * n + i] = p;
        }
    }
    let mut rhs: Vec<f64> = points.iter().map(|p| p.2).collect();
    rhs.extend([0.0; 3]);

    let lu = Lu::factor(m.clone(), n)?;
    let mut sol = lu.solve(&rhs);
    for _ in 0..2 {
        let r: Vec<f64> = mat_vec(&m, n, &sol)
            .iter()
            .zip(&rhs)
            .map(|(a, b)| b - a)
            .collect();
        let d = lu.solve(&r);
        for (s, d) in sol.iter_mut().zip(d) {
            *s += d;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let poly = [sol[np], sol[np + 1], sol[np + 2]];
    sol.truncate(np);
    Ok(RbfModel {
        centers: points.iter().map(|p| (p.0, p.1)).collect(),
        lambda: sol,
        poly,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmdResult {
    pub imf1: Plane,
    pub residue: Plane,
    /// Number of extracted modes; always 1.
    pub depth: usize,
}

fn envelope(
    points: &[Extremum],
    limits: SolverLimits,
    maxima: bool,
    w: usize,
    h: usize,
) -> Result<Vec<f64>> {
    let kept = subsample_extrema(points, limits.n_max, maxima);
    let pts: Vec<(f64, f64, f64)> = kept
        .iter()
        .map(|e| (e.x as f64, e.y as f64, e.value))
        .collect();
    Ok(fit_rbf(&pts)?.eval_grid(w, h))
}

/// One sifting pass: residue = mean of the envelopes, imf1 = plane - residue.
///
/// Planes without any interior extremum, or with an envelope of fewer than
/// three points, fall back to residue = plane and imf1 = 0.
pub fn decompose_first(plane: &Plane, limits: SolverLimits) -> Result<EmdResult> {
    let ext = find_extrema(plane)?;
    let (w, h) = (plane.width, plane.height);
    let flat = ext.interior_maxima().next().is_none() && ext.interior_minima().next().is_none();
    if flat || ext.maxima.len() < 3 || ext.minima.len() < 3 {
        return Ok(EmdResult {
            imf1: Plane::filled(w, h, 0.0),
            residue: plane.clone(),
            depth: 1,
        });
    }
    let (upper, lower) = rayon::join(
        || envelope(&ext.maxima, limits, true, w, h),
        || envelope(&ext.minima, limits, false, w, h),
    );
    let (upper, lower) = (upper?, lower?);
    let residue: Vec<f64> = upper
        .iter()
        .zip(&lower)
        .map(|(u, l)| 0.5 * (u + l))
        .collect();
    let imf1: Vec<f64> = plane
        .data
        .iter()
        .zip(&residue)
        .map(|(p, r)| p - r)
        .collect();
    let out = EmdResult {
        imf1: Plane {
            width: w,
            height: h,
            data: imf1,
        },
        residue: Plane {
            width: w,
            height: h,
            data: residue,
        },
        depth: 1,
    };
    debug_assert!(reconstruction_error(plane, &out) <= 1e-6);
    Ok(out)
}

/// max |plane - (imf1 + residue)|
pub fn reconstruction_error(plane: &Plane, result: &EmdResult) -> f64 {
    plane
        .data
        .iter()
        .zip(result.imf1.data.iter().zip(&result.residue.data))
        .map(|(p, (i, r))| (p - (i + r)).abs())
        .fold(0.0, f64::max)
}

/// Removes the first mode from each channel independently and quantizes
/// the residue back to 8 bits.
pub fn emd_residue_image(image: &RasterImage, limits: SolverLimits) -> Result<RasterImage> {
    let (w, h) = (image.width(), image.height());
    let residues = (0..3)
        .into_par_iter()
        .map(|c| {
            let plane = Plane::new(w, h, image.plane(c))?;
            Ok(decompose_first(&plane, limits)?.residue.data)
        })
        .collect::<Result<Vec<_>>>()?;
    RasterImage::from_planes(w, h, [&residues[0], &residues[1], &residues[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_plane_has_only_anchors() {
        let ext = find_extrema(&Plane::filled(9, 7, 3.0)).unwrap();
        assert_eq!(ext.maxima.len(), 4);
        assert_eq!(ext.minima.len(), 4);
        assert!(ext.maxima.iter().chain(&ext.minima).all(|e| e.anchor));
    }

    #[test]
    fn single_bright_pixel() {
        let p = Plane::from_fn(11, 11, |x, y| if (x, y) == (5, 5) { 1.0 } else { 0.0 });
        let ext = find_extrema(&p).unwrap();
        let maxima: Vec<_> = ext.interior_maxima().map(|e| (e.x, e.y)).collect();
        assert_eq!(maxima, vec![(5, 5)]);
        assert_eq!(ext.interior_minima().count(), 0);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            find_extrema(&Plane::filled(2, 5, 0.0)),
            Err(Error::PlaneTooSmall { .. })
        ));
    }

    #[test]
    fn affine_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..40)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                (x, y, 2.0 + 3.0 * x - y)
            })
            .collect();
        let m = fit_rbf(&pts).unwrap();
        let vmax = pts.iter().fold(0.0f64, |a, p| a.max(p.2.abs()));
        assert!(m.lambda.iter().all(|l| l.abs() <= 1e-8 * vmax));
        for (got, want) in m.poly.iter().zip([2.0, 3.0, -1.0]) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn three_points_give_plane() {
        let pts = [(0.0, 0.0, 1.0), (4.0, 0.0, 5.0), (0.0, 2.0, -1.0)];
        let m = fit_rbf(&pts).unwrap();
        // v = 1 + x - y
        assert!((m.eval(3.0, 7.0) - (1.0 + 3.0 - 7.0)).abs() < 1e-10);
    }

    #[test]
    fn interpolates_random_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..50)
            .map(|_| {
                (
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let m = fit_rbf(&pts).unwrap();
        for &(x, y, v) in &pts {
            assert!((m.eval(x, y) - v).abs() <= 1e-8 * (1.0 + v.abs()));
        }
        let sum: f64 = m.lambda.iter().sum();
        let sx: f64 = m.lambda.iter().zip(&pts).map(|(l, p)| l * p.0).sum();
        let sy: f64 = m.lambda.iter().zip(&pts).map(|(l, p)| l * p.1).sum();
        let scale = m.lambda.iter().fold(0.0f64, |a, l| a.max(l.abs())) * 64.0;
        assert!(sum.abs() <= 1e-8 * scale && sx.abs() <= 1e-8 * scale && sy.abs() <= 1e-8 * scale);
    }

    #[test]
    fn degenerate_geometry() {
        let line: Vec<_> = (0..5).map(|i| (i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(fit_rbf(&line), Err(Error::DegenerateGeometry(_))));
        let dup = [
            (0.0, 0.0, 1.0),
            (1.0, 0.0, 1.0),
            (0.0, 0.0, 2.0),
            (0.0, 1.0, 0.0),
        ];
        assert!(matches!(fit_rbf(&dup), Err(Error::DegenerateGeometry(_))));
        assert!(fit_rbf(&dup[..2]).is_err());
    }

    #[test]
    fn blocked_lu_matches_direct_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 130;
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 3.0).collect();
        let b = mat_vec(&a, n, &x);
        let got = Lu::factor(a, n).unwrap().solve(&b);
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(Lu::factor(a, 2), Err(Error::SingularSystem)));
    }

    #[test]
    fn constant_plane_falls_back() {
        let p = Plane::filled(16, 16, 42.0);
        let r = decompose_first(&p, SolverLimits::default()).unwrap();
        assert!(r.imf1.data.iter().all(|&v| v == 0.0));
        assert_eq!(r.residue, p);
    }

    #[test]
    fn subsampling_keeps_anchors_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Plane::from_fn(64, 64, |_, _| rng.gen_range(0.0..1.0));
        let ext = find_extrema(&p).unwrap();
        let kept = subsample_extrema(&ext.maxima, 50, true);
        assert_eq!(kept.len(), 50);
        assert_eq!(kept.iter().filter(|e| e.anchor).count(), 4);
        let top = ext
            .interior_maxima()
            .map(|e| e.value)
            .fold(f64::MIN, f64::max);
        assert_eq!(kept[0].value, top);
    }
}
