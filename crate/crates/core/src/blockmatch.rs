//! Integer-pixel block matching by zero-mean normalized cross-correlation.
//!
//! A displacement `s` for a window of the first image means the pattern found
//! at `x` in the first image appears at `x + s` in the second.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{NodalField, Point, QuadMesh};
use crate::rf::RfImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMatchConfig {
    pub window_axial: f64,
    pub window_lateral: f64,
    pub overlap_axial: f64,
    pub overlap_lateral: f64,
    /// Search radius in pixels `[axial, lateral]`; `None` means 15% of the image size.
    pub search_radius: Option<[usize; 2]>,
    pub median_filter: [usize; 2],
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            window_axial: 5.0,
            window_lateral: 9.0,
            overlap_axial: 0.25,
            overlap_lateral: 0.40,
            search_radius: None,
            median_filter: [5, 5],
        }
    }
}

impl BlockMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_axial > 0.0 && self.window_lateral > 0.0) {
            return Err(Error::invalid("block-matching windows must be positive"));
        }
        for o in [self.overlap_axial, self.overlap_lateral] {
            if !(0.0..1.0).contains(&o) {
                return Err(Error::invalid(format!("overlap {o} outside [0, 1)")));
            }
        }
        if self.median_filter.iter().any(|s| s % 2 == 0) {
            return Err(Error::invalid("median filter size must be odd"));
        }
        Ok(())
    }
}

/// Window-center grid of displacement estimates, rows along the axial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseDisplacementGrid {
    /// Axial coordinates of the window centers (one per row).
    pub x: Vec<f64>,
    /// Lateral coordinates of the window centers (one per column).
    pub y: Vec<f64>,
    /// Row-major displacements in millimetres.
    pub displacement: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl CoarseDisplacementGrid {
    pub fn rows(&self) -> usize {
        self.x.len()
    }

    pub fn cols(&self) -> usize {
        self.y.len()
    }

    pub fn get(&self, r: usize, c: usize) -> Option<[f64; 2]> {
        let k = r * self.cols() + c;
        self.valid[k].then_some(self.displacement[k])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_mm,y_mm,ux_mm,uy_mm,valid\n");
        for (r, x) in self.x.iter().enumerate() {
            for (c, y) in self.y.iter().enumerate() {
                let k = r * self.cols() + c;
                let d = self.displacement[k];
                s.push_str(&format!(
                    "{x:.17e},{y:.17e},{:.17e},{:.17e},{}\n",
                    d[0],
                    d[1],
                    u8::from(self.valid[k])
                ));
            }
        }
        s
    }
}

/// Prefix sums over `[0, i) × [0, j)` of values and squared values.
struct Integral {
    cols: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(im: &RfImage) -> Self {
        let (n, m) = (im.n_axial(), im.n_lateral());
        let cols = m + 1;
        let mut sum = vec![0.0; (n + 1) * cols];
        let mut sq = vec![0.0; (n + 1) * cols];
        for i in 0..n {
            let (mut rs, mut rq) = (0.0, 0.0);
            for j in 0..m {
                let v = im.get(i, j);
                rs += v;
                rq += v * v;
                sum[(i + 1) * cols + j + 1] = sum[i * cols + j + 1] + rs;
                sq[(i + 1) * cols + j + 1] = sq[i * cols + j + 1] + rq;
            }
        }
        Self { cols, sum, sq }
    }

    fn rect(&self, t: &[f64], i: usize, j: usize, h: usize, w: usize) -> f64 {
        let c = self.cols;
        t[(i + h) * c + j + w] - t[i * c + j + w] - t[(i + h) * c + j] + t[i * c + j]
    }
}

fn pixels(length: f64, spacing: f64) -> usize {
    ((length / spacing).round() as usize).max(2)
}

fn window_starts(n: usize, w: usize, overlap: f64) -> Vec<usize> {
    let step = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
    (0..).map(|k| k * step).take_while(|s| s + w <= n).collect()
}

/// Block matching of every window of `i1` against `i2`.
pub fn ncc_match(i1: &RfImage, i2: &RfImage, cfg: &BlockMatchConfig) -> Result<CoarseDisplacementGrid> {
    cfg.validate()?;
    if !i1.same_geometry(i2) {
        return Err(Error::Incompatible(
            "block matching needs images of identical geometry".into(),
        ));
    }
    let g = *i1.geometry();
    let wa = pixels(cfg.window_axial, g.axial_spacing);
    let wl = pixels(cfg.window_lateral, g.lateral_spacing);
    if wa > g.n_axial || wl > g.n_lateral {
        return Err(Error::invalid(format!(
            "window of {wa}x{wl} pixels does not fit a {}x{} image",
            g.n_axial, g.n_lateral
        )));
    }
    let [ra, rl] = cfg.search_radius.unwrap_or([
        (0.15 * g.n_axial as f64).ceil() as usize,
        (0.15 * g.n_lateral as f64).ceil() as usize,
    ]);
    let rows = window_starts(g.n_axial, wa, cfg.overlap_axial);
    let cols = window_starts(g.n_lateral, wl, cfg.overlap_lateral);
    let integral = Integral::new(i2);
    let npx = (wa * wl) as f64;

    let jobs: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let results: Vec<Option<[i64; 2]>> = jobs
        .par_iter()
        .map(|&(r0, c0)| {
            let mut centered = Vec::with_capacity(wa * wl);
            for i in r0..r0 + wa {
                for j in c0..c0 + wl {
                    centered.push(i1.get(i, j));
                }
            }
            let mean = centered.iter().sum::<f64>() / npx;
            centered.iter_mut().for_each(|v| *v -= mean);
            let var1: f64 = centered.iter().map(|v| v * v).sum();
            let scale1: f64 = centered.iter().map(|v| (v + mean) * (v + mean)).sum();
            if !(var1 > 1e-14 * scale1) {
                return None;
            }
            let mut best: Option<(f64, [i64; 2])> = None;
            let si_lo = -(ra.min(r0) as i64);
            let si_hi = ra.min(g.n_axial - wa - r0) as i64;
            let sj_lo = -(rl.min(c0) as i64);
            let sj_hi = rl.min(g.n_lateral - wl - c0) as i64;
            for si in si_lo..=si_hi {
                let i = (r0 as i64 + si) as usize;
                for sj in sj_lo..=sj_hi {
                    let j = (c0 as i64 + sj) as usize;
                    let s2 = integral.rect(&integral.sum, i, j, wa, wl);
                    let q2 = integral.rect(&integral.sq, i, j, wa, wl);
                    let var2 = q2 - s2 * s2 / npx;
                    if !(var2 > 1e-12 * q2) {
                        continue;
                    }
                    let mut cross = 0.0;
                    for a in 0..wa {
                        let row = &centered[a * wl..(a + 1) * wl];
                        let base = (i + a) * g.n_lateral + j;
                        let im2 = &i2.samples()[base..base + wl];
                        cross += row.iter().zip(im2).map(|(p, q)| p * q).sum::<f64>();
                    }
                    let ncc = cross / (var1 * var2).sqrt();
                    let s = [si, sj];
                    let better = match best {
                        None => true,
                        Some((b, bs)) => ncc > b || (ncc == b && (norm2i(s), s) < (norm2i(bs), bs)),
                    };
                    if better {
                        best = Some((ncc, s));
                    }
                }
            }
            // A peak on a side of the search range that the image border cut
            // short may only be the best of a truncated search.
            best.and_then(|(ncc, s)| {
                let clipped = (s[0] == si_lo && si_lo > -(ra as i64))
                    || (s[0] == si_hi && si_hi < ra as i64)
                    || (s[1] == sj_lo && sj_lo > -(rl as i64))
                    || (s[1] == sj_hi && sj_hi < rl as i64);
                (!clipped || ncc >= 1.0 - 1e-9).then_some(s)
            })
        })
        .collect();

    let x = rows
        .iter()
        .map(|&r| g.origin[0] + (r as f64 + (wa - 1) as f64 / 2.0) * g.axial_spacing)
        .collect();
    let y = cols
        .iter()
        .map(|&c| g.origin[1] + (c as f64 + (wl - 1) as f64 / 2.0) * g.lateral_spacing)
        .collect();
    let displacement = results
        .iter()
        .map(|r| {
            r.map_or([0.0, 0.0], |s| {
                [s[0] as f64 * g.axial_spacing, s[1] as f64 * g.lateral_spacing]
            })
        })
        .collect();
    let valid = results.iter().map(Option::is_some).collect();
    Ok(CoarseDisplacementGrid {
        x,
        y,
        displacement,
        valid,
    })
}

fn norm2i(s: [i64; 2]) -> i64 {
    s[0] * s[0] + s[1] * s[1]
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Component-wise median over a `size` neighborhood with edge replication.
/// Invalid entries are left out; an entry stays invalid only if its whole
/// neighborhood is invalid.
pub fn median_filter_grid(grid: &CoarseDisplacementGrid, size: [usize; 2]) -> Result<CoarseDisplacementGrid> {
    if size.iter().any(|s| s % 2 == 0) {
        return Err(Error::invalid("median filter size must be odd"));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let (hr, hc) = ((size[0] / 2) as i64, (size[1] / 2) as i64);
    let mut out = grid.clone();
    let mut bx = Vec::new();
    let mut by = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            bx.clear();
            by.clear();
            for dr in -hr..=hr {
                let rr = (r as i64 + dr).clamp(0, rows as i64 - 1) as usize;
                for dc in -hc..=hc {
                    let cc = (c as i64 + dc).clamp(0, cols as i64 - 1) as usize;
                    if let Some(d) = grid.get(rr, cc) {
                        bx.push(d[0]);
                        by.push(d[1]);
                    }
                }
            }
            let k = r * cols + c;
            if bx.is_empty() {
                out.valid[k] = false;
            } else {
                out.displacement[k] = [median(&mut bx), median(&mut by)];
                out.valid[k] = true;
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation of the grid at `points`. Points beyond the grid
/// hull are clamped onto it. Entries that are still invalid take the median
/// of the valid ones.
pub fn interpolate_grid(grid: &CoarseDisplacementGrid, points: &[Point]) -> Result<Vec<[f64; 2]>> {
    if grid.rows() == 0 || grid.cols() == 0 {
        return Err(Error::invalid("coarse displacement grid is empty"));
    }
    let mut fill = [0.0; 2];
    for (c, f) in fill.iter_mut().enumerate() {
        let mut v: Vec<f64> = grid
            .displacement
            .iter()
            .zip(&grid.valid)
            .filter(|(_, ok)| **ok)
            .map(|(d, _)| d[c])
            .collect();
        if v.is_empty() {
            return Err(Error::invalid("coarse displacement grid has no valid estimate"));
        }
        *f = median(&mut v);
    }
    let value = |r: usize, c: usize| grid.get(r, c).unwrap_or(fill);
    let bracket = |axis: &[f64], t: f64| -> (usize, usize, f64) {
        let n = axis.len();
        if n == 1 || t <= axis[0] {
            return (0, 0, 0.0);
        }
        if t >= axis[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let k = axis.partition_point(|&a| a <= t).clamp(1, n - 1) - 1;
        (k, k + 1, (t - axis[k]) / (axis[k + 1] - axis[k]))
    };
    Ok(points
        .iter()
        .map(|p| {
            let (r0, r1, tx) = bracket(&grid.x, p[0]);
            let (c0, c1, ty) = bracket(&grid.y, p[1]);
            let (a, b, c, d) = (value(r0, c0), value(r1, c0), value(r0, c1), value(r1, c1));
            let mut u = [0.0; 2];
            for k in 0..2 {
                u[k] =
                    (1.0 - tx) * (1.0 - ty) * a[k] + tx * (1.0 - ty) * b[k] + (1.0 - tx) * ty * c[k] + tx * ty * d[k];
            }
            u
        })
        .collect())
}

/// [`interpolate_grid`] at the mesh nodes.
pub fn to_initial_guess(grid: &CoarseDisplacementGrid, mesh: &QuadMesh) -> Result<NodalField> {
    let values = interpolate_grid(grid, mesh.nodes())?;
    NodalField::from_values(values.into_iter().flatten().collect())
}
