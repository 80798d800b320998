//! Sampled RF frames, cubic-convolution resampling and the `rfimg v1` format.
//!
//! Samples are stored row-major with rows along the axial direction:
//! `samples[i * n_lateral + j]` is axial sample `i` of scan line `j`, located at
//! `origin + (i * axial_spacing, j * lateral_spacing)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{put_f64, put_f64s, put_u64, Reader};
use crate::mesh::Point;

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

const MAGIC: &str = "rfimg v1";

/// Sampling grid of an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGeometry {
    pub n_axial: usize,
    pub n_lateral: usize,
    pub axial_spacing: f64,
    pub lateral_spacing: f64,
    pub origin: Point,
}

impl ImageGeometry {
    pub fn new(
        n_axial: usize,
        n_lateral: usize,
        axial_spacing: f64,
        lateral_spacing: f64,
        origin: Point,
    ) -> Result<Self> {
        if n_axial == 0 || n_lateral == 0 {
            return Err(Error::invalid("image needs at least one sample per direction"));
        }
        if !(axial_spacing > 0.0 && lateral_spacing > 0.0) {
            return Err(Error::invalid("image spacings must be positive"));
        }
        Ok(Self {
            n_axial,
            n_lateral,
            axial_spacing,
            lateral_spacing,
            origin,
        })
    }

    /// Grid covering `[x0, x0 + extent_x] x [y0, y0 + extent_y]` at the given spacings.
    pub fn covering(origin: Point, extent: [f64; 2], axial_spacing: f64, lateral_spacing: f64) -> Result<Self> {
        let n_axial = (extent[0] / axial_spacing).floor() as usize + 1;
        let n_lateral = (extent[1] / lateral_spacing).floor() as usize + 1;
        Self::new(n_axial, n_lateral, axial_spacing, lateral_spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.n_axial * self.n_lateral
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.axial_spacing,
            self.origin[1] + j as f64 * self.lateral_spacing,
        ]
    }

    /// Physical extent `[x_min, x_max] x [y_min, y_max]` of the sample centres.
    pub fn extent(&self) -> (Point, Point) {
        (self.origin, self.position(self.n_axial - 1, self.n_lateral - 1))
    }

    pub fn pixel_area(&self) -> f64 {
        self.axial_spacing * self.lateral_spacing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfImage {
    geometry: ImageGeometry,
    samples: Vec<f64>,
}

#[inline]
fn keys_weight(s: f64) -> f64 {
    let a = KEYS_A;
    let t = s.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

#[inline]
fn keys_derivative(s: f64) -> f64 {
    let a = KEYS_A;
    let t = s.abs();
    let d = if t <= 1.0 {
        (3.0 * (a + 2.0) * t - 2.0 * (a + 3.0)) * t
    } else if t < 2.0 {
        (3.0 * a * t - 10.0 * a) * t + 8.0 * a
    } else {
        0.0
    };
    d * s.signum()
}

impl RfImage {
    pub fn zeros(geometry: ImageGeometry) -> Self {
        Self {
            samples: vec![0.0; geometry.len()],
            geometry,
        }
    }

    pub fn from_samples(geometry: ImageGeometry, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "expected {} samples, got {}",
                geometry.len(),
                samples.len()
            )));
        }
        Ok(Self { geometry, samples })
    }

    pub fn geometry(&self) -> &ImageGeometry {
        &self.geometry
    }

    pub fn n_axial(&self) -> usize {
        self.geometry.n_axial
    }

    pub fn n_lateral(&self) -> usize {
        self.geometry.n_lateral
    }

    pub fn axial_spacing(&self) -> f64 {
        self.geometry.axial_spacing
    }

    pub fn lateral_spacing(&self) -> f64 {
        self.geometry.lateral_spacing
    }

    pub fn origin(&self) -> Point {
        self.geometry.origin
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.samples[i * self.geometry.n_lateral + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.geometry.n_lateral;
        self.samples[i * n + j] = v;
    }

    /// A-line `j` (all axial samples of scan line `j`).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_axial()).map(|i| self.get(i, j)).collect()
    }

    pub fn same_geometry(&self, other: &RfImage) -> bool {
        self.geometry == other.geometry
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            geometry: self.geometry,
            samples: self.samples.iter().map(|&v| f(v)).collect(),
        }
    }

    #[inline]
    fn fractional_index(&self, p: Point) -> Option<(f64, f64)> {
        let g = &self.geometry;
        let fi = (p[0] - g.origin[0]) / g.axial_spacing;
        let fj = (p[1] - g.origin[1]) / g.lateral_spacing;
        let eps = 1e-9;
        if fi < -eps
            || fj < -eps
            || fi > (g.n_axial - 1) as f64 + eps
            || fj > (g.n_lateral - 1) as f64 + eps
            || !fi.is_finite()
            || !fj.is_finite()
        {
            return None;
        }
        Some((fi, fj))
    }

    #[inline]
    fn taps(&self, f: f64, n: usize, deriv: bool) -> ([usize; 4], [f64; 4], [f64; 4]) {
        // Positions rebuilt from pixel indices land within rounding of the
        // grid; snapping makes the interpolant reproduce samples exactly.
        let r = f.round();
        let f = if (f - r).abs() < 1e-10 { r } else { f };
        let base = f.floor() as isize;
        let mut idx = [0usize; 4];
        let mut w = [0.0; 4];
        let mut dw = [0.0; 4];
        for k in 0..4 {
            let t = base - 1 + k as isize;
            idx[k] = t.clamp(0, n as isize - 1) as usize;
            let s = f - t as f64;
            w[k] = keys_weight(s);
            if deriv {
                dw[k] = keys_derivative(s);
            }
        }
        (idx, w, dw)
    }

    /// Cubic-convolution value at physical point `p`; zero outside the
    /// sampled extent. Taps past the border replicate the edge sample.
    #[inline]
    pub fn sample_cubic(&self, p: Point) -> f64 {
        let Some((fi, fj)) = self.fractional_index(p) else {
            return 0.0;
        };
        let (ii, wi, _) = self.taps(fi, self.geometry.n_axial, false);
        let (jj, wj, _) = self.taps(fj, self.geometry.n_lateral, false);
        let n = self.geometry.n_lateral;
        let mut v = 0.0;
        for a in 0..4 {
            let row = ii[a] * n;
            let mut r = 0.0;
            for b in 0..4 {
                r += wj[b] * self.samples[row + jj[b]];
            }
            v += wi[a] * r;
        }
        v
    }

    /// Value and physical gradient of the cubic-convolution interpolant.
    pub fn sample_cubic_with_gradient(&self, p: Point) -> (f64, [f64; 2]) {
        let Some((fi, fj)) = self.fractional_index(p) else {
            return (0.0, [0.0, 0.0]);
        };
        let (ii, wi, dwi) = self.taps(fi, self.geometry.n_axial, true);
        let (jj, wj, dwj) = self.taps(fj, self.geometry.n_lateral, true);
        let n = self.geometry.n_lateral;
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for a in 0..4 {
            let row = ii[a] * n;
            let (mut r, mut rd) = (0.0, 0.0);
            for b in 0..4 {
                let s = self.samples[row + jj[b]];
                r += wj[b] * s;
                rd += dwj[b] * s;
            }
            v += wi[a] * r;
            gx += dwi[a] * r;
            gy += wi[a] * rd;
        }
        (
            v,
            [gx / self.geometry.axial_spacing, gy / self.geometry.lateral_spacing],
        )
    }

    /// Centred finite-difference gradient images (one-sided at the border).
    pub fn centered_gradient(&self) -> (RfImage, RfImage) {
        let g = self.geometry;
        let (na, nl) = (g.n_axial, g.n_lateral);
        let mut gx = RfImage::zeros(g);
        let mut gy = RfImage::zeros(g);
        for i in 0..na {
            for j in 0..nl {
                let dx = if na == 1 {
                    0.0
                } else if i == 0 {
                    (self.get(1, j) - self.get(0, j)) / g.axial_spacing
                } else if i == na - 1 {
                    (self.get(i, j) - self.get(i - 1, j)) / g.axial_spacing
                } else {
                    (self.get(i + 1, j) - self.get(i - 1, j)) / (2.0 * g.axial_spacing)
                };
                let dy = if nl == 1 {
                    0.0
                } else if j == 0 {
                    (self.get(i, 1) - self.get(i, 0)) / g.lateral_spacing
                } else if j == nl - 1 {
                    (self.get(i, j) - self.get(i, j - 1)) / g.lateral_spacing
                } else {
                    (self.get(i, j + 1) - self.get(i, j - 1)) / (2.0 * g.lateral_spacing)
                };
                gx.set(i, j, dx);
                gy.set(i, j, dy);
            }
        }
        (gx, gy)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(64 + 8 * self.samples.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        put_u64(&mut out, g.n_axial as u64);
        put_u64(&mut out, g.n_lateral as u64);
        put_f64(&mut out, g.axial_spacing);
        put_f64(&mut out, g.lateral_spacing);
        put_f64(&mut out, g.origin[0]);
        put_f64(&mut out, g.origin[1]);
        put_f64s(&mut out, &self.samples);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "rfimg");
        r.expect_line(MAGIC)?;
        let n_axial = r.u64()? as usize;
        let n_lateral = r.u64()? as usize;
        let dx = r.f64()?;
        let dy = r.f64()?;
        let ox = r.f64()?;
        let oy = r.f64()?;
        let geometry = ImageGeometry::new(n_axial, n_lateral, dx, dy, [ox, oy])
            .map_err(|e| Error::format("rfimg", e.to_string()))?;
        let samples = r.f64_vec(geometry.len())?;
        r.finish()?;
        Ok(Self { geometry, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_bytes(path)?)
    }

    /// One CSV line per axial sample, one column per scan line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_axial() {
            for j in 0..self.n_lateral() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{:e}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Sample type of raw little-endian RF data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawSampleType {
    I16,
    F32,
    F64,
}

impl RawSampleType {
    pub fn size(self) -> usize {
        match self {
            Self::I16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b.try_into().expect("eight bytes")),
        }
    }
}

impl std::str::FromStr for RawSampleType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i16" => Ok(Self::I16),
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::invalid(format!(
                "unknown sample type `{other}` (expected i16, f32 or f64)"
            ))),
        }
    }
}

/// Layout of a raw RF recording: consecutive frames, each stored line by
/// line with `axial_samples` contiguous samples per scan line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawLayout {
    pub sample_type: RawSampleType,
    pub axial_samples: usize,
    pub lines: usize,
    pub axial_spacing: f64,
    pub lateral_spacing: f64,
    pub origin: Point,
    /// Keep frames `0, stride, 2·stride, …`.
    pub stride: usize,
}

/// Decodes a raw recording into frames, keeping every `stride`-th frame.
pub fn convert_raw_frames(bytes: &[u8], layout: &RawLayout) -> Result<Vec<RfImage>> {
    if layout.stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let geometry = ImageGeometry::new(
        layout.axial_samples,
        layout.lines,
        layout.axial_spacing,
        layout.lateral_spacing,
        layout.origin,
    )?;
    let frame_bytes = geometry.len() * layout.sample_type.size();
    if bytes.is_empty() || !bytes.len().is_multiple_of(frame_bytes) {
        return Err(Error::format(
            "raw rf",
            format!(
                "{} bytes is not a whole number of {frame_bytes}-byte frames",
                bytes.len()
            ),
        ));
    }
    let sz = layout.sample_type.size();
    bytes
        .chunks_exact(frame_bytes)
        .step_by(layout.stride)
        .map(|frame| {
            let mut img = RfImage::zeros(geometry);
            for (line, chunk) in frame.chunks_exact(layout.axial_samples * sz).enumerate() {
                for (i, b) in chunk.chunks_exact(sz).enumerate() {
                    img.set(i, line, layout.sample_type.decode(b));
                }
            }
            Ok(img)
        })
        .collect()
}
