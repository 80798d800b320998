//! Synthetic RF frames: point scatterers convolved with a separable,
//! spatially invariant pulse-echo PSF.
//!
//! The axial PSF is a Gaussian-enveloped cosine in round-trip time
//! `t = 2 dx / c`; the lateral PSF is a Gaussian. Both envelopes are specified
//! by their FWHM (`sigma = FWHM / 2.355`) and truncated at three sigma.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Disk, Rect};
use crate::mesh::{interpolate_field_clamped, NodalField, Point, QuadMesh};
use crate::rf::{ImageGeometry, RfImage};

const FWHM_TO_SIGMA: f64 = 2.355;
const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    pub positions: Vec<Point>,
    pub amplitudes: Vec<f64>,
}

impl ScattererField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `x_mm,y_mm,amplitude` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_mm,y_mm,amplitude\n");
        for (p, a) in self.positions.iter().zip(&self.amplitudes) {
            s.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", p[0], p[1], a));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Psf {
    pub center_frequency_mhz: f64,
    /// FWHM of the Gaussian pulse envelope.
    pub pulse_length_us: f64,
    pub lateral_fwhm_mm: f64,
    pub sound_speed_m_s: f64,
}

impl Default for Psf {
    /// Linear-array pulse: 5.5 MHz, 0.43 us envelope, 1.4 mm lateral FWHM, 1540 m/s.
    fn default() -> Self {
        Self {
            center_frequency_mhz: 5.5,
            pulse_length_us: 0.43,
            lateral_fwhm_mm: 1.4,
            sound_speed_m_s: 1540.0,
        }
    }
}

impl Psf {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.center_frequency_mhz,
            self.pulse_length_us,
            self.lateral_fwhm_mm,
            self.sound_speed_m_s,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !ok {
            return Err(Error::invalid("PSF parameters must be positive and finite"));
        }
        Ok(())
    }

    /// Speed of sound in mm/us.
    fn c_mm_us(&self) -> f64 {
        self.sound_speed_m_s * 1e-3
    }

    pub fn sigma_t_us(&self) -> f64 {
        self.pulse_length_us / FWHM_TO_SIGMA
    }

    /// Axial envelope sigma in millimetres.
    pub fn sigma_axial_mm(&self) -> f64 {
        self.sigma_t_us() * self.c_mm_us() / 2.0
    }

    pub fn sigma_lateral_mm(&self) -> f64 {
        self.lateral_fwhm_mm / FWHM_TO_SIGMA
    }

    /// Spatial period of the axial carrier, `c / (2 f_c)`.
    pub fn axial_period_mm(&self) -> f64 {
        self.c_mm_us() / (2.0 * self.center_frequency_mhz)
    }

    /// Axial spacing of RF samples acquired at `sampling_mhz`.
    pub fn axial_spacing_for(&self, sampling_mhz: f64) -> f64 {
        self.c_mm_us() / (2.0 * sampling_mhz)
    }

    /// Checks that `grid` resolves the carrier (more than two samples per period).
    pub fn check_sampling(&self, grid: &ImageGeometry) -> Result<()> {
        let per_period = self.axial_period_mm() / grid.axial_spacing;
        if per_period <= 2.0 {
            return Err(Error::invalid(format!(
                "axial spacing {} mm under-samples the {} MHz carrier ({per_period:.2} samples per period)",
                grid.axial_spacing, self.center_frequency_mhz
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn axial(&self, dx: f64) -> f64 {
        let t = 2.0 * dx / self.c_mm_us();
        let st = self.sigma_t_us();
        if t.abs() > TRUNCATION_SIGMAS * st {
            return 0.0;
        }
        (2.0 * std::f64::consts::PI * self.center_frequency_mhz * t).cos() * (-t * t / (2.0 * st * st)).exp()
    }

    #[inline]
    pub fn lateral(&self, dy: f64) -> f64 {
        let s = self.sigma_lateral_mm();
        if dy.abs() > TRUNCATION_SIGMAS * s {
            return 0.0;
        }
        (-dy * dy / (2.0 * s * s)).exp()
    }

    /// PSF value at offset `(dx, dy)` from the scatterer.
    pub fn evaluate(&self, dx: f64, dy: f64) -> f64 {
        self.axial(dx) * self.lateral(dy)
    }
}

/// Uniformly placed scatterers with amplitudes uniform on `[0, 1]`, multiplied
/// by `inclusion_gain` inside `inclusion`. The count is `round(density * area)`.
pub fn gen_scatterers(
    region: Rect,
    density: f64,
    inclusion: Option<Disk>,
    inclusion_gain: f64,
    seed: u64,
) -> Result<ScattererField> {
    if region.is_empty() {
        return Err(Error::invalid("scatterer region is empty"));
    }
    if !(density > 0.0) {
        return Err(Error::invalid("scatterer density must be positive"));
    }
    let count = (density * region.area()).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(count);
    let mut amplitudes = Vec::with_capacity(count);
    for _ in 0..count {
        let p = [
            rng.random_range(region.min[0]..region.max[0]),
            rng.random_range(region.min[1]..region.max[1]),
        ];
        let mut a: f64 = rng.random_range(0.0..=1.0);
        if inclusion.is_some_and(|d| d.contains(p)) {
            a *= inclusion_gain;
        }
        positions.push(p);
        amplitudes.push(a);
    }
    Ok(ScattererField { positions, amplitudes })
}

/// Splats every scatterer's truncated PSF onto the grid. Rows are processed in
/// parallel blocks; each pixel accumulates scatterers in input order, so the
/// result does not depend on the thread count.
pub fn render_rf(scatterers: &ScattererField, psf: &Psf, grid: &ImageGeometry) -> Result<RfImage> {
    psf.validate()?;
    let g = *grid;
    let reach_x = TRUNCATION_SIGMAS * psf.sigma_axial_mm();
    let reach_y = TRUNCATION_SIGMAS * psf.sigma_lateral_mm();
    let nl = g.n_lateral;
    let block = 64usize;
    let mut samples = vec![0.0; g.len()];
    samples.par_chunks_mut(block * nl).enumerate().for_each(|(b, chunk)| {
        let row0 = b * block;
        let rows = chunk.len() / nl;
        let x_lo = g.origin[0] + row0 as f64 * g.axial_spacing;
        let x_hi = g.origin[0] + (row0 + rows - 1) as f64 * g.axial_spacing;
        let mut ax = Vec::new();
        let mut lat = Vec::new();
        for (p, &amp) in scatterers.positions.iter().zip(&scatterers.amplitudes) {
            if p[0] + reach_x < x_lo || p[0] - reach_x > x_hi {
                continue;
            }
            let i0 = (((p[0] - reach_x - g.origin[0]) / g.axial_spacing).ceil() as isize).max(row0 as isize);
            let i1 =
                (((p[0] + reach_x - g.origin[0]) / g.axial_spacing).floor() as isize).min((row0 + rows) as isize - 1);
            let j0 = (((p[1] - reach_y - g.origin[1]) / g.lateral_spacing).ceil() as isize).max(0);
            let j1 = (((p[1] + reach_y - g.origin[1]) / g.lateral_spacing).floor() as isize).min(nl as isize - 1);
            if i0 > i1 || j0 > j1 {
                continue;
            }
            ax.clear();
            lat.clear();
            ax.extend((i0..=i1).map(|i| amp * psf.axial(g.origin[0] + i as f64 * g.axial_spacing - p[0])));
            lat.extend((j0..=j1).map(|j| psf.lateral(g.origin[1] + j as f64 * g.lateral_spacing - p[1])));
            for (di, &a) in ax.iter().enumerate() {
                let r = (i0 as usize + di - row0) * nl;
                for (dj, &l) in lat.iter().enumerate() {
                    chunk[r + j0 as usize + dj] += a * l;
                }
            }
        }
    });
    RfImage::from_samples(g, samples)
}

/// Moves scatterers by `displacement` (defined on `mesh`); scatterers outside
/// the mesh take the value at the closest mesh point.
pub fn displace_scatterers(
    scatterers: &ScattererField,
    mesh: &QuadMesh,
    displacement: &NodalField,
) -> Result<ScattererField> {
    displacement.check_mesh(mesh)?;
    let u = interpolate_field_clamped(mesh, displacement, &scatterers.positions);
    let positions = scatterers
        .positions
        .iter()
        .zip(u)
        .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
        .collect();
    Ok(ScattererField {
        positions,
        amplitudes: scatterers.amplitudes.clone(),
    })
}

/// Adds white Gaussian noise with variance `P_signal / 10^(snr_db / 10)`, where
/// `P_signal` is the mean square over the whole image. `snr_db = +inf` returns
/// the image unchanged.
pub fn add_noise(image: &RfImage, snr_db: f64, seed: u64) -> Result<RfImage> {
    add_noise_stream(image, snr_db, seed, 0)
}

pub(crate) fn add_noise_stream(image: &RfImage, snr_db: f64, seed: u64, stream: u64) -> Result<RfImage> {
    if snr_db == f64::INFINITY {
        return Ok(image.clone());
    }
    if snr_db.is_nan() {
        return Err(Error::invalid("SNR must be a number"));
    }
    let p_sig = image.power();
    if p_sig == 0.0 {
        return Err(Error::invalid("SNR is undefined for an all-zero image"));
    }
    let sigma = (p_sig / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noisy = image.samples().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    RfImage::from_samples(*image.geometry(), noisy)
}

/// Envelope of each A-line from the analytic signal (FFT Hilbert transform).
pub fn bmode_envelope(image: &RfImage) -> Result<RfImage> {
    let n = image.n_axial();
    if n < 16 {
        return Err(Error::invalid(format!(
            "envelope needs at least 16 axial samples, got {n}"
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = RfImage::zeros(*image.geometry());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for j in 0..image.n_lateral() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(image.get(i, j), 0.0);
        }
        fwd.process(&mut buf);
        // analytic signal: keep DC (and Nyquist), double positive, zero negative
        let half = n / 2;
        for (k, b) in buf.iter_mut().enumerate() {
            let h = if k == 0 || (n.is_multiple_of(2) && k == half) {
                1.0
            } else if k < n.div_ceil(2) {
                2.0
            } else {
                0.0
            };
            *b *= h;
        }
        inv.process(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            out.set(i, j, b.norm() / n as f64);
        }
    }
    Ok(out)
}

/// Renders one frame per truth displacement (frame 0 must be the zero field),
/// each with independent noise drawn from stream `k` of `seed`.
pub fn make_sequence(
    scatterers: &ScattererField,
    psf: &Psf,
    grid: &ImageGeometry,
    mesh: &QuadMesh,
    truth_frames: &[NodalField],
    snr_db: f64,
    seed: u64,
) -> Result<Vec<RfImage>> {
    let first = truth_frames
        .first()
        .ok_or_else(|| Error::invalid("sequence needs at least one truth frame"))?;
    if first.as_slice().iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("truth frame 0 must be the zero field"));
    }
    truth_frames
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let moved = displace_scatterers(scatterers, mesh, u)?;
            let clean = render_rf(&moved, psf, grid)?;
            add_noise_stream(&clean, snr_db, seed, k as u64)
        })
        .collect()
}
