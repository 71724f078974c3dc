//! Single-lobe rotating PSF synthesis.
//!
//! The pupil carries a spiral phase over L equal-area annular zones plus a
//! quadratic defocus term; a centered FFT of the pupil field gives the image
//! intensity. As defocus sweeps [-Lπ, Lπ] the lobe turns once about the
//! geometric image point, so depth reads out as rotation angle.

use crate::error::{Error, Result};
use crate::fft::{fftshift, ifftshift, Fft2};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Geometry of the synthesized PSF stack.
///
/// Lengths are dimensionless: the pupil square is measured in units of the
/// pupil radius, image pixels in units of λ·z_I/R divided by `pupil_side`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfConfig {
    /// Number of concentric equal-area annular zones in the phase mask.
    pub zone_count: u32,
    /// Image (and pupil-grid) side length in pixels.
    pub grid_size: usize,
    /// Side length of the sampled pupil-plane square, in pupil-radius units.
    pub pupil_side: f64,
    /// Number of defocus samples in the dictionary.
    pub depth_slices: usize,
    /// Closed interval of defocus values covered by the dictionary.
    pub zeta_range: (f64, f64),
}

impl Default for PsfConfig {
    fn default() -> Self {
        PsfConfig {
            zone_count: 7,
            grid_size: 96,
            pupil_side: 4.0,
            depth_slices: 21,
            zeta_range: (-21.0, 21.0),
        }
    }
}

impl PsfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zone_count == 0 {
            return Err(Error::domain("zone_count must be positive"));
        }
        if self.grid_size == 0 {
            return Err(Error::domain("grid_size must be positive"));
        }
        if !(self.pupil_side > 2.0) {
            return Err(Error::domain(format!(
                "pupil_side must exceed 2 so the unit pupil fits; got {}",
                self.pupil_side
            )));
        }
        let (lo, hi) = self.zeta_range;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::domain(format!("invalid zeta_range [{lo}, {hi}]")));
        }
        let limit = self.zone_count as f64 * PI;
        if lo < -limit || hi > limit {
            return Err(Error::domain(format!(
                "zeta_range [{lo}, {hi}] outside the usable [-{limit:.3}, {limit:.3}]"
            )));
        }
        match self.depth_slices {
            0 => return Err(Error::domain("depth_slices must be positive")),
            1 if lo != hi => {
                return Err(Error::domain(
                    "a single depth slice requires a degenerate zeta_range",
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Image pixel pitch in units of λ·z_I/R.
    pub fn pixel_pitch(&self) -> f64 {
        1.0 / self.pupil_side
    }

    /// Uniform defocus samples over `zeta_range`.
    pub fn zeta_samples(&self) -> Vec<f64> {
        let (lo, hi) = self.zeta_range;
        let d = self.depth_slices;
        if d == 1 {
            return vec![lo];
        }
        (0..d)
            .map(|w| lo + (hi - lo) * w as f64 / (d - 1) as f64)
            .collect()
    }
}

/// Physical imaging parameters; only used to map ranges to defocus values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConfig {
    /// Imaging wavelength λ in meters.
    pub wavelength: f64,
    /// Distance l_0 from the lens to the best-focus plane, meters.
    pub focus_distance: f64,
    /// Distance z_I from the lens to the image plane, meters.
    pub image_distance: f64,
    /// Pupil radius R in meters.
    pub pupil_radius: f64,
}

impl PhysicalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("focus_distance", self.focus_distance),
            ("image_distance", self.image_distance),
            ("pupil_radius", self.pupil_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::domain(format!("{name} must be strictly positive")));
            }
        }
        Ok(())
    }
}

/// Stack of unit-sum PSF slices indexed by defocus, with per-slice Frobenius
/// norms used by the sparse penalties.
#[derive(Debug, Clone)]
pub struct PsfDictionary {
    /// d × N × N intensities, slice w centered at pixel (⌊N/2⌋, ⌊N/2⌋).
    pub slices: Array3<f64>,
    /// Defocus value of each slice.
    pub zetas: Vec<f64>,
    /// Frobenius norm of each normalized slice.
    pub slice_norms: Vec<f64>,
}

impl PsfDictionary {
    pub fn depth_count(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.slices.shape()[1]
    }
}

/// Spiral phase ψ(u) = l·φ_u at pupil radius `u` and azimuth `phi_u`.
///
/// Zone l spans the half-open annulus [√((l-1)/L), √(l/L)); at a shared
/// boundary the larger zone index wins, and u = 1 belongs to zone L.
pub fn spiral_phase(u: f64, phi_u: f64, zone_count: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::domain(format!("pupil radius {u} outside [0, 1]")));
    }
    Ok(zone_index(u, zone_count) as f64 * phi_u)
}

fn zone_index(u: f64, zone_count: u32) -> u32 {
    let l_total = zone_count as f64;
    let mut zone = 1;
    for l in 1..zone_count {
        if u >= (l as f64 / l_total).sqrt() {
            zone = l + 1;
        } else {
            break;
        }
    }
    zone
}

/// Dimensionless defocus ζ = π(l_0 − z)R² / (λ l_0 z) of a source at range z.
pub fn defocus_from_range(z: f64, phys: &PhysicalConfig) -> Result<f64> {
    phys.validate()?;
    if !(z > 0.0) {
        return Err(Error::domain(format!("source range must be positive, got {z}")));
    }
    let r2 = phys.pupil_radius * phys.pupil_radius;
    Ok(PI * (phys.focus_distance - z) * r2 / (phys.wavelength * phys.focus_distance * z))
}

/// PSF intensity at defocus `zeta`, laterally shifted by (`dx`, `dy`) pixels
/// from the center pixel, normalized to unit sum.
///
/// The shift enters as a pupil-plane linear phase, so fractional positions are
/// exact rather than interpolated.
pub(crate) fn shifted_slice(
    zeta: f64,
    dx: f64,
    dy: f64,
    cfg: &PsfConfig,
    fft: &Fft2,
    scratch: &mut crate::fft::FftScratch,
) -> Array2<f64> {
    let n = cfg.grid_size;
    let c = (n / 2) as f64;
    let du = cfg.pupil_side / n as f64;
    let pitch = cfg.pixel_pitch();
    let boundaries: Vec<f64> = (1..cfg.zone_count)
        .map(|l| (l as f64 / cfg.zone_count as f64).sqrt())
        .collect();

    let mut pupil = vec![Complex64::default(); n * n];
    for i in 0..n {
        let uy = (i as f64 - c) * du;
        for j in 0..n {
            let ux = (j as f64 - c) * du;
            let u = ux.hypot(uy);
            if u <= 1.0 {
                let phi = uy.atan2(ux);
                let mut zone = 1u32;
                for (k, b) in boundaries.iter().enumerate() {
                    if u >= *b {
                        zone = k as u32 + 2;
                    } else {
                        break;
                    }
                }
                let psi = zone as f64 * phi;
                let shift = 2.0 * PI * pitch * (ux * dx + uy * dy);
                let phase = zeta * u * u - psi + shift;
                pupil[i * n + j] = Complex64::from_polar(1.0, phase);
            }
        }
    }

    let mut field = vec![Complex64::default(); n * n];
    ifftshift(&pupil, &mut field, n);
    fft.forward(&mut field, scratch);
    fftshift(&field, &mut pupil, n);

    let mut intensity = Array2::<f64>::zeros((n, n));
    let dst = intensity.as_slice_mut().expect("contiguous");
    let mut total = 0.0;
    for (out, v) in dst.iter_mut().zip(pupil.iter()) {
        *out = v.norm_sqr();
        total += *out;
    }
    for v in dst.iter_mut() {
        *v /= total;
    }
    intensity
}

/// One normalized PSF slice at defocus `zeta`, centered at (⌊N/2⌋, ⌊N/2⌋).
pub fn psf_slice(zeta: f64, cfg: &PsfConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let fft = Fft2::new(cfg.grid_size);
    let mut scratch = fft.make_scratch();
    Ok(shifted_slice(zeta, 0.0, 0.0, cfg, &fft, &mut scratch))
}

/// Build the full depth dictionary for `cfg`.
pub fn build_dictionary(cfg: &PsfConfig) -> Result<PsfDictionary> {
    cfg.validate()?;
    let n = cfg.grid_size;
    let zetas = cfg.zeta_samples();
    let fft = Fft2::new(n);
    let slices_vec: Vec<Array2<f64>> = zetas
        .par_iter()
        .map(|&z| {
            let mut scratch = fft.make_scratch();
            shifted_slice(z, 0.0, 0.0, cfg, &fft, &mut scratch)
        })
        .collect();

    let mut slices = Array3::<f64>::zeros((zetas.len(), n, n));
    for (w, s) in slices_vec.into_iter().enumerate() {
        slices.index_axis_mut(ndarray::Axis(0), w).assign(&s);
    }
    let slice_norms = slices
        .outer_iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(PsfDictionary {
        slices,
        zetas,
        slice_norms,
    })
}

/// Polar coordinates (angle, radius) of the brightest pixel about the slice
/// center; the angle convention is atan2(Δrow, Δcol).
pub fn peak_polar(slice: &Array2<f64>) -> (f64, f64) {
    let n = slice.shape()[0];
    let c = (n / 2) as f64;
    let mut best = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    for ((i, j), &v) in slice.indexed_iter() {
        if v > best {
            best = v;
            at = (i, j);
        }
    }
    let dy = at.0 as f64 - c;
    let dx = at.1 as f64 - c;
    (dy.atan2(dx), dx.hypot(dy))
}

/// Unwrap a sequence of angles in place so successive differences lie in (-π, π].
pub fn unwrap_angles(angles: &mut [f64]) {
    for i in 1..angles.len() {
        let mut delta = angles[i] - angles[i - 1];
        while delta > PI {
            delta -= 2.0 * PI;
        }
        while delta <= -PI {
            delta += 2.0 * PI;
        }
        angles[i] = angles[i - 1] + delta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_phase_zone_lookup() {
        // 0.3 < sqrt(1/7) ≈ 0.378 -> zone 1
        assert_eq!(spiral_phase(0.3, PI / 2.0, 7).unwrap(), PI / 2.0);
        // sqrt(6/7) ≈ 0.926 <= 0.99 -> zone 7
        assert_eq!(spiral_phase(0.99, 1.0, 7).unwrap(), 7.0);
        // boundary: larger zone wins
        assert_eq!(spiral_phase((1.0f64 / 7.0).sqrt(), 1.0, 7).unwrap(), 2.0);
        // u = 1 stays in the last zone
        assert_eq!(spiral_phase(1.0, 1.0, 7).unwrap(), 7.0);
        assert!(spiral_phase(1.0001, 0.0, 7).is_err());
        assert!(spiral_phase(-0.1, 0.0, 7).is_err());
    }

    #[test]
    fn defocus_formula() {
        let phys = PhysicalConfig {
            wavelength: 1e-6,
            focus_distance: 100.0,
            image_distance: 1.0,
            pupil_radius: 0.01,
        };
        // in-focus source
        assert_eq!(defocus_from_range(100.0, &phys).unwrap(), 0.0);
        // hand-evaluated closed form
        let z = defocus_from_range(50.0, &phys).unwrap();
        assert!((z - PI).abs() < 1e-12, "got {z}");
        // monotone decreasing in range
        let mut prev = f64::INFINITY;
        for z in [1.0, 10.0, 100.0, 1e3, 1e6] {
            let zeta = defocus_from_range(z, &phys).unwrap();
            assert!(zeta < prev);
            prev = zeta;
        }
        assert!(defocus_from_range(0.0, &phys).is_err());
        assert!(defocus_from_range(-5.0, &phys).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PsfConfig::default().validate().is_ok());
        let mut cfg = PsfConfig::default();
        cfg.pupil_side = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PsfConfig::default();
        cfg.zeta_range = (-30.0, 21.0); // below -7π
        assert!(cfg.validate().is_err());
        let mut cfg = PsfConfig::default();
        cfg.depth_slices = 1;
        assert!(cfg.validate().is_err());
        cfg.zeta_range = (0.0, 0.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn slice_is_normalized_and_nonnegative() {
        let cfg = PsfConfig {
            grid_size: 48,
            ..Default::default()
        };
        for zeta in [-15.0, 0.0, 4.2, 21.0] {
            let s = psf_slice(zeta, &cfg).unwrap();
            let sum: f64 = s.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} at zeta {zeta}");
            assert!(s.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn degenerate_dictionary_single_slice() {
        let cfg = PsfConfig {
            depth_slices: 1,
            zeta_range: (0.0, 0.0),
            grid_size: 32,
            ..Default::default()
        };
        let dict = build_dictionary(&cfg).unwrap();
        assert_eq!(dict.depth_count(), 1);
        assert_eq!(dict.zetas, vec![0.0]);
    }

    #[test]
    fn default_dictionary_zeta_grid() {
        let cfg = PsfConfig {
            grid_size: 32,
            ..Default::default()
        };
        let dict = build_dictionary(&cfg).unwrap();
        assert_eq!(dict.depth_count(), 21);
        assert_eq!(dict.zetas[0], -21.0);
        assert_eq!(dict.zetas[20], 21.0);
        let step = dict.zetas[1] - dict.zetas[0];
        assert!((step - 2.1).abs() < 1e-12);
        for w in 1..21 {
            assert!((dict.zetas[w] - dict.zetas[w - 1] - step).abs() < 1e-9);
        }
    }

    #[test]
    fn dictionary_is_deterministic() {
        let cfg = PsfConfig {
            grid_size: 32,
            depth_slices: 5,
            ..Default::default()
        };
        let a = build_dictionary(&cfg).unwrap();
        let b = build_dictionary(&cfg).unwrap();
        assert_eq!(a.slices, b.slices);
        assert_eq!(a.slice_norms, b.slice_norms);
    }
}
