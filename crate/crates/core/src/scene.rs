//! Randomized ground-truth scene generation.

use crate::error::{Error, Result};
use crate::psf::PsfConfig;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Mean photon count per source.
pub const DEFAULT_MEAN_PHOTONS: f64 = 2000.0;
/// Sources closer than this laterally count as one source unless axially split.
pub const DEFAULT_LATERAL_SEPARATION: f64 = 2.0;
/// Margin (pixels) kept clear of the field edges when placing sources.
pub const EDGE_MARGIN: f64 = 4.0;
/// Rejection-sampling attempt budget per scene.
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// One ground-truth point source, continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    /// Lateral position, pixels (column axis).
    pub x: f64,
    /// Lateral position, pixels (row axis).
    pub y: f64,
    /// Defocus coordinate.
    pub zeta: f64,
    /// Total photon count.
    pub flux: f64,
}

/// A set of ground-truth sources plus the field they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    #[serde(rename = "N")]
    pub grid_size: usize,
    pub zeta_range: (f64, f64),
    pub sources: Vec<Source>,
}

/// Two sources are distinguishable when they differ laterally by more than
/// `lateral_sep` pixels or axially by more than `axial_sep` defocus units.
pub fn separated(a: &Source, b: &Source, lateral_sep: f64, axial_sep: f64) -> bool {
    let lateral = (a.x - b.x).hypot(a.y - b.y);
    lateral > lateral_sep || (a.zeta - b.zeta).abs() > axial_sep
}

/// Default axial separation unit: one dictionary ζ interval.
pub fn default_axial_separation(cfg: &PsfConfig) -> f64 {
    let (lo, hi) = cfg.zeta_range;
    if cfg.depth_slices < 2 {
        return 0.0;
    }
    (hi - lo) / (cfg.depth_slices - 1) as f64
}

/// `count` Poisson fluxes with the given mean; zero draws are redrawn since a
/// dark source is unobservable.
pub fn sample_fluxes(count: usize, mean_photons: f64, seed: u64) -> Result<Vec<f64>> {
    if !(mean_photons > 0.0) {
        return Err(Error::domain("mean_photons must be positive"));
    }
    let poisson = Poisson::new(mean_photons)
        .map_err(|e| Error::domain(format!("invalid Poisson mean: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fluxes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut f: f64 = poisson.sample(&mut rng);
        while f < 1.0 {
            f = poisson.sample(&mut rng);
        }
        fluxes.push(f);
    }
    Ok(fluxes)
}

/// Draw `count` sources uniformly over the continuous field, rejecting draws
/// that violate the separation rule.
pub fn generate_scene(count: usize, cfg: &PsfConfig, seed: u64) -> Result<Scene> {
    generate_scene_with(
        count,
        cfg,
        seed,
        DEFAULT_LATERAL_SEPARATION,
        default_axial_separation(cfg),
        DEFAULT_MEAN_PHOTONS,
    )
}

pub fn generate_scene_with(
    count: usize,
    cfg: &PsfConfig,
    seed: u64,
    lateral_sep: f64,
    axial_sep: f64,
    mean_photons: f64,
) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.grid_size as f64;
    if n <= 2.0 * EDGE_MARGIN {
        return Err(Error::domain("grid too small for the edge margin"));
    }
    let (lo, hi) = cfg.zeta_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources: Vec<Source> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while sources.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Capacity(format!(
                "placed {} of {count} sources in {MAX_PLACEMENT_ATTEMPTS} attempts under the separation rule",
                sources.len()
            )));
        }
        let candidate = Source {
            x: rng.random_range(EDGE_MARGIN..n - EDGE_MARGIN),
            y: rng.random_range(EDGE_MARGIN..n - EDGE_MARGIN),
            zeta: if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            },
            flux: 0.0,
        };
        if sources
            .iter()
            .all(|s| separated(s, &candidate, lateral_sep, axial_sep))
        {
            sources.push(candidate);
        }
    }
    // flux stream is derived from the scene seed so positions and fluxes stay
    // reproducible independently
    let fluxes = sample_fluxes(count, mean_photons, seed.wrapping_add(0x9e37_79b9))?;
    for (s, f) in sources.iter_mut().zip(fluxes) {
        s.flux = f;
    }
    Ok(Scene {
        seed,
        grid_size: cfg.grid_size,
        zeta_range: cfg.zeta_range,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let cfg = PsfConfig::default();
        let scene = generate_scene(0, &cfg, 1).unwrap();
        assert!(scene.sources.is_empty());
    }

    #[test]
    fn separation_rule_holds() {
        let cfg = PsfConfig::default();
        let axial = default_axial_separation(&cfg);
        assert!((axial - 2.1).abs() < 1e-12);
        let scene = generate_scene(15, &cfg, 99).unwrap();
        assert_eq!(scene.sources.len(), 15);
        for i in 0..15 {
            for j in (i + 1)..15 {
                assert!(separated(
                    &scene.sources[i],
                    &scene.sources[j],
                    DEFAULT_LATERAL_SEPARATION,
                    axial
                ));
            }
        }
        for s in &scene.sources {
            assert!(s.x >= EDGE_MARGIN && s.x <= cfg.grid_size as f64 - EDGE_MARGIN);
            assert!(s.y >= EDGE_MARGIN && s.y <= cfg.grid_size as f64 - EDGE_MARGIN);
            assert!(s.zeta >= cfg.zeta_range.0 && s.zeta <= cfg.zeta_range.1);
            assert!(s.flux > 0.0);
        }
    }

    #[test]
    fn benchmark_densities_fit() {
        let cfg = PsfConfig::default();
        for density in [5, 10, 15, 20, 30, 40] {
            let scene = generate_scene(density, &cfg, density as u64).unwrap();
            assert_eq!(scene.sources.len(), density);
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let cfg = PsfConfig::default();
        let a = generate_scene(10, &cfg, 7).unwrap();
        let b = generate_scene(10, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn flux_sample_mean() {
        let fluxes = sample_fluxes(10_000, DEFAULT_MEAN_PHOTONS, 5).unwrap();
        let mean = fluxes.iter().sum::<f64>() / fluxes.len() as f64;
        assert!((mean - 2000.0).abs() < 1.9, "sample mean {mean}");
        assert!(fluxes.iter().all(|&f| f >= 1.0));
    }

    #[test]
    fn tiny_mean_resamples_to_at_least_one() {
        let fluxes = sample_fluxes(20, 1e-4, 11).unwrap();
        assert!(fluxes.iter().all(|&f| f >= 1.0));
    }

    #[test]
    fn capacity_error_when_overpacked() {
        let cfg = PsfConfig {
            grid_size: 12,
            ..Default::default()
        };
        // axial separation wider than the ζ range disables the axial escape,
        // and a 4-pixel field with >2 px spacing cannot hold 40 sources
        let err = generate_scene_with(40, &cfg, 3, 2.0, 100.0, 2000.0);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }
}
