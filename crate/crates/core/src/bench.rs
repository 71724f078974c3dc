//! Reproducible end-to-end benchmark harness.
//!
//! One run covers a grid of source densities and methods: per cell it trains
//! μ (and the TL1 shape) by F1 on training trials, then scores test trials
//! end-to-end (scene → render → noise → solve → postprocess → match). Every
//! trial seed derives from the master seed, density, method, phase and trial
//! index, so extending the plan never perturbs existing cells.

use crate::error::{Error, Result};
use crate::eval::{
    aggregate_metrics, extract_points, f1_score, match_sources, postprocess, MatchReport,
    PointEstimate,
};
use crate::forward::{add_noise, render_offgrid, ForwardOperator, Snapshot};
use crate::psf::{PsfConfig, PsfDictionary};
use crate::scene::{default_axial_separation, generate_scene_with, Scene};
use crate::solver::{estimate_lipschitz, irl1_solve_with, Method, SolverConfig};
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::Instant;

/// Full description of a benchmark run.
#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub densities: Vec<usize>,
    pub train_trials: usize,
    pub test_trials: usize,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub psf: PsfConfig,
    pub background: f64,
    pub noise_fraction: f64,
    pub mean_photons: f64,
    /// Voxel flux threshold for raw point extraction.
    pub flux_floor: f64,
    pub lateral_tol: f64,
    pub axial_tol: f64,
    pub flux_keep_ratio: f64,
    /// μ candidates per method (log grid).
    pub mu_grid_cel0: Vec<f64>,
    pub mu_grid_tl1: Vec<f64>,
    pub mu_grid_l1: Vec<f64>,
    /// TL1 shape candidates.
    pub tl1_a_grid: Vec<f64>,
    /// Worker threads; 0 means use the available parallelism.
    pub workers: usize,
}

/// `count` log-spaced values covering [10^lo, 10^hi].
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![10f64.powf(lo)];
    }
    (0..count)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (count - 1) as f64))
        .collect()
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            densities: vec![5, 10, 15, 20, 30, 40],
            train_trials: 20,
            test_trials: 50,
            methods: vec![Method::Cel0, Method::Tl1, Method::L1],
            master_seed: 1234,
            psf: PsfConfig::default(),
            background: crate::forward::DEFAULT_BACKGROUND,
            noise_fraction: crate::forward::DEFAULT_NOISE_FRACTION,
            mean_photons: crate::scene::DEFAULT_MEAN_PHOTONS,
            flux_floor: 200.0,
            lateral_tol: crate::eval::DEFAULT_LATERAL_TOL,
            axial_tol: crate::eval::DEFAULT_AXIAL_TOL,
            flux_keep_ratio: crate::eval::DEFAULT_FLUX_KEEP_RATIO,
            // 8 values spanning 4 decades, centered per method scale
            mu_grid_cel0: log_grid(1.0, 5.0, 8),
            mu_grid_tl1: log_grid(1.0, 5.0, 8),
            mu_grid_l1: log_grid(-2.0, 2.0, 8),
            tl1_a_grid: vec![200.0, 1000.0],
            workers: 0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        self.psf.validate()?;
        if self.densities.is_empty() {
            return Err(Error::domain("densities must be non-empty"));
        }
        if self.train_trials == 0 || self.test_trials == 0 {
            return Err(Error::domain("trial counts must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::domain("methods must be non-empty"));
        }
        for grid in [&self.mu_grid_cel0, &self.mu_grid_tl1, &self.mu_grid_l1] {
            if grid.is_empty() || grid.iter().any(|&m| !(m > 0.0)) {
                return Err(Error::domain("mu grids must hold positive values"));
            }
        }
        if self.tl1_a_grid.is_empty() || self.tl1_a_grid.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::domain("tl1_a grid must hold positive values"));
        }
        Ok(())
    }

    fn mu_grid(&self, method: Method) -> &[f64] {
        match method {
            Method::Cel0 => &self.mu_grid_cel0,
            Method::Tl1 => &self.mu_grid_tl1,
            Method::L1 => &self.mu_grid_l1,
        }
    }
}

/// Stable trial seed: SHA-256 over the identifying tuple, truncated.
pub fn trial_seed(master_seed: u64, density: usize, method: Method, phase: &str, trial: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update((density as u64).to_le_bytes());
    hasher.update(method.name().as_bytes());
    hasher.update(phase.as_bytes());
    hasher.update((trial as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Trained regularization parameters for one (density, method) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainedParams {
    pub mu: f64,
    pub tl1_a: f64,
    pub mean_f1: f64,
}

/// Everything recorded about one executed trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub density: usize,
    pub method: String,
    pub trial: usize,
    pub seed: u64,
    pub mu: f64,
    pub tl1_a: f64,
    pub report: MatchReport,
    pub runtime_seconds: f64,
    /// Method objective at X⁰ and after each reweighting pass.
    pub outer_objectives: Vec<f64>,
    pub max_outer_increase: f64,
    pub max_inner_increase: f64,
    pub total_inner_iterations: usize,
}

/// One aggregated row of the output table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub density: usize,
    pub method: String,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_runtime_seconds: f64,
    pub trained: TrainedParams,
    pub trials_ok: usize,
    pub trials_failed: usize,
}

/// Full result of a benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResults {
    pub rows: Vec<BenchRow>,
    pub trials: Vec<TrialReport>,
    pub failures: Vec<String>,
}

impl BenchResults {
    /// Contract table: density, method, rates, measured runtime.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("density,method,mean_recall,mean_precision,mean_runtime_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.3}\n",
                r.density, r.method, r.mean_recall, r.mean_precision, r.mean_runtime_seconds
            ));
        }
        out
    }

    /// Deterministic table: the same rows without the wall-clock column.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("density,method,mean_recall,mean_precision\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.density, r.method, r.mean_recall, r.mean_precision
            ));
        }
        out
    }
}

/// Shared immutable state (dictionary, operator, step bound) for one plan.
pub struct BenchContext {
    pub plan: BenchPlan,
    dict: PsfDictionary,
    op: ForwardOperator,
    lipschitz: f64,
    axial_sep: f64,
}

/// Everything produced by one end-to-end trial.
pub struct TrialOutcome {
    pub scene: Scene,
    pub snapshot: Snapshot,
    pub raw_points: Vec<PointEstimate>,
    pub estimates: Vec<PointEstimate>,
    /// Match of the raw extracted points, before postprocessing.
    pub raw_report: MatchReport,
    pub report: MatchReport,
    pub runtime_seconds: f64,
    pub outer_objectives: Vec<f64>,
    pub max_outer_increase: f64,
    pub max_inner_increase: f64,
    pub total_inner_iterations: usize,
}

impl BenchContext {
    pub fn new(plan: BenchPlan) -> Result<Self> {
        plan.validate()?;
        let dict = crate::psf::build_dictionary(&plan.psf)?;
        let op = ForwardOperator::new(&dict);
        let lipschitz = estimate_lipschitz(&op, 200, 1e-9);
        let axial_sep = default_axial_separation(&plan.psf);
        Ok(BenchContext {
            plan,
            dict,
            op,
            lipschitz,
            axial_sep,
        })
    }

    pub fn dictionary(&self) -> &PsfDictionary {
        &self.dict
    }

    /// Run scene generation, rendering, noise, solve, postprocess and match
    /// for one seeded trial.
    pub fn run_trial(
        &self,
        density: usize,
        method: Method,
        mu: f64,
        tl1_a: f64,
        seed: u64,
    ) -> Result<TrialOutcome> {
        let plan = &self.plan;
        let scene = generate_scene_with(
            density,
            &plan.psf,
            seed,
            crate::scene::DEFAULT_LATERAL_SEPARATION,
            self.axial_sep,
            plan.mean_photons,
        )?;
        let i0 = render_offgrid(&scene, &plan.psf)?;
        let snapshot = add_noise(&i0, plan.background, plan.noise_fraction, seed ^ 0xa5a5_5a5a)?;

        let started = Instant::now();
        let mut cfg = SolverConfig::new(method, mu);
        cfg.tl1_a = tl1_a;
        let (volume, diag) = irl1_solve_with(
            &snapshot,
            &self.op,
            &self.dict.slice_norms,
            &self.dict.zetas,
            self.lipschitz,
            &cfg,
        )?;
        let raw_points = extract_points(&volume, plan.flux_floor);
        let estimates = postprocess(
            &raw_points,
            plan.lateral_tol,
            plan.axial_tol,
            plan.flux_keep_ratio,
        );
        let raw_report = match_sources(&scene, &raw_points, plan.lateral_tol, plan.axial_tol)?;
        let report = match_sources(&scene, &estimates, plan.lateral_tol, plan.axial_tol)?;
        let runtime_seconds = started.elapsed().as_secs_f64();

        let max_inner_increase = diag
            .inner
            .iter()
            .map(|d| d.max_objective_increase)
            .fold(0.0_f64, f64::max);
        Ok(TrialOutcome {
            scene,
            snapshot,
            raw_points,
            estimates,
            raw_report,
            report,
            runtime_seconds,
            outer_objectives: diag.outer_objectives.clone(),
            max_outer_increase: diag.max_outer_increase(),
            max_inner_increase,
            total_inner_iterations: diag.total_inner_iterations(),
        })
    }

    /// Grid-search μ (and the TL1 shape) maximizing mean F1 over training
    /// trials. Ties break toward larger μ, preferring sparser solutions.
    pub fn train_mu(&self, density: usize, method: Method) -> Result<TrainedParams> {
        let plan = &self.plan;
        let a_grid: Vec<f64> = match method {
            Method::Tl1 => plan.tl1_a_grid.clone(),
            _ => vec![1.0],
        };
        let mut combos: Vec<(f64, f64)> = Vec::new();
        for &mu in plan.mu_grid(method) {
            for &a in &a_grid {
                combos.push((mu, a));
            }
        }
        let scored: Vec<Result<(f64, f64, f64)>> = combos
            .par_iter()
            .map(|&(mu, a)| {
                let mut reports = Vec::with_capacity(plan.train_trials);
                for t in 0..plan.train_trials {
                    let seed = trial_seed(plan.master_seed, density, method, "train", t);
                    let out = self.run_trial(density, method, mu, a, seed)?;
                    reports.push(out.report);
                }
                let (recall, precision) = aggregate_metrics(&reports)?;
                Ok((mu, a, f1_score(recall, precision)))
            })
            .collect();
        let mut best: Option<(f64, f64, f64)> = None;
        let mut summary = String::new();
        for s in scored {
            let (mu, a, f1) = s?;
            summary.push_str(&format!("mu={mu:.4} a={a:.1} F1={f1:.4}; "));
            let better = match best {
                None => true,
                // strictly better F1, or the same F1 at larger mu (sparser)
                Some((bmu, _, bf1)) => f1 > bf1 || (f1 == bf1 && mu > bmu),
            };
            if better {
                best = Some((mu, a, f1));
            }
        }
        let (mu, tl1_a, mean_f1) = best.expect("non-empty grid");
        if mean_f1 == 0.0 {
            return Err(Error::Training(format!(
                "no grid point achieved nonzero F1 at density {density} for {method}: {summary}"
            )));
        }
        Ok(TrainedParams { mu, tl1_a, mean_f1 })
    }
}

/// Execute a full plan; artifacts are written under `out_dir` when given.
///
/// Writes `table.csv` (with measured runtimes), `metrics.csv` (fully
/// deterministic), per-trial `report_*.json`, and — when `overlays` is set —
/// one annotated PNG per test trial.
pub fn run_bench(plan: &BenchPlan, out_dir: Option<&Path>, overlays: bool) -> Result<BenchResults> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    pool.install(|| run_bench_inner(plan, out_dir, overlays))
}

fn run_bench_inner(plan: &BenchPlan, out_dir: Option<&Path>, overlays: bool) -> Result<BenchResults> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ctx = BenchContext::new(plan.clone())?;

    let mut rows = Vec::new();
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    let mut total_attempted = 0usize;

    let mut cells: Vec<(usize, Method)> = Vec::new();
    for &density in &plan.densities {
        for &method in &plan.methods {
            cells.push((density, method));
        }
    }
    cells.sort_by(|a, b| (a.0, a.1.name()).cmp(&(b.0, b.1.name())));
    cells.dedup();

    for (density, method) in cells {
        let trained = ctx.train_mu(density, method)?;
        let outcomes: Vec<(usize, u64, Result<TrialOutcome>)> = (0..plan.test_trials)
            .into_par_iter()
            .map(|t| {
                let seed = trial_seed(plan.master_seed, density, method, "test", t);
                (
                    t,
                    seed,
                    ctx.run_trial(density, method, trained.mu, trained.tl1_a, seed),
                )
            })
            .collect();

        let mut reports = Vec::new();
        let mut runtimes = Vec::new();
        let mut failed_here = 0usize;
        for (t, seed, outcome) in outcomes {
            total_attempted += 1;
            match outcome {
                Ok(out) => {
                    reports.push(out.report.clone());
                    runtimes.push(out.runtime_seconds);
                    let trial_report = TrialReport {
                        density,
                        method: method.name().to_string(),
                        trial: t,
                        seed,
                        mu: trained.mu,
                        tl1_a: trained.tl1_a,
                        report: out.report.clone(),
                        runtime_seconds: out.runtime_seconds,
                        outer_objectives: out.outer_objectives.clone(),
                        max_outer_increase: out.max_outer_increase,
                        max_inner_increase: out.max_inner_increase,
                        total_inner_iterations: out.total_inner_iterations,
                    };
                    if let Some(dir) = out_dir {
                        let name = format!("report_d{density}_{}_t{t:03}.json", method.name());
                        crate::io::save_json(&dir.join(name), &trial_report)?;
                        if overlays {
                            let overlay_dir = dir.join("overlays");
                            std::fs::create_dir_all(&overlay_dir)?;
                            let img = render_overlay(&out.snapshot, &out.scene, &out.estimates);
                            let name =
                                format!("overlay_d{density}_{}_t{t:03}.png", method.name());
                            img.save(overlay_dir.join(name))
                                .map_err(|e| Error::Format(format!("png encode: {e}")))?;
                        }
                    }
                    trials.push(trial_report);
                }
                Err(e) => {
                    failed_here += 1;
                    failures.push(format!(
                        "density {density} method {} trial {t} (seed {seed}): {e}",
                        method.name()
                    ));
                }
            }
        }
        if reports.is_empty() {
            return Err(Error::Training(format!(
                "all {failed_here} test trials failed at density {density} for {}",
                method.name()
            )));
        }
        let (mean_recall, mean_precision) = aggregate_metrics(&reports)?;
        let mean_runtime_seconds = runtimes.iter().sum::<f64>() / runtimes.len() as f64;
        rows.push(BenchRow {
            density,
            method: method.name().to_string(),
            mean_recall,
            mean_precision,
            mean_runtime_seconds,
            trained,
            trials_ok: reports.len(),
            trials_failed: failed_here,
        });
    }

    let results = BenchResults {
        rows,
        trials,
        failures,
    };
    let failed = results.failures.len();
    if failed * 20 > total_attempted {
        return Err(Error::Training(format!(
            "{failed} of {total_attempted} trials failed (>5%): {:?}",
            results.failures
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("table.csv"), results.table_csv())?;
        std::fs::write(dir.join("metrics.csv"), results.metrics_csv())?;
        if !results.failures.is_empty() {
            crate::io::save_json(&dir.join("failures.json"), &results.failures)?;
        }
    }
    Ok(results)
}

/// Render the observation with truth circles and estimate crosses.
pub fn render_overlay(obs: &Snapshot, truth: &Scene, estimates: &[PointEstimate]) -> RgbImage {
    let n = obs.side() as u32;
    let lo = obs.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = obs.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut img = RgbImage::new(n, n);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let v = obs.pixels[[y as usize, x as usize]];
        let g = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
        *p = Rgb([g, g, g]);
    }
    const CIRCLE_RADIUS: f64 = 4.0;
    const CROSS_ARM: i64 = 3;
    let green = Rgb([0u8, 255, 0]);
    let red = Rgb([255u8, 0, 0]);
    let put = |img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < n && (y as u32) < n {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    for s in &truth.sources {
        let steps = 64;
        for k in 0..steps {
            let a = 2.0 * std::f64::consts::PI * k as f64 / steps as f64;
            let x = (s.x + CIRCLE_RADIUS * a.cos()).round() as i64;
            let y = (s.y + CIRCLE_RADIUS * a.sin()).round() as i64;
            put(&mut img, x, y, green);
        }
    }
    for e in estimates {
        let cx = e.x.round() as i64;
        let cy = e.y.round() as i64;
        for k in -CROSS_ARM..=CROSS_ARM {
            put(&mut img, cx + k, cy, red);
            put(&mut img, cx, cy + k, red);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Source;
    use ndarray::Array2;

    #[test]
    fn log_grid_spans_decades() {
        let g = log_grid(1.0, 5.0, 8);
        assert_eq!(g.len(), 8);
        assert!((g[0] - 10.0).abs() < 1e-9);
        assert!((g[7] - 1e5).abs() < 1e-6);
        for pair in g.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        assert_eq!(log_grid(2.0, 5.0, 1), vec![100.0]);
    }

    #[test]
    fn trial_seeds_are_stable_and_distinct() {
        let a = trial_seed(1234, 10, Method::Cel0, "test", 0);
        let b = trial_seed(1234, 10, Method::Cel0, "test", 0);
        assert_eq!(a, b);
        assert_ne!(a, trial_seed(1234, 10, Method::Cel0, "test", 1));
        assert_ne!(a, trial_seed(1234, 10, Method::Cel0, "train", 0));
        assert_ne!(a, trial_seed(1234, 10, Method::L1, "test", 0));
        assert_ne!(a, trial_seed(1234, 15, Method::Cel0, "test", 0));
        assert_ne!(a, trial_seed(1235, 10, Method::Cel0, "test", 0));
    }

    #[test]
    fn overlay_draws_circles_and_crosses() {
        let n = 48;
        let obs = Snapshot::noiseless(Array2::from_elem((n, n), 1.0), 0.0);
        let truth = Scene {
            seed: 0,
            grid_size: n,
            zeta_range: (-21.0, 21.0),
            sources: vec![Source {
                x: 20.0,
                y: 24.0,
                zeta: 0.0,
                flux: 100.0,
            }],
        };
        // empty estimates: only circles
        let img = render_overlay(&obs, &truth, &[]);
        let mut green_px = 0;
        let mut red_px = 0;
        for p in img.pixels() {
            if p.0 == [0, 255, 0] {
                green_px += 1;
            }
            if p.0 == [255, 0, 0] {
                red_px += 1;
            }
        }
        assert!(green_px > 8);
        assert_eq!(red_px, 0);

        // estimates identical to truth: a cross inside each circle
        let est = vec![PointEstimate {
            x: 20.0,
            y: 24.0,
            zeta: 0.0,
            flux: 100.0,
        }];
        let img = render_overlay(&obs, &truth, &est);
        assert_eq!(img.get_pixel(20, 24).0, [255, 0, 0]);
        for s in &truth.sources {
            let mut found = false;
            for dy in -4i64..=4 {
                for dx in -4i64..=4 {
                    let x = (s.x as i64 + dx) as u32;
                    let y = (s.y as i64 + dy) as u32;
                    if img.get_pixel(x, y).0 == [255, 0, 0] {
                        found = true;
                    }
                }
            }
            assert!(found, "no cross near truth source");
        }
    }

    #[test]
    fn plan_validation() {
        let mut plan = BenchPlan::default();
        assert!(plan.validate().is_ok());
        plan.densities.clear();
        assert!(plan.validate().is_err());
        let mut plan = BenchPlan::default();
        plan.mu_grid_l1 = vec![-1.0];
        assert!(plan.validate().is_err());
    }
}
