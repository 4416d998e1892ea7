//! ε-sharpness of scanned surfaces and its stability over direction repeats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{
    filter_normalize, filter_normalize_orthogonal, sample_directions, scan_surface, Objective, ScanRange, SurfaceGrid,
};

/// Relative slack on the ball boundary so lattice points exactly on the
/// circle are not lost to rounding of `α² + β²`.
pub const BALL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Lattice points with `α² + β² ≤ ε²`.
    #[default]
    Ball,
    /// Every lattice point with `max(|α|, |β|) ≤ ε`.
    Square,
}

fn inside(region: Region, a: f64, b: f64, eps: f64) -> bool {
    match region {
        Region::Ball => a * a + b * b <= eps * eps * (1.0 + BALL_SLACK),
        Region::Square => a.abs().max(b.abs()) <= eps * (1.0 + BALL_SLACK),
    }
}

/// `100 · (max_{B(ε)} f − f(0,0)) / (1 + f(0,0))` over in-ball lattice points.
pub fn epsilon_sharpness(grid: &SurfaceGrid, epsilon: f64) -> Result<f64> {
    epsilon_sharpness_in(grid, epsilon, Region::Ball)
}

pub fn epsilon_sharpness_in(grid: &SurfaceGrid, epsilon: f64, region: Region) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (ca, cb) = grid
        .center_index()
        .ok_or_else(|| Error::invalid("grid does not contain (0, 0)"))?;
    let reach_a = grid.alphas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let reach_b = grid.betas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if epsilon > reach_a.min(reach_b) * (1.0 + BALL_SLACK) {
        return Err(Error::invalid(format!(
            "epsilon {epsilon} exceeds the grid radius {}",
            reach_a.min(reach_b)
        )));
    }
    let center = grid.losses[ca][cb];
    if !center.is_finite() {
        return Err(Error::invalid("loss at (0, 0) is not finite"));
    }
    let mut max = center;
    for (a, b, l) in grid.points() {
        if inside(region, a, b, epsilon) && l > max {
            max = l;
        }
    }
    Ok((max - center) / (1.0 + center) * 100.0)
}

/// Mean and sample (n − 1) standard deviation; the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessResult {
    pub epsilon: f64,
    #[serde(with = "crate::json_float::vec")]
    pub values: Vec<f64>,
    /// Over finite repeats; `+∞` when every repeat diverged.
    #[serde(with = "crate::json_float")]
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
    pub model_hash: String,
    pub single_repeat: bool,
    /// Indices of repeats whose value is `+∞`.
    pub divergent: Vec<usize>,
    pub region: Region,
}

impl SharpnessResult {
    pub fn from_values(epsilon: f64, values: Vec<f64>, seeds: Vec<u64>, model_hash: String, region: Region) -> Result<Self> {
        if values.is_empty() || values.len() != seeds.len() {
            return Err(Error::invalid("need one value per direction seed"));
        }
        let divergent: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect();
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, std) = mean_std(&finite).unwrap_or((f64::INFINITY, 0.0));
        Ok(Self {
            epsilon,
            single_repeat: values.len() == 1,
            values,
            mean,
            std,
            seeds,
            model_hash,
            divergent,
            region,
        })
    }

    pub fn is_divergent(&self) -> bool {
        !self.divergent.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    pub epsilon: f64,
    pub repeats: usize,
    pub base_seed: u64,
    pub range: ScanRange,
    pub workers: usize,
    pub region: Region,
    /// Orthogonalize `η` against `δ` within each filter before normalizing.
    pub orthogonalize: bool,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.25,
            repeats: 3,
            base_seed: 0,
            range: ScanRange::sharpness_default(),
            workers: 1,
            region: Region::Ball,
            orthogonalize: false,
        }
    }
}

/// One scan and one ε-sharpness per repeat, with direction seeds
/// `base_seed + r`.
pub fn sharpness_study(
    objective: &dyn Objective,
    cfg: &SharpnessConfig,
    split: &str,
    eval_samples: usize,
) -> Result<(SharpnessResult, Vec<SurfaceGrid>)> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let mut values = Vec::with_capacity(cfg.repeats);
    let mut seeds = Vec::with_capacity(cfg.repeats);
    let mut grids = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.base_seed.wrapping_add(r as u64);
        let raw = sample_directions(objective.params(), seed);
        let dir = if cfg.orthogonalize {
            filter_normalize_orthogonal(raw, objective.params())?
        } else {
            filter_normalize(raw, objective.params())?
        };
        let grid = scan_surface(objective, &dir, &cfg.range, cfg.workers, split, eval_samples)?;
        values.push(epsilon_sharpness_in(&grid, cfg.epsilon, cfg.region)?);
        seeds.push(seed);
        grids.push(grid);
    }
    let result = SharpnessResult::from_values(cfg.epsilon, values, seeds, objective.model_hash(), cfg.region)?;
    Ok((result, grids))
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 pairs, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
