//! Random filter-normalized directions and 2D loss-surface scans.
//!
//! `f(α, β) = L(θ* + α·δ + β·η)` is evaluated on a rectangular lattice. Every
//! lattice point is an independent read-only evaluation, so the scan is
//! spread over a worker pool and assembled in lattice order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, ModelState, ParamKind, ParamVector, QuadraticModel, EVAL_CHUNK};
use crate::train::Example;

/// Two parameter-shaped perturbation directions.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionPair {
    pub delta: ParamVector,
    pub eta: ParamVector,
    pub seed: u64,
    pub normalized: bool,
    pub orthogonalized: bool,
}

impl DirectionPair {
    /// Wraps caller-supplied directions, such as coordinate axes.
    pub fn new(delta: ParamVector, eta: ParamVector, seed: u64) -> Result<Self> {
        if !delta.same_layout(&eta) {
            return Err(Error::invalid("delta and eta have different layouts"));
        }
        Ok(Self {
            delta,
            eta,
            seed,
            normalized: false,
            orthogonalized: false,
        })
    }
}

fn gaussian_like(params: &ParamVector, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut out = params.zeros_like();
    for e in out.entries_mut() {
        for v in e.value.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
    }
    out
}

/// Standard-normal directions shaped like `params`. `δ` and `η` come from
/// disjoint streams of a generator seeded with `seed`.
pub fn sample_directions(params: &ParamVector, seed: u64) -> DirectionPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let delta = gaussian_like(params, &mut rng);
    rng.set_stream(1);
    rng.set_word_pos(0);
    let eta = gaussian_like(params, &mut rng);
    DirectionPair {
        delta,
        eta,
        seed,
        normalized: false,
        orthogonalized: false,
    }
}

fn norm(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Replacement slice for the (probability zero) case of an all-zero draw.
fn redraw(seed: u64, which: u64, layer: usize, filter: usize, out: &mut [f32]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((layer as u64) << 32) ^ filter as u64);
    rng.set_stream(2 + which);
    while norm(out) == 0.0 {
        for v in out.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
    }
}

/// Rescales every filter slice to the norm of the matching filter of
/// `params` and zeroes non-filter entries. Filters of zero norm get zero
/// direction slices.
pub fn filter_normalize(dir: DirectionPair, params: &ParamVector) -> Result<DirectionPair> {
    normalize_impl(dir, params, false)
}

/// As [`filter_normalize`], first making `η` orthogonal to `δ` within each
/// filter. With equal per-filter norms the two directions then span an
/// isometric plane.
pub fn filter_normalize_orthogonal(dir: DirectionPair, params: &ParamVector) -> Result<DirectionPair> {
    normalize_impl(dir, params, true)
}

fn normalize_impl(mut dir: DirectionPair, params: &ParamVector, orthogonalize: bool) -> Result<DirectionPair> {
    if !dir.delta.same_layout(params) || !dir.eta.same_layout(params) {
        return Err(Error::invalid("direction layout does not match the model parameters"));
    }
    let seed = dir.seed;
    let entries = params.entries();
    let (d_entries, e_entries) = (dir.delta.entries_mut(), dir.eta.entries_mut());
    for (i, theta) in entries.iter().enumerate() {
        let d = d_entries[i].value.data_mut();
        let e = e_entries[i].value.data_mut();
        if theta.kind == ParamKind::NonFilter {
            d.fill(0.0);
            e.fill(0.0);
            continue;
        }
        let len = theta.filter_len();
        for j in 0..theta.filter_count() {
            let t = norm(theta.filter(j));
            let ds = &mut d[j * len..(j + 1) * len];
            let es = &mut e[j * len..(j + 1) * len];
            if t == 0.0 {
                ds.fill(0.0);
                es.fill(0.0);
                continue;
            }
            redraw(seed, 0, i, j, ds);
            redraw(seed, 1, i, j, es);
            if orthogonalize && len > 1 {
                let dd: f64 = ds.iter().map(|&v| (v as f64) * (v as f64)).sum();
                let de: f64 = ds.iter().zip(es.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                let proj = de / dd;
                let resid: Vec<f64> = ds.iter().zip(es.iter()).map(|(&a, &b)| b as f64 - proj * a as f64).collect();
                let rn = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rn > 0.0 {
                    for (v, r) in es.iter_mut().zip(&resid) {
                        *v = (r / rn) as f32;
                    }
                }
            }
            for s in [ds, es] {
                let scale = t / norm(s);
                for v in s.iter_mut() {
                    *v = (*v as f64 * scale) as f32;
                }
            }
        }
    }
    dir.normalized = true;
    dir.orthogonalized = orthogonalize;
    Ok(dir)
}

/// Something whose loss can be probed along a direction pair.
pub trait Objective: Sync {
    /// `θ*`, the point the directions are anchored at.
    fn params(&self) -> &ParamVector;
    /// `L(θ* + α·δ + β·η)`; `(0, 0)` must reproduce [`Objective::center_loss`] exactly.
    fn loss_along(&self, dir: &DirectionPair, alpha: f64, beta: f64) -> Result<f64>;
    fn center_loss(&self) -> Result<f64>;
    fn model_hash(&self) -> String;
}

/// `θ* + α·δ + β·η`, rounded once to `f32` per coordinate.
pub fn displaced(params: &ParamVector, dir: &DirectionPair, alpha: f64, beta: f64) -> ParamVector {
    let mut out = params.clone();
    if alpha == 0.0 && beta == 0.0 {
        return out;
    }
    for ((o, d), e) in out
        .entries_mut()
        .iter_mut()
        .zip(dir.delta.entries())
        .zip(dir.eta.entries())
    {
        for ((p, &dv), &ev) in o.value.data_mut().iter_mut().zip(d.value.data()).zip(e.value.data()) {
            *p = (*p as f64 + alpha * dv as f64 + beta * ev as f64) as f32;
        }
    }
    out
}

/// Eval-mode mean cross-entropy of a trained network over a fixed,
/// pre-batched evaluation set.
pub struct NetworkObjective<'a> {
    pub state: &'a ModelState,
    pub batches: &'a [Batch],
}

impl<'a> NetworkObjective<'a> {
    pub fn new(state: &'a ModelState, batches: &'a [Batch]) -> Self {
        Self { state, batches }
    }
}

/// Frozen evaluation batches for scans.
pub fn eval_batches(items: &[Example<'_>]) -> Result<Vec<Batch>> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    Batch::chunked(items, EVAL_CHUNK)
}

/// The loss `f(0, 0)` is compared against.
pub fn model_loss(state: &ModelState, batches: &[Batch]) -> Result<f64> {
    Ok(state.evaluate(batches)?.mean_loss())
}

impl Objective for NetworkObjective<'_> {
    fn params(&self) -> &ParamVector {
        &self.state.params
    }

    fn loss_along(&self, dir: &DirectionPair, alpha: f64, beta: f64) -> Result<f64> {
        let p = displaced(&self.state.params, dir, alpha, beta);
        Ok(self.state.evaluate_with(&p, self.batches)?.mean_loss())
    }

    fn center_loss(&self) -> Result<f64> {
        model_loss(self.state, self.batches)
    }

    fn model_hash(&self) -> String {
        self.state.model_hash()
    }
}

impl Objective for QuadraticModel {
    fn params(&self) -> &ParamVector {
        self.center()
    }

    /// Evaluated on the displacement itself, in `f64`.
    fn loss_along(&self, dir: &DirectionPair, alpha: f64, beta: f64) -> Result<f64> {
        if !dir.delta.same_layout(self.center()) {
            return Err(Error::invalid("direction layout does not match the quadratic center"));
        }
        Ok(self.loss_of_displacement(
            dir.delta
                .iter_values()
                .zip(dir.eta.iter_values())
                .map(|(d, e)| alpha * d as f64 + beta * e as f64),
        ))
    }

    fn center_loss(&self) -> Result<f64> {
        Ok(0.0)
    }

    fn model_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(b"quadratic");
        for v in self.center().iter_values() {
            h.update(v.to_le_bytes());
        }
        for c in self.curvature() {
            h.update(c.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Lattice over `[lo, hi]` with `points` coordinates, symmetric about the
/// midpoint bit for bit.
pub fn axis(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::invalid(format!("need at least 2 points per axis, got {points}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("invalid range [{lo}, {hi}]")));
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let n1 = (points - 1) as f64;
    Ok((0..points)
        .map(|k| mid + half * ((2 * k) as f64 - n1) / n1)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRange {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub points: usize,
}

impl ScanRange {
    /// `[-radius, radius]²`.
    pub fn symmetric(radius: f64, points: usize) -> Self {
        Self {
            alpha: (-radius, radius),
            beta: (-radius, radius),
            points,
        }
    }

    /// 11 × 11 lattice over `[-0.25, 0.25]²`.
    pub fn sharpness_default() -> Self {
        Self::symmetric(0.25, 11)
    }

    /// 41 × 41 lattice over `[-1, 1]²`.
    pub fn visualization_default() -> Self {
        Self::symmetric(1.0, 41)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMeta {
    pub model_hash: String,
    pub direction_seed: u64,
    pub split: String,
    /// Largest `|coordinate|` on either axis.
    pub radius: f64,
    /// Points per axis.
    pub resolution: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub normalized: bool,
    pub orthogonalized: bool,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[a][b] = f(alphas[a], betas[b])`; non-finite values are `+∞`.
    pub losses: Vec<Vec<f64>>,
    pub center_loss: f64,
    pub meta: SurfaceMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: SurfaceMeta,
    #[serde(with = "crate::json_float")]
    center_loss: f64,
    rows: usize,
}

impl SurfaceGrid {
    /// Index of `(0, 0)`.
    pub fn center_index(&self) -> Option<(usize, usize)> {
        let a = self.alphas.iter().position(|&v| v == 0.0)?;
        let b = self.betas.iter().position(|&v| v == 0.0)?;
        Some((a, b))
    }

    pub fn len(&self) -> usize {
        self.alphas.len() * self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(α, β, f)` in row order (α outer).
    pub fn points(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.alphas.iter().enumerate().flat_map(move |(i, &a)| {
            self.betas.iter().enumerate().map(move |(j, &b)| (a, b, self.losses[i][j]))
        })
    }

    /// Sidecar path used next to a CSV file.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes `alpha,beta,loss` rows plus the JSON sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["alpha", "beta", "loss"])?;
        for (a, b, l) in self.points() {
            w.write_record([a.to_string(), b.to_string(), format_loss(l)])?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let side = Sidecar {
            meta: self.meta.clone(),
            center_loss: self.center_loss,
            rows: self.len(),
        };
        let path = Self::sidecar_path(csv_path);
        let mut text = serde_json::to_string_pretty(&side)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a grid written by [`SurfaceGrid::write`].
    pub fn read(csv_path: &Path) -> Result<Self> {
        let path = Self::sidecar_path(csv_path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["alpha", "beta", "loss"] {
            return Err(Error::Format(format!(
                "{}: expected header alpha,beta,loss",
                csv_path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad number in row {:?}", rec)))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        grid_from_rows(&rows, side.center_loss, side.meta)
    }
}

fn format_loss(l: f64) -> String {
    if l.is_finite() {
        l.to_string()
    } else {
        "inf".into()
    }
}

/// Rebuilds a grid from `(α, β, f)` rows in α-major order.
pub fn grid_from_rows(rows: &[(f64, f64, f64)], center_loss: f64, meta: SurfaceMeta) -> Result<SurfaceGrid> {
    let mut alphas: Vec<f64> = Vec::new();
    for &(a, _, _) in rows {
        if alphas.last() != Some(&a) {
            alphas.push(a);
        }
    }
    if alphas.is_empty() || rows.len() % alphas.len() != 0 {
        return Err(Error::Format("surface rows do not form a rectangular lattice".into()));
    }
    let nb = rows.len() / alphas.len();
    let betas: Vec<f64> = rows[..nb].iter().map(|r| r.1).collect();
    let mut losses = Vec::with_capacity(alphas.len());
    for (i, &a) in alphas.iter().enumerate() {
        let chunk = &rows[i * nb..(i + 1) * nb];
        if chunk.iter().zip(&betas).any(|(r, &b)| r.0 != a || r.1 != b) {
            return Err(Error::Format("surface rows do not form a rectangular lattice".into()));
        }
        losses.push(chunk.iter().map(|r| r.2).collect());
    }
    let grid = SurfaceGrid {
        alphas,
        betas,
        losses,
        center_loss,
        meta,
    };
    if grid.center_index().is_none() {
        return Err(Error::Format("surface lattice does not contain (0, 0)".into()));
    }
    Ok(grid)
}

/// Evaluates `f(α, β)` on the lattice with `workers` threads. The result
/// does not depend on the worker count.
pub fn scan_surface(
    objective: &dyn Objective,
    dir: &DirectionPair,
    range: &ScanRange,
    workers: usize,
    split: &str,
    eval_samples: usize,
) -> Result<SurfaceGrid> {
    if !dir.delta.same_layout(objective.params()) {
        return Err(Error::invalid("direction layout does not match the model parameters"));
    }
    let alphas = axis(range.alpha.0, range.alpha.1, range.points)?;
    let betas = axis(range.beta.0, range.beta.1, range.points)?;
    if !alphas.contains(&0.0) || !betas.contains(&0.0) {
        return Err(Error::invalid(
            "scan lattice must contain (0, 0); use a range symmetric about 0 with an odd point count",
        ));
    }
    let nb = betas.len();
    let total = alphas.len() * nb;
    let eval = |idx: usize| -> Result<f64> {
        let l = objective.loss_along(dir, alphas[idx / nb], betas[idx % nb])?;
        Ok(if l.is_finite() { l } else { f64::INFINITY })
    };
    let flat: Vec<f64> = if workers <= 1 {
        (0..total).map(eval).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..total).into_par_iter().map(eval).collect::<Result<_>>())?
    };
    let losses: Vec<Vec<f64>> = flat.chunks(nb).map(|c| c.to_vec()).collect();
    let radius = alphas
        .iter()
        .chain(&betas)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut grid = SurfaceGrid {
        alphas,
        betas,
        losses,
        center_loss: 0.0,
        meta: SurfaceMeta {
            model_hash: objective.model_hash(),
            direction_seed: dir.seed,
            split: split.to_string(),
            radius,
            resolution: range.points,
            alpha_range: range.alpha,
            beta_range: range.beta,
            normalized: dir.normalized,
            orthogonalized: dir.orthogonalized,
            eval_samples,
        },
    };
    let (ca, cb) = grid.center_index().expect("checked above");
    grid.center_loss = grid.losses[ca][cb];
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec, ParamTensor};
    use crate::tensor::Tensor;

    fn params() -> ParamVector {
        build_model(&ModelSpec::mini10(10, 8), 3).unwrap().params
    }

    #[test]
    fn directions_are_seeded() {
        let p = params();
        let a = sample_directions(&p, 1);
        let b = sample_directions(&p, 1);
        let c = sample_directions(&p, 2);
        assert_eq!(a, b);
        assert_ne!(a.delta, c.delta);
        assert_ne!(a.delta, a.eta);
    }

    #[test]
    fn direction_entries_have_zero_mean() {
        let mut spec = ModelSpec::mini14(10, 64);
        spec.channels = vec![32, 64, 96];
        let p = build_model(&spec, 1).unwrap().params;
        assert!(p.numel() >= 100_000);
        let d = sample_directions(&p, 9);
        let mean = d.delta.iter_values().map(|v| v as f64).sum::<f64>() / p.numel() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        let var = d.delta.iter_values().map(|v| (v as f64).powi(2)).sum::<f64>() / p.numel() as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    fn one_filter(theta: Vec<f32>, delta: Vec<f32>) -> (ParamVector, DirectionPair) {
        let mk = |v: Vec<f32>| {
            ParamVector::new(vec![
                ParamTensor {
                    name: "w".into(),
                    kind: ParamKind::Filter,
                    value: Tensor::new(vec![1, v.len()], v).unwrap(),
                },
                ParamTensor {
                    name: "b".into(),
                    kind: ParamKind::NonFilter,
                    value: Tensor::from_vec(vec![0.5]).unwrap(),
                },
            ])
        };
        let p = mk(theta);
        let d = DirectionPair::new(mk(delta.clone()), mk(delta), 0).unwrap();
        (p, d)
    }

    #[test]
    fn normalization_arithmetic() {
        let (p, d) = one_filter(vec![1.0, 0.0], vec![3.0, 4.0]);
        let n = filter_normalize(d, &p).unwrap();
        assert_eq!(n.delta.entries()[0].value.data(), &[0.6, 0.8]);
        assert_eq!(n.delta.entries()[1].value.data(), &[0.0]);
        assert!(n.normalized);
    }

    #[test]
    fn zero_filters_give_zero_directions() {
        let (p, d) = one_filter(vec![0.0, 0.0], vec![3.0, 4.0]);
        let n = filter_normalize(d, &p).unwrap();
        assert_eq!(n.delta.entries()[0].value.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_direction_slices_are_redrawn() {
        let (p, d) = one_filter(vec![1.0, 2.0], vec![0.0, 0.0]);
        let n = filter_normalize(d, &p).unwrap();
        let got = norm(n.delta.entries()[0].value.data());
        assert!((got - 5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn per_filter_norms_match() {
        let p = params();
        for orth in [false, true] {
            let raw = sample_directions(&p, 4);
            let n = if orth {
                filter_normalize_orthogonal(raw, &p).unwrap()
            } else {
                filter_normalize(raw, &p).unwrap()
            };
            for ((t, d), e) in p.filters().zip(n.delta.filters()).zip(n.eta.filters()) {
                let tn = norm(t.2);
                assert!((norm(d.2) - tn).abs() <= 1e-5 * tn);
                assert!((norm(e.2) - tn).abs() <= 1e-5 * tn);
                if orth {
                    let dot: f64 = d.2.iter().zip(e.2).map(|(&a, &b)| a as f64 * b as f64).sum();
                    assert!(dot.abs() <= 1e-5 * tn * tn, "{dot}");
                }
            }
            for (e, t) in n.delta.entries().iter().zip(p.entries()) {
                if t.kind == ParamKind::NonFilter {
                    assert!(e.value.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn normalization_is_scale_covariant() {
        let p = params();
        let raw = sample_directions(&p, 5);
        let scale = |v: &ParamVector, c: f32| {
            let mut v = v.clone();
            for e in v.entries_mut() {
                if e.kind == ParamKind::Filter {
                    e.value.data_mut().iter_mut().for_each(|x| *x *= c);
                }
            }
            v
        };
        let p2 = scale(&p, 8.0);
        let mut raw2 = raw.clone();
        raw2.delta = scale(&raw.delta, 8.0);
        raw2.eta = scale(&raw.eta, 8.0);
        let a = filter_normalize(raw, &p).unwrap();
        let b = filter_normalize(raw2, &p2).unwrap();
        for ((x, y), t) in a.delta.filters().zip(b.delta.filters()).zip(p2.filters()) {
            let ratio = norm(y.2) / norm(x.2);
            assert!((ratio - 8.0).abs() < 1e-5, "{ratio}");
            assert!((norm(y.2) - norm(t.2)).abs() <= 1e-5 * norm(t.2));
        }
    }

    #[test]
    fn axis_is_symmetric_and_hits_zero() {
        let a = axis(-0.25, 0.25, 11).unwrap();
        assert_eq!(a[5], 0.0);
        assert_eq!(a[0], -0.25);
        assert_eq!(a[10], 0.25);
        for k in 0..11 {
            assert_eq!(a[k], -a[10 - k]);
        }
        assert!((a[6] - 0.05).abs() < 1e-15);
        assert!(axis(0.0, 1.0, 1).is_err());
        assert!(axis(1.0, 0.0, 3).is_err());
    }

    fn axis_pair(center: &ParamVector, p: usize, q: usize) -> DirectionPair {
        let mut d = center.zeros_like();
        let mut e = center.zeros_like();
        let set = |v: &mut ParamVector, idx: usize| {
            let mut idx = idx;
            for t in v.entries_mut() {
                if idx < t.value.numel() {
                    t.value.data_mut()[idx] = 1.0;
                    return;
                }
                idx -= t.value.numel();
            }
        };
        set(&mut d, p);
        set(&mut e, q);
        DirectionPair::new(d, e, 0).unwrap()
    }

    #[test]
    fn quadratic_axis_scan_is_a_paraboloid() {
        let center = params();
        let n = center.numel();
        let curv: Vec<f64> = (0..n).map(|i| 0.5 + (i % 7) as f64).collect();
        let q = QuadraticModel::new(center.clone(), curv.clone()).unwrap();
        let dir = axis_pair(&center, 10, 200);
        let g = scan_surface(&q, &dir, &ScanRange::symmetric(0.25, 11), 1, "train", 0).unwrap();
        for (a, b, l) in g.points() {
            let want = curv[10] * a * a + curv[200] * b * b;
            assert!((l - want).abs() <= 1e-6 * want.max(1e-12), "{a} {b}: {l} vs {want}");
        }
        assert_eq!(g.center_loss, 0.0);
    }

    #[test]
    fn scan_requires_origin_on_lattice() {
        let center = params();
        let q = QuadraticModel::isotropic(center.clone(), 1.0).unwrap();
        let dir = axis_pair(&center, 0, 1);
        assert!(scan_surface(&q, &dir, &ScanRange::symmetric(0.25, 10), 1, "train", 0).is_err());
        let shifted = ScanRange {
            alpha: (0.1, 0.5),
            beta: (-1.0, 1.0),
            points: 5,
        };
        assert!(scan_surface(&q, &dir, &shifted, 1, "train", 0).is_err());
    }

    #[test]
    fn parallel_scan_equals_serial() {
        let center = params();
        let n = center.numel();
        let q = QuadraticModel::new(center.clone(), (0..n).map(|i| 1.0 + (i % 3) as f64).collect()).unwrap();
        let dir = filter_normalize(sample_directions(&center, 2), &center).unwrap();
        let r = ScanRange::symmetric(0.5, 9);
        let a = scan_surface(&q, &dir, &r, 1, "train", 0).unwrap();
        let b = scan_surface(&q, &dir, &r, 4, "train", 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let center = params();
        let q = QuadraticModel::isotropic(center.clone(), 2.0).unwrap();
        let dir = filter_normalize(sample_directions(&center, 2), &center).unwrap();
        let mut g = scan_surface(&q, &dir, &ScanRange::symmetric(1.0, 5), 1, "train", 0).unwrap();
        g.losses[0][0] = f64::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surface.csv");
        g.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 25);
        assert!(text.starts_with("alpha,beta,loss\n"));
        let back = SurfaceGrid::read(&path).unwrap();
        assert_eq!(back, g);
    }
}
