//! One PASS/FAIL line per acceptance criterion. Trains the default Mini10
//! for 50 epochs, so expect a long run.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::cell::OnceCell;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use sharpscape_core::audio::{logmel, FeatureConfig};
use sharpscape_core::checkpoint::{from_bytes, to_bytes, CheckpointError};
use sharpscape_core::landscape::{
    eval_batches, filter_normalize, model_loss, sample_directions, scan_surface, DirectionPair, NetworkObjective,
    ScanRange,
};
use sharpscape_core::nn::{Arch, ModelSpec, ModelState, ParamKind, ParamTensor, ParamVector, QuadraticModel};
use sharpscape_core::optim::{OptimConfig, OptimKind};
use sharpscape_core::sharpness::{epsilon_sharpness, sharpness_study, SharpnessConfig, SharpnessResult, Region};
use sharpscape_core::study::{correlation_report, disaggregate, load_records, GroupKey, GridPoint, RunStatus, StudyRecord};
use sharpscape_core::synth::{examples, generate_dataset, split_iid_ood, Dataset, SynthConfig};
use sharpscape_core::train::{accuracy, train_with, TrainConfig};
use sharpscape_core::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_sharpscape");

/// Reduced grid for the OOD-gap and determinism checks.
const STUDY_ARGS: &[&str] = &[
    "study",
    "--train-size", "300",
    "--test-size", "270",
    "--frames", "48",
    "--arch", "mini10,mini14",
    "--optimiser", "sgd,adam",
    "--lr", "1e-3",
    "--noise", "0.5",
    "--batch-size", "16",
    "--seed", "42,43",
    "--epochs", "20",
    "--eval-samples", "64",
];

struct Trained {
    data: Dataset,
    state: ModelState,
    final_train_accuracy: f64,
    seconds: f64,
}

struct Ctx {
    dir: tempfile::TempDir,
    mini10: OnceCell<Trained>,
    studies: OnceCell<(PathBuf, PathBuf)>,
}

impl Ctx {
    fn mini10(&self) -> Result<&Trained> {
        if let Some(t) = self.mini10.get() {
            return Ok(t);
        }
        eprintln!("training Mini10 on the default dataset (Adam 1e-3, batch 32, 50 epochs)...");
        let data = generate_dataset(&SynthConfig::default())?;
        let start = Instant::now();
        let (state, final_train_accuracy) = {
            let train_s = data.train();
            let (iid, _) = split_iid_ood(&data.test())?;
            let spec = ModelSpec::mini10(data.config.classes, data.config.bins);
            let cfg = TrainConfig::new(OptimConfig::adam(1e-3), 32, 42);
            let out = train_with(&spec, &examples(&train_s), &examples(&iid), &cfg, |e| {
                eprintln!("  epoch {:2} loss {:.4} train {:.4} dev {:.4}", e.epoch, e.train_loss, e.train_accuracy, e.dev_accuracy)
            })?;
            (out.state, out.logs.last().context("no epochs")?.train_accuracy)
        };
        let t = Trained {
            data,
            state,
            final_train_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok(self.mini10.get_or_init(|| t))
    }

    fn studies(&self) -> Result<&(PathBuf, PathBuf)> {
        if let Some(s) = self.studies.get() {
            return Ok(s);
        }
        let a = self.dir.path().join("study_a");
        let b = self.dir.path().join("study_b");
        for d in [&a, &b] {
            eprintln!("running the reduced study into {}...", d.display());
            run_cli(STUDY_ARGS.iter().copied().chain(["--out", d.to_str().unwrap()]))?;
        }
        Ok(self.studies.get_or_init(|| (a, b)))
    }
}

fn run_cli<'a>(args: impl IntoIterator<Item = &'a str>) -> Result<String> {
    let args: Vec<&str> = args.into_iter().collect();
    let out = Command::new(BIN).args(&args).output().context("cannot run the CLI")?;
    if !out.status.success() {
        bail!(
            "`sharpscape {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn norm(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn c1_gradients(_: &Ctx) -> Result<String> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for kind in common::OP_KINDS {
        for seed in 0..5 {
            let r = common::check(&common::case(kind, seed));
            ensure!(
                r.max_rel_error < common::REL_TOL,
                "{kind} seed {seed}: relative error {:.3e}",
                r.max_rel_error
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{} op kinds x 5 seeds, worst rel error {worst:.2e}, {secs:.1}s", common::OP_KINDS.len()))
}

fn check_normalized(state: &ModelState, seed: u64) -> Result<f64> {
    let dir = filter_normalize(sample_directions(&state.params, seed), &state.params)?;
    let mut worst = 0.0f64;
    for d in [&dir.delta, &dir.eta] {
        for (e, p) in d.entries().iter().zip(state.params.entries()) {
            match p.kind {
                ParamKind::NonFilter => {
                    ensure!(e.value.data().iter().all(|&v| v == 0.0), "{} direction is not zero", e.name)
                }
                ParamKind::Filter => {
                    for j in 0..p.filter_count() {
                        let (nd, nt) = (norm(e.filter(j)), norm(p.filter(j)));
                        let rel = if nt == 0.0 { nd } else { (nd - nt).abs() / nt };
                        ensure!(rel < 1e-5, "{} filter {j}: |{nd} - {nt}|", e.name);
                        worst = worst.max(rel);
                    }
                }
            }
        }
    }
    Ok(worst)
}

fn c2_filter_norms(ctx: &Ctx) -> Result<String> {
    let m10 = &ctx.mini10()?.state;
    eprintln!("training a short Mini14 for the normalization check...");
    let data = generate_dataset(&SynthConfig {
        train: 300,
        test: 90,
        frames: 48,
        ..SynthConfig::default()
    })?;
    let train_s = data.train();
    let (iid, _) = split_iid_ood(&data.test())?;
    let mut cfg = TrainConfig::new(OptimConfig::adam(1e-3), 32, 42);
    cfg.epochs = 5;
    let m14 = train_with(&ModelSpec::mini14(10, data.config.bins), &examples(&train_s), &examples(&iid), &cfg, |_| {})?.state;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        worst = worst.max(check_normalized(m10, seed)?);
        worst = worst.max(check_normalized(&m14, seed)?);
    }
    Ok(format!("Mini10 and Mini14, 3 seeds each, worst rel deviation {worst:.2e}, non-filter entries zero"))
}

fn c3_center(ctx: &Ctx) -> Result<String> {
    let t = ctx.mini10()?;
    let mut scans = 0;
    for split in ["train", "test"] {
        let samples = if split == "train" { t.data.train() } else { t.data.test() };
        let items = examples(&samples);
        let batches = eval_batches(&items[..128])?;
        let objective = NetworkObjective::new(&t.state, &batches);
        let want = model_loss(&t.state, &batches)?;
        for seed in 0..2 {
            let dir = filter_normalize(sample_directions(&t.state.params, seed), &t.state.params)?;
            for range in [ScanRange::symmetric(0.25, 5), ScanRange::symmetric(1.0, 3)] {
                let g = scan_surface(&objective, &dir, &range, 1, split, 128)?;
                let (a, b) = g.center_index().context("no center")?;
                ensure!(g.losses[a][b].to_bits() == want.to_bits(), "{split}: f(0,0) {} vs {want}", g.losses[a][b]);
                ensure!(g.center_loss.to_bits() == want.to_bits(), "center_loss mismatch");
                scans += 1;
            }
        }
    }
    Ok(format!("{scans} scans on train and test splits, f(0,0) bit-identical to the eval-mode loss"))
}

fn axis_vector(dim: usize, i: usize) -> ParamVector {
    let mut v = vec![0.0f32; dim];
    v[i] = 1.0;
    ParamVector::new(vec![ParamTensor {
        name: "w".into(),
        kind: ParamKind::Filter,
        value: Tensor::new(vec![1, dim], v).unwrap(),
    }])
}

fn c4_quadratic(_: &Ctx) -> Result<String> {
    let dim = 6;
    let curv = vec![3.0, 0.5, 1.0, 1.0, 1.0, 1.0];
    let center = ParamVector::new(vec![ParamTensor {
        name: "w".into(),
        kind: ParamKind::Filter,
        value: Tensor::new(vec![1, dim], vec![0.3, -0.2, 0.1, 0.0, 0.5, 1.0]).unwrap(),
    }]);
    let q = QuadraticModel::new(center, curv.clone())?;
    let dir = DirectionPair::new(axis_vector(dim, 0), axis_vector(dim, 1), 0)?;
    let grid = scan_surface(&q, &dir, &ScanRange::sharpness_default(), 1, "train", 0)?;
    let mut prev = -1.0;
    let mut out = Vec::new();
    for (eps, r2) in [(0.05, 1), (0.1, 4), (0.25, 25)] {
        // Lattice points are 0.05·(k, l) with integer k, l in [-5, 5].
        let mut want = 0.0f64;
        for k in -5i32..=5 {
            for l in -5i32..=5 {
                if k * k + l * l <= r2 {
                    let (a, b) = (0.05 * k as f64, 0.05 * l as f64);
                    want = want.max(100.0 * (curv[0] * a * a + curv[1] * b * b));
                }
            }
        }
        let got = epsilon_sharpness(&grid, eps)?;
        ensure!((got - want).abs() <= 1e-6 * want, "eps {eps}: {got} vs closed form {want}");
        ensure!(got >= prev, "not monotone at eps {eps}");
        prev = got;
        out.push(format!("{eps}->{got:.4}"));
    }
    Ok(format!("matches the lattice closed form: {}", out.join(", ")))
}

fn c5_protocol(ctx: &Ctx) -> Result<String> {
    let t = ctx.mini10()?;
    let cfg = SharpnessConfig {
        orthogonalize: true,
        ..SharpnessConfig::default()
    };
    let q = QuadraticModel::isotropic(t.state.params.clone(), 2.0)?;
    let (qr, qgrids) = sharpness_study(&q, &cfg, "train", 0)?;
    ensure!(qr.values.len() == 3 && qgrids.iter().all(|g| g.len() == 121), "shape of the quadratic study");
    ensure!(qr.std < 1e-6 * qr.mean, "quadratic std {} vs mean {}", qr.std, qr.mean);

    let items = examples(&t.data.train());
    let batches = eval_batches(&items[..256])?;
    let objective = NetworkObjective::new(&t.state, &batches);
    let start = Instant::now();
    let (r, grids) = sharpness_study(&objective, &SharpnessConfig::default(), "train", 256)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(r.values.len() == 3 && grids.iter().all(|g| g.len() == 121), "3 repeats of 121 points");
    let center = model_loss(&t.state, &batches)?;
    ensure!(grids.iter().all(|g| g.center_loss.to_bits() == center.to_bits()), "center anchor");
    ensure!(secs < 600.0, "Mini10 sharpness took {secs:.0}s");
    Ok(format!(
        "quadratic std/mean {:.1e}; Mini10 s = {:.3} +/- {:.3} in {secs:.0}s (training took {:.0}s)",
        qr.std / qr.mean,
        r.mean,
        r.std,
        t.seconds
    ))
}

fn c6_workers(ctx: &Ctx) -> Result<String> {
    let t = ctx.mini10()?;
    let dir = ctx.dir.path();
    let ck = dir.join("mini10.mscp");
    sharpscape_core::save_checkpoint(&ck, &t.state, None)?;
    let mut files = Vec::new();
    for w in ["1", "8"] {
        let out = dir.join(format!("scan_w{w}"));
        run_cli([
            "scan", "--checkpoint", ck.to_str().unwrap(), "--radius", "0.25", "--points", "11", "--eval-samples", "64",
            "--seed", "5", "--workers", w, "--out", out.to_str().unwrap(),
        ])?;
        files.push((fs::read(out.join("surface.csv"))?, fs::read(out.join("surface.json"))?));
    }
    ensure!(files[0] == files[1], "surface files differ between 1 and 8 workers");

    let q = QuadraticModel::isotropic(t.state.params.clone(), 1.5)?;
    let d = filter_normalize(sample_directions(&t.state.params, 9), &t.state.params)?;
    let range = ScanRange::symmetric(1.0, 9);
    let serial = scan_surface(&q, &d, &range, 1, "train", 0)?;
    let parallel = scan_surface(&q, &d, &range, 8, "train", 0)?;
    ensure!(
        serial.losses.iter().flatten().zip(parallel.losses.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "quadratic scan differs"
    );
    Ok("CLI scan CSV and sidecar byte-identical for --workers 1 and 8; library scan bit-identical".into())
}

fn c7_training(ctx: &Ctx) -> Result<String> {
    let t = ctx.mini10()?;
    let last = t.final_train_accuracy;
    let acc = accuracy(&t.state, &examples(&t.data.train()))?;
    ensure!(acc >= 0.99, "train accuracy {acc:.4} of the selected state");
    let (a, _) = ctx.studies()?;
    let records = load_records(a)?;
    let converged: Vec<&StudyRecord> = records.iter().filter(|r| r.converged()).collect();
    ensure!(!converged.is_empty(), "no converged configurations in the reduced grid");
    let gap = converged
        .iter()
        .filter(|r| r.ood_accuracy.unwrap_or(1.0) < r.iid_accuracy.unwrap_or(0.0))
        .count();
    let frac = gap as f64 / converged.len() as f64;
    ensure!(frac >= 0.75, "OOD < IID on {gap} of {} converged configs", converged.len());
    Ok(format!(
        "Mini10 train accuracy {acc:.4} (running {last:.4} in epoch 50); OOD < IID on {gap}/{} converged configs ({} in grid)",
        converged.len(),
        records.len()
    ))
}

fn synthetic_record(i: usize, arch: Arch, opt: OptimKind, seed: u64, s: f64) -> Result<StudyRecord> {
    let p = GridPoint {
        arch,
        optimiser: opt,
        lr: 1e-3,
        batch_size: 32,
        seed,
    };
    let acc = |a: f64, b: f64| a * s + b;
    Ok(StudyRecord {
        config_id: format!("{i:02}-{}", p.config_id()),
        arch,
        optimiser: opt,
        lr: p.lr,
        batch_size: p.batch_size,
        seed,
        epochs: 1,
        status: RunStatus::Ok,
        best_epoch: Some(1),
        final_train_accuracy: Some(1.0),
        train_accuracy: Some(1.0),
        dev_accuracy: Some(acc(0.01, 0.5)),
        iid_accuracy: Some(acc(0.01, 0.5)),
        ood_accuracy: Some(acc(0.02, 0.25)),
        test_accuracy: Some(acc(0.015, 0.375)),
        sharpness: Some(SharpnessResult::from_values(0.25, vec![s], vec![0], "x".into(), Region::Ball)?),
    })
}

fn c8_study_integrity(_: &Ctx) -> Result<String> {
    let sharp = [1.0, 2.5, 4.0, 5.5, 7.0, 8.5, 10.0, 11.5];
    let mut recs = Vec::new();
    for (i, &s) in sharp.iter().enumerate() {
        let arch = if i % 2 == 0 { Arch::Mini10 } else { Arch::Mini14 };
        let opt = if i < 3 { OptimKind::Sgd } else { OptimKind::Adam };
        recs.push(synthetic_record(i, arch, opt, 42 + (i % 3) as u64, s)?);
    }
    let rep = correlation_report(&recs)?;
    for (name, r) in [("iid", rep.iid.r), ("ood", rep.ood.r), ("combined", rep.test.r)] {
        let r = r.context("undefined r")?;
        ensure!((r - 1.0).abs() <= 1e-12, "{name} r = {r}");
    }
    let n = recs.len() as f64;
    let global_s = sharp.iter().sum::<f64>() / n;
    let global_iid = recs.iter().map(|r| r.iid_accuracy.unwrap()).sum::<f64>() / n;
    for key in GroupKey::ALL {
        let g = disaggregate(&recs, key)?;
        let size: usize = g.iter().map(|g| g.count).sum();
        ensure!(size == recs.len(), "{key}: group sizes sum to {size}");
        let ws = g.iter().map(|g| g.count as f64 * g.mean_sharpness).sum::<f64>() / n;
        let wi = g.iter().map(|g| g.count as f64 * g.mean_iid_accuracy).sum::<f64>() / n;
        ensure!((ws - global_s).abs() <= 1e-12 * global_s, "{key}: weighted sharpness {ws} vs {global_s}");
        ensure!((wi - global_iid).abs() <= 1e-12 * global_iid, "{key}: weighted accuracy {wi} vs {global_iid}");
    }
    Ok("r = 1 for iid/ood/combined; size-weighted group means recover the global means for all 5 keys".into())
}

fn c9_features(_: &Ctx) -> Result<String> {
    let cfg = FeatureConfig::default();
    ensure!((cfg.window, cfg.hop) == (512, 160), "32 ms / 10 ms at 16 kHz");
    let m = logmel(&vec![0.0f32; 160_000], &cfg)?;
    ensure!(m.shape() == [64, 997], "shape {:?}", m.shape());
    Ok("10 s at 16 kHz -> 64 x 997".into())
}

fn c10_persistence(ctx: &Ctx) -> Result<String> {
    let t = ctx.mini10()?;
    let bytes = to_bytes(&t.state, Some(&TrainConfig::new(OptimConfig::adam(1e-3), 32, 42)))?;
    let ck = from_bytes(&bytes)?;
    ensure!(ck.state.params == t.state.params, "parameters differ after load");
    ensure!(to_bytes(&ck.state, ck.train.as_ref())? == bytes, "save-load-save is not byte-identical");

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    ensure!(matches!(from_bytes(&bad), Err(CheckpointError::NotACheckpoint)), "bad magic");
    ensure!(
        matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(CheckpointError::PayloadLength { .. })),
        "truncated payload"
    );
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"fc.weight\",\"shape\":[10,").context("manifest entry")? + "\"fc.weight\",\"shape\":[".len();
    let mut m = bytes.clone();
    m[at..at + 2].copy_from_slice(b"11");
    ensure!(matches!(from_bytes(&m), Err(CheckpointError::ManifestMismatch(_))), "manifest mismatch");

    let dir = ctx.dir.path().join("persist");
    fs::create_dir_all(&dir)?;
    let q = QuadraticModel::isotropic(t.state.params.clone(), 1.0)?;
    let d = filter_normalize(sample_directions(&t.state.params, 3), &t.state.params)?;
    for points in [3usize, 11, 41] {
        let g = scan_surface(&q, &d, &ScanRange::symmetric(1.0, points), 1, "train", 0)?;
        let path = dir.join(format!("s{points}.csv"));
        g.write(&path)?;
        let rows = fs::read_to_string(&path)?.lines().count() - 1;
        ensure!(rows == points * points, "{points} points: {rows} rows");
    }
    Ok("save/load/save byte-identical; CSV rows = points^2 for 3, 11, 41; bad magic, truncation and manifest errors distinct".into())
}

fn read_records(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir.join("records"))? {
        let p = e?.path();
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p)?));
    }
    out.sort();
    Ok(out)
}

fn c11_determinism(ctx: &Ctx) -> Result<String> {
    let (a, b) = ctx.studies()?;
    let (ra, rb) = (read_records(a)?, read_records(b)?);
    ensure!(ra.len() == 8, "expected 8 records, found {}", ra.len());
    ensure!(ra == rb, "records differ between identical study runs");
    ensure!(fs::read(a.join("summary.csv"))? == fs::read(b.join("summary.csv"))?, "summary differs");
    ensure!(fs::read(a.join("report.json"))? == fs::read(b.join("report.json"))?, "report differs");
    Ok(format!("{} records, summary and report byte-identical across two `study` runs", ra.len()))
}

type Check = fn(&Ctx) -> Result<String>;

fn main() {
    let ctx = Ctx {
        dir: tempfile::tempdir().expect("tempdir"),
        mini10: OnceCell::new(),
        studies: OnceCell::new(),
    };
    let checks: [(&str, Check); 11] = [
        ("gradient oracle", c1_gradients),
        ("filter-normalized direction norms", c2_filter_norms),
        ("surface center anchor", c3_center),
        ("quadratic sharpness oracle", c4_quadratic),
        ("three-repeat sharpness protocol", c5_protocol),
        ("parallel equals serial", c6_workers),
        ("training protocol and OOD gap", c7_training),
        ("study integrity", c8_study_integrity),
        ("feature recipe", c9_features),
        ("persistence", c10_persistence),
        ("end-to-end determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS C{} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL C{} {name}: {e:#} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
