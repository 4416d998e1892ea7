use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sharpscape_core::audio::{load_wav, logmel, FeatureConfig};
use sharpscape_core::checkpoint::{load_checkpoint, save_checkpoint};
use sharpscape_core::landscape::{
    eval_batches, filter_normalize, filter_normalize_orthogonal, sample_directions, scan_surface, NetworkObjective,
    ScanRange, SurfaceGrid,
};
use sharpscape_core::nn::{Batch, ModelSpec, ModelState};
use sharpscape_core::optim::OptimConfig;
use sharpscape_core::plot::{self, Bar, BarGroup, Series};
use sharpscape_core::sharpness::{epsilon_sharpness_in, sharpness_study, Region, SharpnessConfig, SharpnessResult};
use sharpscape_core::study::{
    disaggregate, load_records, run_study, study_report, write_summary, Exclusion, GridSpec, RunStatus, StudyConfig,
    StudyRecord,
};
use sharpscape_core::synth::{examples, export_dataset, generate_dataset, import_dataset, split_iid_ood, Dataset, SynthConfig};
use sharpscape_core::train::{accuracy, train_with, TrainConfig};

use crate::args::*;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn synth_config(seed: u64, train: Option<usize>, test: Option<usize>, frames: Option<usize>, bins: Option<usize>, noise: Option<f64>) -> SynthConfig {
    let mut c = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(v) = train {
        c.train = v;
    }
    if let Some(v) = test {
        c.test = v;
    }
    if let Some(v) = frames {
        c.frames = v;
    }
    if let Some(v) = bins {
        c.bins = v;
    }
    if let Some(v) = noise {
        c.noise = v;
    }
    c
}

impl DataArgs {
    fn config(&self) -> SynthConfig {
        synth_config(self.data_seed, self.train_size, self.test_size, self.frames, self.bins, self.noise)
    }

    fn load(&self) -> Result<Dataset> {
        match &self.data {
            Some(dir) => Ok(import_dataset(dir)?),
            None => Ok(generate_dataset(&self.config())?),
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = synth_config(a.seed, a.train_size, a.test_size, a.frames, a.bins, a.noise);
    let data = generate_dataset(&cfg)?;
    export_dataset(&data, &a.out)?;
    let train = data.train();
    let (iid, ood) = split_iid_ood(&data.test())?;
    println!(
        "wrote {} train / {} test samples ({} iid, {} ood) to {}",
        train.len(),
        iid.len() + ood.len(),
        iid.len(),
        ood.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    config: TrainConfig,
    data: SynthConfig,
    best_epoch: usize,
    final_train_accuracy: f64,
    train_accuracy: f64,
    dev_accuracy: f64,
    iid_accuracy: f64,
    ood_accuracy: Option<f64>,
    test_accuracy: f64,
    model_hash: String,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = a.data.load()?;
    let spec = ModelSpec::for_arch(a.arch, data.config.classes, data.config.bins)?;
    let mut cfg = TrainConfig::new(OptimConfig::new(a.optimiser, a.lr), a.batch_size, a.seed);
    cfg.epochs = a.epochs;
    let train_s = data.train();
    let test_s = data.test();
    let (iid_s, ood_s) = split_iid_ood(&test_s)?;
    let (tr, iid, ood, test) = (examples(&train_s), examples(&iid_s), examples(&ood_s), examples(&test_s));
    create_dir(&a.out)?;
    let log_path = a.out.join("epochs.csv");
    let mut log = csv::Writer::from_path(&log_path)?;
    log.write_record(["epoch", "train_loss", "train_accuracy", "dev_accuracy"])?;
    let outcome = train_with(&spec, &tr, &iid, &cfg, |e| {
        eprintln!(
            "epoch {:3}  loss {:.4}  train {:.4}  dev {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.dev_accuracy
        );
        let _ = log.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_accuracy.to_string(),
            e.dev_accuracy.to_string(),
        ]);
    });
    log.flush()?;
    let outcome = outcome?;
    let state = outcome.state;
    save_checkpoint(&a.out.join("model.mscp"), &state, Some(&cfg))?;
    let summary = TrainSummary {
        config: cfg,
        data: data.config.clone(),
        best_epoch: outcome.best_epoch,
        final_train_accuracy: outcome.logs.last().map_or(0.0, |l| l.train_accuracy),
        train_accuracy: accuracy(&state, &tr)?,
        dev_accuracy: outcome.logs[outcome.best_epoch - 1].dev_accuracy,
        iid_accuracy: accuracy(&state, &iid)?,
        ood_accuracy: if ood.is_empty() { None } else { Some(accuracy(&state, &ood)?) },
        test_accuracy: accuracy(&state, &test)?,
        model_hash: state.model_hash(),
    };
    write_json(&a.out.join("train.json"), &summary)?;
    println!(
        "final train accuracy {:.4}; best epoch {} of {}: train {:.4}  iid {:.4}  ood {}  -> {}",
        summary.final_train_accuracy,
        summary.best_epoch,
        cfg.epochs,
        summary.train_accuracy,
        summary.iid_accuracy,
        summary.ood_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        a.out.join("model.mscp").display()
    );
    Ok(())
}

/// Checkpoint plus the evaluation batches a scan uses.
struct ScanInput {
    state: ModelState,
    batches: Vec<Batch>,
    split: &'static str,
    eval_samples: usize,
}

fn scan_input(c: &ScanCommon) -> Result<ScanInput> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("--checkpoint is required"))?;
    let state = load_checkpoint(path)?.state;
    let data = c.data.load()?;
    if data.config.bins != state.spec.input_bins || data.config.classes != state.spec.classes {
        bail!(
            "dataset has {} bins / {} classes but the checkpoint expects {} / {}",
            data.config.bins,
            data.config.classes,
            state.spec.input_bins,
            state.spec.classes
        );
    }
    let (samples, split) = match c.split {
        SplitArg::Train => (data.train(), "train"),
        SplitArg::Test => (data.test(), "test"),
    };
    let items = examples(&samples);
    let n = if c.eval_samples == 0 { items.len() } else { c.eval_samples.min(items.len()) };
    let batches = eval_batches(&items[..n])?;
    Ok(ScanInput {
        state,
        batches,
        split,
        eval_samples: n,
    })
}

pub fn scan(a: ScanArgs) -> Result<()> {
    let input = scan_input(&a.common)?;
    let objective = NetworkObjective::new(&input.state, &input.batches);
    let raw = sample_directions(&input.state.params, a.common.seed);
    let dir = if a.common.orthogonalize {
        filter_normalize_orthogonal(raw, &input.state.params)?
    } else {
        filter_normalize(raw, &input.state.params)?
    };
    let range = ScanRange::symmetric(a.radius, a.points);
    let grid = scan_surface(&objective, &dir, &range, a.common.workers, input.split, input.eval_samples)?;
    create_dir(&a.out)?;
    let path = a.out.join("surface.csv");
    grid.write(&path)?;
    let (lo, hi) = grid
        .points()
        .map(|p| p.2)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    println!(
        "{}x{} surface over [-{r}, {r}]^2, center loss {:.6}, range [{lo:.6}, {hi:.6}] -> {}",
        grid.alphas.len(),
        grid.betas.len(),
        grid.center_loss,
        path.display(),
        r = a.radius
    );
    Ok(())
}

pub fn sharpness(a: SharpnessArgs) -> Result<()> {
    let region = if a.square { Region::Square } else { Region::Ball };
    create_dir(&a.out)?;
    let result = if let Some(path) = &a.grid {
        let grid = SurfaceGrid::read(path)?;
        let s = epsilon_sharpness_in(&grid, a.epsilon, region)?;
        SharpnessResult::from_values(a.epsilon, vec![s], vec![grid.meta.direction_seed], grid.meta.model_hash.clone(), region)?
    } else {
        let input = scan_input(&a.common)?;
        let objective = NetworkObjective::new(&input.state, &input.batches);
        let cfg = SharpnessConfig {
            epsilon: a.epsilon,
            repeats: a.repeats,
            base_seed: a.common.seed,
            range: ScanRange::symmetric(a.radius, a.points),
            workers: a.common.workers,
            region,
            orthogonalize: a.common.orthogonalize,
        };
        let (result, grids) = sharpness_study(&objective, &cfg, input.split, input.eval_samples)?;
        for (r, g) in grids.iter().enumerate() {
            g.write(&a.out.join(format!("surface_r{r}.csv")))?;
        }
        result
    };
    write_json(&a.out.join("sharpness.json"), &result)?;
    let values: Vec<String> = result.values.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "epsilon {}: sharpness {:.4} +/- {:.4} over {} repeat(s) [{}]{}",
        result.epsilon,
        result.mean,
        result.std,
        result.values.len(),
        values.join(", "),
        if result.is_divergent() { " (divergent)" } else { "" }
    );
    Ok(())
}

fn parse_exclusion(s: &str) -> Result<Exclusion> {
    let mut e = Exclusion::default();
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("exclusion `{part}` is not key=value"))?;
        match k.trim() {
            "arch" | "architecture" => e.arch = Some(v.parse()?),
            "optimiser" | "optimizer" => e.optimiser = Some(v.parse()?),
            "lr" | "learning-rate" => e.lr = Some(v.parse()?),
            "batch-size" | "batch_size" => e.batch_size = Some(v.parse()?),
            "seed" => e.seed = Some(v.parse()?),
            other => bail!("unknown exclusion key `{other}`"),
        }
    }
    Ok(e)
}

#[derive(Serialize, Deserialize, PartialEq)]
struct StudySettings {
    grid: GridSpec,
    config: StudyConfig,
}

pub fn study(a: StudyArgs) -> Result<()> {
    if a.data.data.is_some() {
        bail!("study generates its own data; use --data-seed and the size flags");
    }
    let grid = GridSpec {
        archs: a.arch,
        optimisers: a.optimiser,
        lrs: a.lr,
        batch_sizes: a.batch_size,
        seeds: a.seed,
        exclusions: a.exclude.iter().map(|s| parse_exclusion(s)).collect::<Result<_>>()?,
    };
    let total = grid.points()?.len();
    let config = StudyConfig {
        data: a.data.config(),
        epochs: a.epochs,
        sharpness: SharpnessConfig {
            epsilon: a.epsilon,
            repeats: a.repeats,
            base_seed: a.direction_seed,
            range: ScanRange::symmetric(a.radius, a.points),
            workers: a.workers,
            region: if a.square { Region::Square } else { Region::Ball },
            orthogonalize: a.orthogonalize,
        },
        eval_samples: a.eval_samples,
    };
    create_dir(&a.out)?;
    let settings = StudySettings { grid, config };
    let settings_path = a.out.join("study.json");
    if settings_path.exists() {
        let text = fs::read_to_string(&settings_path)?;
        let mut old: StudySettings = serde_json::from_str(&text).context("unreadable study.json")?;
        old.config.sharpness.workers = settings.config.sharpness.workers;
        if old != settings {
            bail!("{} was created with different settings; use a fresh --out", a.out.display());
        }
    } else {
        write_json(&settings_path, &settings)?;
    }
    let mut done = 0;
    let records = run_study(&settings.grid, &settings.config, &a.out, |r, resumed| {
        done += 1;
        eprintln!("[{done}/{total}] {} {}", r.config_id, if resumed { "(resumed)".into() } else { status(r) });
    })?;
    finish_report(&records, &a.out)?;
    Ok(())
}

fn status(r: &StudyRecord) -> String {
    match &r.status {
        RunStatus::Ok => format!(
            "train {:.3} iid {:.3} ood {} sharpness {}",
            r.train_accuracy.unwrap_or(f64::NAN),
            r.iid_accuracy.unwrap_or(f64::NAN),
            r.ood_accuracy.map_or("n/a".into(), |v| format!("{v:.3}")),
            r.sharpness.as_ref().map_or("n/a".into(), |s| format!("{:.3}", s.mean)),
        ),
        RunStatus::Diverged { epoch } => format!("diverged at epoch {epoch}"),
        RunStatus::Failed(e) => format!("failed: {e}"),
    }
}

fn finish_report(records: &[StudyRecord], out: &Path) -> Result<()> {
    write_summary(&out.join("summary.csv"), records)?;
    let report = study_report(records);
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{} records, {} converged, OOD < IID on {} of them",
        report.records, report.converged, report.ood_below_iid
    );
    match (&report.correlation, &report.correlation_error) {
        (Some(c), _) => {
            let r = |v: Option<f64>| v.map_or("undefined".to_string(), |r| format!("{r:+.3}"));
            println!(
                "pearson r (sharpness vs accuracy): iid {}  ood {}  combined {}{}",
                r(c.iid.r),
                r(c.ood.r),
                r(c.test.r),
                if c.degenerate { "  [degenerate]" } else { "" }
            );
        }
        (None, Some(e)) => println!("no correlation: {e}"),
        _ => {}
    }
    for (key, groups) in &report.groups {
        let cells: Vec<String> = groups
            .iter()
            .map(|g| format!("{}: {:.3} (n={})", g.value, g.mean_sharpness, g.count))
            .collect();
        println!("mean sharpness by {key}: {}", cells.join(", "));
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let records = load_records(&a.study)?;
    if records.is_empty() {
        bail!("no records in {}", a.study.join("records").display());
    }
    let out = a.out.unwrap_or(a.study);
    create_dir(&out)?;
    finish_report(&records, &out)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let is_study = a.input.is_dir();
    let kind = a.kind.unwrap_or(if is_study { PlotKind::Scatter } else { PlotKind::SurfaceHeatmap });
    let svg = match kind {
        PlotKind::SurfaceHeatmap | PlotKind::SurfaceContour => {
            if is_study {
                bail!("{:?} needs a surface CSV, got a directory", kind);
            }
            let grid = SurfaceGrid::read(&a.input)?;
            let title = format!("loss surface ({} split)", grid.meta.split);
            if kind == PlotKind::SurfaceHeatmap {
                plot::surface_heatmap(&grid, &title)?
            } else {
                plot::surface_contour(&grid, a.levels, &title)?
            }
        }
        PlotKind::Scatter | PlotKind::GroupedBars => {
            if !is_study {
                bail!("{:?} needs a study directory", kind);
            }
            let records = load_records(&a.input)?;
            if kind == PlotKind::Scatter {
                let report = sharpscape_core::study::correlation_report(&records)?;
                let series = |name: &str, f: fn(&sharpscape_core::study::ScatterRow) -> f64| Series {
                    name: name.into(),
                    points: report.rows.iter().map(|r| (r.sharpness, f(r))).collect(),
                };
                plot::scatter(
                    &[series("iid", |r| r.iid_accuracy), series("ood", |r| r.ood_accuracy)],
                    "test accuracy vs mean sharpness",
                    "mean sharpness",
                    "accuracy",
                )?
            } else {
                let groups = disaggregate(&records, a.group_by)?;
                let bars: Vec<BarGroup> = groups
                    .iter()
                    .map(|g| BarGroup {
                        label: g.value.clone(),
                        bars: match a.metric {
                            BarMetric::Sharpness => vec![Bar {
                                metric: "sharpness".into(),
                                value: g.mean_sharpness,
                                err: Some(g.std_sharpness),
                            }],
                            BarMetric::Accuracy => vec![
                                Bar { metric: "iid".into(), value: g.mean_iid_accuracy, err: None },
                                Bar { metric: "ood".into(), value: g.mean_ood_accuracy, err: None },
                                Bar { metric: "combined".into(), value: g.mean_test_accuracy, err: None },
                            ],
                        },
                    })
                    .collect();
                let what = match a.metric {
                    BarMetric::Sharpness => "mean sharpness",
                    BarMetric::Accuracy => "mean accuracy",
                };
                plot::grouped_bars(&bars, &format!("{what} by {}", a.group_by), what)?
            }
        }
    };
    let out = a.out.unwrap_or_else(|| default_plot_path(&a.input, kind));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&out, svg).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn default_plot_path(input: &Path, kind: PlotKind) -> PathBuf {
    let name = match kind {
        PlotKind::SurfaceHeatmap => "heatmap",
        PlotKind::SurfaceContour => "contour",
        PlotKind::Scatter => "scatter",
        PlotKind::GroupedBars => "bars",
    };
    if input.is_dir() {
        input.join(format!("{name}.svg"))
    } else {
        input.with_extension(format!("{name}.svg"))
    }
}

pub fn features(a: FeaturesArgs) -> Result<()> {
    let (samples, rate) = load_wav(&a.wav)?;
    let cfg = FeatureConfig::default();
    let m = logmel(&samples, &cfg)?;
    let (bins, frames) = (m.shape()[0], m.shape()[1]);
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["bin".to_string()];
    header.extend((0..frames).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for b in 0..bins {
        let mut row = vec![b.to_string()];
        row.extend(m.data()[b * frames..(b + 1) * frames].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    println!(
        "{} samples at {rate} Hz -> {bins} mel bins x {frames} frames -> {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}
