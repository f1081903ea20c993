//! Command implementations. Each writes its outputs and a `config.json`
//! snapshot into `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bas::eval::{evaluate, threshold_grid, threshold_search, MetricReport};
use bas::explore::{aggregate_csv, aggregate_curves, explore_dataset, points_csv, BinStat, Crossovers, CurveSkip, Quantity};
use bas::losses::LossBundle;
use bas::model::BasNet;
use bas::synth::{generate_dataset, generate_split, load_split, read_dataset_spec, split_dir, Sample, Split};
use bas::train::{train, TrainConfig, TrainLog, TrainOutputs};
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve, Config, Snapshot};
use crate::svg::{line_chart, Series};
use crate::{CliError, Command, Common, DataArg};

type Result<T> = std::result::Result<T, CliError>;

struct Run {
    command: &'static str,
    common: Common,
    config: Config,
}

impl Run {
    fn new(command: &'static str, common: Common, extra: Vec<String>) -> Result<Self> {
        let mut overrides = extra;
        overrides.extend(common.overrides.iter().cloned());
        let config = resolve(common.config.as_deref(), common.seed, &overrides)?;
        let common = Common { overrides, ..common };
        Ok(Self {
            command,
            common,
            config,
        })
    }

    fn out(&self) -> &Path {
        &self.common.out
    }

    /// Refuses output directories that hold an input.
    fn guard_inputs(&self, inputs: &[&Path]) -> Result<()> {
        let out = canonical(self.out());
        for i in inputs {
            if canonical(i) == out {
                return Err(CliError::usage(format!(
                    "--out {} would overwrite the input {}",
                    self.out().display(),
                    i.display()
                )));
            }
        }
        Ok(())
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(self.out()).map_err(|e| CliError::io(self.out(), e))
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.out().join(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
        s.push('\n');
        self.write(name, s)
    }

    fn write_snapshot(&self) -> Result<()> {
        self.write_json(
            "config.json",
            &Snapshot {
                command: self.command.into(),
                config_file: self.common.config.as_ref().map(|p| p.display().to_string()),
                seed: self.common.seed,
                overrides: self.common.overrides.clone(),
                config: self.config.clone(),
            },
        )
    }

    /// Loads `split` from `--data` (adopting its dataset spec) or renders it.
    fn samples(&mut self, data: &DataArg, split: Split) -> Result<Vec<Sample>> {
        match &data.data {
            Some(dir) => {
                self.config.data = read_dataset_spec(dir)?;
                Ok(load_split(&split_dir(dir, split), self.config.execution)?)
            }
            None => Ok(generate_split(&self.config.data, split, self.config.execution)?),
        }
    }

    /// Loads a checkpoint with the model configuration recorded by the
    /// training run that produced it, when available.
    fn network(&mut self, checkpoint: &Path) -> Result<BasNet<f32>> {
        let snap = checkpoint.parent().map(|d| d.join("config.json"));
        if let Some(s) = snap.filter(|p| p.exists()) {
            let text = fs::read_to_string(&s).map_err(|e| CliError::io(&s, e))?;
            let snap: Snapshot =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", s.display())))?;
            self.config.train.model = snap.config.train.model;
        }
        Ok(BasNet::load_checkpoint(self.config.train.model.clone(), checkpoint)?)
    }

    fn check_compatible(&self) -> Result<()> {
        let (m, d) = (&self.config.train.model, &self.config.data);
        if m.input_size != d.image_size {
            return Err(CliError::config(format!(
                "train.model.input_size ({}) must equal data.image_size ({})",
                m.input_size, d.image_size
            )));
        }
        if m.num_classes != d.num_classes {
            return Err(CliError::config(format!(
                "train.model.num_classes ({}) must equal data.num_classes ({})",
                m.num_classes, d.num_classes
            )));
        }
        Ok(())
    }

    fn status(&self, extra: serde_json::Value) -> String {
        let mut v = json!({ "command": self.command, "out": self.out().display().to_string() });
        if let (Some(o), Some(e)) = (v.as_object_mut(), extra.as_object()) {
            o.extend(e.clone());
        }
        v.to_string()
    }
}

/// The dataset directory and the directory holding the checkpoint.
fn model_inputs<'a>(data: &'a DataArg, checkpoint: &'a Path) -> Vec<&'a Path> {
    let dir = match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    data.data.as_deref().into_iter().chain([dir]).collect()
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn dispatch(command: Command) -> Result<String> {
    let name = command.name();
    match command {
        Command::GenData { common } => gen_data(Run::new(name, common, vec![])?),
        Command::Train { common, data } => train_cmd(Run::new(name, common, vec![])?, &data),
        Command::Eval {
            common,
            data,
            checkpoint,
            k,
            theta_box,
            deltas,
        } => {
            let mut extra = Vec::new();
            if let Some(k) = k {
                extra.push(format!("eval.k={k}"));
            }
            if let Some(t) = theta_box {
                extra.push(format!("eval.theta_box={t}"));
            }
            if let Some(d) = deltas {
                extra.push(format!("eval.deltas={}", json!(d)));
            }
            eval_cmd(Run::new(name, common, extra)?, &data, &checkpoint)
        }
        Command::Explore { common, data, checkpoint } => explore_cmd(Run::new(name, common, vec![])?, &data, &checkpoint),
        Command::ThresholdSearch { common, data, checkpoint } => {
            threshold_cmd(Run::new(name, common, vec![])?, &data, &checkpoint)
        }
        Command::Ablate { common, data } => ablate_cmd(Run::new(name, common, vec![])?, &data),
    }
}

fn gen_data(run: Run) -> Result<String> {
    run.config.data.validate()?;
    run.create_out()?;
    generate_dataset(&run.config.data, run.out(), run.config.execution)?;
    run.write_snapshot()?;
    Ok(run.status(json!({
        "train_samples": run.config.data.train_samples,
        "test_samples": run.config.data.test_samples,
    })))
}

fn loss_chart(log: &TrainLog) -> String {
    let pick = |f: fn(&LossBundle) -> f64| -> Vec<(f64, f64)> {
        log.rows.iter().map(|r| (r.step as f64, f(&r.losses))).collect()
    };
    line_chart(
        "training losses",
        "step",
        "loss",
        &[
            Series {
                name: "total",
                points: pick(|l| l.total),
            },
            Series {
                name: "l_cls",
                points: pick(|l| l.l_cls),
            },
            Series {
                name: "l_frg",
                points: pick(|l| l.l_frg),
            },
            Series {
                name: "l_ac",
                points: pick(|l| l.l_ac),
            },
            Series {
                name: "l_bas",
                points: pick(|l| l.l_bas),
            },
        ],
    )
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: Vec<LossBundle>,
    final_epoch: LossBundle,
}

fn summarize(log: &TrainLog, epochs: usize) -> TrainSummary {
    let per: Vec<LossBundle> = (0..epochs).filter_map(|e| log.epoch_mean(e)).collect();
    TrainSummary {
        final_epoch: per.last().copied().unwrap_or_default(),
        epochs: per,
    }
}

/// Trains `cfg` on `samples` with outputs in `dir`.
fn train_into(cfg: &TrainConfig, samples: &[Sample], run: &Run, dir: &Path) -> Result<(BasNet<f32>, TrainLog)> {
    let mut net = BasNet::new(cfg.model.clone(), cfg.seed)?;
    let outputs = TrainOutputs { dir: dir.to_path_buf() };
    let log = train(&mut net, samples, cfg, run.config.execution, Some(&outputs))?;
    let chart = loss_chart(&log);
    let p = dir.join("loss_curve.svg");
    fs::write(&p, chart).map_err(|e| CliError::io(&p, e))?;
    Ok((net, log))
}

fn train_cmd(mut run: Run, data: &DataArg) -> Result<String> {
    if let Some(d) = &data.data {
        run.guard_inputs(&[d])?;
    }
    let samples = run.samples(data, Split::Train)?;
    run.config.train.validate()?;
    run.check_compatible()?;
    run.create_out()?;
    run.write_snapshot()?;
    let (_, log) = train_into(&run.config.train, &samples, &run, run.out())?;
    let summary = summarize(&log, run.config.train.epochs);
    run.write_json("summary.json", &summary)?;
    Ok(run.status(json!({ "final_epoch": summary.final_epoch })))
}

fn write_eval_outputs(dir: &Path, report: &MetricReport) -> Result<()> {
    let write = |name: &str, s: String| {
        let p = dir.join(name);
        fs::write(&p, s).map_err(|e| CliError::io(&p, e))
    };
    let mut s = serde_json::to_string_pretty(report).map_err(|e| CliError::config(e.to_string()))?;
    s.push('\n');
    write("metrics.json", s)?;

    let grid = threshold_grid(report.iou_threshold_curve.len().saturating_sub(1));
    let mut iou = String::from("threshold,mean_iou\n");
    for (t, v) in grid.iter().zip(&report.iou_threshold_curve) {
        let _ = writeln!(iou, "{t},{v}");
    }
    write("iou_curve.csv", iou)?;
    let mut pr = String::from("threshold,precision,recall\n");
    for p in &report.pr_curve {
        let _ = writeln!(pr, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    write("pr_curve.csv", pr)?;

    write(
        "iou_curve.svg",
        line_chart(
            "mean mask IoU",
            "threshold",
            "IoU",
            &[Series {
                name: "mean IoU",
                points: grid.iter().zip(&report.iou_threshold_curve).map(|(&t, &v)| (t as f64, v)).collect(),
            }],
        ),
    )?;
    write(
        "pr_curve.svg",
        line_chart(
            "pixel precision-recall",
            "recall",
            "precision",
            &[Series {
                name: "PR",
                points: report.pr_curve.iter().map(|p| (p.recall, p.precision)).collect(),
            }],
        ),
    )
}

fn eval_cmd(mut run: Run, data: &DataArg, checkpoint: &Path) -> Result<String> {
    run.guard_inputs(&model_inputs(data, checkpoint))?;
    let net = run.network(checkpoint)?;
    let samples = run.samples(data, Split::Test)?;
    run.check_compatible()?;
    run.config.eval.validate(net.config.num_classes)?;
    let report = evaluate(&net, &samples, &run.config.eval, run.config.execution)?;
    run.create_out()?;
    run.write_snapshot()?;
    write_eval_outputs(run.out(), &report)?;
    Ok(run.status(json!({
        "gt_known": report.gt_known,
        "maxboxaccv2": report.maxboxaccv2,
        "piou": report.piou,
        "pxap": report.pxap,
        "miou": report.miou,
    })))
}

#[derive(Serialize)]
struct ExploreSummary {
    points: usize,
    weak_activation_skips: usize,
    empty_mask_skips: usize,
    crossovers: Crossovers,
}

fn quantity_chart(stats: &[BinStat], q: Quantity) -> String {
    let pts: Vec<(f64, f64)> = stats.iter().filter(|s| s.quantity == q).map(|s| (s.bin_center, s.mean)).collect();
    line_chart(
        q.name(),
        "area ratio",
        q.name(),
        &[Series {
            name: "bin mean",
            points: pts,
        }],
    )
}

fn explore_cmd(mut run: Run, data: &DataArg, checkpoint: &Path) -> Result<String> {
    run.guard_inputs(&model_inputs(data, checkpoint))?;
    let net = run.network(checkpoint)?;
    let samples = run.samples(data, Split::Test)?;
    run.check_compatible()?;
    let ns = run.config.explore.ns()?;
    run.config.explore.bins.validate()?;
    let result = explore_dataset(&net, &samples, &ns, run.config.execution)?;
    let stats = aggregate_curves(&result.points, &run.config.explore.bins)?;
    let summary = ExploreSummary {
        points: result.points.len(),
        weak_activation_skips: result.skips.iter().filter(|s| matches!(s, CurveSkip::WeakActivation { .. })).count(),
        empty_mask_skips: result.skips.iter().filter(|s| matches!(s, CurveSkip::EmptyMask { .. })).count(),
        crossovers: Crossovers::from_stats(&stats),
    };
    run.create_out()?;
    run.write_snapshot()?;
    run.write("points.csv", points_csv(&result.points))?;
    run.write("aggregate.csv", aggregate_csv(&stats))?;
    for q in Quantity::ALL {
        run.write(&format!("{}.svg", q.name()), quantity_chart(&stats, q))?;
    }
    run.write_json("summary.json", &summary)?;
    Ok(run.status(json!({ "crossovers": summary.crossovers })))
}

fn threshold_cmd(mut run: Run, data: &DataArg, checkpoint: &Path) -> Result<String> {
    run.guard_inputs(&model_inputs(data, checkpoint))?;
    let net = run.network(checkpoint)?;
    let samples = run.samples(data, Split::Test)?;
    run.check_compatible()?;
    let steps = run.config.threshold_search.grid_steps;
    if steps == 0 {
        return Err(CliError::config("threshold_search.grid_steps must be positive"));
    }
    let report = threshold_search(&net, &samples, &threshold_grid(steps), run.config.execution)?;
    run.create_out()?;
    run.write_snapshot()?;
    let mut csv = String::from("sample_id,class,theta,score\n");
    for r in &report.rows {
        let _ = writeln!(csv, "{},{},{},{}", r.sample, r.class, r.theta, r.score);
    }
    run.write("thresholds.csv", csv)?;
    let summary = json!({
        "num_samples": report.num_samples,
        "best_global_theta": report.best_global_theta,
        "miou_global": report.miou_global,
        "miou_image_specific": report.miou_image_specific,
    });
    run.write_json("summary.json", &summary)?;
    Ok(run.status(summary))
}

#[derive(Serialize)]
struct AblationRun {
    name: String,
    final_epoch: LossBundle,
    metrics: MetricReport,
}

#[derive(Serialize)]
struct Ablation {
    runs: Vec<AblationRun>,
    /// `bas` minus `baseline`.
    piou_gain: f64,
    gt_known_gain: Option<f64>,
    /// Final-epoch mean l_bas of the default and legacy-activation runs.
    l_bas_default: f64,
    l_bas_legacy: Option<f64>,
}

fn ablate_cmd(mut run: Run, data: &DataArg) -> Result<String> {
    if let Some(d) = &data.data {
        run.guard_inputs(&[d])?;
    }
    let train_set = run.samples(data, Split::Train)?;
    let test_set = run.samples(data, Split::Test)?;
    run.config.train.validate()?;
    run.check_compatible()?;
    run.config.eval.validate(run.config.train.model.num_classes)?;
    run.create_out()?;
    run.write_snapshot()?;

    let base = run.config.train.clone();
    let mut variants = vec![
        (
            "baseline",
            TrainConfig {
                weights: bas::losses::LossWeights {
                    lambda: 0.0,
                    ..base.weights
                },
                ..base.clone()
            },
        ),
        ("bas", base.clone()),
    ];
    if run.config.ablate.legacy {
        let mut legacy = base.clone();
        legacy.model.legacy_relu = true;
        variants.push(("legacy", legacy));
    }
    let mut runs = Vec::new();
    for (name, cfg) in variants {
        let dir = run.out().join(name);
        let (net, log) = train_into(&cfg, &train_set, &run, &dir)?;
        let metrics = evaluate(&net, &test_set, &run.config.eval, run.config.execution)?;
        write_eval_outputs(&dir, &metrics)?;
        runs.push(AblationRun {
            name: name.into(),
            final_epoch: summarize(&log, cfg.epochs).final_epoch,
            metrics,
        });
    }
    let get = |n: &str| runs.iter().find(|r| r.name == n);
    let (baseline, bas_run) = (get("baseline").expect("baseline run"), get("bas").expect("bas run"));
    let gt_known_gain = match (bas_run.metrics.gt_known, baseline.metrics.gt_known) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let summary = Ablation {
        piou_gain: bas_run.metrics.piou - baseline.metrics.piou,
        gt_known_gain,
        l_bas_default: bas_run.final_epoch.l_bas,
        l_bas_legacy: get("legacy").map(|r| r.final_epoch.l_bas),
        runs,
    };
    run.write_json("ablation.json", &summary)?;
    Ok(run.status(json!({
        "piou_gain": summary.piou_gain,
        "gt_known_gain": summary.gt_known_gain,
        "l_bas_default": summary.l_bas_default,
        "l_bas_legacy": summary.l_bas_legacy,
    })))
}
