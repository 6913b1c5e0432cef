use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use nowcast_core::data::bundle::{BUNDLE_BLOB_FILE, BUNDLE_INDEX_FILE, BUNDLE_MANIFEST_FILE};
use nowcast_core::data::ingest::ingest_csv;
use nowcast_core::data::{generate_synthetic, load_bundle, prepare, save_bundle, Dataset, DatasetManifest, PipelineConfig, SequenceSample, SyntheticSpec};
use nowcast_core::hyperopt::{modal_config, tune, Trial, TrialConfig, TuneConfig};
use nowcast_core::nn::checkpoint;
use nowcast_core::rng::{derive_seed, Stream};
use nowcast_core::train::cv::fold_partitions;
use nowcast_core::train::{evaluate, expanding_folds, fit, mean_predictor_metrics, ts_cross_validate, LossConfig, Metrics, TrainConfig};
use nowcast_core::xai::{
    counterfactual_perturb, grad_cam, mean_slice, permutation_importance, temporal_occlusion, CounterfactualReport,
    FeatureImportanceReport, GradCamMap, OcclusionReport,
};
use nowcast_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::{Method, Partition, Resolved, RunConfig, CONFIG_FILE};

pub const BUNDLE_DIR: &str = "bundle";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TRAINING_FILE: &str = "training.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const CV_FILE: &str = "cv.json";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const TRIAL_TIMES_FILE: &str = "trial_times.csv";
pub const BEST_FILE: &str = "best.json";
pub const XAI_DIR: &str = "xai";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_DIR: &str = "report";
pub const SPEC_FILE: &str = "synthetic.txt";

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

impl Globals {
    /// Defaults, then `base` (a run's saved configuration), then
    /// `--config`, `--seed` and `--set` in that order.
    pub fn run_config(&self, base: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(b) = base {
            cfg.apply_file(b)?;
        }
        if let Some(c) = &self.config {
            cfg.apply_file(c)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }

    fn out_dir(&self, command: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("`{command}` needs --out <DIR>"))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_dataset(ds: &Dataset) {
    println!(
        "days={} samples={} features={} train={} val={} test={}",
        ds.base.num_days(),
        ds.samples.len(),
        ds.num_features(),
        ds.split.train().len(),
        ds.split.val().len(),
        ds.split.test().len()
    );
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn ingest(g: &Globals, manifest: &Path, csv: &Path) -> Result<()> {
    let r = g.run_config(None)?.resolve()?;
    let out = g.out_dir("ingest")?;
    let m = DatasetManifest::read(manifest)?;
    let cube = ingest_csv(&m, csv)?;
    let ds = prepare(m, cube, r.pipeline, None)?;
    save_bundle(&ds, out)?;
    print_dataset(&ds);
    Ok(())
}

pub fn synth(g: &Globals, spec_path: &Path) -> Result<()> {
    let r = g.run_config(None)?.resolve()?;
    let out = g.out_dir("synth")?;
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = SyntheticSpec::parse(&text, spec_path)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let syn = generate_synthetic(&spec)?;
    let ds = prepare(syn.manifest, syn.cube, r.pipeline, Some(spec.clone()))?;
    save_bundle(&ds, out)?;
    write(&out.join(SPEC_FILE), spec.to_string())?;
    print_dataset(&ds);
    Ok(())
}

/// Bundle at `dir`, re-prepared when its pipeline differs from `pipeline`.
pub fn dataset_for(dir: &Path, pipeline: &PipelineConfig) -> Result<Dataset> {
    let ds = load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))?;
    if ds.config == *pipeline {
        return Ok(ds);
    }
    Ok(prepare(ds.manifest, ds.base, pipeline.clone(), ds.synthetic)?)
}

fn copy_bundle(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for name in [BUNDLE_MANIFEST_FILE, BUNDLE_INDEX_FILE, BUNDLE_BLOB_FILE] {
        fs::copy(from.join(name), to.join(name)).with_context(|| format!("copying {name}"))?;
    }
    Ok(())
}

/// Writes the run's dataset, either as a copy of an unchanged bundle or
/// re-saved after re-preparation.
fn store_dataset(bundle: &Path, ds: &Dataset, run: &Path) -> Result<()> {
    let target = run.join(BUNDLE_DIR);
    if load_bundle(bundle).map(|b| b.config == ds.config).unwrap_or(false) {
        copy_bundle(bundle, &target)
    } else {
        Ok(save_bundle(ds, &target)?)
    }
}

/// Evaluation-derived numbers of a run; `evaluate` must reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Extreme threshold in log1p space.
    pub tau: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub val: Metrics,
    pub test: Metrics,
    pub baseline_test: Metrics,
    /// Test RMSE over the training-mean predictor's test RMSE.
    pub rmse_ratio: f64,
}

pub fn run_metrics(ds: &Dataset, model: &Model, loss: &LossConfig) -> Result<RunMetrics> {
    let tau = loss
        .clone()
        .resolve(&ds.train().iter().map(|s| s.y).collect::<Vec<_>>())?;
    let test = evaluate(model, ds.test(), tau)?;
    let baseline_test = mean_predictor_metrics(ds.train(), ds.test(), tau)?;
    Ok(RunMetrics {
        tau,
        n_train: ds.train().len(),
        n_val: ds.val().len(),
        n_test: ds.test().len(),
        val: evaluate(model, ds.val(), tau)?,
        rmse_ratio: test.rmse / baseline_test.rmse,
        test,
        baseline_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub parameters: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn model_config(r: &Resolved, ds: &Dataset) -> Result<ModelConfig> {
    let (h, w) = ds.grid();
    r.model.model_config(ds.seq_len(), h, w, ds.num_features())
}

pub fn train(g: &Globals, bundle: &Path) -> Result<()> {
    let cfg = g.run_config(None)?;
    let r = cfg.resolve()?;
    let out = g.out_dir("train")?;
    let ds = dataset_for(bundle, &r.pipeline)?;
    let model_cfg = model_config(&r, &ds)?;
    fs::create_dir_all(out)?;
    write(&out.join(CONFIG_FILE), cfg.to_string())?;
    store_dataset(bundle, &ds, out)?;

    let model = Model::init(model_cfg.clone(), derive_seed(r.seed, Stream::Init, 0))?;
    let fitted = fit(model, ds.train(), ds.val(), &r.train, &r.loss)?;
    checkpoint::save(&fitted.model, &out.join(CHECKPOINT_DIR))?;
    write(&out.join(HISTORY_FILE), fitted.history.to_jsonl()?)?;
    let h = &fitted.history;
    write_json(
        &out.join(TRAINING_FILE),
        &TrainingSummary {
            best_epoch: h.best_epoch,
            best_val_loss: h.best_val_loss,
            epochs_run: h.epochs.len(),
            stopped_early: h.stopped_early,
            parameters: fitted.model.num_parameters(),
            model: model_cfg.clone(),
            train: r.train.clone(),
        },
    )?;
    let m = run_metrics(&ds, &fitted.model, &r.loss)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    println!(
        "epochs={} best_epoch={} test_rmse={:.4} baseline_rmse={:.4} ratio={:.3}",
        h.epochs.len(),
        h.best_epoch,
        m.test.rmse,
        m.baseline_test.rmse,
        m.rmse_ratio
    );

    if r.cv_enabled {
        let raw = ds.unscaled_samples()?;
        let report = ts_cross_validate(&raw, r.cv_folds, &model_cfg, &r.train, &r.loss, |fold, model| {
            let rel = format!("cv/fold_{fold}");
            checkpoint::save(model, &out.join(&rel))?;
            Ok(Some(rel))
        })?;
        write_json(&out.join(CV_FILE), &report)?;
        println!("cv_folds={} cv_mean_rmse={:.4}", report.folds.len(), report.mean_rmse);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub best_trial: Option<usize>,
    pub objective: Option<f64>,
    pub config: TrialConfig,
    /// Per-fold winners when tuning ran on every fold.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_bests: Vec<TrialConfig>,
}

fn apply_trial(cfg: &mut RunConfig, t: &TrialConfig) -> Result<()> {
    cfg.set("model.conv_filters", &t.conv_filters.to_string())?;
    cfg.set("model.convlstm_filters", &t.convlstm_filters.to_string())?;
    cfg.set("model.kernel_size", &t.kernel_size.to_string())?;
    cfg.set("model.dropout", &t.dropout_rate.to_string())?;
    cfg.set("train.learning_rate", &t.learning_rate.to_string())?;
    Ok(())
}

fn trial_logger<'a>(log: &'a mut String, times: &'a mut String, path: &'a Path) -> impl FnMut(&Trial) -> nowcast_core::Result<()> + 'a {
    move |t: &Trial| {
        log.push_str(&t.to_json_line()?);
        times.push_str(&format!("{},{:.3}\n", t.index, t.wall_time));
        fs::write(path, log.as_bytes())?;
        eprintln!(
            "trial {} {:?} objective={}",
            t.index,
            t.status,
            t.objective.map_or("-".into(), |o| format!("{o:.5}"))
        );
        Ok(())
    }
}

pub fn tune_cmd(g: &Globals, bundle: &Path) -> Result<()> {
    let mut cfg = g.run_config(None)?;
    let r = cfg.resolve()?;
    let out = g.out_dir("tune")?;
    let ds = dataset_for(bundle, &r.pipeline)?;
    let base = model_config(&r, &ds)?;
    fs::create_dir_all(out)?;
    store_dataset(bundle, &ds, out)?;

    let mut times = String::from("trial,wall_time_s\n");
    let summary = if r.tune_per_fold {
        let raw = ds.unscaled_samples()?;
        let mut bests = Vec::new();
        for fold in expanding_folds(raw.len(), r.cv_folds)? {
            let (train, val, _) = fold_partitions(&raw, &fold)?;
            let tc = TuneConfig {
                seed: derive_seed(r.seed, Stream::Tuner, fold.index as u64 + 1),
                ..r.tune.clone()
            };
            let mut log = String::new();
            let path = out.join(format!("trials_fold{}.jsonl", fold.index));
            let res = tune(&train, &val, None, &base, &r.train, &r.loss, &tc, trial_logger(&mut log, &mut times, &path))?;
            bests.push(res.best_trial().config.clone());
        }
        let modal = modal_config(&bests).ok_or_else(|| anyhow!("no folds to tune on"))?;
        TuneSummary {
            best_trial: None,
            objective: None,
            config: modal,
            fold_bests: bests,
        }
    } else {
        let mut log = String::new();
        let path = out.join(TRIALS_FILE);
        let res = tune(
            ds.train(),
            ds.val(),
            Some(ds.test()),
            &base,
            &r.train,
            &r.loss,
            &r.tune,
            trial_logger(&mut log, &mut times, &path),
        )?;
        let best = res.best_trial();
        TuneSummary {
            best_trial: Some(best.index),
            objective: best.objective,
            config: best.config.clone(),
            fold_bests: Vec::new(),
        }
    };
    write(&out.join(TRIAL_TIMES_FILE), times)?;
    write_json(&out.join(BEST_FILE), &summary)?;

    // The winning configuration is refitted on the main split so the tune
    // directory is a complete run.
    apply_trial(&mut cfg, &summary.config)?;
    let r = cfg.resolve()?;
    write(&out.join(CONFIG_FILE), cfg.to_string())?;
    let model_cfg = model_config(&r, &ds)?;
    let model = Model::init(model_cfg, derive_seed(r.seed, Stream::Init, 0))?;
    let fitted = fit(model, ds.train(), ds.val(), &r.train, &r.loss)?;
    checkpoint::save(&fitted.model, &out.join(CHECKPOINT_DIR))?;
    write(&out.join(HISTORY_FILE), fitted.history.to_jsonl()?)?;
    let m = run_metrics(&ds, &fitted.model, &r.loss)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    let c = &summary.config;
    println!(
        "best conv_filters={} convlstm_filters={} kernel_size={} dropout={:.3} learning_rate={} test_rmse={:.4}",
        c.conv_filters, c.convlstm_filters, c.kernel_size, c.dropout_rate, c.learning_rate, m.test.rmse
    );
    Ok(())
}

/// A trained run directory loaded back into memory.
pub struct Run {
    pub config: RunConfig,
    pub resolved: Resolved,
    pub dataset: Dataset,
    pub model: Model,
}

pub fn load_run(g: &Globals, run: &Path) -> Result<Run> {
    let config = g.run_config(Some(&run.join(CONFIG_FILE)))?;
    let resolved = config.resolve()?;
    let dataset = dataset_for(&run.join(BUNDLE_DIR), &resolved.pipeline)?;
    let model = checkpoint::load(&run.join(CHECKPOINT_DIR))
        .with_context(|| format!("loading checkpoint from {}", run.display()))?;
    let expected = [dataset.seq_len(), dataset.grid().0, dataset.grid().1, dataset.num_features()];
    if model.config.input_shape() != expected {
        bail!(
            "checkpoint expects inputs {:?} but the dataset provides {:?}",
            model.config.input_shape(),
            expected
        );
    }
    Ok(Run {
        config,
        resolved,
        dataset,
        model,
    })
}

pub fn evaluate_cmd(g: &Globals, run: &Path) -> Result<()> {
    let loaded = load_run(g, run)?;
    let m = run_metrics(&loaded.dataset, &loaded.model, &loaded.resolved.loss)?;
    let out = g.out.as_deref().unwrap_or(run);
    let text = serde_json::to_string_pretty(&m)? + "\n";
    write(&out.join(EVALUATION_FILE), &text)?;
    println!(
        "test_rmse={:.4} extreme_rmse={} baseline_rmse={:.4} ratio={:.3}",
        m.test.rmse,
        m.test.extreme_rmse.map_or("-".into(), |e| format!("{e:.4}")),
        m.baseline_test.rmse,
        m.rmse_ratio
    );
    let stored = run.join(METRICS_FILE);
    if stored.exists() && fs::read_to_string(&stored)? != text {
        bail!("evaluation differs from the metrics recorded at training time");
    }
    Ok(())
}

/// Where the planted signal sits, for synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub driver: String,
    pub lag: usize,
    pub step: Option<usize>,
    pub mask_rows: (usize, usize),
    pub mask_cols: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub partition: String,
    pub n_samples: usize,
    pub seed: u64,
    pub planted: Option<Planted>,
    pub permutation: Option<FeatureImportanceReport>,
    pub occlusion: Option<OcclusionReport>,
    pub gradcam: Option<GradCamMap>,
    pub counterfactual: Option<CounterfactualReport>,
}

fn partition_samples(ds: &Dataset, p: Partition) -> &[SequenceSample] {
    match p {
        Partition::Train => ds.train(),
        Partition::Val => ds.val(),
        Partition::Test => ds.test(),
    }
}

pub fn explain(g: &Globals, run: &Path) -> Result<()> {
    let loaded = load_run(g, run)?;
    let (ds, model, x) = (&loaded.dataset, &loaded.model, &loaded.resolved.xai);
    let seed = loaded.resolved.seed;
    let samples = partition_samples(ds, x.partition);
    let out = g.out.as_deref().unwrap_or(run).join(XAI_DIR);
    fs::create_dir_all(&out)?;
    write(&out.join(CONFIG_FILE), loaded.config.to_string())?;
    let names = &ds.feature_names;

    let mut summary = ExplainSummary {
        partition: format!("{:?}", x.partition).to_lowercase(),
        n_samples: samples.len(),
        seed,
        planted: ds.synthetic.as_ref().map(|s| Planted {
            driver: format!("x{}", s.driver),
            lag: s.lag,
            step: ds.seq_len().checked_sub(1 + s.lag),
            mask_rows: s.mask.rows,
            mask_cols: s.mask.cols,
        }),
        permutation: None,
        occlusion: None,
        gradcam: None,
        counterfactual: None,
    };
    for method in &x.methods {
        let t0 = Instant::now();
        match method {
            Method::Permutation => {
                let rep = permutation_importance(model, samples, names, x.repeats, seed)?;
                write(&out.join("permutation.csv"), rep.to_csv(false))?;
                println!("permutation top={}", names[rep.ranking()[0]]);
                summary.permutation = Some(rep);
            }
            Method::Occlusion => {
                let rep = temporal_occlusion(model, samples, &mean_slice(ds.train())?)?;
                write(&out.join("occlusion.csv"), rep.to_csv())?;
                println!("occlusion argmax=time_{}", rep.argmax());
                summary.occlusion = Some(rep);
            }
            Method::GradCam => {
                let map = grad_cam(model, samples, x.decile)?;
                write(&out.join("gradcam.csv"), map.to_csv())?;
                write(&out.join("gradcam.txt"), map.to_matrix())?;
                write(&out.join("gradcam.pgm"), map.to_pgm())?;
                if map.all_zero {
                    eprintln!("warning: Grad-CAM map is identically zero");
                }
                println!("gradcam selected={}", map.selected.len());
                summary.gradcam = Some(map);
            }
            Method::Counterfactual => {
                let scaler = x.native_counterfactual.then_some(&ds.scaler);
                let rep = counterfactual_perturb(model, samples, names, x.delta, scaler)?;
                write(&out.join("counterfactual.csv"), rep.to_csv(false))?;
                println!("counterfactual top={}", names[rep.ranking()[0]]);
                summary.counterfactual = Some(rep);
            }
        }
        eprintln!("{method:?} took {:.1}s", t0.elapsed().as_secs_f64());
    }
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(())
}

pub fn report(g: &Globals, run: &Path) -> Result<()> {
    let summary: ExplainSummary = read_json(&run.join(XAI_DIR).join(SUMMARY_FILE))?;
    let out = g.out.as_deref().unwrap_or(run).join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    if let Some(p) = &summary.permutation {
        write(&out.join("feature_importance.csv"), p.to_csv(true))?;
        println!("feature importance (mean delta RMSE, mm):");
        for i in p.ranking() {
            println!("  {:<16} {:.4}", p.features[i].feature, p.features[i].mean_delta_rmse);
        }
    }
    if let Some(o) = &summary.occlusion {
        write(&out.join("occlusion.csv"), o.to_csv())?;
        println!("temporal occlusion (delta RMSE, mm):");
        for s in &o.steps {
            println!("  {:<8} {:.4}", s.label, s.delta_rmse);
        }
    }
    if let Some(m) = &summary.gradcam {
        write(&out.join("gradcam_matrix.txt"), m.to_matrix())?;
        println!("grad-cam ({}x{}):", m.height, m.width);
        for line in m.to_matrix().lines() {
            let cells: Vec<String> = line
                .split(' ')
                .map(|v| format!("{:.2}", v.parse::<f64>().unwrap_or(f64::NAN)))
                .collect();
            println!("  {}", cells.join(" "));
        }
    }
    if let Some(c) = &summary.counterfactual {
        write(&out.join("counterfactual.csv"), c.to_csv(true))?;
        println!("counterfactual sensitivity (RMS change, mm, delta={}):", c.delta);
        for i in c.ranking() {
            println!("  {:<16} {:.4}", c.features[i].feature, c.features[i].norm);
        }
    }
    Ok(())
}
