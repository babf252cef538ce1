//! Batch commands behind the `supmix` binary.
//!
//! Run directory layout written by `train` (and by each ablation cell):
//!
//! ```text
//! <out>/experiment.toml     experiment config with every toggle resolved
//! <out>/split.json          labeled-train images used by every seed
//! <out>/seed_<s>/config.toml     TrainConfig of that run, resolved
//! <out>/seed_<s>/checkpoint.bin  model tensors, then `disc.*`
//! <out>/seed_<s>/losses.csv      one row per optimizer step
//! <out>/seed_<s>/eval_trace.csv  only when eval_every > 0
//! <out>/metrics.csv         written by `eval`
//! ```

pub mod svg;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, split_dataset, DatasetManifest, SplitTag, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_seeds, class_ratios, evaluate_model, format_mean_std, write_report_csv, MetricsReport, ReportRow,
    UndefinedIou,
};
use crate::segnet::{read_checkpoint, SegModel};
use crate::trainer::{ablation_preset, run_training, TrainConfig, TrainData, TrainOutcome, Variant, ABLATION_PRESETS};
use crate::util::write_atomic;
use svg::{line_chart, Series};

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const SEED_CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation_table.csv";
pub const DEFAULT_ABLATION_RATIOS: [f64; 2] = [0.125, 0.25];

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_ablation_ratios() -> Vec<f64> {
    DEFAULT_ABLATION_RATIOS.to_vec()
}

/// Experiment document: dataset, output, seeds, and a `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory or its `manifest.json`.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Re-split the train samples at this ratio; `None` keeps the manifest's tags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_ratio: Option<f64>,
    #[serde(default)]
    pub split_seed: u64,
    /// Ratios swept by `ablate`.
    #[serde(default = "default_ablation_ratios")]
    pub ablation_ratios: Vec<f64>,
    /// Row label in reports; defaults to the variant name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("experiment").to_string();
            Error::config(key, e.to_string())
        })
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.train.variant.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "seed list is empty"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config("seeds", "duplicate seeds"));
        }
        for r in self.labeled_ratio.iter().chain(&self.ablation_ratios) {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::config("labeled_ratio", format!("{r} outside (0, 1]")));
            }
        }
        for &seed in &self.seeds {
            TrainConfig { seed, ..self.train.clone() }.resolve()?;
        }
        Ok(())
    }
}

/// Command-line values that replace fields of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub labeled_ratio: Option<f64>,
    pub variant: Option<Variant>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(r) = self.labeled_ratio {
            cfg.labeled_ratio = Some(r);
            cfg.ablation_ratios = vec![r];
        }
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
    }
}

/// Comma-separated seed list, e.g. `0,1,2`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::config("seeds", format!("`{t}` is not a seed"))))
        .collect()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

// ---- gen-data --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub manifest: DatasetManifest,
    pub hash: String,
    pub class_names: Vec<String>,
    pub targets: Vec<f64>,
    /// Ratios recounted from the label files written to disk.
    pub recount: Vec<f64>,
    pub tolerances: Vec<f64>,
}

impl GenSummary {
    pub fn within_tolerance(&self) -> bool {
        self.recount
            .iter()
            .zip(&self.targets)
            .zip(&self.tolerances)
            .all(|((a, t), tol)| (a - t).abs() <= *tol)
    }
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset `{}`: {} samples, manifest {}", self.manifest.name, self.manifest.samples.len(), self.hash)?;
        for i in 0..self.targets.len() {
            let ok = (self.recount[i] - self.targets[i]).abs() <= self.tolerances[i];
            writeln!(
                f,
                "  {:<18} achieved {:>8.4}%  target {:>8.4}%  ±{:.4}%  {}",
                self.class_names[i],
                100.0 * self.recount[i],
                100.0 * self.targets[i],
                100.0 * self.tolerances[i],
                if ok { "ok" } else { "OUT OF TOLERANCE" }
            )?;
        }
        Ok(())
    }
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| {
        let key = e.message().split('`').nth(1).unwrap_or("spec").to_string();
        Error::config(key, e.to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Generates a dataset from a spec file and recounts its class ratios.
pub fn cmd_gen_data(spec_path: &Path, out_dir: &Path) -> Result<GenSummary> {
    let spec = load_spec(spec_path)?;
    gen_data(&spec, out_dir)
}

pub fn gen_data(spec: &SyntheticSpec, out_dir: &Path) -> Result<GenSummary> {
    spec.validate()?;
    create_dir(out_dir)?;
    let manifest = generate_dataset(spec, out_dir)?;
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for i in 0..manifest.samples.len() {
        labels.push(manifest.read(i)?.1);
    }
    Ok(GenSummary {
        hash: manifest.hash(),
        class_names: manifest.class_names.clone(),
        targets: spec.ratios.clone(),
        recount: class_ratios(&labels, manifest.classes)?,
        tolerances: spec.ratio_tolerances(),
        manifest,
    })
}

// ---- train -----------------------------------------------------------------

/// A validated experiment with its data loaded and run directory prepared.
pub struct PreparedRun {
    pub config: ExperimentConfig,
    pub data: TrainData,
    pub manifest: DatasetManifest,
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    labeled_ratio: Option<f64>,
    split_seed: Option<u64>,
    labeled: Vec<&'a str>,
}

/// Loads and (optionally) re-splits the dataset, then records the resolved
/// experiment under `out_dir`. The dataset directory is only read.
pub fn prepare_run(cfg: &ExperimentConfig) -> Result<PreparedRun> {
    cfg.validate()?;
    let mut manifest = DatasetManifest::load(&cfg.dataset)?;
    if let Some(r) = cfg.labeled_ratio {
        manifest = split_dataset(&manifest, r, cfg.split_seed)?;
    }
    let data = TrainData::from_manifest(&manifest)?;
    let mut recorded = cfg.clone();
    recorded.dataset = absolute(&cfg.dataset)?;
    recorded.out_dir = absolute(&cfg.out_dir)?;
    recorded.train = cfg.train.resolved()?;
    create_dir(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(EXPERIMENT_FILE), recorded.to_toml()?.as_bytes())?;
    let split = SplitRecord {
        labeled_ratio: manifest.labeled_ratio,
        split_seed: manifest.split_seed,
        labeled: manifest
            .indices(SplitTag::LabeledTrain)
            .into_iter()
            .map(|i| manifest.samples[i].image.as_str())
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&split).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(&cfg.out_dir.join(SPLIT_FILE), &json)?;
    Ok(PreparedRun { config: recorded, data, manifest })
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// One training run into `<out>/seed_<seed>/`.
pub fn train_seed(run: &PreparedRun, seed: u64) -> Result<TrainOutcome> {
    let cfg = TrainConfig { seed, ..run.config.train.clone() };
    let dir = seed_dir(&run.config.out_dir, seed);
    create_dir(&dir)?;
    write_atomic(&dir.join(SEED_CONFIG_FILE), cfg.resolved_toml()?.as_bytes())?;
    let out = run_training(&cfg, &run.data, Some(&dir))?;
    if out.state.trace.iter().any(|l| !l.total.is_finite()) {
        return Err(Error::NonFinite("training loss"));
    }
    Ok(out)
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub seed_dirs: Vec<PathBuf>,
    pub final_losses: Vec<f64>,
}

/// Trains every seed of the experiment, in parallel.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let run = prepare_run(cfg)?;
    let outcomes: Vec<TrainOutcome> = run.config.seeds.par_iter().map(|&s| train_seed(&run, s)).collect::<Result<_>>()?;
    Ok(TrainSummary {
        out_dir: run.config.out_dir.clone(),
        seed_dirs: run.config.seeds.iter().map(|&s| seed_dir(&run.config.out_dir, s)).collect(),
        final_losses: outcomes.iter().map(|o| o.state.trace.last().map_or(0.0, |l| l.total)).collect(),
    })
}

// ---- eval ------------------------------------------------------------------

/// Loads the segmentation model of a checkpoint, checking its class count.
pub fn load_model(path: &Path, classes: usize) -> Result<SegModel> {
    let model = SegModel::from_named_tensors(&read_checkpoint(path)?)?;
    if model.config().classes != classes {
        return Err(Error::config(
            "classes",
            format!("checkpoint {} predicts {} classes, dataset has {classes}", path.display(), model.config().classes),
        ));
    }
    Ok(model)
}

fn labeled_fraction(cfg: &ExperimentConfig, m: &DatasetManifest) -> f64 {
    cfg.labeled_ratio.or(m.labeled_ratio).unwrap_or_else(|| {
        let train = m.train_indices().len().max(1);
        m.indices(SplitTag::LabeledTrain).len() as f64 / train as f64
    })
}

/// Per-seed rows followed by the aggregate row.
pub fn eval_run(run_dir: &Path, manifest: Option<&Path>) -> Result<Vec<ReportRow>> {
    let cfg = ExperimentConfig::load(&run_dir.join(EXPERIMENT_FILE))?;
    let m = DatasetManifest::load(manifest.unwrap_or(&cfg.dataset))?;
    let test = m.read_split(SplitTag::Test)?;
    if test.is_empty() {
        return Err(Error::config("dataset", "manifest has no test samples"));
    }
    let ratio = labeled_fraction(&cfg, &m);
    let label = cfg.label();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &s in &cfg.seeds {
        let model = load_model(&seed_dir(run_dir, s).join(crate::trainer::CHECKPOINT_FILE), m.classes)?;
        let cm = evaluate_model(&model, &test)?;
        let r = MetricsReport::from_confusion(&cm, &m.class_names, s, UndefinedIou::Exclude)?;
        rows.push(ReportRow { variant: label.clone(), labeled_ratio: ratio, seed: Some(s), report: r.clone() });
        reports.push(r);
    }
    rows.push(ReportRow { variant: label, labeled_ratio: ratio, seed: None, report: aggregate_seeds(&reports)? });
    Ok(rows)
}

/// Evaluates every seed of a run and writes the report CSV
/// (default `<run>/metrics.csv`).
pub fn cmd_eval(run_dir: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<(PathBuf, Vec<ReportRow>)> {
    let rows = eval_run(run_dir, manifest)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(METRICS_FILE));
    write_report_csv(&path, &rows)?;
    Ok((path, rows))
}

// ---- ablate ----------------------------------------------------------------

/// Least frequent non-background class of a dataset.
pub fn rare_class(m: &DatasetManifest) -> usize {
    (1..m.classes)
        .min_by(|&a, &b| m.achieved_ratios[a].total_cmp(&m.achieved_ratios[b]))
        .unwrap_or(0)
}

pub fn ratio_dir(out_dir: &Path, ratio: f64) -> PathBuf {
    out_dir.join(format!("ratio_{ratio}"))
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub ratio: f64,
    pub preset: &'static str,
    pub dir: PathBuf,
    pub aggregate: MetricsReport,
}

pub struct AblationSummary {
    pub rare_class: usize,
    pub cells: Vec<AblationCell>,
    pub files: Vec<PathBuf>,
}

impl AblationSummary {
    pub fn cell(&self, ratio: f64, preset: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.ratio == ratio && c.preset == preset)
    }
}

impl fmt::Display for AblationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.cells.first().map(|c| c.aggregate.class_names[self.rare_class].clone()).unwrap_or_default();
        writeln!(f, "{name} IoU (%), mean±std over seeds")?;
        write!(f, "{:<8}", "ratio")?;
        for p in ABLATION_PRESETS {
            write!(f, " {p:>14}")?;
        }
        writeln!(f)?;
        let mut ratios: Vec<f64> = self.cells.iter().map(|c| c.ratio).collect();
        ratios.dedup();
        for r in ratios {
            write!(f, "{r:<8}")?;
            for p in ABLATION_PRESETS {
                write!(f, " {:>14}", self.cell(r, p).map(|c| rare_cell(&c.aggregate, self.rare_class)).unwrap_or_default())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn rare_cell(r: &MetricsReport, c: usize) -> String {
    match (r.iou[c], r.iou_std[c]) {
        (Some(m), Some(s)) => format_mean_std(m, s),
        _ => "n/a".into(),
    }
}

/// Mean over seeds of the per-epoch mean total loss.
fn loss_curve(outcomes: &[&TrainOutcome]) -> Vec<(f64, f64)> {
    let Some(first) = outcomes.first() else { return Vec::new() };
    let spe = first.steps_per_epoch.max(1) as usize;
    let epochs = first.epochs.len();
    (0..epochs)
        .map(|e| {
            let m: f64 = outcomes
                .iter()
                .map(|o| o.state.trace[e * spe..(e + 1) * spe].iter().map(|l| l.total).sum::<f64>() / spe as f64)
                .sum::<f64>()
                / outcomes.len() as f64;
            ((e + 1) as f64, m)
        })
        .collect()
}

fn iou_curve(outcomes: &[&TrainOutcome], class: usize) -> Vec<(f64, f64)> {
    let Some(first) = outcomes.first() else { return Vec::new() };
    (0..first.evals.len())
        .filter_map(|k| {
            let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.evals[k].iou[class]).collect();
            (!vals.is_empty()).then(|| (first.evals[k].epoch as f64, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// All five presets × seeds × ratios, then the comparison table and curves.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationSummary> {
    cfg.validate()?;
    let mut base = cfg.train.clone();
    if base.eval_every == 0 {
        base.eval_every = (base.epochs / 20).max(1);
    }
    let mut runs = Vec::new();
    for &ratio in &cfg.ablation_ratios {
        for preset in ABLATION_PRESETS {
            let sub = ExperimentConfig {
                out_dir: ratio_dir(&cfg.out_dir, ratio).join(preset),
                labeled_ratio: Some(ratio),
                ablation_ratios: vec![ratio],
                label: Some(preset.to_string()),
                train: ablation_preset(&base, preset)?,
                ..cfg.clone()
            };
            runs.push((ratio, preset, prepare_run(&sub)?));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..runs.len()).flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let outcomes: Vec<TrainOutcome> = jobs.par_iter().map(|&(r, s)| train_seed(&runs[r].2, s)).collect::<Result<_>>()?;

    let rare = rare_class(&runs[0].2.manifest);
    let mut cells = Vec::new();
    let mut all_rows = Vec::new();
    for (ratio, preset, run) in &runs {
        let (_, rows) = cmd_eval(&run.config.out_dir, None, None)?;
        let agg = rows.last().expect("aggregate row").clone();
        cells.push(AblationCell { ratio: *ratio, preset, dir: run.config.out_dir.clone(), aggregate: agg.report.clone() });
        all_rows.push(agg);
    }
    let mut files = Vec::new();
    let p = cfg.out_dir.join(ABLATION_FILE);
    write_report_csv(&p, &all_rows)?;
    files.push(p);

    let mut table = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["labeled_ratio".to_string()];
    header.extend(ABLATION_PRESETS.iter().map(|p| p.to_string()));
    let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
    table.write_record(&header).map_err(csv_err)?;
    for &ratio in &cfg.ablation_ratios {
        let mut rec = vec![format!("{ratio}")];
        for c in cells.iter().filter(|c| c.ratio == ratio) {
            rec.push(rare_cell(&c.aggregate, rare));
        }
        table.write_record(&rec).map_err(csv_err)?;
    }
    let p = cfg.out_dir.join(ABLATION_TABLE_FILE);
    write_atomic(&p, &table.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    files.push(p);

    let class_name = &cells[0].aggregate.class_names[rare];
    for &ratio in &cfg.ablation_ratios {
        let mut loss = Vec::new();
        let mut iou = Vec::new();
        for (k, (r, preset, _)) in runs.iter().enumerate() {
            if *r != ratio {
                continue;
            }
            let outs: Vec<&TrainOutcome> = jobs
                .iter()
                .zip(&outcomes)
                .filter(|((ri, _), _)| *ri == k)
                .map(|(_, o)| o)
                .collect();
            loss.push(Series { name: preset.to_string(), points: loss_curve(&outs) });
            iou.push(Series { name: preset.to_string(), points: iou_curve(&outs, rare) });
        }
        let p = cfg.out_dir.join(format!("loss_ratio_{ratio}.svg"));
        write_atomic(&p, line_chart(&format!("total loss, labeled ratio {ratio}"), "epoch", "loss", &loss).as_bytes())?;
        files.push(p);
        let p = cfg.out_dir.join(format!("iou_ratio_{ratio}.svg"));
        let title = format!("{class_name} IoU on test, labeled ratio {ratio}");
        write_atomic(&p, line_chart(&title, "epoch", "IoU", &iou).as_bytes())?;
        files.push(p);
    }
    Ok(AblationSummary { rare_class: rare, cells, files })
}
