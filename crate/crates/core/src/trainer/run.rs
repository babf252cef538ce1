use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::step::{labeled_batch_indices, steps_per_epoch, train_step, unlabeled_batch_indices, Batch, TrainState};
use crate::data::{DatasetManifest, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, miou, per_class_iou, UndefinedIou};
use crate::numerics::Tensor;
use crate::segnet::{write_checkpoint, NamedTensors};
use crate::util::write_atomic;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.csv";
pub const EVAL_TRACE_FILE: &str = "eval_trace.csv";
pub const DISC_PREFIX: &str = "disc.";

/// In-memory training and test data.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Tensor>,
    pub test: Vec<Sample>,
}

impl TrainData {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            classes: m.classes,
            class_names: m.class_names.clone(),
            labeled: m.read_split(SplitTag::LabeledTrain)?,
            unlabeled: m.read_split(SplitTag::UnlabeledTrain)?.into_iter().map(|s| s.0).collect(),
            test: m.read_split(SplitTag::Test)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub epoch: u64,
    pub sup: f64,
    pub unsup: f64,
    pub gen: f64,
    pub disc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub epoch: u64,
    pub miou: Option<f64>,
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochLosses>,
    pub evals: Vec<EvalPoint>,
    pub steps_per_epoch: u64,
}

impl TrainOutcome {
    /// Model tensors, then discriminator tensors under `disc.`.
    pub fn checkpoint_tensors(&self) -> NamedTensors {
        let mut t = self.state.model.named_tensors();
        if let Some(d) = &self.state.disc {
            t.extend(d.named_tensors(DISC_PREFIX));
        }
        t
    }
}

fn check_data(cfg: &TrainConfig, data: &TrainData, use_sufd: bool) -> Result<()> {
    if data.labeled.is_empty() {
        return Err(Error::config("dataset", "no labeled-train samples"));
    }
    if use_sufd && data.unlabeled.is_empty() {
        return Err(Error::config("use_sufd", "SUFD needs unlabeled-train samples"));
    }
    let (_, h, w) = data.labeled[0].0.chw()?;
    let [ch, cw] = cfg.crop_size.unwrap_or([h, w]);
    if ch % 8 != 0 || cw % 8 != 0 {
        return Err(Error::config("crop_size", format!("{ch}×{cw} is not a multiple of 8")));
    }
    for (img, lbl) in data.labeled.iter().chain(&data.test) {
        lbl.validate(data.classes)?;
        if img.chw()?.1 != h || img.chw()?.2 != w {
            return Err(Error::config("dataset", "images differ in size"));
        }
    }
    for img in &data.unlabeled {
        if img.chw()?.1 != h || img.chw()?.2 != w {
            return Err(Error::config("dataset", "images differ in size"));
        }
    }
    Ok(())
}

/// Full training run; writes checkpoint and loss trace when `out_dir` is given.
pub fn run_training(config: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = config.resolve()?;
    check_data(config, data, cfg.use_sufd)?;
    let b = cfg.batch_size;
    let spe = steps_per_epoch(data.labeled.len(), data.unlabeled.len(), b);
    let total = cfg.epochs * spe;
    let mut state = TrainState::new(cfg.clone(), data.classes, total)?;
    let mut epochs = Vec::new();
    let mut evals = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut acc = EpochLosses { epoch, sup: 0.0, unsup: 0.0, gen: 0.0, disc: 0.0 };
        for j in 0..spe {
            let step = state.step;
            let labeled = labeled_batch_indices(cfg.seed, step, b, data.labeled.len())
                .into_iter()
                .map(|i| data.labeled[i].clone())
                .collect();
            let unlabeled = if data.unlabeled.is_empty() {
                Vec::new()
            } else {
                unlabeled_batch_indices(cfg.seed, epoch, j, b, data.unlabeled.len())
                    .into_iter()
                    .map(|i| data.unlabeled[i].clone())
                    .collect()
            };
            let l = train_step(&mut state, &Batch { step, labeled, unlabeled }, &data.labeled)?;
            acc.sup += l.sup / spe as f64;
            acc.unsup += l.unsup / spe as f64;
            acc.gen += l.gen / spe as f64;
            acc.disc += l.disc / spe as f64;
        }
        epochs.push(acc);
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !data.test.is_empty() {
            let cm = evaluate_model(&state.model, &data.test)?;
            evals.push(EvalPoint {
                epoch: epoch + 1,
                miou: miou(&cm, UndefinedIou::Exclude),
                iou: per_class_iou(&cm, UndefinedIou::Exclude),
            });
        }
    }
    let outcome = TrainOutcome { state, epochs, evals, steps_per_epoch: spe };
    if let Some(dir) = out_dir {
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.checkpoint_tensors())?;
        write_atomic(&dir.join(LOSS_FILE), loss_csv(&outcome.state).as_bytes())?;
        if !outcome.evals.is_empty() {
            write_atomic(&dir.join(EVAL_TRACE_FILE), eval_csv(&outcome.evals, &data.class_names).as_bytes())?;
        }
    }
    Ok(outcome)
}

/// `step,lr,loss_sup,loss_unsup,loss_gen,loss_disc`, values in shortest
/// round-trip form.
pub fn loss_csv(state: &TrainState) -> String {
    let mut s = String::from("step,lr,loss_sup,loss_unsup,loss_gen,loss_disc\n");
    for l in &state.trace {
        let _ = writeln!(s, "{},{},{},{},{},{}", l.step, l.lr, l.sup, l.unsup, l.gen, l.disc);
    }
    s
}

pub fn eval_csv(points: &[EvalPoint], class_names: &[String]) -> String {
    let mut s = String::from("epoch,miou");
    for n in class_names {
        let _ = write!(s, ",iou_{n}");
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        let _ = write!(s, "{},{}", p.epoch, cell(p.miou));
        for &v in &p.iou {
            let _ = write!(s, ",{}", cell(v));
        }
        s.push('\n');
    }
    s
}
