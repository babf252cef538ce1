use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{ResolvedConfig, StrongMix, SufdTap, UnsupNorm, Variant};
use super::labels::{argmax_labels, pseudo_label};
use super::sufd::sufd_tape_losses;
use crate::augment::{apply_geometry_image, apply_geometry_label, augment_views, sample_geometry, AugmentedViews};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mixing::{classmix_from_labels, cutmix, supmix, LabelMap, IGNORE_INDEX};
use crate::numerics::{poly_lr, sgd_step, LrSchedule, OptimizerState, Tape, Tensor, Var};
use crate::segnet::{DiscriminatorConfig, FeatureDropout, PatchDiscriminator, SegModel, SegModelConfig, SegOutput};
use crate::util::substream;

/// Names of the per-purpose random streams, keyed by `(seed, name, indices)`.
pub mod streams {
    pub const MODEL_INIT: &str = "model-init";
    pub const DISC_INIT: &str = "disc-init";
    /// Indexed by labeled cycle.
    pub const LABELED_ORDER: &str = "labeled-order";
    /// Indexed by epoch.
    pub const UNLABELED_ORDER: &str = "unlabeled-order";
    /// Indexed by `[step, slot]` from here on.
    pub const LABELED_AUG: &str = "labeled-aug";
    pub const UNLABELED_GEO: &str = "unlabeled-geo";
    pub const UNLABELED_PHOTO: &str = "unlabeled-photo";
    pub const MIX: &str = "mix";
    pub const SUPMIX_PARTNER: &str = "supmix-partner";
    pub const FEATURE_DROPOUT: &str = "feature-dropout";
}

/// Optimizer steps per epoch: one per unlabeled batch, or per labeled batch
/// when there is no unlabeled data.
pub fn steps_per_epoch(labeled: usize, unlabeled: usize, batch: usize) -> u64 {
    let n = if unlabeled > 0 { unlabeled } else { labeled };
    n.div_ceil(batch.max(1)) as u64
}

fn permutation(n: usize, seed: u64, purpose: &str, index: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut substream(seed, purpose, &[index]));
    p
}

/// Labeled indices for `step`: a fresh permutation per pass over the pool.
pub fn labeled_batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch as u64 {
        let pos = step * batch as u64 + k;
        let cycle = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(cycle) {
            cached = Some((cycle, permutation(n, seed, streams::LABELED_ORDER, cycle)));
        }
        out.push(cached.as_ref().expect("set").1[(pos % n as u64) as usize]);
    }
    out
}

/// Unlabeled indices for batch `j` of `epoch`; the last batch may be short.
pub fn unlabeled_batch_indices(seed: u64, epoch: u64, j: u64, batch: usize, n: usize) -> Vec<usize> {
    let perm = permutation(n, seed, streams::UNLABELED_ORDER, epoch);
    let start = (j as usize * batch).min(n);
    perm[start..(start + batch).min(n)].to_vec()
}

/// Weak view of a labeled sample for slot `slot` of `step`.
pub fn labeled_view(
    sample: &Sample,
    crop: (usize, usize),
    flip_p: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, LabelMap)> {
    let (image, label) = sample;
    let (_, h, w) = image.chw()?;
    let g = sample_geometry(h, w, crop, flip_p, rng)?;
    Ok((apply_geometry_image(image, &g)?, apply_geometry_label(label, &g)?))
}

/// One step's raw inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub step: u64,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub lr: f64,
    pub sup: f64,
    pub unsup: f64,
    pub gen: f64,
    pub disc: f64,
    /// `sup + λ_u·unsup + λ_adv·gen` as optimized.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ResolvedConfig,
    pub model: SegModel,
    pub disc: Option<PatchDiscriminator>,
    pub opt_model: OptimizerState,
    pub opt_disc: Option<OptimizerState>,
    pub schedule: LrSchedule,
    pub step: u64,
    pub trace: Vec<StepLosses>,
}

impl TrainState {
    pub fn new(config: ResolvedConfig, classes: usize, total_steps: u64) -> Result<Self> {
        let seed = config.seed;
        let mut mcfg = SegModelConfig::new(classes);
        mcfg.widths = config.widths;
        let model = SegModel::new(mcfg, substream(seed, streams::MODEL_INIT, &[]).gen())?;
        let disc = if config.use_sufd {
            let c = match config.sufd_tap {
                SufdTap::Features => model.config().feature_channels(),
                SufdTap::Logits => classes,
            };
            let mut dcfg = DiscriminatorConfig::new(c);
            dcfg.width = config.disc_width;
            dcfg.per_image = config.disc_per_image;
            Some(PatchDiscriminator::new(dcfg, substream(seed, streams::DISC_INIT, &[]).gen())?)
        } else {
            None
        };
        let opt_model = OptimizerState::new(model.params(), config.momentum, config.weight_decay);
        let opt_disc = disc
            .as_ref()
            .map(|d| OptimizerState::new(d.params(), config.momentum, config.weight_decay));
        let schedule = LrSchedule::new(config.lr_init, total_steps.max(1))?;
        Ok(Self {
            config,
            model,
            disc,
            opt_model,
            opt_disc,
            schedule,
            step: 0,
            trace: Vec::new(),
        })
    }
}

/// Unsupervised pooled mean; under [`UnsupNorm::AllPixels`] the denominator
/// is the total pixel count, still `None` when no pixel carries a target.
fn unsup_mean(tape: &mut Tape, terms: &[(Var, usize)], norm: UnsupNorm, pixels: usize) -> Result<Option<Var>> {
    match norm {
        UnsupNorm::Confident => pooled_mean(tape, terms),
        UnsupNorm::AllPixels => {
            let Some(m) = pooled_mean(tape, terms)? else {
                return Ok(None);
            };
            let count: usize = terms.iter().map(|t| t.1).sum();
            Ok(Some(tape.scale(m, count as f64 / pixels as f64)?))
        }
    }
}

/// Mean of several CE sums over their pooled pixel count; `None` if no pixel counted.
fn pooled_mean(tape: &mut Tape, terms: &[(Var, usize)]) -> Result<Option<Var>> {
    let count: usize = terms.iter().map(|t| t.1).sum();
    if count == 0 {
        return Ok(None);
    }
    let mut acc = terms[0].0;
    for &(v, _) in &terms[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / count as f64)?))
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0)
}

fn tap(out: &SegOutput, t: SufdTap) -> Var {
    match t {
        SufdTap::Features => out.features,
        SufdTap::Logits => out.logits,
    }
}

/// Strong view and target for every unlabeled slot after the configured mix.
#[allow(clippy::too_many_arguments)]
pub fn mix_strong_views(
    cfg: &ResolvedConfig,
    step: u64,
    views: &[AugmentedViews],
    pseudo: &[LabelMap],
    argmax: &[LabelMap],
    pool: &[Sample],
    crop: (usize, usize),
) -> Result<Vec<(Tensor, LabelMap)>> {
    let n = views.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(cfg.seed, streams::MIX, &[step, i as u64]);
        let own = (views[i].strong.clone(), pseudo[i].clone());
        if cfg.strong_mix == StrongMix::None || !rng.gen_bool(cfg.mix_p) {
            out.push(own);
            continue;
        }
        let j = (i + 1) % n;
        let mixed = match cfg.strong_mix {
            StrongMix::None => unreachable!(),
            StrongMix::Cutmix => cutmix(&views[j].strong, &pseudo[j], &own.0, &own.1, &mut rng)?,
            StrongMix::Classmix => {
                classmix_from_labels(&views[j].strong, &argmax[j], &pseudo[j], &own.0, &own.1, &mut rng)?
            }
            StrongMix::Supmix => {
                if pool.is_empty() {
                    return Err(Error::config("strong_mix", "supmix needs labeled samples"));
                }
                let mut prng = substream(cfg.seed, streams::SUPMIX_PARTNER, &[step, i as u64]);
                let k = prng.gen_range(0..pool.len());
                let (xl, yl) = labeled_view(&pool[k], crop, cfg.augment.flip_p, &mut prng)?;
                supmix(&xl, &yl, &own.0, &own.1, cfg.background, &mut rng)?
            }
        };
        out.push((mixed.image, mixed.label));
    }
    Ok(out)
}

/// One optimizer step of the configured variant, plus one discriminator
/// step when SUFD is on.
///
/// `pool` is the full labeled set (SupMix partners are drawn from it).
pub fn train_step(state: &mut TrainState, batch: &Batch, pool: &[Sample]) -> Result<StepLosses> {
    let cfg = state.config.clone();
    if batch.labeled.is_empty() {
        return Err(Error::Invalid("a training step needs at least one labeled sample".into()));
    }
    if batch.step != state.step {
        return Err(Error::Invalid(format!("batch for step {} at step {}", batch.step, state.step)));
    }
    let s = batch.step;
    let lr = poly_lr(s, &state.schedule);
    let (_, h, w) = batch.labeled[0].0.chw()?;
    let crop = cfg.crop_size.map(|[a, b]| (a, b)).unwrap_or((h, w));

    let mut tape = Tape::new();
    let mp = state.model.bind(&mut tape)?;

    // supervised term on the labeled weak views
    let mut sup_terms = Vec::new();
    let mut lab_taps = Vec::new();
    for (i, sample) in batch.labeled.iter().enumerate() {
        let mut rng = substream(cfg.seed, streams::LABELED_AUG, &[s, i as u64]);
        let (x, y) = labeled_view(sample, crop, cfg.augment.flip_p, &mut rng)?;
        let xv = tape.constant(x)?;
        let out = state.model.forward(&mut tape, &mp, xv, None)?;
        sup_terms.push(tape.softmax_ce_sum(out.logits, y.data(), IGNORE_INDEX)?);
        lab_taps.push(tap(&out, cfg.sufd_tap));
    }
    let l_sup = pooled_mean(&mut tape, &sup_terms)?;
    let mut total = l_sup;
    let mut l_unsup = None;
    let mut sufd: Option<(Var, Var, Vec<Var>)> = None;

    let semi = cfg.variant != Variant::Supervised && !batch.unlabeled.is_empty();
    if semi && (cfg.lambda_u > 0.0 || cfg.use_sufd) {
        let mut views = Vec::new();
        let mut pseudo = Vec::new();
        let mut argmax = Vec::new();
        let mut unl_taps = Vec::new();
        for (i, img) in batch.unlabeled.iter().enumerate() {
            let mut geo = substream(cfg.seed, streams::UNLABELED_GEO, &[s, i as u64]);
            let mut photo = substream(cfg.seed, streams::UNLABELED_PHOTO, &[s, i as u64]);
            let v = augment_views(img, None, crop, &cfg.augment, &mut geo, &mut photo)?;
            let xv = tape.constant(v.weak.clone())?;
            let out = state.model.forward(&mut tape, &mp, xv, None)?;
            let logits = tape.value(out.logits);
            pseudo.push(pseudo_label(logits, cfg.tau)?);
            argmax.push(argmax_labels(logits)?);
            unl_taps.push(tap(&out, cfg.sufd_tap));
            views.push(v);
        }

        if cfg.lambda_u > 0.0 {
            let mixed = mix_strong_views(&cfg, s, &views, &pseudo, &argmax, pool, crop)?;
            let mut strong_terms = Vec::new();
            for (x, y) in mixed {
                let xv = tape.constant(x)?;
                let out = state.model.forward(&mut tape, &mp, xv, None)?;
                strong_terms.push(tape.softmax_ce_sum(out.logits, y.data(), IGNORE_INDEX)?);
            }
            let pixels = strong_terms.len() * crop.0 * crop.1;
            let l_strong = unsup_mean(&mut tape, &strong_terms, cfg.unsup_norm, pixels)?;
            l_unsup = if cfg.variant == Variant::UnimatchLite {
                let mut fp_terms = Vec::new();
                for (i, v) in views.iter().enumerate() {
                    let mut rng = substream(cfg.seed, streams::FEATURE_DROPOUT, &[s, i as u64]);
                    let xv = tape.constant(v.weak.clone())?;
                    let fd = FeatureDropout {
                        p: cfg.feature_dropout,
                        rng: &mut rng,
                    };
                    let out = state.model.forward(&mut tape, &mp, xv, Some(fd))?;
                    fp_terms.push(tape.softmax_ce_sum(out.logits, pseudo[i].data(), IGNORE_INDEX)?);
                }
                let l_fp = unsup_mean(&mut tape, &fp_terms, cfg.unsup_norm, pixels)?;
                match (l_strong, l_fp) {
                    (None, None) => None,
                    (Some(a), None) | (None, Some(a)) => Some(tape.scale(a, 0.5)?),
                    (Some(a), Some(b)) => {
                        let t = tape.add(a, b)?;
                        Some(tape.scale(t, 0.5)?)
                    }
                }
            } else {
                l_strong
            };
            if let Some(u) = l_unsup {
                let weighted = tape.scale(u, cfg.lambda_u)?;
                total = Some(match total {
                    Some(t) => tape.add(t, weighted)?,
                    None => weighted,
                });
            }
        }

        if let Some(disc) = state.disc.as_ref() {
            let frozen = disc.bind_frozen(&mut tape)?;
            let trainable = disc.bind(&mut tape)?;
            let (gen, dl) = sufd_tape_losses(&mut tape, disc, &frozen, &trainable, &unl_taps, &lab_taps)?;
            if cfg.lambda_adv > 0.0 {
                let weighted = tape.scale(gen, cfg.lambda_adv)?;
                total = Some(match total {
                    Some(t) => tape.add(t, weighted)?,
                    None => weighted,
                });
            }
            sufd = Some((gen, dl, trainable));
        }
    }

    let losses = StepLosses {
        step: s,
        lr,
        sup: value(&tape, l_sup),
        unsup: value(&tape, l_unsup),
        gen: value(&tape, sufd.as_ref().map(|x| x.0)),
        disc: value(&tape, sufd.as_ref().map(|x| x.1)),
        total: value(&tape, total),
    };

    let grads: Vec<Tensor> = match total {
        Some(t) => {
            let g = tape.backward(t)?;
            mp.iter().map(|&v| g.get(v)).collect()
        }
        None => state.model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
    };
    state.opt_model.set_lr(lr)?;
    sgd_step(state.model.params_mut(), &grads, &mut state.opt_model)?;

    if let (Some((_, dl, dp)), Some(disc), Some(opt)) = (sufd, state.disc.as_mut(), state.opt_disc.as_mut()) {
        let g = tape.backward(dl)?;
        let dgrads: Vec<Tensor> = dp.iter().map(|&v| g.get(v)).collect();
        opt.set_lr(lr)?;
        sgd_step(disc.params_mut(), &dgrads, opt)?;
    }

    state.step += 1;
    state.trace.push(losses);
    Ok(losses)
}
