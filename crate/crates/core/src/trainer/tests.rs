use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::augment::augment_views;
use crate::data::Sample;
use crate::eval::{evaluate_model, miou, UndefinedIou};
use crate::mixing::{cutmix, supmix, LabelMap, IGNORE_INDEX};
use crate::numerics::{poly_lr, Tape, Tensor, BCE_EPS};
use crate::segnet::{PatchDiscriminator, SegModel};
use crate::util::substream;

/// Squares of class 1 (and 2 when `classes == 3`) on background, 8×8.
fn toy_sample(classes: u8, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (8, 8);
    let mut lbl = LabelMap::filled(h, w, 0);
    for c in 1..classes {
        let (y0, x0) = (rng.gen_range(0..5), rng.gen_range(0..5));
        for y in y0..y0 + 3 {
            for x in x0..x0 + 3 {
                lbl.set(y, x, c);
            }
        }
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let c = lbl.get(y, x) as usize;
            for ch in 0..3 {
                let base = [0.2, 0.8, 0.5][c] + 0.1 * ch as f64;
                img.set3(ch, y, x, (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
            }
        }
    }
    (img, lbl)
}

fn toy_data(classes: u8, labeled: usize, unlabeled: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainData {
        classes: classes as usize,
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        labeled: (0..labeled).map(|_| toy_sample(classes, &mut rng)).collect(),
        unlabeled: (0..unlabeled).map(|_| toy_sample(classes, &mut rng).0).collect(),
        test: (0..2).map(|_| toy_sample(classes, &mut rng)).collect(),
    }
}

fn small(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::new(variant);
    c.widths = [4, 4, 8];
    c.disc_width = 4;
    c.batch_size = 2;
    c.epochs = 2;
    c.lr_init = 0.05;
    c.seed = 11;
    c
}

fn first_batch(data: &TrainData, b: usize) -> Batch {
    Batch {
        step: 0,
        labeled: data.labeled[..b].to_vec(),
        unlabeled: data.unlabeled[..b].to_vec(),
    }
}

// ---- independent oracle pieces -------------------------------------------

fn ce_loop(logits: &Tensor, target: &LabelMap) -> (f64, usize) {
    let (c, h, w) = logits.chw().unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x);
            if t == IGNORE_INDEX {
                continue;
            }
            let z: f64 = (0..c).map(|k| logits.at3(k, y, x).exp()).sum();
            sum += -(logits.at3(t as usize, y, x).exp() / z).ln();
            n += 1;
        }
    }
    (sum, n)
}

fn mean_ce(pairs: &[(Tensor, LabelMap)]) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for (l, t) in pairs {
        let (a, b) = ce_loop(l, t);
        s += a;
        n += b;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn threshold_loop(logits: &Tensor, tau: f64) -> LabelMap {
    let (c, h, w) = logits.chw().unwrap();
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let z: f64 = (0..c).map(|k| logits.at3(k, y, x).exp()).sum();
            let (mut best, mut bp) = (0, -1.0);
            for k in 0..c {
                let p = logits.at3(k, y, x).exp() / z;
                if p > bp {
                    best = k;
                    bp = p;
                }
            }
            out.set(y, x, if bp >= tau { best as u8 } else { IGNORE_INDEX });
        }
    }
    out
}

fn bce_loop(maps: &[Tensor], t: f64) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for m in maps {
        for &p in m.data() {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            n += 1;
        }
    }
    s / n as f64
}

struct OracleViews {
    weak_logits: Vec<Tensor>,
    weak_features: Vec<Tensor>,
    strong: Vec<Tensor>,
    pseudo: Vec<LabelMap>,
}

fn oracle_sup(model: &SegModel, cfg: &TrainConfig, batch: &Batch) -> (f64, Vec<Tensor>) {
    let mut pairs = Vec::new();
    let mut feats = Vec::new();
    for (i, s) in batch.labeled.iter().enumerate() {
        let mut rng = substream(cfg.seed, streams::LABELED_AUG, &[0, i as u64]);
        let (x, y) = labeled_view(s, (8, 8), cfg.augment.flip_p, &mut rng).unwrap();
        let (l, f) = model.seg_forward(&x).unwrap();
        pairs.push((l, y));
        feats.push(f);
    }
    (mean_ce(&pairs), feats)
}

fn oracle_views(model: &SegModel, cfg: &TrainConfig, batch: &Batch) -> OracleViews {
    let mut o = OracleViews { weak_logits: vec![], weak_features: vec![], strong: vec![], pseudo: vec![] };
    for (i, img) in batch.unlabeled.iter().enumerate() {
        let mut geo = substream(cfg.seed, streams::UNLABELED_GEO, &[0, i as u64]);
        let mut photo = substream(cfg.seed, streams::UNLABELED_PHOTO, &[0, i as u64]);
        let v = augment_views(img, None, (8, 8), &cfg.augment, &mut geo, &mut photo).unwrap();
        let (l, f) = model.seg_forward(&v.weak).unwrap();
        o.pseudo.push(threshold_loop(&l, cfg.tau));
        o.weak_logits.push(l);
        o.weak_features.push(f);
        o.strong.push(v.strong);
    }
    o
}

#[test]
fn ours_step_matches_straight_line_oracle() {
    let data = toy_data(2, 3, 3, 1);
    let mut cfg = small(Variant::Ours);
    cfg.tau = 0.52;
    cfg.mix_p = 1.0;
    cfg.lambda_adv = Some(0.3);
    let batch = first_batch(&data, 2);
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let model = state.model.clone();
    let disc: PatchDiscriminator = state.disc.clone().unwrap();
    let got = train_step(&mut state, &batch, &data.labeled).unwrap();

    // (1) supervised CE on labeled weak views
    let (sup, lab_feats) = oracle_sup(&model, &cfg, &batch);
    // (2) weak views → pseudo-labels
    let v = oracle_views(&model, &cfg, &batch);
    // (3) SupMix of a labeled partner onto the strong view
    let mut pairs = Vec::new();
    for i in 0..2 {
        let mut mrng = substream(cfg.seed, streams::MIX, &[0, i as u64]);
        assert!(mrng.gen_bool(1.0));
        let mut prng = substream(cfg.seed, streams::SUPMIX_PARTNER, &[0, i as u64]);
        let k = prng.gen_range(0..data.labeled.len());
        let (xl, yl) = labeled_view(&data.labeled[k], (8, 8), 0.5, &mut prng).unwrap();
        let m = supmix(&xl, &yl, &v.strong[i], &v.pseudo[i], 0, &mut mrng).unwrap();
        // (4) consistency CE on the mixed strong view
        pairs.push((model.seg_forward(&m.image).unwrap().0, m.label));
    }
    let unsup = mean_ce(&pairs);
    // (5) generator term on the weak unlabeled features
    let o_u: Vec<Tensor> = v.weak_features.iter().map(|f| disc.disc_forward(f).unwrap()).collect();
    let o_l: Vec<Tensor> = lab_feats.iter().map(|f| disc.disc_forward(f).unwrap()).collect();
    let gen = bce_loop(&o_u, 1.0);
    let dl = 0.5 * (bce_loop(&o_u, 0.0) + bce_loop(&o_l, 1.0));
    let total = sup + 1.0 * unsup + 0.3 * gen;

    assert!((got.sup - sup).abs() < 1e-6, "{} vs {sup}", got.sup);
    assert!((got.unsup - unsup).abs() < 1e-6, "{} vs {unsup}", got.unsup);
    assert!((got.gen - gen).abs() < 1e-6);
    assert!((got.disc - dl).abs() < 1e-6);
    assert!((got.total - total).abs() < 1e-6);
}

#[test]
fn fixmatch_step_matches_straight_line_oracle() {
    let data = toy_data(2, 3, 3, 2);
    let mut cfg = small(Variant::FixMatch);
    cfg.tau = 0.51;
    cfg.mix_p = 1.0;
    let batch = first_batch(&data, 2);
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let model = state.model.clone();
    let got = train_step(&mut state, &batch, &data.labeled).unwrap();

    let (sup, _) = oracle_sup(&model, &cfg, &batch);
    let v = oracle_views(&model, &cfg, &batch);
    let mut pairs = Vec::new();
    for i in 0..2 {
        let j = (i + 1) % 2;
        let mut mrng = substream(cfg.seed, streams::MIX, &[0, i as u64]);
        assert!(mrng.gen_bool(1.0));
        let m = cutmix(&v.strong[j], &v.pseudo[j], &v.strong[i], &v.pseudo[i], &mut mrng).unwrap();
        pairs.push((model.seg_forward(&m.image).unwrap().0, m.label));
    }
    let unsup = mean_ce(&pairs);
    assert!((got.total - (sup + unsup)).abs() < 1e-6, "{} vs {}", got.total, sup + unsup);
    assert_eq!(got.gen, 0.0);
}

#[test]
fn all_pixels_norm_divides_by_every_strong_pixel() {
    let data = toy_data(2, 3, 3, 2);
    let mut cfg = small(Variant::FixMatch);
    cfg.tau = 0.51;
    cfg.mix_p = 1.0;
    cfg.unsup_norm = UnsupNorm::AllPixels;
    let batch = first_batch(&data, 2);
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let model = state.model.clone();
    let got = train_step(&mut state, &batch, &data.labeled).unwrap();

    let v = oracle_views(&model, &cfg, &batch);
    let mut sum = 0.0;
    for i in 0..2 {
        let j = (i + 1) % 2;
        let mut mrng = substream(cfg.seed, streams::MIX, &[0, i as u64]);
        assert!(mrng.gen_bool(1.0));
        let m = cutmix(&v.strong[j], &v.pseudo[j], &v.strong[i], &v.pseudo[i], &mut mrng).unwrap();
        sum += ce_loop(&model.seg_forward(&m.image).unwrap().0, &m.label).0;
    }
    let unsup = sum / (2.0 * 64.0);
    assert!((got.unsup - unsup).abs() < 1e-9, "{} vs {unsup}", got.unsup);
}

#[test]
fn unimatch_step_matches_straight_line_oracle() {
    let data = toy_data(2, 3, 3, 3);
    let mut cfg = small(Variant::UnimatchLite);
    cfg.tau = 0.51;
    cfg.strong_mix = Some(StrongMix::None);
    let batch = first_batch(&data, 2);
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let model = state.model.clone();
    let got = train_step(&mut state, &batch, &data.labeled).unwrap();

    let (sup, _) = oracle_sup(&model, &cfg, &batch);
    let v = oracle_views(&model, &cfg, &batch);
    let strong: Vec<_> = (0..2)
        .map(|i| (model.seg_forward(&v.strong[i]).unwrap().0, v.pseudo[i].clone()))
        .collect();
    let mut fp = Vec::new();
    for i in 0..2 {
        let mut tape = Tape::new();
        let params = model.bind_frozen(&mut tape).unwrap();
        let mut rng = substream(cfg.seed, streams::FEATURE_DROPOUT, &[0, i as u64]);
        // rebuild the weak view to feed the dropout branch
        let mut geo = substream(cfg.seed, streams::UNLABELED_GEO, &[0, i as u64]);
        let mut photo = substream(cfg.seed, streams::UNLABELED_PHOTO, &[0, i as u64]);
        let weak = augment_views(&batch.unlabeled[i], None, (8, 8), &cfg.augment, &mut geo, &mut photo)
            .unwrap()
            .weak;
        let x = tape.constant(weak).unwrap();
        let out = model
            .forward(&mut tape, &params, x, Some(crate::segnet::FeatureDropout { p: 0.5, rng: &mut rng }))
            .unwrap();
        fp.push((tape.value(out.logits).clone(), v.pseudo[i].clone()));
    }
    let unsup = 0.5 * (mean_ce(&strong) + mean_ce(&fp));
    assert!((got.unsup - unsup).abs() < 1e-6);
    assert!((got.total - (sup + unsup)).abs() < 1e-6);
}

#[test]
fn unimatch_degenerate_views_equal_fixmatch_term() {
    let data = toy_data(2, 2, 2, 4);
    let mut cfg = small(Variant::UnimatchLite);
    cfg.tau = 0.51;
    cfg.strong_mix = Some(StrongMix::None);
    cfg.feature_dropout = 0.0;
    cfg.augment = cfg.augment.clone().photometric_off();
    let batch = first_batch(&data, 2);
    let mut uni = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let lu = train_step(&mut uni, &batch, &data.labeled).unwrap();
    cfg.variant = Variant::FixMatch;
    let mut fix = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let lf = train_step(&mut fix, &batch, &data.labeled).unwrap();
    assert!(lf.unsup > 0.0);
    assert!((lu.unsup - lf.unsup).abs() < 1e-12);
}

#[test]
fn empty_pseudo_labels_and_selection_give_zero_unsup() {
    let mut data = toy_data(2, 2, 2, 5);
    for s in &mut data.labeled {
        s.1 = LabelMap::filled(8, 8, 0);
    }
    let mut cfg = small(Variant::Ours);
    cfg.tau = 1.0;
    cfg.mix_p = 1.0;
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let l = train_step(&mut state, &first_batch(&data, 2), &data.labeled).unwrap();
    assert_eq!(l.unsup, 0.0);
    assert!(l.sup > 0.0);
}

#[test]
fn tau_one_trains_nothing_at_init() {
    let data = toy_data(2, 2, 2, 6);
    let mut cfg = small(Variant::FixMatch);
    cfg.tau = 1.0;
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let l = train_step(&mut state, &first_batch(&data, 2), &data.labeled).unwrap();
    assert_eq!(l.unsup, 0.0);
}

#[test]
fn zero_weights_reduce_to_supervised_step() {
    let data = toy_data(2, 2, 2, 7);
    let mut cfg = small(Variant::Ours);
    cfg.lambda_u = Some(0.0);
    cfg.lambda_adv = Some(0.0);
    let batch = first_batch(&data, 2);
    let mut ours = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    train_step(&mut ours, &batch, &data.labeled).unwrap();
    let mut sup_cfg = small(Variant::Supervised);
    sup_cfg.seed = cfg.seed;
    let mut sup = TrainState::new(sup_cfg.resolve().unwrap(), 2, 10).unwrap();
    train_step(&mut sup, &batch, &data.labeled).unwrap();
    assert_eq!(ours.model.params(), sup.model.params());
}

fn params_after(cfg: &TrainConfig, data: &TrainData) -> Vec<Tensor> {
    run_training(cfg, data, None).unwrap().state.model.params().to_vec()
}

#[test]
fn reduction_chain_bit_identical() {
    let data = toy_data(2, 4, 6, 8);
    let mut ours = small(Variant::Ours);
    ours.strong_mix = Some(StrongMix::Cutmix);
    ours.lambda_adv = Some(0.0);
    ours.tau = 0.6;
    let mut fix = small(Variant::FixMatch);
    fix.tau = 0.6;
    let a = params_after(&ours, &data);
    let b = params_after(&fix, &data);
    assert_eq!(a, b);
    let mut fix0 = fix.clone();
    fix0.lambda_u = Some(0.0);
    let sup = small(Variant::Supervised);
    assert_eq!(params_after(&fix0, &data), params_after(&sup, &data));
    // the unsupervised term does move the parameters
    assert_ne!(b, params_after(&sup, &data));
}

#[test]
fn no_unlabeled_data_matches_supervised() {
    let data = toy_data(2, 4, 0, 9);
    let fix = small(Variant::FixMatch);
    let sup = small(Variant::Supervised);
    assert_eq!(params_after(&fix, &data), params_after(&sup, &data));
}

#[test]
fn discriminator_loss_never_reaches_the_model() {
    let data = toy_data(2, 2, 2, 10);
    let cfg = small(Variant::Ours);
    let state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let disc = state.disc.as_ref().unwrap();
    let mut tape = Tape::new();
    let mp = state.model.bind(&mut tape).unwrap();
    let mut taps = Vec::new();
    for (x, _) in &data.labeled {
        let xv = tape.constant(x.clone()).unwrap();
        taps.push(state.model.forward(&mut tape, &mp, xv, None).unwrap().features);
    }
    let frozen = disc.bind_frozen(&mut tape).unwrap();
    let trainable = disc.bind(&mut tape).unwrap();
    let (gen, dl) = sufd_tape_losses(&mut tape, disc, &frozen, &trainable, &taps[..1], &taps[1..]).unwrap();
    let g = tape.backward(dl).unwrap();
    for &p in &mp {
        assert!(g.get(p).data().iter().all(|&v| v == 0.0));
    }
    assert!(trainable.iter().any(|&p| g.get(p).data().iter().any(|&v| v != 0.0)));
    // generator path does reach the model and leaves the trainable copy alone
    let g = tape.backward(gen).unwrap();
    assert!(trainable.iter().all(|&p| !g.reached(p)));
}

#[test]
fn sufd_losses_start_at_ln2() {
    let data = toy_data(2, 2, 2, 11);
    let cfg = small(Variant::Ours);
    let mut state = TrainState::new(cfg.resolve().unwrap(), 2, 10).unwrap();
    let l = train_step(&mut state, &first_batch(&data, 2), &data.labeled).unwrap();
    assert!((l.gen - 2f64.ln()).abs() < 0.2);
    assert!((l.disc - 2f64.ln()).abs() < 0.2);
}

#[test]
fn ignored_pixels_carry_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::new(vec![3, 2, 2], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let target = [1u8, IGNORE_INDEX, 0, IGNORE_INDEX];
    let mut tape = Tape::new();
    let l = tape.param(logits.clone()).unwrap();
    let loss = tape.softmax_ce(l, &target, IGNORE_INDEX).unwrap();
    let before = tape.value(loss).data()[0];
    let g = tape.backward(loss).unwrap().get(l);
    let mut bumped = logits.clone();
    for c in 0..3 {
        for p in [1, 3] {
            assert_eq!(g.data()[c * 4 + p], 0.0);
            bumped.data_mut()[c * 4 + p] += 5.0;
        }
    }
    let mut tape = Tape::new();
    let l = tape.param(bumped).unwrap();
    let after = tape.softmax_ce(l, &target, IGNORE_INDEX).unwrap();
    assert_eq!(tape.value(after).data()[0], before);
}

#[test]
fn lr_trace_is_the_poly_schedule() {
    let data = toy_data(2, 3, 5, 13);
    let mut cfg = small(Variant::FixMatch);
    cfg.epochs = 3;
    let out = run_training(&cfg, &data, None).unwrap();
    let spe = steps_per_epoch(3, 5, 2);
    assert_eq!(out.steps_per_epoch, spe);
    assert_eq!(out.state.step, 3 * spe);
    for (i, l) in out.state.trace.iter().enumerate() {
        assert_eq!(l.step, i as u64);
        assert_eq!(l.lr, poly_lr(i as u64, &out.state.schedule));
    }
    assert!(out.state.trace.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn zero_epochs_keep_initialization() {
    let data = toy_data(2, 2, 2, 14);
    let mut cfg = small(Variant::Ours);
    cfg.epochs = 0;
    let out = run_training(&cfg, &data, None).unwrap();
    let init = TrainState::new(cfg.resolve().unwrap(), 2, 1).unwrap();
    assert_eq!(out.state.model.params(), init.model.params());
    assert!(out.state.trace.is_empty());
}

#[test]
fn runs_are_byte_identical() {
    let data = toy_data(3, 3, 3, 15);
    let mut cfg = small(Variant::Ours);
    cfg.strong_mix = Some(StrongMix::Classmix);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(&cfg, &data, Some(a.path())).unwrap();
    run_training(&cfg, &data, Some(b.path())).unwrap();
    for f in [CHECKPOINT_FILE, LOSS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(a.path().join(LOSS_FILE)).unwrap();
    assert!(csv.starts_with("step,lr,loss_sup,loss_unsup,loss_gen,loss_disc\n"));
}

#[test]
fn sufd_without_unlabeled_is_config_error() {
    let data = toy_data(2, 2, 0, 16);
    match run_training(&small(Variant::Ours), &data, None) {
        Err(crate::Error::Config { key, .. }) => assert_eq!(key, "use_sufd"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn samplers_cover_the_pools() {
    let seen: Vec<usize> = (0..3).flat_map(|s| labeled_batch_indices(4, s, 2, 6)).collect();
    let mut sorted = seen.clone();
    sorted.sort();
    assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    let mut u: Vec<usize> = (0..3).flat_map(|j| unlabeled_batch_indices(4, 0, j, 2, 5)).collect();
    assert_eq!(unlabeled_batch_indices(4, 0, 2, 2, 5).len(), 1);
    u.sort();
    assert_eq!(u, (0..5).collect::<Vec<_>>());
    assert_eq!(steps_per_epoch(8, 56, 4), 14);
    assert_eq!(steps_per_epoch(5, 0, 4), 2);
}

#[test]
fn supervised_fits_a_separable_set() {
    let data = toy_data(2, 4, 0, 17);
    let mut cfg = small(Variant::Supervised);
    cfg.widths = [8, 8, 8];
    cfg.epochs = 200;
    cfg.lr_init = 0.05;
    cfg.augment.flip_p = 0.0;
    let out = run_training(&cfg, &data, None).unwrap();
    let cm = evaluate_model(&out.state.model, &data.labeled).unwrap();
    let m = miou(&cm, UndefinedIou::Exclude).unwrap();
    assert!(m >= 0.95, "train mIoU {m}");
}
