use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{central_differences, first_mismatch, FD_STEP};
use crate::numerics::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn small_model(classes: usize) -> SegModel {
    SegModel::new(
        SegModelConfig {
            in_channels: 3,
            classes,
            widths: [4, 6, 8],
        },
        11,
    )
    .unwrap()
}

#[test]
fn logits_shape_contract() {
    let model = SegModel::new(SegModelConfig::new(2), 0).unwrap();
    let (logits, features) = model.seg_forward(&random(&[3, 32, 32], 1)).unwrap();
    assert_eq!(logits.shape(), &[2, 32, 32]);
    assert_eq!(features.shape(), &[16, 32, 32]);
    let (logits, _) = model.seg_forward(&random(&[3, 16, 24], 1)).unwrap();
    assert_eq!(logits.shape(), &[2, 16, 24]);
}

#[test]
fn default_param_count() {
    // enc 3→16→32→64, mid 64→64, dec 128→32, 64→16, 32→16, head 16→2; 3×3 kernels plus biases
    let convs = [(3, 16), (16, 32), (32, 64), (64, 64), (128, 32), (64, 16), (32, 16)];
    let expected: usize = convs.iter().map(|(i, o)| i * o * 9 + o).sum::<usize>() + 16 * 2 + 2;
    assert_eq!(expected, 111_298);
    assert_eq!(SegModel::new(SegModelConfig::new(2), 0).unwrap().param_count(), expected);
}

#[test]
fn indivisible_extent_rejected() {
    let model = small_model(2);
    assert!(matches!(model.seg_forward(&random(&[3, 12, 16], 0)), Err(Error::Shape(_))));
    assert!(matches!(model.seg_forward(&random(&[1, 16, 16], 0)), Err(Error::Shape(_))));
}

#[test]
fn forward_is_bit_identical() {
    let a = SegModel::new(SegModelConfig::new(3), 42).unwrap();
    let b = SegModel::new(SegModelConfig::new(3), 42).unwrap();
    let x = random(&[3, 16, 16], 5);
    assert_eq!(a.seg_forward(&x).unwrap().0, b.seg_forward(&x).unwrap().0);
}

#[test]
fn argmax_labels_in_range() {
    let model = small_model(4);
    let (logits, _) = model.seg_forward(&random(&[3, 16, 16], 9)).unwrap();
    let labels = crate::trainer::argmax_labels(&logits).unwrap();
    assert!(labels.data().iter().all(|&c| c < 4));
}

#[test]
fn input_gradient_matches_fd() {
    let model = small_model(2);
    let x = random(&[3, 16, 16], 3);
    let mean_logit = |img: &Tensor, track: bool| -> Result<(Tape, crate::numerics::Var, crate::numerics::Var)> {
        let mut tape = Tape::new();
        let params = model.bind_frozen(&mut tape)?;
        let xv = if track { tape.param(img.clone())? } else { tape.constant(img.clone())? };
        let out = model.forward(&mut tape, &params, xv, None)?;
        let m = tape.mean(out.logits)?;
        Ok((tape, xv, m))
    };
    let (tape, xv, m) = mean_logit(&x, true).unwrap();
    let g = tape.backward(m).unwrap().get(xv);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probes: Vec<usize> = (0..20).map(|_| rng.gen_range(0..x.len())).collect();
    let analytic: Vec<f64> = probes.iter().map(|&i| g.data()[i]).collect();
    let numeric = central_differences(
        |t| {
            let (tape, _, m) = mean_logit(t, false)?;
            Ok(tape.value(m).data()[0])
        },
        &x,
        &probes,
        FD_STEP,
    )
    .unwrap();
    assert!(first_mismatch(&analytic, &numeric, &probes, 1e-3, 1e-6).is_none());
}

#[test]
fn zero_head_discriminator_outputs_half() {
    let d = PatchDiscriminator::new(DiscriminatorConfig::new(8), 3).unwrap();
    let out = d.disc_forward(&random(&[8, 32, 32], 2)).unwrap();
    assert_eq!(out.shape(), &[1, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn discriminator_range_and_extent() {
    let mut cfg = DiscriminatorConfig::new(4);
    cfg.zero_head = false;
    let d = PatchDiscriminator::new(cfg, 3).unwrap();
    for (h, w) in [(8, 8), (16, 24), (9, 13)] {
        let out = d.disc_forward(&random(&[4, h, w], h as u64).map(|v| 10.0 * v - 5.0)).unwrap();
        let (eh, ew) = d.output_extent(h, w);
        assert_eq!(out.shape(), &[1, eh, ew]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn per_image_discriminator_is_scalar() {
    let mut cfg = DiscriminatorConfig::new(4);
    cfg.per_image = true;
    cfg.zero_head = false;
    let d = PatchDiscriminator::new(cfg, 3).unwrap();
    let out = d.disc_forward(&random(&[4, 16, 16], 1)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
}

#[test]
fn discriminator_channel_mismatch() {
    let d = PatchDiscriminator::new(DiscriminatorConfig::new(8), 3).unwrap();
    assert!(matches!(d.disc_forward(&random(&[4, 8, 8], 0)), Err(Error::Shape(_))));
}

#[test]
fn discriminator_input_gradient_matches_fd() {
    let mut cfg = DiscriminatorConfig::new(4);
    cfg.zero_head = false;
    let d = PatchDiscriminator::new(cfg, 8).unwrap();
    let x = random(&[4, 16, 16], 4).map(|v| 2.0 * v - 1.0);
    let loss = |t: &Tensor, track: bool| -> Result<(Tape, crate::numerics::Var, crate::numerics::Var)> {
        let mut tape = Tape::new();
        let p = d.bind_frozen(&mut tape)?;
        let xv = if track { tape.param(t.clone())? } else { tape.constant(t.clone())? };
        let o = d.forward(&mut tape, &p, xv)?;
        let l = tape.bce(o, 1.0)?;
        Ok((tape, xv, l))
    };
    let (tape, xv, l) = loss(&x, true).unwrap();
    let g = tape.backward(l).unwrap().get(xv);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let probes: Vec<usize> = (0..20).map(|_| rng.gen_range(0..x.len())).collect();
    let analytic: Vec<f64> = probes.iter().map(|&i| g.data()[i]).collect();
    let numeric = central_differences(
        |t| {
            let (tape, _, l) = loss(t, false)?;
            Ok(tape.value(l).data()[0])
        },
        &x,
        &probes,
        FD_STEP,
    )
    .unwrap();
    assert!(first_mismatch(&analytic, &numeric, &probes, 1e-3, 1e-6).is_none());
}

#[test]
fn checkpoint_roundtrip_restores_model() {
    let model = small_model(3);
    let mut named = model.named_tensors();
    let d = PatchDiscriminator::new(DiscriminatorConfig::new(4), 1).unwrap();
    named.extend(d.named_tensors("disc."));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &named).unwrap();
    let back = SegModel::from_named_tensors(&read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back, model);
}
