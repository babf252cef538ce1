use crate::error::{Error, Result};
use crate::mixing::{LabelMap, IGNORE_INDEX};
use crate::numerics::Tensor;

fn check_classes(c: usize) -> Result<()> {
    if c == 0 || c > IGNORE_INDEX as usize {
        return Err(Error::Shape(format!("logits need 1..=255 channels, got {c}")));
    }
    Ok(())
}

/// Per-pixel argmax over the class axis; ties go to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = logits.chw()?;
    check_classes(c)?;
    let hw = h * w;
    let d = logits.data();
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Argmax class where its softmax probability reaches `tau`, else ignore.
pub fn pseudo_label(logits: &Tensor, tau: f64) -> Result<LabelMap> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("threshold {tau} outside (0, 1]")));
    }
    let mut out = argmax_labels(logits)?;
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    let d = logits.data();
    for p in 0..hw {
        let best = out.data()[p] as usize;
        let top = d[best * hw + p];
        // max probability = 1 / Σ exp(l_k − l_max)
        let z: f64 = (0..c).map(|k| (d[k * hw + p] - top).exp()).sum();
        if 1.0 / z < tau {
            out.data_mut()[p] = IGNORE_INDEX;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_logits_fully_confident() {
        let mut t = Tensor::zeros(&[3, 4, 4]);
        for p in 0..16 {
            t.data_mut()[2 * 16 + p] = 20.0;
        }
        let l = pseudo_label(&t, 0.95).unwrap();
        assert!(l.data().iter().all(|&v| v == 2));
    }

    #[test]
    fn uniform_logits_all_ignored() {
        let l = pseudo_label(&Tensor::zeros(&[2, 3, 3]), 0.95).unwrap();
        assert!(l.data().iter().all(|&v| v == IGNORE_INDEX));
    }

    #[test]
    fn tau_one_keeps_only_saturated() {
        let mut t = Tensor::zeros(&[2, 1, 2]);
        t.data_mut()[0] = 800.0; // exp underflow → probability exactly 1
        t.data_mut()[1] = 5.0;
        let l = pseudo_label(&t, 1.0).unwrap();
        assert_eq!(l.data(), &[0, IGNORE_INDEX]);
    }

    #[test]
    fn rejects_bad_tau() {
        let t = Tensor::zeros(&[2, 1, 1]);
        assert!(pseudo_label(&t, 0.0).is_err());
        assert!(pseudo_label(&t, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn matches_softmax_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (c, h, w) = (rng.gen_range(2..5), rng.gen_range(1..6), rng.gen_range(1..6));
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let t = Tensor::new(vec![c, h, w], data).unwrap();
            let tau = rng.gen_range(0.3..0.99);
            let l = pseudo_label(&t, tau).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let v: Vec<f64> = (0..c).map(|k| t.at3(k, y, x)).collect();
                    let s: f64 = v.iter().map(|a| a.exp()).sum();
                    let probs: Vec<f64> = v.iter().map(|a| a.exp() / s).collect();
                    let mut arg = 0;
                    for k in 0..c {
                        if probs[k] > probs[arg] {
                            arg = k;
                        }
                    }
                    let want = if probs[arg] >= tau { arg as u8 } else { IGNORE_INDEX };
                    assert_eq!(l.get(y, x), want);
                }
            }
        }
    }
}
