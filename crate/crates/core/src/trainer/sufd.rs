use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, BCE_EPS};
use crate::segnet::PatchDiscriminator;

fn bce_mean(p: &Tensor, target: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::NonFinite("sufd_losses"));
    }
    let s: f64 = p
        .data()
        .iter()
        .map(|&v| {
            let v = v.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(target * v.ln() + (1.0 - target) * (1.0 - v).ln())
        })
        .sum();
    Ok(s / p.len() as f64)
}

/// `(B(o_u, 1), ½(B(o_u, 0) + B(o_l, 1)))` on discriminator probability maps.
pub fn sufd_losses(o_u: &Tensor, o_l: &Tensor) -> Result<(f64, f64)> {
    let gen = bce_mean(o_u, 1.0)?;
    let disc = 0.5 * (bce_mean(o_u, 0.0)? + bce_mean(o_l, 1.0)?);
    Ok((gen, disc))
}

/// Mean BCE over several probability maps treated as one pool.
pub(crate) fn pooled_bce(tape: &mut Tape, maps: &[Var], target: f64) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    let mut n = 0;
    for &m in maps {
        n += tape.value(m).len();
        let s = tape.bce_sum(m, target)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.map(|a| tape.scale(a, 1.0 / n as f64)).transpose()
}

/// SUFD terms recorded on `tape`.
///
/// The generator term runs the discriminator with `frozen` parameters on the
/// live unlabeled features, so its gradient reaches only the segmentation
/// model. The discriminator term uses `trainable` parameters on detached
/// copies of both feature sets, so its gradient never reaches the model.
pub fn sufd_tape_losses(
    tape: &mut Tape,
    disc: &PatchDiscriminator,
    frozen: &[Var],
    trainable: &[Var],
    unlabeled_features: &[Var],
    labeled_features: &[Var],
) -> Result<(Var, Var)> {
    if unlabeled_features.is_empty() || labeled_features.is_empty() {
        return Err(Error::Invalid("SUFD needs labeled and unlabeled features".into()));
    }
    let mut o_u_live = Vec::new();
    for &f in unlabeled_features {
        o_u_live.push(disc.forward(tape, frozen, f)?);
    }
    let gen = pooled_bce(tape, &o_u_live, 1.0)?.expect("non-empty");

    let mut o_u = Vec::new();
    for &f in unlabeled_features {
        let d = tape.detach(f)?;
        o_u.push(disc.forward(tape, trainable, d)?);
    }
    let mut o_l = Vec::new();
    for &f in labeled_features {
        let d = tape.detach(f)?;
        o_l.push(disc.forward(tape, trainable, d)?);
    }
    let fake = pooled_bce(tape, &o_u, 0.0)?.expect("non-empty");
    let real = pooled_bce(tape, &o_l, 1.0)?.expect("non-empty");
    let both = tape.add(fake, real)?;
    let disc_loss = tape.scale(both, 0.5)?;
    Ok((gen, disc_loss))
}
