use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Inverted dropout: survivors are rescaled by `1/(1-p)`. Identity when not
/// training or when `p == 0`.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let factor = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, factor)
}
