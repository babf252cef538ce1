use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::NamedTensors;
use super::model::he_kernel;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Average the location logits into a single image-level probability.
    pub per_image: bool,
    /// Start the last layer at zero so every output is exactly 0.5.
    pub zero_head: bool,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            width: 16,
            per_image: false,
            zero_head: true,
        }
    }
}

/// Three stride-2 convolutions and a sigmoid, one probability per location.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator {
    config: DiscriminatorConfig,
    params: Vec<Tensor>,
}

const NAMES: [&str; 6] = [
    "c1.weight", "c1.bias", "c2.weight", "c2.bias", "c3.weight", "c3.bias",
];

/// Output extent of one 3×3 stride-2 pad-1 conv.
fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl PatchDiscriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.width == 0 {
            return Err(Error::config("discriminator", "channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w) = (config.in_channels, config.width);
        let mut head = he_kernel([1, w, 3, 3], &mut rng);
        if config.zero_head {
            head = Tensor::zeros(&[1, w, 3, 3]);
        }
        let params = vec![
            he_kernel([w, c, 3, 3], &mut rng),
            Tensor::zeros(&[w]),
            he_kernel([w, w, 3, 3], &mut rng),
            Tensor::zeros(&[w]),
            head,
            Tensor::zeros(&[1]),
        ];
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Output extent for an `h×w` feature map.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        if self.config.per_image {
            (1, 1)
        } else {
            (halve(halve(halve(h))), halve(halve(halve(w))))
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<Var> {
        let (c, _, _) = tape.value(features).chw()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let x = tape.conv2d(features, params[0], Some(params[1]), 2, 1)?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let x = tape.conv2d(x, params[2], Some(params[3]), 2, 1)?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let mut x = tape.conv2d(x, params[4], Some(params[5]), 2, 1)?;
        if self.config.per_image {
            x = tape.spatial_mean(x)?;
        }
        tape.sigmoid(x)
    }

    /// Inference forward on a plain feature tensor.
    pub fn disc_forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape)?;
        let f = tape.constant(features.clone())?;
        let out = self.forward(&mut tape, &params, f)?;
        Ok(tape.value(out).clone())
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors {
        NAMES
            .iter()
            .map(|n| format!("{prefix}{n}"))
            .zip(self.params.iter().cloned())
            .collect()
    }
}
