use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::numerics::{dropout, Tape, Tensor, Var};

/// Spatial extents must be divisible by this (three 2× poolings).
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Encoder widths at 1×, ½× and ¼× resolution; the bottleneck reuses the last.
    pub widths: [usize; 3],
}

impl SegModelConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            in_channels: 3,
            classes,
            widths: [16, 32, 64],
        }
    }

    /// Channel count of the pre-head feature map.
    pub fn feature_channels(&self) -> usize {
        self.widths[0]
    }
}

/// He-uniform fan-in initialisation for a conv kernel.
pub(crate) fn he_kernel(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Small U-shaped encoder-decoder producing per-pixel class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Layers as (name, out, in, kernel).
fn layout(cfg: &SegModelConfig) -> Vec<(&'static str, usize, usize, usize)> {
    let [w1, w2, w3] = cfg.widths;
    vec![
        ("enc1", w1, cfg.in_channels, 3),
        ("enc2", w2, w1, 3),
        ("enc3", w3, w2, 3),
        ("mid", w3, w3, 3),
        ("dec3", w2, w3 + w3, 3),
        ("dec2", w1, w2 + w2, 3),
        ("dec1", w1, w1 + w1, 3),
        ("head", cfg.classes, w1, 1),
    ]
}

pub struct SegOutput {
    pub logits: Var,
    pub features: Var,
}

/// Feature-dropout request for a training forward pass.
pub struct FeatureDropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl SegModel {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 || config.in_channels == 0 || config.widths.contains(&0) {
            return Err(Error::config("model", format!("invalid model config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, out, inp, k) in layout(&config) {
            names.push(format!("{name}.weight"));
            params.push(he_kernel([out, inp, k, k], &mut rng));
            names.push(format!("{name}.bias"));
            params.push(Tensor::zeros(&[out]));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_tensors(&self) -> NamedTensors {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect()
    }

    /// Rebuilds a model from checkpoint tensors, inferring widths from shapes.
    /// Entries with other prefixes (e.g. `disc.`) are ignored.
    pub fn from_named_tensors(tensors: &NamedTensors) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing `{name}`")))
        };
        let enc1 = find("enc1.weight")?.shape().to_vec();
        let enc2 = find("enc2.weight")?.shape().to_vec();
        let enc3 = find("enc3.weight")?.shape().to_vec();
        let head = find("head.weight")?.shape().to_vec();
        if enc1.len() != 4 || enc2.len() != 4 || enc3.len() != 4 || head.len() != 4 {
            return Err(Error::Invalid("checkpoint kernels must be rank 4".into()));
        }
        let config = SegModelConfig {
            in_channels: enc1[1],
            classes: head[0],
            widths: [enc1[0], enc2[0], enc3[0]],
        };
        let mut model = Self::new(config, 0)?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    /// Registers parameters as tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [c, h, w]
                if c == self.config.in_channels
                    && h > 0
                    && w > 0
                    && h % SPATIAL_MULTIPLE == 0
                    && w % SPATIAL_MULTIPLE == 0 =>
            {
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "model input must be {}×H×W with H, W divisible by {SPATIAL_MULTIPLE}, got {shape:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Records the forward pass; `params` come from `bind`/`bind_frozen`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Var,
        mut dropout_req: Option<FeatureDropout<'_>>,
    ) -> Result<SegOutput> {
        self.check_input(tape.value(image).shape())?;
        let p = |i: usize| (params[2 * i], params[2 * i + 1]);
        let conv_relu = |tape: &mut Tape, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.conv2d(x, w, Some(b), 1, 1)?;
            tape.relu(y)
        };
        let mut perturb = |tape: &mut Tape, x: Var| -> Result<Var> {
            match dropout_req.as_mut() {
                Some(d) => dropout(tape, x, d.p, true, &mut d.rng),
                None => Ok(x),
            }
        };

        let e1 = conv_relu(tape, image, p(0))?;
        let x = tape.maxpool2(e1)?;
        let e2 = conv_relu(tape, x, p(1))?;
        let x = tape.maxpool2(e2)?;
        let e3 = conv_relu(tape, x, p(2))?;
        let x = tape.maxpool2(e3)?;
        let mid = conv_relu(tape, x, p(3))?;

        let e1 = perturb(tape, e1)?;
        let e2 = perturb(tape, e2)?;
        let e3 = perturb(tape, e3)?;
        let mid = perturb(tape, mid)?;

        let up = tape.upsample2(mid)?;
        let x = tape.concat(&[up, e3])?;
        let d3 = conv_relu(tape, x, p(4))?;
        let up = tape.upsample2(d3)?;
        let x = tape.concat(&[up, e2])?;
        let d2 = conv_relu(tape, x, p(5))?;
        let up = tape.upsample2(d2)?;
        let x = tape.concat(&[up, e1])?;
        let features = conv_relu(tape, x, p(6))?;

        let (hw, hb) = p(7);
        let logits = tape.conv2d(features, hw, Some(hb), 1, 0)?;
        Ok(SegOutput { logits, features })
    }

    /// Inference forward: `(logits, features)` as plain tensors.
    pub fn seg_forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape)?;
        let x = tape.constant(image.clone())?;
        let out = self.forward(&mut tape, &params, x, None)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }
}
