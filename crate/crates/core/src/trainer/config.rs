use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::numerics::{DEFAULT_DROPOUT, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Supervised,
    #[serde(alias = "fixmatch")]
    FixMatch,
    #[serde(alias = "unimatch_lite", alias = "unimatch")]
    UnimatchLite,
    Ours,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Supervised => "supervised",
            Variant::FixMatch => "fixmatch",
            Variant::UnimatchLite => "unimatch-lite",
            Variant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Variant::Supervised),
            "fixmatch" | "fix-match" => Ok(Variant::FixMatch),
            "unimatch-lite" | "unimatch_lite" | "unimatch" => Ok(Variant::UnimatchLite),
            "ours" => Ok(Variant::Ours),
            _ => Err(Error::config("variant", format!("unknown variant `{s}`"))),
        }
    }
}

/// How the strong unlabeled view is mixed before the consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrongMix {
    None,
    Cutmix,
    Classmix,
    Supmix,
}

/// Which model output the discriminator sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SufdTap {
    #[default]
    Features,
    Logits,
}

/// Denominator of the unsupervised cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnsupNorm {
    /// Mean over pixels that carry a target (confident or pasted).
    #[default]
    Confident,
    /// Sum over target pixels divided by every pixel of the strong views.
    AllPixels,
}

pub const DEFAULT_LAMBDA_U: f64 = 1.0;
pub const DEFAULT_LAMBDA_ADV: f64 = 0.01;

mod defaults {
    pub fn epochs() -> u64 {
        100
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn lr_init() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        super::DEFAULT_MOMENTUM
    }
    pub fn weight_decay() -> f64 {
        super::DEFAULT_WEIGHT_DECAY
    }
    pub fn tau() -> f64 {
        0.95
    }
    pub fn mix_p() -> f64 {
        0.5
    }
    pub fn feature_dropout() -> f64 {
        super::DEFAULT_DROPOUT
    }
    pub fn widths() -> [usize; 3] {
        [16, 32, 64]
    }
    pub fn disc_width() -> usize {
        16
    }
}

/// Training hyperparameters. Unset toggles and loss weights take the
/// variant's defaults on [`TrainConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "defaults::epochs")]
    pub epochs: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_init")]
    pub lr_init: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default)]
    pub lambda_u: Option<f64>,
    #[serde(default)]
    pub lambda_adv: Option<f64>,
    /// `[height, width]`; defaults to the image size.
    #[serde(default)]
    pub crop_size: Option<[usize; 2]>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strong_mix: Option<StrongMix>,
    #[serde(default)]
    pub use_sufd: Option<bool>,
    /// Per-sample probability of applying the strong mix.
    #[serde(default = "defaults::mix_p")]
    pub mix_p: f64,
    #[serde(default = "defaults::feature_dropout")]
    pub feature_dropout: f64,
    #[serde(default)]
    pub unsup_norm: UnsupNorm,
    #[serde(default)]
    pub sufd_tap: SufdTap,
    #[serde(default)]
    pub disc_per_image: bool,
    #[serde(default = "defaults::disc_width")]
    pub disc_width: usize,
    #[serde(default = "defaults::widths")]
    pub widths: [usize; 3],
    /// Background class, never pasted by SupMix.
    #[serde(default)]
    pub background: u8,
    /// Evaluate on the test split every this many epochs (0 = never).
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr_init: defaults::lr_init(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            tau: defaults::tau(),
            lambda_u: None,
            lambda_adv: None,
            crop_size: None,
            seed: 0,
            strong_mix: None,
            use_sufd: None,
            mix_p: defaults::mix_p(),
            feature_dropout: defaults::feature_dropout(),
            unsup_norm: UnsupNorm::default(),
            sufd_tap: SufdTap::default(),
            disc_per_image: false,
            disc_width: defaults::disc_width(),
            widths: defaults::widths(),
            background: 0,
            eval_every: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Fills variant defaults and checks every invariant.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let v = self.variant;
        let (lu, mix, sufd) = match v {
            Variant::Supervised => (0.0, StrongMix::None, false),
            Variant::FixMatch | Variant::UnimatchLite => (DEFAULT_LAMBDA_U, StrongMix::Cutmix, false),
            Variant::Ours => (DEFAULT_LAMBDA_U, StrongMix::Supmix, true),
        };
        let lambda_u = self.lambda_u.unwrap_or(lu);
        let use_sufd = self.use_sufd.unwrap_or(sufd);
        let lambda_adv = self.lambda_adv.unwrap_or(if use_sufd { DEFAULT_LAMBDA_ADV } else { 0.0 });
        let strong_mix = self.strong_mix.unwrap_or(mix);

        let bad = |k: &str, m: String| Err(Error::config(k, m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", format!("{} outside (0, 1]", self.tau));
        }
        for (k, x) in [("lambda_u", lambda_u), ("lambda_adv", lambda_adv)] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(k, format!("{x} must be a finite non-negative weight"));
            }
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mix_p) {
            return bad("mix_p", "must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return bad("feature_dropout", "must be in [0, 1)".into());
        }
        if self.widths.contains(&0) || self.disc_width == 0 {
            return bad("widths", "layer widths must be positive".into());
        }
        if let Some([h, w]) = self.crop_size {
            if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
                return bad("crop_size", "extents must be positive multiples of 8".into());
            }
        }
        self.augment.validate()?;
        if v == Variant::Supervised {
            if lambda_u != 0.0 {
                return bad("lambda_u", "supervised variant has no unsupervised term".into());
            }
            if lambda_adv != 0.0 {
                return bad("lambda_adv", "supervised variant has no adversarial term".into());
            }
            if use_sufd {
                return bad("use_sufd", "supervised variant has no discriminator".into());
            }
            if strong_mix != StrongMix::None {
                return bad("strong_mix", "supervised variant has no strong view".into());
            }
        }
        if matches!(v, Variant::FixMatch | Variant::UnimatchLite) && use_sufd {
            return bad("use_sufd", format!("{} has no discriminator; use variant `ours`", v.name()));
        }
        if !use_sufd && lambda_adv != 0.0 {
            return bad("lambda_adv", "set without use_sufd".into());
        }
        Ok(ResolvedConfig {
            base: self.clone(),
            lambda_u,
            lambda_adv,
            strong_mix,
            use_sufd,
        })
    }

    /// Copy with every optional toggle filled by its resolved value.
    pub fn resolved(&self) -> Result<TrainConfig> {
        let r = self.resolve()?;
        let mut c = self.clone();
        c.lambda_u = Some(r.lambda_u);
        c.lambda_adv = Some(r.lambda_adv);
        c.strong_mix = Some(r.strong_mix);
        c.use_sufd = Some(r.use_sufd);
        Ok(c)
    }

    /// Resolved values written back, for recording a run.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved()?).map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// A validated config with every toggle decided.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub base: TrainConfig,
    pub lambda_u: f64,
    pub lambda_adv: f64,
    pub strong_mix: StrongMix,
    pub use_sufd: bool,
}

impl std::ops::Deref for ResolvedConfig {
    type Target = TrainConfig;
    fn deref(&self) -> &TrainConfig {
        &self.base
    }
}

/// The five ablation columns.
pub const ABLATION_PRESETS: [&str; 5] = ["cutmix", "classmix", "supmix", "sufd", "ours"];

/// Applies an ablation preset on top of `base`.
pub fn ablation_preset(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    c.lambda_u = None;
    c.lambda_adv = None;
    let (variant, mix, sufd) = match name {
        "cutmix" => (Variant::FixMatch, StrongMix::Cutmix, false),
        "classmix" => (Variant::FixMatch, StrongMix::Classmix, false),
        "supmix" => (Variant::Ours, StrongMix::Supmix, false),
        "sufd" => (Variant::Ours, StrongMix::Cutmix, true),
        "ours" => (Variant::Ours, StrongMix::Supmix, true),
        _ => return Err(Error::config("preset", format!("unknown ablation preset `{name}`"))),
    };
    c.variant = variant;
    c.strong_mix = Some(mix);
    c.use_sufd = Some(sufd);
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<ResolvedConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn variant_defaults() {
        let s = TrainConfig::new(Variant::Supervised).resolve().unwrap();
        assert_eq!((s.lambda_u, s.lambda_adv, s.use_sufd), (0.0, 0.0, false));
        let f = TrainConfig::new(Variant::FixMatch).resolve().unwrap();
        assert_eq!((f.lambda_u, f.strong_mix), (1.0, StrongMix::Cutmix));
        let o = TrainConfig::new(Variant::Ours).resolve().unwrap();
        assert_eq!((o.lambda_u, o.lambda_adv, o.strong_mix, o.use_sufd), (1.0, 0.01, StrongMix::Supmix, true));
    }

    #[test]
    fn invariants_name_the_key() {
        let mut c = TrainConfig::new(Variant::Supervised);
        c.lambda_adv = Some(0.1);
        assert_eq!(key_of(c.resolve()), "lambda_adv");
        let mut c = TrainConfig::new(Variant::Ours);
        c.tau = 1.0 + 1e-9;
        assert_eq!(key_of(c.resolve()), "tau");
        c.tau = 1.0;
        assert!(c.resolve().is_ok());
        let mut c = TrainConfig::new(Variant::FixMatch);
        c.use_sufd = Some(true);
        assert_eq!(key_of(c.resolve()), "use_sufd");
        let mut c = TrainConfig::new(Variant::Ours);
        c.lambda_u = Some(-1.0);
        assert_eq!(key_of(c.resolve()), "lambda_u");
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let ok: TrainConfig = toml::from_str("variant = \"ours\"\nepochs = 3\n").unwrap();
        assert_eq!(ok.epochs, 3);
        assert!(toml::from_str::<TrainConfig>("variant = \"ours\"\nepoch = 3\n").is_err());
    }

    #[test]
    fn presets_are_the_ablation_columns() {
        let base = TrainConfig::new(Variant::Supervised);
        let got: Vec<_> = ABLATION_PRESETS
            .iter()
            .map(|p| {
                let r = ablation_preset(&base, p).unwrap().resolve().unwrap();
                (r.strong_mix, r.use_sufd)
            })
            .collect();
        assert_eq!(
            got,
            vec![
                (StrongMix::Cutmix, false),
                (StrongMix::Classmix, false),
                (StrongMix::Supmix, false),
                (StrongMix::Cutmix, true),
                (StrongMix::Supmix, true),
            ]
        );
        assert!(ablation_preset(&base, "mixup").is_err());
    }

    #[test]
    fn resolved_toml_roundtrips() {
        let c = TrainConfig::new(Variant::Ours);
        let text = c.resolved_toml().unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.resolve().unwrap().lambda_adv, 0.01);
    }
}
