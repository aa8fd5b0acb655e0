//! Training configuration as a flat set of dotted `key=value` entries.

use std::fmt::Write as _;

use crate::deform::{LifecycleMode, DEFAULT_BASIS};
use crate::error::{Error, Result};
use crate::motion::{MaskSettings, DEFAULT_INTERVAL};

use super::adam::AdamSettings;
use super::densify::DensifySettings;
use super::loss::LossSettings;

/// Per-group multipliers applied to the base learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrMultipliers {
    pub means: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacities: f64,
    pub colors: f64,
    pub field: f64,
    /// Opacity (lifecycle) head of the field; replaces `field` for that group.
    pub lifecycle: f64,
    /// Learning rate at the last iteration relative to the first; the rate
    /// decays exponentially in between.
    pub final_ratio: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            means: 1.0,
            scales: 1.0,
            rotations: 1.0,
            opacities: 1.0,
            colors: 1.0,
            field: 1.0,
            lifecycle: 1.0,
            final_ratio: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr: LrMultipliers,
    pub adam: AdamSettings,
    pub loss: LossSettings,
    pub basis: usize,
    pub lifecycle: LifecycleMode,
    /// Iterations at the start during which every Gaussian is rendered canonically.
    pub deform_warmup: usize,
    pub amhs: bool,
    pub grid_n: usize,
    pub mask: MaskSettings,
    pub mask_interval: f64,
    /// Number of training frames sampled for region statistics.
    pub mask_samples: usize,
    pub densify: DensifySettings,
    pub init_stride: usize,
    /// Extra training frames whose disoccluded pixels seed more Gaussians.
    pub init_extra_frames: usize,
    pub normalize_depth: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1.6e-3,
            lr: LrMultipliers::default(),
            adam: AdamSettings::default(),
            loss: LossSettings::default(),
            basis: DEFAULT_BASIS,
            lifecycle: LifecycleMode::Additive,
            deform_warmup: 300,
            amhs: true,
            grid_n: 4,
            mask: MaskSettings::default(),
            mask_interval: DEFAULT_INTERVAL,
            mask_samples: 10,
            densify: DensifySettings::default(),
            init_stride: 2,
            init_extra_frames: 3,
            normalize_depth: false,
            seed: 0,
        }
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "on" | "1" | "yes" => Some(true),
            "false" | "off" | "0" | "no" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for LifecycleMode {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(value.trim()).ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $ty:ty, $doc:literal;)*) => {
        impl TrainConfig {
            /// Every key with its description, in display order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$(($key, $doc)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value::<$ty>(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(ConfigValue::render(&self.$($field).+)),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "iterations" => iterations: usize, "optimization steps";
    "learning_rate" => learning_rate: f64, "base Adam learning rate";
    "lr.means" => lr.means: f64, "learning-rate multiplier for means";
    "lr.scales" => lr.scales: f64, "learning-rate multiplier for log-scales";
    "lr.rotations" => lr.rotations: f64, "learning-rate multiplier for quaternions";
    "lr.opacities" => lr.opacities: f64, "learning-rate multiplier for raw opacities";
    "lr.colors" => lr.colors: f64, "learning-rate multiplier for colors";
    "lr.field" => lr.field: f64, "learning-rate multiplier for deformation-field tensors";
    "lr.lifecycle" => lr.lifecycle: f64, "learning-rate multiplier for the opacity (lifecycle) head of the field";
    "lr.final_ratio" => lr.final_ratio: f64, "final learning rate as a fraction of the initial one (exponential decay)";
    "adam.beta1" => adam.beta1: f64, "first-moment decay";
    "adam.beta2" => adam.beta2: f64, "second-moment decay";
    "adam.eps" => adam.eps: f64, "denominator epsilon";
    "loss.lambda_rank" => loss.lambda_rank: f64, "weight of the depth ranking loss";
    "loss.depth_weight" => loss.depth_weight: f64, "weight of the depth L1 loss";
    "loss.rank_pairs" => loss.rank_pairs: usize, "sampled pixel pairs per step for the ranking loss";
    "loss.rank_margin" => loss.rank_margin: f64, "ranking depth margin as a fraction of zfar";
    "deform.basis" => basis: usize, "Gaussian basis functions per attribute";
    "deform.lifecycle" => lifecycle: LifecycleMode, "lifecycle opacity mode: additive, multiplicative or none";
    "deform.warmup" => deform_warmup: usize, "initial iterations rendered without deformation";
    "amhs.enabled" => amhs: bool, "adaptive motion hierarchy on or off";
    "amhs.grid_n" => grid_n: usize, "initial regions per image side";
    "amhs.delta1" => mask.delta1: f64, "average-deformation threshold";
    "amhs.delta2" => mask.delta2: f64, "dynamic/static loss threshold (8-bit MAE)";
    "amhs.delta3" => mask.delta3: f64, "canonical-loss growth that returns a static region to dynamic (8-bit MAE)";
    "amhs.min_side" => mask.min_side: usize, "smallest region side in pixels";
    "amhs.interval" => mask_interval: f64, "initial mask update interval in iterations";
    "amhs.samples" => mask_samples: usize, "training frames sampled for region statistics";
    "amhs.use_deformation" => mask.use_deformation_criterion: bool, "use the average-deformation criterion";
    "amhs.use_loss" => mask.use_loss_criterion: bool, "use the rendering-loss criterion";
    "amhs.split" => mask.split_conflicts: bool, "split conflicting regions (off: conflicts become static)";
    "amhs.adaptive_interval" => mask.adaptive_interval: bool, "rescale the update interval by the loss ratio";
    "amhs.factor_min" => mask.factor_min: f64, "lower clamp of the interval factor";
    "amhs.factor_max" => mask.factor_max: f64, "upper clamp of the interval factor";
    "densify.enabled" => densify.enabled: bool, "adaptive density control";
    "densify.from" => densify.from: usize, "first iteration of density control";
    "densify.until" => densify.until: usize, "last iteration of density control";
    "densify.interval" => densify.interval: usize, "iterations between density-control passes";
    "densify.grad_threshold" => densify.grad_threshold: f64, "mean screen-space gradient norm that triggers clone or split";
    "densify.scale_threshold" => densify.scale_threshold: f64, "largest scale, as a fraction of scene extent, still cloned rather than split";
    "densify.prune_opacity" => densify.prune_opacity: f64, "canonical opacity below which Gaussians are pruned (lifecycle none)";
    "init.stride" => init_stride: usize, "pixel stride for back-projection";
    "init.extra_frames" => init_extra_frames: usize, "additional frames scanned for disoccluded pixels";
    "raster.normalize_depth" => normalize_depth: bool, "divide rendered depth by accumulated opacity";
    "seed" => seed: u64, "seed for initialization and pair sampling";
}

impl TrainConfig {
    /// `(key, value)` pairs for every key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|(k, _)| (*k, self.get(k).expect("listed key")))
            .collect()
    }

    /// Text suitable for `effective-config.txt` and for [`Self::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// One line per key with its default, for `--help`.
    pub fn help_text() -> String {
        let d = Self::default();
        let width = Self::KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, doc) in Self::KEYS {
            let _ = writeln!(s, "  {k:<width$}  {doc} [default: {}]", d.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr.final_ratio", self.lr.final_ratio),
            ("adam.eps", self.adam.eps),
            ("amhs.delta1", self.mask.delta1),
            ("amhs.delta2", self.mask.delta2),
            ("amhs.delta3", self.mask.delta3),
            ("amhs.factor_min", self.mask.factor_min),
            ("loss.rank_margin", self.loss.rank_margin),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("loss.lambda_rank", self.loss.lambda_rank),
            ("loss.depth_weight", self.loss.depth_weight),
            ("lr.means", self.lr.means),
            ("lr.scales", self.lr.scales),
            ("lr.rotations", self.lr.rotations),
            ("lr.opacities", self.lr.opacities),
            ("lr.colors", self.lr.colors),
            ("lr.field", self.lr.field),
            ("lr.lifecycle", self.lr.lifecycle),
            ("densify.grad_threshold", self.densify.grad_threshold),
            ("densify.scale_threshold", self.densify.scale_threshold),
            ("densify.prune_opacity", self.densify.prune_opacity),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("`{k}` must be ≥ 0, got {v}")));
            }
        }
        if !(self.adam.beta1 >= 0.0 && self.adam.beta1 < 1.0 && self.adam.beta2 >= 0.0 && self.adam.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.mask.factor_max < self.mask.factor_min {
            return Err(Error::Config("`amhs.factor_max` is below `amhs.factor_min`".into()));
        }
        let at_least_one = [
            ("deform.basis", self.basis),
            ("amhs.grid_n", self.grid_n),
            ("amhs.samples", self.mask_samples),
            ("amhs.min_side", self.mask.min_side),
            ("init.stride", self.init_stride),
            ("densify.interval", self.densify.interval),
        ];
        for (k, v) in at_least_one {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be ≥ 1")));
            }
        }
        if !(self.mask_interval >= 1.0) {
            return Err(Error::Config("`amhs.interval` must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Decay multiplier at zero-based iteration `it`.
    pub fn lr_decay(&self, it: usize) -> f64 {
        let span = self.iterations.saturating_sub(1).max(1) as f64;
        self.lr.final_ratio.powf(it.min(self.iterations) as f64 / span)
    }

    /// Initial learning rate for each tensor in [`crate::params::TENSOR_NAMES`] order.
    pub fn tensor_learning_rates(&self) -> [f64; 17] {
        let base = self.learning_rate;
        let mut lrs = [base * self.lr.field; 17];
        lrs[0] = base * self.lr.means;
        lrs[1] = base * self.lr.scales;
        lrs[2] = base * self.lr.rotations;
        lrs[3] = base * self.lr.opacities;
        lrs[4] = base * self.lr.colors;
        lrs[14..].fill(base * self.lr.lifecycle);
        lrs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.iterations, 3000);
        assert_eq!(c.learning_rate, 1.6e-3);
        assert_eq!(c.loss.lambda_rank, 2e-4);
        assert_eq!(c.basis, 20);
        assert_eq!(c.grid_n, 4);
        assert_eq!((c.mask.delta1, c.mask.delta2, c.mask.delta3), (0.05, 0.5, 1.0));
        assert_eq!(c.mask_interval, 500.0);
        assert!(!c.densify.enabled);
        assert!(c.amhs);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_text() {
        let mut c = TrainConfig::default();
        c.set("deform.lifecycle", "none").unwrap();
        c.set("amhs.split", "off").unwrap();
        c.set("learning_rate", "0.01").unwrap();
        c.set("seed", "42").unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.lifecycle, LifecycleMode::None);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("iterations", "-3"), Err(Error::Config(_))));
        assert!(matches!(c.set("learning_rate", "nan"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("amhs.delta1=0").is_err());
        assert!(TrainConfig::parse("just words").is_err());
        assert!(
            TrainConfig::parse("# comment\n\niterations = 5 # trailing\n")
                .unwrap()
                .iterations
                == 5
        );
    }

    #[test]
    fn help_lists_every_key() {
        let help = TrainConfig::help_text();
        for (k, _) in TrainConfig::KEYS {
            assert!(help.contains(k), "{k}");
        }
        assert!(help.contains("[default: 3000]"));
    }
}
