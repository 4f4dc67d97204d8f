//! Hyperparameter configuration, presets, and the flat key=value config
//! file format shared by the trainer and the synthetic generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agg::AggKind;
use crate::error::{AbgError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Abg,
    Habg,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Abg => "abg",
            Variant::Habg => "habg",
        }
    }

    pub fn from_str(s: &str) -> Option<Variant> {
        match s {
            "abg" => Some(Variant::Abg),
            "habg" => Some(Variant::Habg),
            _ => None,
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr0: f64,
    pub agg: AggKind,
    pub variant: Variant,
    /// Ablation switch: bipartite graphs replaced by identity pass-through.
    pub no_graph: bool,
    pub semi_ratio: f64,
    pub seed: u64,
    pub d_feat: usize,
    pub d_frame: usize,
    pub d_video: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub batchnorm: bool,
    pub rounds: usize,
    pub trn_cap: Option<usize>,
    /// Use the literal delta-weighted edge sum instead of mean BCE.
    pub edge_loss_literal: bool,
}

impl TrainConfig {
    /// Small preset: full runs complete in seconds.
    pub fn desk() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.3,
            lambda: 1.0,
            k: 5,
            epochs: 15,
            batch_source: 64,
            batch_target: 64,
            lr0: 0.04,
            agg: AggKind::Avg,
            variant: Variant::Abg,
            no_graph: false,
            semi_ratio: 0.0,
            seed: 0,
            d_feat: 32,
            d_frame: 16,
            d_video: 16,
            hidden: 16,
            classes: 4,
            dropout: 0.2,
            batchnorm: true,
            rounds: 1,
            trn_cap: None,
            edge_loss_literal: false,
        }
    }

    /// Published hyperparameters (2048-dim backbone features, hidden 512).
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 30,
            batch_source: 128,
            batch_target: 128,
            d_feat: 2048,
            d_frame: 512,
            d_video: 512,
            hidden: 512,
            classes: 12,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AbgError::ConfigError(m.to_string()));
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.semi_ratio) {
            return bad("semi_ratio must lie in [0, 1]");
        }
        if self.agg == AggKind::Trn && self.k < 2 {
            return bad("trn aggregation needs k >= 2");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, val) in kv {
            self.apply_one(key, val)?;
        }
        Ok(())
    }

    fn apply_one(&mut self, key: &str, val: &str) -> Result<()> {
        let err = || AbgError::ConfigError(format!("bad value `{val}` for key `{key}`"));
        macro_rules! num {
            () => {
                val.parse().map_err(|_| err())?
            };
        }
        match key {
            "alpha" => self.alpha = num!(),
            "beta" => self.beta = num!(),
            "gamma" => self.gamma = num!(),
            "lambda" => self.lambda = num!(),
            "k" => self.k = num!(),
            "epochs" => self.epochs = num!(),
            "bs" | "batch_source" => self.batch_source = num!(),
            "bt" | "batch_target" => self.batch_target = num!(),
            "lr" | "lr0" => self.lr0 = num!(),
            "agg" => self.agg = AggKind::from_str(val).ok_or_else(err)?,
            "variant" => self.variant = Variant::from_str(val).ok_or_else(err)?,
            "no_graph" => self.no_graph = val.parse().map_err(|_| err())?,
            "semi_ratio" => self.semi_ratio = num!(),
            "seed" => self.seed = num!(),
            "d_feat" => self.d_feat = num!(),
            "d_frame" => self.d_frame = num!(),
            "d_video" => self.d_video = num!(),
            "hidden" => self.hidden = num!(),
            "classes" => self.classes = num!(),
            "dropout" => self.dropout = num!(),
            "batchnorm" => self.batchnorm = val.parse().map_err(|_| err())?,
            "rounds" => self.rounds = num!(),
            "trn_cap" => self.trn_cap = Some(num!()),
            "edge_loss_literal" => self.edge_loss_literal = val.parse().map_err(|_| err())?,
            _ => return Err(AbgError::ConfigError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

/// Controls for the synthetic cross-domain generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShiftSpec {
    /// Rotation angle applied to target features in a random 2-plane.
    pub rot_angle: f64,
    /// Scale of the constant bias vector added to target features.
    pub bias_scale: f64,
    pub noise_source: f64,
    pub noise_target: f64,
    /// When set, class pairs share prototypes and differ only in segment
    /// order, so order-blind models are at chance between them.
    pub order_classes: bool,
    pub proto_scale: f64,
    pub temporal_scale: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rot_angle: std::f64::consts::FRAC_PI_3,
            bias_scale: 1.5,
            noise_source: 0.3,
            noise_target: 0.3,
            order_classes: false,
            proto_scale: 1.0,
            temporal_scale: 1.0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_source < 0.0 || self.noise_target < 0.0 {
            return Err(AbgError::InvalidSpec("noise levels must be non-negative".into()));
        }
        if self.proto_scale <= 0.0 {
            return Err(AbgError::InvalidSpec("proto_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, val) in kv {
            let err = || AbgError::ConfigError(format!("bad value `{val}` for key `{key}`"));
            match key.as_str() {
                "rot_angle" => self.rot_angle = val.parse().map_err(|_| err())?,
                "bias_scale" => self.bias_scale = val.parse().map_err(|_| err())?,
                "noise_source" => self.noise_source = val.parse().map_err(|_| err())?,
                "noise_target" => self.noise_target = val.parse().map_err(|_| err())?,
                "order_classes" => self.order_classes = val.parse().map_err(|_| err())?,
                "proto_scale" => self.proto_scale = val.parse().map_err(|_| err())?,
                "temporal_scale" => self.temporal_scale = val.parse().map_err(|_| err())?,
                _ => {
                    return Err(AbgError::ConfigError(format!("unknown spec key `{key}`")));
                }
            }
        }
        Ok(())
    }
}

/// Parse a flat `key = value` file: one pair per line, `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AbgError::ConfigError(format!("line {}: expected key=value", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_into_config() {
        let kv = parse_kv("alpha = 0.2\n# comment\nagg=trn\nepochs = 3\n").unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.apply_kv(&kv).unwrap();
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.agg, AggKind::Trn);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let kv = parse_kv("bogus = 1").unwrap();
        let mut cfg = TrainConfig::desk();
        assert!(matches!(cfg.apply_kv(&kv), Err(AbgError::ConfigError(_))));
    }

    #[test]
    fn validate_catches_bad_ratio() {
        let mut cfg = TrainConfig::desk();
        cfg.semi_ratio = 1.5;
        assert!(cfg.validate().is_err());
    }
}
