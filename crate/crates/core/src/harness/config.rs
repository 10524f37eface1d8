use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Mode;
use crate::error::{Error, Result};
use crate::losses::{ClsNorm, LossWeights};
use crate::model::ModelConfig;

/// Everything a training run depends on. Text form is one `key = value` per
/// line with `#` comments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub eta: f64,
    pub frames: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub margin: f64,
    /// Fixed variance of the Gaussian frame likelihood.
    pub recon_variance: f64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub hidden: usize,
    pub static_dim: usize,
    pub dynamic_dim: usize,
    pub relation_dim: usize,
    pub subsets_per_scale: usize,
    pub mode: Mode,
    pub exclusive_dynamic: bool,
    pub cls_norm: ClsNorm,
    pub checkpoint_every: usize,
    pub no_mi: bool,
    pub no_adv: bool,
    pub no_ctc: bool,
    pub no_cls: bool,
    pub no_pl: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 60,
            warmup_epochs: 10,
            eta: 0.93,
            frames: 8,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            margin: 1.0,
            recon_variance: 1.0,
            lr0: 1e-3,
            weight_decay: 1e-4,
            batch: 32,
            hidden: 128,
            static_dim: 16,
            dynamic_dim: 16,
            relation_dim: 128,
            subsets_per_scale: 3,
            mode: Mode::Image,
            exclusive_dynamic: false,
            cls_norm: ClsNorm::Contributing,
            checkpoint_every: 10,
            no_mi: false,
            no_adv: false,
            no_ctc: false,
            no_cls: false,
            no_pl: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::ConfigValue {
        key: key.into(),
        msg: format!("cannot parse `{raw}`"),
    })
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::ConfigValue {
            key: key.into(),
            msg: format!("expected true or false, got `{raw}`"),
        }),
    }
}

fn value_error(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: n + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, raw) = (key.trim(), raw.trim());
            cfg.set(key, raw).map_err(|e| match e {
                Error::ConfigParse { msg, .. } => Error::ConfigParse { line: n + 1, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, raw)?,
            "eta" => self.eta = parse_value(key, raw)?,
            "frames" => self.frames = parse_value(key, raw)?,
            "lambda1" => self.lambda1 = parse_value(key, raw)?,
            "lambda2" => self.lambda2 = parse_value(key, raw)?,
            "lambda3" => self.lambda3 = parse_value(key, raw)?,
            "lambda4" => self.lambda4 = parse_value(key, raw)?,
            "margin" => self.margin = parse_value(key, raw)?,
            "recon_variance" => self.recon_variance = parse_value(key, raw)?,
            "lr0" => self.lr0 = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "batch" => self.batch = parse_value(key, raw)?,
            "hidden" => self.hidden = parse_value(key, raw)?,
            "static_dim" => self.static_dim = parse_value(key, raw)?,
            "dynamic_dim" => self.dynamic_dim = parse_value(key, raw)?,
            "relation_dim" => self.relation_dim = parse_value(key, raw)?,
            "subsets_per_scale" => self.subsets_per_scale = parse_value(key, raw)?,
            "mode" => {
                self.mode = raw.parse().map_err(|_| {
                    value_error(key, format!("expected image or feature, got `{raw}`"))
                })?
            }
            "exclusive_dynamic" => self.exclusive_dynamic = parse_bool(key, raw)?,
            "cls_norm" => {
                self.cls_norm = match raw {
                    "contributing" => ClsNorm::Contributing,
                    "all" => ClsNorm::AllRows,
                    _ => {
                        return Err(value_error(
                            key,
                            format!("expected contributing or all, got `{raw}`"),
                        ))
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_value(key, raw)?,
            "no_mi" => self.no_mi = parse_bool(key, raw)?,
            "no_adv" => self.no_adv = parse_bool(key, raw)?,
            "no_ctc" => self.no_ctc = parse_bool(key, raw)?,
            "no_cls" => self.no_cls = parse_bool(key, raw)?,
            "no_pl" => self.no_pl = parse_bool(key, raw)?,
            _ => {
                return Err(Error::ConfigParse {
                    line: 0,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(value_error("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(value_error(
                "warmup_epochs",
                format!(
                    "must be below epochs ({} >= {})",
                    self.warmup_epochs, self.epochs
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(value_error(
                "eta",
                format!("must lie in [0, 1], got {}", self.eta),
            ));
        }
        if self.frames < 2 {
            return Err(value_error("frames", "need at least 2 frames"));
        }
        if self.batch < 4 || !self.batch.is_multiple_of(2) {
            return Err(value_error("batch", "must be even and at least 4"));
        }
        for (key, v) in [
            ("lr0", self.lr0),
            ("weight_decay", self.weight_decay),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(value_error(
                    key,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if !(self.recon_variance > 0.0 && self.recon_variance.is_finite()) {
            return Err(value_error(
                "recon_variance",
                format!("must be finite and positive, got {}", self.recon_variance),
            ));
        }
        for (key, v) in [
            ("hidden", self.hidden),
            ("static_dim", self.static_dim),
            ("dynamic_dim", self.dynamic_dim),
            ("relation_dim", self.relation_dim),
            ("subsets_per_scale", self.subsets_per_scale),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(value_error(key, "must be positive"));
            }
        }
        self.raw_weights().validate()
    }

    fn raw_weights(&self) -> LossWeights {
        LossWeights {
            mi: self.lambda1,
            adv: self.lambda2,
            ctc: self.lambda3,
            cls: self.lambda4,
            margin: self.margin,
        }
    }

    /// Loss weights after the ablation flags have zeroed their terms.
    pub fn weights(&self) -> LossWeights {
        let w = self.raw_weights();
        let off = |flag: bool, v: f64| if flag { 0.0 } else { v };
        LossWeights {
            mi: off(self.no_mi, w.mi),
            adv: off(self.no_adv, w.adv),
            ctc: off(self.no_ctc, w.ctc),
            cls: off(self.no_cls, w.cls),
            margin: w.margin,
        }
    }

    /// Whether target pseudo-labels join the task loss from `epoch` on.
    pub fn pseudo_labels_at(&self, epoch: usize) -> bool {
        !self.no_pl && self.weights().cls > 0.0 && epoch >= self.warmup_epochs
    }

    pub fn model_config(&self, frame_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            frame_dim,
            frames: self.frames,
            hidden: self.hidden,
            static_dim: self.static_dim,
            dynamic_dim: self.dynamic_dim,
            relation_dim: self.relation_dim,
            classes,
            subsets_per_scale: self.subsets_per_scale,
            exclusive_dynamic: self.exclusive_dynamic,
            sigmoid_output: self.mode == Mode::Image,
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").unwrap();
        };
        kv("seed", &self.seed);
        kv("epochs", &self.epochs);
        kv("warmup_epochs", &self.warmup_epochs);
        kv("eta", &self.eta);
        kv("frames", &self.frames);
        kv("lambda1", &self.lambda1);
        kv("lambda2", &self.lambda2);
        kv("lambda3", &self.lambda3);
        kv("lambda4", &self.lambda4);
        kv("margin", &self.margin);
        kv("recon_variance", &self.recon_variance);
        kv("lr0", &self.lr0);
        kv("weight_decay", &self.weight_decay);
        kv("batch", &self.batch);
        kv("hidden", &self.hidden);
        kv("static_dim", &self.static_dim);
        kv("dynamic_dim", &self.dynamic_dim);
        kv("relation_dim", &self.relation_dim);
        kv("subsets_per_scale", &self.subsets_per_scale);
        kv("mode", &self.mode);
        kv("exclusive_dynamic", &self.exclusive_dynamic);
        let norm = match self.cls_norm {
            ClsNorm::Contributing => "contributing",
            ClsNorm::AllRows => "all",
        };
        kv("cls_norm", &norm);
        kv("checkpoint_every", &self.checkpoint_every);
        kv("no_mi", &self.no_mi);
        kv("no_adv", &self.no_adv);
        kv("no_ctc", &self.no_ctc);
        kv("no_cls", &self.no_cls);
        kv("no_pl", &self.no_pl);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# nothing\n\n   \n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn out_of_range_eta_names_the_key() {
        match RunConfig::parse("eta = 1.5") {
            Err(Error::ConfigValue { key, .. }) => assert_eq!(key, "eta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("seed = 1\n\nlamda2 = 3\n") {
            Err(Error::ConfigParse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("lamda2"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("seed 1"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse(
            "lambda2 = 10 # stronger alignment\nno_pl = true\ncls_norm = all\nmode = feature",
        )
        .unwrap();
        assert_eq!(cfg.lambda2, 10.0);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn invariants_are_checked() {
        assert!(RunConfig::parse("epochs = 5\nwarmup_epochs = 5").is_err());
        assert!(RunConfig::parse("lambda3 = -1").is_err());
        assert!(RunConfig::parse("batch = 7").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
    }

    #[test]
    fn ablation_flags_zero_weights() {
        let cfg = RunConfig::parse("no_adv = true\nno_cls = true").unwrap();
        let w = cfg.weights();
        assert_eq!((w.mi, w.adv, w.ctc, w.cls), (1.0, 0.0, 1.0, 0.0));
        assert!(!cfg.pseudo_labels_at(50));
        let cfg = RunConfig::default();
        assert!(!cfg.pseudo_labels_at(9));
        assert!(cfg.pseudo_labels_at(10));
    }
}
