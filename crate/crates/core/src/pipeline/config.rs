use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, LrSchedule};

/// Which stages of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_residual: bool,
    pub use_constraintor: bool,
    /// Anomaly-invariant term on top of the two-sphere loss. Ignored when
    /// the constraintor is off.
    pub use_ai_occ: bool,
    pub use_fdm: bool,
    pub use_mac: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        use_residual: true,
        use_constraintor: true,
        use_ai_occ: true,
        use_fdm: true,
        use_mac: true,
    };

    pub const NONE: Self = Self {
        use_residual: false,
        use_constraintor: false,
        use_ai_occ: false,
        use_fdm: false,
        use_mac: false,
    };

    /// The rows of the framework ablation table, `"3.1"` to `"3.8"`.
    pub fn preset(id: &str) -> Result<Self> {
        let (r, c, ai, f, m) = match id {
            "3.1" => (false, false, false, false, false),
            "3.2" => (true, false, false, false, false),
            "3.3" => (false, false, false, true, false),
            "3.4" => (true, false, false, true, false),
            "3.5" => (true, true, true, false, false),
            "3.6" => (true, true, false, false, false),
            "3.7" => (true, true, true, true, false),
            "3.8" => (true, true, true, true, true),
            other => return Err(Error::Config(format!("unknown ablation preset {other:?}"))),
        };
        Ok(Self {
            use_residual: r,
            use_constraintor: c,
            use_ai_occ: ai,
            use_fdm: f,
            use_mac: m,
        })
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    /// Constraintor weight penalty.
    pub lambda: f64,
    /// Barrier precision.
    pub t: f64,
    /// Mean of the abnormal base distribution along every axis.
    pub a: f64,
    pub codebook_size: usize,
    pub fdm_alpha: f64,
    pub vq_beta: f64,
    pub focal_gamma: f64,
    pub coupling_blocks: usize,
    pub clamp: f64,
    /// Few-shot reference images per class.
    pub n_fs: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-5,
            weight_decay: 5e-4,
            milestones: vec![70, 90],
            lambda: 1e-3,
            t: 1.0,
            a: 1.0,
            codebook_size: 1536,
            fdm_alpha: 0.4,
            vq_beta: 0.25,
            focal_gamma: 2.0,
            coupling_blocks: 10,
            clamp: 1.9,
            n_fs: 4,
            seed: 42,
            ablation: Ablation::FULL,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; absent keys keep
    /// their defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: {key} given twice", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "lambda" => self.lambda = parse_value(key, value)?,
            "t" => self.t = parse_value(key, value)?,
            "a" => self.a = parse_value(key, value)?,
            "codebook_size" => self.codebook_size = parse_value(key, value)?,
            "fdm_alpha" => self.fdm_alpha = parse_value(key, value)?,
            "vq_beta" => self.vq_beta = parse_value(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_value(key, value)?,
            "coupling_blocks" => self.coupling_blocks = parse_value(key, value)?,
            "clamp" => self.clamp = parse_value(key, value)?,
            "n_fs" => self.n_fs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "use_residual" => self.ablation.use_residual = parse_bool(key, value)?,
            "use_constraintor" => self.ablation.use_constraintor = parse_bool(key, value)?,
            "use_ai_occ" => self.ablation.use_ai_occ = parse_bool(key, value)?,
            "use_fdm" => self.ablation.use_fdm = parse_bool(key, value)?,
            "use_mac" => self.ablation.use_mac = parse_bool(key, value)?,
            "ablation" => self.ablation = Ablation::preset(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr must be positive and weight_decay non-negative");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones must be strictly increasing");
        }
        if !(self.lambda >= 0.0) || !(self.t > 0.0) || !self.a.is_finite() {
            return fail("lambda must be non-negative, t positive and a finite");
        }
        if self.codebook_size == 0 {
            return fail("codebook_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.fdm_alpha) || !(self.vq_beta > 0.0) {
            return fail("fdm_alpha must lie in [0, 1] and vq_beta be positive");
        }
        if !(self.focal_gamma >= 0.0) || !(self.clamp > 0.0) {
            return fail("focal_gamma must be non-negative and clamp positive");
        }
        if self.n_fs == 0 {
            return fail("n_fs must be positive");
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.ablation;
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", format!("{:e}", self.lr));
        put("weight_decay", format!("{:e}", self.weight_decay));
        put("milestones", milestones.join(","));
        put("lambda", format!("{:e}", self.lambda));
        put("t", self.t.to_string());
        put("a", self.a.to_string());
        put("codebook_size", self.codebook_size.to_string());
        put("fdm_alpha", self.fdm_alpha.to_string());
        put("vq_beta", self.vq_beta.to_string());
        put("focal_gamma", self.focal_gamma.to_string());
        put("coupling_blocks", self.coupling_blocks.to_string());
        put("clamp", self.clamp.to_string());
        put("n_fs", self.n_fs.to_string());
        put("seed", self.seed.to_string());
        put("use_residual", b.use_residual.to_string());
        put("use_constraintor", b.use_constraintor.to_string());
        put("use_ai_occ", b.use_ai_occ.to_string());
        put("use_fdm", b.use_fdm.to_string());
        put("use_mac", b.use_mac.to_string());
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, 0.1, self.milestones.clone())
    }

    /// Whether the constraintor's anomaly-invariant term is in effect.
    pub fn ai_occ_active(&self) -> bool {
        self.ablation.use_constraintor && self.ablation.use_ai_occ
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.milestones, vec![70, 90]);
        assert_eq!(cfg.codebook_size, 1536);
        assert_eq!(cfg.ablation, Ablation::FULL);
    }

    #[test]
    fn keys_override_defaults() {
        let cfg = RunConfig::parse("epochs = 3 # short\nlr=1e-3\nmilestones = \nuse_fdm = false\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 1e-3);
        assert!(cfg.milestones.is_empty());
        assert!(!cfg.ablation.use_fdm);
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "epoch = 3",
            "epochs 3",
            "epochs = -1",
            "use_mac = yes",
            "fdm_alpha = 1.5",
            "milestones = 90,70",
            "seed = 1\nseed = 2",
            "ablation = 4.0",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn presets_follow_the_table() {
        assert_eq!(Ablation::preset("3.1").unwrap(), Ablation::NONE);
        assert_eq!(Ablation::preset("3.8").unwrap(), Ablation::FULL);
        let cfg = RunConfig::parse("ablation = 3.6").unwrap();
        assert!(cfg.ablation.use_constraintor && !cfg.ablation.use_ai_occ);
        assert!(!cfg.ai_occ_active());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 7;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    proptest! {
        #[test]
        fn text_round_trips(
            epochs in 0usize..500,
            lr in 1e-8f64..1.0,
            alpha in 0.0f64..=1.0,
            gamma in 0.0f64..5.0,
            seed in any::<u64>(),
            flags in any::<[bool; 5]>(),
            milestones in proptest::collection::btree_set(1usize..200, 0..4),
        ) {
            let cfg = RunConfig {
                epochs,
                lr,
                fdm_alpha: alpha,
                focal_gamma: gamma,
                seed,
                milestones: milestones.into_iter().collect(),
                ablation: Ablation {
                    use_residual: flags[0],
                    use_constraintor: flags[1],
                    use_ai_occ: flags[2],
                    use_fdm: flags[3],
                    use_mac: flags[4],
                },
                ..RunConfig::default()
            };
            prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
