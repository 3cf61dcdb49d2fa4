//! Stage plans, the warmup-stable-decay schedule and key=value config files.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    MatrixOrientation = 1,
    HiddenStateAlignment = 2,
    KnowledgeDistillation = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [
        Stage::MatrixOrientation,
        Stage::HiddenStateAlignment,
        Stage::KnowledgeDistillation,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::MatrixOrientation),
            2 => Ok(Stage::HiddenStateAlignment),
            3 => Ok(Stage::KnowledgeDistillation),
            _ => Err(Error::Config(format!("unknown stage {n}"))),
        }
    }

    /// Share of the total token budget, from the 300M : 2.7B : 5B split.
    pub fn token_share(self) -> f64 {
        match self {
            Stage::MatrixOrientation => 0.3 / 8.0,
            Stage::HiddenStateAlignment => 2.7 / 8.0,
            Stage::KnowledgeDistillation => 5.0 / 8.0,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad stage `{s}`")))?;
        Stage::from_number(n)
    }
}

/// Token budget shared by the three stages when a config does not set one.
pub const DEFAULT_TOTAL_TOKENS: usize = 8_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub token_budget: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub min_lr: f64,
}

impl StagePlan {
    pub fn default_for(stage: Stage) -> Self {
        let batch_size = if stage == Stage::MatrixOrientation { 64 } else { 128 };
        Self {
            stage,
            token_budget: (DEFAULT_TOTAL_TOKENS as f64 * stage.token_share()).round() as usize,
            batch_size,
            seq_len: 32,
            peak_lr: 1e-4,
            warmup_frac: 0.1,
            decay_frac: 0.1,
            min_lr: 1e-8,
        }
    }

    /// Plan running exactly `steps` optimizer steps.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.token_budget = steps * self.tokens_per_step();
        self
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn total_steps(&self) -> usize {
        self.token_budget.div_ceil(self.tokens_per_step().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config(format!("stage {} has no steps", self.stage)));
        }
        let fracs_ok = (0.0..=1.0).contains(&self.warmup_frac) && (0.0..=1.0).contains(&self.decay_frac);
        if !fracs_ok || self.warmup_frac + self.decay_frac > 1.0 {
            return Err(Error::Config(format!(
                "warmup_frac {} + decay_frac {} must lie in [0, 1]",
                self.warmup_frac, self.decay_frac
            )));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// Warmup-stable-decay learning rate at a (possibly fractional) step.
///
/// Linear warmup from 0 over the first `warmup_frac·T` steps, constant peak,
/// then linear decay reaching `min_lr` exactly at step `T − 1`.
pub fn wsd_lr_at(x: f64, total_steps: usize, plan: &StagePlan) -> Result<f64> {
    if plan.warmup_frac + plan.decay_frac > 1.0 {
        return Err(Error::Config(format!(
            "warmup_frac {} + decay_frac {} exceeds 1",
            plan.warmup_frac, plan.decay_frac
        )));
    }
    let t = total_steps as f64;
    if !(0.0..t).contains(&x) {
        return Err(Error::Parameter(format!("step {x} outside [0, {total_steps})")));
    }
    let warm = plan.warmup_frac * t;
    let decay = plan.decay_frac * t;
    let start = (t - 1.0) - decay;
    Ok(if x < warm {
        plan.peak_lr * x / warm
    } else if decay <= 0.0 || x < start {
        plan.peak_lr
    } else {
        plan.min_lr + (plan.peak_lr - plan.min_lr) * ((t - 1.0) - x) / decay
    })
}

pub fn wsd_lr(step: usize, total_steps: usize, plan: &StagePlan) -> Result<f64> {
    wsd_lr_at(step as f64, total_steps, plan)
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
}

/// Everything `distill` needs besides the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub seed: u64,
    pub state_dim: usize,
    pub eval_sequences: usize,
    pub plans: [StagePlan; 3],
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            state_dim: 16,
            eval_sequences: 16,
            plans: Stage::ALL.map(StagePlan::default_for),
        }
    }
}

impl DistillConfig {
    pub fn plan(&self, stage: Stage) -> &StagePlan {
        &self.plans[stage.number() as usize - 1]
    }

    /// Keys: `seed`, `state_dim`, `eval_sequences`, `total_tokens`, `seq_len`,
    /// and per stage `stageN.{tokens,steps,batch_size,seq_len,peak_lr,warmup_frac,decay_frac,min_lr}`.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut total_tokens = None;
        let mut steps = [None; 3];
        let mut tokens = [None; 3];
        for (key, raw) in kv {
            match key.as_str() {
                "seed" => cfg.seed = parse(key, raw)?,
                "state_dim" => cfg.state_dim = parse(key, raw)?,
                "eval_sequences" => cfg.eval_sequences = parse(key, raw)?,
                "total_tokens" => total_tokens = Some(parse::<usize>(key, raw)?),
                "seq_len" => {
                    let v = parse(key, raw)?;
                    cfg.plans.iter_mut().for_each(|p| p.seq_len = v);
                }
                _ => {
                    let (stage, field) = key
                        .strip_prefix("stage")
                        .and_then(|rest| rest.split_once('.'))
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                    let idx = stage.parse::<Stage>()?.number() as usize - 1;
                    let plan = &mut cfg.plans[idx];
                    match field {
                        "tokens" => tokens[idx] = Some(parse::<usize>(key, raw)?),
                        "steps" => steps[idx] = Some(parse::<usize>(key, raw)?),
                        "batch_size" => plan.batch_size = parse(key, raw)?,
                        "seq_len" => plan.seq_len = parse(key, raw)?,
                        "peak_lr" => plan.peak_lr = parse(key, raw)?,
                        "warmup_frac" => plan.warmup_frac = parse(key, raw)?,
                        "decay_frac" => plan.decay_frac = parse(key, raw)?,
                        "min_lr" => plan.min_lr = parse(key, raw)?,
                        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                    }
                }
            }
        }
        for (i, plan) in cfg.plans.iter_mut().enumerate() {
            if let Some(total) = total_tokens {
                plan.token_budget = (total as f64 * plan.stage.token_share()).round() as usize;
            }
            if let Some(t) = tokens[i] {
                plan.token_budget = t;
            }
            if let Some(s) = steps[i] {
                *plan = plan.with_steps(s);
            }
            plan.validate()?;
        }
        if cfg.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(peak: f64) -> StagePlan {
        StagePlan {
            peak_lr: peak,
            ..StagePlan::default_for(Stage::MatrixOrientation)
        }
    }

    #[test]
    fn schedule_landmarks() {
        let p = plan(1e-4);
        assert!((wsd_lr(50, 1000, &p).unwrap() - 0.5e-4).abs() < 1e-18);
        assert_eq!(wsd_lr(500, 1000, &p).unwrap(), 1e-4);
        assert_eq!(wsd_lr(999, 1000, &p).unwrap(), 1e-8);
        assert_eq!(wsd_lr(0, 1000, &p).unwrap(), 0.0);
        assert!(wsd_lr(1000, 1000, &p).is_err());
        let bad = StagePlan {
            warmup_frac: 0.6,
            decay_frac: 0.5,
            ..p
        };
        assert!(matches!(wsd_lr(0, 10, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_is_continuous_at_boundaries() {
        let p = plan(3e-4);
        let total = 1000;
        let warm = 0.1 * total as f64;
        let start = (total - 1) as f64 - 0.1 * total as f64;
        for b in [warm, start] {
            let below = wsd_lr_at(b - 1e-9, total, &p).unwrap();
            let at = wsd_lr_at(b, total, &p).unwrap();
            assert!((below - at).abs() < 1e-12, "jump at {b}");
        }
    }

    #[test]
    fn defaults_follow_reference_recipe() {
        let s1 = StagePlan::default_for(Stage::MatrixOrientation);
        let s3 = StagePlan::default_for(Stage::KnowledgeDistillation);
        assert_eq!((s1.batch_size, s3.batch_size), (64, 128));
        assert_eq!((s1.peak_lr, s1.warmup_frac, s1.decay_frac, s1.min_lr), (1e-4, 0.1, 0.1, 1e-8));
        let shares: f64 = Stage::ALL.iter().map(|s| s.token_share()).sum();
        assert!((shares - 1.0).abs() < 1e-15);
        assert_eq!(s1.token_budget * 50, s3.token_budget * 3);
    }

    #[test]
    fn config_file_parsing() {
        let text = "# toy\nseed = 7\nseq_len = 16\nstage1.steps = 20\nstage1.batch_size = 4\nstage3.peak_lr = 5e-5\n";
        let cfg = DistillConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.plan(Stage::MatrixOrientation).total_steps(), 20);
        assert_eq!(cfg.plan(Stage::HiddenStateAlignment).seq_len, 16);
        assert_eq!(cfg.plan(Stage::KnowledgeDistillation).peak_lr, 5e-5);
        assert!(DistillConfig::parse("nonsense").is_err());
        assert!(DistillConfig::parse("stage4.steps = 1").is_err());
        assert!(DistillConfig::parse("stage1.warmup_frac = 0.9\nstage1.decay_frac = 0.2").is_err());
    }

    proptest! {
        #[test]
        fn schedule_bounded_by_peak(total in 2usize..5000, frac in 0.0f64..1.0) {
            let p = plan(1e-3);
            let step = ((total - 1) as f64 * frac) as usize;
            let lr = wsd_lr(step, total, &p).unwrap();
            prop_assert!((0.0..=1e-3).contains(&lr));
        }
    }
}
