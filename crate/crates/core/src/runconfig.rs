//! Flat `key = value` run configuration covering the encoder, both
//! training schedules, the corpus generator and the extraction task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, FinetuneConfig, MlmConfig};
use crate::error::{Error, Result};
use crate::extraction::Task;
use crate::synthcorpus::GenSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub mlm: MlmConfig,
    pub finetune: FinetuneConfig,
    pub gen: GenSpec,
    pub task: Task,
    pub seed: u64,
    /// Fine-tuning repetitions for `eval --seeds`.
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mlm: MlmConfig::default(),
            finetune: FinetuneConfig::default(),
            gen: GenSpec::default(),
            task: Task::financial(),
            seed: 0,
            seeds: 1,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.encoder.to_map();
        m.extend(self.gen.to_map());
        let f = |x: f64| format!("{x:?}");
        for (k, v) in [
            ("mlm_steps", self.mlm.steps.to_string()),
            ("mlm_batch_size", self.mlm.batch_size.to_string()),
            ("mlm_peak_lr", f(self.mlm.peak_lr)),
            ("mlm_warmup_frac", f(self.mlm.warmup_frac)),
            ("ft_max_epochs", self.finetune.max_epochs.to_string()),
            ("ft_batch_size", self.finetune.batch_size.to_string()),
            ("ft_peak_lr", f(self.finetune.peak_lr)),
            ("ft_patience", self.finetune.patience.to_string()),
            ("task", self.task.to_spec()),
            ("seed", self.seed.to_string()),
            ("seeds", self.seeds.to_string()),
        ] {
            m.insert(k.to_string(), v);
        }
        m
    }

    /// Set one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.encoder.apply(key, value)? || self.gen.apply(key, value)? {
            return Ok(());
        }
        match key {
            "mlm_steps" => self.mlm.steps = num(key, value)?,
            "mlm_batch_size" => self.mlm.batch_size = num(key, value)?,
            "mlm_peak_lr" => self.mlm.peak_lr = num(key, value)?,
            "mlm_warmup_frac" => self.mlm.warmup_frac = num(key, value)?,
            "ft_max_epochs" => self.finetune.max_epochs = num(key, value)?,
            "ft_batch_size" => self.finetune.batch_size = num(key, value)?,
            "ft_peak_lr" => self.finetune.peak_lr = num(key, value)?,
            "ft_patience" => self.finetune.patience = num(key, value)?,
            "task" => self.task = Task::from_spec(value)?,
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gen.validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment;
    /// a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("config line {}", i + 1), "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(Error::parse(format!("config line {}", i + 1), format!("{k:?} already set on line {prev}")));
            }
            cfg.set(k, v)
                .map_err(|e| Error::parse(format!("config line {}", i + 1), e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    /// Every key, sorted, one per line. Parsing the text gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Pretraining and fine-tuning schedules with the run seed applied.
    pub fn seeded_mlm(&self) -> MlmConfig {
        MlmConfig {
            seed: self.seed,
            ..self.mlm
        }
    }

    pub fn seeded_finetune(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig { seed, ..self.finetune }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LayoutMode;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("layout", "graph").unwrap();
        cfg.set("mlm_steps", "77").unwrap();
        cfg.set("rows", "9").unwrap();
        cfg.set("task", "income:amount,name:text").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.encoder.layout, LayoutMode::Graph);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("n = many").is_err());
        let ok = RunConfig::parse("# comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(ok.seed, 5);
    }
}
