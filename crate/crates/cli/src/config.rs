//! Flat `key = value` run configuration.
//!
//! One file drives every command: model shape, training schedule, seeds, and
//! dataset locations. Lines starting with `#` and blank lines are ignored;
//! nesting is not supported. Unknown and duplicate keys are rejected so a
//! typo cannot silently fall back to a default. Parsing never touches the
//! filesystem: commands fully parse and validate the config before creating
//! any output, so an invalid config never leaves partial artifacts behind.

use std::collections::BTreeSet;
use std::path::PathBuf;

use smf_core::autodiff::adam::AdamConfig;
use smf_core::flow::SamplerConfig;
use smf_core::model::ModelConfig;

/// Everything a run needs besides command-line overrides. Field defaults
/// reproduce the reference configuration, so an empty file (or no `--config`
/// at all) is a valid run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Model shape. Image geometry and vocabulary are fixed by the dataset.
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_prompt_len: usize,
    pub use_ref_pos_emb: bool,
    pub use_attn_loss: bool,
    pub use_pose: bool,
    // Loss and sampler.
    pub lambda_attn: f32,
    pub sampler_steps: usize,
    // Optimization schedule.
    pub lr: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    // Seeds: `seed` drives parameter init, the batch schedule, the training
    // (t, z) streams, and sampling; the rest are data-generation seeds.
    pub seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub pairing_seed: u64,
    // Dataset shape and locations. Paths are used exactly as written (they
    // are shared between the command that writes them and the commands that
    // read them); only run artifacts go under `--out`.
    pub n_train: usize,
    pub n_eval: usize,
    pub dataset_path: PathBuf,
    pub eval_path: PathBuf,
    pub pairing_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            max_prompt_len: 12,
            use_ref_pos_emb: true,
            use_attn_loss: true,
            use_pose: true,
            lambda_attn: 0.1,
            sampler_steps: 25,
            lr: 1e-4,
            batch_size: 16,
            steps: 5000,
            log_every: 100,
            checkpoint_every: 1000,
            seed: 0,
            data_seed: 1,
            eval_seed: 2,
            pairing_seed: 3,
            n_train: 500,
            n_eval: 100,
            dataset_path: PathBuf::from("data/train.smfd"),
            eval_path: PathBuf::from("data/eval.smfd"),
            pairing_path: PathBuf::from("data/pairs.smfp"),
        }
    }
}

/// The trainer caps batches at this size; checked here too so the error
/// points at the config line instead of surfacing mid-run.
const BATCH_CAP: usize = 1 << 16;

impl RunConfig {
    /// Parse a config file's text. Every error names the offending line.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {lineno}: expected `key = value`, got {line:?}"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(format!("line {lineno}: duplicate key {key:?}"));
            }
            cfg.set(key, value).map_err(|msg| format!("line {lineno}: {msg}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("key {key:?}: cannot parse {value:?}"))
        }
        fn flag(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("key {key:?}: expected true or false, got {value:?}")),
            }
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "max_prompt_len" => self.max_prompt_len = num(key, value)?,
            "use_ref_pos_emb" => self.use_ref_pos_emb = flag(key, value)?,
            "use_attn_loss" => self.use_attn_loss = flag(key, value)?,
            "use_pose" => self.use_pose = flag(key, value)?,
            "lambda_attn" => self.lambda_attn = num(key, value)?,
            "sampler_steps" => self.sampler_steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "eval_seed" => self.eval_seed = num(key, value)?,
            "pairing_seed" => self.pairing_seed = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_eval" => self.n_eval = num(key, value)?,
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "eval_path" => self.eval_path = PathBuf::from(value),
            "pairing_path" => self.pairing_path = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Reject configs no command could run. Model and sampler fields defer
    /// to the library's own validation so the rules cannot drift.
    pub fn validate(&self) -> Result<(), String> {
        self.model_config().validate().map_err(|e| e.to_string())?;
        self.sampler_config().validate().map_err(|e| e.to_string())?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(format!("lr must be a positive finite number, got {}", self.lr));
        }
        if self.batch_size == 0 || self.batch_size > BATCH_CAP {
            return Err(format!("batch_size must be in 1..={BATCH_CAP}, got {}", self.batch_size));
        }
        for (name, v) in
            [("steps", self.steps), ("log_every", self.log_every), ("checkpoint_every", self.checkpoint_every)]
        {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(format!("dataset sizes must be at least 1, got n_train {} n_eval {}", self.n_train, self.n_eval));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            max_prompt_len: self.max_prompt_len,
            use_ref_pos_emb: self.use_ref_pos_emb,
            use_attn_loss: self.use_attn_loss,
            use_pose: self.use_pose,
            ..ModelConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.sampler_steps, seed: self.seed, lambda_attn: self.lambda_attn }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// The resolved config as config-file text, written next to checkpoints
    /// so a run records exactly what produced it.
    pub fn to_file_text(&self) -> String {
        format!(
            "d_model = {}\nn_blocks = {}\nn_heads = {}\nmax_prompt_len = {}\n\
             use_ref_pos_emb = {}\nuse_attn_loss = {}\nuse_pose = {}\n\
             lambda_attn = {}\nsampler_steps = {}\nlr = {}\nbatch_size = {}\n\
             steps = {}\nlog_every = {}\ncheckpoint_every = {}\nseed = {}\n\
             data_seed = {}\neval_seed = {}\npairing_seed = {}\nn_train = {}\n\
             n_eval = {}\ndataset_path = {}\neval_path = {}\npairing_path = {}\n",
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.max_prompt_len,
            self.use_ref_pos_emb,
            self.use_attn_loss,
            self.use_pose,
            self.lambda_attn,
            self.sampler_steps,
            self.lr,
            self.batch_size,
            self.steps,
            self.log_every,
            self.checkpoint_every,
            self.seed,
            self.data_seed,
            self.eval_seed,
            self.pairing_seed,
            self.n_train,
            self.n_eval,
            self.dataset_path.display(),
            self.eval_path.display(),
            self.pairing_path.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let cfg = RunConfig::parse("# run\n\n  steps=42\n  lr =  0.001 \n").unwrap();
        assert_eq!(cfg.steps, 42);
        assert_eq!(cfg.lr, 1e-3);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = RunConfig::parse("steps = 1\nstepss = 2\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("stepss"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("use_pose = yes\n").is_err());
        assert!(RunConfig::parse("steps = many\n").is_err());
        assert!(RunConfig::parse("steps = 0\n").is_err());
        assert!(RunConfig::parse("n_train = 0\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
        assert!(RunConfig::parse("lr = -1\n").is_err());
        assert!(RunConfig::parse("d_model = 30\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.steps = 7;
        cfg.use_attn_loss = false;
        cfg.dataset_path = PathBuf::from("elsewhere/train.smfd");
        assert_eq!(RunConfig::parse(&cfg.to_file_text()).unwrap(), cfg);
    }
}
