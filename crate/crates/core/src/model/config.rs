use langaux_craftworld::Observability;

use crate::error::{Error, Result};
use crate::kv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Causal transformer over the observation history.
    Sequence,
    /// CLS-token transformer over the current observation's grid tokens.
    State,
}

/// Which latents the tokens of instruction `i`, covering `[T_i, T_{i+1})`,
/// may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// `z_1..z_cap` with `cap = max(T_i - 1, 1)`.
    Onset,
    /// `z_1..z_cap` with `cap = T_{i+1} - 1`.
    Execution,
    /// Every latent (the ablation without the cross mask).
    Unmasked,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sequence => "sequence",
            Self::State => "state",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequence" => Some(Self::Sequence),
            "state" => Some(Self::State),
            _ => None,
        }
    }
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Onset => "onset",
            Self::Execution => "execution",
            Self::Unmasked => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "onset" => Some(Self::Onset),
            "execution" => Some(Self::Execution),
            "none" => Some(Self::Unmasked),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Distinct values a single observation token can take.
    pub obs_vocab_size: usize,
    /// Tokens per observation.
    pub obs_tokens: usize,
    pub text_vocab_size: usize,
    /// Output vocabulary of the decoder; equals `text_vocab_size` unless
    /// the decoder predicts actions.
    pub decoder_vocab_size: usize,
    pub action_count: usize,
    pub max_goal_len: usize,
    /// Length of the instruction prefix block fed to the encoder; 0 disables it.
    pub max_plan_len: usize,
    pub max_instr_len: usize,
    pub observability: Observability,
    pub window: usize,
    pub mask_mode: MaskMode,
    /// Whether goal-token latents join the decoder's cross-attention keys.
    pub goal_keys: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Sequence,
            encoder_blocks: 4,
            decoder_blocks: 1,
            embed_dim: 128,
            mlp_dim: 256,
            heads: 4,
            dropout: 0.0,
            max_seq_len: 128,
            obs_vocab_size: 24,
            obs_tokens: 49 + 19,
            text_vocab_size: 64,
            decoder_vocab_size: 64,
            action_count: 5,
            max_goal_len: 8,
            max_plan_len: 0,
            max_instr_len: 64,
            observability: Observability::Full,
            window: 5,
            mask_mode: MaskMode::Execution,
            goal_keys: false,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`], in `to_kv` order.
pub const MODEL_KEYS: [&str; 20] = [
    "encoder",
    "encoder_blocks",
    "decoder_blocks",
    "embed_dim",
    "mlp_dim",
    "heads",
    "dropout",
    "max_seq_len",
    "obs_vocab_size",
    "obs_tokens",
    "text_vocab_size",
    "decoder_vocab_size",
    "action_count",
    "max_goal_len",
    "max_plan_len",
    "max_instr_len",
    "observability",
    "window",
    "mask_mode",
    "goal_keys",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        for (name, v) in [
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("mlp_dim", self.mlp_dim),
            ("max_seq_len", self.max_seq_len),
            ("obs_vocab_size", self.obs_vocab_size),
            ("obs_tokens", self.obs_tokens),
            ("text_vocab_size", self.text_vocab_size),
            ("decoder_vocab_size", self.decoder_vocab_size),
            ("action_count", self.action_count),
            ("max_goal_len", self.max_goal_len),
            ("max_instr_len", self.max_instr_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return bad(format!("window must be odd, got {}", self.window));
        }
        if self.encoder == EncoderKind::State && self.observability != Observability::Full {
            return bad("the state encoder needs full observability".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "encoder = {}\nencoder_blocks = {}\ndecoder_blocks = {}\nembed_dim = {}\nmlp_dim = {}\nheads = {}\n\
             dropout = {}\nmax_seq_len = {}\nobs_vocab_size = {}\nobs_tokens = {}\ntext_vocab_size = {}\n\
             decoder_vocab_size = {}\naction_count = {}\nmax_goal_len = {}\nmax_plan_len = {}\n\
             max_instr_len = {}\nobservability = {}\nwindow = {}\nmask_mode = {}\ngoal_keys = {}\n",
            self.encoder.name(),
            self.encoder_blocks,
            self.decoder_blocks,
            self.embed_dim,
            self.mlp_dim,
            self.heads,
            self.dropout,
            self.max_seq_len,
            self.obs_vocab_size,
            self.obs_tokens,
            self.text_vocab_size,
            self.decoder_vocab_size,
            self.action_count,
            self.max_goal_len,
            self.max_plan_len,
            self.max_instr_len,
            self.observability.name(),
            self.window,
            self.mask_mode.name(),
            self.goal_keys,
        )
    }

    /// Sets one key; shared by the text loader and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use kv::parse_value as pv;
        match key {
            "encoder" => {
                self.encoder = EncoderKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("`encoder`: expected sequence or state, got `{value}`")))?
            }
            "encoder_blocks" => self.encoder_blocks = pv(key, value)?,
            "decoder_blocks" => self.decoder_blocks = pv(key, value)?,
            "embed_dim" => self.embed_dim = pv(key, value)?,
            "mlp_dim" => self.mlp_dim = pv(key, value)?,
            "heads" => self.heads = pv(key, value)?,
            "dropout" => self.dropout = pv(key, value)?,
            "max_seq_len" => self.max_seq_len = pv(key, value)?,
            "obs_vocab_size" => self.obs_vocab_size = pv(key, value)?,
            "obs_tokens" => self.obs_tokens = pv(key, value)?,
            "text_vocab_size" => self.text_vocab_size = pv(key, value)?,
            "decoder_vocab_size" => self.decoder_vocab_size = pv(key, value)?,
            "action_count" => self.action_count = pv(key, value)?,
            "max_goal_len" => self.max_goal_len = pv(key, value)?,
            "max_plan_len" => self.max_plan_len = pv(key, value)?,
            "max_instr_len" => self.max_instr_len = pv(key, value)?,
            "observability" => {
                self.observability = Observability::parse(value)
                    .ok_or_else(|| Error::Config(format!("`observability`: expected full or partial, got `{value}`")))?
            }
            "window" => self.window = pv(key, value)?,
            "mask_mode" => {
                self.mask_mode = MaskMode::parse(value).ok_or_else(|| {
                    Error::Config(format!("`mask_mode`: expected onset, execution or none, got `{value}`"))
                })?
            }
            "goal_keys" => self.goal_keys = kv::parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            cfg.set(&e.key, &e.value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::default();
        c.dropout = 0.1;
        c.mask_mode = MaskMode::Onset;
        c.goal_keys = true;
        c.observability = Observability::Partial;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("divisible"));
    }
}
