use serde::{Deserialize, Serialize};

use crate::block::RoutingMode;
use crate::error::{Error, Result};

/// FFN flavour of every transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Dense,
    Finedeep,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Dense => "dense",
            Arch::Finedeep => "finedeep",
        })
    }
}

/// Architecture and optimisation hyperparameters.
///
/// Serialised keys match the field names, except `M` and `K` which are
/// written in upper case. Optimisation fields not pinned by the reference
/// configurations (`batch_size`, `warmup_steps`, `init_std`, `grad_clip`)
/// carry conventional desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(alias = "d_ff")]
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub arch: Arch,
    /// Expert sub-layers per FFN.
    #[serde(rename = "M", default = "one")]
    pub sublayers: usize,
    /// Experts per sub-layer.
    #[serde(rename = "K", default = "one")]
    pub experts_per_sublayer: usize,
    #[serde(default)]
    pub routing_mode: RoutingMode,
    #[serde(default = "yes")]
    pub router_enabled: bool,
    #[serde(default = "default_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// Sequences per optimisation step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Linear warmup length; cosine decay to 10% of `lr` follows.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_lr() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    4
}
fn default_warmup() -> usize {
    100
}
fn default_init_std() -> f64 {
    0.02
}
fn default_grad_clip() -> f64 {
    1.0
}

/// Vocabulary of the reference tokenizer used for the accounting presets.
pub const REFERENCE_VOCAB: usize = 128_256;

impl ModelConfig {
    fn base(hidden: usize, layers: usize, heads: usize, inter: usize, vocab: usize, seq: usize) -> Self {
        Self {
            hidden_size: hidden,
            n_layers: layers,
            n_heads: heads,
            intermediate_size: inter,
            vocab_size: vocab,
            max_seq_len: seq,
            arch: Arch::Dense,
            sublayers: 1,
            experts_per_sublayer: 1,
            routing_mode: RoutingMode::Sigmoid,
            router_enabled: true,
            rms_eps: default_eps(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            seed: 0,
            tie_embeddings: false,
            batch_size: default_batch_size(),
            warmup_steps: default_warmup(),
            init_std: default_init_std(),
            grad_clip: default_grad_clip(),
        }
    }

    /// 665M-parameter dense reference (hidden 1024, 24 layers).
    pub fn small() -> Self {
        Self::base(1024, 24, 16, 4096, REFERENCE_VOCAB, 1024)
    }

    /// 1.6B-parameter dense reference (hidden 2048, 16 layers).
    pub fn medium() -> Self {
        Self::base(2048, 16, 8, 8192, REFERENCE_VOCAB, 1024)
    }

    /// 7.5B-parameter dense reference (hidden 4096, 32 layers).
    pub fn large() -> Self {
        Self::base(4096, 32, 32, 11008, REFERENCE_VOCAB, 1024)
    }

    /// Byte-level desk-scale model: hidden 128, 4 layers, 4 heads.
    pub fn toy() -> Self {
        Self::base(128, 4, 4, 512, 256, 64)
    }

    /// Same model with every FFN split into `m x k` routed experts.
    pub fn with_finedeep(mut self, m: usize, k: usize) -> Self {
        self.arch = Arch::Finedeep;
        self.sublayers = m;
        self.experts_per_sublayer = k;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads.max(1)
    }

    /// Intermediate width of one expert (`d_ff` for dense models).
    pub fn expert_size(&self) -> usize {
        match self.arch {
            Arch::Dense => self.intermediate_size,
            Arch::Finedeep => self.intermediate_size / (self.sublayers * self.experts_per_sublayer).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return err(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.arch == Arch::Finedeep {
            let (m, k) = (self.sublayers, self.experts_per_sublayer);
            if m == 0 || k == 0 || !self.intermediate_size.is_multiple_of(m * k) {
                return err(format!(
                    "intermediate size d_ff={} is not divisible by M*K with M={m}, K={k}",
                    self.intermediate_size
                ));
            }
            if !self.router_enabled && k != 1 {
                return err(format!("router can only be disabled with one expert, got K={k}"));
            }
        }
        if !(self.rms_eps >= 0.0) || !self.rms_eps.is_finite() {
            return err(format!("rms_eps must be a finite non-negative number, got {}", self.rms_eps));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.init_std >= 0.0) || !(self.grad_clip >= 0.0) {
            return err("weight_decay, init_std and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    /// Dense configs ignore the expert fields; normalise them so that two
    /// dense configs describing the same model compare (and serialise) equal.
    pub fn canonical(mut self) -> Self {
        if self.arch == Arch::Dense {
            self.sublayers = 1;
            self.experts_per_sublayer = 1;
            self.routing_mode = RoutingMode::Sigmoid;
            self.router_enabled = true;
        }
        self
    }

    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
