use serde::{Deserialize, Serialize};

/// Which input branches feed the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub text: bool,
    pub location: bool,
    pub time: bool,
    pub account: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet {
        text: true,
        location: true,
        time: true,
        account: true,
    };

    pub const TEXT_ONLY: FeatureSet = FeatureSet {
        text: true,
        location: false,
        time: false,
        account: false,
    };

    pub fn any(&self) -> bool {
        self.text || self.location || self.time || self.account
    }
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Hidden width of each LSTM direction, shared by both sequence encoders.
    pub rnn_hidden: usize,
    /// Width of the attention scoring layer.
    pub attn_dim: usize,
    pub time_feat_dim: usize,
    pub acct_feat_dim: usize,
    pub fusion_hidden: usize,
    pub num_classes: usize,
    pub max_text_tokens: usize,
    pub max_loc_chars: usize,
    pub embeddings_trainable: bool,
    pub features: FeatureSet,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    /// Seed of the word-vector store the model was built against; unknown
    /// words map to vectors derived from it.
    pub oov_seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            word_dim: 300,
            char_dim: 50,
            rnn_hidden: 100,
            attn_dim: 100,
            time_feat_dim: 32,
            acct_feat_dim: 32,
            fusion_hidden: 400,
            num_classes,
            max_text_tokens: 64,
            max_loc_chars: 32,
            embeddings_trainable: true,
            features: FeatureSet::ALL,
            init_scale: 0.08,
            oov_seed: 0,
        }
    }

    /// Small widths for fast experiments and gradient checks.
    pub fn small(num_classes: usize, word_dim: usize) -> Self {
        Self {
            word_dim,
            char_dim: 8,
            rnn_hidden: 8,
            attn_dim: 8,
            time_feat_dim: 6,
            acct_feat_dim: 6,
            fusion_hidden: 16,
            ..Self::new(num_classes)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("attn_dim", self.attn_dim),
            ("time_feat_dim", self.time_feat_dim),
            ("acct_feat_dim", self.acct_feat_dim),
            ("fusion_hidden", self.fusion_hidden),
            ("max_text_tokens", self.max_text_tokens),
            ("max_loc_chars", self.max_loc_chars),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if !self.features.any() {
            return Err("at least one feature branch must be enabled".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err("init_scale must be positive".into());
        }
        Ok(())
    }

    /// `[e_t; h_fwd; h_bwd]` width for the text encoder.
    pub fn text_step_dim(&self) -> usize {
        self.word_dim + 2 * self.rnn_hidden
    }

    pub fn loc_step_dim(&self) -> usize {
        self.char_dim + 2 * self.rnn_hidden
    }

    /// Attention mean and max pool, concatenated.
    pub fn text_feat_dim(&self) -> usize {
        2 * self.text_step_dim()
    }

    pub fn loc_feat_dim(&self) -> usize {
        2 * self.loc_step_dim()
    }

    pub fn fusion_input_dim(&self) -> usize {
        let f = &self.features;
        let mut d = 0;
        if f.text {
            d += self.text_feat_dim();
        }
        if f.location {
            d += self.loc_feat_dim();
        }
        if f.time {
            d += self.time_feat_dim;
        }
        if f.account {
            d += self.acct_feat_dim;
        }
        d
    }
}
