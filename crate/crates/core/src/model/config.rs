use serde::{Deserialize, Serialize};

use crate::embed::{CnnSpec, EmbedConfig};
use crate::error::{Error, Result};
use crate::ingest::{Schema, Timeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CnnOnly,
    CnnRnn,
    CnnAttRnn,
    Raim0,
    Raim1,
    Raim2,
    Raim3,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::CnnOnly,
        Variant::CnnRnn,
        Variant::CnnAttRnn,
        Variant::Raim0,
        Variant::Raim1,
        Variant::Raim2,
        Variant::Raim3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CnnOnly => "cnn_only",
            Variant::CnnRnn => "cnn_rnn",
            Variant::CnnAttRnn => "cnn_att_rnn",
            Variant::Raim0 => "raim0",
            Variant::Raim1 => "raim1",
            Variant::Raim2 => "raim2",
            Variant::Raim3 => "raim3",
        }
    }

    /// Long name used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Variant::CnnOnly => "CNN",
            Variant::CnnRnn => "CNN-RNN",
            Variant::CnnAttRnn => "CNN-AttRNN",
            Variant::Raim0 => "CNN-MultiChAttRNN (RAIM-0)",
            Variant::Raim1 => "CNN-LabMultiChAttRNN (RAIM-1)",
            Variant::Raim2 => "CNN-IntMultiChAttRNN (RAIM-2)",
            Variant::Raim3 => "CNN-IntLabMultiChAttRNN (RAIM-3)",
        }
    }

    /// Accepts `raim3`, `raim-3`, `RAIM3`, `cnn-rnn`, `cnn_rnn`, ...
    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm || v.as_str().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {names:?}"))
            })
    }

    pub fn has_encoder(self) -> bool {
        self != Variant::CnnOnly
    }

    pub fn uses_time(self) -> bool {
        matches!(self, Variant::CnnAttRnn | Variant::Raim0)
    }

    pub fn uses_lab(self) -> bool {
        matches!(self, Variant::Raim1 | Variant::Raim3)
    }

    pub fn uses_int(self) -> bool {
        matches!(self, Variant::Raim2 | Variant::Raim3)
    }

    pub fn has_attention(self) -> bool {
        self.uses_time() || self.uses_lab() || self.uses_int()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Death within a day of the window end, two classes.
    Decomp,
    /// Remaining-stay bucket, nine classes.
    Los,
    /// Remaining stay in days, squared-error regression.
    LosDays,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Decomp => "decomp",
            Task::Los => "los",
            Task::LosDays => "los_days",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "decomp" | "decompensation" => Ok(Task::Decomp),
            "los" => Ok(Task::Los),
            "los_days" => Ok(Task::LosDays),
            _ => Err(Error::Config(format!("unknown task `{s}`; expected decomp, los or los_days"))),
        }
    }

    pub fn n_outputs(self) -> usize {
        match self {
            Task::Decomp => 2,
            Task::Los => 9,
            Task::LosDays => 1,
        }
    }

    pub fn is_regression(self) -> bool {
        self == Task::LosDays
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    pub embed: EmbedConfig,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    /// Observation window W seen by attention.
    pub window: usize,
    /// Neighborhood sizes around lab (`n1`) and intervention (`n2`) steps.
    pub n1: usize,
    pub n2: usize,
    /// Channel weights inside the guided contexts.
    pub beta_in_guided: bool,
    /// Feed `Z_t (+) a_t` to the encoder instead of `Z_t`.
    pub concat_step_input: bool,
    /// Attend over every step when the active set is empty.
    pub empty_fallback: bool,
}

impl ModelConfig {
    /// One unidirectional layer, `|h| = d_emb = 16`, fast CNN.
    pub fn desk(schema: &Schema, timeline: &Timeline, variant: Variant, task: Task) -> Self {
        ModelConfig {
            variant,
            task,
            embed: EmbedConfig::for_schema(schema, 16, &CnnSpec::fast()),
            hidden: 16,
            layers: 1,
            bidirectional: false,
            window: timeline.window,
            n1: 2,
            n2: 2,
            beta_in_guided: true,
            concat_step_input: false,
            empty_fallback: false,
        }
    }

    /// Three bidirectional layers, `d_emb = 128`, five-layer CNN.
    pub fn paper(schema: &Schema, timeline: &Timeline, variant: Variant, task: Task) -> Self {
        ModelConfig {
            embed: EmbedConfig::for_schema(schema, 128, &CnnSpec::paper()),
            hidden: 128,
            layers: 3,
            bidirectional: true,
            ..ModelConfig::desk(schema, timeline, variant, task)
        }
    }

    pub fn k(&self) -> usize {
        self.embed.channels.len()
    }

    pub fn a_dim(&self) -> usize {
        self.k() * self.embed.d_emb
    }

    pub fn uses_channel(&self) -> bool {
        match self.variant {
            Variant::Raim0 => true,
            Variant::Raim1 | Variant::Raim2 | Variant::Raim3 => self.beta_in_guided,
            _ => false,
        }
    }

    /// Encoder input size at every step.
    pub fn encoder_input(&self) -> usize {
        let a = self.a_dim();
        let base = if self.variant == Variant::Raim3 { 2 * a } else { a };
        if self.concat_step_input && self.variant.has_attention() {
            base + a
        } else {
            base
        }
    }

    /// Size of the state the head reads.
    pub fn head_input(&self) -> usize {
        match (self.variant, self.bidirectional) {
            (Variant::CnnOnly, _) => self.a_dim(),
            (_, true) => 2 * self.hidden,
            (_, false) => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed.d_emb == 0 || self.k() == 0 {
            return bad("embedder needs d_emb >= 1 and at least one channel");
        }
        if self.variant.has_encoder() && (self.hidden == 0 || self.layers == 0) {
            return bad("encoder needs hidden >= 1 and layers >= 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !self.n1.is_multiple_of(2) || !self.n2.is_multiple_of(2) {
            return bad("n1 and n2 must be even");
        }
        Ok(())
    }
}
