use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::ContextFn;
use crate::error::{Error, Result};
use crate::recurrent::CellKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Text,
    Audio,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    Combinational,
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Dropout,
    #[serde(rename = "bn")]
    BatchNorm,
}

impl Regularizer {
    pub const ALL: [Regularizer; 3] = [
        Regularizer::None,
        Regularizer::Dropout,
        Regularizer::BatchNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Dropout => "dropout",
            Regularizer::BatchNorm => "bn",
        }
    }

    /// Column heading used in result tables.
    pub fn short(self) -> &'static str {
        match self {
            Regularizer::None => "-",
            Regularizer::Dropout => "D",
            Regularizer::BatchNorm => "BN",
        }
    }
}

impl FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer {s:?} (none|dropout|bn)")))
    }
}

pub fn cell_name(cell: CellKind) -> &'static str {
    match cell {
        CellKind::Gru => "gru",
        CellKind::Lstm => "lstm",
    }
}

pub fn parse_cell(s: &str) -> Result<CellKind> {
    match s {
        "gru" => Ok(CellKind::Gru),
        "lstm" => Ok(CellKind::Lstm),
        _ => Err(Error::Config(format!("unknown cell {s:?} (gru|lstm)"))),
    }
}

pub const CELLS: [CellKind; 2] = [CellKind::Gru, CellKind::Lstm];

/// The seven model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRow {
    TextC1,
    TextC2,
    AudioC1,
    AudioC2,
    CombinationC1,
    CombinationC2,
    ConditionC2,
}

impl ModelRow {
    pub const ALL: [ModelRow; 7] = [
        ModelRow::TextC1,
        ModelRow::TextC2,
        ModelRow::AudioC1,
        ModelRow::AudioC2,
        ModelRow::CombinationC1,
        ModelRow::CombinationC2,
        ModelRow::ConditionC2,
    ];

    /// Families using attention pooling.
    pub const ATTENTION: [ModelRow; 4] = [
        ModelRow::TextC2,
        ModelRow::AudioC2,
        ModelRow::CombinationC2,
        ModelRow::ConditionC2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelRow::TextC1 => "text-c1",
            ModelRow::TextC2 => "text-c2",
            ModelRow::AudioC1 => "audio-c1",
            ModelRow::AudioC2 => "audio-c2",
            ModelRow::CombinationC1 => "combination-c1",
            ModelRow::CombinationC2 => "combination-c2",
            ModelRow::ConditionC2 => "condition-c2",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelRow::TextC1 => "Text c1",
            ModelRow::TextC2 => "Text c2",
            ModelRow::AudioC1 => "Audio c1",
            ModelRow::AudioC2 => "Audio c2",
            ModelRow::CombinationC1 => "Combination c1",
            ModelRow::CombinationC2 => "Combination c2",
            ModelRow::ConditionC2 => "Condition c2",
        }
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            ModelRow::TextC1 | ModelRow::TextC2 => InputMode::Text,
            ModelRow::AudioC1 | ModelRow::AudioC2 => InputMode::Audio,
            _ => InputMode::Both,
        }
    }

    pub fn fusion(self) -> Fusion {
        match self {
            ModelRow::CombinationC1 | ModelRow::CombinationC2 => Fusion::Combinational,
            ModelRow::ConditionC2 => Fusion::Conditional,
            _ => Fusion::None,
        }
    }

    pub fn context_fn(self) -> ContextFn {
        match self {
            ModelRow::TextC1 | ModelRow::AudioC1 | ModelRow::CombinationC1 => ContextFn::C1,
            _ => ContextFn::C2,
        }
    }

    pub fn uses_audio(self) -> bool {
        self.input_mode() != InputMode::Text
    }

    pub fn from_parts(input: InputMode, fusion: Fusion, context: ContextFn) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.input_mode() == input && r.fusion() == fusion && r.context_fn() == context)
    }
}

impl fmt::Display for ModelRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|r| r.name()).collect();
                Error::Config(format!(
                    "unknown model row {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub const DEFAULT_WIDTH: usize = 200;
pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const AUDIO_DIM: usize = 52;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_mode: InputMode,
    pub fusion: Fusion,
    pub context_fn: ContextFn,
    pub cell: CellKind,
    pub regularizer: Regularizer,
    /// Units per recurrent direction.
    pub hidden: usize,
    /// Embedding width, also the width of the audio input layer.
    pub embed_dim: usize,
    pub attention_width: usize,
    pub dropout: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub audio_dim: usize,
    pub orthogonal_init: bool,
}

impl ModelConfig {
    pub fn new(row: ModelRow, cell: CellKind, regularizer: Regularizer, vocab_size: usize) -> Self {
        ModelConfig {
            input_mode: row.input_mode(),
            fusion: row.fusion(),
            context_fn: row.context_fn(),
            cell,
            regularizer,
            hidden: DEFAULT_WIDTH,
            embed_dim: DEFAULT_WIDTH,
            attention_width: DEFAULT_WIDTH,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            vocab_size,
            audio_dim: AUDIO_DIM,
            orthogonal_init: false,
        }
    }

    pub fn with_sizes(mut self, hidden: usize, embed_dim: usize, attention_width: usize) -> Self {
        self.hidden = hidden;
        self.embed_dim = embed_dim;
        self.attention_width = attention_width;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn row(&self) -> Result<ModelRow> {
        self.validate()?;
        Ok(
            ModelRow::from_parts(self.input_mode, self.fusion, self.context_fn)
                .expect("validated configs map to a row"),
        )
    }

    pub fn uses_text(&self) -> bool {
        self.input_mode != InputMode::Audio
    }

    pub fn uses_audio(&self) -> bool {
        self.input_mode != InputMode::Text
    }

    /// Width of one branch's annotations and context: both directions.
    pub fn annotation_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Classifier input width.
    pub fn context_dim(&self) -> usize {
        match self.input_mode {
            InputMode::Both => 2 * self.annotation_dim(),
            _ => self.annotation_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.fusion == Fusion::Conditional && self.context_fn != ContextFn::C2 {
            return fail("conditional fusion requires the attention context (c2)");
        }
        if self.fusion == Fusion::Conditional && self.input_mode != InputMode::Both {
            return fail("conditional fusion requires both text and audio input");
        }
        if (self.fusion == Fusion::None) != (self.input_mode != InputMode::Both) {
            return fail("fusion must be none exactly when a single modality is used");
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.attention_width == 0 {
            return fail("hidden, embedding and attention widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout rate must be in [0, 1)");
        }
        if self.uses_text() && self.vocab_size < 3 {
            return fail("text models need a vocabulary beyond the PAD and UNK entries");
        }
        if self.uses_audio() && self.audio_dim == 0 {
            return fail("audio feature width must be positive");
        }
        Ok(())
    }
}
