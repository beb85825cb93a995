use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig, Regularizer};
use crate::autodiff::{Graph, NodeId, ParamHost, ParamId, ParamStore};
use crate::context::{context_attention, context_last, AttentionScorer, ContextFn, ContextOutput};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::layers::{
    Activation, BatchNormLayer, BatchStats, DenseLayer, DropoutSpec, EmbeddingTable, Mode,
};
use crate::recurrent::BiRnn;
use crate::scalar::Scalar;
use crate::sequence::SeqLayout;
use crate::tensor::Tensor;

/// Identifies a batch-norm layer inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSlot {
    TextInput,
    TextOutput,
    AudioInput,
    AudioOutput,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Audio,
}

/// One input branch: input layer → bidirectional RNN → dense `h`.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub modality: Modality,
    /// Text input layer.
    pub embedding: Option<EmbeddingTable>,
    /// Audio input layer `f`.
    pub input_dense: Option<DenseLayer>,
    pub input_bn: Option<BatchNormLayer<T>>,
    pub rnn: BiRnn,
    pub output_dense: DenseLayer,
    pub output_bn: Option<BatchNormLayer<T>>,
    pub scorer: Option<AttentionScorer>,
}

#[derive(Clone, Debug)]
pub struct QuestionDetector<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: Option<Branch<T>>,
    pub audio: Option<Branch<T>>,
    pub classifier_bn: Option<BatchNormLayer<T>>,
    pub w: ParamId,
    pub b: ParamId,
    pub dropout: Option<DropoutSpec>,
    pub vocab: Option<Vocab>,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Pre-sigmoid scores `[n]`.
    pub logits: NodeId,
    pub text_alphas: Option<NodeId>,
    pub audio_alphas: Option<NodeId>,
    /// Batch statistics from train-mode batch normalization, to be folded
    /// into the running statistics with [`QuestionDetector::apply_bn_updates`].
    pub bn_updates: Vec<(BnSlot, BatchStats<T>)>,
}

impl<T: Scalar> Branch<T> {
    fn build(
        modality: Modality,
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        cond_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let p = match modality {
            Modality::Text => "text",
            Modality::Audio => "audio",
        };
        let bn = cfg.regularizer == Regularizer::BatchNorm;
        let (embedding, input_dense) = match modality {
            Modality::Text => (
                Some(EmbeddingTable::new(
                    store,
                    &format!("{p}.embed"),
                    cfg.vocab_size,
                    cfg.embed_dim,
                    rng,
                )?),
                None,
            ),
            Modality::Audio => (
                None,
                Some(DenseLayer::new(
                    store,
                    &format!("{p}.f"),
                    cfg.audio_dim,
                    cfg.embed_dim,
                    Activation::Relu,
                    !bn,
                    rng,
                )?),
            ),
        };
        let input_bn = if bn {
            Some(BatchNormLayer::new(
                store,
                &format!("{p}.f_bn"),
                cfg.embed_dim,
            )?)
        } else {
            None
        };
        let rnn = BiRnn::new(
            cfg.cell,
            store,
            &format!("{p}.rnn"),
            cfg.embed_dim,
            cfg.hidden,
            cfg.orthogonal_init,
            rng,
        )?;
        let output_dense = DenseLayer::new(
            store,
            &format!("{p}.h"),
            rnn.output_dim(),
            cfg.annotation_dim(),
            Activation::Relu,
            !bn,
            rng,
        )?;
        let output_bn = if bn {
            Some(BatchNormLayer::new(
                store,
                &format!("{p}.h_bn"),
                cfg.annotation_dim(),
            )?)
        } else {
            None
        };
        let scorer = match cfg.context_fn {
            ContextFn::C1 => None,
            ContextFn::C2 => Some(AttentionScorer::new(
                store,
                &format!("{p}.att"),
                cfg.annotation_dim(),
                cond_dim,
                cfg.attention_width,
                rng,
            )?),
        };
        Ok(Branch {
            modality,
            embedding,
            input_dense,
            input_bn,
            rnn,
            output_dense,
            output_bn,
            scorer,
        })
    }

    fn slots(&self) -> (BnSlot, BnSlot) {
        match self.modality {
            Modality::Text => (BnSlot::TextInput, BnSlot::TextOutput),
            Modality::Audio => (BnSlot::AudioInput, BnSlot::AudioOutput),
        }
    }

    fn input<'b>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &'b SequenceBatch,
    ) -> Result<(NodeId, &'b SeqLayout)> {
        match self.modality {
            Modality::Text => {
                let text = batch.text.as_ref().ok_or_else(|| {
                    Error::Input("model needs text input but the batch has none".into())
                })?;
                let e = self
                    .embedding
                    .as_ref()
                    .expect("text branch has an embedding");
                Ok((e.embed(g, store, &text.ids)?, &text.layout))
            }
            Modality::Audio => {
                let audio = batch.audio.as_ref().ok_or_else(|| {
                    Error::Input("model needs audio input but the batch has none".into())
                })?;
                let x = g.constant(Tensor::from_f64(audio.frames.shape(), audio.frames.data())?);
                Ok((x, &audio.layout))
            }
        }
    }

    /// Dense layer, optionally batch-normalized over the valid rows, then
    /// the layer's activation.
    #[allow(clippy::too_many_arguments)]
    fn dense_block(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: &DenseLayer,
        bn: Option<&BatchNormLayer<T>>,
        slot: BnSlot,
        x: NodeId,
        rows: &[bool],
        mode: Mode,
        updates: &mut Vec<(BnSlot, BatchStats<T>)>,
    ) -> Result<NodeId> {
        let Some(bn) = bn else {
            return layer.forward(g, store, x);
        };
        let linear = DenseLayer {
            activation: Activation::None,
            ..layer.clone()
        };
        let y = linear.forward(g, store, x)?;
        let (y, stats) = bn.forward(g, store, y, rows, mode)?;
        if let Some(s) = stats {
            updates.push((slot, s));
        }
        Ok(match layer.activation {
            Activation::Relu => g.relu(y),
            Activation::None => y,
        })
    }

    /// Per-step annotations `[T·n × 2H]` and the layout they follow.
    #[allow(clippy::too_many_arguments)]
    fn annotations<'b>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &'b SequenceBatch,
        mode: Mode,
        dropout: Option<&DropoutSpec>,
        rng: &mut ChaCha8Rng,
        updates: &mut Vec<(BnSlot, BatchStats<T>)>,
    ) -> Result<(NodeId, &'b SeqLayout)> {
        let (x, layout) = self.input(g, store, batch)?;
        let rows = layout.row_mask();
        let (in_slot, out_slot) = self.slots();
        let mut f = match (&self.input_dense, &self.input_bn) {
            (Some(dense), bn) => Self::dense_block(
                g,
                store,
                dense,
                bn.as_ref(),
                in_slot,
                x,
                &rows,
                mode,
                updates,
            )?,
            (None, Some(bn)) => {
                let (y, stats) = bn.forward(g, store, x, &rows, mode)?;
                if let Some(s) = stats {
                    updates.push((in_slot, s));
                }
                y
            }
            (None, None) => x,
        };
        if let Some(d) = dropout {
            f = d.apply(g, f, mode, rng)?;
        }
        let r = self.rnn.run(g, store, f, layout)?;
        let z = Self::dense_block(
            g,
            store,
            &self.output_dense,
            self.output_bn.as_ref(),
            out_slot,
            r,
            &rows,
            mode,
            updates,
        )?;
        Ok((z, layout))
    }

    /// Context vector of this branch alone (conditioned when `condition`
    /// is given).
    #[allow(clippy::too_many_arguments)]
    pub fn context(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &SequenceBatch,
        mode: Mode,
        dropout: Option<&DropoutSpec>,
        condition: Option<NodeId>,
        rng: &mut ChaCha8Rng,
        updates: &mut Vec<(BnSlot, BatchStats<T>)>,
    ) -> Result<ContextOutput> {
        let (z, layout) = self.annotations(g, store, batch, mode, dropout, rng, updates)?;
        match &self.scorer {
            None => context_last(g, z, layout),
            Some(s) => context_attention(g, store, z, layout, s, condition),
        }
    }

    fn bn_mut(&mut self, slot: BnSlot) -> Option<&mut BatchNormLayer<T>> {
        match slot {
            BnSlot::TextInput | BnSlot::AudioInput => self.input_bn.as_mut(),
            BnSlot::TextOutput | BnSlot::AudioOutput => self.output_bn.as_mut(),
            BnSlot::Classifier => None,
        }
    }
}

impl<T: Scalar> QuestionDetector<T> {
    /// Builds and initializes every parameter from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let audio = if config.uses_audio() {
            Some(Branch::build(
                Modality::Audio,
                &config,
                &mut store,
                None,
                &mut rng,
            )?)
        } else {
            None
        };
        let cond_dim = (config.fusion == Fusion::Conditional).then(|| config.annotation_dim());
        let text = if config.uses_text() {
            Some(Branch::build(
                Modality::Text,
                &config,
                &mut store,
                cond_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let d = config.context_dim();
        let classifier_bn = if config.regularizer == Regularizer::BatchNorm {
            Some(BatchNormLayer::new(&mut store, "clf.bn", d)?)
        } else {
            None
        };
        let w = store.add(
            "clf.w",
            crate::init::uniform(&[d], crate::init::INIT_SCALE, &mut rng),
        )?;
        let b = store.add("clf.b", Tensor::zeros(&[1]))?;
        let dropout = if config.regularizer == Regularizer::Dropout {
            Some(DropoutSpec::new(config.dropout)?)
        } else {
            None
        };
        Ok(QuestionDetector {
            config,
            store,
            text,
            audio,
            classifier_bn,
            w,
            b,
            dropout,
            vocab: None,
        })
    }

    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        if self.config.uses_text() && vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model was configured for {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.vocab = Some(vocab);
        Ok(self)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Builds the graph for one batch. `rng` drives dropout masks only.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &SequenceBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<T>> {
        let store = &self.store;
        let dropout = self.dropout.as_ref();
        let mut updates = Vec::new();
        let audio = match &self.audio {
            Some(br) => {
                Some(br.context(g, store, batch, mode, dropout, None, rng, &mut updates)?)
            }
            None => None,
        };
        let condition = match (self.config.fusion, &audio) {
            (Fusion::Conditional, Some(a)) => Some(a.context),
            _ => None,
        };
        let text = match &self.text {
            Some(br) => {
                Some(br.context(g, store, batch, mode, dropout, condition, rng, &mut updates)?)
            }
            None => None,
        };
        let mut c = match (&text, &audio) {
            (Some(t), Some(a)) => g.concat(&[t.context, a.context], 1)?,
            (Some(t), None) => t.context,
            (None, Some(a)) => a.context,
            (None, None) => unreachable!("validated configs use at least one modality"),
        };
        if let Some(bn) = &self.classifier_bn {
            let rows = vec![true; g.shape(c)[0]];
            let (y, stats) = bn.forward(g, store, c, &rows, mode)?;
            if let Some(s) = stats {
                updates.push((BnSlot::Classifier, s));
            }
            c = y;
        }
        if let Some(d) = dropout {
            c = d.apply(g, c, mode, rng)?;
        }
        let logits = self.classify(g, c)?;
        Ok(ForwardOutput {
            logits,
            text_alphas: text.and_then(|t| t.alphas),
            audio_alphas: audio.and_then(|a| a.alphas),
            bn_updates: updates,
        })
    }

    /// `c·w + b` for a `[n × D]` classifier input.
    pub fn classify(&self, g: &mut Graph<T>, c: NodeId) -> Result<NodeId> {
        let d = self.config.context_dim();
        let w = g.param(&self.store, self.w);
        let w = g.reshape(w, &[d, 1])?;
        let b = g.param(&self.store, self.b);
        let y = g.matmul(c, w)?;
        let y = g.add(y, b)?;
        let n = g.shape(y)[0];
        g.reshape(y, &[n])
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BnSlot, BatchStats<T>)]) {
        for (slot, stats) in updates {
            let layer = match slot {
                BnSlot::TextInput | BnSlot::TextOutput => {
                    self.text.as_mut().and_then(|b| b.bn_mut(*slot))
                }
                BnSlot::AudioInput | BnSlot::AudioOutput => {
                    self.audio.as_mut().and_then(|b| b.bn_mut(*slot))
                }
                BnSlot::Classifier => self.classifier_bn.as_mut(),
            };
            if let Some(l) = layer {
                l.update_running(stats);
            }
        }
    }

    /// Every batch-norm layer with its parameter-name prefix.
    pub fn bn_layers(&self) -> Vec<(String, &BatchNormLayer<T>)> {
        let mut out = Vec::new();
        for (name, br) in [("text", &self.text), ("audio", &self.audio)] {
            if let Some(b) = br {
                if let Some(l) = &b.input_bn {
                    out.push((format!("{name}.f_bn"), l));
                }
                if let Some(l) = &b.output_bn {
                    out.push((format!("{name}.h_bn"), l));
                }
            }
        }
        if let Some(l) = &self.classifier_bn {
            out.push(("clf.bn".to_owned(), l));
        }
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<(String, &mut BatchNormLayer<T>)> {
        let mut out = Vec::new();
        for (name, br) in [("text", &mut self.text), ("audio", &mut self.audio)] {
            if let Some(b) = br {
                if let Some(l) = &mut b.input_bn {
                    out.push((format!("{name}.f_bn"), l));
                }
                if let Some(l) = &mut b.output_bn {
                    out.push((format!("{name}.h_bn"), l));
                }
            }
        }
        if let Some(l) = &mut self.classifier_bn {
            out.push(("clf.bn".to_owned(), l));
        }
        out
    }

    /// Infer-mode probabilities `σ(logit)`.
    pub fn scores(&self, batch: &SequenceBatch) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, batch, Mode::Infer, &mut rng)?;
        let p = g.sigmoid(out.logits);
        Ok(g.value(p).data().to_vec())
    }

    pub fn predict(&self, batch: &SequenceBatch, threshold: f64) -> Result<Vec<u8>> {
        Ok(threshold_scores(&self.scores(batch)?, threshold))
    }
}

/// Label 1 iff `score ≥ threshold`.
pub fn threshold_scores<T: Scalar>(scores: &[T], threshold: f64) -> Vec<u8> {
    scores
        .iter()
        .map(|s| u8::from(s.as_f64() >= threshold))
        .collect()
}

impl<T: Scalar> ParamHost<T> for QuestionDetector<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
