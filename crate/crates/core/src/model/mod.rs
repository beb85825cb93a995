//! The seven question-detection model families and their archive format.

mod config;
mod detector;
mod io;

pub use config::{
    cell_name, parse_cell, Fusion, InputMode, ModelConfig, ModelRow, Regularizer, AUDIO_DIM, CELLS,
    DEFAULT_DROPOUT, DEFAULT_WIDTH,
};
pub use detector::{threshold_scores, BnSlot, Branch, ForwardOutput, Modality, QuestionDetector};
pub use io::{FORMAT_VERSION, MAGIC};

/// Closed-form parameter count of a configuration.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden;
    let d = cfg.embed_dim;
    let a2 = cfg.annotation_dim();
    let bn = cfg.regularizer == Regularizer::BatchNorm;
    let gates = match cfg.cell {
        crate::recurrent::CellKind::Gru => 3,
        crate::recurrent::CellKind::Lstm => 4,
    };
    let birnn = 2 * gates * (d * h + h * h + h);
    let dense = |i: usize, o: usize| i * o + if bn { 2 * o } else { o };
    let attention = |cond: usize| {
        a2 * cfg.attention_width + cond * cfg.attention_width + 2 * cfg.attention_width
    };
    let cond = if cfg.fusion == Fusion::Conditional {
        a2
    } else {
        0
    };
    let mut total = 0;
    if cfg.uses_text() {
        total += cfg.vocab_size * d + if bn { 2 * d } else { 0 };
        total += birnn + dense(2 * h, a2);
        if cfg.context_fn == crate::context::ContextFn::C2 {
            total += attention(cond);
        }
    }
    if cfg.uses_audio() {
        total += dense(cfg.audio_dim, d) + birnn + dense(2 * h, a2);
        if cfg.context_fn == crate::context::ContextFn::C2 {
            total += attention(0);
        }
    }
    let c = cfg.context_dim();
    total + c + 1 + if bn { 2 * c } else { 0 }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_with, Graph, Stencil};
    use crate::data::{EncodedExample, SequenceBatch};
    use crate::error::Error;
    use crate::features::Vocab;
    use crate::layers::Mode;
    use crate::recurrent::CellKind;
    use crate::tensor::Tensor;

    const VOCAB: usize = 9;

    fn small(row: ModelRow, cell: CellKind, reg: Regularizer) -> ModelConfig {
        ModelConfig {
            audio_dim: 5,
            ..ModelConfig::new(row, cell, reg, VOCAB)
                .with_sizes(3, 4, 3)
                .with_seed(7)
        }
    }

    fn batch(text_lens: &[usize], audio_lens: &[usize], dim: usize, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<EncodedExample> = text_lens
            .iter()
            .zip(audio_lens)
            .enumerate()
            .map(|(i, (&tl, &al))| EncodedExample {
                id: format!("x{i}"),
                label: (i % 2) as u8,
                words: tl,
                tokens: (0..tl).map(|_| rng.random_range(1..VOCAB)).collect(),
                audio: Tensor::new(
                    &[al, dim],
                    (0..al * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                kind: None,
            })
            .collect();
        SequenceBatch::from_examples(&items.iter().collect::<Vec<_>>()).unwrap()
    }

    fn std_batch() -> SequenceBatch {
        batch(&[3, 7, 5, 4], &[5, 12, 8, 6], 5, 1)
    }

    /// Spreads every weight over U(-0.6, 0.6) so gradients sit above difference noise.
    fn spread(model: &mut QuestionDetector<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_owned();
            let v = model.store.value_mut(id);
            for (k, x) in v.data_mut().iter_mut().enumerate() {
                if name.ends_with(".E") && k < 4 {
                    continue;
                }
                *x = rng.random_range(-0.6..0.6);
            }
        }
    }

    #[test]
    fn text_c1_gru_parameter_set() {
        let m = QuestionDetector::<f64>::build(small(
            ModelRow::TextC1,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        let mut names: Vec<_> = m.store.names().into_iter().map(str::to_owned).collect();
        names.sort();
        let mut want = vec!["clf.b", "clf.w", "text.embed.E", "text.h.W", "text.h.b"];
        let gru = [
            "W_r", "U_r", "b_r", "W_u", "U_u", "b_u", "W_c", "U_c", "b_c",
        ];
        let dirs: Vec<String> = ["fwd", "bwd"]
            .iter()
            .flat_map(|d| gru.iter().map(move |p| format!("text.rnn.{d}.{p}")))
            .collect();
        want.extend(dirs.iter().map(String::as_str));
        want.sort();
        assert_eq!(names, want);
    }

    #[test]
    fn conditional_bn_has_conditioning_path_and_bn_layers() {
        let m = QuestionDetector::<f64>::build(small(
            ModelRow::ConditionC2,
            CellKind::Lstm,
            Regularizer::BatchNorm,
        ))
        .unwrap();
        assert!(m.store.id_of("text.att.U_a").is_some());
        assert!(m.store.id_of("audio.att.U_a").is_none());
        let bn: Vec<_> = m.bn_layers().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            bn,
            [
                "text.f_bn",
                "text.h_bn",
                "audio.f_bn",
                "audio.h_bn",
                "clf.bn"
            ]
        );
        assert!(m.store.id_of("audio.f.b").is_none());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(ModelRow::CombinationC2, CellKind::Gru, Regularizer::Dropout);
        let a = QuestionDetector::<f64>::build(cfg.clone()).unwrap();
        let b = QuestionDetector::<f64>::build(cfg.clone()).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
        let c = QuestionDetector::<f64>::build(cfg.with_seed(8)).unwrap();
        assert_ne!(a.store.value(a.w), c.store.value(c.w));
    }

    #[test]
    fn invalid_config_is_rejected_at_build() {
        let cfg = ModelConfig {
            context_fn: crate::context::ContextFn::C1,
            ..small(ModelRow::ConditionC2, CellKind::Gru, Regularizer::None)
        };
        assert!(matches!(
            QuestionDetector::<f64>::build(cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_classifier_scores_one_half() {
        for row in ModelRow::ALL {
            let mut m =
                QuestionDetector::<f64>::build(small(row, CellKind::Gru, Regularizer::None))
                    .unwrap();
            m.store.value_mut(m.w).fill(0.0);
            m.store.value_mut(m.b).fill(0.0);
            let s = m.scores(&std_batch()).unwrap();
            assert!(s.iter().all(|&v| v == 0.5), "{row}");
        }
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        for row in ModelRow::ALL {
            for reg in Regularizer::ALL {
                let mut m =
                    QuestionDetector::<f64>::build(small(row, CellKind::Lstm, reg)).unwrap();
                spread(&mut m, 3);
                let s = m.scores(&std_batch()).unwrap();
                assert_eq!(s.len(), 4);
                assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn missing_modality_is_an_input_error() {
        let m = QuestionDetector::<f64>::build(small(
            ModelRow::AudioC1,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        let mut b = std_batch();
        b.audio = None;
        assert!(matches!(m.scores(&b), Err(Error::Input(_))));
    }

    #[test]
    fn predict_threshold_convention() {
        assert_eq!(threshold_scores(&[0.5, 0.49, 0.9], 0.5), vec![1, 0, 1]);
        assert_eq!(threshold_scores(&[0.0, 0.3], 0.0), vec![1, 1]);
        let mut m = QuestionDetector::<f64>::build(small(
            ModelRow::TextC2,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        spread(&mut m, 4);
        let b = std_batch();
        let s = m.scores(&b).unwrap();
        let by_hand: Vec<u8> = s.iter().map(|&v| u8::from(v >= 0.5)).collect();
        assert_eq!(m.predict(&b, 0.5).unwrap(), by_hand);
    }

    #[test]
    fn combinational_equals_manual_composition() {
        let mut m = QuestionDetector::<f64>::build(small(
            ModelRow::CombinationC2,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        spread(&mut m, 5);
        let b = std_batch();
        let scores = m.scores(&b).unwrap();

        // contexts of each branch alone, then concat and the classifier by hand
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut upd = Vec::new();
        let text = m.text.as_ref().unwrap();
        let audio = m.audio.as_ref().unwrap();
        let ct = text
            .context(
                &mut g,
                &m.store,
                &b,
                Mode::Infer,
                None,
                None,
                &mut rng,
                &mut upd,
            )
            .unwrap();
        let ca = audio
            .context(
                &mut g,
                &m.store,
                &b,
                Mode::Infer,
                None,
                None,
                &mut rng,
                &mut upd,
            )
            .unwrap();
        let w = m.store.value(m.w).data();
        let bias = m.store.value(m.b).data()[0];
        for (i, &score) in scores.iter().enumerate() {
            let c: Vec<f64> = g
                .value(ct.context)
                .row(i)
                .iter()
                .chain(g.value(ca.context).row(i))
                .copied()
                .collect();
            let logit: f64 = c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + bias;
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!((p - score).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_audio_weights_reduce_to_text_model() {
        let comb_cfg = small(ModelRow::CombinationC2, CellKind::Lstm, Regularizer::None);
        let mut comb = QuestionDetector::<f64>::build(comb_cfg.clone()).unwrap();
        spread(&mut comb, 6);
        let h2 = comb_cfg.annotation_dim();
        comb.store.value_mut(comb.w).data_mut()[h2..].fill(0.0);
        let mut text = QuestionDetector::<f64>::build(small(
            ModelRow::TextC2,
            CellKind::Lstm,
            Regularizer::None,
        ))
        .unwrap();
        let ids: Vec<_> = text.store.ids().collect();
        for id in ids {
            let name = text.store.name(id).to_owned();
            let src = comb.store.by_name(&name).unwrap().value.clone();
            *text.store.value_mut(id) = if name == "clf.w" {
                Tensor::from_vec(src.data()[..h2].to_vec())
            } else {
                src
            };
        }
        let b = std_batch();
        let (sc, st) = (comb.scores(&b).unwrap(), text.scores(&b).unwrap());
        for (a, t) in sc.iter().zip(&st) {
            assert!((a - t).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for row in ModelRow::ALL {
            for cell in CELLS {
                for reg in Regularizer::ALL {
                    let cfg = small(row, cell, reg);
                    let m = QuestionDetector::<f64>::build(cfg.clone()).unwrap();
                    assert_eq!(
                        m.num_params(),
                        expected_param_count(&cfg),
                        "{row} {cell:?} {reg:?}"
                    );
                }
            }
        }
        // default widths, text/c1/GRU without regularization, 1000 words
        let cfg = ModelConfig::new(ModelRow::TextC1, CellKind::Gru, Regularizer::None, 1000);
        let m = QuestionDetector::<f64>::build(cfg).unwrap();
        let birnn = 2 * 3 * (200 * 200 + 200 * 200 + 200);
        assert_eq!(
            m.num_params(),
            1000 * 200 + birnn + 400 * 400 + 400 + 400 + 1
        );
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let mut m = QuestionDetector::<f64>::build(small(
            ModelRow::ConditionC2,
            CellKind::Gru,
            Regularizer::BatchNorm,
        ))
        .unwrap();
        spread(&mut m, 7);
        let words: Vec<String> = (0..VOCAB - 2).map(|i| format!("w{i}")).collect();
        m = m.with_vocab(Vocab::from_tokens(words).unwrap()).unwrap();
        // move running statistics away from their initial values
        let b = std_batch();
        let mut g = Graph::new();
        let out = m
            .forward(&mut g, &b, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        m.apply_bn_updates(&out.bn_updates);
        let bytes = m.to_bytes().unwrap();
        let back = QuestionDetector::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        for ((_, p), (_, q)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        for ((_, a), (_, c)) in m.bn_layers().iter().zip(back.bn_layers()) {
            assert_eq!(a.running_mean, c.running_mean);
            assert_eq!(a.running_var, c.running_var);
        }
        let (s1, s2) = (m.scores(&b).unwrap(), back.scores(&b).unwrap());
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() <= 1e-15);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qdm");
        m.save(&path).unwrap();
        assert_eq!(
            QuestionDetector::<f64>::load(&path)
                .unwrap()
                .to_bytes()
                .unwrap(),
            bytes
        );
    }

    #[test]
    fn damaged_archives_are_rejected() {
        let m = QuestionDetector::<f64>::build(small(
            ModelRow::TextC2,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            QuestionDetector::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Load(_))
        ));
        let mut bad_version = bytes.clone();
        bad_version[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            QuestionDetector::<f64>::from_bytes(&bad_version),
            Err(Error::Load(_))
        ));
        assert!(matches!(
            QuestionDetector::<f64>::from_bytes(b"nonsense"),
            Err(Error::Load(_))
        ));
    }

    #[test]
    fn vocab_size_mismatch_is_a_config_error() {
        let m = QuestionDetector::<f64>::build(small(
            ModelRow::TextC1,
            CellKind::Gru,
            Regularizer::None,
        ))
        .unwrap();
        let words: Vec<String> = (0..VOCAB - 2).map(|i| format!("w{i}")).collect();
        let m = m.with_vocab(Vocab::from_tokens(words).unwrap()).unwrap();
        let bytes = m.to_bytes().unwrap();
        // rewrite the declared vocabulary size inside the header
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        let patched = header.replace(
            &format!("\"vocab_size\":{VOCAB}"),
            &format!("\"vocab_size\":{}", VOCAB + 1),
        );
        assert_ne!(patched, header);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[20 + len..]);
        assert!(matches!(
            QuestionDetector::<f64>::from_bytes(&out),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_model_gradients_for_every_family() {
        let b = std_batch();
        for row in ModelRow::ALL {
            for cell in CELLS {
                for reg in Regularizer::ALL {
                    let mut m = QuestionDetector::<f64>::build(small(row, cell, reg)).unwrap();
                    spread(&mut m, 9);
                    let ids: Vec<_> = m.store.ids().collect();
                    let report = grad_check_with(
                        &mut m,
                        &ids,
                        Stencil::FourthOrder,
                        3e-4,
                        1e-4,
                        |model, g| {
                            let mut rng = ChaCha8Rng::seed_from_u64(2);
                            let out = model.forward(g, &b, Mode::Train, &mut rng)?;
                            g.bce_with_logits(out.logits, &b.labels)
                        },
                    )
                    .unwrap();
                    assert!(
                        report.passed,
                        "{row} {cell:?} {reg:?}: {:?}",
                        report.worst()
                    );
                }
            }
        }
    }

    #[test]
    fn f32_models_run() {
        let m = QuestionDetector::<f32>::build(small(
            ModelRow::CombinationC1,
            CellKind::Gru,
            Regularizer::BatchNorm,
        ))
        .unwrap();
        let s = m.scores(&std_batch()).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
