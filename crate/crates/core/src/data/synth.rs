//! Synthetic text + audio corpus with pitch-marked questions.
//!
//! Yes-no and wh questions are recognizable from their words. Declarative
//! questions and statements are drawn from one shared template pool, so only
//! the terminal pitch movement of the audio separates them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{EncodedExample, MAX_WORDS, MIN_WORDS};
use super::records::{write_records, AudioSource, Example, RECORDS_FILE};
use crate::error::{Error, Result};
use crate::features::{
    audio_features, clean_and_tokenize, write_wav, AudioSignal, MfccConfig, Vocab,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    YesNo,
    Wh,
    DeclarativeQuestion,
    Statement,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::YesNo,
        QuestionType::Wh,
        QuestionType::DeclarativeQuestion,
        QuestionType::Statement,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            QuestionType::YesNo => "yes-no",
            QuestionType::Wh => "wh",
            QuestionType::DeclarativeQuestion => "declarative-question",
            QuestionType::Statement => "statement",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.tag() == tag)
    }

    pub fn label(self) -> u8 {
        u8::from(self != QuestionType::Statement)
    }

    fn short(self) -> &'static str {
        match self {
            QuestionType::YesNo => "yn",
            QuestionType::Wh => "wh",
            QuestionType::DeclarativeQuestion => "dq",
            QuestionType::Statement => "st",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Proportions {
    pub yes_no: f64,
    pub wh: f64,
    pub declarative_question: f64,
    pub statement: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Proportions {
            yes_no: 0.15,
            wh: 0.15,
            declarative_question: 0.2,
            statement: 0.5,
        }
    }
}

impl Proportions {
    pub fn only(kind: QuestionType) -> Self {
        let mut p = Proportions {
            yes_no: 0.0,
            wh: 0.0,
            declarative_question: 0.0,
            statement: 0.0,
        };
        *p.get_mut(kind) = 1.0;
        p
    }

    pub fn get(&self, kind: QuestionType) -> f64 {
        match kind {
            QuestionType::YesNo => self.yes_no,
            QuestionType::Wh => self.wh,
            QuestionType::DeclarativeQuestion => self.declarative_question,
            QuestionType::Statement => self.statement,
        }
    }

    fn get_mut(&mut self, kind: QuestionType) -> &mut f64 {
        match kind {
            QuestionType::YesNo => &mut self.yes_no,
            QuestionType::Wh => &mut self.wh,
            QuestionType::DeclarativeQuestion => &mut self.declarative_question,
            QuestionType::Statement => &mut self.statement,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub proportions: Proportions,
    /// Probability of a short (3–4 words), intermediate (5–20) and long
    /// (21–25) utterance.
    pub length_mix: [f64; 3],
    /// Speaker base pitch is drawn uniformly from this range (Hz).
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum relative pitch rise over the final quarter of a question.
    pub rise: f64,
    /// Minimum relative pitch fall over the final quarter of a statement.
    pub fall: f64,
    /// Extra random movement added on top of `rise` / `fall`.
    pub contour_jitter: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub word_secs: f64,
    pub lead_secs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_examples: 2000,
            seed: 0,
            sample_rate: 16000,
            proportions: Proportions::default(),
            length_mix: [0.15, 0.7, 0.15],
            f0_min: 110.0,
            f0_max: 220.0,
            rise: 0.3,
            fall: 0.15,
            contour_jitter: 0.1,
            noise: 0.01,
            word_secs: 0.2,
            lead_secs: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let p: Vec<f64> = QuestionType::ALL
            .iter()
            .map(|&k| self.proportions.get(k))
            .collect();
        if p.iter().any(|&v| v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "question-type proportions {p:?} must be non-negative and sum to 1"
            )));
        }
        if self.length_mix.iter().any(|&v| v < 0.0)
            || (self.length_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "length mix {:?} must be non-negative and sum to 1",
                self.length_mix
            )));
        }
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !(0.0 < self.f0_min && self.f0_min <= self.f0_max) {
            return Err(Error::Config("need 0 < f0_min <= f0_max".into()));
        }
        if self.rise < 0.2 || !(0.1..1.0).contains(&self.fall) {
            return Err(Error::Config(format!(
                "questions must rise by at least 20% and statements fall by at least 10% (and under 100%), got rise {} fall {}",
                self.rise, self.fall
            )));
        }
        if self.contour_jitter < 0.0 || self.noise < 0.0 {
            return Err(Error::Config(
                "jitter and noise must be non-negative".into(),
            ));
        }
        if self.fall + self.contour_jitter >= 1.0 {
            return Err(Error::Config(
                "fall plus jitter must stay under 100%".into(),
            ));
        }
        if self.word_secs <= 0.0 || self.lead_secs < 0.0 {
            return Err(Error::Config(
                "word_secs must be positive, lead_secs non-negative".into(),
            ));
        }
        Ok(())
    }
}

const SUBJECTS: &[&str] = &["you", "we", "they"];
const VERBS: &[&str] = &[
    "attend", "finish", "review", "call", "schedule", "cancel", "move", "check", "send", "plan",
];
const VERBS_PAST: &[&str] = &[
    "attended",
    "finished",
    "reviewed",
    "called",
    "scheduled",
    "cancelled",
    "moved",
    "checked",
    "sent",
    "planned",
];
const NOUNS: &[&str] = &[
    "meeting",
    "report",
    "project",
    "budget",
    "call",
    "presentation",
    "contract",
    "schedule",
    "demo",
    "review",
    "invoice",
    "draft",
];
const TIMES: &[&str] = &[
    "today",
    "tomorrow",
    "next week",
    "this afternoon",
    "on monday",
    "after lunch",
    "tonight",
];
const PLACES: &[&str] = &["office", "lobby", "conference room", "kitchen", "library"];

const YES_NO: &[&str] = &[
    "is it ready",
    "did you go",
    "can we start",
    "are you there",
    "is the {N} ready",
    "did {S} {V} the {N}",
    "are {S} going to the {N}",
    "can {S} {V} the {N} {T}",
    "have {S} seen the {N}",
    "do {S} want to {V} the {N}",
    "will {S} {V} the {N}",
];
const WH: &[&str] = &[
    "where is it",
    "who called you",
    "what is that",
    "where have {S} been",
    "what did {S} {V}",
    "when does the {N} start",
    "why is the {N} late",
    "who will {V} the {N}",
    "how do {S} {V} the {N}",
    "which {N} did {S} {V}",
];
const DECLARATIVE: &[&str] = &[
    "it is ready",
    "you went there",
    "we can start",
    "they are here",
    "the {N} is ready",
    "{S} {VP} the {N}",
    "{S} are at the {N}",
    "{S} want to {V} the {N}",
    "{S} will {V} the {N}",
    "{S} have seen the {N}",
    "the {N} starts {T}",
];
const EXTENSIONS: &[&str] = &[
    "with the {N}",
    "in the {P}",
    "after the {N}",
    "before the {N}",
    "for the {N} team",
    "because the {N} was late",
    "and then {S} {VP} the {N}",
    "{T}",
];
const FILLERS: &[&str] = &["today", "again", "now", "too", "anyway", "later", "there"];

fn templates(kind: QuestionType) -> &'static [&'static str] {
    match kind {
        QuestionType::YesNo => YES_NO,
        QuestionType::Wh => WH,
        QuestionType::DeclarativeQuestion | QuestionType::Statement => DECLARATIVE,
    }
}

fn fill(template: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    fn pick(pool: &[&'static str], rng: &mut ChaCha8Rng) -> &'static str {
        pool.choose(rng).copied().unwrap_or("")
    }
    let mut out = Vec::new();
    for tok in template.split_whitespace() {
        let word = match tok {
            "{S}" => pick(SUBJECTS, rng),
            "{V}" => pick(VERBS, rng),
            "{VP}" => pick(VERBS_PAST, rng),
            "{N}" => pick(NOUNS, rng),
            "{T}" => pick(TIMES, rng),
            "{P}" => pick(PLACES, rng),
            w => w,
        };
        out.extend(word.split_whitespace().map(str::to_owned));
    }
    out
}

fn target_length(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    if u < mix[0] {
        rng.random_range(MIN_WORDS..=4)
    } else if u < mix[0] + mix[1] {
        rng.random_range(5..=20)
    } else {
        rng.random_range(21..=MAX_WORDS)
    }
}

/// Words of one utterance. Declarative questions and statements consume the
/// random stream identically, so the same stream yields the same text.
fn make_text(kind: QuestionType, mix: &[f64; 3], rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let target = target_length(mix, rng);
    let pool = templates(kind);
    let template_id = loop {
        let id = rng.random_range(0..pool.len());
        // short targets need a short base
        if target > 4 || !pool[id].contains('{') {
            break id;
        }
    };
    let mut words = fill(pool[template_id], rng);
    let mut attempts = 0;
    while words.len() < target && attempts < 64 {
        attempts += 1;
        let ext = fill(EXTENSIONS.choose(rng).copied().unwrap_or("{T}"), rng);
        if words.len() + ext.len() <= target {
            words.extend(ext);
        }
    }
    while words.len() < target {
        words.push(FILLERS.choose(rng).copied().unwrap_or("now").to_owned());
    }
    (template_id, words)
}

/// Voiced carrier (fundamental plus two harmonics) whose pitch holds near
/// the speaker's base for the first three quarters and then moves linearly
/// by `1 + movement` over the final quarter.
fn synthesize(
    words: usize,
    movement: f64,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> AudioSignal {
    let sr = config.sample_rate as f64;
    let dur = config.lead_secs + config.word_secs * words as f64;
    let n = (dur * sr).round() as usize;
    let base = rng.random_range(config.f0_min..=config.f0_max);
    let wobble_hz = rng.random_range(0.5..2.0);
    let wobble_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let knee = 0.75 * dur;
    let fade = 0.02;
    let wobble = |t: f64| 1.0 + 0.03 * (2.0 * PI * wobble_hz * t + wobble_phase).sin();
    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = if t < knee {
            base * wobble(t)
        } else {
            base * wobble(knee) * (1.0 + movement * (t - knee) / (dur - knee))
        };
        phase += 2.0 * PI * f0 / sr;
        let syllable = 0.6 + 0.4 * (PI * t / config.word_secs).sin().abs();
        let edge = (t / fade).min((dur - t) / fade).clamp(0.0, 1.0);
        let voiced = (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin()) / 1.75;
        let mut s = 0.5 * syllable * edge * voiced;
        if config.noise > 0.0 {
            s += noise.sample(rng);
        }
        samples.push(s.clamp(-1.0, 1.0));
    }
    AudioSignal {
        samples,
        sample_rate: config.sample_rate,
    }
}

/// Exact per-type counts by largest remainder.
fn type_counts(config: &SynthConfig) -> Vec<(QuestionType, usize)> {
    let n = config.n_examples as f64;
    let raw: Vec<(QuestionType, f64)> = QuestionType::ALL
        .iter()
        .map(|&k| (k, config.proportions.get(k) * n))
        .collect();
    let mut counts: Vec<usize> = raw.iter().map(|(_, v)| v.floor() as usize).collect();
    let mut left = config.n_examples - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a].1 - raw[a].1.floor();
        let fb = raw[b].1 - raw[b].1.floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if raw[i].1 > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    raw.iter().map(|(k, _)| *k).zip(counts).collect()
}

fn stream(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 2) | salt);
    rng
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub examples: Vec<Example>,
    pub signals: Vec<AudioSignal>,
}

pub const WAV_DIR: &str = "wav";

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut kinds: Vec<QuestionType> = type_counts(config)
        .into_iter()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c))
        .collect();
    let mut order_rng = stream(config.seed, 0, 3);
    rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut order_rng);

    let items: Vec<(Example, AudioSignal)> = kinds
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut text_rng = stream(config.seed, i, 1);
            let mut audio_rng = stream(config.seed, i, 2);
            let (template_id, words) = make_text(kind, &config.length_mix, &mut text_rng);
            let jitter = audio_rng.random_range(0.0..=config.contour_jitter);
            let movement = if kind.label() == 1 {
                config.rise + jitter
            } else {
                -(config.fall + jitter)
            };
            let signal = synthesize(words.len(), movement, config, &mut audio_rng);
            let id = format!("{}-{:06}", kind.short(), i);
            let mut text = words.join(" ");
            text.push(if matches!(kind, QuestionType::YesNo | QuestionType::Wh) {
                '?'
            } else {
                '.'
            });
            let mut meta = BTreeMap::new();
            meta.insert("type".to_owned(), kind.tag().into());
            meta.insert("template".to_owned(), template_id.into());
            let example = Example {
                audio: AudioSource::Wav(PathBuf::from(format!("{WAV_DIR}/{id}.wav"))),
                id,
                text,
                label: kind.label(),
                meta,
            };
            (example, signal)
        })
        .collect();
    let (examples, signals) = items.into_iter().unzip();
    Ok(SyntheticCorpus { examples, signals })
}

impl SyntheticCorpus {
    /// Writes `records.jsonl` and `wav/<id>.wav` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let wav_dir = dir.join(WAV_DIR);
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        self.examples
            .par_iter()
            .zip(&self.signals)
            .try_for_each(|(e, s)| match &e.audio {
                AudioSource::Wav(p) => write_wav(&dir.join(p), s),
                AudioSource::Features(_) => Ok(()),
            })?;
        write_records(&dir.join(RECORDS_FILE), &self.examples)
    }

    /// Encodes straight from the in-memory waveforms. The WAV quantization
    /// step is skipped, so features differ slightly from a written-then-read
    /// corpus.
    pub fn encode(&self, vocab: &Vocab, mfcc: &MfccConfig) -> Result<Vec<EncodedExample>> {
        self.examples
            .par_iter()
            .zip(&self.signals)
            .map(|(e, s)| {
                let tokens = clean_and_tokenize(&e.text);
                Ok(EncodedExample {
                    id: e.id.clone(),
                    label: e.label,
                    words: tokens.len(),
                    tokens: vocab.encode(&tokens),
                    audio: audio_features(s, mfcc)?,
                    kind: e.kind().map(str::to_owned),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::batch::word_count;
    use crate::features::log_mel_energies;

    fn small(n: usize, proportions: Proportions) -> SynthConfig {
        SynthConfig {
            n_examples: n,
            seed: 11,
            proportions,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shared_templates_between_declaratives_and_statements() {
        let dq = generate_synthetic(&small(
            40,
            Proportions::only(QuestionType::DeclarativeQuestion),
        ))
        .unwrap();
        let st =
            generate_synthetic(&small(40, Proportions::only(QuestionType::Statement))).unwrap();
        for (a, b) in dq.examples.iter().zip(&st.examples) {
            assert_eq!(a.text, b.text);
            assert_ne!(a.id, b.id);
            assert_eq!(a.meta["template"], b.meta["template"]);
            assert_eq!((a.label, b.label), (1, 0));
        }
        assert!(dq.signals.iter().zip(&st.signals).any(|(a, b)| a != b));
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let cfg = small(12, Proportions::default());
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&cfg).unwrap().write(d1.path()).unwrap();
        generate_synthetic(&cfg).unwrap().write(d2.path()).unwrap();
        let r1 = std::fs::read(d1.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(r1, std::fs::read(d2.path().join(RECORDS_FILE)).unwrap());
        let corpus = generate_synthetic(&cfg).unwrap();
        for e in &corpus.examples {
            let AudioSource::Wav(p) = &e.audio else {
                unreachable!()
            };
            assert_eq!(
                std::fs::read(d1.path().join(p)).unwrap(),
                std::fs::read(d2.path().join(p)).unwrap()
            );
        }
    }

    #[test]
    fn proportions_and_labels() {
        let c = generate_synthetic(&small(200, Proportions::default())).unwrap();
        let count = |t: &str| c.examples.iter().filter(|e| e.kind() == Some(t)).count();
        assert_eq!(count("yes-no"), 30);
        assert_eq!(count("wh"), 30);
        assert_eq!(count("declarative-question"), 40);
        assert_eq!(count("statement"), 100);
        for e in &c.examples {
            let kind = QuestionType::from_tag(e.kind().unwrap()).unwrap();
            assert_eq!(e.label, kind.label());
        }
    }

    #[test]
    fn every_example_passes_the_length_filter() {
        let c = generate_synthetic(&small(300, Proportions::default())).unwrap();
        let mut buckets = [0usize; 3];
        for e in &c.examples {
            let n = word_count(&e.text);
            assert!((MIN_WORDS..=MAX_WORDS).contains(&n), "{n}: {}", e.text);
            buckets[match n {
                0..=4 => 0,
                5..=20 => 1,
                _ => 2,
            }] += 1;
        }
        assert!(buckets.iter().all(|&b| b > 0), "{buckets:?}");
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.proportions.statement = 0.6;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            rise: 0.1,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    fn mel_centroid(e: &crate::tensor::Tensor<f64>, frames: std::ops::Range<usize>) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for f in frames {
            for (m, &l) in e.row(f).iter().enumerate() {
                num += m as f64 * l.exp();
                den += l.exp();
            }
        }
        num / den
    }

    #[test]
    fn rising_clip_moves_mel_centroid_up() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small(6, Proportions::only(QuestionType::DeclarativeQuestion))
        };
        let c = generate_synthetic(&cfg).unwrap();
        for s in &c.signals {
            let e = log_mel_energies(s, &MfccConfig::default()).unwrap();
            let q = e.rows() / 4;
            let first = mel_centroid(&e, 0..q);
            let last = mel_centroid(&e, e.rows() - q..e.rows());
            assert!(last > first, "{first} vs {last}");
        }
    }
}
