//! Prompt construction for the four agent tasks and response parsing.
//!
//! Prompt text is model-agnostic: chat-template control tokens are added by
//! the backend adapter (see [`crate::backend::ChatTemplate`]).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Signal, Stimulus, Vocabulary, MAX_SIGNAL_LEN};
use crate::error::AgentError;
use crate::format::{render_attributes, render_entry, LineStyle};

pub const LABELLING_INSTRUCTION: &str = "You are a language learner who has to learn an artificial language with words and their corresponding features. Your task is to complete the vocabulary by generating a word that describes the last item. Only respond with the word.";

pub const SPEAKING_INSTRUCTION: &str = "You are a language learner who has to learn an artificial language with words and their corresponding features. Your task is to generate a word such that your communication partner can guess the correct meaning of the word. Communicative success is important. Only respond with the word.";

pub const LISTENING_INSTRUCTION: &str = "You are a language learner who has to learn an artificial language with words and their corresponding features. Your task is to complete the vocabulary by interpreting the intended meaning of the word generated by your communication partner. Communicative success is important. Only respond with the complete last item.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTask {
    Labelling,
    Guessing,
    Speaking,
    Listening,
    /// Signal production in the testing block; uses the speaking prompt.
    Testing,
}

impl PromptTask {
    /// Whether the current stimulus is visible in the vocabulary context.
    pub fn includes_current_stimulus(self) -> bool {
        matches!(self, PromptTask::Labelling | PromptTask::Guessing)
    }

    pub fn produces_signal(self) -> bool {
        matches!(self, PromptTask::Labelling | PromptTask::Speaking | PromptTask::Testing)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTask::Labelling => "labelling",
            PromptTask::Guessing => "guessing",
            PromptTask::Speaking => "speaking",
            PromptTask::Listening => "listening",
            PromptTask::Testing => "testing",
        }
    }
}

/// System instructions per task; defaults are the reference wording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Instructions {
    pub labelling: String,
    pub speaking: String,
    pub listening: String,
}

impl Default for Instructions {
    fn default() -> Self {
        Self {
            labelling: LABELLING_INSTRUCTION.to_string(),
            speaking: SPEAKING_INSTRUCTION.to_string(),
            listening: LISTENING_INSTRUCTION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub task: PromptTask,
    pub system_instruction: String,
    pub vocabulary_lines: Vec<String>,
    /// Partial final line the model continues.
    pub stem: String,
    /// Prefilled text to score; `None` for free completion.
    pub continuation: Option<String>,
}

impl Prompt {
    /// Vocabulary lines and stem, newline-separated, without the system text.
    pub fn body(&self) -> String {
        let mut out = String::new();
        for line in &self.vocabulary_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&self.stem);
        out
    }

    /// True when some vocabulary line describes `stimulus`.
    pub fn mentions(&self, stimulus: &Stimulus) -> bool {
        let attrs = render_attributes(stimulus);
        self.vocabulary_lines.iter().any(|l| l.contains(&attrs))
    }
}

fn shuffled_lines<R: Rng + ?Sized>(vocab: &Vocabulary, style: LineStyle, rng: &mut R) -> Vec<String> {
    let mut lines: Vec<String> = vocab.entries().iter().map(|e| render_entry(e, style)).collect();
    lines.shuffle(rng);
    lines
}

fn attribute_stem(stimulus: &Stimulus) -> String {
    format!("{{{},'word':'", render_attributes(stimulus))
}

/// Completion prompt with the whole vocabulary visible, target included.
pub fn build_labelling_prompt<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    stimulus: &Stimulus,
    instructions: &Instructions,
    rng: &mut R,
) -> Result<Prompt, AgentError> {
    if !vocab.contains(stimulus) {
        return Err(AgentError::StimulusMissing(*stimulus));
    }
    Ok(Prompt {
        task: PromptTask::Labelling,
        system_instruction: instructions.labelling.clone(),
        vocabulary_lines: shuffled_lines(vocab, LineStyle::Attributes, rng),
        stem: attribute_stem(stimulus),
        continuation: None,
    })
}

/// Labelling-shaped prompts prefilled with each candidate word, sharing one
/// shuffled context. The continuation closes the quoted word so that a word
/// is never rewarded for being a prefix of another.
pub fn build_guessing_prompts<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    stimulus: &Stimulus,
    candidates: &[Signal],
    instructions: &Instructions,
    rng: &mut R,
) -> Result<Vec<Prompt>, AgentError> {
    let base = build_labelling_prompt(vocab, stimulus, instructions, rng)?;
    Ok(candidates
        .iter()
        .map(|w| Prompt {
            task: PromptTask::Guessing,
            continuation: Some(format!("{w}'}}")),
            ..base.clone()
        })
        .collect())
}

/// Speaking prompt: success-flagged lines, the target's own line removed.
pub fn build_speaker_prompt<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    stimulus: &Stimulus,
    instructions: &Instructions,
    rng: &mut R,
) -> Prompt {
    Prompt {
        task: PromptTask::Speaking,
        system_instruction: instructions.speaking.clone(),
        vocabulary_lines: shuffled_lines(
            &vocab.without(stimulus),
            LineStyle::AttributesWithSuccess,
            rng,
        ),
        stem: attribute_stem(stimulus),
        continuation: None,
    }
}

/// Testing-block prompt; same shape as speaking.
pub fn build_testing_prompt<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    stimulus: &Stimulus,
    instructions: &Instructions,
    rng: &mut R,
) -> Prompt {
    Prompt { task: PromptTask::Testing, ..build_speaker_prompt(vocab, stimulus, instructions, rng) }
}

/// Attribute continuation scored for a listener candidate, e.g.
/// `3,'colour':'blue','amount':3`.
pub fn candidate_continuation(candidate: &Stimulus) -> String {
    format!(
        "{},'colour':'{}','amount':{}",
        candidate.shape(),
        candidate.colour(),
        candidate.amount()
    )
}

/// Listening prompt for one candidate. `target` is the interaction's
/// stimulus, whose line is withheld from the context.
pub fn build_listener_prompt<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    target: &Stimulus,
    signal: &Signal,
    candidate: &Stimulus,
    instructions: &Instructions,
    rng: &mut R,
) -> Prompt {
    build_listener_prompts(vocab, target, signal, std::slice::from_ref(candidate), instructions, rng)
        .pop()
        .expect("one candidate")
}

/// One listening prompt per candidate over a single shuffled context.
pub fn build_listener_prompts<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    target: &Stimulus,
    signal: &Signal,
    candidates: &[Stimulus],
    instructions: &Instructions,
    rng: &mut R,
) -> Vec<Prompt> {
    let lines = shuffled_lines(&vocab.without(target), LineStyle::WordFirst, rng);
    candidates
        .iter()
        .map(|c| Prompt {
            task: PromptTask::Listening,
            system_instruction: instructions.listening.clone(),
            vocabulary_lines: lines.clone(),
            stem: format!("{{'word':'{signal}','shape':"),
            continuation: Some(candidate_continuation(c)),
        })
        .collect()
}

const STRIP_CHARS: &[char] = &['\'', '"', '`', '{', '}', '[', ']', ',', ':'];

/// Extracts a word from raw completion text.
///
/// Leading whitespace, quotes, backticks and brace punctuation are dropped,
/// then the leading run of ASCII letters (lowercased) is taken. The result
/// need not follow the CV syllable grammar.
pub fn parse_signal_response(raw: &str) -> Result<Signal, AgentError> {
    let trimmed = raw.trim_start_matches(|c: char| c.is_whitespace() || STRIP_CHARS.contains(&c));
    let word: String = trimmed
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if word.is_empty() || word.len() > MAX_SIGNAL_LEN {
        return Err(AgentError::UnparseableResponse(raw.to_string()));
    }
    Signal::new(word).map_err(|_| AgentError::UnparseableResponse(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Colour, VocabularyEntry};
    use crate::format::parse_entry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(shape: u8, colour: Colour, amount: u8) -> Stimulus {
        Stimulus::new(shape, colour, amount).unwrap()
    }

    fn table1_train() -> Vocabulary {
        let rows = [
            (3, Colour::Orange, 1, "wipisu"),
            (1, Colour::Green, 2, "sutupepi"),
            (2, Colour::Green, 1, "ginisu"),
            (3, Colour::Green, 1, "wipisu"),
            (1, Colour::Blue, 2, "sunupepi"),
            (1, Colour::Green, 3, "sutupitite"),
            (2, Colour::Orange, 1, "ginusu"),
            (3, Colour::Blue, 3, "wipipitite"),
            (3, Colour::Green, 3, "wipupitite"),
            (3, Colour::Blue, 1, "wipisu"),
            (1, Colour::Blue, 3, "sunupitite"),
            (2, Colour::Orange, 3, "ginupitite"),
            (2, Colour::Blue, 2, "ginupepi"),
            (1, Colour::Orange, 2, "sunupepi"),
            (2, Colour::Orange, 2, "ginupepi"),
        ];
        Vocabulary::from_pairs(
            rows.iter().map(|&(s, c, a, w)| (st(s, c, a), Signal::new(w).unwrap())),
        )
        .unwrap()
    }

    #[test]
    fn labelling_prompt_shape() {
        let vocab = table1_train();
        let target = st(1, Colour::Green, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = build_labelling_prompt(&vocab, &target, &Instructions::default(), &mut rng).unwrap();
        assert_eq!(p.vocabulary_lines.len(), 15);
        assert!(p.mentions(&target));
        assert_eq!(p.stem, "{'shape':1,'colour':'green','amount':3,'word':'");
        assert!(p.stem.ends_with("'word':'"));
        assert!(p.vocabulary_lines.contains(
            &"{'shape':2,'colour':'orange','amount':2,'word':'ginupepi'}".to_string()
        ));
        assert_eq!(p.system_instruction, LABELLING_INSTRUCTION);
    }

    #[test]
    fn labelling_requires_target_in_vocab() {
        let vocab = table1_train();
        let missing = st(1, Colour::Orange, 1);
        let err = build_labelling_prompt(
            &vocab,
            &missing,
            &Instructions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert_eq!(err, AgentError::StimulusMissing(missing));
    }

    #[test]
    fn shuffle_changes_order_not_content() {
        let vocab = table1_train();
        let target = st(1, Colour::Green, 3);
        let ins = Instructions::default();
        let a = build_labelling_prompt(&vocab, &target, &ins, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_labelling_prompt(&vocab, &target, &ins, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.vocabulary_lines, b.vocabulary_lines);
        let (mut la, mut lb) = (a.vocabulary_lines.clone(), b.vocabulary_lines.clone());
        la.sort();
        lb.sort();
        assert_eq!(la, lb);
        let again = build_labelling_prompt(&vocab, &target, &ins, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn speaker_prompt_excludes_target() {
        let mut vocab = table1_train();
        let target = st(2, Colour::Blue, 2);
        vocab.upsert(st(1, Colour::Green, 3), Signal::new("sutupitite").unwrap(), true);
        let p = build_speaker_prompt(&vocab, &target, &Instructions::default(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p.vocabulary_lines.len(), 14);
        assert!(!p.mentions(&target));
        assert!(p.vocabulary_lines.contains(
            &"{'shape':1,'colour':'green','amount':3,'word':'sutupitite','communicativeSuccess':1}"
                .to_string()
        ));
        assert_eq!(p.stem, "{'shape':2,'colour':'blue','amount':2,'word':'");
    }

    #[test]
    fn testing_prompt_for_unseen_stimulus_keeps_all_lines() {
        let vocab = table1_train();
        let unseen = st(1, Colour::Orange, 1);
        let p = build_testing_prompt(&vocab, &unseen, &Instructions::default(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p.vocabulary_lines.len(), 15);
        assert_eq!(p.task, PromptTask::Testing);
    }

    #[test]
    fn listener_prompts_word_first() {
        let vocab = table1_train();
        let target = st(2, Colour::Blue, 2);
        let cands = [target, st(1, Colour::Blue, 2), st(3, Colour::Blue, 3), st(2, Colour::Orange, 1)];
        let heard = Signal::new("ginupepi").unwrap();
        let ps = build_listener_prompts(&vocab, &target, &heard, &cands, &Instructions::default(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(ps.len(), 4);
        for (p, c) in ps.iter().zip(&cands) {
            assert!(p.vocabulary_lines.iter().all(|l| l.starts_with("{'word':'")));
            assert!(!p.mentions(&target));
            assert_eq!(p.vocabulary_lines, ps[0].vocabulary_lines);
            assert_eq!(p.stem, "{'word':'ginupepi','shape':");
            assert_eq!(p.continuation.as_deref().unwrap(), candidate_continuation(c));
        }
        assert_eq!(ps[0].continuation.as_deref(), Some("2,'colour':'blue','amount':2"));
    }

    #[test]
    fn guessing_prompts_include_target_and_close_word() {
        let vocab = table1_train();
        let target = st(1, Colour::Green, 2);
        let cands = [Signal::new("sutupepi").unwrap(), Signal::new("wipisu").unwrap()];
        let ps = build_guessing_prompts(&vocab, &target, &cands, &Instructions::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(ps.iter().all(|p| p.mentions(&target) && p.task == PromptTask::Guessing));
        assert_eq!(ps[1].continuation.as_deref(), Some("wipisu'}"));
    }

    #[test]
    fn rendered_lines_parse_back() {
        let vocab = table1_train();
        let target = st(3, Colour::Orange, 3);
        let p = build_speaker_prompt(&vocab, &target, &Instructions::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let mut parsed: Vec<VocabularyEntry> =
            p.vocabulary_lines.iter().map(|l| parse_entry(l, 1).unwrap().0).collect();
        parsed.sort_by_key(|e| e.stimulus);
        assert_eq!(parsed, vocab.canonical().entries().to_vec());
    }

    #[test]
    fn response_parsing() {
        assert_eq!(parse_signal_response("ninikonu'}").unwrap().as_str(), "ninikonu");
        assert_eq!(parse_signal_response(" sutupepi\n").unwrap().as_str(), "sutupepi");
        assert_eq!(parse_signal_response("'wipisu'}\n{'shape'").unwrap().as_str(), "wipisu");
        assert!(matches!(
            parse_signal_response("```\n```"),
            Err(AgentError::UnparseableResponse(_))
        ));
        assert!(parse_signal_response("").is_err());
        assert!(parse_signal_response(&"a".repeat(40)).is_err());
    }
}
