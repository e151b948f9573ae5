//! Context phrases from captions of context description images (CDIs).
//!
//! A caption such as "A dog lying on grass field" is lowercased, stripped of
//! punctuation and split at prepositions and conjunctions. Segments that
//! mention an object (an interest class or a noun from the lexicon, plural
//! forms included) are dropped; the rest lose their leading determiners and
//! "photo of" style lead-ins and become context phrases ("grass field").
//! Each phrase is then turned into a handful of background prompts.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{Client, PngBytes};
use crate::prompting::{apply_edit_rules, ClassLabel, EditRule};
use crate::{Error, Result};

const BUNDLED_NOUNS: &str = include_str!("../data/nouns.txt");

const SPLIT_WORDS: &[&str] = &[
    "on", "in", "at", "near", "beside", "under", "over", // prepositions
    "and", "or", "but", "while", // conjunctions
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "this", "that", "these", "those", "its", "their", "his", "her",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "several",
    "many", "few", "various", "lots", "group", "couple", "pair", "bunch", "of",
];

/// Nouns that introduce the real subject: "a photo of X", "the middle of X".
const LEAD_IN_NOUNS: &[&str] = &[
    "photo", "photograph", "picture", "image", "view", "shot", "closeup", "snapshot", "scene",
    "middle", "side", "front", "top", "edge", "bottom", "corner", "center", "centre",
];

const LEAD_IN_MODIFIERS: &[&str] = &["real", "realistic", "close", "up", "color", "colored", "black", "white", "blurry"];

/// Words that carry no scene content on their own.
const FILLER: &[&str] = &[
    "it", "there", "is", "are", "was", "were", "be", "being", "been", "each", "other", "view",
    "very", "something", "another",
];

/// Background prompt patterns emitted per phrase, in order.
pub const AUGMENT_PATTERNS: [&str; 3] = [
    "A real photo of {}",
    "A realistic photo of {}",
    "A photo of {}, color",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source_cdi: String,
    pub rank: u32,
}

impl Caption {
    pub fn new(text: impl Into<String>, source_cdi: impl Into<String>, rank: u32) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidParams("caption text is empty".into()));
        }
        Ok(Caption {
            text,
            source_cdi: source_cdi.into(),
            rank,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPhrase {
    pub phrase: String,
    pub source_cdi: String,
    pub rank: u32,
}

/// Object nouns, matched with simple plural stemming.
#[derive(Debug, Clone, Default)]
pub struct NounLexicon {
    words: HashSet<String>,
}

impl NounLexicon {
    /// About seven hundred common object, person and animal nouns.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_NOUNS)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// One token per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        NounLexicon { words }
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        NounLexicon {
            words: words.iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn insert(&mut self, word: &str) {
        self.words.insert(word.to_lowercase());
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// True if `token` or its singular form is in the lexicon.
    pub fn contains(&self, token: &str) -> bool {
        singular_candidates(token).any(|t| self.words.contains(t.as_str()))
    }
}

fn singular_candidates(token: &str) -> impl Iterator<Item = String> + '_ {
    let mut out = vec![token.to_string()];
    if let Some(stem) = token.strip_suffix("ies") {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = token.strip_suffix("es") {
        out.push(stem.to_string());
    }
    if let Some(stem) = token.strip_suffix('s') {
        out.push(stem.to_string());
    }
    out.into_iter().filter(|s| !s.is_empty())
}

/// Lowercase, replace punctuation with spaces and split into words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|t| t.trim_matches('\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// The set of words whose presence marks a segment as an object mention.
#[derive(Debug, Clone)]
pub struct ObjectVocabulary {
    lexicon: NounLexicon,
}

impl ObjectVocabulary {
    pub fn new(interest: &[ClassLabel], lexicon: &NounLexicon) -> Self {
        let mut lexicon = lexicon.clone();
        for label in interest {
            for token in tokenize(&label.name) {
                if !DETERMINERS.contains(&token.as_str()) {
                    lexicon.insert(&token);
                }
            }
        }
        ObjectVocabulary { lexicon }
    }

    pub fn is_object(&self, token: &str) -> bool {
        self.lexicon.contains(token)
    }
}

fn is_number(token: &str) -> bool {
    token.chars().all(|c| c.is_ascii_digit())
}

fn is_function_word(token: &str) -> bool {
    FILLER.contains(&token) || DETERMINERS.contains(&token) || is_number(token)
}

fn strip_lead_in(mut words: VecDeque<String>) -> VecDeque<String> {
    loop {
        let before = words.len();
        while words
            .front()
            .is_some_and(|w| DETERMINERS.contains(&w.as_str()) || is_number(w))
        {
            words.pop_front();
        }
        // [modifiers] lead-in-noun "of"
        let mods = words
            .iter()
            .take_while(|w| LEAD_IN_MODIFIERS.contains(&w.as_str()))
            .count();
        if words.len() > mods + 1
            && LEAD_IN_NOUNS.contains(&words[mods].as_str())
            && words[mods + 1] == "of"
        {
            words.drain(..mods + 2);
        }
        if words.len() == before {
            return words;
        }
    }
}

/// Object-free context phrases of one caption, in caption order.
pub fn extract_context(caption: &Caption, vocabulary: &ObjectVocabulary) -> Vec<ContextPhrase> {
    let tokens = tokenize(&caption.text);
    let mut segments: Vec<Vec<String>> = vec![Vec::new()];
    for token in tokens {
        if SPLIT_WORDS.contains(&token.as_str()) {
            segments.push(Vec::new());
        } else if let Some(last) = segments.last_mut() {
            last.push(token);
        }
    }
    segments
        .into_iter()
        .filter(|seg| !seg.iter().any(|t| vocabulary.is_object(t)))
        .map(|seg| strip_lead_in(seg.into_iter().collect()))
        .filter(|seg| seg.iter().any(|t| !is_function_word(t)))
        .map(|seg| ContextPhrase {
            phrase: seg.into_iter().collect::<Vec<_>>().join(" "),
            source_cdi: caption.source_cdi.clone(),
            rank: caption.rank,
        })
        .collect()
}

/// Convenience wrapper building the vocabulary from labels and a lexicon.
pub fn extract_context_with(
    caption: &Caption,
    interest: &[ClassLabel],
    lexicon: &NounLexicon,
) -> Vec<ContextPhrase> {
    extract_context(caption, &ObjectVocabulary::new(interest, lexicon))
}

/// Apply caption interventions around extraction. Substitutions and
/// removals edit the caption first; appended text is attached to every
/// extracted phrase, so steering words such as "without people" are not
/// mistaken for object mentions.
pub fn extract_context_edited(caption: &Caption, vocabulary: &ObjectVocabulary, rules: &[EditRule]) -> Vec<ContextPhrase> {
    let (appends, shaping): (Vec<EditRule>, Vec<EditRule>) =
        rules.iter().cloned().partition(|r| matches!(r, EditRule::Append { .. }));
    let shaped = Caption {
        text: apply_edit_rules(&caption.text, &shaping),
        ..caption.clone()
    };
    extract_context(&shaped, vocabulary)
        .into_iter()
        .map(|p| ContextPhrase {
            phrase: apply_edit_rules(&p.phrase, &appends),
            ..p
        })
        .collect()
}

/// Background prompts for each phrase: the "A real photo of" form first,
/// then up to `per_phrase - 1` variants from [`AUGMENT_PATTERNS`].
pub fn augment_context(phrases: &[ContextPhrase], per_phrase: usize) -> Vec<String> {
    let take = per_phrase.clamp(1, AUGMENT_PATTERNS.len());
    phrases
        .iter()
        .flat_map(|p| {
            AUGMENT_PATTERNS[..take]
                .iter()
                .map(move |pattern| pattern.replacen("{}", &p.phrase, 1))
        })
        .collect()
}

fn dedup_key(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Prompts mined from one caption of a CDI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPrompts {
    pub caption: Caption,
    pub edited: String,
    pub prompts: Vec<String>,
}

/// Settings for turning CDIs into background prompts.
#[derive(Debug, Clone)]
pub struct ContextMiner {
    pub captions_per_cdi: u32,
    pub per_phrase: usize,
    pub rules: Vec<EditRule>,
    pub vocabulary: ObjectVocabulary,
}

impl ContextMiner {
    pub fn new(interest: &[ClassLabel], lexicon: &NounLexicon) -> Self {
        ContextMiner {
            captions_per_cdi: 2,
            per_phrase: 1,
            rules: Vec::new(),
            vocabulary: ObjectVocabulary::new(interest, lexicon),
        }
    }

    /// Caption the CDI, apply edit rules, extract and augment contexts.
    /// Prompts are deduplicated within each caption.
    pub fn mine_grouped(&self, cdi_id: &str, cdi: &PngBytes, gateway: &Client) -> Result<Vec<CaptionPrompts>> {
        if self.captions_per_cdi == 0 {
            return Err(Error::InvalidParams("captions_per_cdi must be >= 1".into()));
        }
        let captions = gateway.caption_image(cdi, self.captions_per_cdi)?;
        let mut out = Vec::with_capacity(captions.len());
        for (rank, text) in captions.into_iter().enumerate() {
            let caption = Caption::new(text, cdi_id, rank as u32)?;
            let edited = apply_edit_rules(&caption.text, &self.rules);
            let phrases = extract_context_edited(&caption, &self.vocabulary, &self.rules);
            let mut seen = HashSet::new();
            let prompts = augment_context(&phrases, self.per_phrase)
                .into_iter()
                .filter(|p| seen.insert(dedup_key(p)))
                .collect();
            out.push(CaptionPrompts {
                caption,
                edited,
                prompts,
            });
        }
        Ok(out)
    }

    /// All prompts of a CDI, deduplicated across captions.
    pub fn mine_cdi(&self, cdi_id: &str, cdi: &PngBytes, gateway: &Client) -> Result<Vec<String>> {
        let mut seen = HashSet::new();
        Ok(self
            .mine_grouped(cdi_id, cdi, gateway)?
            .into_iter()
            .flat_map(|g| g.prompts)
            .filter(|p| seen.insert(dedup_key(p)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::prompting::label_set;

    fn caption(text: &str) -> Caption {
        Caption::new(text, "cdi", 0).unwrap()
    }

    fn phrases(text: &str, classes: &[&str], nouns: &[&str]) -> Vec<String> {
        let labels = label_set(classes).unwrap();
        extract_context_with(&caption(text), &labels, &NounLexicon::from_words(nouns))
            .into_iter()
            .map(|p| p.phrase)
            .collect()
    }

    #[test]
    fn worked_example() {
        assert_eq!(phrases("A dog lying on grass field", &["dog"], &[]), ["grass field"]);
        let out = extract_context_with(&caption("A dog lying on grass field"), &label_set(&["dog"]).unwrap(), &NounLexicon::empty());
        assert_eq!(augment_context(&out, 1), ["A real photo of grass field"]);
    }

    #[test]
    fn object_only_caption_yields_nothing() {
        assert!(phrases("two dogs", &["dog"], &[]).is_empty());
    }

    #[test]
    fn lexicon_nouns_are_dropped() {
        assert_eq!(
            phrases("a man riding a horse on a city street", &["horse", "person"], &["man"]),
            ["city street"]
        );
    }

    #[test]
    fn plural_stemming() {
        let lex = NounLexicon::from_words(&["puppy", "bus", "box"]);
        assert!(lex.contains("puppies"));
        assert!(lex.contains("buses"));
        assert!(lex.contains("boxes"));
        assert!(lex.contains("bus"));
        assert!(!lex.contains("grass"));
    }

    #[test]
    fn lead_ins_are_stripped() {
        assert_eq!(phrases("a photo of a real photo of grass field", &[], &[]), ["grass field"]);
        assert_eq!(phrases("The middle of an empty road", &[], &[]), ["empty road"]);
        assert!(phrases("it is", &[], &[]).is_empty());
    }

    #[test]
    fn punctuation_is_removed_without_splitting() {
        assert_eq!(phrases("empty city street, color", &[], &[]), ["empty city street color"]);
    }

    #[test]
    fn augment_examples() {
        let p = |s: &str| ContextPhrase { phrase: s.into(), source_cdi: String::new(), rank: 0 };
        assert_eq!(augment_context(&[p("forest")], 2), ["A real photo of forest", "A realistic photo of forest"]);
        assert!(augment_context(&[], 3).is_empty());
        assert_eq!(augment_context(&[p("forest")], 10).len(), 3);
        assert_eq!(augment_context(&[p("a"), p("b")], 2).len(), 4);
    }

    #[test]
    fn bundled_lexicon_loads() {
        let lex = NounLexicon::bundled();
        assert!(lex.len() > 600);
        assert!(lex.contains("people") && lex.contains("dogs"));
        assert!(!lex.contains("street") && !lex.contains("kitchen"));
    }

    #[test]
    fn mine_cdi_with_mock() {
        let mock = MockBackend::default();
        let gateway = Client::mock(mock.clone());
        let labels = label_set(&["dog"]).unwrap();
        let miner = ContextMiner { per_phrase: 2, ..ContextMiner::new(&labels, &NounLexicon::bundled()) };

        let cdi = mock.render_png("a dog lying on grass field", 3, 0, 64, 64).unwrap();
        let prompts = miner.mine_cdi("cdi0", &cdi, &gateway).unwrap();
        assert_eq!(prompts, ["A real photo of grass field", "A realistic photo of grass field"]);
        assert!(prompts.len() <= 2 * miner.per_phrase);

        let only_dogs = mock.render_png("two dogs", 3, 0, 64, 64).unwrap();
        assert!(miner.mine_cdi("cdi1", &only_dogs, &gateway).unwrap().is_empty());
    }

    #[test]
    fn appended_words_survive_extraction() {
        let vocabulary = ObjectVocabulary::new(&label_set(&["dog"]).unwrap(), &NounLexicon::bundled());
        let rules = [EditRule::remove("a couple of people").unwrap(), EditRule::append("without people").unwrap()];
        let out = extract_context_edited(&caption("a couple of people in a kitchen"), &vocabulary, &rules);
        assert_eq!(augment_context(&out, 1), ["A real photo of kitchen without people"]);
    }

    #[test]
    fn edit_rules_apply_before_extraction() {
        let mock = MockBackend::default();
        let gateway = Client::mock(mock.clone());
        let miner = ContextMiner {
            captions_per_cdi: 1,
            rules: vec![EditRule::substitute("cartoon", "real").unwrap()],
            ..ContextMiner::new(&[], &NounLexicon::bundled())
        };
        let cdi = mock.render_png("a cartoon kitchen", 0, 0, 64, 64).unwrap();
        let groups = miner.mine_grouped("k", &cdi, &gateway).unwrap();
        assert_eq!(groups[0].edited, "a real kitchen");
        assert_eq!(groups[0].prompts, ["A real photo of real kitchen"]);
    }
}
