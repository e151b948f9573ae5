//! Prompt templates, class labels and caption edit rules.
//!
//! Template text is data: the defaults are bundled from
//! `data/templates.toml` and any manifest with the same layout can be loaded
//! in its place.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const BUNDLED_TEMPLATES: &str = include_str!("../data/templates.toml");
const BUNDLED_OVERRIDES: &str = include_str!("../data/background_overrides.toml");

/// An object category. Names are trimmed, lowercased and whitespace-collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: u32,
    pub name: String,
}

impl ClassLabel {
    pub fn new(id: u32, name: &str) -> Result<Self> {
        let name = normalize_words(name);
        if name.is_empty() {
            return Err(Error::InvalidLabel(name));
        }
        if id == 0 {
            return Err(Error::InvalidLabel(format!("{name} (id must be >= 1)")));
        }
        Ok(ClassLabel { id, name })
    }

    /// Name tokens, used when scanning text for mentions of this class.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.name.split(' ')
    }
}

/// Assign dense ids starting at 1, rejecting empty or duplicate names.
pub fn label_set<S: AsRef<str>>(names: &[S]) -> Result<Vec<ClassLabel>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let label = ClassLabel::new(i as u32 + 1, name.as_ref())?;
        if !seen.insert(label.name.clone()) {
            return Err(Error::InvalidLabel(format!("duplicate label {}", label.name)));
        }
        out.push(label);
    }
    Ok(out)
}

/// Check ids are unique and positive and names unique.
pub fn validate_labels(labels: &[ClassLabel]) -> Result<()> {
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    for label in labels {
        ClassLabel::new(label.id, &label.name)?;
        if !ids.insert(label.id) {
            return Err(Error::InvalidLabel(format!("duplicate id {}", label.id)));
        }
        if !names.insert(label.name.as_str()) {
            return Err(Error::InvalidLabel(format!("duplicate label {}", label.name)));
        }
    }
    Ok(())
}

fn normalize_words(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: usize,
    pub kind: TemplateKind,
    pub pattern: String,
    /// Context phrase filled into background patterns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    object_slot: String,
    context_slot: String,
    #[serde(rename = "template")]
    templates: Vec<PromptTemplate>,
}

#[derive(Debug, Deserialize)]
struct OverrideFile {
    #[serde(rename = "override", default)]
    overrides: Vec<TemplateOverride>,
}

#[derive(Debug, Deserialize)]
struct TemplateOverride {
    kind: TemplateKind,
    id: usize,
    #[serde(default)]
    pattern: Option<String>,
    #[serde(default)]
    context: Option<String>,
}

/// Foreground and background templates, each indexed densely from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    object_slot: String,
    context_slot: String,
    foreground: Vec<PromptTemplate>,
    background: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    /// The six foreground and sixteen background defaults.
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_TEMPLATES).expect("bundled template manifest is valid")
    }

    /// Bundled defaults with the shipped corrections applied.
    pub fn bundled_corrected() -> Self {
        let mut set = Self::bundled();
        set.apply_overrides_toml(BUNDLED_OVERRIDES)
            .expect("bundled overrides are valid");
        set
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ManifestFile =
            toml::from_str(text).map_err(|e| Error::TemplateManifest(e.to_string()))?;
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for t in file.templates {
            match t.kind {
                TemplateKind::Foreground => foreground.push(t),
                TemplateKind::Background => background.push(t),
            }
        }
        foreground.sort_by_key(|t| t.id);
        background.sort_by_key(|t| t.id);
        let set = TemplateSet {
            object_slot: file.object_slot,
            context_slot: file.context_slot,
            foreground,
            background,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn apply_overrides_path(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_overrides_toml(&text)
    }

    pub fn apply_overrides_toml(&mut self, text: &str) -> Result<()> {
        let file: OverrideFile =
            toml::from_str(text).map_err(|e| Error::TemplateManifest(e.to_string()))?;
        for o in file.overrides {
            let list = match o.kind {
                TemplateKind::Foreground => &mut self.foreground,
                TemplateKind::Background => &mut self.background,
            };
            let entry = list.get_mut(o.id).ok_or_else(|| {
                Error::TemplateManifest(format!("override targets missing id {}", o.id))
            })?;
            if let Some(p) = o.pattern {
                entry.pattern = p;
            }
            if let Some(c) = o.context {
                entry.context = Some(c);
            }
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        for (kind, list, slot) in [
            ("foreground", &self.foreground, &self.object_slot),
            ("background", &self.background, &self.context_slot),
        ] {
            if list.is_empty() {
                return Err(Error::TemplateManifest(format!("no {kind} templates")));
            }
            for (i, t) in list.iter().enumerate() {
                if t.id != i {
                    return Err(Error::TemplateManifest(format!(
                        "{kind} ids must be dense from 0, found {} at position {i}",
                        t.id
                    )));
                }
                if t.pattern.matches(slot.as_str()).count() != 1 {
                    return Err(Error::TemplateManifest(format!(
                        "{kind} template {} must contain {slot} exactly once",
                        t.id
                    )));
                }
            }
        }
        if let Some(t) = self
            .background
            .iter()
            .find(|t| t.context.as_deref().is_none_or(|c| c.trim().is_empty()))
        {
            return Err(Error::TemplateManifest(format!(
                "background template {} has no context",
                t.id
            )));
        }
        Ok(())
    }

    pub fn foreground(&self) -> &[PromptTemplate] {
        &self.foreground
    }

    pub fn background(&self) -> &[PromptTemplate] {
        &self.background
    }

    pub fn object_slot(&self) -> &str {
        &self.object_slot
    }

    /// Fill foreground template `template_id` with the label name.
    pub fn verbalize_foreground(&self, label: &ClassLabel, template_id: usize) -> Result<String> {
        if label.name.trim().is_empty() {
            return Err(Error::InvalidLabel(label.name.clone()));
        }
        let t = self.foreground.get(template_id).ok_or(Error::UnknownTemplate {
            kind: "foreground",
            id: template_id,
        })?;
        Ok(t.pattern.replacen(&self.object_slot, &label.name, 1))
    }

    /// Background prompt for context `context_id`.
    pub fn verbalize_background(&self, context_id: usize) -> Result<String> {
        let t = self.background.get(context_id).ok_or(Error::UnknownTemplate {
            kind: "background",
            id: context_id,
        })?;
        let context = t.context.as_deref().unwrap_or_default();
        Ok(t.pattern.replacen(&self.context_slot, context, 1))
    }

    /// If `prompt` is an instance of a foreground template, return the
    /// template id and the text filling the slot. When several templates
    /// match, the one leaving the shortest slot text wins.
    pub fn match_foreground(&self, prompt: &str) -> Option<(usize, String)> {
        let lower = prompt.to_lowercase();
        let slot = self.object_slot.to_lowercase();
        self.foreground
            .iter()
            .filter_map(|t| {
                let pattern = t.pattern.to_lowercase();
                let (pre, post) = pattern.split_once(&slot)?;
                let inner = lower.strip_prefix(pre)?.strip_suffix(post)?.trim();
                (!inner.is_empty()).then(|| (t.id, inner.to_string()))
            })
            .min_by_key(|(id, inner)| (inner.len(), *id))
    }
}

/// Module-level shorthand for [`TemplateSet::verbalize_foreground`] on the
/// bundled set.
pub fn verbalize_foreground(label: &ClassLabel, template_id: usize) -> Result<String> {
    TemplateSet::bundled().verbalize_foreground(label, template_id)
}

pub fn verbalize_background(context_id: usize) -> Result<String> {
    TemplateSet::bundled().verbalize_background(context_id)
}

/// A declarative caption intervention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EditRule {
    Substitute { target: String, replacement: String },
    Remove { target: String },
    Append { replacement: String },
}

impl EditRule {
    pub fn substitute(target: &str, replacement: &str) -> Result<Self> {
        let rule = EditRule::Substitute {
            target: target.to_string(),
            replacement: replacement.to_string(),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn remove(target: &str) -> Result<Self> {
        let rule = EditRule::Remove {
            target: target.to_string(),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn append(replacement: &str) -> Result<Self> {
        let rule = EditRule::Append {
            replacement: replacement.to_string(),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        let blank = |s: &str| s.split_whitespace().next().is_none();
        match self {
            EditRule::Substitute { target, replacement } if blank(target) || blank(replacement) => Err(
                Error::InvalidEditRule("substitute needs a target and a replacement".into()),
            ),
            EditRule::Remove { target } if blank(target) => {
                Err(Error::InvalidEditRule("remove needs a target".into()))
            }
            EditRule::Append { replacement } if blank(replacement) => {
                Err(Error::InvalidEditRule("append needs a replacement".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Comparison key of a word: lowercase with edge punctuation trimmed.
fn word_key(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn keys(text: &str) -> Vec<String> {
    text.split_whitespace().map(word_key).collect()
}

fn matches_at(words: &[String], at: usize, target: &[String]) -> bool {
    at + target.len() <= words.len()
        && words[at..at + target.len()]
            .iter()
            .zip(target)
            .all(|(w, t)| word_key(w) == *t)
}

fn substitute_words(words: &[String], target: &[String], replacement: &str) -> Option<Vec<String>> {
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    let mut changed = false;
    while i < words.len() {
        if matches_at(words, i, target) {
            let first = &words[i];
            let last = &words[i + target.len() - 1];
            let lead: String = first.chars().take_while(|c| !c.is_alphanumeric()).collect();
            let trail: String = {
                let rev: String = last.chars().rev().take_while(|c| !c.is_alphanumeric()).collect();
                rev.chars().rev().collect()
            };
            let mut rep: Vec<String> = replacement.split_whitespace().map(String::from).collect();
            if let Some(f) = rep.first_mut() {
                f.insert_str(0, &lead);
            }
            if let Some(l) = rep.last_mut() {
                l.push_str(&trail);
            }
            out.extend(rep);
            i += target.len();
            changed = true;
        } else {
            out.push(words[i].clone());
            i += 1;
        }
    }
    changed.then_some(out)
}

fn remove_words(words: &[String], target: &[String]) -> Option<Vec<String>> {
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    let mut changed = false;
    while i < words.len() {
        if matches_at(words, i, target) {
            i += target.len();
            changed = true;
        } else {
            out.push(words[i].clone());
            i += 1;
        }
    }
    changed.then_some(out)
}

/// Apply `rules` to `caption` in order.
///
/// Matching is whole-word and case-insensitive. A run of consecutive
/// `Remove` rules is applied repeatedly until none of its targets occurs,
/// so re-applying a remove-only list never changes the result. If no rule
/// matches, the caption is returned untouched; otherwise words are re-joined
/// with single spaces.
pub fn apply_edit_rules(caption: &str, rules: &[EditRule]) -> String {
    let mut words: Vec<String> = caption.split_whitespace().map(String::from).collect();
    let mut changed = false;
    let mut i = 0;
    while i < rules.len() {
        match &rules[i] {
            EditRule::Substitute { target, replacement } => {
                let target = keys(target);
                if !target.is_empty() {
                    if let Some(next) = substitute_words(&words, &target, replacement) {
                        words = next;
                        changed = true;
                    }
                }
                i += 1;
            }
            EditRule::Append { replacement } => {
                let extra: Vec<String> = replacement.split_whitespace().map(String::from).collect();
                if !extra.is_empty() {
                    words.extend(extra);
                    changed = true;
                }
                i += 1;
            }
            EditRule::Remove { .. } => {
                let end = rules[i..]
                    .iter()
                    .position(|r| !matches!(r, EditRule::Remove { .. }))
                    .map_or(rules.len(), |p| i + p);
                let targets: Vec<Vec<String>> = rules[i..end]
                    .iter()
                    .filter_map(|r| match r {
                        EditRule::Remove { target } => Some(keys(target)),
                        _ => None,
                    })
                    .filter(|t| !t.is_empty())
                    .collect();
                loop {
                    let mut pass_changed = false;
                    for target in &targets {
                        while let Some(next) = remove_words(&words, target) {
                            words = next;
                            pass_changed = true;
                        }
                    }
                    if !pass_changed {
                        break;
                    }
                    changed = true;
                }
                i = end;
            }
        }
    }
    if changed {
        words.join(" ")
    } else {
        caption.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(name: &str) -> ClassLabel {
        ClassLabel { id: 1, name: name.into() }
    }

    #[test]
    fn foreground_examples() {
        let set = TemplateSet::bundled();
        assert_eq!(set.verbalize_foreground(&label("dog"), 0).unwrap(), "A photo of dog");
        assert_eq!(
            set.verbalize_foreground(&label("bus"), 3).unwrap(),
            "bus in a white background"
        );
        assert!(matches!(
            set.verbalize_foreground(&label(""), 0),
            Err(Error::InvalidLabel(_))
        ));
        assert!(matches!(
            set.verbalize_foreground(&label("dog"), 6),
            Err(Error::UnknownTemplate { kind: "foreground", id: 6 })
        ));
    }

    #[test]
    fn background_examples() {
        let set = TemplateSet::bundled();
        assert_eq!(set.verbalize_background(2).unwrap(), "A real photo of blue sky");
        assert_eq!(set.verbalize_background(7).unwrap(), "A real photo of railway without train");
        assert_eq!(set.verbalize_background(1).unwrap(), "A real photo of empty kitch");
        assert!(matches!(set.verbalize_background(16), Err(Error::UnknownTemplate { .. })));
    }

    #[test]
    fn bundled_counts() {
        let set = TemplateSet::bundled();
        assert_eq!(set.foreground().len(), 6);
        assert_eq!(set.background().len(), 16);
    }

    #[test]
    fn corrected_variant_fixes_kitchen_only() {
        let fixed = TemplateSet::bundled_corrected();
        let orig = TemplateSet::bundled();
        assert_eq!(fixed.verbalize_background(1).unwrap(), "A real photo of empty kitchen");
        for id in (0..16).filter(|&i| i != 1) {
            assert_eq!(fixed.verbalize_background(id).unwrap(), orig.verbalize_background(id).unwrap());
        }
    }

    #[test]
    fn manifest_validation() {
        let bad_slot = r#"
            object_slot = "<object>"
            context_slot = "<context>"
            [[template]]
            id = 0
            kind = "foreground"
            pattern = "<object> and <object>"
            [[template]]
            id = 0
            kind = "background"
            pattern = "A real photo of <context>"
            context = "sky"
        "#;
        assert!(matches!(TemplateSet::from_toml(bad_slot), Err(Error::TemplateManifest(_))));
        let gap = bad_slot.replace("<object> and <object>", "<object>").replace("id = 0\n            kind = \"background\"", "id = 3\n            kind = \"background\"");
        assert!(matches!(TemplateSet::from_toml(&gap), Err(Error::TemplateManifest(_))));
        let ok = bad_slot.replace("<object> and <object>", "<object>");
        assert_eq!(TemplateSet::from_toml(&ok).unwrap().foreground().len(), 1);
    }

    #[test]
    fn match_foreground_recovers_slot() {
        let set = TemplateSet::bundled();
        assert_eq!(
            set.match_foreground("A photo of dog in pure background"),
            Some((2, "dog".into()))
        );
        assert_eq!(set.match_foreground("A photo of dog"), Some((0, "dog".into())));
        assert_eq!(set.match_foreground("bus isolated on white background"), Some((5, "bus".into())));
        assert_eq!(set.match_foreground("A real photo of blue sky"), None);
    }

    #[test]
    fn labels() {
        assert_eq!(ClassLabel::new(3, "  Potted   Plant ").unwrap().name, "potted plant");
        assert!(ClassLabel::new(1, "   ").is_err());
        assert!(ClassLabel::new(0, "dog").is_err());
        let set = label_set(&["dog", "cat"]).unwrap();
        assert_eq!(set[1], ClassLabel { id: 2, name: "cat".into() });
        assert!(label_set(&["dog", "Dog"]).is_err());
    }

    #[test]
    fn edit_rule_examples() {
        let rules = [EditRule::substitute("cartoon", "real").unwrap()];
        assert_eq!(apply_edit_rules("a cartoon kitchen", &rules), "a real kitchen");

        let rules = [
            EditRule::remove("a couple of people").unwrap(),
            EditRule::append("without people").unwrap(),
        ];
        assert_eq!(
            apply_edit_rules("a couple of people in a kitchen", &rules),
            "in a kitchen without people"
        );
        assert_eq!(apply_edit_rules("a kitchen", &[]), "a kitchen");
    }

    #[test]
    fn edit_rules_match_whole_words_only() {
        let rules = [EditRule::substitute("real", "fake").unwrap()];
        assert_eq!(apply_edit_rules("a bowl of cereal", &rules), "a bowl of cereal");
        let rules = [EditRule::substitute("cartoon", "real").unwrap()];
        assert_eq!(apply_edit_rules("A Cartoon kitchen, cartoon.", &rules), "A real kitchen, real.");
    }

    #[test]
    fn unmatched_rules_leave_caption_byte_identical() {
        let rules = [EditRule::remove("dog").unwrap()];
        assert_eq!(apply_edit_rules("a  cat ", &rules), "a  cat ");
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(EditRule::substitute("", "x").is_err());
        assert!(EditRule::substitute("x", " ").is_err());
        assert!(EditRule::remove("").is_err());
        assert!(EditRule::append("").is_err());
    }

    #[test]
    fn rules_deserialize_from_tagged_form() {
        let rule: EditRule =
            serde_json::from_str(r#"{"kind":"substitute","target":"cartoon","replacement":"real"}"#).unwrap();
        assert_eq!(rule, EditRule::substitute("cartoon", "real").unwrap());
    }

    fn small_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "A", "b,"], 0..10).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn empty_rule_list_is_identity(s in ".*") {
            prop_assert_eq!(apply_edit_rules(&s, &[]), s);
        }

        #[test]
        fn remove_only_lists_are_idempotent(
            caption in small_text(),
            targets in proptest::collection::vec(
                proptest::collection::vec(prop_oneof!["a", "b", "c"], 1..3).prop_map(|w| w.join(" ")), 1..4),
        ) {
            let rules: Vec<EditRule> = targets.iter().map(|t| EditRule::remove(t).unwrap()).collect();
            let once = apply_edit_rules(&caption, &rules);
            prop_assert_eq!(apply_edit_rules(&once, &rules), once);
        }

        #[test]
        fn substitute_reapplication_is_noop_once_target_gone(caption in small_text()) {
            let rules = [EditRule::substitute("a", "z").unwrap()];
            let once = apply_edit_rules(&caption, &rules);
            prop_assert_eq!(apply_edit_rules(&once, &rules), once);
        }

        #[test]
        fn foreground_prompt_contains_label_once(name in "[a-z]{3,10}", t in 0usize..6) {
            let set = TemplateSet::bundled();
            prop_assume!(set.foreground().iter().all(|f| !f.pattern.to_lowercase().contains(name.as_str())));
            let prompt = set.verbalize_foreground(&label(&name), t).unwrap();
            prop_assert_eq!(prompt.matches(name.as_str()).count(), 1);
        }
    }
}
