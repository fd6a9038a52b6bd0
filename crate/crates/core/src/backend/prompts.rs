use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::RequestKind;
use crate::error::{Error, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("extract_flat", include_str!("../../assets/prompts/extract_flat.txt")),
    ("extract_graph", include_str!("../../assets/prompts/extract_graph.txt")),
    ("prejudge", include_str!("../../assets/prompts/prejudge.txt")),
    ("mem_op", include_str!("../../assets/prompts/mem_op.txt")),
    ("answer_direct", include_str!("../../assets/prompts/answer_direct.txt")),
    (
        "answer_chain_of_note",
        include_str!("../../assets/prompts/answer_chain_of_note.txt"),
    ),
    ("summarize", include_str!("../../assets/prompts/summarize.txt")),
    ("judge_similar", include_str!("../../assets/prompts/judge_similar.txt")),
];

/// Prompt templates with `{slot}` placeholders. Templates ship with the
/// crate and can be overridden file-by-file from a directory.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Builtins, with any `<name>.txt` in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut set = PromptSet::default();
        for name in BUILTIN.iter().map(|(k, _)| *k) {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(name.to_string(), text);
            }
        }
        Ok(set)
    }

    pub fn template(&self, name: &str) -> &str {
        self.templates
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unknown prompt template {name}"))
    }

    /// Short content hash of the template text; part of every cache key.
    pub fn version(&self, name: &str) -> String {
        hex::encode(&Sha256::digest(self.template(name).as_bytes())[..6])
    }

    pub fn render(&self, name: &str, slots: &[(&str, &str)]) -> String {
        let mut out = self.template(name).to_string();
        for (slot, value) in slots {
            out = out.replace(&format!("{{{slot}}}"), value);
        }
        out
    }
}

pub fn template_for(kind: RequestKind, chain_of_note: bool) -> &'static str {
    match kind {
        RequestKind::ExtractFlat => "extract_flat",
        RequestKind::ExtractGraph => "extract_graph",
        RequestKind::Prejudge => "prejudge",
        RequestKind::DecideMemOp => "mem_op",
        RequestKind::Answer if chain_of_note => "answer_chain_of_note",
        RequestKind::Answer => "answer_direct",
        RequestKind::Summarize => "summarize",
        RequestKind::JudgeSimilar => "judge_similar",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_named_slots_only() {
        let p = PromptSet::default();
        let out = p.render(
            "extract_graph",
            &[("dialogue_time", "2023/06/11"), ("input_text", "I visited Paris")],
        );
        assert!(out.contains("Conversation time: 2023/06/11"));
        assert!(out.contains("Text: I visited Paris"));
        assert!(!out.contains("{dialogue_time}"));
        let flat = p.render("extract_flat", &[("input_text", "x")]);
        assert!(flat.contains("{\"summary\""));
    }

    #[test]
    fn override_changes_version() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("prejudge.txt"), "custom {input_text}").unwrap();
        let p = PromptSet::with_overrides(dir.path()).unwrap();
        assert_ne!(p.version("prejudge"), PromptSet::default().version("prejudge"));
        assert_eq!(p.version("mem_op"), PromptSet::default().version("mem_op"));
    }
}
