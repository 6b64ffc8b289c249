use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversation::{Role, Turn};
use crate::error::{Error, Result};
use crate::llm::{ChatMessage, CompletionRequest, Purpose};
use crate::memory::MemoryRecord;

pub const DEFAULT_FIXTURE_TOML: &str = include_str!("../../assets/inference_prompt.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub name: String,
    pub definition: String,
}

/// Versioned prompt material: task steps, rules, output schema, the closed
/// category set and the one-shot example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFixture {
    pub version: String,
    pub steps: Vec<String>,
    pub rules: Vec<String>,
    pub output_format: String,
    pub example_input: String,
    pub example_output: String,
    pub categories: Vec<CategoryDef>,
}

impl PromptFixture {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| Error::Config(format!("prompt fixture: {e}")))?;
        if f.categories.is_empty() {
            return Err(Error::Config("prompt fixture defines no categories".into()));
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn category_names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn system_text(&self) -> String {
        let mut s = String::from("You are a privacy analyst for a chat assistant.\n\n## Task\n");
        for (i, step) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "Step {}. {}", i + 1, step);
        }
        s.push_str("\n## Categories\n");
        for c in &self.categories {
            let _ = writeln!(s, "- {}: {}", c.name, c.definition);
        }
        s.push_str("\n## Rules\n");
        for r in &self.rules {
            let _ = writeln!(s, "- {r}");
        }
        let _ = write!(
            s,
            "\n## Output format\n{}\n\n## Example\nInput:\n{}\nOutput:\n{}",
            self.output_format.trim(),
            self.example_input.trim(),
            self.example_output.trim()
        );
        s
    }
}

impl Default for PromptFixture {
    fn default() -> Self {
        Self::from_toml(DEFAULT_FIXTURE_TOML).expect("bundled prompt fixture is valid")
    }
}

pub fn input_tag(id: &str) -> String {
    format!("<input id=\"{id}\">")
}

pub fn memory_tag(id: &str) -> String {
    format!("<memory id=\"{id}\">")
}

/// One-shot inference request over `turns` (user turns only) and `memories`
/// (active only), each wrapped in a tag carrying its id, in the order given.
pub fn build_inference_prompt(
    turns: &[&Turn],
    memories: &[&MemoryRecord],
    fixture: &PromptFixture,
) -> Result<CompletionRequest> {
    if turns.is_empty() && memories.is_empty() {
        return Err(Error::EmptyInput);
    }
    debug_assert!(turns.iter().all(|t| t.role == Role::User));
    debug_assert!(memories.iter().all(|m| m.is_active()));

    let mut user = String::from("## Past inputs\n");
    for t in turns {
        let _ = writeln!(user, "{}{}</input>", input_tag(t.id.as_str()), t.text);
    }
    user.push_str("\n## Past memories\n");
    for m in memories {
        let _ = writeln!(user, "{}{}</memory>", memory_tag(m.id.as_str()), m.text);
    }
    user.push_str("\nOutput the JSON list now.");

    Ok(CompletionRequest::new(
        Purpose::PrivacyInference,
        vec![ChatMessage::system(fixture.system_text()), ChatMessage::user(user)],
    ))
}
