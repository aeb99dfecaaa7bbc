//! Prompt rendering: instruction, solved examples, then the test case with an
//! empty rewrite slot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueCase;
use crate::error::{Error, Result};

pub const ENGLISH_INSTRUCTION: &str = "Rewrite an incomplete utterance into an utterance which is \
semantically equivalent but self-contained to be understood without context. The sentence \
structure and expression should be consistent.";

pub const CHINESE_INSTRUCTION: &str =
    "改写不完整的话语，使其与原话语语义等价，并且无需上下文即可独立理解。句子结构和表达方式应保持一致。";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    English,
    Chinese,
}

pub fn default_instruction(language: Language) -> &'static str {
    match language {
        Language::English => ENGLISH_INSTRUCTION,
        Language::Chinese => CHINESE_INSTRUCTION,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Examples appear in the order they were selected.
    #[default]
    Sampling,
    Reverse,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(Order::Sampling),
            "reverse" => Ok(Order::Reverse),
            _ => Err(Error::InvalidArgument(format!("unknown order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub instruction: String,
    pub context_label: String,
    pub incomplete_label: String,
    pub rewrite_label: String,
    pub order: Order,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: ENGLISH_INSTRUCTION.to_string(),
            context_label: "Context:".into(),
            incomplete_label: "Incomplete:".into(),
            rewrite_label: "Rewrite:".into(),
            order: Order::Sampling,
        }
    }
}

/// Escapes backslashes and line breaks so every utterance stays on one line.
fn one_line(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

impl PromptTemplate {
    /// Reads a JSON template; absent fields keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let template: PromptTemplate = serde_json::from_str(&text)?;
        template.validate()?;
        Ok(template)
    }

    pub fn with_order(mut self, order: Order) -> Self {
        self.order = order;
        self
    }

    fn validate(&self) -> Result<()> {
        let labels = [&self.context_label, &self.incomplete_label, &self.rewrite_label];
        if labels.iter().any(|l| l.is_empty() || l.contains('\n')) {
            return Err(Error::InvalidArgument("template labels must be nonempty single lines".into()));
        }
        if labels[0] == labels[1] || labels[1] == labels[2] || labels[0] == labels[2] {
            return Err(Error::InvalidArgument("template labels must be distinct".into()));
        }
        Ok(())
    }

    fn push_case(&self, out: &mut String, case: &DialogueCase) {
        for turn in &case.context {
            out.push_str(&self.context_label);
            out.push(' ');
            out.push_str(&one_line(turn));
            out.push('\n');
        }
        out.push_str(&self.incomplete_label);
        out.push(' ');
        out.push_str(&one_line(&case.incomplete));
        out.push('\n');
        out.push_str(&self.rewrite_label);
    }

    /// One solved example as it appears in a prompt, without separators.
    pub fn example_block(&self, case: &DialogueCase) -> Result<String> {
        let rewrite = case.rewrite_or_err()?;
        let mut out = String::new();
        self.push_case(&mut out, case);
        out.push(' ');
        out.push_str(&one_line(rewrite));
        Ok(out)
    }

    /// The test case block that terminates every prompt.
    pub fn test_block(&self, case: &DialogueCase) -> String {
        let mut out = String::new();
        self.push_case(&mut out, case);
        out
    }

    pub fn render(&self, examples: &[&DialogueCase], test: &DialogueCase) -> Result<String> {
        let mut out = one_line(&self.instruction);
        out.push_str("\n\n");
        let ordered: Box<dyn Iterator<Item = &&DialogueCase>> = match self.order {
            Order::Sampling => Box::new(examples.iter()),
            Order::Reverse => Box::new(examples.iter().rev()),
        };
        for example in ordered {
            out.push_str(&self.example_block(example)?);
            out.push_str("\n\n");
        }
        out.push_str(&self.test_block(test));
        Ok(out)
    }

    /// Splits a rendered prompt back into example blocks and the test block.
    pub fn split_blocks<'a>(&self, prompt: &'a str) -> Option<(Vec<&'a str>, &'a str)> {
        let (_, body) = prompt.split_once("\n\n")?;
        let mut blocks: Vec<&str> = body.split("\n\n").collect();
        let test = blocks.pop()?;
        Some((blocks, test))
    }
}
