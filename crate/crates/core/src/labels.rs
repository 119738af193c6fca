//! The two detection targets and a fixed-key map over them.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Jailbreak,
    PromptInjection,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Jailbreak, Label::PromptInjection];

    pub fn name(self) -> &'static str {
        match self {
            Label::Jailbreak => "jailbreak",
            Label::PromptInjection => "prompt_injection",
        }
    }

    pub fn from_name(name: &str) -> Option<Label> {
        match name {
            "jailbreak" => Some(Label::Jailbreak),
            "prompt_injection" => Some(Label::PromptInjection),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A value per label. Keyed statically so a missing label cannot be
/// represented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerLabel<T> {
    pub jailbreak: T,
    pub prompt_injection: T,
}

impl<T> PerLabel<T> {
    pub fn new(jailbreak: T, prompt_injection: T) -> Self {
        PerLabel { jailbreak, prompt_injection }
    }

    pub fn from_fn(mut f: impl FnMut(Label) -> T) -> Self {
        PerLabel { jailbreak: f(Label::Jailbreak), prompt_injection: f(Label::PromptInjection) }
    }

    pub fn get(&self, label: Label) -> &T {
        match label {
            Label::Jailbreak => &self.jailbreak,
            Label::PromptInjection => &self.prompt_injection,
        }
    }

    pub fn get_mut(&mut self, label: Label) -> &mut T {
        match label {
            Label::Jailbreak => &mut self.jailbreak,
            Label::PromptInjection => &mut self.prompt_injection,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> PerLabel<U> {
        PerLabel { jailbreak: f(self.jailbreak), prompt_injection: f(self.prompt_injection) }
    }

    pub fn as_ref(&self) -> PerLabel<&T> {
        PerLabel { jailbreak: &self.jailbreak, prompt_injection: &self.prompt_injection }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &T)> {
        Label::ALL.iter().map(move |&l| (l, self.get(l)))
    }
}
