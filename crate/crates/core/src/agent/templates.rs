//! Prompt templates, versioned by directory. Placeholders are `{name}`;
//! anything else in braces is left alone.

pub const VERSION: &str = "v1";
pub const SYSTEM: &str = include_str!("../../templates/v1/system.txt");
pub const BRAINSTORM: &str = include_str!("../../templates/v1/brainstorm.txt");
pub const REASON: &str = include_str!("../../templates/v1/reason.txt");
pub const RETRY: &str = include_str!("../../templates/v1/retry.txt");

/// Stage headers of the reasoning chain, in order.
pub const STAGES: [&str; 4] = [
    "## 1. Role clarification",
    "## 2. Scene understanding",
    "## 3. Motion instruction",
    "## 4. Planner generation",
];

pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
