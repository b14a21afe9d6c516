use crate::corpus::Question;

/// Instruction appended to prompts of prefix-tuning examples.
pub const PREFIX_INSTRUCTION: &str = "Please provide the initial step towards resolving the question. This step may serve as a foundation but might not encompass the entire solution.";

/// `"<prompt> <instruction>"`. Not idempotent: applying it twice repeats
/// the instruction.
pub fn apply_template(q: &Question) -> String {
    template_text(&q.prompt_text)
}

pub fn template_text(prompt: &str) -> String {
    format!("{prompt} {PREFIX_INSTRUCTION}")
}
