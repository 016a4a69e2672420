use crate::datamodel::{EorTriplet, Hop};
use crate::error::{Error, Result};

pub const TEXT_PLACEHOLDER: &str = "{TEXT}";
pub const EOR_PLACEHOLDER: &str = "{EOR}";

/// Rendered in place of the relation block when the scene graph found nothing.
pub const NO_RELATIONS_SENTINEL: &str = "(no visual relations detected)";

/// Instruction sentences of the three hops. Symbol names `T_i`, `EOR_i` and
/// `X_i` refer to the labelled fields of the rendered prompt.
pub const EMOTION_INSTRUCTION: &str =
    "Identify the primary emotions conveyed through T_i and EOR_i of the meme X_i.";
pub const TARGET_INSTRUCTION: &str = "Based on the T_i and the EOR_i of the meme X_i, provide a rationale for whether this meme targets women. Include specific elements that support this claim.";
pub const CONTEXT_INSTRUCTION: &str = "Given the text T_i and the Entity-Object Relationships EOR_i of the meme, provide the broader context C of meme X_i.";

const PREAMBLE: &str = "Meme X_i\nText T_i: \"{TEXT}\"\nEntity-Object Relations:\n{EOR}\n\n";

/// A prompt template for one hop; contains `{TEXT}` and `{EOR}` exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptHop {
    hop: Hop,
    template: String,
}

impl PromptHop {
    pub fn new(hop: Hop, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        for placeholder in [TEXT_PLACEHOLDER, EOR_PLACEHOLDER] {
            let n = template.matches(placeholder).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "template for hop {hop} must contain {placeholder} exactly once, found {n}"
                )));
            }
        }
        Ok(Self { hop, template })
    }

    /// The shipped template for `hop`.
    pub fn default_for(hop: Hop) -> Self {
        let instruction = match hop {
            Hop::Emotion => EMOTION_INSTRUCTION,
            Hop::Target => TARGET_INSTRUCTION,
            Hop::Context => CONTEXT_INSTRUCTION,
        };
        Self::new(hop, format!("{PREAMBLE}{instruction}")).expect("shipped templates are valid")
    }

    pub fn defaults() -> [PromptHop; 3] {
        Hop::ALL.map(Self::default_for)
    }

    pub fn hop(&self) -> Hop {
        self.hop
    }

    pub fn template(&self) -> &str {
        &self.template
    }
}

pub fn render_eor_block(eors: &[EorTriplet]) -> String {
    if eors.is_empty() {
        return NO_RELATIONS_SENTINEL.to_string();
    }
    eors.iter().map(EorTriplet::phrase).collect::<Vec<_>>().join("\n")
}

/// Render a hop's prompt. `eors` should already be top-k selected.
pub fn build_prompt(hop: &PromptHop, text: &str, eors: &[EorTriplet]) -> String {
    // Split once on each placeholder so substituted content is never re-scanned.
    let (before_text, after_text) = hop.template.split_once(TEXT_PLACEHOLDER).expect("validated");
    let eor = render_eor_block(eors);
    let render = |s: &str| s.replacen(EOR_PLACEHOLDER, &eor, 1);
    format!("{}{}{}", render(before_text), text, render(after_text))
}

/// Like [`build_prompt`], with earlier hops' rationales prepended.
pub fn build_chained_prompt(hop: &PromptHop, text: &str, eors: &[EorTriplet], prior: &[(Hop, &str)]) -> String {
    let base = build_prompt(hop, text, eors);
    if prior.is_empty() {
        return base;
    }
    let mut out = String::from("Earlier reasoning about this meme:\n");
    for (h, r) in prior {
        let name = match h {
            Hop::Emotion => "Emotion",
            Hop::Target => "Target",
            Hop::Context => "Context",
        };
        out.push_str(&format!("[{name}] {r}\n"));
    }
    out.push('\n');
    out.push_str(&base);
    out
}
