//! Word lists shared by the synthetic generator and the built-in vocabulary.

pub const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "silver", "orange"];

pub const KINDS: [&str; 9] = [
    "car", "truck", "cone", "bus", "pedestrian", "barrier", "bike", "sign", "van",
];

/// Kinds that count towards a scene's agent count.
pub const AGENT_KINDS: [&str; 6] = ["car", "truck", "bus", "pedestrian", "bike", "van"];

pub const ZONES: [&str; 3] = ["left", "center", "right"];

pub fn zone_phrase(zone: usize) -> &'static str {
    match zone {
        0 => "on the left",
        1 => "in the middle",
        _ => "on the right",
    }
}

/// Imperative command templates; `{t}` is replaced by the target description.
pub const COMMAND_TEMPLATES: [&str; 8] = [
    "park behind the {t}",
    "pull over next to the {t}",
    "follow the {t}",
    "drive up to the {t}",
    "drop me off near the {t}",
    "turn toward the {t}",
    "pass the {t}",
    "slow down near the {t}",
];

/// Urgent wrappers around a rendered imperative `{c}` (lower-case, no final punctuation).
pub const URGENT_TEMPLATES: [&str; 4] = [
    "Hurry! {C}.",
    "Wait, {c} now!",
    "Quick, {c}!",
    "Hold on! {C}.",
];

pub const COMMANDING_TEMPLATES: [&str; 2] = ["{C}.", "Please {c}."];

/// Informative phrasings of the target description `{t}`.
pub const INFORMATIVE_TEMPLATES: [&str; 3] = [
    "The {t} is where I want to go.",
    "My destination is the {t}.",
    "I think the spot next to the {t} looks good.",
];

/// Clause appended to push a command past the long-text threshold.
pub const LONG_TEXT_FILLER: &str =
    "because my friend is waiting for me there and we are already running quite late for the dinner reservation tonight";

/// Every word the generator can emit, plus punctuation tokens.
pub fn all_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push_text = |s: &str| {
        for w in s.split(|c: char| !c.is_alphanumeric()) {
            let w = w.trim().to_lowercase();
            if !w.is_empty() && w != "t" && w != "c" {
                words.push(w);
            }
        }
    };
    for list in [&COLORS[..], &KINDS[..], &ZONES[..]] {
        for w in list {
            push_text(w);
        }
    }
    for z in 0..3 {
        push_text(zone_phrase(z));
    }
    for t in COMMAND_TEMPLATES
        .iter()
        .chain(&URGENT_TEMPLATES)
        .chain(&COMMANDING_TEMPLATES)
        .chain(&INFORMATIVE_TEMPLATES)
    {
        push_text(t);
    }
    push_text(LONG_TEXT_FILLER);
    for p in [".", ",", "!", "?", "'"] {
        words.push(p.to_string());
    }
    words.sort();
    words.dedup();
    words
}
