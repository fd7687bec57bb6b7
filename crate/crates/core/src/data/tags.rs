use serde::{Deserialize, Serialize};

use super::synthetic::MULTI_AGENT_THRESHOLD;
use super::{Dataset, Sample};

/// Commands longer than this many words are long-text.
pub const LONG_TEXT_WORDS: usize = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetTag {
    Normal,
    Restricted,
    MultiAgent,
    AmbiguousCommand,
    LongText,
}

impl SubsetTag {
    pub const ALL: [SubsetTag; 5] = [
        SubsetTag::Normal,
        SubsetTag::Restricted,
        SubsetTag::MultiAgent,
        SubsetTag::AmbiguousCommand,
        SubsetTag::LongText,
    ];

    /// Report column heading.
    pub fn column(self) -> &'static str {
        match self {
            SubsetTag::Normal => "Normal",
            SubsetTag::Restricted => "Restricted",
            SubsetTag::MultiAgent => "Multi-agent",
            SubsetTag::AmbiguousCommand => "Ambiguous Command",
            SubsetTag::LongText => "Long-text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "normal" => Some(SubsetTag::Normal),
            "restricted" => Some(SubsetTag::Restricted),
            "multi-agent" | "multiagent" => Some(SubsetTag::MultiAgent),
            "ambiguous" | "ambiguous-command" => Some(SubsetTag::AmbiguousCommand),
            "long-text" | "longtext" => Some(SubsetTag::LongText),
            _ => None,
        }
    }
}

pub fn tag_sample(sample: &Sample) -> Vec<SubsetTag> {
    let mut tags = Vec::new();
    let meta = sample.scene.meta;
    if meta.low_light {
        tags.push(SubsetTag::Restricted);
    }
    if meta.agent_count >= MULTI_AGENT_THRESHOLD {
        tags.push(SubsetTag::MultiAgent);
    }
    if meta.ambiguous {
        tags.push(SubsetTag::AmbiguousCommand);
    }
    if sample.word_count() > LONG_TEXT_WORDS {
        tags.push(SubsetTag::LongText);
    }
    if tags.is_empty() {
        tags.push(SubsetTag::Normal);
    }
    tags
}

pub fn tag_subsets(dataset: &Dataset) -> Vec<Vec<SubsetTag>> {
    dataset.samples.iter().map(tag_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, GenParams};

    fn with_words(n: usize) -> Sample {
        let mut s = generate_synthetic_scene(0, 0, &GenParams::default()).unwrap();
        s.command = vec!["go"; n].join(" ");
        s.scene.meta = Default::default();
        s
    }

    #[test]
    fn long_text_boundary() {
        assert_eq!(tag_sample(&with_words(24)), vec![SubsetTag::LongText]);
        assert_eq!(tag_sample(&with_words(23)), vec![SubsetTag::Normal]);
    }

    #[test]
    fn meta_tags_copy_and_co_occur() {
        let mut s = with_words(5);
        s.scene.meta.low_light = true;
        s.scene.meta.agent_count = 6;
        assert_eq!(tag_sample(&s), vec![SubsetTag::Restricted, SubsetTag::MultiAgent]);
        s.scene.meta.agent_count = 5;
        assert_eq!(tag_sample(&s), vec![SubsetTag::Restricted]);
    }
}
