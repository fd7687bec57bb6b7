//! Emotion categories for commands: a deterministic rule-based classifier and
//! an external-classifier client with timeout and rule-based fallback.
//!
//! Rule order is Urgent > Commanding > Informative:
//! - Urgent: an exclamation mark, one of the urgency words, the phrase
//!   "hold on", or "stop" heading a clause.
//! - Commanding: the first clause starts (after an optional "please") with an
//!   imperative verb from a fixed list.
//! - Informative: everything else.

use std::io::Write;
use std::process::{Command as Process, Stdio};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::tokenizer::split_words;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Urgent,
    Commanding,
    Informative,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; 3] = [
        EmotionCategory::Urgent,
        EmotionCategory::Commanding,
        EmotionCategory::Informative,
    ];

    /// Row in the emotion embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            EmotionCategory::Urgent => "urgent",
            EmotionCategory::Commanding => "commanding",
            EmotionCategory::Informative => "informative",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "urgent" => Some(EmotionCategory::Urgent),
            "commanding" => Some(EmotionCategory::Commanding),
            "informative" => Some(EmotionCategory::Informative),
            _ => None,
        }
    }
}

const URGENCY_WORDS: [&str; 4] = ["hurry", "now", "quick", "wait"];

const IMPERATIVE_VERBS: [&str; 15] = [
    "park", "turn", "stop", "pull", "drive", "drop", "follow", "pass", "slow", "make", "go",
    "take", "head", "keep", "pick",
];

const CLAUSE_BREAKS: [&str; 6] = [",", ".", ";", "!", "?", ":"];

pub fn classify_rule(text: &str) -> EmotionCategory {
    let words = split_words(text);
    let clauses: Vec<&[String]> = words
        .split(|w| CLAUSE_BREAKS.contains(&w.as_str()))
        .filter(|c| !c.is_empty())
        .collect();

    let exclaim = text.contains('!');
    let lexicon = words.iter().any(|w| URGENCY_WORDS.contains(&w.as_str()));
    let hold_on = words.windows(2).any(|p| p[0] == "hold" && p[1] == "on");
    let stop_head = clauses.iter().any(|c| c[0] == "stop");
    if exclaim || lexicon || hold_on || stop_head {
        return EmotionCategory::Urgent;
    }

    if let Some(first) = clauses.first() {
        let head = if first[0] == "please" { first.get(1) } else { first.first() };
        if head.is_some_and(|w| IMPERATIVE_VERBS.contains(&w.as_str())) {
            return EmotionCategory::Commanding;
        }
    }
    EmotionCategory::Informative
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionSource {
    Rule,
    External,
    /// External classifier failed; the rule-based answer was used.
    Fallback { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmotionOutcome {
    pub category: EmotionCategory,
    pub source: EmotionSource,
}

pub trait EmotionClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<EmotionOutcome>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RuleClassifier;

impl EmotionClassifier for RuleClassifier {
    fn classify(&self, text: &str) -> Result<EmotionOutcome> {
        if text.trim().is_empty() {
            return Err(Error::Validation("command text is empty".into()));
        }
        Ok(EmotionOutcome {
            category: classify_rule(text),
            source: EmotionSource::Rule,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
}

#[derive(Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: String,
}

/// Carries one JSON request document and returns the JSON response document.
pub trait Transport: Send + Sync + 'static {
    fn exchange(&self, request: &str) -> Result<String>;
}

/// Runs a program per request, writing the request to its stdin and reading
/// the response from its stdout.
#[derive(Clone, Debug)]
pub struct ProcessTransport {
    pub program: String,
    pub args: Vec<String>,
}

impl ProcessTransport {
    /// Splits a command line on whitespace: first word is the program.
    pub fn from_command_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("emotion.command is empty".into()))?;
        Ok(ProcessTransport {
            program,
            args: parts.collect(),
        })
    }
}

impl Transport for ProcessTransport {
    fn exchange(&self, request: &str) -> Result<String> {
        let mut child = Process::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(request.as_bytes())
            .map_err(|e| Error::io(&self.program, e))?;
        let out = child
            .wait_with_output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Validation(format!(
                "{} exited with {}",
                self.program, out.status
            )));
        }
        String::from_utf8(out.stdout).map_err(|e| Error::Validation(e.to_string()))
    }
}

/// Client for an external classifier. Requests are serialized per instance;
/// any failure or timeout falls back to the rule-based answer.
pub struct ExternalClassifier<T: Transport> {
    transport: Arc<T>,
    timeout: Duration,
    lock: Mutex<()>,
}

impl<T: Transport> ExternalClassifier<T> {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

    pub fn new(transport: T, timeout: Duration) -> Self {
        ExternalClassifier {
            transport: Arc::new(transport),
            timeout,
            lock: Mutex::new(()),
        }
    }

    fn ask(&self, text: &str) -> std::result::Result<EmotionCategory, String> {
        let request = serde_json::to_string(&ClassifyRequest {
            text: text.to_string(),
        })
        .map_err(|e| e.to_string())?;
        let (tx, rx) = mpsc::channel();
        let transport = Arc::clone(&self.transport);
        std::thread::spawn(move || {
            let _ = tx.send(transport.exchange(&request));
        });
        let reply = match rx.recv_timeout(self.timeout) {
            Ok(Ok(body)) => body,
            Ok(Err(e)) => return Err(e.to_string()),
            Err(_) => return Err(format!("timed out after {} ms", self.timeout.as_millis())),
        };
        let resp: ClassifyResponse =
            serde_json::from_str(reply.trim()).map_err(|e| format!("bad response: {e}"))?;
        EmotionCategory::from_label(&resp.label)
            .ok_or_else(|| format!("unknown label {:?}", resp.label))
    }
}

impl<T: Transport> EmotionClassifier for ExternalClassifier<T> {
    fn classify(&self, text: &str) -> Result<EmotionOutcome> {
        if text.trim().is_empty() {
            return Err(Error::Validation("command text is empty".into()));
        }
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        Ok(match self.ask(text) {
            Ok(category) => EmotionOutcome {
                category,
                source: EmotionSource::External,
            },
            Err(reason) => {
                log::warn!("external emotion classifier failed ({reason}); using rules");
                EmotionOutcome {
                    category: classify_rule(text),
                    source: EmotionSource::Fallback { reason },
                }
            }
        })
    }
}

/// Thirty labelled commands covering the three categories.
pub fn fixture() -> Vec<(&'static str, EmotionCategory)> {
    use EmotionCategory::*;
    vec![
        ("Wow hold on! That looks like my stolen bike over there! Drop me off next to it.", Urgent),
        ("Oh, right here! Park behind that white car.", Urgent),
        ("This car just passed a crosswalk, slow down to check for pedestrians!", Urgent),
        ("Hurry! Park behind the red car on the left.", Urgent),
        ("Wait, pull over next to the blue truck on the right now!", Urgent),
        ("Quick, follow the green cone in the middle!", Urgent),
        ("Hold on! Drive up to the white bus on the left.", Urgent),
        ("Stop next to the yellow van on the right.", Urgent),
        ("We need to get there now, the meeting already started.", Urgent),
        ("Please hurry, my flight leaves soon.", Urgent),
        ("Make a left turn at the next intersection.", Commanding),
        ("Park behind the red car on the left.", Commanding),
        ("Pull over next to the blue truck on the right.", Commanding),
        ("Follow the green cone in the middle.", Commanding),
        ("Drive up to the white bus on the left.", Commanding),
        ("Drop me off near the black car on the right.", Commanding),
        ("Turn toward the red truck in the middle.", Commanding),
        ("Please pass the blue car on the left.", Commanding),
        ("Slow down near the green truck on the right.", Commanding),
        ("Take the second exit at the roundabout.", Commanding),
        ("The bus stop is the blue shelter on the right side.", Informative),
        ("The red car on the left is where I want to go.", Informative),
        ("My destination is the blue truck on the right.", Informative),
        ("I think the spot next to the green cone in the middle looks good.", Informative),
        ("The white bus in the middle is where I want to go.", Informative),
        ("My destination is the black car on the left.", Informative),
        ("I think the spot next to the red truck on the right looks good.", Informative),
        ("There is a parking space behind the silver van.", Informative),
        ("That building with the green roof is my office.", Informative),
        ("It would be nice to end up near the cafe.", Informative),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exemplar_commands() {
        assert_eq!(
            classify_rule("Wow hold on! That looks like my stolen bike over there! Drop me off next to it."),
            EmotionCategory::Urgent
        );
        assert_eq!(
            classify_rule("Make a left turn at the next intersection."),
            EmotionCategory::Commanding
        );
        assert_eq!(
            classify_rule("The bus stop is the blue shelter on the right side."),
            EmotionCategory::Informative
        );
    }

    #[test]
    fn fixture_agrees() {
        for (text, want) in fixture() {
            assert_eq!(classify_rule(text), want, "{text}");
        }
        assert_eq!(fixture().len(), 30);
    }

    struct Fixed(&'static str);
    impl Transport for Fixed {
        fn exchange(&self, request: &str) -> Result<String> {
            let req: ClassifyRequest = serde_json::from_str(request).unwrap();
            assert!(!req.text.is_empty());
            Ok(self.0.to_string())
        }
    }

    struct Slow;
    impl Transport for Slow {
        fn exchange(&self, _: &str) -> Result<String> {
            std::thread::sleep(Duration::from_millis(300));
            Ok(r#"{"label":"urgent"}"#.into())
        }
    }

    #[test]
    fn external_label_is_used() {
        let c = ExternalClassifier::new(Fixed(r#"{"label": "informative"}"#), Duration::from_secs(2));
        let out = c.classify("Park here.").unwrap();
        assert_eq!(out.category, EmotionCategory::Informative);
        assert_eq!(out.source, EmotionSource::External);
    }

    #[test]
    fn timeout_and_bad_label_fall_back() {
        let c = ExternalClassifier::new(Slow, Duration::from_millis(20));
        let out = c.classify("Park here.").unwrap();
        assert_eq!(out.category, EmotionCategory::Commanding);
        assert!(matches!(out.source, EmotionSource::Fallback { .. }));

        let c = ExternalClassifier::new(Fixed(r#"{"label": "angry"}"#), Duration::from_secs(2));
        let out = c.classify("Park here.").unwrap();
        assert!(matches!(out.source, EmotionSource::Fallback { .. }));
    }
}
