//! Prompt/answer construction in the two coordinate wire formats and the
//! attribute-masking transform used for ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundingInstance;
use crate::geometry::{quantize, GeometryError, QuantizedBox};
use crate::knowledge::PromptDictionary;

/// Instruction line shown to JSON-emitting models, reproduced verbatim.
pub const JSON_SCHEMA_LINE: &str = r#"[{"bbox_2d": [x1, y1, x2, y2], "label": "label"}, ...]"#;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("description must not be empty")]
    EmptyDescription,
    #[error("no lexicon for attribute {0:?}")]
    UnknownAttribute(String),
    #[error("class name {0:?} cannot be encoded in an answer")]
    UnencodableLabel(String),
    #[error("instance {image_id}/{class_name}: {source}")]
    Geometry {
        image_id: String,
        class_name: String,
        #[source]
        source: GeometryError,
    },
    #[error("prompt dictionary has no entry for: {}", .0.join(", "))]
    CoverageGap(Vec<String>),
    #[error("attribute masking needs attribute descriptions")]
    MaskWithoutKnowledge,
    #[error("invalid lexicon term {0:?}")]
    BadTerm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    /// `Label <loc_x1><loc_y1><loc_x2><loc_y2>` per box, one per line.
    LocToken,
    /// `[{"bbox_2d": [...], "label": ...}]`.
    JsonBox,
}

impl WireFormat {
    pub const ALL: [WireFormat; 2] = [WireFormat::LocToken, WireFormat::JsonBox];

    pub fn as_str(&self) -> &'static str {
        match self {
            WireFormat::LocToken => "loc_token",
            WireFormat::JsonBox => "json_box",
        }
    }
}

impl fmt::Display for WireFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WireFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "loc_token" | "loc" | "florence" => Ok(WireFormat::LocToken),
            "json_box" | "json" | "qwen" => Ok(WireFormat::JsonBox),
            other => Err(format!("unknown wire format {other:?} (expected loc-token or json-box)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Intensity,
    Density,
    Location,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Shape,
        Attribute::Intensity,
        Attribute::Density,
        Attribute::Location,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Intensity => "intensity",
            Attribute::Density => "density",
            Attribute::Location => "location",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PromptError::UnknownAttribute(s.to_string()))
    }
}

/// Compiled matcher for one attribute's term set.
#[derive(Debug, Clone)]
struct TermMatcher {
    regex: Regex,
}

impl TermMatcher {
    fn new(terms: &[String]) -> Result<Self, PromptError> {
        let mut parts: Vec<(usize, String)> = Vec::with_capacity(terms.len());
        for term in terms {
            let pieces: Vec<String> = term
                .split(|c: char| c == '-' || c.is_whitespace())
                .filter(|p| !p.is_empty())
                .map(regex::escape)
                .collect();
            if pieces.is_empty() {
                return Err(PromptError::BadTerm(term.clone()));
            }
            parts.push((term.chars().count(), pieces.join(r"[-\s]+")));
        }
        // leftmost-first alternation: longer terms must come first
        parts.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let alternation = parts.into_iter().map(|(_, p)| p).collect::<Vec<_>>().join("|");
        let regex = Regex::new(&format!(r"(?i)\b(?:{alternation})\b"))
            .map_err(|e| PromptError::BadTerm(e.to_string()))?;
        Ok(Self { regex })
    }
}

/// The four attribute term sets.
#[derive(Debug, Clone)]
pub struct Lexicons {
    pub version: u32,
    terms: BTreeMap<Attribute, Vec<String>>,
    matchers: BTreeMap<Attribute, TermMatcher>,
}

#[derive(Serialize, Deserialize)]
struct LexiconDoc {
    version: u32,
    attributes: BTreeMap<String, Vec<String>>,
}

impl Lexicons {
    pub fn shipped() -> Self {
        Self::from_json(include_str!("../assets/lexicons.json")).expect("shipped lexicons are valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let doc: LexiconDoc =
            serde_json::from_str(text).map_err(|e| PromptError::BadTerm(e.to_string()))?;
        let mut terms = BTreeMap::new();
        let mut matchers = BTreeMap::new();
        for (name, list) in doc.attributes {
            let attribute: Attribute = name.parse()?;
            let list: Vec<String> = list.into_iter().map(|t| t.trim().to_lowercase()).collect();
            if list.is_empty() {
                return Err(PromptError::BadTerm(format!("empty term set for {attribute}")));
            }
            matchers.insert(attribute, TermMatcher::new(&list)?);
            terms.insert(attribute, list);
        }
        Ok(Self {
            version: doc.version,
            terms,
            matchers,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = LexiconDoc {
            version: self.version,
            attributes: self
                .terms
                .iter()
                .map(|(a, t)| (a.as_str().to_string(), t.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("lexicons serialize")
    }

    pub fn terms(&self, attribute: Attribute) -> Option<&[String]> {
        self.terms.get(&attribute).map(Vec::as_slice)
    }

    fn matcher(&self, attribute: Attribute) -> Result<&TermMatcher, PromptError> {
        self.matchers
            .get(&attribute)
            .ok_or_else(|| PromptError::UnknownAttribute(attribute.to_string()))
    }

    /// Number of term occurrences of `attribute` in `text`.
    pub fn count_matches(&self, text: &str, attribute: Attribute) -> usize {
        self.matchers
            .get(&attribute)
            .map_or(0, |m| m.regex.find_iter(text).count())
    }
}

static CLEANUPS: std::sync::LazyLock<[(Regex, &'static str); 6]> = std::sync::LazyLock::new(|| {
    [
        // space before closing punctuation
        (Regex::new(r"\s+([,.;:!?)\]])").unwrap(), "$1"),
        // space after opening brackets
        (Regex::new(r"([(\[])\s+").unwrap(), "$1"),
        // empty brackets
        (Regex::new(r"\(\s*\)|\[\s*\]").unwrap(), ""),
        // stacked separators keep the strongest one
        (Regex::new(r"[,;:]+([.!?])").unwrap(), "$1"),
        (Regex::new(r"([,;:])[,;:]+").unwrap(), "$1"),
        // separators left at the very start
        (Regex::new(r"^[\s,;:.]+").unwrap(), ""),
    ]
});

fn normalize_spacing(text: &str) -> String {
    let mut out = text.split_whitespace().collect::<Vec<_>>().join(" ");
    for (re, rep) in CLEANUPS.iter() {
        out = re.replace_all(&out, *rep).into_owned();
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn remove_matches(text: &str, matcher: &TermMatcher) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for m in matcher.regex.find_iter(text) {
        let (mut start, mut end) = (m.start(), m.end());
        // a hyphen joining the removed term to a neighbouring word goes too
        if bytes.get(end) == Some(&b'-') {
            end += 1;
        } else if start > cursor && bytes[start - 1] == b'-' {
            start -= 1;
        }
        // a list comma that separated the removed term from the next word
        let after = text[end..].trim_start();
        let before = text[cursor..start].trim_end();
        if after.starts_with(',') && before.ends_with(|c: char| c.is_alphanumeric()) {
            end = text.len() - after.len() + 1;
        }
        out.push_str(&text[cursor..start]);
        out.push(' ');
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Removes every term of `attribute` from `description`.
///
/// Matching is case-insensitive on word boundaries, longest term first, and
/// a hyphen inside a term also matches whitespace. Afterwards only spacing
/// and dangling punctuation are normalized. The transform is applied until
/// it reaches a fixed point.
pub fn mask_attribute(
    description: &str,
    attribute: Attribute,
    lexicons: &Lexicons,
) -> Result<String, PromptError> {
    if description.trim().is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    let matcher = lexicons.matcher(attribute)?;
    if !matcher.regex.is_match(description) {
        return Ok(description.to_string());
    }
    let mut current = description.to_string();
    loop {
        let next = normalize_spacing(&remove_matches(&current, matcher));
        if next == current {
            return Ok(next);
        }
        current = next;
    }
}

fn ends_sentence(text: &str) -> bool {
    text.trim_end().ends_with(['.', '!', '?'])
}

/// Prompt for the location-token format, with the optional description
/// appended as `, which means {description}`.
pub fn loc_token_prompt(class_name: &str, description: Option<&str>) -> String {
    match description {
        None => format!("Locate disease {class_name}."),
        Some(d) => {
            let d = d.trim();
            let stop = if ends_sentence(d) { "" } else { "." };
            format!("Locate disease {class_name}, which means {d}{stop}")
        }
    }
}

/// Prompt for the JSON format; a description becomes a trailing `Note:` line.
pub fn json_box_prompt(class_name: &str, description: Option<&str>) -> String {
    let base = format!("Return bounding boxes of '{class_name}' areas as JSON format:\n{JSON_SCHEMA_LINE}");
    match description {
        None => base,
        Some(d) => format!("{base}\nNote: {}", d.trim()),
    }
}

pub fn loc_token_answer(label: &str, boxes: &[QuantizedBox]) -> String {
    boxes
        .iter()
        .map(|q| {
            let [a, b, c, d] = q.values();
            format!("{label} <loc_{a}><loc_{b}><loc_{c}><loc_{d}>")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn json_box_answer(label: &str, boxes: &[QuantizedBox]) -> String {
    let label = serde_json::to_string(label).expect("strings serialize");
    let objects: Vec<String> = boxes
        .iter()
        .map(|q| {
            let [a, b, c, d] = q.values();
            format!(r#"{{"bbox_2d": [{a}, {b}, {c}, {d}], "label": {label}}}"#)
        })
        .collect();
    format!("[{}]", objects.join(", "))
}

/// A prompt/answer pair for one image–abnormality instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub prompt: String,
    pub answer: String,
    pub format: WireFormat,
    pub image_id: String,
    pub class_name: String,
    /// Not serialized: recoverable by parsing `answer`.
    #[serde(skip)]
    pub boxes: Vec<QuantizedBox>,
}

fn check_label(class_name: &str) -> Result<(), PromptError> {
    let bad = class_name.trim().is_empty()
        || class_name.contains(['<', '>', '\n', '\r'])
        || class_name != class_name.trim();
    if bad {
        Err(PromptError::UnencodableLabel(class_name.to_string()))
    } else {
        Ok(())
    }
}

/// Builds one pair. Boxes are emitted in the instance's fused-box order.
pub fn build_pair(
    instance: &GroundingInstance,
    description: Option<&str>,
    format: WireFormat,
) -> Result<TrainingPair, PromptError> {
    check_label(&instance.class_name)?;
    let boxes = instance
        .fused_boxes
        .iter()
        .map(|b| quantize(b, instance.dims))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| PromptError::Geometry {
            image_id: instance.image_id.clone(),
            class_name: instance.class_name.clone(),
            source,
        })?;
    let label = instance.class_name.as_str();
    let (prompt, answer) = match format {
        WireFormat::LocToken => (loc_token_prompt(label, description), loc_token_answer(label, &boxes)),
        WireFormat::JsonBox => (json_box_prompt(label, description), json_box_answer(label, &boxes)),
    };
    Ok(TrainingPair {
        prompt,
        answer,
        format,
        image_id: instance.image_id.clone(),
        class_name: instance.class_name.clone(),
        boxes,
    })
}

/// One pair per instance. With a dictionary every prompt carries the class
/// description, optionally with one attribute masked out first.
pub fn build_eval_set(
    instances: &[GroundingInstance],
    dictionary: Option<&PromptDictionary>,
    format: WireFormat,
    masked: Option<Attribute>,
    lexicons: &Lexicons,
) -> Result<Vec<TrainingPair>, PromptError> {
    let Some(dictionary) = dictionary else {
        if masked.is_some() {
            return Err(PromptError::MaskWithoutKnowledge);
        }
        return instances.iter().map(|i| build_pair(i, None, format)).collect();
    };

    let missing = dictionary.missing(instances.iter().map(|i| i.class_name.as_str()));
    if !missing.is_empty() {
        return Err(PromptError::CoverageGap(missing));
    }
    let mut cache: BTreeMap<&str, String> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(instances.len());
    for inst in instances {
        let description = match cache.get(inst.class_name.as_str()) {
            Some(d) => d.clone(),
            None => {
                let raw = dictionary
                    .get(&inst.class_name)
                    .expect("coverage checked above");
                let d = match masked {
                    Some(attr) => mask_attribute(raw, attr, lexicons)?,
                    None => raw.to_string(),
                };
                cache.insert(&inst.class_name, d.clone());
                d
            }
        };
        pairs.push(build_pair(inst, Some(&description), format)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundingBox, ImageDims};
    use proptest::prelude::*;

    fn lex() -> Lexicons {
        Lexicons::shipped()
    }

    fn q(a: u32, b: u32, c: u32, d: u32) -> QuantizedBox {
        QuantizedBox::new(a, b, c, d).unwrap()
    }

    fn instance(class: &str, boxes: &[[f64; 4]]) -> GroundingInstance {
        GroundingInstance {
            image_id: "img".into(),
            class_name: class.into(),
            fused_boxes: boxes
                .iter()
                .map(|c| BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap())
                .collect(),
            dims: ImageDims::new(1000, 1000).unwrap(),
        }
    }

    #[test]
    fn shipped_lexicon_sizes() {
        let l = lex();
        assert_eq!(l.terms(Attribute::Shape).unwrap().len(), 31);
        assert_eq!(l.terms(Attribute::Density).unwrap().len(), 21);
        assert_eq!(l.terms(Attribute::Intensity).unwrap().len(), 25);
        assert_eq!(l.terms(Attribute::Location).unwrap().len(), 37);
    }

    #[test]
    fn loc_token_pair_matches_template() {
        let pair = build_pair(&instance("Disease", &[[145.0, 300.0, 812.0, 940.0]]), None, WireFormat::LocToken).unwrap();
        assert_eq!(pair.prompt, "Locate disease Disease.");
        assert_eq!(pair.answer, "Disease <loc_145><loc_300><loc_812><loc_940>");
        assert_eq!(pair.boxes, vec![q(145, 300, 812, 940)]);
    }

    #[test]
    fn json_box_pair_matches_template() {
        let pair = build_pair(
            &instance("Disease", &[[276.0, 141.0, 484.0, 218.0], [552.0, 127.0, 767.0, 230.0]]),
            None,
            WireFormat::JsonBox,
        )
        .unwrap();
        assert_eq!(
            pair.prompt,
            "Return bounding boxes of 'Disease' areas as JSON format:\n[{\"bbox_2d\": [x1, y1, x2, y2], \"label\": \"label\"}, ...]"
        );
        assert_eq!(
            pair.answer,
            r#"[{"bbox_2d": [276, 141, 484, 218], "label": "Disease"}, {"bbox_2d": [552, 127, 767, 230], "label": "Disease"}]"#
        );
    }

    #[test]
    fn knowledge_prompts() {
        let d = "An area of increased density in the lung fields, typically appearing as a white or grayish patch.";
        assert_eq!(
            loc_token_prompt("lung opacity", Some(d)),
            "Locate disease lung opacity, which means An area of increased density in the lung fields, typically appearing as a white or grayish patch."
        );
        assert_eq!(loc_token_prompt("x", Some("no stop")), "Locate disease x, which means no stop.");
        assert!(json_box_prompt("lung opacity", Some(d)).ends_with(&format!("...]\nNote: {d}")));
    }

    #[test]
    fn unencodable_labels_rejected() {
        for bad in ["", "a<b", "two\nlines", " padded"] {
            assert!(matches!(
                build_pair(&instance(bad, &[[0.0, 0.0, 1.0, 1.0]]), None, WireFormat::LocToken),
                Err(PromptError::UnencodableLabel(_))
            ));
        }
    }

    #[test]
    fn mask_examples() {
        let s = "round dense opacity within the lung";
        assert_eq!(mask_attribute(s, Attribute::Shape, &lex()).unwrap(), "dense opacity within the lung");
        assert_eq!(mask_attribute(s, Attribute::Location, &lex()).unwrap(), "round dense opacity");
        assert_eq!(mask_attribute("nothing to see here", Attribute::Density, &lex()).unwrap(), "nothing to see here");
        assert!(matches!(mask_attribute("  ", Attribute::Shape, &lex()), Err(PromptError::EmptyDescription)));
    }

    #[test]
    fn mask_handles_hyphen_space_and_case() {
        let l = lex();
        assert_eq!(mask_attribute("Ground glass haze.", Attribute::Intensity, &l).unwrap(), "haze.");
        assert_eq!(mask_attribute("A ground-glass focus.", Attribute::Intensity, &l).unwrap(), "A focus.");
        assert_eq!(mask_attribute("Fluid-filled spaces.", Attribute::Density, &l).unwrap(), "filled spaces.");
        assert_eq!(
            mask_attribute("Air trapped in the pleural space, lateral.", Attribute::Location, &l).unwrap(),
            "Air trapped in the."
        );
        // word boundaries: "density" is a term, "dense" must not eat "denser"
        assert_eq!(mask_attribute("denser tissue", Attribute::Density, &l).unwrap(), "denser tissue");
    }

    #[test]
    fn mask_cleans_punctuation() {
        let l = lex();
        assert_eq!(
            mask_attribute("Calcified deposits in the aortic wall appearing as bright, irregular opacities.", Attribute::Intensity, &l).unwrap(),
            "Calcified deposits in the aortic wall appearing as irregular opacities."
        );
        assert_eq!(mask_attribute("white (bright) spot", Attribute::Intensity, &l).unwrap(), "spot");
    }

    #[test]
    fn unknown_attribute_errors() {
        assert!("texture".parse::<Attribute>().is_err());
        let only_shape = Lexicons::from_json(r#"{"version": 1, "attributes": {"shape": ["round"]}}"#).unwrap();
        assert!(matches!(
            mask_attribute("round", Attribute::Density, &only_shape),
            Err(PromptError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn eval_set_coverage_and_masking() {
        let dict = PromptDictionary::vindr();
        let insts = vec![instance("Lung Opacity", &[[1.0, 1.0, 50.0, 50.0]]), instance("Edema", &[[1.0, 1.0, 5.0, 5.0]])];
        let pairs = build_eval_set(&insts, Some(&dict), WireFormat::LocToken, Some(Attribute::Intensity), &lex()).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(lex().count_matches(&p.prompt, Attribute::Intensity), 0, "{}", p.prompt);
        }
        assert!(build_eval_set(&[], Some(&dict), WireFormat::JsonBox, None, &lex()).unwrap().is_empty());
        let err = build_eval_set(&[instance("Unicorn", &[[0.0, 0.0, 1.0, 1.0]])], Some(&dict), WireFormat::JsonBox, None, &lex()).unwrap_err();
        assert!(matches!(err, PromptError::CoverageGap(names) if names == vec!["Unicorn"]));
        assert!(matches!(
            build_eval_set(&insts, None, WireFormat::JsonBox, Some(Attribute::Shape), &lex()),
            Err(PromptError::MaskWithoutKnowledge)
        ));
    }

    fn words(s: &str) -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_only_removes(
            picks in prop::collection::vec((0usize..4, 0usize..64, prop::bool::ANY), 1..12),
            attr in 0usize..4,
        ) {
            let l = lex();
            let fillers = ["the", "area", "seen", "with", "near", "opacity", "and", "spots"];
            let mut text = String::new();
            for (a, i, filler) in picks {
                let word = if filler {
                    fillers[i % fillers.len()].to_string()
                } else {
                    let terms = l.terms(Attribute::ALL[a]).unwrap();
                    terms[i % terms.len()].clone()
                };
                text.push_str(&word);
                text.push(if i % 5 == 0 { ',' } else { ' ' });
                text.push(' ');
            }
            let attribute = Attribute::ALL[attr];
            let once = mask_attribute(&text, attribute, &l).unwrap_or_default();
            prop_assert_eq!(l.count_matches(&once, attribute), 0);
            if !once.is_empty() {
                prop_assert_eq!(mask_attribute(&once, attribute, &l).unwrap(), once.clone());
            }
            let mut pool = words(&text);
            for w in words(&once) {
                let pos = pool.iter().position(|p| *p == w);
                prop_assert!(pos.is_some(), "word {w} not in original");
                pool.remove(pos.unwrap());
            }
        }
    }
}
