//! Parsers for raw model output in both wire formats. They accept any
//! string, never panic, and record every fragment they throw away.

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::{dequantize, BoundingBox, ImageDims, QuantizedBox, QUANT_MAX};
use crate::promptgen::WireFormat;

const EXCERPT_CHARS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Fewer than four coordinate tokens at the end of a run.
    IncompleteGroup,
    /// A coordinate token above the vocabulary maximum.
    OutOfVocab,
    /// x1 > x2 or y1 > y2.
    InvertedBox,
    /// Text that looks like a coordinate token but is malformed.
    MalformedToken,
    /// JSON element without a string `label`.
    MissingLabel,
    /// JSON element whose `bbox_2d` is not four numbers.
    BadBbox,
    /// JSON array element that is not an object.
    NotAnObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discard {
    /// Byte range in the raw output.
    pub span: Range<usize>,
    pub excerpt: String,
    pub reason: DiscardReason,
}

/// Coordinates as they appeared on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireBox {
    Quantized(QuantizedBox),
    Json([f64; 4]),
}

impl WireBox {
    pub fn values(&self) -> [f64; 4] {
        match self {
            WireBox::Quantized(q) => q.values().map(f64::from),
            WireBox::Json(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub coords: WireBox,
    /// Emission order, starting at 0.
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub predictions: Vec<Prediction>,
    pub discarded: Vec<Discard>,
    pub fatal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl ParseReport {
    fn push(&mut self, label: String, coords: WireBox) {
        let rank = self.predictions.len();
        self.predictions.push(Prediction {
            label,
            coords,
            rank,
            score: 1.0,
        });
    }

    fn discard(&mut self, raw: &str, span: Range<usize>, reason: DiscardReason) {
        self.discarded.push(Discard {
            excerpt: excerpt(&raw[span.clone()]),
            span,
            reason,
        });
    }
}

fn excerpt(text: &str) -> String {
    let mut out: String = text.chars().take(EXCERPT_CHARS).collect();
    if text.chars().count() > EXCERPT_CHARS {
        out.push('…');
    }
    out
}

pub fn parse(raw: &str, format: WireFormat) -> ParseReport {
    match format {
        WireFormat::LocToken => parse_loc_tokens(raw),
        WireFormat::JsonBox => parse_json_boxes(raw),
    }
}

static LOC_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<loc_(\d+)>").unwrap());
static SPECIAL_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?s>|<pad>|<unk>").unwrap());

/// One coordinate token: byte span and parsed value (None if it overflows).
struct Token {
    span: Range<usize>,
    value: Option<u32>,
}

fn label_text(segment: &str) -> String {
    SPECIAL_TOKEN
        .replace_all(segment, " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `label<loc_a><loc_b><loc_c><loc_d>` groups. A run of 4k tokens
/// yields k boxes sharing the text before the run as their label; an empty
/// label inherits the previous one.
pub fn parse_loc_tokens(raw: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let tokens: Vec<Token> = LOC_TOKEN
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            Token {
                span: m.range(),
                value: c[1].parse::<u32>().ok(),
            }
        })
        .collect();

    // runs: tokens separated only by whitespace
    let mut runs: Vec<Range<usize>> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if raw[tokens[run.end - 1].span.end..tok.span.start].trim().is_empty() => run.end = i + 1,
            _ => runs.push(i..i + 1),
        }
    }

    let mut previous_label = String::new();
    let mut cursor = 0;
    for run in runs {
        let run_start = tokens[run.start].span.start;
        let segment = &raw[cursor..run_start];
        if segment.contains("<loc") {
            let at = cursor + segment.find("<loc").expect("checked");
            report.discard(raw, at..run_start, DiscardReason::MalformedToken);
        }
        let label = label_text(segment);
        let label = if label.is_empty() { previous_label.clone() } else { label };

        let run_tokens = &tokens[run.clone()];
        let mut groups = run_tokens.chunks_exact(4);
        for group in groups.by_ref() {
            let span = group[0].span.start..group[3].span.end;
            let values: Option<Vec<u32>> = group.iter().map(|t| t.value.filter(|v| *v <= u32::from(QUANT_MAX))).collect();
            let Some(v) = values else {
                report.discard(raw, span, DiscardReason::OutOfVocab);
                continue;
            };
            match QuantizedBox::new(v[0], v[1], v[2], v[3]) {
                Ok(q) => report.push(label.clone(), WireBox::Quantized(q)),
                Err(_) => report.discard(raw, span, DiscardReason::InvertedBox),
            }
        }
        let rest = groups.remainder();
        if let (Some(first), Some(last)) = (rest.first(), rest.last()) {
            report.discard(raw, first.span.start..last.span.end, DiscardReason::IncompleteGroup);
        }
        previous_label = label;
        cursor = tokens[run.end - 1].span.end;
    }
    let tail = &raw[cursor..];
    if let Some(at) = tail.find("<loc") {
        report.discard(raw, cursor + at..raw.len(), DiscardReason::MalformedToken);
    }
    report
}

/// Matching bracket pairs `(open, close)` for `[`/`]` and `{`/`}`, found in a
/// single pass that ignores brackets inside JSON strings.
fn bracket_pairs(raw: &str) -> (Vec<Range<usize>>, Vec<Range<usize>>) {
    let bytes = raw.as_bytes();
    let mut stack: Vec<(u8, usize)> = Vec::new();
    let mut arrays = Vec::new();
    let mut objects = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            } else if b == b'\n' {
                // JSON strings cannot span lines; treat it as prose
                in_string = false;
                stack.clear();
            }
            continue;
        }
        match b {
            b'"' if !stack.is_empty() => in_string = true,
            b'[' | b'{' => stack.push((b, i)),
            b']' | b'}' => {
                let open = if b == b']' { b'[' } else { b'{' };
                match stack.pop() {
                    Some((o, start)) if o == open => {
                        if open == b'[' {
                            arrays.push(start..i + 1);
                        } else {
                            objects.push(start..i + 1);
                        }
                    }
                    _ => stack.clear(),
                }
            }
            _ => {}
        }
    }
    arrays.sort_by_key(|r| r.start);
    objects.sort_by_key(|r| r.start);
    (arrays, objects)
}

static TRAILING_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",\s*([\]}])").unwrap());

fn parse_lenient(text: &str) -> Option<Value> {
    serde_json::from_str(text)
        .ok()
        .or_else(|| serde_json::from_str(&TRAILING_COMMA.replace_all(text, "$1")).ok())
}

fn has_bbox(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.contains_key("bbox_2d"))
}

fn element(report: &mut ParseReport, raw: &str, span: Range<usize>, value: &Value) {
    let Some(obj) = value.as_object() else {
        return report.discard(raw, span, DiscardReason::NotAnObject);
    };
    let coords: Option<Vec<f64>> = obj
        .get("bbox_2d")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 4)
        .and_then(|a| a.iter().map(Value::as_f64).collect());
    let Some(c) = coords.filter(|c| c.iter().all(|v| v.is_finite())) else {
        return report.discard(raw, span, DiscardReason::BadBbox);
    };
    let Some(label) = obj.get("label").and_then(Value::as_str) else {
        return report.discard(raw, span, DiscardReason::MissingLabel);
    };
    if c[0] > c[2] || c[1] > c[3] {
        return report.discard(raw, span, DiscardReason::InvertedBox);
    }
    report.push(label.to_string(), WireBox::Json([c[0], c[1], c[2], c[3]]));
}

/// Finds the first JSON array of `bbox_2d` objects in `raw`, ignoring prose
/// and code fences around it. Without one, standalone `bbox_2d` objects are
/// salvaged; with neither the report is fatal.
pub fn parse_json_boxes(raw: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let (arrays, objects) = bracket_pairs(raw);

    for span in &arrays {
        let Some(Value::Array(items)) = parse_lenient(&raw[span.clone()]) else {
            continue;
        };
        if !(items.is_empty() || items.iter().any(has_bbox)) {
            continue;
        }
        for item in &items {
            element(&mut report, raw, span.clone(), item);
        }
        return report;
    }

    let mut covered_until = 0;
    let mut found = false;
    for span in &objects {
        if span.start < covered_until {
            continue;
        }
        if let Some(value) = parse_lenient(&raw[span.clone()]).filter(has_bbox) {
            element(&mut report, raw, span.clone(), &value);
            covered_until = span.end;
            found = true;
        }
    }
    if !found {
        report.fatal = true;
        report.diagnostic = Some(format!("no bounding-box JSON found in: {:?}", excerpt(raw.trim())));
    }
    report
}

/// How JSON coordinates relate to the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsonCoords {
    /// 0–1000 on both axes, like the quantized grid.
    #[default]
    Normalized,
    /// Absolute pixels.
    Pixels,
}

impl std::str::FromStr for JsonCoords {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normalized" | "norm" => Ok(JsonCoords::Normalized),
            "pixels" | "pixel" | "px" => Ok(JsonCoords::Pixels),
            other => Err(format!("unknown JSON coordinate mode {other:?} (expected normalized or pixels)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelPrediction {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub rank: usize,
}

/// Converts parsed predictions to clamped pixel boxes. Boxes that end up
/// with zero width or height are dropped and reported in the warnings.
pub fn normalize_predictions(
    report: &ParseReport,
    dims: ImageDims,
    json_coords: JsonCoords,
) -> (Vec<PixelPrediction>, Vec<String>) {
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let scale = f64::from(QUANT_MAX);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for p in &report.predictions {
        let [x1, y1, x2, y2] = match p.coords {
            WireBox::Quantized(q) => dequantize(&q, dims).coords(),
            WireBox::Json(v) => match json_coords {
                JsonCoords::Normalized => [v[0] * w / scale, v[1] * h / scale, v[2] * w / scale, v[3] * h / scale],
                JsonCoords::Pixels => v,
            },
        };
        let clamped = [x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)];
        if clamped != [x1, y1, x2, y2] {
            warnings.push(format!("prediction {} clamped to image bounds", p.rank));
        }
        match BoundingBox::new(clamped[0], clamped[1], clamped[2], clamped[3]) {
            Ok(b) if !b.is_degenerate() => out.push(PixelPrediction {
                label: p.label.clone(),
                bbox: b,
                score: p.score,
                rank: p.rank,
            }),
            _ => warnings.push(format!("prediction {} dropped: zero-area box {:?}", p.rank, p.coords.values())),
        }
    }
    (out, warnings)
}

/// One line of a bulk prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPredictionRecord {
    pub image_id: String,
    pub class_name: String,
    pub format: WireFormat,
    pub raw_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedBox {
    pub label: String,
    /// Coordinates in the wire format's space.
    #[serde(rename = "box")]
    pub coords: [f64; 4],
    pub score: f64,
}

/// One line of a parsed prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub image_id: String,
    pub class_name: String,
    pub format: WireFormat,
    pub predictions: Vec<ParsedBox>,
    #[serde(default)]
    pub discarded: Vec<Discard>,
    #[serde(default)]
    pub fatal: bool,
}

impl ParsedRecord {
    pub fn from_raw(record: &RawPredictionRecord) -> Self {
        let report = parse(&record.raw_output, record.format);
        Self {
            image_id: record.image_id.clone(),
            class_name: record.class_name.clone(),
            format: record.format,
            predictions: report
                .predictions
                .iter()
                .map(|p| ParsedBox {
                    label: p.label.clone(),
                    coords: p.coords.values(),
                    score: p.score,
                })
                .collect(),
            discarded: report.discarded,
            fatal: report.fatal,
        }
    }

    /// Rebuilds a report so parsed dumps and raw files normalize the same way.
    /// Loc-token coordinates that are not valid grid values are dropped.
    pub fn to_report(&self) -> ParseReport {
        let mut report = ParseReport {
            fatal: self.fatal,
            ..Default::default()
        };
        for p in &self.predictions {
            let coords = match self.format {
                WireFormat::JsonBox => WireBox::Json(p.coords),
                WireFormat::LocToken => {
                    let c = p.coords;
                    let grid = c.iter().all(|v| v.fract() == 0.0 && (0.0..=f64::from(QUANT_MAX)).contains(v));
                    match grid.then(|| QuantizedBox::new(c[0] as u32, c[1] as u32, c[2] as u32, c[3] as u32)) {
                        Some(Ok(q)) => WireBox::Quantized(q),
                        _ => continue,
                    }
                }
            };
            let rank = report.predictions.len();
            report.predictions.push(Prediction {
                label: p.label.clone(),
                coords,
                rank,
                score: p.score,
            });
        }
        report
    }
}
