//! Annotation ingestion, multi-rater weighted box fusion, split manifests and
//! the known/unknown class mapping used for zero-shot and OOD evaluation.
//!
//! The annotation schema is a flat table with the columns
//! `image_id, class_name, x_min, y_min, x_max, y_max, width, height` plus the
//! optional `rater_id` (alias `rad_id`) and `split`. The JSON form is an array
//! of objects with the same keys.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{iou, BoundingBox, ImageDims};

/// Default IoU at which rater boxes are merged.
pub const DEFAULT_WBF_IOU: f64 = 0.4;

const REQUIRED_COLUMNS: [&str; 8] = [
    "image_id", "class_name", "x_min", "y_min", "x_max", "y_max", "width", "height",
];

const NO_FINDING: &str = "no finding";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation file lacks required column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("JSON annotations must be an array of objects")]
    NotAnArray,
    #[error("box weight {0} must be finite and positive")]
    InvalidWeight(f64),
    #[error("IoU threshold {0} must be finite")]
    InvalidThreshold(f64),
    #[error("image {image_id} has conflicting dimensions {a:?} and {b:?}")]
    InconsistentDims {
        image_id: String,
        a: ImageDims,
        b: ImageDims,
    },
    #[error("image {image_id}, class {class_name} has records in splits {a} and {b}")]
    InconsistentSplit {
        image_id: String,
        class_name: String,
        a: SplitName,
        b: SplitName,
    },
    #[error("image ids appear in both train and test: {}", .0.join(", "))]
    SplitLeak(Vec<String>),
    #[error("classes missing from the class map: {}", .0.join(", "))]
    UnmappedClasses(Vec<String>),
    #[error("unknown split name {0:?}")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
    Zeroshot,
    Ood,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
            SplitName::Zeroshot => "zeroshot",
            SplitName::Ood => "ood",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(SplitName::Train),
            "test" | "testing" => Ok(SplitName::Test),
            "zeroshot" | "zero-shot" | "known" => Ok(SplitName::Zeroshot),
            "ood" | "unknown" => Ok(SplitName::Ood),
            _ => Err(DatasetError::UnknownSplit(s.to_string())),
        }
    }
}

/// Case- and spacing-insensitive key used wherever class names from
/// different sources are compared.
pub fn class_key(name: &str) -> String {
    let lowered = name.trim().to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.replace(" /", "/").replace("/ ", "/")
}

/// One rater's box for one finding on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub class_name: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_id: Option<String>,
    pub dims: ImageDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Csv,
    Json,
}

impl FromStr for AnnotationFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(AnnotationFormat::Csv),
            "json" => Ok(AnnotationFormat::Json),
            other => Err(format!("unknown annotation format {other:?} (expected csv or json)")),
        }
    }
}

/// A rejected input row. `line` is the 1-based file line for CSV and the
/// 1-based array position for JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub records: Vec<AnnotationRecord>,
    pub row_errors: Vec<RowError>,
    /// Rows labelled "No finding" without coordinates.
    pub skipped_no_finding: usize,
}

/// Field values of one input row before validation.
#[derive(Default)]
struct RawRow {
    image_id: Option<String>,
    class_name: Option<String>,
    x_min: Option<String>,
    y_min: Option<String>,
    x_max: Option<String>,
    y_max: Option<String>,
    width: Option<String>,
    height: Option<String>,
    rater_id: Option<String>,
    split: Option<String>,
}

impl RawRow {
    fn set(&mut self, column: &str, value: Option<String>) {
        let value = value.map(|v| v.trim().to_string()).filter(|v| !v.is_empty());
        match column {
            "image_id" => self.image_id = value,
            "class_name" => self.class_name = value,
            "x_min" => self.x_min = value,
            "y_min" => self.y_min = value,
            "x_max" => self.x_max = value,
            "y_max" => self.y_max = value,
            "width" => self.width = value,
            "height" => self.height = value,
            "rater_id" | "rad_id" => self.rater_id = value,
            "split" => self.split = value,
            _ => {}
        }
    }

    fn is_no_finding(&self) -> bool {
        let class_is_none = self
            .class_name
            .as_deref()
            .is_some_and(|c| class_key(c) == NO_FINDING);
        class_is_none
            && self.x_min.is_none()
            && self.y_min.is_none()
            && self.x_max.is_none()
            && self.y_max.is_none()
    }

    fn validate(self) -> Result<AnnotationRecord, String> {
        fn required(v: Option<String>, name: &str) -> Result<String, String> {
            v.ok_or_else(|| format!("missing value for {name}"))
        }
        fn number(v: Option<String>, name: &str) -> Result<f64, String> {
            let raw = required(v, name)?;
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("{name} = {raw:?} is not a finite number"))
        }
        fn extent(v: Option<String>, name: &str) -> Result<u32, String> {
            let raw = required(v, name)?;
            let parsed = raw.parse::<u32>().ok().or_else(|| {
                raw.parse::<f64>()
                    .ok()
                    .filter(|x| x.fract() == 0.0 && *x >= 0.0 && *x <= f64::from(u32::MAX))
                    .map(|x| x as u32)
            });
            parsed.ok_or_else(|| format!("{name} = {raw:?} is not a pixel count"))
        }

        let image_id = required(self.image_id, "image_id")?;
        let class_name = required(self.class_name, "class_name")?;
        let x1 = number(self.x_min, "x_min")?;
        let y1 = number(self.y_min, "y_min")?;
        let x2 = number(self.x_max, "x_max")?;
        let y2 = number(self.y_max, "y_max")?;
        let dims = ImageDims::new(extent(self.width, "width")?, extent(self.height, "height")?)
            .map_err(|e| e.to_string())?;
        let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        if !bbox.fits(dims) {
            return Err(format!(
                "box ({x1}, {y1}, {x2}, {y2}) exceeds image {}x{}",
                dims.width, dims.height
            ));
        }
        let split = match self.split {
            Some(s) => Some(s.parse::<SplitName>().map_err(|e| e.to_string())?),
            None => None,
        };
        Ok(AnnotationRecord {
            image_id,
            class_name,
            bbox,
            rater_id: self.rater_id,
            dims,
            split,
        })
    }
}

fn collect_row(report: &mut LoadReport, line: u64, row: RawRow) {
    if row.is_no_finding() {
        report.skipped_no_finding += 1;
        return;
    }
    match row.validate() {
        Ok(record) => report.records.push(record),
        Err(message) => report.row_errors.push(RowError { line, message }),
    }
}

/// Reads the CSV form. Header problems are fatal; row problems are collected.
pub fn parse_annotations_csv<R: Read>(reader: R) -> Result<LoadReport, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingColumns(missing));
    }

    let mut report = LoadReport::default();
    for result in rdr.records() {
        let record = result?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < headers.len() {
            report.row_errors.push(RowError {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let mut row = RawRow::default();
        for (column, value) in headers.iter().zip(record.iter()) {
            row.set(column, Some(value.to_string()));
        }
        collect_row(&mut report, line, row);
    }
    Ok(report)
}

/// Reads the JSON array form.
pub fn parse_annotations_json(text: &str) -> Result<LoadReport, DatasetError> {
    let value: Value = serde_json::from_str(text)?;
    let Value::Array(items) = value else {
        return Err(DatasetError::NotAnArray);
    };
    let mut report = LoadReport::default();
    for (i, item) in items.into_iter().enumerate() {
        let line = i as u64 + 1;
        let Value::Object(map) = item else {
            report.row_errors.push(RowError {
                line,
                message: "entry is not an object".into(),
            });
            continue;
        };
        let mut row = RawRow::default();
        for (key, v) in map {
            let text = match v {
                Value::Null => None,
                Value::String(s) => Some(s),
                other => Some(other.to_string()),
            };
            row.set(&key.to_ascii_lowercase(), text);
        }
        collect_row(&mut report, line, row);
    }
    Ok(report)
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<LoadReport, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        AnnotationFormat::Csv => {
            let file = std::fs::File::open(path).map_err(io_err)?;
            parse_annotations_csv(file)
        }
        AnnotationFormat::Json => {
            let text = std::fs::read_to_string(path).map_err(io_err)?;
            parse_annotations_json(&text)
        }
    }
}

/// A fused box together with the total weight of the boxes merged into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedBox {
    pub bbox: BoundingBox,
    pub weight: f64,
}

struct Cluster {
    members: Vec<WeightedBox>,
    fused: WeightedBox,
}

impl Cluster {
    fn new(first: WeightedBox) -> Self {
        Self {
            members: vec![first],
            fused: first,
        }
    }

    fn absorb(&mut self, other: impl IntoIterator<Item = WeightedBox>) {
        self.members.extend(other);
        self.recompute();
    }

    fn recompute(&mut self) {
        if let [only] = self.members.as_slice() {
            self.fused = *only;
            return;
        }
        let total: f64 = self.members.iter().map(|m| m.weight).sum();
        let mut out = [0.0; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let mean = self
                .members
                .iter()
                .map(|m| m.weight * m.bbox.coords()[k])
                .sum::<f64>()
                / total;
            let (lo, hi) = self.members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                let c = m.bbox.coords()[k];
                (lo.min(c), hi.max(c))
            });
            // rounding must not push the mean outside the member hull
            *slot = mean.clamp(lo, hi);
        }
        self.fused = WeightedBox {
            bbox: BoundingBox {
                x1: out[0],
                y1: out[1],
                x2: out[2],
                y2: out[3],
            },
            weight: total,
        };
    }
}

/// Heavier boxes first, ties broken by lexicographic coordinates.
fn canonical_order(a: &WeightedBox, b: &WeightedBox) -> Ordering {
    b.weight.total_cmp(&a.weight).then_with(|| {
        a.bbox
            .coords()
            .iter()
            .zip(b.bbox.coords().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Weighted box fusion returning fused weights, in canonical order.
///
/// Boxes are visited in canonical order and join the running cluster whose
/// fused box overlaps them most, provided that IoU reaches `iou_threshold`.
/// Clusters whose fused boxes still overlap at the threshold afterwards are
/// merged until no such pair remains, so every pair of outputs has IoU below
/// the threshold and re-fusing the output is a no-op.
pub fn fuse_weighted(boxes: &[WeightedBox], iou_threshold: f64) -> Result<Vec<WeightedBox>, DatasetError> {
    if !iou_threshold.is_finite() {
        return Err(DatasetError::InvalidThreshold(iou_threshold));
    }
    if let Some(bad) = boxes.iter().find(|b| !(b.weight.is_finite() && b.weight > 0.0)) {
        return Err(DatasetError::InvalidWeight(bad.weight));
    }
    let mut ordered = boxes.to_vec();
    ordered.sort_by(canonical_order);

    let mut clusters: Vec<Cluster> = Vec::new();
    for b in ordered {
        let best = clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i, iou(&b.bbox, &c.fused.bbox)))
            .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                Some((_, best)) if best >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((i, v)) if v >= iou_threshold => clusters[i].absorb([b]),
            _ => clusters.push(Cluster::new(b)),
        }
    }

    'consolidate: loop {
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                if iou(&clusters[i].fused.bbox, &clusters[j].fused.bbox) >= iou_threshold {
                    let absorbed = clusters.remove(j);
                    clusters[i].absorb(absorbed.members);
                    continue 'consolidate;
                }
            }
        }
        break;
    }

    let mut out: Vec<WeightedBox> = clusters.into_iter().map(|c| c.fused).collect();
    out.sort_by(canonical_order);
    Ok(out)
}

/// Fuses `(box, weight)` pairs belonging to one image and one class.
pub fn weighted_box_fusion(
    boxes: &[(BoundingBox, f64)],
    iou_threshold: f64,
) -> Result<Vec<BoundingBox>, DatasetError> {
    let weighted: Vec<WeightedBox> = boxes
        .iter()
        .map(|&(bbox, weight)| WeightedBox { bbox, weight })
        .collect();
    Ok(fuse_weighted(&weighted, iou_threshold)?
        .into_iter()
        .map(|w| w.bbox)
        .collect())
}

/// One image–abnormality pair with its consensus boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingInstance {
    pub image_id: String,
    pub class_name: String,
    pub fused_boxes: Vec<BoundingBox>,
    pub dims: ImageDims,
}

/// Split name to instances, serialized as `{split_name: [instance, ...]}`.
pub type SplitManifest = BTreeMap<SplitName, Vec<GroundingInstance>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub records: Vec<GroundingInstance>,
}

/// Groups records by `(image_id, class_name)` and fuses every group with
/// unit rater weights. Records without a split column land in `default_split`.
pub fn fuse_records(
    records: &[AnnotationRecord],
    iou_threshold: f64,
    default_split: SplitName,
) -> Result<SplitManifest, DatasetError> {
    let mut image_dims: BTreeMap<&str, ImageDims> = BTreeMap::new();
    let mut groups: BTreeMap<(&str, &str), (SplitName, Vec<WeightedBox>)> = BTreeMap::new();
    for r in records {
        let dims = *image_dims.entry(&r.image_id).or_insert(r.dims);
        if dims != r.dims {
            return Err(DatasetError::InconsistentDims {
                image_id: r.image_id.clone(),
                a: dims,
                b: r.dims,
            });
        }
        let split = r.split.unwrap_or(default_split);
        let entry = groups
            .entry((&r.image_id, &r.class_name))
            .or_insert_with(|| (split, Vec::new()));
        if entry.0 != split {
            return Err(DatasetError::InconsistentSplit {
                image_id: r.image_id.clone(),
                class_name: r.class_name.clone(),
                a: entry.0,
                b: split,
            });
        }
        entry.1.push(WeightedBox {
            bbox: r.bbox,
            weight: 1.0,
        });
    }

    let mut manifest = SplitManifest::new();
    for ((image_id, class_name), (split, boxes)) in groups {
        let fused = fuse_weighted(&boxes, iou_threshold)?;
        manifest.entry(split).or_default().push(GroundingInstance {
            image_id: image_id.to_string(),
            class_name: class_name.to_string(),
            fused_boxes: fused.into_iter().map(|w| w.bbox).collect(),
            dims: image_dims[image_id],
        });
    }
    check_no_leak(&manifest)?;
    Ok(manifest)
}

/// Rejects manifests where an image id appears in both train and test.
pub fn check_no_leak(manifest: &SplitManifest) -> Result<(), DatasetError> {
    let ids = |s: SplitName| -> BTreeSet<&str> {
        manifest
            .get(&s)
            .map(|v| v.iter().map(|i| i.image_id.as_str()).collect())
            .unwrap_or_default()
    };
    let train = ids(SplitName::Train);
    let leaked: Vec<String> = ids(SplitName::Test)
        .intersection(&train)
        .map(|s| s.to_string())
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::SplitLeak(leaked))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMapping {
    /// Semantically equivalent to the named training class.
    Known(String),
    Unknown,
}

/// Evaluation-dataset class name to training-class correspondence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub version: u32,
    pub entries: BTreeMap<String, ClassMapping>,
}

impl ClassMap {
    /// The shipped 24-class table: 6 known, 18 unknown.
    pub fn padchest_gr() -> Self {
        serde_json::from_str(include_str!("../assets/class_map_padchest.json"))
            .expect("shipped class map is valid JSON")
    }

    pub fn from_path(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn lookup(&self, class_name: &str) -> Option<&ClassMapping> {
        let key = class_key(class_name);
        self.entries
            .iter()
            .find(|(name, _)| class_key(name) == key)
            .map(|(_, m)| m)
    }

    pub fn known_count(&self) -> usize {
        self.entries
            .values()
            .filter(|m| matches!(m, ClassMapping::Known(_)))
            .count()
    }

    /// Keys of the training classes that known entries map onto.
    pub fn known_targets(&self) -> BTreeSet<String> {
        self.entries
            .values()
            .filter_map(|m| match m {
                ClassMapping::Known(t) => Some(class_key(t)),
                ClassMapping::Unknown => None,
            })
            .collect()
    }
}

/// Partitions instances into (known, unknown); known classes take their
/// training-class names.
pub fn apply_class_map(
    instances: &[GroundingInstance],
    map: &ClassMap,
) -> Result<(Vec<GroundingInstance>, Vec<GroundingInstance>), DatasetError> {
    let unmapped: BTreeSet<String> = instances
        .iter()
        .filter(|i| map.lookup(&i.class_name).is_none())
        .map(|i| i.class_name.clone())
        .collect();
    if !unmapped.is_empty() {
        return Err(DatasetError::UnmappedClasses(unmapped.into_iter().collect()));
    }
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for inst in instances {
        match map.lookup(&inst.class_name) {
            Some(ClassMapping::Known(target)) => known.push(GroundingInstance {
                class_name: target.clone(),
                ..inst.clone()
            }),
            _ => unknown.push(inst.clone()),
        }
    }
    Ok((known, unknown))
}

/// Instance count per class name.
pub fn class_distribution(instances: &[GroundingInstance]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for inst in instances {
        *hist.entry(inst.class_name.clone()).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    const HEADER: &str = "image_id,class_name,x_min,y_min,x_max,y_max,width,height,rater_id\n";

    #[test]
    fn csv_three_rows() {
        let csv = format!(
            "{HEADER}a,Nodule,1,2,30,40,100,100,R1\na,Nodule,2,2,31,41,100,100,R2\nb,Cardiomegaly,10,10,90,90,100,100,R1\n"
        );
        let report = parse_annotations_csv(csv.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 3);
        assert!(report.row_errors.is_empty());
        assert_eq!(report.records[0].rater_id.as_deref(), Some("R1"));
        assert_eq!(report.records[2].dims, ImageDims::new(100, 100).unwrap());
    }

    #[test]
    fn csv_bad_rows_are_reported_with_lines() {
        let csv = format!(
            "{HEADER}a,Nodule,30,2,1,40,100,100,R1\nb,Nodule,x,2,3,4,100,100,R1\nc,Nodule,1,2,300,4,100,100,R1\nd,Nodule,1,2\ne,Nodule,1,2,3,4,100,100,R1\n"
        );
        let report = parse_annotations_csv(csv.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].image_id, "e");
        let lines: Vec<u64> = report.row_errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3, 4, 5]);
        assert!(report.row_errors[0].message.contains("inverted"));
        assert!(report.row_errors[1].message.contains("x_min"));
        assert!(report.row_errors[2].message.contains("exceeds image"));
    }

    #[test]
    fn csv_missing_column_is_fatal() {
        let err = parse_annotations_csv("image_id,class_name,x_min\n".as_bytes()).unwrap_err();
        match err {
            DatasetError::MissingColumns(cols) => assert!(cols.contains(&"height".to_string())),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_accepts_rad_id_and_skips_no_finding() {
        let csv = "image_id,class_name,rad_id,x_min,y_min,x_max,y_max,width,height,split\n\
                   a,No finding,R1,,,,,100,100,train\n\
                   a,Nodule/Mass,R2,1,1,5,5,100,100,train\n";
        let report = parse_annotations_csv(csv.as_bytes()).unwrap();
        assert_eq!(report.skipped_no_finding, 1);
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].rater_id.as_deref(), Some("R2"));
        assert_eq!(report.records[0].split, Some(SplitName::Train));
    }

    #[test]
    fn json_form_matches_csv_form() {
        let json = r#"[
            {"image_id": "a", "class_name": "Nodule", "x_min": 1, "y_min": 2, "x_max": 30, "y_max": 40, "width": 100, "height": 100, "rater_id": "R1"},
            {"image_id": "b", "class_name": "Nodule", "x_min": 50, "y_min": 2, "x_max": 30, "y_max": 40, "width": 100, "height": 100},
            7
        ]"#;
        let report = parse_annotations_json(json).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.row_errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
        assert!(parse_annotations_json("{}").is_err());
        assert!(parse_annotations_json("[").is_err());
    }

    #[test]
    fn wbf_examples() {
        let single = weighted_box_fusion(&[(bb(1.0, 2.0, 3.0, 4.0), 1.0)], 0.4).unwrap();
        assert_eq!(single, vec![bb(1.0, 2.0, 3.0, 4.0)]);

        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(weighted_box_fusion(&[(a, 1.0), (a, 1.0)], 0.4).unwrap(), vec![a]);

        let fused = weighted_box_fusion(&[(a, 1.0), (bb(2.0, 2.0, 12.0, 12.0), 1.0)], 0.4).unwrap();
        assert_eq!(fused, vec![bb(1.0, 1.0, 11.0, 11.0)]);

        assert!(weighted_box_fusion(&[], 0.4).unwrap().is_empty());
        assert!(weighted_box_fusion(&[(a, 0.0)], 0.4).is_err());
    }

    #[test]
    fn wbf_keeps_distinct_lesions_apart() {
        let boxes = [
            (bb(0.0, 0.0, 10.0, 10.0), 1.0),
            (bb(50.0, 50.0, 60.0, 60.0), 1.0),
            (bb(1.0, 1.0, 11.0, 11.0), 1.0),
        ];
        let fused = weighted_box_fusion(&boxes, 0.4).unwrap();
        assert_eq!(fused.len(), 2);
    }

    #[test]
    fn wbf_weights_pull_the_mean() {
        let fused = fuse_weighted(
            &[
                WeightedBox { bbox: bb(0.0, 0.0, 10.0, 10.0), weight: 3.0 },
                WeightedBox { bbox: bb(4.0, 0.0, 14.0, 10.0), weight: 1.0 },
            ],
            0.4,
        )
        .unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].bbox, bb(1.0, 0.0, 11.0, 10.0));
        assert_eq!(fused[0].weight, 4.0);
    }

    fn rec(image: &str, class: &str, b: BoundingBox, split: Option<SplitName>) -> AnnotationRecord {
        AnnotationRecord {
            image_id: image.into(),
            class_name: class.into(),
            bbox: b,
            rater_id: None,
            dims: ImageDims::new(100, 100).unwrap(),
            split,
        }
    }

    #[test]
    fn fuse_records_groups_and_splits() {
        let records = vec![
            rec("a", "Nodule", bb(0.0, 0.0, 10.0, 10.0), Some(SplitName::Train)),
            rec("a", "Nodule", bb(2.0, 2.0, 12.0, 12.0), Some(SplitName::Train)),
            rec("a", "Cardiomegaly", bb(20.0, 20.0, 80.0, 70.0), Some(SplitName::Train)),
            rec("b", "Nodule", bb(5.0, 5.0, 9.0, 9.0), Some(SplitName::Test)),
        ];
        let manifest = fuse_records(&records, 0.4, SplitName::Test).unwrap();
        assert_eq!(manifest[&SplitName::Train].len(), 2);
        assert_eq!(manifest[&SplitName::Test].len(), 1);
        let nodule = manifest[&SplitName::Train]
            .iter()
            .find(|i| i.class_name == "Nodule")
            .unwrap();
        assert_eq!(nodule.fused_boxes, vec![bb(1.0, 1.0, 11.0, 11.0)]);
        let json = serde_json::to_string(&manifest).unwrap();
        assert!(json.starts_with(r#"{"train":["#));
    }

    #[test]
    fn fuse_records_rejects_leaks_and_conflicts() {
        let leak = vec![
            rec("a", "Nodule", bb(0.0, 0.0, 10.0, 10.0), Some(SplitName::Train)),
            rec("a", "Edema", bb(0.0, 0.0, 10.0, 10.0), Some(SplitName::Test)),
        ];
        assert!(matches!(fuse_records(&leak, 0.4, SplitName::Test), Err(DatasetError::SplitLeak(ids)) if ids == vec!["a"]));

        let mut other = rec("a", "Nodule", bb(0.0, 0.0, 10.0, 10.0), None);
        other.dims = ImageDims::new(200, 100).unwrap();
        let dims = vec![rec("a", "Nodule", bb(0.0, 0.0, 10.0, 10.0), None), other];
        assert!(matches!(fuse_records(&dims, 0.4, SplitName::Test), Err(DatasetError::InconsistentDims { .. })));
    }

    fn inst(class: &str) -> GroundingInstance {
        GroundingInstance {
            image_id: "x".into(),
            class_name: class.into(),
            fused_boxes: vec![bb(0.0, 0.0, 1.0, 1.0)],
            dims: ImageDims::new(10, 10).unwrap(),
        }
    }

    #[test]
    fn shipped_class_map_has_six_known() {
        let map = ClassMap::padchest_gr();
        assert_eq!(map.entries.len(), 24);
        assert_eq!(map.known_count(), 6);
        assert_eq!(map.lookup("nodule"), Some(&ClassMapping::Known("Nodule / Mass".into())));
        assert_eq!(map.lookup("Scoliosis"), Some(&ClassMapping::Unknown));
    }

    #[test]
    fn apply_class_map_partitions() {
        let map = ClassMap::padchest_gr();
        let input = vec![inst("cardiomegaly"), inst("scoliosis"), inst("Nodule"), inst("goiter")];
        let (known, unknown) = apply_class_map(&input, &map).unwrap();
        assert_eq!(known.len() + unknown.len(), input.len());
        assert_eq!(known[1].class_name, "Nodule / Mass");
        assert_eq!(unknown.len(), 2);

        let (k, u) = apply_class_map(&[], &map).unwrap();
        assert!(k.is_empty() && u.is_empty());

        match apply_class_map(&[inst("unicorn"), inst("Goiter")], &map) {
            Err(DatasetError::UnmappedClasses(names)) => assert_eq!(names, vec!["unicorn"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distribution_counts() {
        let hist = class_distribution(&[inst("a"), inst("a"), inst("a")]);
        assert_eq!(hist, BTreeMap::from([("a".to_string(), 3)]));
        let mixed = [inst("a"), inst("b"), inst("a")];
        assert_eq!(class_distribution(&mixed).values().sum::<usize>(), mixed.len());
    }

    #[test]
    fn class_key_normalizes() {
        assert_eq!(class_key("Nodule/Mass"), class_key("Nodule / Mass"));
        assert_eq!(class_key("  Lung   Opacity "), "lung opacity");
    }

    fn arb_cluster() -> impl Strategy<Value = Vec<(BoundingBox, f64)>> {
        let center = (100.0..900.0f64, 100.0..900.0f64, 20.0..200.0f64, 20.0..200.0f64);
        (center, prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64, -30.0..30.0f64, -30.0..30.0f64, 0.5..3.0f64), 1..6))
            .prop_map(|((cx, cy, w, h), jit)| {
                jit.into_iter()
                    .map(|(a, b, c, d, wt)| {
                        let x1 = (cx - w / 2.0 + a).max(0.0);
                        let y1 = (cy - h / 2.0 + b).max(0.0);
                        let x2 = (cx + w / 2.0 + c).max(x1);
                        let y2 = (cy + h / 2.0 + d).max(y1);
                        (bb(x1, y1, x2, y2), wt)
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn wbf_permutation_invariant(boxes in arb_cluster(), seed in any::<u64>()) {
            let mut shuffled = boxes.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(weighted_box_fusion(&boxes, 0.4).unwrap(), weighted_box_fusion(&shuffled, 0.4).unwrap());
        }

        #[test]
        fn wbf_output_overlaps_stay_below_threshold(boxes in arb_cluster(), thr in 0.05..0.95f64) {
            let fused = weighted_box_fusion(&boxes, thr).unwrap();
            prop_assert!(fused.len() <= boxes.len());
            for i in 0..fused.len() {
                for j in (i + 1)..fused.len() {
                    prop_assert!(iou(&fused[i], &fused[j]) < thr);
                }
            }
        }
    }
}
