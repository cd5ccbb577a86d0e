//! Detection metrics: one-to-one box matching, interpolated average
//! precision and the mAP family, the three-component RoDeO score, and the
//! evaluation report.
//!
//! Predictions carry no model confidence, so every score is 1.0 and ties are
//! broken by emission rank; the precision/recall curve is the cumulative
//! curve in that order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{class_key, ClassMap, ClassMapping, GroundingInstance};
use crate::geometry::{iou, BoundingBox, ImageDims};
use crate::outparse::PixelPrediction;

/// Largest side for which matching enumerates every assignment.
pub const EXHAUSTIVE_LIMIT: usize = 8;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no class has ground-truth boxes")]
    NoGroundTruth,
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
}

/// One grounding query: the boxes of `class_name` in one image and what the
/// model returned for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingCase {
    pub image_id: String,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ImageDims>,
    pub gt: Vec<BoundingBox>,
    pub preds: Vec<PixelPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.iou).sum()
    }
}

fn iou_matrix(preds: &[PixelPrediction], gt: &[BoundingBox]) -> Vec<Vec<f64>> {
    preds.iter().map(|p| gt.iter().map(|g| iou(&p.bbox, g)).collect()).collect()
}

/// Prediction indices sorted by (rank, index).
fn rank_order(preds: &[PixelPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by_key(|&i| (preds[i].rank, i));
    order
}

struct Search<'a> {
    m: &'a [Vec<f64>],
    order: &'a [usize],
    used: Vec<bool>,
    current: Vec<Option<usize>>,
    best: Vec<Option<usize>>,
    best_total: f64,
}

impl Search<'_> {
    fn run(&mut self, depth: usize, total: f64) {
        if depth == self.order.len() {
            if total > self.best_total + TIE_EPS {
                self.best_total = total;
                self.best.clone_from(&self.current);
            }
            return;
        }
        let p = self.order[depth];
        for g in 0..self.used.len() {
            if !self.used[g] && self.m[p][g] > 0.0 {
                self.used[g] = true;
                self.current[depth] = Some(g);
                self.run(depth + 1, total + self.m[p][g]);
                self.used[g] = false;
            }
        }
        self.current[depth] = None;
        self.run(depth + 1, total);
    }
}

/// Enumerates assignments with predictions in rank order, each trying gts
/// by ascending index before staying unmatched; the first optimum wins.
fn exhaustive(m: &[Vec<f64>], order: &[usize], n_gt: usize) -> Vec<(usize, usize)> {
    let mut s = Search {
        m,
        order,
        used: vec![false; n_gt],
        current: vec![None; order.len()],
        best: vec![None; order.len()],
        best_total: 0.0,
    };
    s.run(0, 0.0);
    s.best
        .iter()
        .enumerate()
        .filter_map(|(d, g)| g.map(|g| (order[d], g)))
        .collect()
}

/// Minimum-cost assignment of every row of an `n x m` matrix (`n <= m`).
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn optimal_pairs(m: &[Vec<f64>], order: &[usize], n_gt: usize) -> Vec<(usize, usize)> {
    let n_pred = order.len();
    if n_pred == 0 || n_gt == 0 {
        return Vec::new();
    }
    if n_pred <= EXHAUSTIVE_LIMIT && n_gt <= EXHAUSTIVE_LIMIT {
        return exhaustive(m, order, n_gt);
    }
    // rows are the smaller side; cost is negative IoU
    if n_pred <= n_gt {
        let cost: Vec<Vec<f64>> = order.iter().map(|&p| m[p].iter().map(|v| -v).collect()).collect();
        hungarian(&cost)
            .into_iter()
            .enumerate()
            .map(|(r, g)| (order[r], g))
            .filter(|&(p, g)| m[p][g] > 0.0)
            .collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..n_gt).map(|g| order.iter().map(|&p| -m[p][g]).collect()).collect();
        hungarian(&cost)
            .into_iter()
            .enumerate()
            .map(|(g, c)| (order[c], g))
            .filter(|&(p, g)| m[p][g] > 0.0)
            .collect()
    }
}

/// Optimal one-to-one assignment maximizing total IoU over overlapping
/// pairs. Pairs come back sorted by prediction index.
pub fn match_boxes(gt: &[BoundingBox], preds: &[PixelPrediction]) -> MatchResult {
    let m = iou_matrix(preds, gt);
    let order = rank_order(preds);
    let mut pairs: Vec<MatchPair> = optimal_pairs(&m, &order, gt.len())
        .into_iter()
        .map(|(p, g)| MatchPair { pred: p, gt: g, iou: m[p][g] })
        .collect();
    pairs.sort_by_key(|p| p.pred);
    let matched_p: BTreeSet<usize> = pairs.iter().map(|p| p.pred).collect();
    let matched_g: BTreeSet<usize> = pairs.iter().map(|p| p.gt).collect();
    MatchResult {
        unmatched_preds: (0..preds.len()).filter(|i| !matched_p.contains(i)).collect(),
        unmatched_gts: (0..gt.len()).filter(|i| !matched_g.contains(i)).collect(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Mean of interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Point101,
    /// Area under the monotone precision envelope at every recall change.
    AllPoints,
}

impl std::str::FromStr for ApInterpolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "101" | "101-point" | "point101" | "coco" => Ok(ApInterpolation::Point101),
            "all" | "all-points" | "allpoints" | "voc" => Ok(ApInterpolation::AllPoints),
            other => Err(format!("unknown AP interpolation {other:?} (expected 101-point or all-points)")),
        }
    }
}

/// True/false-positive flags in pooled score order, plus the gt count.
pub fn pooled_outcomes(cases: &[&GroundingCase], threshold: f64) -> (Vec<bool>, usize) {
    let mut pooled: Vec<(usize, usize)> = Vec::new();
    for (c, case) in cases.iter().enumerate() {
        pooled.extend((0..case.preds.len()).map(|p| (c, p)));
    }
    pooled.sort_by(|&(ca, pa), &(cb, pb)| {
        let (a, b) = (&cases[ca].preds[pa], &cases[cb].preds[pb]);
        b.score
            .total_cmp(&a.score)
            .then(a.rank.cmp(&b.rank))
            .then_with(|| cases[ca].image_id.cmp(&cases[cb].image_id))
            .then((ca, pa).cmp(&(cb, pb)))
    });
    let mut consumed: Vec<Vec<bool>> = cases.iter().map(|c| vec![false; c.gt.len()]).collect();
    let mut flags = Vec::with_capacity(pooled.len());
    for (c, p) in pooled {
        let pred = &cases[c].preds[p].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in cases[c].gt.iter().enumerate() {
            if consumed[c][g] {
                continue;
            }
            let v = iou(pred, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            consumed[c][g] = true;
        }
        flags.push(best.is_some());
    }
    (flags, cases.iter().map(|c| c.gt.len()).sum())
}

/// AP in percent from TP flags in ranked order; `None` without gt.
pub fn ap_from_outcomes(flags: &[bool], n_gt: usize, interp: ApInterpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    // envelope[k] = max precision at any position >= k
    let mut envelope = vec![0.0; curve.len()];
    let mut running: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        running = running.max(curve[k].1);
        envelope[k] = running;
    }
    let ap = match interp {
        ApInterpolation::Point101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for r in 0..=100usize {
                // first position whose recall tp/n_gt reaches r/100
                while k < curve.len() && 100 * curve[k].0 < r * n_gt {
                    k += 1;
                }
                if k < curve.len() {
                    sum += envelope[k];
                }
            }
            sum / 101.0
        }
        ApInterpolation::AllPoints => {
            let mut sum = 0.0;
            let mut prev_tp = 0;
            for (k, &(t, _)) in curve.iter().enumerate() {
                if t > prev_tp {
                    sum += (t - prev_tp) as f64 / n_gt as f64 * envelope[k];
                    prev_tp = t;
                }
            }
            sum
        }
    };
    Some(100.0 * ap)
}

/// AP of the pooled cases of one class at `threshold`; `None` without gt.
pub fn average_precision(cases: &[&GroundingCase], threshold: f64, interp: ApInterpolation) -> Option<f64> {
    let (flags, n_gt) = pooled_outcomes(cases, threshold);
    ap_from_outcomes(&flags, n_gt, interp)
}

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApFamily {
    pub ap30: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    /// Additional thresholds, keyed like `"0.60"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

fn ap_family(cases: &[&GroundingCase], config: &EvalConfig) -> Option<ApFamily> {
    let ap = |t: f64| average_precision(cases, t, config.interpolation);
    let ap50 = ap(0.5)?;
    let coco: Vec<f64> = coco_thresholds().into_iter().map(|t| ap(t).unwrap_or(0.0)).collect();
    Some(ApFamily {
        ap30: ap(0.3)?,
        ap50,
        ap75: ap(0.75)?,
        ap50_95: coco.iter().sum::<f64>() / coco.len() as f64,
        extra: config
            .extra_thresholds
            .iter()
            .map(|&t| (threshold_key(t), ap(t).unwrap_or(0.0)))
            .collect(),
    })
}

fn mean_family(items: &[&ApFamily]) -> ApFamily {
    let n = items.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ApFamily) -> f64| items.iter().map(|a| f(a)).sum::<f64>() / n;
    let mut extra = BTreeMap::new();
    if let Some(first) = items.first() {
        for key in first.extra.keys() {
            extra.insert(key.clone(), mean(&|a| a.extra.get(key).copied().unwrap_or(0.0)));
        }
    }
    ApFamily {
        ap30: mean(&|a| a.ap30),
        ap50: mean(&|a| a.ap50),
        ap75: mean(&|a| a.ap75),
        ap50_95: mean(&|a| a.ap50_95),
        extra,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub interpolation: ApInterpolation,
    pub extra_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interpolation: ApInterpolation::Point101,
            extra_thresholds: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        match self.extra_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            Some(&t) => Err(MetricsError::BadThreshold(t)),
            None => Ok(()),
        }
    }
}

fn by_class(cases: &[GroundingCase]) -> BTreeMap<String, Vec<&GroundingCase>> {
    let mut groups: BTreeMap<String, Vec<&GroundingCase>> = BTreeMap::new();
    for c in cases {
        groups.entry(c.class_name.clone()).or_default().push(c);
    }
    groups
}

/// Per-class AP families, their mean over classes with ground truth, and
/// the classes left out for having none.
pub type MapFamily = (BTreeMap<String, ApFamily>, ApFamily, Vec<String>);

pub fn map_family(
    cases: &[GroundingCase],
    config: &EvalConfig,
) -> Result<MapFamily, MetricsError> {
    config.validate()?;
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (class, group) in by_class(cases) {
        match ap_family(&group, config) {
            Some(f) => {
                per_class.insert(class, f);
            }
            None => excluded.push(class),
        }
    }
    if per_class.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let aggregate = mean_family(&per_class.values().collect::<Vec<_>>());
    Ok((per_class, aggregate, excluded))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rodeo {
    pub r_loc: f64,
    pub r_shape: f64,
    pub r_cls: f64,
    pub r_total: f64,
}

/// Scores of one matched pair, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
    pub loc: f64,
    pub shape: f64,
    pub cls: f64,
}

pub fn loc_score(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dist = (px - gx).hypot(py - gy);
    let diag = gt.diagonal();
    if diag == 0.0 {
        return if dist == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - dist / diag).max(0.0)
}

/// IoU after moving `pred` so that the two centers coincide.
pub fn shape_score(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    iou(&pred.translated(gx - px, gy - py), gt)
}

pub fn cls_score(label: &str, class_name: &str) -> f64 {
    if class_key(label) == class_key(class_name) {
        1.0
    } else {
        0.0
    }
}

/// Pair scores for the optimal matching of one case.
pub fn score_pairs(case: &GroundingCase, matching: &MatchResult) -> Vec<PairScore> {
    matching
        .pairs
        .iter()
        .map(|m| {
            let p = &case.preds[m.pred];
            let g = &case.gt[m.gt];
            PairScore {
                pred: m.pred,
                gt: m.gt,
                iou: m.iou,
                loc: loc_score(&p.bbox, g),
                shape: shape_score(&p.bbox, g),
                cls: cls_score(&p.label, &case.class_name),
            }
        })
        .collect()
}

/// Harmonic mean of the three components; 0 if any is 0.
pub fn harmonic_total(loc: f64, shape: f64, cls: f64) -> f64 {
    if loc <= 0.0 || shape <= 0.0 || cls <= 0.0 {
        0.0
    } else {
        3.0 / (1.0 / loc + 1.0 / shape + 1.0 / cls)
    }
}

/// Aggregates pair-score sums over a set of `n_preds + n_gts` boxes.
pub fn rodeo_from_sums(sum_loc: f64, sum_shape: f64, sum_cls: f64, n_preds: usize, n_gts: usize) -> Rodeo {
    let denom = (n_preds + n_gts) as f64;
    if denom == 0.0 {
        return Rodeo::default();
    }
    let component = |s: f64| 100.0 * 2.0 * s / denom;
    let (r_loc, r_shape, r_cls) = (component(sum_loc), component(sum_shape), component(sum_cls));
    Rodeo {
        r_loc,
        r_shape,
        r_cls,
        r_total: harmonic_total(r_loc, r_shape, r_cls),
    }
}

#[derive(Default)]
struct RodeoAcc {
    loc: f64,
    shape: f64,
    cls: f64,
    preds: usize,
    gts: usize,
}

impl RodeoAcc {
    fn add(&mut self, case: &GroundingCase, pairs: &[PairScore]) {
        for p in pairs {
            self.loc += p.loc;
            self.shape += p.shape;
            self.cls += p.cls;
        }
        self.preds += case.preds.len();
        self.gts += case.gt.len();
    }

    fn finish(&self) -> Rodeo {
        rodeo_from_sums(self.loc, self.shape, self.cls, self.preds, self.gts)
    }
}

/// RoDeO over a whole set of cases.
pub fn rodeo(cases: &[GroundingCase]) -> Rodeo {
    let mut acc = RodeoAcc::default();
    for case in cases {
        acc.add(case, &score_pairs(case, &match_boxes(&case.gt, &case.preds)));
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Class,
    KnownVsUnknown,
}

impl std::str::FromStr for GroupBy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "class" => Ok(GroupBy::Class),
            "known_vs_unknown" | "known_unknown" => Ok(GroupBy::KnownVsUnknown),
            other => Err(format!("unknown grouping {other:?} (expected class or known_vs_unknown)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub cases: usize,
    pub gt_boxes: usize,
    pub predictions: usize,
    #[serde(flatten)]
    pub ap: ApFamily,
    pub rodeo: Rodeo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map30: f64,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    pub classes: usize,
}

impl Aggregate {
    fn from_family(f: ApFamily, classes: usize) -> Self {
        Self {
            map30: f.ap30,
            map50: f.ap50,
            map75: f.ap75,
            map50_95: f.ap50_95,
            extra: f.extra,
            classes,
        }
    }

    fn zero(classes: usize) -> Self {
        Self::from_family(ApFamily::default(), classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub classes: Vec<String>,
    pub aggregate: Aggregate,
    pub rodeo: Rodeo,
}

/// Everything needed to recompute a case's contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDiagnostic {
    pub case_id: usize,
    pub image_id: String,
    pub class_name: String,
    pub gt_boxes: usize,
    pub predictions: usize,
    /// `iou[pred][gt]`.
    pub iou: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
    pub pairs: Vec<PairScore>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Classes with predictions but no ground truth; excluded from mAP.
    pub excluded_classes: Vec<String>,
    pub warnings: Vec<String>,
    pub cases: Vec<CaseDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ap_interpolation: ApInterpolation,
    pub iou_thresholds: Vec<f64>,
    pub group_by: GroupBy,
    pub matching: String,
    pub score_convention: String,
    pub rodeo_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassReport>,
    pub aggregate: Aggregate,
    pub rodeo: Rodeo,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupReport>,
    pub diagnostics: Diagnostics,
    pub metadata: ReportMetadata,
}

fn group_name(class: &str, map: Option<&ClassMap>) -> &'static str {
    let Some(map) = map else { return "unmapped" };
    match map.lookup(class) {
        Some(ClassMapping::Known(_)) => "known",
        Some(ClassMapping::Unknown) => "unknown",
        None if map.known_targets().contains(&class_key(class)) => "known",
        None => "unmapped",
    }
}

/// Evaluates `cases` and assembles the report. Known/unknown grouping uses
/// `class_map`; classes it cannot place land in an `unmapped` group.
pub fn build_report(
    cases: &[GroundingCase],
    group_by: GroupBy,
    class_map: Option<&ClassMap>,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    config.validate()?;
    let mut diagnostics = Diagnostics::default();
    let mut class_acc: BTreeMap<String, RodeoAcc> = BTreeMap::new();
    let mut total = RodeoAcc::default();
    for (case_id, case) in cases.iter().enumerate() {
        let matching = match_boxes(&case.gt, &case.preds);
        let pairs = score_pairs(case, &matching);
        total.add(case, &pairs);
        class_acc.entry(case.class_name.clone()).or_default().add(case, &pairs);
        diagnostics.cases.push(CaseDiagnostic {
            case_id,
            image_id: case.image_id.clone(),
            class_name: case.class_name.clone(),
            gt_boxes: case.gt.len(),
            predictions: case.preds.len(),
            iou: iou_matrix(&case.preds, &case.gt),
            scores: case.preds.iter().map(|p| p.score).collect(),
            ranks: case.preds.iter().map(|p| p.rank).collect(),
            pairs,
        });
    }

    let (families, aggregate) = match map_family(cases, config) {
        Ok((per_class, aggregate, excluded)) => {
            diagnostics.excluded_classes = excluded;
            let n = per_class.len();
            (per_class, Aggregate::from_family(aggregate, n))
        }
        Err(MetricsError::NoGroundTruth) => {
            diagnostics.warnings.push("no ground-truth boxes: all mAP values are 0".into());
            diagnostics.excluded_classes = by_class(cases).into_keys().collect();
            (BTreeMap::new(), Aggregate::zero(0))
        }
        Err(e) => return Err(e),
    };
    if cases.iter().all(|c| c.preds.is_empty()) {
        diagnostics
            .warnings
            .push("no predictions were parsed: every metric is 0".into());
    }

    let grouped = by_class(cases);
    let per_class: BTreeMap<String, ClassReport> = families
        .iter()
        .map(|(class, fam)| {
            let group = &grouped[class];
            (
                class.clone(),
                ClassReport {
                    cases: group.len(),
                    gt_boxes: group.iter().map(|c| c.gt.len()).sum(),
                    predictions: group.iter().map(|c| c.preds.len()).sum(),
                    ap: fam.clone(),
                    rodeo: class_acc[class].finish(),
                },
            )
        })
        .collect();

    let mut groups = Vec::new();
    if group_by == GroupBy::KnownVsUnknown {
        let mut members: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for class in grouped.keys() {
            members.entry(group_name(class, class_map)).or_default().push(class.clone());
        }
        for (name, classes) in members {
            let fams: Vec<&ApFamily> = classes.iter().filter_map(|c| families.get(c)).collect();
            let aggregate = if fams.is_empty() {
                Aggregate::zero(0)
            } else {
                Aggregate::from_family(mean_family(&fams), fams.len())
            };
            let mut acc = RodeoAcc::default();
            for c in &classes {
                let a = &class_acc[c];
                acc.loc += a.loc;
                acc.shape += a.shape;
                acc.cls += a.cls;
                acc.preds += a.preds;
                acc.gts += a.gts;
            }
            groups.push(GroupReport {
                name: name.to_string(),
                classes,
                aggregate,
                rodeo: acc.finish(),
            });
        }
    }

    let mut thresholds = vec![0.3, 0.5, 0.75];
    thresholds.extend(coco_thresholds());
    thresholds.extend(config.extra_thresholds.iter().copied());
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    Ok(EvalReport {
        per_class,
        aggregate,
        rodeo: total.finish(),
        groups,
        diagnostics,
        metadata: ReportMetadata {
            ap_interpolation: config.interpolation,
            iou_thresholds: thresholds,
            group_by,
            matching: format!("optimal total-IoU assignment (exhaustive up to {EXHAUSTIVE_LIMIT}x{EXHAUSTIVE_LIMIT}, Hungarian above)"),
            score_convention: "score 1.0 for every prediction; ranked by emission order".into(),
            rodeo_convention: "per-pair loc/shape/cls scores, 200*sum/(preds+gts) per component, harmonic-mean total; unmatched boxes count in the denominator".into(),
        },
    })
}

fn row(out: &mut String, name: &str, n: &str, ap: [f64; 4], r: &Rodeo, width: usize) {
    let _ = writeln!(
        out,
        "{name:<width$}  {n:>6}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
        ap[0], ap[1], ap[2], ap[3], r.r_loc, r.r_shape, r.r_cls, r.r_total
    );
}

impl EvalReport {
    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let width = self
            .per_class
            .keys()
            .map(|k| k.chars().count())
            .chain(self.groups.iter().map(|g| g.name.len() + 6))
            .chain(["Class".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let header = format!(
            "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            "Class", "Cases", "AP30", "AP50", "AP75", "AP50:95", "R_loc", "R_shape", "R_cls", "R_total"
        );
        let rule = "-".repeat(header.len());
        let _ = writeln!(out, "{header}\n{rule}");
        for (class, r) in &self.per_class {
            row(&mut out, class, &r.cases.to_string(), [r.ap.ap30, r.ap.ap50, r.ap.ap75, r.ap.ap50_95], &r.rodeo, width);
        }
        let _ = writeln!(out, "{rule}");
        let a = &self.aggregate;
        row(&mut out, "mean", &a.classes.to_string(), [a.map30, a.map50, a.map75, a.map50_95], &self.rodeo, width);
        for g in &self.groups {
            let a = &g.aggregate;
            row(&mut out, &format!("group {}", g.name), &g.classes.len().to_string(), [a.map30, a.map50, a.map75, a.map50_95], &g.rodeo, width);
        }
        if !self.diagnostics.excluded_classes.is_empty() {
            let _ = writeln!(out, "\nexcluded (no ground truth): {}", self.diagnostics.excluded_classes.join(", "));
        }
        for w in &self.diagnostics.warnings {
            let _ = writeln!(out, "WARNING: {w}");
        }
        out
    }
}

/// Joins ground-truth instances with predictions keyed by (image id, class
/// key). Predictions without a matching instance become cases without gt.
pub fn assemble_cases(
    instances: &[GroundingInstance],
    mut predictions: BTreeMap<(String, String), Vec<PixelPrediction>>,
) -> Vec<GroundingCase> {
    let mut cases: Vec<GroundingCase> = instances
        .iter()
        .map(|inst| GroundingCase {
            image_id: inst.image_id.clone(),
            class_name: inst.class_name.clone(),
            dims: Some(inst.dims),
            gt: inst.fused_boxes.clone(),
            preds: predictions
                .remove(&(inst.image_id.clone(), class_key(&inst.class_name)))
                .unwrap_or_default(),
        })
        .collect();
    for ((image_id, class), preds) in predictions {
        cases.push(GroundingCase {
            image_id,
            class_name: class,
            dims: None,
            gt: Vec::new(),
            preds,
        });
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(c: [f64; 4]) -> BoundingBox {
        BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
    }

    fn pred(label: &str, c: [f64; 4], rank: usize) -> PixelPrediction {
        PixelPrediction { label: label.into(), bbox: b(c), score: 1.0, rank }
    }

    fn case(class: &str, gt: &[[f64; 4]], preds: &[[f64; 4]]) -> GroundingCase {
        GroundingCase {
            image_id: "img".into(),
            class_name: class.into(),
            dims: None,
            gt: gt.iter().copied().map(b).collect(),
            preds: preds.iter().enumerate().map(|(i, c)| pred(class, *c, i)).collect(),
        }
    }

    #[test]
    fn match_trivial() {
        let c = case("a", &[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]);
        let m = match_boxes(&c.gt, &c.preds);
        assert_eq!(m.pairs, vec![MatchPair { pred: 0, gt: 0, iou: 1.0 }]);
        let c = case("a", &[[0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]], &[]);
        assert_eq!(match_boxes(&c.gt, &c.preds).unmatched_gts, vec![0, 1]);
    }

    #[test]
    fn match_prefers_total_over_greedy() {
        // rank-greedy would pair p0 with g0 and leave p1 the weak overlap with g1
        let gt = [[0.0, 0.0, 10.0, 10.0], [8.0, 0.0, 18.0, 10.0]];
        let preds = [[2.0, 0.0, 12.0, 10.0], [0.0, 0.0, 9.0, 10.0]];
        let c = case("a", &gt, &preds);
        let m = match_boxes(&c.gt, &c.preds);
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.pred, p.gt)).collect();
        assert_eq!(got, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn hungarian_agrees_with_exhaustive_on_small_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut rb = || {
                let x = rng.random_range(0.0..50.0);
                let y = rng.random_range(0.0..50.0);
                [x, y, x + rng.random_range(1.0..30.0), y + rng.random_range(1.0..30.0)]
            };
            let gt: Vec<BoundingBox> = (0..6).map(|_| b(rb())).collect();
            let preds: Vec<PixelPrediction> = (0..7).map(|i| pred("a", rb(), i)).collect();
            let m = iou_matrix(&preds, &gt);
            let order = rank_order(&preds);
            let total = |pairs: &[(usize, usize)]| pairs.iter().map(|&(p, g)| m[p][g]).sum::<f64>();
            let ex = exhaustive(&m, &order, gt.len());
            let cost: Vec<Vec<f64>> = (0..gt.len()).map(|g| (0..preds.len()).map(|p| -m[p][g]).collect()).collect();
            let hu: Vec<(usize, usize)> = hungarian(&cost).into_iter().enumerate().map(|(g, p)| (p, g)).collect();
            assert!((total(&ex) - total(&hu)).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_examples() {
        let g = [0.0, 0.0, 10.0, 10.0];
        // IoU = 60/100
        let c = case("a", &[g], &[[0.0, 0.0, 6.0, 10.0]]);
        let refs = [&c];
        assert_eq!(average_precision(&refs, 0.5, ApInterpolation::Point101), Some(100.0));
        assert_eq!(average_precision(&refs, 0.75, ApInterpolation::Point101), Some(0.0));
        let empty = case("a", &[], &[g]);
        assert_eq!(average_precision(&[&empty], 0.5, ApInterpolation::Point101), None);
    }

    #[test]
    fn ap_hand_curve() {
        // FP then TP with two gts: P = (0, 1/2), R = (0, 1/2)
        let flags = [false, true];
        let ap = ap_from_outcomes(&flags, 2, ApInterpolation::Point101).unwrap();
        assert!((ap - 100.0 * 51.0 * 0.5 / 101.0).abs() < 1e-9);
        let ap = ap_from_outcomes(&flags, 2, ApInterpolation::AllPoints).unwrap();
        assert!((ap - 25.0).abs() < 1e-9);
    }

    #[test]
    fn map_means_over_classes() {
        let cases = vec![
            case("a", &[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]),
            case("b", &[[0.0, 0.0, 10.0, 10.0]], &[[50.0, 50.0, 60.0, 60.0]]),
            case("c", &[], &[[0.0, 0.0, 1.0, 1.0]]),
        ];
        let (per, agg, excluded) = map_family(&cases, &EvalConfig::default()).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(agg.ap50, 50.0);
        assert_eq!(excluded, vec!["c"]);
        assert_eq!(map_family(&cases[2..], &EvalConfig::default()), Err(MetricsError::NoGroundTruth));
    }

    #[test]
    fn rodeo_examples() {
        let perfect = vec![case("a", &[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]])];
        let r = rodeo(&perfect);
        assert_eq!((r.r_loc, r.r_shape, r.r_cls, r.r_total), (100.0, 100.0, 100.0, 100.0));
        let empty = vec![case("a", &[[0.0, 0.0, 10.0, 10.0]], &[])];
        assert_eq!(rodeo(&empty), Rodeo::default());
        // 6-8-10 box shifted by half its diagonal along the diagonal direction
        let mixed = vec![case("a", &[[0.0, 0.0, 6.0, 8.0]], &[[3.0, 4.0, 9.0, 12.0]])];
        let r = rodeo(&mixed);
        assert_eq!((r.r_loc, r.r_shape, r.r_cls), (50.0, 100.0, 100.0));
        assert!((r.r_total - 75.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_label_hits_cls_only() {
        let mut c = case("Nodule", &[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]);
        c.preds[0].label = "nodule".into();
        assert_eq!(rodeo(std::slice::from_ref(&c)).r_cls, 100.0);
        c.preds[0].label = "Mass".into();
        let r = rodeo(&[c]);
        assert_eq!((r.r_loc, r.r_cls, r.r_total), (100.0, 0.0, 0.0));
    }

    #[test]
    fn report_groups_and_text() {
        let cases = vec![
            case("Cardiomegaly", &[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]),
            case("Scoliosis", &[[0.0, 0.0, 10.0, 10.0]], &[]),
        ];
        let map = ClassMap::padchest_gr();
        let r = build_report(&cases, GroupBy::KnownVsUnknown, Some(&map), &EvalConfig::default()).unwrap();
        let names: Vec<&str> = r.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, vec!["known", "unknown"]);
        assert_eq!(r.groups[0].aggregate.map50, 100.0);
        assert_eq!(r.groups[1].aggregate.map50, 0.0);
        let text = r.to_text();
        assert!(text.contains("group known") && text.contains("Cardiomegaly"));
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_without_predictions_warns() {
        let cases = vec![case("a", &[[0.0, 0.0, 10.0, 10.0]], &[])];
        let r = build_report(&cases, GroupBy::Class, None, &EvalConfig::default()).unwrap();
        assert_eq!(r.aggregate.map50, 0.0);
        assert!(r.diagnostics.warnings.iter().any(|w| w.contains("no predictions")));
    }
}
