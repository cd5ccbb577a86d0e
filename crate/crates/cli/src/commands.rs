use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use attrground_core::dataset::{
    apply_class_map, class_key, fuse_records, load_annotations, AnnotationFormat, AnnotationRecord, ClassMap,
    DatasetError, GroundingInstance, LoadReport, SplitManifest, SplitName,
};
use attrground_core::geometry::ImageDims;
use attrground_core::knowledge::{
    auto_select, export_prompt_dictionary, generate_all, DefinitionStore, EndpointConfig, GenerationParams,
    HttpClient, KnowledgeError, KnowledgeStore, LlmClient, PromptDictionary, RecordingClient, ReplayClient,
    Selector, SyntheticClient, Transcript,
};
use attrground_core::metrics::{assemble_cases, build_report, EvalConfig, GroupBy, MetricsError};
use attrground_core::outparse::{normalize_predictions, ParsedRecord, PixelPrediction, RawPredictionRecord};
use attrground_core::promptgen::{build_eval_set, Lexicons, PromptError, TrainingPair, WireFormat};
use attrground_core::runs::{RunError, RunStore};
use attrground_core::stub::stub_predict;
use attrground_service::ServiceConfig;

use crate::{
    BuildPairsArgs, CliError, DecomposeArgs, EvaluateArgs, ExportDictArgs, FormatChoice, FuseArgs, IngestArgs,
    ParseArgs, ReportArgs, SelectArgs, ServeArgs, StubPredictArgs,
};

type CliResult = Result<(), CliError>;

pub(crate) fn write_err(e: std::io::Error) -> CliError {
    CliError::Usage(format!("cannot write output: {e}"))
}

fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } | DatasetError::InvalidThreshold(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn knowledge_err(e: KnowledgeError) -> CliError {
    match e {
        KnowledgeError::Io { .. } | KnowledgeError::InvalidParams(_) => CliError::Usage(e.to_string()),
        KnowledgeError::Llm { .. } | KnowledgeError::NoUsableCandidates { .. } => CliError::Endpoint(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn prompt_err(e: PromptError) -> CliError {
    match e {
        PromptError::MaskWithoutKnowledge | PromptError::UnknownAttribute(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn metrics_err(e: MetricsError) -> CliError {
    match e {
        MetricsError::BadThreshold(_) => CliError::Usage(e.to_string()),
        MetricsError::NoGroundTruth => CliError::Data(e.to_string()),
    }
}

fn run_err(e: RunError) -> CliError {
    match e {
        RunError::Json { .. } => CliError::Data(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(write_err),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(write_err)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult {
    create_parent(path)?;
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("output serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(write_err)
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    require_file(path, what)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = read_text(path, what)?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses one JSON document per non-blank line.
fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>, CliError> {
    let text = read_text(path, what)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn out_line(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult {
    writeln!(out, "{line}").map_err(write_err)
}

/// Left-aligned columns separated by two spaces.
fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c + 1 == row.len() {
                line.push_str(cell);
            } else {
                let _ = write!(line, "{cell:<w$}  ", w = widths[c]);
            }
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }
    text
}

fn annotation_format(path: &Path, explicit: Option<AnnotationFormat>) -> AnnotationFormat {
    explicit.unwrap_or_else(|| {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            AnnotationFormat::Json
        } else {
            AnnotationFormat::Csv
        }
    })
}

fn load_checked(path: &Path, format: Option<AnnotationFormat>) -> Result<LoadReport, CliError> {
    require_file(path, "annotation file")?;
    let report = load_annotations(path, annotation_format(path, format)).map_err(dataset_err)?;
    for e in &report.row_errors {
        log::warn!("{}:{}: {}", path.display(), e.line, e.message);
    }
    if report.records.is_empty() && !report.row_errors.is_empty() {
        return Err(CliError::Data(format!(
            "{}: none of {} rows are valid",
            path.display(),
            report.row_errors.len()
        )));
    }
    Ok(report)
}

/// Flat column form of one record, readable again by `fuse`.
#[derive(Serialize)]
struct FlatRecord<'a> {
    image_id: &'a str,
    class_name: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    rater_id: Option<&'a str>,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    width: u32,
    height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitName>,
}

impl<'a> From<&'a AnnotationRecord> for FlatRecord<'a> {
    fn from(r: &'a AnnotationRecord) -> Self {
        let [x_min, y_min, x_max, y_max] = r.bbox.coords();
        Self {
            image_id: &r.image_id,
            class_name: &r.class_name,
            rater_id: r.rater_id.as_deref(),
            x_min,
            y_min,
            x_max,
            y_max,
            width: r.dims.width,
            height: r.dims.height,
            split: r.split,
        }
    }
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> CliResult {
    let report = load_checked(&args.annotations, args.format)?;
    let flat: Vec<FlatRecord> = report.records.iter().map(FlatRecord::from).collect();
    write_json(&args.out, &flat)?;
    out_line(
        out,
        format!(
            "records {}  rejected {}  no-finding {}  -> {}",
            report.records.len(),
            report.row_errors.len(),
            report.skipped_no_finding,
            args.out.display()
        ),
    )
}

fn load_class_map(spec: &str) -> Result<ClassMap, CliError> {
    if spec.eq_ignore_ascii_case("padchest") {
        return Ok(ClassMap::padchest_gr());
    }
    let path = Path::new(spec);
    require_file(path, "class map")?;
    ClassMap::from_path(path).map_err(dataset_err)
}

pub fn cmd_fuse(args: &FuseArgs, out: &mut dyn Write) -> CliResult {
    let report = load_checked(&args.annotations, args.format)?;
    let mut manifest = fuse_records(&report.records, args.wbf_iou, args.default_split).map_err(dataset_err)?;
    if let Some(spec) = &args.class_map {
        let map = load_class_map(spec)?;
        let all: Vec<GroundingInstance> = manifest.into_values().flatten().collect();
        let (known, unknown) = apply_class_map(&all, &map).map_err(dataset_err)?;
        manifest = SplitManifest::from([(SplitName::Zeroshot, known), (SplitName::Ood, unknown)]);
    }
    write_json(&args.out, &manifest)?;
    let mut rows = vec![vec!["split".into(), "instances".into(), "boxes".into(), "classes".into()]];
    for (split, instances) in &manifest {
        let classes: std::collections::BTreeSet<&str> = instances.iter().map(|i| i.class_name.as_str()).collect();
        let boxes: usize = instances.iter().map(|i| i.fused_boxes.len()).sum();
        rows.push(vec![
            split.to_string(),
            instances.len().to_string(),
            boxes.to_string(),
            classes.len().to_string(),
        ]);
    }
    write!(out, "{}", table(&rows)).map_err(write_err)?;
    out_line(out, format!("manifest -> {}", args.out.display()))
}

fn endpoint_client(args: &DecomposeArgs) -> Result<Box<dyn LlmClient>, CliError> {
    if args.stub {
        return Ok(Box::new(SyntheticClient::default()));
    }
    if let Some(path) = &args.replay {
        require_file(path, "transcript")?;
        return Ok(Box::new(ReplayClient::new(Transcript::load(path).map_err(knowledge_err)?)));
    }
    let url = args.llm_url.clone().filter(|u| !u.trim().is_empty()).ok_or_else(|| {
        CliError::Usage("no completion endpoint: pass --stub, --replay or --llm-url (ATTRGROUND_LLM_URL)".into())
    })?;
    let mut config = EndpointConfig::new(url);
    config.api_key = args.llm_key.clone().filter(|k| !k.is_empty());
    if let Some(model) = &args.llm_model {
        config.model = model.clone();
    }
    let client = HttpClient::new(config).map_err(|e| CliError::Endpoint(e.to_string()))?;
    Ok(Box::new(client))
}

pub fn cmd_decompose(args: &DecomposeArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    require_file(&args.definitions, "definition store")?;
    let mut definitions = DefinitionStore::load(&args.definitions).map_err(knowledge_err)?;
    if !args.classes.is_empty() {
        let unknown: Vec<&str> = args
            .classes
            .iter()
            .filter(|c| definitions.get(c).is_none())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("classes not in the definition store: {}", unknown.join(", "))));
        }
        let keep: Vec<String> = args.classes.iter().map(|c| class_key(c)).collect();
        let subset = definitions
            .iter()
            .filter(|d| keep.contains(&class_key(&d.class_name)))
            .cloned()
            .collect();
        definitions = DefinitionStore::new(subset).map_err(knowledge_err)?;
    }
    if args.concurrency == 0 {
        return Err(CliError::Usage("--concurrency must be at least 1".into()));
    }
    let params = GenerationParams {
        temperature: args.temperature,
        top_p: args.top_p,
        repetition_penalty: args.repetition_penalty,
        max_tokens: args.max_tokens,
        n: args.n_candidates,
        seed,
    };
    params.validate().map_err(knowledge_err)?;
    let store = KnowledgeStore::open(&args.store).map_err(knowledge_err)?;
    let client = RecordingClient::new(endpoint_client(args)?);
    let params_line = format!(
        "generation params (temperature, top_p, repetition_penalty, max_tokens, n) = ({}, {}, {}, {}, {})",
        params.temperature, params.top_p, params.repetition_penalty, params.max_tokens, params.n
    );
    log::info!("{params_line}");
    out_line(out, &params_line)?;

    let results = generate_all(&definitions, &client, &params, args.concurrency);
    let mut rows = vec![vec!["class".into(), "candidates".into(), "dropped".into(), "status".into()]];
    let mut failures = Vec::new();
    for (class_name, result) in results {
        match result {
            Ok(pool) => {
                store.save_pool(&pool).map_err(knowledge_err)?;
                rows.push(vec![
                    class_name,
                    pool.candidates.len().to_string(),
                    pool.dropped.len().to_string(),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                rows.push(vec![class_name.clone(), "0".into(), "-".into(), format!("failed: {e}")]);
                failures.push(e);
            }
        }
    }
    write!(out, "{}", table(&rows)).map_err(write_err)?;
    if let Some(path) = &args.record {
        create_parent(path)?;
        client.transcript().save(path).map_err(knowledge_err)?;
    }
    if failures.is_empty() {
        return Ok(());
    }
    let total = rows.len() - 1;
    let summary = format!("{} of {total} classes failed; completed pools were kept", failures.len());
    let endpoint = failures
        .iter()
        .any(|e| matches!(e, KnowledgeError::Llm { .. } | KnowledgeError::NoUsableCandidates { .. }));
    Err(if endpoint { CliError::Endpoint(summary) } else { CliError::Data(summary) })
}

fn load_lexicons(path: Option<&Path>) -> Result<Lexicons, CliError> {
    match path {
        None => Ok(Lexicons::shipped()),
        Some(p) => Lexicons::from_json(&read_text(p, "lexicon file")?).map_err(prompt_err),
    }
}

pub fn cmd_select(args: &SelectArgs, out: &mut dyn Write) -> CliResult {
    require_dir(&args.store, "knowledge store")?;
    let store = KnowledgeStore::open(&args.store).map_err(knowledge_err)?;
    if !args.auto_select {
        let (Some(class), Some(index)) = (&args.class, args.index) else {
            return Err(CliError::Usage("--class and --index are required without --auto-select".into()));
        };
        let sel = store.select(class, index, Selector::Human).map_err(knowledge_err)?;
        out_line(out, format!("{}: candidate {} selected", sel.class_name, sel.selected_index))?;
        return out_line(out, format!("  {}", sel.description));
    }
    let lexicons = load_lexicons(args.lexicons.as_deref())?;
    let pools = store.pools().map_err(knowledge_err)?;
    if pools.is_empty() {
        return Err(CliError::Data(format!("no candidate pools in {}", args.store.display())));
    }
    let current = store.current_selections().map_err(knowledge_err)?;
    let mut rows = vec![vec!["class".into(), "index".into(), "by".into()]];
    for pool in pools {
        if let Some(existing) = current.get(&pool.class_name).filter(|_| !args.force) {
            rows.push(vec![pool.class_name, existing.selected_index.to_string(), "kept".into()]);
            continue;
        }
        let index = auto_select(&pool, &lexicons);
        let sel = store.select(&pool.class_name, index, Selector::Auto).map_err(knowledge_err)?;
        rows.push(vec![sel.class_name, index.to_string(), "auto".into()]);
    }
    write!(out, "{}", table(&rows)).map_err(write_err)
}

pub fn cmd_export_dict(args: &ExportDictArgs, out: &mut dyn Write) -> CliResult {
    require_dir(&args.store, "knowledge store")?;
    let store = KnowledgeStore::open(&args.store).map_err(knowledge_err)?;
    let classes: Vec<String> = if !args.classes.is_empty() {
        args.classes.clone()
    } else if let Some(path) = &args.definitions {
        require_file(path, "definition store")?;
        DefinitionStore::load(path).map_err(knowledge_err)?.class_names()
    } else {
        store.pools().map_err(knowledge_err)?.into_iter().map(|p| p.class_name).collect()
    };
    if classes.is_empty() {
        return Err(CliError::Data("no classes to export".into()));
    }
    let selections = store.current_selections().map_err(knowledge_err)?;
    let dictionary = export_prompt_dictionary(&selections, &classes).map_err(knowledge_err)?;
    create_parent(&args.out)?;
    dictionary.save(&args.out).map_err(knowledge_err)?;
    out_line(out, format!("{} entries -> {}", dictionary.len(), args.out.display()))
}

fn load_manifest(path: &Path) -> Result<SplitManifest, CliError> {
    read_json(path, "manifest")
}

fn split_instances(manifest: &SplitManifest, splits: &[SplitName]) -> Result<Vec<GroundingInstance>, CliError> {
    let mut instances = Vec::new();
    for split in splits {
        let Some(part) = manifest.get(split) else {
            let present: Vec<&str> = manifest.keys().map(SplitName::as_str).collect();
            return Err(CliError::Data(format!(
                "manifest has no {split} split (present: {})",
                present.join(", ")
            )));
        };
        instances.extend(part.iter().cloned());
    }
    Ok(instances)
}

/// Merges dictionaries in lookup order; earlier ones win.
fn load_dictionaries(specs: &[String]) -> Result<PromptDictionary, CliError> {
    let defaults = ["vindr".to_string(), "padchest".to_string()];
    let specs = if specs.is_empty() { &defaults[..] } else { specs };
    let mut merged: Option<PromptDictionary> = None;
    for spec in specs {
        let next = match spec.to_ascii_lowercase().as_str() {
            "vindr" => PromptDictionary::vindr(),
            "padchest" => PromptDictionary::padchest(),
            _ => {
                let path = Path::new(spec);
                require_file(path, "dictionary")?;
                PromptDictionary::load(path).map_err(knowledge_err)?
            }
        };
        merged = Some(match merged {
            None => next,
            Some(mut acc) => {
                for (name, description) in next.entries {
                    if acc.get(&name).is_none() {
                        acc.entries.insert(name, description);
                    }
                }
                for (alias, target) in next.aliases {
                    acc.aliases.entry(alias).or_insert(target);
                }
                acc
            }
        });
    }
    Ok(merged.expect("at least one dictionary"))
}

fn format_outputs(choice: FormatChoice, out: &Path) -> Vec<(WireFormat, PathBuf)> {
    match choice {
        FormatChoice::LocToken => vec![(WireFormat::LocToken, out.to_path_buf())],
        FormatChoice::JsonBox => vec![(WireFormat::JsonBox, out.to_path_buf())],
        FormatChoice::Both => {
            let stem = out.file_stem().map_or("pairs".into(), |s| s.to_string_lossy().into_owned());
            WireFormat::ALL
                .iter()
                .map(|f| (*f, out.with_file_name(format!("{stem}.{}.jsonl", f.as_str().replace('-', "_")))))
                .collect()
        }
    }
}

pub fn cmd_build_pairs(args: &BuildPairsArgs, out: &mut dyn Write) -> CliResult {
    let manifest = load_manifest(&args.manifest)?;
    let instances = split_instances(&manifest, &args.split)?;
    let knowledge = args.with_knowledge || !args.dictionary.is_empty() || args.mask.is_some();
    let dictionary = if knowledge { Some(load_dictionaries(&args.dictionary)?) } else { None };
    let lexicons = load_lexicons(args.lexicons.as_deref())?;
    for (format, path) in format_outputs(args.format, &args.out) {
        let pairs = build_eval_set(&instances, dictionary.as_ref(), format, args.mask, &lexicons).map_err(prompt_err)?;
        write_jsonl(&path, &pairs)?;
        out_line(out, format!("{} {} pairs -> {}", pairs.len(), format, path.display()))?;
    }
    Ok(())
}

pub fn cmd_stub_predict(args: &StubPredictArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    if !(args.jitter.is_finite() && args.jitter >= 0.0) {
        return Err(CliError::Usage(format!("--jitter must be a non-negative number, got {}", args.jitter)));
    }
    let pairs: Vec<TrainingPair> = read_jsonl(&args.pairs, "pairs file")?;
    let predictions = stub_predict(&pairs, args.jitter, seed);
    write_jsonl(&args.out, &predictions)?;
    out_line(out, format!("{} predictions -> {}", predictions.len(), args.out.display()))
}

pub fn cmd_parse(args: &ParseArgs, out: &mut dyn Write) -> CliResult {
    let raw: Vec<RawPredictionRecord> = read_jsonl(&args.predictions, "predictions file")?;
    let parsed: Vec<ParsedRecord> = raw.iter().map(ParsedRecord::from_raw).collect();
    write_jsonl(&args.out, &parsed)?;
    let boxes: usize = parsed.iter().map(|r| r.predictions.len()).sum();
    let discarded: usize = parsed.iter().map(|r| r.discarded.len()).sum();
    let fatal = parsed.iter().filter(|r| r.fatal).count();
    out_line(
        out,
        format!(
            "records {}  boxes {boxes}  discarded {discarded}  unparseable {fatal}  -> {}",
            parsed.len(),
            args.out.display()
        ),
    )
}

/// Reads raw or parsed prediction lines; raw lines are parsed here.
fn load_predictions(path: &Path) -> Result<Vec<ParsedRecord>, CliError> {
    let lines: Vec<Value> = read_jsonl(path, "predictions file")?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let bad = |e: serde_json::Error| CliError::Data(format!("{} record {}: {e}", path.display(), i + 1));
            if v.get("raw_output").is_some() {
                let raw: RawPredictionRecord = serde_json::from_value(v).map_err(bad)?;
                Ok(ParsedRecord::from_raw(&raw))
            } else {
                serde_json::from_value(v).map_err(bad)
            }
        })
        .collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> CliResult {
    let manifest = load_manifest(&args.manifest)?;
    let instances = split_instances(&manifest, &args.split)?;
    let records = load_predictions(&args.predictions)?;
    let config = EvalConfig {
        interpolation: args.ap_interp,
        extra_thresholds: args.iou_thresholds.clone(),
    };
    config.validate().map_err(metrics_err)?;
    let class_map = match (&args.class_map, args.group_by) {
        (Some(spec), _) => Some(load_class_map(spec)?),
        (None, GroupBy::KnownVsUnknown) => Some(ClassMap::padchest_gr()),
        (None, GroupBy::Class) => None,
    };

    let mut case_dims: BTreeMap<(String, String), ImageDims> = BTreeMap::new();
    let mut image_dims: BTreeMap<String, ImageDims> = BTreeMap::new();
    for inst in &instances {
        case_dims.insert((inst.image_id.clone(), class_key(&inst.class_name)), inst.dims);
        image_dims.insert(inst.image_id.clone(), inst.dims);
    }
    let mut predictions: BTreeMap<(String, String), Vec<PixelPrediction>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for rec in &records {
        let key = (rec.image_id.clone(), class_key(&rec.class_name));
        let tag = format!("{}/{}", rec.image_id, rec.class_name);
        let Some(dims) = case_dims.get(&key).or_else(|| image_dims.get(&rec.image_id)) else {
            warnings.push(format!("{tag}: image not in the evaluated splits; skipped"));
            continue;
        };
        if predictions.contains_key(&key) {
            warnings.push(format!("{tag}: duplicate prediction record; only the first is scored"));
            continue;
        }
        let report = rec.to_report();
        if report.fatal {
            warnings.push(format!("{tag}: output could not be parsed"));
        }
        let (boxes, notes) = normalize_predictions(&report, *dims, args.json_coords);
        warnings.extend(notes.into_iter().map(|n| format!("{tag}: {n}")));
        predictions.insert(key, boxes);
    }
    let cases = assemble_cases(&instances, predictions);
    let mut report = build_report(&cases, args.group_by, class_map.as_ref(), &config).map_err(metrics_err)?;
    report.diagnostics.warnings.extend(warnings);

    let run_config = json!({
        "splits": args.split,
        "group_by": args.group_by,
        "class_map": class_map,
        "ap_interpolation": args.ap_interp,
        "extra_thresholds": args.iou_thresholds,
        "json_coords": args.json_coords,
    });
    let record = RunStore::new(&args.runs).write(&run_config, &report, &cases).map_err(run_err)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    write!(out, "{}", report.to_text()).map_err(write_err)?;
    out_line(out, format!("run {}", record.run_id))
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let store = RunStore::new(&args.runs);
    let run_id = if args.run == "latest" {
        let runs = store.list().map_err(run_err)?;
        runs.last()
            .map(|r| r.run_id.clone())
            .ok_or_else(|| CliError::Data(format!("no runs in {}", args.runs.display())))?
    } else {
        args.run.clone()
    };
    if store.get(&run_id).map_err(run_err)?.is_none() {
        return Err(CliError::Data(format!("no run {run_id} in {}", args.runs.display())));
    }
    let report = store.report(&run_id).map_err(run_err)?;
    if args.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        return out_line(out, text);
    }
    write!(out, "{}", report.to_text()).map_err(write_err)?;
    out_line(out, format!("run {run_id}"))
}

pub fn cmd_serve(args: &ServeArgs, out: &mut dyn Write) -> CliResult {
    let config = ServiceConfig {
        definitions: args.definitions.clone(),
        store: args.store.clone(),
        runs: args.runs.clone(),
        images: args.images.clone(),
        ui: args.ui.clone(),
    };
    let addr = SocketAddr::new(args.bind, args.port);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    out_line(out, format!("serving on http://{addr}"))?;
    out.flush().map_err(write_err)?;
    runtime
        .block_on(attrground_service::serve(config, addr))
        .map_err(|e| CliError::Usage(format!("cannot serve on {addr}: {e}")))
}
