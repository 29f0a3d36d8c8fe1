//! Text-conditioned image-to-animation benchmark: JSONL loader, runner with
//! ablation modes, and results-table emitters.
//!
//! A benchmark set is one JSON object per line. Entries carry a category
//! (`material`, `non_rigid`, `hybrid`), a description, and optionally
//! pre-baked stage prompts, an input image path, and per-entry `n_t`, `n_f`,
//! `seed` overrides. The reference split is 70 material / 70 non-rigid /
//! 60 hybrid entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::config::RunConfig;
use crate::controller::{
    AnimationRequest, CompletionBackend, Planner, StagePlan, StrategySource, Transition,
};
use crate::ddim::DdimEngine;
use crate::error::{Error, Result};
use crate::generator::generate_animation;
use crate::image_io::ImageBuf;
use crate::injection::Strategy;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Material,
    NonRigid,
    Hybrid,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Material => "material",
            Category::NonRigid => "non_rigid",
            Category::Hybrid => "hybrid",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkEntry {
    pub id: String,
    pub category: Category,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_prompts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_f: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkSet {
    pub entries: Vec<BenchmarkEntry>,
    pub declared_counts: BTreeMap<Category, usize>,
}

/// Load and validate a JSONL benchmark set. Duplicate ids and schema
/// violations are rejected with the offending line number.
pub fn load_benchmark(path: &Path) -> Result<BenchmarkSet> {
    let text = std::fs::read_to_string(path)?;
    load_benchmark_str(&text)
}

pub fn load_benchmark_str(text: &str) -> Result<BenchmarkSet> {
    let mut entries = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: BenchmarkEntry =
            serde_json::from_str(line).map_err(|e| Error::BenchmarkLoad {
                line: line_no,
                message: e.to_string(),
            })?;
        if entry.description.trim().is_empty() {
            return Err(Error::BenchmarkLoad {
                line: line_no,
                message: format!("entry '{}' has an empty description", entry.id),
            });
        }
        if let Some(prompts) = &entry.stage_prompts {
            if prompts.len() < 2 {
                return Err(Error::BenchmarkLoad {
                    line: line_no,
                    message: format!(
                        "entry '{}' pre-bakes {} stage prompts; at least 2 required",
                        entry.id,
                        prompts.len()
                    ),
                });
            }
            if let Some(n_t) = entry.n_t {
                if prompts.len() != n_t + 1 {
                    return Err(Error::BenchmarkLoad {
                        line: line_no,
                        message: format!(
                            "entry '{}' declares n_t={n_t} but pre-bakes {} prompts",
                            entry.id,
                            prompts.len()
                        ),
                    });
                }
            }
        }
        if !seen_ids.insert(entry.id.clone()) {
            return Err(Error::BenchmarkLoad {
                line: line_no,
                message: format!("duplicate entry id '{}'", entry.id),
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::BenchmarkLoad {
            line: 0,
            message: "benchmark set is empty".into(),
        });
    }
    let mut declared_counts = BTreeMap::new();
    for e in &entries {
        *declared_counts.entry(e.category).or_insert(0usize) += 1;
    }
    Ok(BenchmarkSet {
        entries,
        declared_counts,
    })
}

/// Reference split of the full benchmark: 70 material, 70 non-rigid,
/// 60 hybrid.
pub fn reference_split() -> BTreeMap<Category, usize> {
    [
        (Category::Material, 70),
        (Category::NonRigid, 70),
        (Category::Hybrid, 60),
    ]
    .into_iter()
    .collect()
}

pub fn validate_reference_split(set: &BenchmarkSet) -> Result<()> {
    let expected = reference_split();
    if set.declared_counts != expected {
        return Err(Error::config(format!(
            "benchmark split {:?} does not match the reference split {:?}",
            set.declared_counts, expected
        )));
    }
    Ok(())
}

/// Which components an ablation run disables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Component {
    Fai,
    Kvai,
    Dai,
    Ica,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub disabled: BTreeSet<Component>,
}

impl AblationMode {
    pub fn none() -> Self {
        AblationMode::default()
    }

    pub fn without(component: Component) -> Self {
        AblationMode {
            disabled: [component].into_iter().collect(),
        }
    }

    /// Total substitution rule: with ICA disabled every transition falls
    /// back to DAI; a disabled strategy substitutes plain DDIM.
    pub fn substitute(&self, planned: Strategy) -> Strategy {
        let strategy = if self.disabled.contains(&Component::Ica) {
            Strategy::Dai
        } else {
            planned
        };
        let gate = match strategy {
            Strategy::Fai => Component::Fai,
            Strategy::Kvai => Component::Kvai,
            Strategy::Dai => Component::Dai,
            Strategy::None => return Strategy::None,
        };
        if self.disabled.contains(&gate) {
            Strategy::None
        } else {
            strategy
        }
    }

    /// Rewrite a plan's transitions under this mode.
    pub fn apply_to_plan(&self, plan: &StagePlan) -> StagePlan {
        if self.disabled.is_empty() {
            return plan.clone();
        }
        let mut out = plan.clone();
        for t in &mut out.transitions {
            let substituted = self.substitute(t.strategy);
            if substituted != t.strategy || self.disabled.contains(&Component::Ica) {
                t.strategy = substituted;
                t.source = StrategySource::Ablation;
                t.rationale = Some(format!("ablation {self}"));
            }
        }
        out
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.disabled.is_empty() {
            return write!(f, "none");
        }
        let parts: Vec<String> = self
            .disabled
            .iter()
            .map(|c| {
                let name = match c {
                    Component::Fai => "FAI",
                    Component::Kvai => "KVAI",
                    Component::Dai => "DAI",
                    Component::Ica => "ICA",
                };
                format!("w/o-{name}")
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase();
        if normalized.is_empty() || normalized == "none" {
            return Ok(AblationMode::none());
        }
        let mut disabled = BTreeSet::new();
        for part in normalized.split(',') {
            let name = part
                .trim()
                .strip_prefix("w/o-")
                .or_else(|| part.trim().strip_prefix("without-"))
                .unwrap_or(part.trim());
            let component = match name {
                "fai" => Component::Fai,
                "kvai" => Component::Kvai,
                "dai" => Component::Dai,
                "ica" => Component::Ica,
                other => {
                    return Err(Error::config(format!(
                        "unknown ablation component '{other}' (expected FAI, KVAI, DAI or ICA)"
                    )))
                }
            };
            disabled.insert(component);
        }
        Ok(AblationMode { disabled })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryResult {
    pub id: String,
    pub category: Category,
    pub strategies: Vec<Strategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResults {
    pub ablation: AblationMode,
    pub entries: Vec<EntryResult>,
}

fn plan_for_entry(
    entry: &BenchmarkEntry,
    backend: &dyn CompletionBackend,
    max_retries: usize,
    has_image: bool,
) -> Result<(StagePlan, Vec<crate::controller::Transcript>)> {
    let planner = Planner::new(backend).with_max_retries(max_retries);
    let plan = match &entry.stage_prompts {
        Some(prompts) => {
            // Pre-baked prompts skip decomposition; classification and
            // (when needed) enhancement still run.
            let enhanced = if has_image {
                None
            } else {
                Some(planner.pga_enhance(&prompts[0])?)
            };
            let mut transitions = Vec::with_capacity(prompts.len() - 1);
            for i in 0..prompts.len() - 1 {
                let (strategy, rationale) = planner.ica_classify(&prompts[i], &prompts[i + 1])?;
                transitions.push(Transition {
                    from_stage: i,
                    strategy,
                    source: StrategySource::Ica,
                    rationale: Some(rationale),
                });
            }
            let plan = StagePlan {
                prompts: prompts.clone(),
                transitions,
                enhanced_initial_prompt: enhanced,
                agent_prompt_hashes: crate::controller::agent_prompt_hashes(),
            };
            plan.validate()?;
            plan
        }
        None => {
            let request = AnimationRequest {
                description: entry.description.clone(),
                input_image: if has_image {
                    // Planner only checks presence; avoid loading the image
                    // twice by handing it a placeholder.
                    Some(ImageBuf::filled(1, 1, [0.0; 3]))
                } else {
                    None
                },
                n_t: entry.n_t,
                n_f: 2,
                seed: entry.seed.unwrap_or(0),
            };
            planner.plan(&request)?
        }
    };
    Ok((plan, planner.transcripts()))
}

fn run_entry(
    engine: &DdimEngine,
    backend: &dyn CompletionBackend,
    entry: &BenchmarkEntry,
    config: &RunConfig,
    ablation: &AblationMode,
    out_dir: Option<&Path>,
) -> Result<(Vec<Strategy>, MetricsReport)> {
    let input_image = match &entry.image_path {
        Some(path) => Some(ImageBuf::load_png(path)?),
        None => None,
    };
    let (plan, transcripts) =
        plan_for_entry(entry, backend, config.llm_max_retries, input_image.is_some())?;
    let plan = ablation.apply_to_plan(&plan);

    let mut entry_config = config.clone();
    if let Some(n_f) = entry.n_f {
        entry_config.n_f = n_f;
    }
    if let Some(seed) = entry.seed {
        entry_config.seed = seed;
    }
    let request = AnimationRequest {
        description: entry.description.clone(),
        input_image,
        n_t: Some(plan.n_t()),
        n_f: entry_config.n_f,
        seed: entry_config.seed,
    };
    let run_dir = out_dir.map(|d| d.join("entries").join(&entry.id));
    let result = generate_animation(
        engine,
        &request,
        &plan,
        &entry_config,
        &transcripts,
        run_dir.as_deref(),
    )?;
    let strategies = plan.transitions.iter().map(|t| t.strategy).collect();
    Ok((strategies, result.metrics))
}

/// Run every entry of a set under an ablation mode. Per-entry failures are
/// recorded and the run continues. With `config.jobs > 1`, independent
/// entries run on a worker pool.
pub fn run_benchmark(
    engine: &DdimEngine,
    backend: &dyn CompletionBackend,
    set: &BenchmarkSet,
    config: &RunConfig,
    ablation: &AblationMode,
    out_dir: Option<&Path>,
) -> Result<BenchmarkResults> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let n = set.entries.len();
    let results: Mutex<Vec<Option<EntryResult>>> = Mutex::new(vec![None; n]);
    let next: AtomicUsize = AtomicUsize::new(0);
    let workers = config.jobs.clamp(1, n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let entry = &set.entries[idx];
                let outcome = run_entry(engine, backend, entry, config, ablation, out_dir);
                let result = match outcome {
                    Ok((strategies, metrics)) => EntryResult {
                        id: entry.id.clone(),
                        category: entry.category,
                        strategies,
                        metrics: Some(metrics),
                        error: None,
                    },
                    Err(e) => {
                        warn!(entry = entry.id, error = %e, "benchmark entry failed");
                        EntryResult {
                            id: entry.id.clone(),
                            category: entry.category,
                            strategies: Vec::new(),
                            metrics: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                results.lock().expect("no poisoned lock")[idx] = Some(result);
            });
        }
    });

    let entries: Vec<EntryResult> = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect();
    let results = BenchmarkResults {
        ablation: ablation.clone(),
        entries,
    };
    if let Some(dir) = out_dir {
        std::fs::write(
            dir.join("results.json"),
            serde_json::to_string_pretty(&results)?,
        )?;
    }
    Ok(results)
}

/// One emitted table row. Runtime is a string so the per-strategy split
/// ("41.0s/48.0s") survives round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub pic: f64,
    pub lpips_t: f64,
    pub lpips_m: f64,
    pub clip_score: f64,
    pub clip_score_text: f64,
    pub ppl: f64,
    pub runtime: String,
    pub n_entries: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean runtime split by strategy family, formatted like "12.3s/15.1s"
/// (FAI-led entries / KVAI-or-DAI-led entries).
fn runtime_cell(entries: &[&EntryResult]) -> String {
    let mut fai = Vec::new();
    let mut kv = Vec::new();
    for e in entries {
        let Some(m) = &e.metrics else { continue };
        match e.strategies.first() {
            Some(Strategy::Fai) => fai.push(m.runtime_seconds),
            Some(Strategy::Kvai) | Some(Strategy::Dai) => kv.push(m.runtime_seconds),
            _ => {}
        }
    }
    let fmt_mean = |v: &[f64]| {
        if v.is_empty() {
            "-".to_string()
        } else {
            format!("{:.1}s", mean(v))
        }
    };
    format!("{}/{}", fmt_mean(&fai), fmt_mean(&kv))
}

impl BenchmarkResults {
    fn row_for(&self, label: &str, entries: &[&EntryResult]) -> Option<TableRow> {
        let metrics: Vec<&MetricsReport> =
            entries.iter().filter_map(|e| e.metrics.as_ref()).collect();
        if metrics.is_empty() {
            return None;
        }
        Some(TableRow {
            label: label.to_string(),
            pic: mean(&metrics.iter().map(|m| m.pic).collect::<Vec<_>>()),
            lpips_t: mean(&metrics.iter().map(|m| m.lpips_total).collect::<Vec<_>>()),
            lpips_m: mean(
                &metrics
                    .iter()
                    .map(|m| m.lpips_max_endpoint)
                    .collect::<Vec<_>>(),
            ),
            clip_score: mean(&metrics.iter().map(|m| m.clip_frame).collect::<Vec<_>>()),
            clip_score_text: mean(&metrics.iter().map(|m| m.clip_text).collect::<Vec<_>>()),
            ppl: mean(&metrics.iter().map(|m| m.ppl).collect::<Vec<_>>()),
            runtime: runtime_cell(entries),
            n_entries: entries.len(),
        })
    }

    /// Per-category rows in reference order, then the overall row.
    pub fn aggregate_rows(&self) -> Vec<TableRow> {
        let mut rows = Vec::new();
        for category in [Category::Material, Category::NonRigid, Category::Hybrid] {
            let entries: Vec<&EntryResult> = self
                .entries
                .iter()
                .filter(|e| e.category == category)
                .collect();
            if let Some(row) = self.row_for(&category.to_string(), &entries) {
                rows.push(row);
            }
        }
        let all: Vec<&EntryResult> = self.entries.iter().collect();
        if let Some(row) = self.row_for("overall", &all) {
            rows.push(row);
        }
        rows
    }

    pub fn entry_rows(&self) -> Vec<TableRow> {
        self.entries
            .iter()
            .filter_map(|e| self.row_for(&e.id, &[e]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::config(format!("unknown table format '{other}'"))),
        }
    }
}

const TABLE_COLUMNS: &[&str] = &[
    "Method",
    "PIC",
    "LPIPS_T",
    "LPIPS_M",
    "CLIP Score",
    "CLIP Score (text)",
    "PPL",
    "Runtime",
];

/// Render rows with the reference column order:
/// PIC, LPIPS_T, LPIPS_M, CLIP Score (plus the text variant), PPL, Runtime.
pub fn emit_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("cannot emit a table with no rows"));
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_COLUMNS.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                    r.label, r.pic, r.lpips_t, r.lpips_m, r.clip_score, r.clip_score_text,
                    r.ppl, r.runtime
                ));
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", TABLE_COLUMNS.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(TABLE_COLUMNS.len())));
            for r in rows {
                out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                    r.label, r.pic, r.lpips_t, r.lpips_m, r.clip_score, r.clip_score_text,
                    r.ppl, r.runtime
                ));
            }
        }
    }
    Ok(out)
}

/// Summary parser for emitted markdown tables; the emitter and this parser
/// round-trip each other.
pub fn parse_markdown_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::config("empty table"))?;
    let headers: Vec<&str> = header
        .trim_matches('|')
        .split('|')
        .map(str::trim)
        .collect();
    if headers != TABLE_COLUMNS {
        return Err(Error::config(format!(
            "unexpected table header {headers:?}"
        )));
    }
    let _separator = lines.next();
    let mut rows = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != TABLE_COLUMNS.len() {
            return Err(Error::config(format!(
                "row has {} cells, expected {}",
                cells.len(),
                TABLE_COLUMNS.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::config(format!("bad numeric cell '{s}': {e}")))
        };
        rows.push(TableRow {
            label: cells[0].to_string(),
            pic: parse(cells[1])?,
            lpips_t: parse(cells[2])?,
            lpips_m: parse(cells[3])?,
            clip_score: parse(cells[4])?,
            clip_score_text: parse(cells[5])?,
            ppl: parse(cells[6])?,
            runtime: cells[7].to_string(),
            n_entries: 0,
        });
    }
    Ok(rows)
}

/// Expand seed descriptions into full benchmark entries using the planning
/// agents, mirroring how the reference set was constructed.
pub fn build_entries(
    descriptions: &[(Category, String)],
    backend: &dyn CompletionBackend,
    max_retries: usize,
    n_f: usize,
) -> Result<Vec<BenchmarkEntry>> {
    let planner = Planner::new(backend).with_max_retries(max_retries);
    let mut counters: BTreeMap<Category, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(descriptions.len());
    for (category, description) in descriptions {
        let count = counters.entry(*category).or_insert(0);
        *count += 1;
        let prompts = planner.sia_decompose(description, None)?;
        let prefix = match category {
            Category::Material => "m",
            Category::NonRigid => "n",
            Category::Hybrid => "h",
        };
        entries.push(BenchmarkEntry {
            id: format!("{prefix}-{count:03}"),
            category: *category,
            description: description.clone(),
            stage_prompts: Some(prompts),
            image_path: None,
            n_t: None,
            n_f: Some(n_f),
            seed: Some(*count as u64),
        });
    }
    Ok(entries)
}

pub fn write_jsonl(entries: &[BenchmarkEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The curated sample set bundled with the crate.
pub const SAMPLE_SET: &str = include_str!("../data/benchmark_sample.jsonl");
