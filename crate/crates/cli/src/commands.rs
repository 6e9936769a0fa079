//! The CLI verbs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use regimenas_core::arch::ArchSpec;
use regimenas_core::data::{generate_synthetic, load_csv, prepare_panel, write_csv, FeaturePanel, SynthMarketConfig};
use regimenas_core::nas::pipeline::{finalize, run_ablation, search_architectures, train_baseline};
use regimenas_core::nas::search::{EvalRecord, SearchTrace};
use regimenas_core::nas::AblationRow;
use regimenas_core::model::RegimeModel;
use regimenas_core::train::{Metrics, TrainReport, Trained};

use crate::config::{file_fingerprint, read_artifact, read_json, sha256_hex, write_json, write_lines, write_text, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::report::{build_bundle, render_csv, render_markdown, ReportBundle};

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const GENERATIONS_FILE: &str = "generations.json";
pub const BEST_ARCH: &str = "best/arch.json";
pub const BEST_TEST: &str = "best/test_metrics.json";
pub const BASELINE_TEST: &str = "baseline/test_metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Sidecar path for the hidden regime path: `x.csv` → `x.regimes.csv`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.regimes.csv"))
}

pub fn generate_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let mut cfg: SynthMarketConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let market = generate_synthetic(&cfg)?;
    let mut buf = Vec::new();
    write_csv(&market.series, &mut buf)?;
    write_text(out, std::str::from_utf8(&buf).expect("csv is utf-8"))?;

    let side = sidecar_path(out);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["timestamp", "regime"]).expect("in-memory csv");
    for (row, r) in market.series.rows().iter().zip(&market.regimes) {
        w.write_record([row.timestamp.to_string(), r.name().to_string()])
            .expect("in-memory csv");
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv");
    write_text(&side, &text)?;
    Ok(vec![out.to_path_buf(), side])
}

fn load_panel(data: &Path, z_window: usize) -> Result<FeaturePanel> {
    let series = load_csv(data)?;
    Ok(prepare_panel(&series, z_window)?)
}

fn run_id_of(out: &Path) -> String {
    out.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn candidate_dir(rec: &EvalRecord<ArchSpec>) -> String {
    rec.report_id.clone()
}

/// Records of an earlier (possibly interrupted) run. A torn final line is dropped.
pub fn read_trace(path: &Path) -> Result<Vec<EvalRecord<ArchSpec>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        match serde_json::from_str(l) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(CliError::Config(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn trace_line(rec: &EvalRecord<ArchSpec>) -> String {
    serde_json::to_string(rec).expect("records serialize")
}

fn model_hash(run_hash: &str, arch: &ArchSpec) -> String {
    sha256_hex(format!("{run_hash}{}", serde_json::to_string(arch).expect("arch serializes")).as_bytes())
}

fn write_report_files(dir: &Path, rel: &str, report: &TrainReport, m: &mut RunManifest) -> Result<()> {
    write_json(&dir.join(rel).join("train_report.json"), report)?;
    write_lines(&dir.join(rel).join("train_log.jsonl"), &report.log_lines())?;
    m.add(format!("{rel}/train_report.json"));
    m.add(format!("{rel}/train_log.jsonl"));
    Ok(())
}

/// Loads the manifest of `out`, or starts one. An existing run must have
/// been produced from the same config and data.
fn open_manifest(out: &Path, cfg: &RunConfig, data: &Path) -> Result<RunManifest> {
    let hash = cfg.hash();
    let fingerprint = file_fingerprint(data)?;
    match RunManifest::load(out)? {
        Some(m) => {
            if m.config_hash != hash || m.data_fingerprint != fingerprint {
                return Err(CliError::Config(format!(
                    "{} holds a run with a different config or dataset; choose another --out",
                    out.display()
                )));
            }
            Ok(m)
        }
        None => Ok(RunManifest {
            run_id: run_id_of(out),
            seed: cfg.seed,
            config_hash: hash,
            data_path: data.display().to_string(),
            data_fingerprint: fingerprint,
            commands: Vec::new(),
            artifacts: Default::default(),
        }),
    }
}

pub struct SearchSummary {
    pub evaluations: usize,
    pub reused: usize,
    pub best: Option<f64>,
}

/// Runs (or resumes) the architecture search in `out`.
pub fn search(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<SearchSummary> {
    let cfg: RunConfig = match config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolved(seed)?;
    let panel = load_panel(data, cfg.z_window)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut manifest = open_manifest(out, &cfg, data)?;
    manifest.begin("search");
    manifest.add(MANIFEST_FILE);
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    manifest.add(CONFIG_FILE);
    manifest.save(out)?;

    let trace_path = out.join(TRACE_FILE);
    let prior = read_trace(&trace_path)?;
    let prior_lines: Vec<String> = prior.iter().map(trace_line).collect();
    write_lines(&trace_path, &prior_lines)?;
    manifest.add(TRACE_FILE);
    let mut trace_file = OpenOptions::new()
        .append(true)
        .open(&trace_path)
        .map_err(|e| CliError::io(&trace_path, e))?;

    let run_hash = manifest.config_hash.clone();
    let mut reused = 0;
    let mut handle = |rec: &EvalRecord<ArchSpec>, extra: Option<Option<Trained<RegimeModel>>>| -> Result<()> {
        let rel = candidate_dir(rec);
        match extra {
            None => reused += 1,
            Some(trained) => {
                if let Some(t) = trained {
                    write_report_files(out, &rel, &t.report, &mut manifest)?;
                    let ck = t.model.store.to_checkpoint(&model_hash(&run_hash, &rec.point));
                    write_json(&out.join(&rel).join("checkpoint.json"), &ck)?;
                    manifest.add(format!("{rel}/checkpoint.json"));
                }
                writeln!(trace_file, "{}", trace_line(rec)).map_err(|e| CliError::io(&trace_path, e))?;
                trace_file.flush().map_err(|e| CliError::io(&trace_path, e))?;
            }
        }
        write_json(&out.join(&rel).join("record.json"), rec)?;
        manifest.add(format!("{rel}/record.json"));
        Ok(())
    };
    let trace: SearchTrace<ArchSpec> =
        search_architectures(&panel, &cfg.search, &cfg.train, &prior, |rec, extra| handle(rec, extra).map_err(CliError::into_core))?;
    write_json(&out.join(GENERATIONS_FILE), &trace.generations)?;
    manifest.add(GENERATIONS_FILE);

    let evaluations = trace.records.len();
    let best_score = trace.best().and_then(|r| r.score);
    let outcome = finalize(trace, &panel, &cfg.train)?;
    if let (Some(arch), Some(t), Some(test)) = (&outcome.best, &outcome.final_model, &outcome.test) {
        write_json(&out.join(BEST_ARCH), arch)?;
        write_json(&out.join(BEST_TEST), test)?;
        let ck = t.model.store.to_checkpoint(&model_hash(&run_hash, arch));
        write_json(&out.join("best/checkpoint.json"), &ck)?;
        write_report_files(out, "best", &t.report, &mut manifest)?;
        for f in [BEST_ARCH, BEST_TEST, "best/checkpoint.json"] {
            manifest.add(f);
        }
    }
    write_bundle(out, &mut manifest)?;
    manifest.finish();
    manifest.save(out)?;
    Ok(SearchSummary {
        evaluations,
        reused,
        best: best_score,
    })
}

/// Run directory state needed by the follow-up commands.
fn reopen(out: &Path, data: Option<&Path>) -> Result<(RunManifest, RunConfig, FeaturePanel)> {
    let manifest = RunManifest::load(out)?.ok_or_else(|| CliError::Missing(out.join(MANIFEST_FILE).display().to_string()))?;
    let cfg: RunConfig = read_artifact(&out.join(CONFIG_FILE))?;
    let data_path = data.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&manifest.data_path));
    if file_fingerprint(&data_path)? != manifest.data_fingerprint {
        return Err(CliError::Config(format!(
            "{} differs from the dataset the run was built on",
            data_path.display()
        )));
    }
    let panel = load_panel(&data_path, cfg.z_window)?;
    Ok((manifest, cfg, panel))
}

/// Trains the GRU comparator. Inside an existing run directory it reuses the
/// run's config and data; otherwise `data` is required.
pub fn train_baseline_cmd(data: Option<&Path>, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Metrics> {
    let (mut manifest, cfg, panel) = if out.join(MANIFEST_FILE).exists() {
        reopen(out, data)?
    } else {
        let data = data.ok_or_else(|| CliError::Config("--data is required outside a run directory".into()))?;
        let cfg: RunConfig = match config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        let cfg = cfg.resolved(seed)?;
        let panel = load_panel(data, cfg.z_window)?;
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        write_json(&out.join(CONFIG_FILE), &cfg)?;
        let mut m = open_manifest(out, &cfg, data)?;
        m.add(MANIFEST_FILE);
        m.add(CONFIG_FILE);
        (m, cfg, panel)
    };
    manifest.begin("train-baseline");
    let (trained, test) = train_baseline(&panel, &cfg.train)?;
    write_json(&out.join(BASELINE_TEST), &test)?;
    manifest.add(BASELINE_TEST);
    write_report_files(out, "baseline", &trained.report, &mut manifest)?;
    let ck = trained.model.store.to_checkpoint(&sha256_hex(format!("{}gru", manifest.config_hash).as_bytes()));
    write_json(&out.join("baseline/checkpoint.json"), &ck)?;
    manifest.add("baseline/checkpoint.json");
    if out.join(TRACE_FILE).exists() {
        write_bundle(out, &mut manifest)?;
    }
    manifest.finish();
    manifest.save(out)?;
    Ok(test)
}

pub fn ablate(out: &Path, data: Option<&Path>) -> Result<Vec<AblationRow>> {
    let (mut manifest, cfg, panel) = reopen(out, data)?;
    let arch: ArchSpec = read_artifact(&out.join(BEST_ARCH))?;
    let full: Metrics = read_artifact(&out.join(BEST_TEST))?;
    manifest.begin("ablate");
    let rows = run_ablation(&arch, &panel, &cfg.train, Some(full))?;
    write_json(&out.join(ABLATION_FILE), &rows)?;
    manifest.add(ABLATION_FILE);
    write_bundle(out, &mut manifest)?;
    manifest.finish();
    manifest.save(out)?;
    Ok(rows)
}

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        Ok(Some(read_json(path)?))
    } else {
        Ok(None)
    }
}

/// Rebuilds every table from the persisted records. Missing optional
/// artifacts are listed in the second return value.
pub fn load_bundle(out: &Path) -> Result<(ReportBundle, Vec<String>)> {
    let trace_path = out.join(TRACE_FILE);
    if !trace_path.exists() {
        return Err(CliError::Missing(trace_path.display().to_string()));
    }
    let records = read_trace(&trace_path)?;
    let cfg: RunConfig = read_artifact(&out.join(CONFIG_FILE))?;
    let mut missing = Vec::new();
    let mut get = |rel: &str| -> Result<Option<Metrics>> {
        let v = optional(&out.join(rel))?;
        if v.is_none() {
            missing.push(rel.to_string());
        }
        Ok(v)
    };
    let model = get(BEST_TEST)?;
    let baseline = get(BASELINE_TEST)?;
    let ablation: Vec<AblationRow> = match optional(&out.join(ABLATION_FILE))? {
        Some(a) => a,
        None => {
            missing.push(ABLATION_FILE.to_string());
            Vec::new()
        }
    };
    let bundle = build_bundle(
        &run_id_of(out),
        cfg.train.target_scale,
        &records,
        model.as_ref(),
        baseline.as_ref(),
        &ablation,
    );
    Ok((bundle, missing))
}

fn write_bundle(out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (bundle, _) = load_bundle(out)?;
    write_json(&out.join("report.json"), &bundle)?;
    manifest.add("report.json");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

/// Writes the rendering into the run directory and returns it.
pub fn report(out: &Path, format: Format) -> Result<(String, Vec<String>)> {
    let mut manifest = RunManifest::load(out)?.ok_or_else(|| CliError::Missing(out.join(MANIFEST_FILE).display().to_string()))?;
    let (bundle, missing) = load_bundle(out)?;
    let (name, text) = match format {
        Format::Json => ("report.json", serde_json::to_string_pretty(&bundle).expect("bundle serializes") + "\n"),
        Format::Csv => ("report.csv", render_csv(&bundle)),
        Format::Markdown => ("report.md", render_markdown(&bundle)),
    };
    manifest.begin("report");
    write_text(&out.join(name), &text)?;
    manifest.add(name);
    manifest.finish();
    manifest.save(out)?;
    Ok((text, missing))
}
