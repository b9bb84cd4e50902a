use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use offscan_core::audit::{
    self, load_audit, top_flagged, top_flagged_by_class, AuditRecord, AuditSummary, ClassCount,
    ExemplarGroup, JsonlWriter, ScanOptions,
};
use offscan_core::embedding::{pca_project, PcaOptions};
use offscan_core::encoder::{embed_directory, DirectoryOptions, EmbeddingCache, EncoderConfig};
use offscan_core::eval::{cross_validate, tune_with_holdout, EvalConfig, EvalMode, EvalReport};
use offscan_core::prompt::{build_zero_shot, learning_curve, CurvePoint, LabelWords, PromptSet, Provenance};
use offscan_core::smid::{class_counts, label_examples, load_ratings, split_plan, ColumnMap, Thresholds};
use offscan_service::run::{RunSources, AUDIT_FILE, PROMPTS_FILE, SOURCES_FILE, SUMMARY_FILE};
use offscan_service::{AppState, Run, ServiceConfig};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::synth::{self, SynthConfig};
use crate::{usage, Cli, Command, EmbedArgs, EvalArgs, ProjectArgs, ReportArgs, ScanArgs, ServeArgs, SynthArgs};

/// Manifest written inside a scan's output directory.
pub const RUN_MANIFEST: &str = "run.json";
/// Test fraction of the held-out split used for learning curves.
const CURVE_TEST_FRACTION: f64 = 0.1;

pub fn dispatch(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    match &cli.command {
        Command::Embed(a) => embed(cli, args, a),
        Command::Eval(a) => eval(cli, args, a),
        Command::Scan(a) => scan(cli, args, a),
        Command::Report(a) => report(cli, args, a),
        Command::Serve(a) => serve(cli, args, a),
        Command::Project(a) => project(cli, args, a),
        Command::Synth(a) => synth_cmd(cli, args, a),
        Command::Rerun(a) => rerun(&a.manifest_file),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn manifest_path(cli: &Cli, default: PathBuf) -> PathBuf {
    cli.manifest.clone().unwrap_or(default)
}

fn pool_size(cli: &Cli) -> usize {
    if cli.workers > 0 {
        cli.workers
    } else {
        rayon::current_num_threads()
    }
}

fn read_cache(path: &Path) -> anyhow::Result<EmbeddingCache> {
    EmbeddingCache::read(path).with_context(|| format!("reading cache {}", path.display()))
}

fn read_prompts(path: &Path) -> anyhow::Result<PromptSet> {
    PromptSet::load(path).with_context(|| format!("reading prompts {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn embed(cli: &Cli, args: &[String], a: &EmbedArgs) -> anyhow::Result<()> {
    let config = EncoderConfig::load(&a.backend)?;
    let backend = config.build()?;
    let previous = if a.out.exists() {
        match EmbeddingCache::read(&a.out) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("ignoring unreadable cache {}: {e}", a.out.display());
                None
            }
        }
    } else {
        None
    };
    let options = DirectoryOptions {
        include: a.include.clone(),
        workers: pool_size(cli),
    };
    let outcome = embed_directory(backend.as_ref(), &a.input, &options, previous.as_ref())?;
    for f in &outcome.failures {
        eprintln!("failed: {}: {}", f.id, f.error);
    }
    println!(
        "{} encoded, {} cached, {} failed",
        outcome.encoded,
        outcome.reused,
        outcome.failures.len()
    );
    if outcome.cache.is_empty() {
        anyhow::bail!("no image under {} could be encoded", a.input.display());
    }
    if !outcome.failures.is_empty() && !a.allow_partial {
        anyhow::bail!(
            "{} files failed to encode; rerun with --allow-partial to keep the rest",
            outcome.failures.len()
        );
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    outcome.cache.write(&a.out)?;

    let mut m = RunManifest::new("embed", args);
    m.config(&config)?;
    m.input(&a.backend)?;
    m.input(&a.input)?;
    m.output(&a.out);
    m.output(&EmbeddingCache::manifest_path(&a.out));
    m.write(&manifest_path(cli, sibling(&a.out, ".run.json")))
}

fn label_words(a: &EvalArgs) -> anyhow::Result<LabelWords> {
    match (&a.labels, &a.label_preset) {
        (Some(pair), _) => {
            let (non, off) = pair
                .split_once(',')
                .ok_or_else(|| usage(format!("--labels expects NON_OFFENSIVE,OFFENSIVE, got {pair:?}")))?;
            Ok(LabelWords::new(non.trim(), off.trim()))
        }
        (None, Some(name)) => LabelWords::preset(name).ok_or_else(|| {
            let known: Vec<&str> = offscan_core::prompt::LABEL_PRESETS.iter().map(|p| p.0).collect();
            usage(format!("unknown label preset {name:?}; known: {}", known.join(", ")))
        }),
        (None, None) => Ok(LabelWords::default()),
    }
}

fn load_eval_config(path: &Path) -> anyhow::Result<EvalConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve_eval_config(a: &EvalArgs) -> anyhow::Result<EvalConfig> {
    let mut c = match &a.config {
        Some(p) => load_eval_config(p)?,
        None => EvalConfig::default(),
    };
    if let Some(m) = a.mode {
        c.mode = m;
    }
    if let Some(k) = a.folds {
        c.folds = k;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    // One seed drives everything unless the tuning seed is set explicitly.
    if a.seed.is_some() || a.config.is_none() {
        c.tune.seed = c.seed;
    }
    if let Some(v) = a.validation_fraction {
        c.validation_fraction = v;
    }
    let t = &mut c.tune;
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.early_stop {
        t.early_stop = v;
    }
    c.tune.validate()?;
    Ok(c)
}

fn initial_prompts(a: &EvalArgs, config: &EvalConfig, cache: &EmbeddingCache) -> anyhow::Result<PromptSet> {
    let prompts = if let Some(p) = &a.prompts {
        read_prompts(p)?
    } else if let Some(b) = &a.backend {
        let backend = EncoderConfig::load(b)?.build()?;
        build_zero_shot(backend.as_ref(), &a.template, &label_words(a)?, a.temperature)?
    } else if config.mode == EvalMode::ZeroShot {
        return Err(usage("zero-shot evaluation needs --prompts or --backend"));
    } else {
        PromptSet::random(cache.space().clone(), a.temperature, config.seed)?
    };
    prompts.space().ensure_same(cache.space())?;
    Ok(prompts)
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    thresholds: Thresholds,
    examples: usize,
    offensive: usize,
    non_offensive: usize,
    initial: &'a Provenance,
    config: &'a EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_validation: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_curve: Option<Vec<CurvePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tuned_prompts: Option<&'a Path>,
}

fn eval(cli: &Cli, args: &[String], a: &EvalArgs) -> anyhow::Result<()> {
    let config = resolve_eval_config(a)?;
    let cache = read_cache(&a.cache)?;
    let columns = ColumnMap {
        id: a.id_column.clone(),
        rating: a.rating_column.clone(),
        path: a.path_column.clone(),
    };
    let rated = load_ratings(&a.ratings, &columns)?;
    let examples = label_examples(&rated, &cache, a.thresholds)?;
    let (non_offensive, offensive) = class_counts(&examples);
    log::info!(
        "{} rated, {} labeled ({offensive} offensive, {non_offensive} non-offensive)",
        rated.len(),
        examples.len()
    );
    let initial = initial_prompts(a, &config, &cache)?;

    let mut output = EvalOutput {
        thresholds: a.thresholds,
        examples: examples.len(),
        offensive,
        non_offensive,
        initial: &initial.provenance,
        config: &config,
        cross_validation: None,
        learning_curve: None,
        tuned_prompts: a.prompts_out.as_deref(),
    };
    if a.fractions.is_empty() {
        let report = cross_validate(&initial, &examples, &config)?;
        let (m, s) = (&report.summary.mean, &report.summary.std);
        println!(
            "{} over {} folds: accuracy {:.4} ± {:.4}, precision {:.4} ± {:.4}, recall {:.4} ± {:.4}, f1 {:.4} ± {:.4}",
            a.mode.map_or("tune", mode_name),
            report.summary.folds,
            m.accuracy,
            s.accuracy,
            m.precision,
            s.precision,
            m.recall,
            s.recall,
            m.f1,
            s.f1
        );
        output.cross_validation = Some(report);
    } else {
        let plan = split_plan(&examples, CURVE_TEST_FRACTION, config.seed)?;
        let (train, test) = plan.apply(&examples)?;
        let curve = learning_curve(&initial, &train, &test, &a.fractions, &config.tune, a.repeats)?;
        println!("{:>8}  {:>6}  {:>8}  {:>8}", "fraction", "train", "accuracy", "std");
        for p in &curve {
            println!(
                "{:>8.3}  {:>6}  {:>8.4}  {:>8.4}",
                p.fraction, p.train_size, p.mean_accuracy, p.std_accuracy
            );
        }
        output.learning_curve = Some(curve);
    }

    let mut m = RunManifest::new("eval", args);
    if let Some(path) = &a.prompts_out {
        let report = tune_with_holdout(&initial, &examples, config.validation_fraction, &config.tune)?;
        report.prompts.save(path)?;
        println!(
            "tuned prompts written to {} (best epoch {}, {} steps)",
            path.display(),
            report.best_epoch,
            report.steps
        );
        m.output(path);
    }
    write_json(&a.out, &output)?;

    m.config(&config)?;
    m.seed = Some(config.seed);
    m.input(&a.cache)?;
    m.input(&a.ratings)?;
    for p in [&a.prompts, &a.backend, &a.config].into_iter().flatten() {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write(&manifest_path(cli, sibling(&a.out, ".run.json")))
}

fn mode_name(m: EvalMode) -> &'static str {
    match m {
        EvalMode::ZeroShot => "zero-shot",
        EvalMode::Tune => "tune",
        EvalMode::Probe => "probe",
    }
}

/// Absolute form of `p` for recording in a run directory.
fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

fn scan(cli: &Cli, args: &[String], a: &ScanArgs) -> anyhow::Result<()> {
    let prompts = read_prompts(&a.prompts)?;
    let options = ScanOptions {
        threshold: a.threshold,
        batch_size: a.batch_size,
        workers: cli.workers,
    };
    options.validate()?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut m = RunManifest::new("scan", args);

    // A freshly encoded directory is kept inside the run so the service can
    // serve evidence from it.
    let (cache, cache_path, default_root) = match (&a.cache, &a.input, &a.backend) {
        (Some(path), _, _) => {
            let cache = read_cache(path)?;
            let root = cache.manifest.root.clone();
            m.input(path)?;
            (cache, absolute(path)?, root)
        }
        (None, Some(input), Some(backend)) => {
            let config = EncoderConfig::load(backend)?;
            let encoder = config.build()?;
            let directory = DirectoryOptions {
                include: Vec::new(),
                workers: pool_size(cli),
            };
            let outcome = embed_directory(encoder.as_ref(), input, &directory, None)?;
            for f in &outcome.failures {
                eprintln!("failed: {}: {}", f.id, f.error);
            }
            let path = a.out_dir.join("embeddings.bin");
            outcome.cache.write(&path)?;
            m.input(backend)?;
            m.input(input)?;
            m.output(&path);
            (outcome.cache, PathBuf::from("embeddings.bin"), Some(input.clone()))
        }
        _ => return Err(usage("scan needs --cache, or --input with --backend")),
    };

    let audit_path = a.out_dir.join(AUDIT_FILE);
    let file = File::create(&audit_path).with_context(|| format!("creating {}", audit_path.display()))?;
    let mut writer = JsonlWriter::new(BufWriter::new(file));
    let summary = audit::scan_cache(&cache, &prompts, &options, |r| {
        writer.write(r).map_err(|source| offscan_core::Error::Io {
            path: audit_path.clone(),
            source,
        })
    })?;
    writer.finish()?.flush()?;
    std::fs::write(a.out_dir.join(SUMMARY_FILE), summary.to_json()?)?;
    prompts.save(&a.out_dir.join(PROMPTS_FILE))?;

    let image_root = match a.image_root.as_ref().or(default_root.as_ref()) {
        Some(r) => Some(absolute(r)?),
        None => None,
    };
    let corpus = a.corpus.as_deref().map(absolute).transpose()?;
    let sources = RunSources {
        cache: Some(cache_path),
        image_root,
        corpus,
    };
    write_json(&a.out_dir.join(SOURCES_FILE), &sources)?;
    println!(
        "scanned {}, flagged {} at threshold {}",
        summary.total_scanned, summary.total_flagged, a.threshold
    );

    m.config(&options)?;
    m.input(&a.prompts)?;
    for f in [AUDIT_FILE, SUMMARY_FILE, PROMPTS_FILE, SOURCES_FILE] {
        m.output(&a.out_dir.join(f));
    }
    m.write(&manifest_path(cli, a.out_dir.join(RUN_MANIFEST)))
}

#[derive(Debug, Serialize)]
struct ReportOutput {
    total_scanned: usize,
    total_flagged: usize,
    flagged_by_class: Vec<ClassCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_flagged: Option<Vec<AuditRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_flagged_by_class: Option<Vec<ExemplarGroup>>,
}

/// Per-class counts in summary order: flagged descending, then name.
fn class_table(records: &[AuditRecord]) -> Vec<ClassCount> {
    let mut tally = std::collections::BTreeMap::<&str, (usize, usize)>::new();
    for r in records {
        let e = tally.entry(&r.class_dir).or_default();
        e.0 += 1;
        e.1 += usize::from(r.flagged);
    }
    let mut out: Vec<ClassCount> = tally
        .into_iter()
        .map(|(k, (scanned, flagged))| ClassCount {
            class_dir: k.to_string(),
            scanned,
            flagged,
        })
        .collect();
    out.sort_by(|a, b| b.flagged.cmp(&a.flagged).then_with(|| a.class_dir.cmp(&b.class_dir)));
    out
}

fn check_against_summary(path: &Path, report: &ReportOutput) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let summary: AuditSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if summary.total_scanned != report.total_scanned
        || summary.total_flagged != report.total_flagged
        || summary.flagged_by_class != report.flagged_by_class
    {
        anyhow::bail!(
            "{} disagrees with the audit: summary {} scanned / {} flagged, audit {} / {}",
            path.display(),
            summary.total_scanned,
            summary.total_flagged,
            report.total_scanned,
            report.total_flagged
        );
    }
    Ok(())
}

fn report(cli: &Cli, args: &[String], a: &ReportArgs) -> anyhow::Result<()> {
    let records = load_audit(&a.audit)?;
    let flagged: Vec<AuditRecord> = records.iter().filter(|r| r.flagged).cloned().collect();
    let table = class_table(&records);
    let mut out = ReportOutput {
        total_scanned: records.len(),
        total_flagged: flagged.len(),
        flagged_by_class: table,
        top_flagged: None,
        top_flagged_by_class: None,
    };
    let summary_path = a
        .summary
        .clone()
        .or_else(|| Some(a.audit.parent()?.join(SUMMARY_FILE)).filter(|p| p.exists()));
    if let Some(p) = &summary_path {
        check_against_summary(p, &out)?;
    }

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "{:<32} {:>9} {:>9}", "class", "scanned", "flagged")?;
    for c in &out.flagged_by_class {
        writeln!(w, "{:<32} {:>9} {:>9}", c.class_dir, c.scanned, c.flagged)?;
    }
    writeln!(w, "{:<32} {:>9} {:>9}", "TOTAL", out.total_scanned, out.total_flagged)?;
    writeln!(w)?;
    if a.by_class {
        let groups = top_flagged_by_class(&flagged, a.top);
        for g in &groups {
            writeln!(w, "{}:", g.class_dir)?;
            for (i, r) in g.records.iter().enumerate() {
                writeln!(w, "  {:>3}. {:.6}  {}", i + 1, r.offensive_score, r.id)?;
            }
        }
        out.top_flagged_by_class = Some(groups);
    } else {
        let top = top_flagged(&flagged, a.top);
        writeln!(w, "top {} flagged:", top.len())?;
        for (i, r) in top.iter().enumerate() {
            writeln!(w, "{:>4}. {:.6}  {}", i + 1, r.offensive_score, r.id)?;
        }
        out.top_flagged = Some(top);
    }
    drop(w);

    let mut m = RunManifest::new("report", args);
    m.config(&serde_json::json!({"top": a.top, "by_class": a.by_class}))?;
    m.input(&a.audit)?;
    if let Some(p) = &summary_path {
        m.input(p)?;
    }
    let default_manifest = match &a.out {
        Some(path) => {
            write_json(path, &out)?;
            m.output(path);
            sibling(path, ".run.json")
        }
        None => sibling(&a.audit, ".report.run.json"),
    };
    m.write(&manifest_path(cli, default_manifest))
}

fn serve(cli: &Cli, args: &[String], a: &ServeArgs) -> anyhow::Result<()> {
    let config = ServiceConfig {
        min_verdicts: a.min_verdicts,
        cors_origin: a.cors_origin.clone(),
    };
    let runs = a
        .audit_dirs
        .iter()
        .map(|d| Run::open(d).with_context(|| format!("opening run {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(path) = &a.prompts {
        let prompts = read_prompts(path)?;
        for run in &runs {
            prompts.space().ensure_same(run.registry().active().space())?;
            let mut registry = run.registry_mut();
            let version = registry.add(prompts.clone())?;
            registry.activate(version)?;
            log::info!("run {}: serving {} as version {version}", run.id, path.display());
        }
    }
    let state = AppState::new(runs, config)?;

    let mut m = RunManifest::new("serve", args);
    m.config(&serde_json::json!({
        "listen": a.listen,
        "min_verdicts": a.min_verdicts,
        "cors_origin": a.cors_origin,
    }))?;
    for d in &a.audit_dirs {
        m.input(&d.join(AUDIT_FILE))?;
    }
    m.write(&manifest_path(cli, a.audit_dirs[0].join("serve.run.json")))?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(pool_size(cli))
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.listen)
            .await
            .with_context(|| format!("binding {}", a.listen))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, offscan_service::router(state))
            .with_graceful_shutdown(shutdown_signal())
            .await?;
        // Verdicts are fsynced per write, so nothing is left to flush.
        log::info!("shut down cleanly");
        Ok(())
    })
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {},
        _ = terminate => {},
    }
}

fn project(cli: &Cli, args: &[String], a: &ProjectArgs) -> anyhow::Result<()> {
    let cache = read_cache(&a.cache)?;
    let options = PcaOptions {
        components: a.components,
        ..PcaOptions::default()
    };
    let projection = pca_project(&cache.embeddings(), options)?;
    write_json(&a.out, &projection)?;
    println!(
        "projected {} points; explained variance {:?}",
        projection.points.len(),
        projection.explained_variance
    );
    let mut m = RunManifest::new("project", args);
    m.config(&serde_json::json!({"components": a.components, "normalize_inputs": options.normalize_inputs}))?;
    m.input(&a.cache)?;
    m.output(&a.out);
    m.write(&manifest_path(cli, sibling(&a.out, ".run.json")))
}

fn synth_cmd(cli: &Cli, args: &[String], a: &SynthArgs) -> anyhow::Result<()> {
    let config = SynthConfig {
        images: a.images,
        planted: a.planted,
        classes: a.classes,
        seed: a.seed,
        dimension: a.dimension,
        semantic_weight: a.semantic_weight,
    };
    if config.classes == 0 || config.planted > config.images || config.dimension == 0 {
        return Err(usage("need >= 1 class, dimension >= 1 and planted <= images"));
    }
    std::fs::create_dir_all(&a.out)?;
    let (expected, outputs) = synth::generate(&a.out, &config)?;
    println!(
        "{} images ({} planted) under {}",
        expected.total,
        expected.planted.len(),
        a.out.join(synth::IMAGES_DIR).display()
    );
    let mut m = RunManifest::new("synth", args);
    m.config(&config)?;
    m.seed = Some(a.seed);
    for o in &outputs {
        m.output(o);
    }
    m.write(&manifest_path(cli, a.out.join("synth.run.json")))
}

/// Replays a manifest's arguments from its recorded working directory.
fn rerun(path: &Path) -> anyhow::Result<()> {
    let manifest = RunManifest::read(path)?;
    let cli = crate::parse(&manifest.args).map_err(|e| usage(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(usage("a rerun manifest cannot itself be rerun"));
    }
    if manifest.tool_version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest was written by version {}, this is {}",
            manifest.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    std::env::set_current_dir(&manifest.cwd)
        .with_context(|| format!("entering {}", manifest.cwd.display()))?;
    crate::execute(&cli, &manifest.args)
}
