// SPDX-License-Identifier: MIT OR Apache-2.0

//! `planprobe` command-line driver.
//!
//! Exit status: 0 on success, 1 when a check ran and found problems
//! (`validate` findings, a failing `selfcheck`), 2 on usage or fatal errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use planprobe::config::{config_hash, RunConfig};
use planprobe::dataset::{build_dataset, plan_augmentation, LabelSet, LabeledExample, DEFAULT_AUGMENTS, DEFAULT_MARGIN};
use planprobe::labeling::{
    load_verbalized, AnswerPatterns, LabelContext, LabelValue, Lexicon, StancePatterns, TaskDefinition, TaskId,
    WhitespaceTokenizer,
};
use planprobe::probe::ProbeMetadata;
use planprobe::report::{self, DataHash, Heatmap, RunManifest, SweepReport};
use planprobe::selfcheck;
use planprobe::store::{self, DatasetReader, ValidationStatus};
use planprobe::sweep::{self, SweepInput};
use planprobe::synth::{self, PlantSpec};
use planprobe::{MetricName, ProbeModel, TaskKind};

#[derive(Parser)]
#[command(name = "planprobe", version, about = "Probe prompt-time activations for response attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an activation file and report every problem found.
    Validate {
        file: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Label every record of an activation file.
    Label {
        #[arg(long)]
        task: TaskId,
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory with optional `animals.txt`, `answer_patterns.txt` and
        /// `stance_patterns.txt` overriding the bundled defaults.
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Label truncated records with the full response length.
        #[arg(long)]
        total_length: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, balance and split a label set.
    Build {
        #[arg(long)]
        labels: PathBuf,
        /// TOML file with a `[split]` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the layer x hidden-size x seed grid described by a run config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `[run] output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the grid's hidden sizes.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        /// Override the grid's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Apply the best probes of a sweep to another activation file.
    Cross {
        /// Sweep output directory.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Labels of the target; defaults to `<target>.labels.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric per position segment of a position-indexed file.
    Dynamics {
        #[arg(long, required = true)]
        probe: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = sweep::DEFAULT_SEGMENTS)]
        segments: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a probe against the model's verbalized self-estimates.
    Verbalized {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// JSON array of `{example_id, text}`.
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long, value_parser = parse_metric, default_value = "spearman")]
        metric: MetricName,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Truncation offsets for the exporter's augmented records.
    Augment {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AUGMENTS)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted-signal dataset with its truth and labels.
    Plant {
        /// TOML plant spec; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the spec's noise and label seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient check and metric oracle comparison.
    Selfcheck {
        /// Oracle comparison cases.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Combine sweep outputs into a table, JSON summary or heatmap.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

fn parse_metric(s: &str) -> std::result::Result<MetricName, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| "expected pearson, spearman, kendall, macro_f1 or accuracy".to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate { file, json } => validate(&file, json),
        Command::Label {
            task,
            input,
            patterns,
            total_length,
            out,
        } => label(task, &input, patterns.as_deref(), total_length, &out),
        Command::Build { labels, spec, out } => build(&labels, spec.as_deref(), &out),
        Command::Sweep {
            config,
            out,
            hidden,
            seeds,
            epochs,
        } => run_sweep(&config, out, hidden, seeds, epochs),
        Command::Cross {
            source,
            target,
            labels,
            out,
        } => cross(&source, &target, labels, out.as_deref()),
        Command::Dynamics {
            probe,
            input,
            labels,
            segments,
            out,
        } => dynamics(&probe, &input, &labels, segments, out.as_deref()),
        Command::Verbalized {
            probe,
            input,
            labels,
            estimates,
            metric,
            out,
        } => verbalized(&probe, &input, &labels, &estimates, metric, out.as_deref()),
        Command::Augment {
            labels,
            n,
            margin,
            seed,
            out,
        } => {
            let set = LabelSet::load(&labels)?;
            emit(&plan_augmentation(&set.examples, n, margin, seed), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Plant { spec, seed, out } => plant(spec.as_deref(), seed, &out),
        Command::Selfcheck { cases } => self_check(cases),
        Command::Report { results, format, out } => report_cmd(&results, format, out.as_deref()),
    }
}

/// Pretty JSON to a file or stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => report::save_json(p, value)?,
        None => print_out(&(serde_json::to_string_pretty(value)? + "\n"))?,
    }
    Ok(())
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn print_out(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn validate(file: &Path, json: bool) -> Result<ExitCode> {
    let r = store::validate(file);
    if json {
        print_out(&(serde_json::to_string_pretty(&r)? + "\n"))?;
    } else {
        let mut text = String::new();
        for f in &r.findings {
            let id = f.example_id.map(|i| format!(" example {i}")).unwrap_or_default();
            let at = f.offset.map(|o| format!(" @{o}")).unwrap_or_default();
            text += &format!("{:?}{id}{at}: {}\n", f.severity, f.message);
        }
        text += &format!("{}: {:?}, {} records checked\n", file.display(), r.status, r.records_checked);
        print_out(&text)?;
    }
    Ok(ExitCode::from(match r.status {
        ValidationStatus::Clean => 0,
        ValidationStatus::Findings => 1,
        ValidationStatus::Fatal => 2,
    }))
}

fn label(task: TaskId, input: &Path, patterns: Option<&Path>, total_length: bool, out: &Path) -> Result<ExitCode> {
    let mut ctx = LabelContext::new(TaskDefinition::new(task));
    ctx.remaining_length = !total_length;
    if let Some(dir) = patterns {
        let f = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        if let Some(p) = f("animals.txt") {
            ctx.lexicon = Lexicon::load(&p)?;
        }
        if let Some(p) = f("answer_patterns.txt") {
            ctx.answers = AnswerPatterns::load(&p)?;
        }
        if let Some(p) = f("stance_patterns.txt") {
            ctx.stances = StancePatterns::load(&p)?;
        }
    }
    let set = LabelSet::from_activations(input, ctx, &WhitespaceTokenizer::default())?;
    set.save(out)?;
    let excluded: usize = set.exclusions().values().sum();
    for (reason, n) in set.exclusions() {
        eprintln!("excluded {reason:?}: {n}");
    }
    println!("{} records labeled, {} excluded", set.examples.len(), excluded);
    let mut m = RunManifest::new("label", &config_hash(&(task.as_str(), total_length)), vec![DataHash::of(input)?]);
    m.outputs.push(out.display().to_string());
    report::save_json(&sibling(out, ".run_manifest.json"), &m)?;
    Ok(ExitCode::SUCCESS)
}

/// `<path><suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(spec: Option<&Path>) -> Result<RunConfig> {
    Ok(match spec {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn build(labels: &Path, spec: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let config = load_config(spec)?;
    let set = LabelSet::load(labels)?;
    let options = planprobe::dataset::BuildOptions {
        kind: set.kind,
        balance: config.split.balance && matches!(set.kind, TaskKind::Classification { .. }),
        ..config.build_options()
    };
    let built = build_dataset(set.examples, &options)?;
    built.manifest(&options, Some(config.hash())).save(out)?;
    eprintln!("{}", serde_json::to_string(&built.report)?);
    println!(
        "{} examples in {}/{}/{} groups",
        built.examples.len(),
        built.assignment.train.len(),
        built.assignment.val.len(),
        built.assignment.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(
    config_path: &Path,
    out: Option<PathBuf>,
    hidden: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    epochs: Option<usize>,
) -> Result<ExitCode> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(h) = hidden {
        config.grid.hidden_sizes = h;
    }
    if let Some(s) = seeds {
        config.grid.seeds = s;
    }
    if let Some(e) = epochs {
        config.training.epochs = e;
    }
    config.validate()?;
    let activations = config
        .data
        .activations
        .clone()
        .context("[data] activations is required")?;
    let out = out.unwrap_or_else(|| config.run.output_dir.clone());
    fs::create_dir_all(out.join("probes")).with_context(|| format!("creating {}", out.display()))?;

    let header = DatasetReader::open(&activations)?.header().clone();
    let mut data = vec![DataHash::of(&activations)?];
    let set = match &config.data.labels {
        Some(p) => {
            data.push(DataHash::of(p)?);
            LabelSet::load(p)?
        }
        None => LabelSet::from_activations(&activations, config.label_context()?, &WhitespaceTokenizer::default())?,
    };
    let options = planprobe::dataset::BuildOptions {
        kind: set.kind,
        balance: config.split.balance && matches!(set.kind, TaskKind::Classification { .. }),
        ..config.build_options()
    };
    let built = build_dataset(set.examples.clone(), &options)?;
    let hash = config.hash();
    let split_path = out.join("split.json");
    built.manifest(&options, Some(hash.clone())).save(&split_path)?;

    let grid = config.grid(header.layer_count as usize);
    let input = SweepInput::from_built(&activations, &built, set.kind);
    let result = sweep::grid_search(&input, &grid)?;

    let mut outputs = vec![split_path];
    let data_sha = data[0].sha256.clone();
    for (seed, model) in result.best_seeds.iter().zip(&result.best_models) {
        let p = out.join("probes").join(format!("seed-{seed}.bin"));
        let meta = ProbeMetadata {
            config: grid.probe_config(set.kind, model.layer, model.hidden_size, *seed),
            best_epoch: model.best_epoch,
            data_sha256: Some(data_sha.clone()),
            toolkit_version: planprobe::VERSION.to_string(),
        };
        model.save(&p, &meta)?;
        outputs.push(p);
    }

    let csv = out.join("results.csv");
    report::write_csv(&csv, &report::result_rows(&set.task, &header.model_name, &result))?;
    let layerwise = sweep::layerwise_curve(&result);
    let label = format!("{} / {}", header.model_name, set.task);
    let heat = out.join("heatmap.svg");
    Heatmap::layerwise(&format!("{} by layer", set.task), &[(label, &layerwise)])?.save(&heat)?;
    let grid_svg = out.join("grid.svg");
    Heatmap::grid(&format!("{} layer x hidden size", set.task), &result).save(&grid_svg)?;
    let failed = result.failed_cells().count();
    for c in result.failed_cells() {
        eprintln!(
            "cell layer {} hidden {} seed {} failed: {}",
            c.layer,
            c.hidden_size,
            c.seed,
            c.error.as_deref().unwrap_or("unknown")
        );
    }
    let summary = SweepReport {
        toolkit_version: planprobe::VERSION.to_string(),
        config_hash: hash.clone(),
        data: data.clone(),
        task: set.task.clone(),
        model: header.model_name.clone(),
        hidden_sizes: sweep::hidden_size_curve(&result).ok(),
        layerwise,
        result,
        failed_cells: failed,
    };
    let json = out.join("report.json");
    report::save_json(&json, &summary)?;
    outputs.extend([csv, json, heat, grid_svg]);

    let mut manifest = RunManifest::new("sweep", &hash, data);
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    report::save_json(&out.join("run_manifest.json"), &manifest)?;

    let selected = summary
        .result
        .best_test
        .iter()
        .find(|r| r.name == summary.result.selection_metric);
    match (&summary.result.best_cell, selected) {
        (Some(b), Some(t)) => println!(
            "best: layer {} hidden {} (val {:.4}), test {} {:.4}",
            b.layer, b.hidden_size, b.val, t.name, t.value
        ),
        _ => println!("no grid cell trained successfully"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Best-cell probes of a sweep directory, in seed order.
fn load_probes(dir: &Path) -> Result<Vec<ProbeModel>> {
    let summary: SweepReport = report::load_json(&dir.join("report.json"))?;
    let probes = summary
        .result
        .best_seeds
        .iter()
        .map(|s| ProbeModel::load(&dir.join("probes").join(format!("seed-{s}.bin"))))
        .collect::<planprobe::Result<Vec<_>>>()?;
    if probes.is_empty() {
        bail!("{} has no trained probes", dir.display());
    }
    Ok(probes)
}

fn labeled(set: &LabelSet) -> Vec<&LabeledExample> {
    set.examples.iter().filter(|e| e.value().is_some()).collect()
}

#[derive(Serialize)]
struct CrossReport {
    source_task: String,
    target: String,
    target_task: String,
    layer: usize,
    hidden_size: usize,
    n: usize,
    metrics: Vec<planprobe::MetricReport>,
}

fn cross(source: &Path, target: &Path, labels: Option<PathBuf>, out: Option<&Path>) -> Result<ExitCode> {
    let summary: SweepReport = report::load_json(&source.join("report.json"))?;
    let probes = load_probes(source)?;
    let labels = labels.unwrap_or_else(|| sibling(target, ".labels.json"));
    let set = LabelSet::load(&labels).with_context(|| format!("target labels {}", labels.display()))?;
    if set.kind != summary.result.kind {
        bail!(planprobe::Error::Compatibility(format!(
            "source task {} ({:?}) and target task {} ({:?}) differ in kind",
            summary.task, summary.result.kind, set.task, set.kind
        )));
    }
    let members = labeled(&set);
    let records: Vec<usize> = members.iter().map(|e| e.record_index).collect();
    let targets = sweep::targets_for(&members, set.kind)?;
    let metrics = sweep::cross_dataset_eval(&probes, target, &records, &targets, set.kind)?;
    emit(
        &CrossReport {
            source_task: summary.task,
            target: target.display().to_string(),
            target_task: set.task,
            layer: probes[0].layer,
            hidden_size: probes[0].hidden_size,
            n: records.len(),
            metrics,
        },
        out,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn dynamics(probes: &[PathBuf], input: &Path, labels: &Path, segments: usize, out: Option<&Path>) -> Result<ExitCode> {
    let models = probes
        .iter()
        .map(|p| ProbeModel::load(p))
        .collect::<planprobe::Result<Vec<_>>>()?;
    let set = LabelSet::load(labels)?;
    let rows = sweep::dynamics_eval(&models, input, &set.examples, segments, set.kind)?;
    for r in rows.iter().filter(|r| r.low_n) {
        eprintln!("segment {} has only {} examples", r.segment, r.n);
    }
    emit(&rows, out)?;
    Ok(ExitCode::SUCCESS)
}

fn verbalized(
    probe: &Path,
    input: &Path,
    labels: &Path,
    estimates: &Path,
    metric: MetricName,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let model = ProbeModel::load(probe)?;
    let set = LabelSet::load(labels)?;
    let members: Vec<LabeledExample> = labeled(&set).into_iter().cloned().collect();
    let truth = members
        .iter()
        .filter_map(|e| {
            let v = match e.value()? {
                LabelValue::Real(v) => v,
                LabelValue::Class(c) => c as f64,
            };
            Some((e.example_id, v))
        })
        .collect();
    let predicted = sweep::predict_examples(&model, input, &members)?;
    let verbal = load_verbalized(estimates)?;
    emit(&sweep::self_estimate_compare(&truth, &predicted, &verbal, metric)?, out)?;
    Ok(ExitCode::SUCCESS)
}

fn plant(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let mut spec = match spec {
        Some(p) => PlantSpec::parse_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => PlantSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let truth = synth::write_planted(&spec, out)?;
    let labels = sibling(out, ".labels.json");
    truth.label_set(Some(store::sha256_file(out)?)).save(&labels)?;
    println!(
        "wrote {} records ({} layers, d = {}, planted layer {}) to {}",
        truth.labels.len(),
        spec.layers,
        spec.dim,
        spec.planted_layer,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn self_check(cases: usize) -> Result<ExitCode> {
    let mut ok = true;
    let t = std::time::Instant::now();
    let eq = selfcheck::oracle_equivalence(cases, 64, 0)?;
    let pass = eq.worst() <= 1e-9 && eq.flag_mismatches == 0;
    ok &= pass;
    println!(
        "{} metric oracles: {} cases, max |diff| {:.3e}, {} flag mismatches ({:.2}s)",
        verdict(pass),
        eq.cases,
        eq.worst(),
        eq.flag_mismatches,
        t.elapsed().as_secs_f64()
    );
    for c in selfcheck::gradient_suite(16, &[1, 16, 1024], 5, 8, 0)? {
        let pass = c.report.max_relative_error <= 1e-4 && c.report.checked > 0;
        ok &= pass;
        println!(
            "{} gradient hidden {:>4} {:?}: max rel err {:.3e} over {} params ({} kinks skipped)",
            verdict(pass),
            c.hidden_size,
            c.kind,
            c.report.max_relative_error,
            c.report.checked,
            c.report.skipped_kinks
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn report_cmd(dirs: &[PathBuf], format: Format, out: Option<&Path>) -> Result<ExitCode> {
    let reports = dirs
        .iter()
        .map(|d| report::load_json::<SweepReport>(&d.join("report.json")).with_context(|| format!("{}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    match format {
        Format::Csv => {
            let rows: Vec<_> = reports
                .iter()
                .flat_map(|r| report::result_rows(&r.task, &r.model, &r.result))
                .collect();
            match out {
                Some(p) => report::write_csv(p, &rows)?,
                None => {
                    let mut buf = Vec::new();
                    report::write_csv_to(&mut buf, &rows)?;
                    print_out(&String::from_utf8(buf)?)?;
                }
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Summary<'a> {
                task: &'a str,
                model: &'a str,
                best_cell: Option<sweep::BestCell>,
                best_test: &'a [planprobe::MetricReport],
                layerwise: &'a sweep::LayerwiseCurve,
                hidden_sizes: Option<&'a sweep::HiddenSizeCurve>,
            }
            let s: Vec<Summary> = reports
                .iter()
                .map(|r| Summary {
                    task: &r.task,
                    model: &r.model,
                    best_cell: r.result.best_cell,
                    best_test: &r.result.best_test,
                    layerwise: &r.layerwise,
                    hidden_sizes: r.hidden_sizes.as_ref(),
                })
                .collect();
            emit(&s, out)?;
        }
        Format::Svg => {
            let rows: Vec<(String, &sweep::LayerwiseCurve)> = reports
                .iter()
                .map(|r| (format!("{} / {}", r.model, r.task), &r.layerwise))
                .collect();
            let svg = Heatmap::layerwise("layer-wise test metric", &rows)?.to_svg();
            match out {
                Some(p) => fs::write(p, svg).with_context(|| format!("writing {}", p.display()))?,
                None => print_out(&svg)?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use planprobe::HIDDEN_SIZES;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn hidden_sizes_are_listed() {
        assert_eq!(HIDDEN_SIZES.len(), 11);
        assert_eq!(parse_metric("macro_f1"), Ok(MetricName::MacroF1));
        assert!(parse_metric("auc").is_err());
    }
}
