use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use firmcascade::data::{gen_synthetic, load_csv, CsvSchema, Dataset, SyntheticSpec};
use firmcascade::experiment::{
    alpha_sensitivity, compare_families, default_alpha_set, run_experiment_with, write_tables, ExperimentConfig,
    ExperimentReport, RunOptions,
};
use firmcascade::inference::{predict_all, time_harness, Metrics};
use firmcascade::training::{train, TrainedModel};
use firmcascade::{CascadeArchitecture, CascadeError, Gating};

#[derive(Parser)]
#[command(name = "firmcascade", version, about = "Train and evaluate firm detection cascades")]
struct Cli {
    /// Overrides the seed of the experiment config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded and skip wall-time measurement, so that outputs
    /// are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write one JSON hard-decision trace per instance to this file.
    #[arg(long, global = true)]
    trace_log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the whole dataset of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Cost weight; defaults to the first entry of the config's grid.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Hard-mode evaluation of a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Timing repetitions; 0 skips timing.
        #[arg(long, default_value_t = 0)]
        timing: usize,
    },
    /// Cross-validated lambda sweep; writes report.json and CSV tables.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Also run the soft family on the same folds and compare.
        #[arg(long)]
        compare_soft: bool,
    },
    /// One sweep per gating alpha.
    AlphaStudy {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated; `inf` selects hard gating. Defaults to
        /// 2^-2 .. 2^10 and inf.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<String>>,
    },
    /// Write a synthetic imbalanced dataset and its CSV schema.
    GenData {
        #[arg(long, default_value_t = 3836)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        positive_rate: f64,
        #[arg(long, default_value_t = 2)]
        cheap_dim: usize,
        #[arg(long, default_value_t = 35)]
        expensive_dim: usize,
        #[arg(long, default_value_t = 0.8)]
        cheap_reject_rate: f64,
    },
    /// Check an architecture, experiment, CSV schema or model file.
    ValidateConfig {
        file: PathBuf,
        /// Feature count to check architecture feature indices against.
        #[arg(long)]
        features: Option<usize>,
    },
    /// Summarize a report and rewrite its CSV tables.
    Report { report: PathBuf },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long, requires = "schema", conflicts_with = "config")]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Take the dataset from an experiment config instead.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy)]
enum Exit {
    Config = 1,
    Data = 2,
    Training = 3,
}

struct Failure {
    exit: Exit,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn classify(e: &CascadeError) -> Exit {
    match e {
        CascadeError::Config(_) | CascadeError::Schema(_) | CascadeError::Structural(_) | CascadeError::Json(_) => {
            Exit::Config
        }
        CascadeError::Training { .. } => Exit::Training,
        CascadeError::Input(_) | CascadeError::Degenerate(_) | CascadeError::Io { .. } => Exit::Data,
    }
}

trait Context<T> {
    /// Classifies by error variant.
    fn auto(self) -> CliResult<T>;
    /// Classifies as `exit` regardless of variant.
    fn or_exit(self, exit: Exit) -> CliResult<T>;
}

impl<T> Context<T> for firmcascade::Result<T> {
    fn auto(self) -> CliResult<T> {
        self.map_err(|e| Failure { exit: classify(&e), error: e.into() })
    }

    fn or_exit(self, exit: Exit) -> CliResult<T> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { exit: Exit::Data, error: anyhow::anyhow!("{}: {e}", path.display()) }
}

fn main() -> ExitCode {
    // usage errors count as configuration errors, keeping 2 for bad data
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Exit::Config as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train { config, lambda } => cmd_train(cli, config, *lambda),
        Command::Evaluate { model, data, timing } => cmd_evaluate(cli, model, data, *timing),
        Command::Sweep { config, compare_soft } => cmd_sweep(cli, config, *compare_soft),
        Command::AlphaStudy { config, alphas } => cmd_alpha(cli, config, alphas.as_deref()),
        Command::GenData { n, positive_rate, cheap_dim, expensive_dim, cheap_reject_rate } => {
            let spec = SyntheticSpec {
                n: *n,
                positive_rate: *positive_rate,
                cheap_dim: *cheap_dim,
                expensive_dim: *expensive_dim,
                cheap_reject_rate: *cheap_reject_rate,
                seed: cli.seed.unwrap_or(0),
            };
            cmd_gen_data(cli, &spec)
        }
        Command::ValidateConfig { file, features } => cmd_validate(file, *features),
        Command::Report { report } => cmd_report(cli, report),
    }
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load_config(cli: &Cli, path: &Path) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).or_exit(Exit::Config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.timing_repetitions = 0;
    }
    cfg.validate().or_exit(Exit::Config)?;
    Ok(cfg)
}

fn run_options(cli: &Cli) -> RunOptions<'_> {
    RunOptions { parallel: !cli.deterministic, partial_dir: None }
}

fn cmd_train(cli: &Cli, config: &Path, lambda: Option<f64>) -> CliResult<()> {
    let cfg = load_config(cli, config)?;
    let mut arch = cfg.load_architecture().or_exit(Exit::Config)?;
    let data = cfg.load_dataset().or_exit(Exit::Data)?;
    arch.ensure_valid(data.n_features()).or_exit(Exit::Config)?;
    let gating = cfg.alpha.unwrap_or(arch.gating);
    let (trained_gating, note) = firmcascade::experiment::training_gating(gating, cfg.family);
    if let Some(note) = note {
        eprintln!("note: {note}");
    }
    arch.gating = trained_gating;
    let lambda = lambda.unwrap_or(cfg.lambda_grid[0]);
    let train_cfg = cfg.train_config(lambda, trained_gating);
    train_cfg.validate().or_exit(Exit::Config)?;
    let model = train(&arch.with_resolved_costs(), &data, &train_cfg).auto()?;
    let path = out_dir(cli, Some(&cfg)).join("model.json");
    write_file(&path, &model.to_json_string())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_data(cli: &Cli, args: &DataArgs) -> CliResult<Dataset> {
    match (&args.data, &args.schema, &args.config) {
        (Some(data), Some(schema), None) => {
            let schema = CsvSchema::load(schema).or_exit(Exit::Config)?;
            load_csv(data, &schema).or_exit(Exit::Data)
        }
        (None, None, Some(config)) => load_config(cli, config)?.load_dataset().or_exit(Exit::Data),
        _ => {
            Err(Failure { exit: Exit::Config, error: anyhow::anyhow!("give either --data with --schema, or --config") })
        }
    }
}

fn cmd_evaluate(cli: &Cli, model_path: &Path, args: &DataArgs, timing: usize) -> CliResult<()> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| Failure { exit: Exit::Config, error: anyhow::anyhow!("{}: {e}", model_path.display()) })?;
    let model = TrainedModel::from_json_str(&text).or_exit(Exit::Config)?;
    let data = load_data(cli, args)?;
    model.arch.ensure_valid(data.n_features()).or_exit(Exit::Config)?;
    let traces = predict_all(&model, &data).auto()?;
    let metrics = Metrics::from_traces(&model.arch, data.labels(), &traces).auto()?;
    if let Some(log) = &cli.trace_log {
        write_traces(log, &traces)?;
    }
    let mut summary = serde_json::json!({ "metrics": metrics });
    if timing > 0 && !cli.deterministic {
        let t = time_harness(&model, &data, timing).auto()?;
        summary["timing"] = serde_json::to_value(t).expect("timing serializes");
    }
    let text = serde_json::to_string_pretty(&summary).expect("metrics serialize");
    if let Some(dir) = &cli.out {
        write_file(&dir.join("metrics.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn write_traces(path: &Path, traces: &[firmcascade::inference::HardDecisionTrace]) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (row, t) in traces.iter().enumerate() {
        let mut v = serde_json::to_value(t).expect("trace serializes");
        v["row"] = row.into();
        writeln!(w, "{v}").map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn print_curve(report: &ExperimentReport) {
    println!("family={} alpha={:?}", report.config.family, report.trained_gating);
    println!("{:>10} {:>9} {:>9} {:>10} {:>8}", "lambda", "accuracy", "f1", "mean_cost", "stages");
    for (i, r) in report.curve.rows.iter().enumerate() {
        println!(
            "{:>10} {:>9.4} {:>9.4} {:>10.3} {:>8.3}{}",
            r.lambda,
            r.accuracy.mean,
            r.f1.mean,
            r.mean_cost.mean,
            r.mean_stages.mean,
            if i == report.curve.best { "  *" } else { "" }
        );
    }
}

fn cmd_sweep(cli: &Cli, config: &Path, compare_soft: bool) -> CliResult<()> {
    let cfg = load_config(cli, config)?;
    let out = out_dir(cli, Some(&cfg));
    if compare_soft {
        let cmp = compare_families(&cfg, run_options(cli)).auto()?;
        cmp.firm.write_to(&out.join("firm")).auto()?;
        cmp.soft.write_to(&out.join("soft")).auto()?;
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "firm_best": cmp.firm.best,
            "soft_best": cmp.soft.best,
            "cost_test": cmp.cost_test,
            "accuracy_test": cmp.accuracy_test,
            "notes": cmp.notes,
        }))
        .expect("comparison serializes");
        write_file(&out.join("comparison.json"), &text)?;
        print_curve(&cmp.firm);
        print_curve(&cmp.soft);
        println!("{text}");
        return Ok(());
    }
    let opts = RunOptions { partial_dir: Some(&out), ..run_options(cli) };
    let report = run_experiment_with(&cfg, opts).auto()?;
    report.write_to(&out).auto()?;
    let _ = std::fs::remove_file(out.join("partial.json"));
    print_curve(&report);
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn parse_alpha(s: &str) -> CliResult<Gating> {
    let g = match s.trim() {
        "inf" | "infinity" => Ok(Gating::Hard),
        other => other
            .parse::<f64>()
            .map_err(|e| CascadeError::Config(format!("bad alpha {other:?}: {e}")))
            .and_then(Gating::new),
    };
    g.or_exit(Exit::Config)
}

fn cmd_alpha(cli: &Cli, config: &Path, alphas: Option<&[String]>) -> CliResult<()> {
    let cfg = load_config(cli, config)?;
    let alphas = match alphas {
        Some(list) => list.iter().map(|s| parse_alpha(s)).collect::<CliResult<Vec<_>>>()?,
        None => default_alpha_set(),
    };
    let study = alpha_sensitivity(&cfg, &alphas, run_options(cli)).auto()?;
    let out = out_dir(cli, Some(&cfg));
    write_file(&out.join("alpha.json"), &serde_json::to_string_pretty(&study).expect("study serializes"))?;
    let mut csv = String::from("alpha,trained_alpha,best_lambda,accuracy,accuracy_se,mean_cost,mean_cost_se\n");
    println!("{:>8} {:>9} {:>10} {:>10}", "alpha", "accuracy", "mean_cost", "lambda");
    for r in &study.rows {
        let name = |g: Gating| if g.is_hard() { "inf".to_string() } else { g.alpha().to_string() };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name(r.alpha),
            name(r.trained_alpha),
            r.best_lambda,
            r.accuracy.mean,
            r.accuracy.std_error,
            r.mean_cost.mean,
            r.mean_cost.std_error
        ));
        println!("{:>8} {:>9.4} {:>10.3} {:>10}", name(r.alpha), r.accuracy.mean, r.mean_cost.mean, r.best_lambda);
    }
    write_file(&out.join("alpha.csv"), &csv)?;
    for n in &study.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn cmd_gen_data(cli: &Cli, spec: &SyntheticSpec) -> CliResult<()> {
    let data = gen_synthetic(spec).or_exit(Exit::Config)?;
    let out = out_dir(cli, None);
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let csv = out.join("synthetic.csv");
    data.write_csv(&csv).auto()?;
    let schema = CsvSchema::binary(firmcascade::data::ColumnRef::Name("label".into()));
    write_file(&out.join("schema.json"), &serde_json::to_string_pretty(&schema).expect("schema serializes"))?;
    println!("wrote {} rows ({} positive) to {}", data.len(), data.positive_count(), csv.display());
    Ok(())
}

fn cmd_validate(file: &Path, features: Option<usize>) -> CliResult<()> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| Failure { exit: Exit::Config, error: anyhow::anyhow!("{}: {e}", file.display()) })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure { exit: Exit::Config, error: anyhow::anyhow!("{}: {e}", file.display()) })?;
    let has = |k: &str| value.get(k).is_some();
    let kind = if has("architecture") && has("dataset") {
        let cfg = ExperimentConfig::load(file).or_exit(Exit::Config)?;
        cfg.validate().or_exit(Exit::Config)?;
        let arch = cfg.load_architecture().or_exit(Exit::Config)?;
        check_arch(&arch, features)?;
        "experiment config"
    } else if has("arch") && has("params") {
        TrainedModel::from_json_str(&text).or_exit(Exit::Config)?;
        "model"
    } else if has("label_column") {
        CsvSchema::from_json_str(&text).or_exit(Exit::Config)?;
        "csv schema"
    } else {
        let arch = CascadeArchitecture::from_json_str(&text).or_exit(Exit::Config)?;
        check_arch(&arch, features)?;
        "architecture"
    };
    println!("{}: valid {kind}", file.display());
    Ok(())
}

fn check_arch(arch: &CascadeArchitecture, features: Option<usize>) -> CliResult<()> {
    // Without a feature count, only indices beyond any plausible row are
    // reported.
    let dim = features.unwrap_or(usize::MAX / 2);
    if let Err(violations) = arch.validate(dim) {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure {
            exit: Exit::Config,
            error: anyhow::anyhow!("{} violation(s):\n  {}", lines.len(), lines.join("\n  ")),
        });
    }
    Ok(())
}

fn cmd_report(cli: &Cli, path: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure { exit: Exit::Config, error: anyhow::anyhow!("{}: {e}", path.display()) })?;
    let report = ExperimentReport::from_json_str(&text).or_exit(Exit::Config)?;
    print_curve(&report);
    let b = &report.best;
    println!(
        "best: lambda={} accuracy={:.4}±{:.4} mean_cost={:.3}±{:.3}",
        b.lambda, b.accuracy.mean, b.accuracy.std_error, b.mean_cost.mean, b.mean_cost.std_error
    );
    for c in &b.stage_counts {
        println!("  device {} stage {}: executed {} passed {}", c.device, c.stage, c.executed, c.passed);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        write_tables(&report.curve, dir).auto()?;
    }
    Ok(())
}
