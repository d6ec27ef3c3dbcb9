//! Command-line front end: generate benchmark data, train a variant,
//! evaluate accuracy and grounding, run ablations and threshold sweeps.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use gge::benchmark::{generate, invert_grounding, load_dataset, save_dataset, summarize_priors};
use gge::config::RunConfig;
use gge::data::{Dataset, Split};
use gge::ensemble::{evaluate, train, EnsembleConfig, RunRecord, Schedule, Variant};
use gge::losses::LossFamily;
use gge::metrics::{cap_for_threshold, cgr_cgw_cgd, sweep_thresholds, MetricsReport, PredictionRecord};
use gge::models::ArchitectureSpec;
use gge::nn::{load_params, save_params};
use gge::report::{
    ablation_row, format_ablation_table, format_metrics_table, read_losses_csv, write_ablation_csv,
    write_losses_csv, write_metrics_csv, write_metrics_json,
};
use gge::{Error, Result};

#[derive(Parser)]
#[command(name = "gge", about = "Greedy gradient ensemble de-bias training toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic changing-prior benchmark splits.
    GenData(GenDataArgs),
    /// Train one variant and write its checkpoints and loss curves.
    Train(TrainArgs),
    /// Evaluate a trained run (or a prediction dump) on one split.
    Eval(EvalArgs),
    /// Train every variant across several seeds and tabulate the results.
    Ablate(AblateArgs),
    /// Evaluate the grounding metrics across the threshold/cap pairs.
    Sweep(SweepArgs),
    /// Re-print the artifacts of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML run configuration; defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the three splits.
    #[arg(long)]
    data_dir: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for checkpoints, losses, and the config snapshot.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    #[arg(long, value_parser = parse_family)]
    loss_family: Option<LossFamily>,
    /// Use the evidence-only base model.
    #[arg(long)]
    vision_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, required_unless_present = "from_dump")]
    run_dir: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_dump")]
    data_dir: Option<PathBuf>,
    /// Split to evaluate (train, test_ood, test_id).
    #[arg(long, default_value = "test_ood", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    cap: Option<usize>,
    /// Flip the grounding masks before scoring (sanity probe: accuracy must
    /// be unchanged, the grounding metrics must not be).
    #[arg(long)]
    invert_grounding: bool,
    /// Write the per-instance prediction records to this JSONL file.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Score a prediction dump instead of running a model.
    #[arg(long)]
    from_dump: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Seeds per variant; run seeds are `training.seed + index`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test_ood", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    invert_grounding: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    Schedule::parse(s).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<LossFamily, String> {
    match s {
        "bce" => Ok(LossFamily::Bce),
        "sxce" => Ok(LossFamily::Sxce),
        other => Err(format!("unknown loss family `{other}` (expected bce or sxce)")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test_ood" => Ok(Split::TestOod),
        "test_id" => Ok(Split::TestId),
        other => Err(format!("unknown split `{other}`")),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn split_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(format!("{}.dat", split.as_str()))
}

fn load_split(data_dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset(&split_path(data_dir, split))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.generator.seed = seed;
    }
    config.generator.validate()?;
    std::fs::create_dir_all(&args.data_dir)?;
    let splits = generate(&config.generator)?;
    for (split, data) in [
        (Split::Train, &splits.train),
        (Split::TestOod, &splits.test_ood),
        (Split::TestId, &splits.test_id),
    ] {
        save_dataset(data, &split_path(&args.data_dir, split))?;
    }
    let snapshot = toml::to_string_pretty(&config.generator)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(args.data_dir.join("generator.toml"), snapshot)?;
    // per-split empirical answer priors, so the planted shift is inspectable
    let mut priors = String::from("split,type_id,class,mass\n");
    for (split, data) in [
        (Split::Train, &splits.train),
        (Split::TestOod, &splits.test_ood),
        (Split::TestId, &splits.test_id),
    ] {
        let table = summarize_priors(data)?;
        for t in 0..table.rows() {
            for (c, &mass) in table.row(t).iter().enumerate() {
                priors.push_str(&format!("{},{t},{c},{mass}\n", split.as_str()));
            }
        }
    }
    std::fs::write(args.data_dir.join("priors.csv"), priors)?;
    println!(
        "wrote {} train / {} test_ood / {} test_id instances to {} (digest {})",
        splits.train.len(),
        splits.test_ood.len(),
        splits.test_id.len(),
        args.data_dir.display(),
        config.generator.digest()
    );
    Ok(())
}

/// Persist everything a later `eval`/`report` call needs, deterministically.
fn save_run(run_dir: &Path, config: &RunConfig, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml()?)?;
    let arch_json = serde_json::to_string_pretty(&record.base_arch)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(run_dir.join("arch.json"), arch_json + "\n")?;
    save_params(&record.base_params, &run_dir.join("base.jsonl"))?;
    for (name, _, params) in &record.branches {
        save_params(params, &run_dir.join(format!("branch_{name}.jsonl")))?;
    }
    write_losses_csv(&run_dir.join("losses.csv"), &record.epoch_losses)?;
    Ok(())
}

fn load_run(run_dir: &Path) -> Result<(RunConfig, ArchitectureSpec, gge::nn::Params)> {
    let config = RunConfig::load(&run_dir.join("config.toml"))?;
    let arch_text = std::fs::read_to_string(run_dir.join("arch.json"))?;
    let arch: ArchitectureSpec =
        serde_json::from_str(&arch_text).map_err(|e| Error::Config(e.to_string()))?;
    let params = load_params(&run_dir.join("base.jsonl"))?;
    Ok((config, arch, params))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.training.seed = seed;
    }
    if let Some(variant) = args.variant {
        config.training.variant = variant;
    }
    if let Some(schedule) = args.schedule {
        config.training.schedule = schedule;
    }
    if let Some(family) = args.loss_family {
        config.training.loss_family = family;
    }
    if args.vision_only {
        config.training.vision_only = true;
    }
    config.validate()?;

    let data = load_split(&args.data_dir, Split::Train)?;
    let record = train(&config.training, config.dims(), &data)?;
    save_run(&args.run_dir, &config, &record)?;
    let last = record.epoch_losses.last();
    println!(
        "trained {} ({} epochs, seed {}) in {:.1}s; final losses: {}",
        config.training.variant.as_str(),
        config.training.epochs,
        config.training.seed,
        record.wall_secs,
        last.map(|l| {
            l.iter()
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_else(|| "none".to_string()),
    );
    Ok(())
}

fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: idx + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (report, records, label) = if let Some(dump_path) = &args.from_dump {
        let records = read_dump(dump_path)?;
        let threshold = args.threshold.unwrap_or(0.2);
        let cap = args.cap.unwrap_or_else(|| cap_for_threshold(threshold));
        let report = cgr_cgw_cgd(&records, threshold, cap)?;
        (report, records, format!("dump:{}", dump_path.display()))
    } else {
        let run_dir = args.run_dir.as_ref().expect("clap enforces run_dir");
        let data_dir = args.data_dir.as_ref().expect("clap enforces data_dir");
        let (config, arch, params) = load_run(run_dir)?;
        let mut data = load_split(data_dir, args.split)?;
        if args.invert_grounding {
            data = invert_grounding(&data);
        }
        let threshold = args.threshold.unwrap_or(config.evaluation.threshold);
        let cap = args.cap.unwrap_or(config.evaluation.cap);
        let (report, records) = evaluate(&arch, &params, &data, threshold, cap)?;
        let suffix = if args.invert_grounding { "_inverted" } else { "" };
        write_metrics_json(
            &run_dir.join(format!("metrics_{}{suffix}.json", args.split.as_str())),
            &report,
        )?;
        (report, records, args.split.as_str().to_string())
    };
    if let Some(dump) = &args.dump {
        write_dump(dump, &records)?;
    }
    print!("{}", format_metrics_table(&[(label, report)]));
    Ok(())
}

/// The ablation grid: every variant, with the greedy two-branch ensemble
/// under both schedules.
fn ablation_grid() -> Vec<(&'static str, Variant, Schedule, bool)> {
    vec![
        ("baseline", Variant::Baseline, Schedule::Tog, false),
        ("gge-d", Variant::GgeD, Schedule::Tog, false),
        ("gge-q-iter", Variant::GgeQ, Schedule::Iter, false),
        ("gge-q-tog", Variant::GgeQ, Schedule::Tog, false),
        ("gge-dq-iter", Variant::GgeDq, Schedule::Iter, false),
        ("gge-dq-tog", Variant::GgeDq, Schedule::Tog, false),
        ("gge-sf", Variant::GgeSf, Schedule::Tog, false),
        ("sum-dq", Variant::SumDq, Schedule::Tog, false),
        ("rubi", Variant::Rubi, Schedule::Tog, false),
        ("inverse-supervision", Variant::InverseSupervision, Schedule::Tog, false),
        ("vision-only", Variant::VisionOnly, Schedule::Tog, false),
    ]
}

/// One training + evaluation pass; returns `(ood acc, id acc, ood cgd)`.
fn ablation_cell(
    config: &RunConfig,
    training: &EnsembleConfig,
    train_data: &Dataset,
    test_ood: &Dataset,
    test_id: &Dataset,
) -> Result<(f64, f64, f64)> {
    let record = train(training, config.dims(), train_data)?;
    let (ood, _) = evaluate(
        &record.base_arch,
        &record.base_params,
        test_ood,
        config.evaluation.threshold,
        config.evaluation.cap,
    )?;
    let (id, _) = evaluate(
        &record.base_arch,
        &record.base_params,
        test_id,
        config.evaluation.threshold,
        config.evaluation.cap,
    )?;
    Ok((ood.accuracy, id.accuracy, ood.cgd))
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    config.validate()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let jobs = args.jobs.max(1);
    let train_data = load_split(&args.data_dir, Split::Train)?;
    let test_ood = load_split(&args.data_dir, Split::TestOod)?;
    let test_id = load_split(&args.data_dir, Split::TestId)?;

    let grid = ablation_grid();
    let mut tasks: Vec<(usize, usize, EnsembleConfig)> = Vec::new();
    for (vi, (_, variant, schedule, vision_only)) in grid.iter().enumerate() {
        for si in 0..args.seeds {
            let training = EnsembleConfig {
                variant: *variant,
                schedule: *schedule,
                vision_only: *vision_only,
                seed: config.training.seed + si,
                ..config.training.clone()
            };
            tasks.push((vi, si as usize, training));
        }
    }

    let queue = Mutex::new(tasks);
    let results: Vec<Mutex<Option<Result<(f64, f64, f64)>>>> =
        (0..grid.len() * args.seeds as usize).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let task = queue.lock().expect("queue lock").pop();
                let Some((vi, si, training)) = task else { break };
                let cell = ablation_cell(&config, &training, &train_data, &test_ood, &test_id);
                *results[vi * args.seeds as usize + si].lock().expect("result lock") = Some(cell);
            });
        }
    });

    let mut rows = Vec::new();
    for (vi, (label, ..)) in grid.iter().enumerate() {
        let mut per_seed = Vec::new();
        for si in 0..args.seeds as usize {
            let cell = results[vi * args.seeds as usize + si]
                .lock()
                .expect("result lock")
                .take()
                .ok_or_else(|| Error::Config(format!("missing result for {label}/{si}")))?;
            per_seed.push(cell?);
        }
        rows.push(ablation_row(label, &per_seed));
    }
    std::fs::create_dir_all(&args.run_dir)?;
    write_ablation_csv(&args.run_dir.join("ablation.csv"), &rows)?;
    print!("{}", format_ablation_table(&rows));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (_, arch, params) = load_run(&args.run_dir)?;
    let mut data = load_split(&args.data_dir, args.split)?;
    if args.invert_grounding {
        data = invert_grounding(&data);
    }
    // records are threshold-independent; score once, sweep after
    let (_, records) = evaluate(&arch, &params, &data, 0.2, 4)?;
    let thresholds = [0.1, 0.2, 0.3, 0.4];
    let reports = sweep_thresholds(&records, &thresholds)?;
    write_metrics_csv(
        &args.run_dir.join(format!("sweep_{}.csv", args.split.as_str())),
        &reports,
    )?;
    let rows: Vec<(String, MetricsReport)> = reports
        .into_iter()
        .map(|r| (format!("t={} cap={}", r.threshold, r.cap), r))
        .collect();
    print!("{}", format_metrics_table(&rows));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let losses_path = args.run_dir.join("losses.csv");
    if losses_path.exists() {
        let losses = read_losses_csv(&losses_path)?;
        if let Some(last) = losses.last() {
            let line = last
                .iter()
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            println!("epochs: {}  final losses: {line}", losses.len());
        }
    }
    let mut rows = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(&args.run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("metrics_") && n.ends_with(".json"))
        .collect();
    names.sort();
    for name in names {
        let report = gge::report::read_metrics_json(&args.run_dir.join(&name))?;
        let label = name
            .trim_start_matches("metrics_")
            .trim_end_matches(".json")
            .to_string();
        rows.push((label, report));
    }
    if rows.is_empty() {
        println!("no metrics files in {}", args.run_dir.display());
    } else {
        print!("{}", format_metrics_table(&rows));
    }
    Ok(())
}
