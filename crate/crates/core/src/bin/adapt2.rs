use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use adapt2::adapt::{self, FinetuneConfig, Mode, Protocol, ReplayConfig};
use adapt2::data::{self, Dataset, NormStats, SplitPlan, SynthSpec, Window};
use adapt2::harness::{self, ExperimentPlan, Preset, RunClock};
use adapt2::metrics::MetricReport;
use adapt2::models::{ModelBundle, Origin};
use adapt2::pretext::{self, Pretext, PretextKind};
use adapt2::{Error, Result};

#[derive(Parser)]
#[command(name = "adapt2", version, about = "Few-shot adaptation of self-supervised sensing models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Simclr,
    Cpc,
    MultiTask,
}

impl From<KindArg> for PretextKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Simclr => PretextKind::SimClr,
            KindArg::Cpc => PretextKind::Cpc,
            KindArg::MultiTask => PretextKind::MultiTask,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    ReplayOnly,
    MetaOnly,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::ReplayOnly => Mode::ReplayOnly,
            ModeArg::MetaOnly => Mode::MetaOnly,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    LinearEval,
    EndToEnd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    All,
    PretrainTrain,
    PretrainVal,
    Shots,
    Val,
    Test,
}

#[derive(clap::Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Plan whose `pretext` and `meta` sections configure training.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON); printed to stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain dataset.
    Synth {
        /// JSON synthetic spec; the four-domain desk set when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        windows_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the split for one held-out target domain.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain self-supervised pre-training on the split's source windows.
    Pretrain(PretrainArgs),
    /// Self-supervised meta-training on the split's source windows.
    MetaPretrain(PretrainArgs),
    /// Pretext replay (per mode) and fine-tuning on the split's shots.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long)]
        replay_steps: Option<usize>,
        #[arg(long)]
        replay_lr: Option<f32>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a classifier on the split's shots, no replay.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "linear-eval")]
        protocol: ProtocolArg,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Leave-one-domain-out sweep; writes results.json and run_info.json.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// In-domain versus out-of-domain pre-training study.
    ShiftStudy {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write raw embeddings as CSV.
    DumpEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        set: SetArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "csv") {
        data::read_csv(path)
    } else {
        data::read_dataset(path)
    }
}

fn load_split(path: &Path, dataset: &Dataset) -> Result<SplitPlan> {
    let split: SplitPlan = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    split.validate(dataset)?;
    Ok(split)
}

fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => ExperimentPlan::load(p),
        None => Ok(ExperimentPlan::preset(Preset::DeskScale)),
    }
}

/// Applies the normalization stored with a model, if any.
fn prepared(dataset: &Dataset, bundle: &ModelBundle) -> Result<Dataset> {
    match &bundle.norm {
        Some(n) => dataset.normalized_with(n),
        None => Ok(dataset.clone()),
    }
}

fn emit(value: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => harness::write_json(value, p),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn pretrain(args: &PretrainArgs, origin: Origin) -> Result<()> {
    let mut plan = load_plan(args.plan.as_deref())?;
    if let Some(k) = args.kind {
        plan.pretext.kind = k.into();
        plan.pretext.tau = None;
    }
    if let Some(e) = args.epochs {
        plan.pretext.plain.epochs = e;
        plan.meta.epochs = e;
    }
    let raw = load_data(&args.data)?;
    let split = load_split(&args.split, &raw)?;
    let norm = NormStats::fit(split.source_pool().iter().map(|&i| &raw.windows[i].values))?;
    let ds = raw.normalized_with(&norm)?;
    let pretext = plan.pretext.pretext()?;
    let clock = RunClock::start(if origin == Origin::Meta { "meta-pretrain" } else { "pretrain" });
    let (bundle, trained) = harness::with_worker_pool(|| {
        harness::pretrain_bundle(
            &pretext,
            origin,
            &ds.select(&split.pretrain_train),
            &ds.select(&split.pretrain_val),
            &plan.pretext.plain,
            &plan.meta,
            Some(norm.clone()),
            args.seed,
        )
    })??;
    bundle.save(&args.out)?;
    let log = json!({ "kind": pretext.kind(), "origin": origin, "log": trained.log, "run": clock.finish() });
    emit(&log, args.log.as_deref())
}

fn with_labels(ds: &Dataset, idx: &[usize]) -> Vec<Window> {
    ds.select(idx)
}

fn test_report(bundle: &ModelBundle, ds: &Dataset, split: &SplitPlan, seed: u64, hash: &str) -> Result<MetricReport> {
    let cm = harness::evaluate(bundle, &ds.select(&split.target_test), ds.n_classes)?;
    MetricReport::from_confusion(&cm, seed, hash)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, seed, windows_per_class, out } => {
            let mut spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SynthSpec::desk(),
            };
            if let Some(n) = windows_per_class {
                spec.windows_per_class = n;
            }
            let ds = data::synth_generate(&spec, seed)?;
            data::write_dataset(&ds, &out)?;
            println!("{}", json!({ "windows": ds.len(), "domains": ds.n_domains(), "classes": ds.n_classes }));
        }
        Command::Split { data: path, target, shots, seed, out } => {
            let ds = load_data(&path)?;
            let split = data::make_split(&ds, target, shots, seed)?;
            harness::write_json(&split, &out)?;
        }
        Command::Pretrain(args) => pretrain(&args, Origin::Plain)?,
        Command::MetaPretrain(args) => pretrain(&args, Origin::Meta)?,
        Command::Adapt { model, data: path, split, mode, replay_steps, replay_lr, plan, seed, out, log } => {
            let plan = load_plan(plan.as_deref())?;
            let bundle = ModelBundle::load(&model)?;
            let raw = load_data(&path)?;
            let split = load_split(&split, &raw)?;
            let ds = prepared(&raw, &bundle)?;
            let pretext = Pretext::new(pretext::config_for_params(&bundle.params, &plan.pretext.objective(plan.pretext.kind))?, bundle.encoder.clone())?;
            let replay = ReplayConfig { steps: replay_steps.unwrap_or(plan.replay.steps), lr: replay_lr.or(plan.replay.lr) };
            let (tuned, pipeline) = adapt::run_pipeline(
                mode.into(),
                &pretext,
                &bundle,
                &with_labels(&ds, &split.finetune_shots),
                ds.n_classes,
                &replay,
                plan.meta.inner_lr,
                &plan.finetune,
                seed,
            )?;
            tuned.save(&out)?;
            let report = test_report(&tuned, &ds, &split, seed, &plan.config_hash())?;
            emit(&json!({ "pipeline": pipeline, "test": report }), log.as_deref())?;
        }
        Command::Finetune { model, data: path, split, protocol, lr, epochs, out, log } => {
            let bundle = ModelBundle::load(&model)?;
            let raw = load_data(&path)?;
            let split = load_split(&split, &raw)?;
            let ds = prepared(&raw, &bundle)?;
            let protocol = match protocol {
                ProtocolArg::LinearEval => Protocol::LinearEval,
                ProtocolArg::EndToEnd => Protocol::EndToEnd,
            };
            let cfg = FinetuneConfig { protocol, lr, epochs };
            let (tuned, ft) = adapt::finetune(&bundle, &with_labels(&ds, &split.finetune_shots), ds.n_classes, &cfg)?;
            tuned.save(&out)?;
            let report = test_report(&tuned, &ds, &split, split.seed, "")?;
            emit(&json!({ "finetune": ft, "test": report }), log.as_deref())?;
        }
        Command::Sweep { plan, out } => {
            let plan = ExperimentPlan::load(&plan)?;
            std::fs::create_dir_all(&out)?;
            let clock = RunClock::start("sweep");
            let result = harness::with_worker_pool(|| -> Result<_> {
                let raw = plan.load_dataset()?;
                harness::leave_one_domain_out(&plan, &raw)
            })??;
            harness::write_json(&result, out.join("results.json"))?;
            harness::write_json(&clock.finish(), out.join("run_info.json"))?;
            for s in &result.summary {
                let f1 = s.macro_f1.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("{:<12} shots={:<3} macro_f1={f1}", s.mode.name(), s.shots);
            }
            if result.failed > 0 {
                eprintln!("{} cell(s) failed; see results.json", result.failed);
                return Ok(ExitCode::from(2));
            }
        }
        Command::ShiftStudy { plan, out } => {
            let plan = ExperimentPlan::load(&plan)?;
            std::fs::create_dir_all(&out)?;
            let clock = RunClock::start("shift-study");
            let result = harness::with_worker_pool(|| -> Result<_> {
                let raw = plan.load_dataset()?;
                harness::domain_shift_study(&plan, &raw)
            })??;
            harness::write_json(&result, out.join("shift.json"))?;
            harness::write_json(&clock.finish(), out.join("run_info.json"))?;
            for s in &result.summary {
                let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<10} in={} out={} drop_pp={}",
                    s.kind.name(),
                    show(s.in_domain_f1),
                    show(s.out_of_domain_f1),
                    s.drop_pp.map_or("n/a".to_string(), |v| format!("{v:.2}"))
                );
            }
            if result.cells.iter().any(|c| c.error.is_some()) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::DumpEmbeddings { model, data: path, split, set, out } => {
            let bundle = ModelBundle::load(&model)?;
            let raw = load_data(&path)?;
            let ds = prepared(&raw, &bundle)?;
            let windows = match (set, split) {
                (SetArg::All, _) => ds.windows.clone(),
                (_, None) => return Err(Error::Config("--set other than `all` needs --split".into())),
                (set, Some(p)) => {
                    let s = load_split(&p, &raw)?;
                    let idx = match set {
                        SetArg::PretrainTrain => &s.pretrain_train,
                        SetArg::PretrainVal => &s.pretrain_val,
                        SetArg::Shots => &s.finetune_shots,
                        SetArg::Val => &s.target_val,
                        SetArg::Test | SetArg::All => &s.target_test,
                    };
                    ds.select(idx)
                }
            };
            harness::dump_embeddings(&bundle, &windows, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
