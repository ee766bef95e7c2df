use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crayon_bench::harness::{self, Dataset, EvalSpec, PredictorRef, PromptSource, RunConfig, Split};
use crayon_bench::predictor::{self, ToyModel};
use crayon_bench::prompt::Pattern;
use crayon_bench::service::{self, ServiceConfig, SessionHistory};
use crayon_bench::Predictor;

#[derive(Parser)]
#[command(name = "crayon", about = "Crayon prompt workbench: collect, train, evaluate, serve")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON run config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset directory written by `collect`; collected in memory when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Solver,
    Toy,
    Gt,
}

#[derive(Args)]
struct PredictorArgs {
    #[arg(long, value_enum, default_value = "solver")]
    predictor: PredictorArg,
    /// Trained toy model; trained on the spot when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the dataset with frames and ground truth.
    Collect,
    /// Train the toy predictor with all three losses.
    Train,
    /// Evaluate one predictor and prompt source on a test split.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long, default_value = "gt")]
        prompt_source: PromptSource,
        #[arg(long, default_value = "PZYM")]
        pattern: Pattern,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Success rate against prompt-noise fraction.
    SweepNoise {
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Success rate for each prompt pattern.
    SweepPrompts {
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Train one toy model per loss configuration and evaluate each.
    SweepLosses,
    /// Pull-then-push episodes with recorded key-frame plans.
    Longhorizon {
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Serve the session workbench over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Replay a session history or long-horizon trial file and compare final states.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    data: Option<PathBuf>,
    fingerprint: String,
}

impl Ctx {
    fn dataset(&self) -> AnyResult<Dataset> {
        Ok(match &self.data {
            Some(dir) => harness::load_dataset(dir)?,
            None => harness::run_collection(&self.cfg.collection, self.seed)?,
        })
    }

    fn write<T: Serialize>(&self, name: &str, value: &T) -> AnyResult<()> {
        harness::write_json(&self.out.join(name), value)?;
        Ok(())
    }

    fn train(&self, dataset: &Dataset) -> AnyResult<ToyModel> {
        let train = dataset.split(Split::Train);
        let samples = harness::toy_samples(&train, &self.cfg.train.toy);
        let t = &self.cfg.train;
        Ok(predictor::train_toy_model(
            &samples,
            &t.toy,
            &Default::default(),
            &t.curriculum,
            t.epochs,
            self.seed,
        )?)
    }

    fn toy(&self, args: &PredictorArgs, dataset: &Dataset) -> AnyResult<ToyModel> {
        match &args.model {
            Some(path) => Ok(ToyModel::from_json(&fs::read_to_string(path)?, &self.cfg.train.toy)?),
            None => self.train(dataset),
        }
    }
}

/// Owns whichever predictor a subcommand was asked for.
enum Loaded {
    Solver(crayon_bench::GeometricPredictor),
    Toy(Box<ToyModel>),
    Gt,
}

impl Loaded {
    fn new(ctx: &Ctx, args: &PredictorArgs, dataset: &Dataset) -> AnyResult<Self> {
        Ok(match args.predictor {
            PredictorArg::Solver => Loaded::Solver(ctx.cfg.solver()),
            PredictorArg::Toy => Loaded::Toy(Box::new(ctx.toy(args, dataset)?)),
            PredictorArg::Gt => Loaded::Gt,
        })
    }

    fn as_ref(&self) -> PredictorRef<'_> {
        match self {
            Loaded::Solver(p) => PredictorRef::Model(p),
            Loaded::Toy(m) => PredictorRef::Model(m.as_ref()),
            Loaded::Gt => PredictorRef::GroundTruth,
        }
    }

    fn model(&self) -> AnyResult<&dyn Predictor> {
        match self.as_ref() {
            PredictorRef::Model(p) => Ok(p),
            PredictorRef::GroundTruth => Err("this subcommand needs --predictor solver or toy".into()),
        }
    }
}

fn run(cli: Cli) -> AnyResult<()> {
    let cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        fingerprint: cfg.fingerprint(),
        cfg,
        seed: cli.common.seed,
        out: cli.common.out,
        data: cli.common.data,
    };
    match cli.command {
        Command::Collect => {
            let dataset = harness::run_collection(&ctx.cfg.collection, ctx.seed)?;
            let written = harness::write_dataset(&dataset, &ctx.out)?;
            println!(
                "collected {} records ({} skipped) into {}",
                written.records.len(),
                written.skipped_records,
                ctx.out.display()
            );
        }
        Command::Train => {
            let dataset = ctx.dataset()?;
            let model = ctx.train(&dataset)?;
            fs::create_dir_all(&ctx.out)?;
            fs::write(ctx.out.join("model.json"), model.to_json())?;
            ctx.write(
                "train_report.json",
                &json!({
                    "config_fingerprint": ctx.fingerprint,
                    "seed": ctx.seed,
                    "toy_config_hash": model.config_hash,
                    "loss_curve": model.curve,
                }),
            )?;
            if let Some(last) = model.curve.last() {
                println!("trained {} epochs, final loss {:.6}", model.curve.len(), last.total);
            }
        }
        Command::Eval {
            predictor,
            prompt_source,
            pattern,
            split,
        } => {
            let dataset = ctx.dataset()?;
            let loaded = Loaded::new(&ctx, &predictor, &dataset)?;
            let records = dataset.split(split.unwrap_or(ctx.cfg.eval_split));
            let spec = EvalSpec {
                name: "eval".into(),
                pattern,
                source: prompt_source,
                selector: ctx.cfg.selector.clone(),
                seed: ctx.seed,
            };
            let run = harness::run_eval(&records, loaded.as_ref(), &spec, &ctx.fingerprint);
            let report = run.report();
            ctx.write("trials.json", &run)?;
            ctx.write("report.json", &report)?;
            println!("success {}/{} = {:.4}", report.successes, report.trials, report.success_rate);
        }
        Command::SweepNoise { predictor } => {
            let dataset = ctx.dataset()?;
            let loaded = Loaded::new(&ctx, &predictor, &dataset)?;
            let records = dataset.split(ctx.cfg.eval_split);
            let runs = harness::run_noise_sweep(&records, loaded.as_ref(), &ctx.cfg.noise_fractions, ctx.seed, &ctx.fingerprint);
            summarize(&ctx, "sweep_noise.json", runs.iter().map(|r| r.report()).collect())?;
        }
        Command::SweepPrompts { predictor } => {
            let dataset = ctx.dataset()?;
            let loaded = Loaded::new(&ctx, &predictor, &dataset)?;
            let records = dataset.split(ctx.cfg.eval_split);
            let runs = harness::run_prompt_ablation(&records, loaded.as_ref(), ctx.seed, &ctx.fingerprint);
            summarize(&ctx, "sweep_prompts.json", runs.iter().map(|r| r.report()).collect())?;
        }
        Command::SweepLosses => {
            let dataset = ctx.dataset()?;
            let ablation = harness::run_loss_ablation(
                &dataset.split(Split::Train),
                &dataset.split(ctx.cfg.eval_split),
                &ctx.cfg.train,
                ctx.seed,
                &ctx.fingerprint,
            )?;
            fs::create_dir_all(&ctx.out)?;
            for (model, (name, _)) in ablation.models.iter().zip(harness::ablation_weights()) {
                fs::write(ctx.out.join(format!("model_{name}.json")), model.to_json())?;
            }
            summarize(&ctx, "sweep_losses.json", ablation.reports())?;
        }
        Command::Longhorizon { predictor } => {
            let dataset = Dataset {
                seed: ctx.seed,
                config_fingerprint: ctx.fingerprint.clone(),
                records: Vec::new(),
                skipped_records: 0,
                rejected_scenes: 0,
            };
            let needs_data = matches!(predictor.predictor, PredictorArg::Toy) && predictor.model.is_none();
            let dataset = if needs_data { ctx.dataset()? } else { dataset };
            let loaded = Loaded::new(&ctx, &predictor, &dataset)?;
            let model = loaded.model()?;
            let trials = harness::run_longhorizon(&ctx.cfg.longhorizon, model, ctx.seed);
            let name = loaded.as_ref().name();
            let report = harness::longhorizon_report(&trials, ctx.seed, &ctx.fingerprint, name);
            ctx.write("longhorizon_trials.json", &trials)?;
            ctx.write("longhorizon_report.json", &report)?;
            println!("success {}/{} = {:.4}", report.successes, report.trials, report.success_rate);
        }
        Command::Serve { addr } => {
            let service_cfg = ServiceConfig {
                intrinsics: ctx.cfg.collection.intrinsics,
                camera: ctx.cfg.collection.camera.clone(),
                solver: ctx.cfg.solver,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(addr, service_cfg, |bound| println!("listening on http://{bound}")))?;
        }
        Command::Replay { input, predictor } => replay(&ctx, &input, &predictor)?,
    }
    Ok(())
}

fn summarize(ctx: &Ctx, name: &str, reports: Vec<harness::MetricsReport>) -> AnyResult<()> {
    for r in &reports {
        println!("{:<16} success {}/{} = {:.4}", r.meta.name, r.successes, r.trials, r.success_rate);
    }
    ctx.write(name, &reports)
}

fn replay(ctx: &Ctx, input: &Path, args: &PredictorArgs) -> AnyResult<()> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(input)?)?;
    let value = value.get("entries").map(|_| value.clone()).unwrap_or(value);
    if value.get("entries").is_some() {
        let history: SessionHistory = serde_json::from_value(value)?;
        let scene = history.replay()?;
        let (rgb, _) = crayon_bench::sim::render(&scene, &history.camera.intrinsics, &history.camera.extrinsics);
        fs::create_dir_all(&ctx.out)?;
        rgb.save(ctx.out.join("final.png"))?;
        let expected = history.entries.last().map(|e| e.result.final_state);
        let summary = json!({
            "kind": "session",
            "steps": history.entries.len(),
            "final_state": scene.joint.state,
            "recorded_final_state": expected,
            "matches": expected.is_none_or(|s| s == scene.joint.state),
        });
        println!("replayed {} steps, final state {}", history.entries.len(), scene.joint.state);
        return ctx.write("replay.json", &summary);
    }
    let trials: Vec<harness::LongHorizonTrial> = serde_json::from_value(value)?;
    let empty = Dataset {
        seed: ctx.seed,
        config_fingerprint: ctx.fingerprint.clone(),
        records: Vec::new(),
        skipped_records: 0,
        rejected_scenes: 0,
    };
    let loaded = Loaded::new(ctx, args, &empty)?;
    let model = loaded.model()?;
    let mut rows = Vec::new();
    for t in &trials {
        let (scene, outcome) = harness::replay_plan(&t.scene, &t.plan, model)?;
        let recorded = t.steps.last().map(|s| s.result.final_state);
        rows.push(json!({
            "id": t.id,
            "success": outcome.success,
            "recorded_success": t.success,
            "final_state": scene.joint.state,
            "matches": outcome.success == t.success && recorded.is_none_or(|s| s == scene.joint.state),
        }));
    }
    let matching = rows.iter().filter(|r| r["matches"] == true).count();
    println!("replayed {} plans, {matching} match their record", rows.len());
    ctx.write("replay.json", &json!({ "kind": "longhorizon", "trials": rows }))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
