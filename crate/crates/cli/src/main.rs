use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use m3hop_core::config::{load_config, override_value, RunConfig};
use m3hop_core::cot::{rationalize_dataset, HttpTransport, MockTransport, PromptHop, RationaleCache, Transport};
use m3hop_core::datamodel::{load_dataset, load_rationales, write_dataset, write_rationales, MemeRecord, RationaleSet, Split};
use m3hop_core::encoder::{FeatureKind, FeatureProvider};
use m3hop_core::evaluator::{predict_split, run_ablation, AblationData, Variant};
use m3hop_core::fusion::{init_params, FusionConfig, ValueSource};
use m3hop_core::numerics::{finite_diff_check, GradCheckOptions};
use m3hop_core::objective::SclBank;
use m3hop_core::synthetic::{planted, PlantedSpec};
use m3hop_core::trainer::{batch_objective, load_checkpoint, prepare_samples, save_checkpoint, train, write_history, Sample};
use m3hop_core::{Error, Result};

#[derive(Parser)]
#[command(name = "m3hop", version, about = "Three-hop chain-of-thought misogynous meme classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate emotion, target and context rationales for every meme
    Rationalize(RationalizeArgs),
    /// Train the classifier and write checkpoints plus per-epoch history
    Train(TrainArgs),
    /// Score a checkpoint on one split
    Eval(EvalArgs),
    /// Train and score the ablation variants
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Inspect the run configuration
    Config(ConfigArgs),
    /// Write the planted toy dataset, its rationales and a mock answer file
    Synth(SynthArgs),
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Clone, Default)]
struct ConfigOpts {
    /// JSON configuration file (flat keys; see `m3hop config --print-defaults`)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling and the toy encoder
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Number of training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Attention value source: rationale or fused
    #[arg(long, value_name = "SOURCE")]
    value_source: Option<ValueSource>,
    /// Contrastive candidate bank: full or m-only
    #[arg(long, value_name = "BANK")]
    scl_bank: Option<SclBank>,
    /// Base URL of the chat-completions endpoint
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Model name sent to the endpoint
    #[arg(long)]
    model: Option<String>,
    /// Feed earlier hops' rationales into later prompts
    #[arg(long)]
    chained: bool,
    /// Override any configuration key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigOpts {
    fn load(&self) -> Result<RunConfig> {
        let mut ov: Vec<(String, Value)> = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
            ov.push((k.trim().to_string(), override_value(v.trim())));
        }
        if let Some(s) = self.seed {
            ov.push(("seed".into(), json!(s)));
        }
        if let Some(lr) = self.lr {
            ov.push(("learning_rate".into(), json!(lr)));
        }
        if let Some(e) = self.epochs {
            ov.push(("epochs".into(), json!(e)));
        }
        if let Some(v) = self.value_source {
            ov.push(("value_source".into(), json!(v.to_string())));
        }
        if let Some(b) = self.scl_bank {
            ov.push(("scl_bank".into(), json!(b.to_string())));
        }
        if let Some(u) = &self.endpoint {
            ov.push(("base_url".into(), json!(u)));
        }
        if let Some(m) = &self.model {
            ov.push(("model_name".into(), json!(m)));
        }
        if self.chained {
            ov.push(("chained".into(), json!(true)));
        }
        load_config(self.config.as_deref(), &ov)
    }
}

#[derive(Args)]
struct RationalizeArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset file (JSONL with a manifest line)
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Response cache directory
    #[arg(long, value_name = "DIR")]
    cache: PathBuf,
    /// Output rationales file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Answer from a JSON prompt→text map instead of the network
    #[arg(long, value_name = "FILE")]
    mock: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset file
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Rationales file
    #[arg(long, value_name = "FILE")]
    rationales: PathBuf,
    /// Output directory for checkpoints and history
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Checkpoint file written by `train`
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset file
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Rationales file
    #[arg(long, value_name = "FILE")]
    rationales: PathBuf,
    /// Split to score: train, dev or test
    #[arg(long, default_value = "test")]
    split: Split,
    /// Where to write the JSON report (stdout when omitted)
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset file
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Rationales file
    #[arg(long, value_name = "FILE")]
    rationales: PathBuf,
    /// Rationales generated without the scene graph, needed by -SG
    #[arg(long, value_name = "FILE")]
    sg_rationales: Option<PathBuf>,
    /// Comma-separated variant names, or `all`
    #[arg(long, default_value = "all")]
    variants: String,
    /// Split the variants are scored on
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Output directory for ablation.json and ablation.txt
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Relative error tolerance
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Print the default configuration
    #[arg(long)]
    print_defaults: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dataset seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of test memes to add
    #[arg(long, default_value_t = 0)]
    test: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Rationalize(a) => rationalize(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Config(a) => config_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Config(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, content).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Load the dataset and check the manifest against the configured dims.
fn dataset_for(cfg: &RunConfig, path: &Path) -> Result<Vec<MemeRecord>> {
    let (manifest, records) = load_dataset(path)?;
    if cfg.features == FeatureKind::External && (manifest.d_t != cfg.d_t || manifest.d_v != cfg.d_v) {
        return Err(Error::Config(format!(
            "dataset declares d_t={} d_v={} but the config has d_t={} d_v={}",
            manifest.d_t, manifest.d_v, cfg.d_t, cfg.d_v
        )));
    }
    Ok(records)
}

fn rationales_for(cfg: &RunConfig, path: &Path) -> Result<RationaleSet> {
    if !path.exists() {
        return Err(Error::DataCompleteness(format!("rationales file {} does not exist", path.display())));
    }
    let d_t = (cfg.features == FeatureKind::External).then_some(cfg.d_t);
    load_rationales(path, d_t)
}

fn rationalize(a: RationalizeArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let (_, records) = load_dataset(&a.dataset)?;
    let cache = RationaleCache::open(&a.cache)?;
    let transport: Box<dyn Transport> = match &a.mock {
        Some(p) => Box::new(MockTransport::from_file(p)?),
        None => Box::new(HttpTransport::from_env()),
    };
    let outcome = rationalize_dataset(
        &records,
        &PromptHop::defaults(),
        &cfg.endpoint(),
        &cache,
        transport.as_ref(),
        &cfg.rationalize_options(),
    )?;
    write_rationales(&a.out, &outcome.rationales)?;
    print_json(&json!({
        "memes": records.len(),
        "rationales": outcome.rationales.len(),
        "requests": outcome.requests,
        "cache_hits": outcome.cache_hits,
        "failed_memes": outcome.failed_memes,
        "failures": outcome.failures,
    }));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let records = dataset_for(&cfg, &a.dataset)?;
    let rationales = rationales_for(&cfg, &a.rationales)?;
    let fusion = cfg.fusion();
    let outcome = train(&records, &rationales, &cfg.provider(), &cfg.train(), &fusion)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    save_checkpoint(a.out.join("checkpoint.jsonl"), &outcome.best_params, &fusion)?;
    save_checkpoint(a.out.join("final.jsonl"), &outcome.final_params, &fusion)?;
    write_history(a.out.join("history.jsonl"), &outcome.history)?;
    write_file(&a.out.join("config.json"), &cfg.to_pretty_json())?;
    let last = outcome.history.last().expect("epochs >= 1");
    print_json(&json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "final_train_loss": last.train_loss,
        "best_dev_macro_f1": outcome.history[outcome.best_epoch].dev.as_ref().map(|d| d.macro_f1),
        "out": a.out,
    }));
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let (params, fusion) = load_checkpoint(&a.checkpoint, None)?;
    let cfg = RunConfig {
        d_t: fusion.d_t,
        d_v: fusion.d_v,
        ..cfg
    };
    let records = dataset_for(&cfg, &a.dataset)?;
    let rationales = rationales_for(&cfg, &a.rationales)?;
    let provider = match cfg.features {
        FeatureKind::Toy => FeatureProvider::toy(fusion.d_t, fusion.d_v, fusion.seed),
        FeatureKind::External => FeatureProvider::external(fusion.d_t, fusion.d_v),
    };
    let split: Vec<&MemeRecord> = records.iter().filter(|r| r.split == a.split).collect();
    let preds = predict_split(&params, &fusion, cfg.train().ablation.stages(), &split, &rationales, &provider)?;
    let mut report = match preds.metrics()? {
        Some(m) => serde_json::to_value(m).expect("metrics serialize"),
        None => json!({ "n": 0 }),
    };
    let obj = report.as_object_mut().expect("object");
    obj.insert("split".into(), json!(a.split));
    obj.insert("errors".into(), json!(preds.errors));
    obj.insert("predictions".into(), json!(preds.predictions));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.report {
        Some(p) => {
            write_file(p, &text)?;
            let short = json!({
                "split": a.split,
                "n": preds.predictions.len(),
                "errors": preds.errors.len(),
                "macro_f1": report.get("macro_f1"),
                "report": p,
            });
            print_json(&short);
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let variants = Variant::parse_list(&a.variants)?;
    let records = dataset_for(&cfg, &a.dataset)?;
    let rationales = rationales_for(&cfg, &a.rationales)?;
    let sg_free = a.sg_rationales.as_deref().map(|p| rationales_for(&cfg, p)).transpose()?;
    let data = AblationData {
        records: &records,
        rationales: &rationales,
        sg_free_rationales: sg_free.as_ref(),
        provider: cfg.provider(),
        eval_split: a.split,
    };
    let table = run_ablation(&cfg.train(), &cfg.fusion(), &variants, &data)?;
    let text = table.to_text();
    if let Some(dir) = &a.out {
        write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
        write_file(&dir.join("ablation.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if a.cfg.config.is_none() {
        let tiny = FusionConfig::tiny();
        cfg.d_t = tiny.d_t;
        cfg.d_v = tiny.d_v;
        cfg.o = tiny.o;
        cfg.k_mfb = tiny.k_mfb;
        cfg.d_k = tiny.d_k;
    }
    let modes = match a.cfg.value_source {
        Some(v) => vec![v],
        None => vec![ValueSource::Rationale, ValueSource::Fused],
    };
    let data = planted(&PlantedSpec {
        n_train: 2,
        n_dev: 0,
        dim: cfg.d_t,
        seed: cfg.seed,
        ..PlantedSpec::default()
    })?;
    let provider = FeatureProvider::toy(cfg.d_t, cfg.d_v, cfg.seed);
    let train_cfg = cfg.train();
    let refs: Vec<&MemeRecord> = data.records.iter().collect();
    let samples = prepare_samples(&refs, &data.rationales, &provider, train_cfg.ablation.stages())?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let opts = GradCheckOptions {
        h: a.h,
        tol: a.tol,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let mut all_ok = true;
    for mode in modes {
        let fusion = FusionConfig {
            value_source: mode,
            ..cfg.fusion()
        };
        let params = init_params(&fusion)?;
        let report = finite_diff_check(
            |p| batch_objective(p, &batch, &fusion, &train_cfg).map(|(l, g)| (l.total, g)),
            &params,
            &opts,
        )?;
        println!("value_source={mode} h={} tol={}", report.h, report.tol);
        for p in &report.paths {
            let status = if p.passed { "ok" } else { "FAIL" };
            println!("  {:<14} coords={:<4} max_rel_err={:.3e} {status}", p.path, p.coordinates, p.max_relative_error);
        }
        all_ok &= report.passed();
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check exceeded tolerance {}", a.tol)))
    }
}

fn config_cmd(a: ConfigArgs) -> Result<()> {
    if a.print_defaults {
        println!("{}", RunConfig::default().to_pretty_json());
    } else {
        println!("{}", a.cfg.load()?.to_pretty_json());
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let spec = PlantedSpec {
        seed: a.seed,
        n_test: a.test,
        ..PlantedSpec::default()
    };
    let data = planted(&spec)?;
    let dir = &a.out;
    write_dataset(dir.join("dataset.jsonl"), &data.manifest, &data.records)?;
    write_rationales(dir.join("rationales.jsonl"), data.rationales.records())?;
    write_file(
        &dir.join("mock.json"),
        &serde_json::to_string_pretty(&data.mock_answers).expect("answers serialize"),
    )?;
    let toy = json!({
        "features": "toy",
        "d_t": spec.dim,
        "d_v": spec.dim,
        "o": 16,
        "k_mfb": 2,
        "d_k": 8,
        "epochs": 200,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "seed": 42,
        "track_train_metrics": true,
    });
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&toy).expect("config serializes"))?;
    print_json(&json!({ "memes": data.records.len(), "out": dir }));
    Ok(())
}
