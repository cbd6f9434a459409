//! `mmerc`: training, evaluation, and export harness.
//!
//! Subcommands: `train`, `eval`, `ablate`, `gradcheck`, `synth`, `convert`,
//! `dump-attn`, `dump-gates`. A run directory created by `train` holds
//! `manifest.json` (config + dataset header + commit), `losses.jsonl`
//! (one record per epoch), and `model.ckpt` (binary parameters).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmerc_core::ablate;
use mmerc_core::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use mmerc_core::config::RunConfig;
use mmerc_core::data::batch::ConvView;
use mmerc_core::data::synth::{generate, SynthSpec};
use mmerc_core::data::{convert_jsonl, load_dataset, save_dataset, Dataset, DatasetHeader};
use mmerc_core::fusion::summarize_gates;
use mmerc_core::gradcheck::model_gradcheck;
use mmerc_core::metrics::{evaluate_model, to_class_table};
use mmerc_core::model::Model;
use mmerc_core::rng::Rng;
use mmerc_core::tape::Tape;
use mmerc_core::train::{seed_sweep, train_with_logger, LossLine};

#[derive(Parser)]
#[command(name = "mmerc", version, about = "Multimodal conversation emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the 13-setting ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference check of the full backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Convert JSON-lines interchange data into a dataset directory.
    Convert(ConvertArgs),
    /// Export attention weights for one conversation as JSON.
    DumpAttn(DumpArgs),
    /// Export per-utterance modality weights for one conversation as JSON.
    DumpGates(DumpArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config's `dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut run: RunConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("bad config: {e}"))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            run.dataset = Some(d.display().to_string());
        }
        if let Some(v) = self.epochs {
            run.epochs = v;
        }
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.lr {
            run.lr = v;
        }
        if let Some(v) = self.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = self.temperature {
            run.model.temperature = v;
        }
        if let Some(v) = self.dropout {
            run.model.dropout = v;
        }
        if let Some(v) = self.d_model {
            run.model.d_model = v;
        }
        if let Some(v) = self.heads {
            run.model.heads = v;
        }
        if let Some(v) = self.d_ff {
            run.model.d_ff = v;
        }
        run.validate().map_err(|e| e.to_string())?;
        Ok(run)
    }

    fn load_dataset(&self, run: &RunConfig) -> Result<Dataset, String> {
        let path = run
            .dataset
            .as_ref()
            .ok_or("no dataset given (use --dataset or the config's `dataset` key)")?;
        load_dataset(Path::new(path)).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory to create.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Train over this many consecutive seeds and report the mean
    /// (3 when the flag is given without a value).
    #[arg(long, num_args(0..=1), default_missing_value = "3")]
    sweep: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// `model.ckpt` from a run directory (its `manifest.json` must sit
    /// alongside, or pass --manifest).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Write the evaluation report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate conversations in parallel (fixed-order reduction keeps the
    /// numbers identical to the serial run).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Held-out dataset for scoring (defaults to the training dataset).
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    conversations: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Feature dims as `text,audio,visual`.
    #[arg(long, default_value = "12,14,10")]
    dims: String,
    #[arg(long, default_value_t = 1.0)]
    separability: f64,
    #[arg(long, default_value_t = 0.5)]
    shift_rate: f64,
}

#[derive(Args)]
struct ConvertArgs {
    /// JSON-lines file (one conversation per line).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "converted")]
    name: String,
    /// Fixed label names in index order, comma separated.
    #[arg(long)]
    labels: Option<String>,
    /// Reuse the speaker vocabulary of this dataset directory (unknown
    /// speakers map to UNK).
    #[arg(long)]
    vocab_from: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Conversation id to export (defaults to the first).
    #[arg(long)]
    conversation: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to rebuild a model around a checkpoint.
#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    header: DatasetHeader,
    commit: String,
    created_unix: u64,
}

fn git_commit() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(value).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())
}

fn load_model(checkpoint: &Path, manifest: &Option<PathBuf>) -> Result<(Model, Manifest), String> {
    let manifest_path = manifest
        .clone()
        .unwrap_or_else(|| checkpoint.with_file_name("manifest.json"));
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| format!("cannot read {}: {e}", manifest_path.display()))?,
    )
    .map_err(|e| format!("bad manifest: {e}"))?;

    let mut init_rng = Rng::new(manifest.config.seed).split("init");
    let mut model = Model::new(manifest.config.model.clone(), &manifest.header, &mut init_rng)
        .map_err(|e| e.to_string())?;
    let entries = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    apply_checkpoint(&mut model.params, entries).map_err(|e| e.to_string())?;
    Ok((model, manifest))
}

fn check_compatible(model: &Model, dataset: &Dataset) -> Result<(), String> {
    let h = &model.header;
    let d = &dataset.header;
    if (h.d_text, h.d_audio, h.d_visual) != (d.d_text, d.d_audio, d.d_visual) {
        return Err(format!(
            "dataset dims ({}, {}, {}) do not match the checkpoint's ({}, {}, {})",
            d.d_text, d.d_audio, d.d_visual, h.d_text, h.d_audio, h.d_visual
        ));
    }
    if h.label_names != d.label_names {
        return Err("dataset label names differ from the checkpoint's".into());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), String> {
    let run = args.config.resolve()?;
    let dataset = args.config.load_dataset(&run)?;
    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;

    if let Some(k) = args.sweep {
        let seeds: Vec<u64> = (0..k as u64).map(|i| run.seed + i).collect();
        let sweep = seed_sweep(&dataset, &dataset, &run, &seeds).map_err(|e| e.to_string())?;
        write_json(&args.out.join("sweep.json"), &sweep)?;
        println!(
            "sweep over {k} seeds: mean ACC {:.4}, mean w-F1 {:.4}",
            sweep.mean_accuracy, sweep.mean_weighted_f1
        );
        return Ok(());
    }

    let manifest = Manifest {
        config: run.clone(),
        header: dataset.header.clone(),
        commit: git_commit(),
        created_unix: unix_now(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let loss_path = args.out.join("losses.jsonl");
    let mut loss_file = fs::File::create(&loss_path).map_err(|e| e.to_string())?;
    let result = train_with_logger(&dataset, &run, |log| {
        let line = serde_json::to_string(&LossLine::from_log(log)).expect("serializable");
        writeln!(loss_file, "{line}").expect("loss log writable");
        let val = log
            .val_weighted_f1
            .map(|v| format!(" val w-F1 {v:.4}"))
            .unwrap_or_default();
        println!("epoch {:>4}: total {:.6}{val}", log.epoch, log.losses.total);
    })
    .map_err(|e| e.to_string())?;

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&result.model.params, &ckpt).map_err(|e| e.to_string())?;
    if let Some(best) = result.best_epoch {
        println!(
            "kept best checkpoint from epoch {best} (val w-F1 {:.4})",
            result.best_val_f1.unwrap_or(f64::NAN)
        );
    }
    println!(
        "wrote {}, {} and {}",
        args.out.join("manifest.json").display(),
        loss_path.display(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), String> {
    let (mut model, _) = load_model(&args.checkpoint, &args.manifest)?;
    let dataset = load_dataset(&args.dataset).map_err(|e| e.to_string())?;
    check_compatible(&model, &dataset)?;
    let max_len = dataset.conversations.iter().map(|c| c.len()).max().unwrap_or(0);
    model.ensure_len(max_len).map_err(|e| e.to_string())?;

    let (report, _) = evaluate_model(&model, &dataset, args.threads).map_err(|e| e.to_string())?;
    println!("{}", to_class_table(&report));
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), String> {
    let run = args.config.resolve()?;
    let dataset = args.config.load_dataset(&run)?;
    let eval_dataset = match &args.eval_dataset {
        Some(p) => load_dataset(p).map_err(|e| e.to_string())?,
        None => dataset.clone(),
    };
    let rows = ablate::run_ablation(&dataset, &eval_dataset, &run).map_err(|e| e.to_string())?;
    let md = ablate::to_markdown(&rows);
    println!("{md}");
    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    write_json(&args.out.join("ablation.json"), &rows)?;
    fs::write(args.out.join("ablation.md"), &md).map_err(|e| e.to_string())?;
    println!("wrote {}", args.out.join("ablation.{json,md}").display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), String> {
    let report = model_gradcheck(seed).map_err(|e| e.to_string())?;
    for check in &report.per_param {
        println!("{:<40} max mismatch {:.3e}", check.name, check.max_mismatch);
    }
    println!(
        "worst: {:.3e} at {} (tolerance {:.0e})",
        report.max_mismatch, report.worst_param, report.tolerance
    );
    if report.passed {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err("gradcheck FAIL".into())
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), String> {
    let dims: Vec<usize> = args
        .dims
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err("--dims needs exactly three comma-separated sizes".into());
    }
    let spec = SynthSpec {
        n_conversations: args.conversations,
        len_range: (args.min_len, args.max_len),
        n_speakers: args.speakers,
        n_classes: args.classes,
        dims: (dims[0], dims[1], dims[2]),
        separability: args.separability,
        shift_rate: args.shift_rate,
    };
    let (dataset, _) = generate(&spec, args.seed).map_err(|e| e.to_string())?;
    save_dataset(&dataset, &args.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} conversations / {} utterances to {}",
        dataset.conversations.len(),
        dataset.total_utterances(),
        args.out.display()
    );
    Ok(())
}

fn cmd_convert(args: &ConvertArgs) -> Result<(), String> {
    let file = fs::File::open(&args.input)
        .map_err(|e| format!("cannot open {}: {e}", args.input.display()))?;
    let labels = args
        .labels
        .as_ref()
        .map(|s| s.split(',').map(|l| l.trim().to_string()).collect::<Vec<_>>());
    let vocab_header = match &args.vocab_from {
        Some(dir) => Some(load_dataset(dir).map_err(|e| e.to_string())?.header),
        None => None,
    };
    let dataset = convert_jsonl(file, &args.name, labels, vocab_header.as_ref())
        .map_err(|e| e.to_string())?;
    save_dataset(&dataset, &args.out).map_err(|e| e.to_string())?;
    println!(
        "converted {} conversations ({} classes, {} speakers) into {}",
        dataset.conversations.len(),
        dataset.header.num_classes,
        dataset.header.speaker_vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn find_conversation<'d>(dataset: &'d Dataset, id: &Option<String>) -> Result<&'d mmerc_core::Conversation, String> {
    match id {
        None => Ok(&dataset.conversations[0]),
        Some(id) => dataset
            .conversations
            .iter()
            .find(|c| &c.id == id)
            .ok_or_else(|| format!("no conversation with id {id:?}")),
    }
}

#[derive(Serialize)]
struct AttnDump {
    block: String,
    layer: usize,
    head: usize,
    rows: Vec<Vec<f64>>,
}

fn cmd_dump_attn(args: &DumpArgs) -> Result<(), String> {
    let (mut model, _) = load_model(&args.checkpoint, &args.manifest)?;
    let dataset = load_dataset(&args.dataset).map_err(|e| e.to_string())?;
    check_compatible(&model, &dataset)?;
    let conv = find_conversation(&dataset, &args.conversation)?;
    model.ensure_len(conv.len()).map_err(|e| e.to_string())?;

    let view = ConvView::from_conversation(conv, &dataset.header).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &view, None, false, true)
        .map_err(|e| e.to_string())?;

    let dumps: Vec<AttnDump> = out
        .attn
        .iter()
        .map(|record| AttnDump {
            block: format!("{}\u{2192}{}", record.src.short(), record.dst.short()),
            layer: record.layer,
            head: record.head,
            rows: (0..record.weights.rows())
                .map(|i| {
                    (0..record.weights.cols())
                        .map(|j| record.weights.get2(i, j))
                        .collect()
                })
                .collect(),
        })
        .collect();
    write_json(&args.out, &dumps)?;
    println!(
        "wrote {} attention maps for conversation {} to {}",
        dumps.len(),
        conv.id,
        args.out.display()
    );
    Ok(())
}

fn cmd_dump_gates(args: &DumpArgs) -> Result<(), String> {
    let (mut model, _) = load_model(&args.checkpoint, &args.manifest)?;
    let dataset = load_dataset(&args.dataset).map_err(|e| e.to_string())?;
    check_compatible(&model, &dataset)?;
    let conv = find_conversation(&dataset, &args.conversation)?;
    model.ensure_len(conv.len()).map_err(|e| e.to_string())?;

    let view = ConvView::from_conversation(conv, &dataset.header).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &view, None, false, false)
        .map_err(|e| e.to_string())?;
    let gates = out
        .gates
        .ok_or("this fusion strategy exposes no modality gates (use gated fusion)")?;
    let rows = summarize_gates(&tape, &gates, &view.mask);
    write_json(&args.out, &rows)?;
    println!(
        "wrote {} gate rows for conversation {} to {}",
        rows.len(),
        conv.id,
        args.out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::Synth(args) => cmd_synth(args),
        Command::Convert(args) => cmd_convert(args),
        Command::DumpAttn(args) => cmd_dump_attn(args),
        Command::DumpGates(args) => cmd_dump_gates(args),
    };
    if let Err(msg) = result {
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
