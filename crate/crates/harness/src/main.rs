use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ashnet_core::transformer::Vocabulary;
use ashnet_harness::config::RunConfig;
use ashnet_harness::error::{HarnessError, Result};
use ashnet_harness::eval::{eval_spike_seed, evaluate};
use ashnet_harness::image_io::load_image_pgm_ppm;
use ashnet_harness::sweep::run_sweep;
use ashnet_harness::train::{build_model, dataset, load_checkpoint, train};
use ashnet_tensor::Tensor;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ashnet", about = "Train and evaluate the hybrid spiking vision-language encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted override such as `model.time_window=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full schedule and write metrics, checkpoint and vocabulary.
    Train,
    /// Recall@K on held-out pairs, from the checkpoint in --out if present.
    Eval,
    /// Train every cell of the configured sweep and write sweep.csv.
    Sweep,
    /// Print fused visual tokens of PGM/PPM images as JSON.
    Encode {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    base.with_overrides(&overrides)
}

/// The trained model in `out` when a checkpoint exists, else a fresh one.
fn model_from(cfg: &RunConfig, out: &Path) -> Result<ashnet_core::model::AshNet> {
    let ck = out.join("checkpoint_final.bin");
    if !ck.exists() {
        return build_model(cfg);
    }
    let vocab = Vocabulary::from_json(&std::fs::read_to_string(out.join("vocab.json"))?)?;
    load_checkpoint(cfg, vocab, ck)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => {
            let outcome = train(&cfg, Some(&cli.out))?;
            let r = outcome.recall;
            println!(
                "trained {} steps; held-out R@1 {:.4} R@5 {:.4} R@10 {:.4}; outputs in {}",
                outcome.rows.len(),
                r.r_at_1,
                r.r_at_5,
                r.r_at_10,
                cli.out.display()
            );
        }
        Command::Eval => {
            let net = model_from(&cfg, &cli.out)?;
            let pairs = dataset(&cfg)?;
            let (_, eval_ids) = cfg.dataset.split();
            let r = evaluate(&net, &pairs, &eval_ids, cfg.train.batch_size, cfg.seed)?;
            println!("{}", serde_json::to_string(&r).expect("recall serializes"));
        }
        Command::Sweep => {
            let rows = run_sweep(&cfg, Some(&cli.out))?;
            println!("{} cells written to {}", rows.len(), cli.out.join("sweep.csv").display());
        }
        Command::Encode { images } => {
            let net = model_from(&cfg, &cli.out)?;
            let size = cfg.model.image_size;
            let mut data = Vec::new();
            for path in images {
                let img = load_image_pgm_ppm(path)?;
                if img.shape() != [3, size, size] {
                    return Err(HarnessError::Parameter(format!(
                        "{} is {:?}, model expects 3×{size}×{size}",
                        path.display(),
                        img.shape()
                    )));
                }
                data.extend_from_slice(img.data());
            }
            let batch = Tensor::new(&[images.len(), 3, size, size], data)?;
            let seeds: Vec<u64> = (0..images.len()).map(|i| eval_spike_seed(cfg.seed, i)).collect();
            let spikes = net.spike_input(&batch, &seeds)?;
            let tokens = net.fused_tokens(&batch, &spikes)?;
            let json = serde_json::json!({ "shape": tokens.shape(), "data": tokens.data() });
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
