use clap::{Parser, Subcommand};
use mate::ablate::{run_ablation, seed_list, Axis};
use mate::checkpoint::Checkpoint;
use mate::config::RunConfig;
use mate::eval::{evaluate, MetricsReport};
use mate::train::{build_datasets, train};
use mate::{MateError, Result};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mate", version, about = "Train and evaluate matryoshka audio-text embeddings")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, metrics and run record.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "mate-run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out trials of its config.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write metrics.jsonl and metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every value of one axis on shared seeds and tabulate.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// strategy, K or mse_kl
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = "mate-ablation")]
        out: PathBuf,
    },
    /// Print a checkpoint's dimensions and projection-head summary.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn exit_code(e: &MateError) -> u8 {
    match e {
        MateError::Numeric(_) | MateError::Shape { .. } => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_metrics(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    for r in reports {
        r.write_jsonl(&mut jsonl)?;
    }
    let mut csv = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let mut one = Vec::new();
        r.write_csv(&mut one)?;
        let text = String::from_utf8(one).expect("csv is UTF-8");
        // keep a single header line
        let body = if i == 0 { &text[..] } else { text.split_once('\n').map_or("", |x| x.1) };
        csv.extend_from_slice(body.as_bytes());
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("epoch {}  trials {} positive / {} negative", r.epoch, r.n_pos, r.n_neg);
    println!("{:>5}  {:>8}  {:>8}  {:>8}", "dim", "AP", "EER", "AUC");
    for (d, m) in &r.per_dim {
        let tag = if *d == r.full_dim { "" } else { "  (diagnostic)" };
        println!(
            "{d:>5}  {:>8.4}  {:>8.4}  {:>8.4}{tag}",
            m.ap, m.eer, m.auc
        );
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let data = build_datasets(&cfg, cfg.seed)?;
    let outcome = match train(&cfg, &data) {
        Ok(o) => o,
        Err(e) => {
            if let MateError::Numeric(msg) = &e {
                fs::write(out.join("failure.txt"), format!("{msg}\n"))?;
            }
            return Err(e);
        }
    };
    let ckpt = Checkpoint {
        params: outcome.params,
        seed: cfg.seed,
        config_fingerprint: cfg.fingerprint(),
        heads: Some(outcome.heads),
    };
    ckpt.save(&out.join("checkpoint.mate"))?;
    write_metrics(out, &outcome.record.evals)?;
    let record = serde_json::to_string_pretty(&outcome.record)
        .map_err(|e| MateError::Format(e.to_string()))?;
    fs::write(out.join("record.json"), record + "\n")?;
    if let Some(r) = outcome.record.final_eval() {
        print_report(r);
    }
    println!("run fingerprint {}", outcome.record.fingerprint());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, config: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut cfg = RunConfig::load(config)?;
    cfg.seed = ckpt.seed;
    if cfg.model != ckpt.params.dims {
        return Err(MateError::Config {
            field: "model".into(),
            message: format!("checkpoint has dims {:?}", ckpt.params.dims),
        });
    }
    if cfg.fingerprint() != ckpt.config_fingerprint {
        log::warn!("config differs from the one the checkpoint was trained with");
    }
    let data = build_datasets(&cfg, cfg.seed)?;
    let schedule = cfg.prefix_schedule()?;
    let epoch = ckpt.heads.as_ref().map_or(0, |h| h.epoch);
    let report = evaluate(&ckpt.params, &data.test, &data.trials, &schedule, &cfg.fingerprint(), epoch)?;
    print_report(&report);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_metrics(dir, std::slice::from_ref(&report))?;
    }
    Ok(())
}

fn cmd_ablate(config: &Path, axis: &str, seeds: usize, out: &Path) -> Result<()> {
    let axis: Axis = axis.parse()?;
    if seeds == 0 {
        return Err(MateError::Usage("--seeds must be at least 1".into()));
    }
    let cfg = RunConfig::load(config)?;
    let table = run_ablation(&cfg, axis, &seed_list(cfg.seed, seeds))?;
    create_dir(out)?;
    let stem = format!("ablation_{axis}");
    table.write_csv(File::create(out.join(format!("{stem}.csv")))?)?;
    let text = table.to_text();
    fs::write(out.join(format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_inspect(ckpt_path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let d = ckpt.params.dims;
    println!(
        "dims F={} H={} D={} P={}  parameters {}",
        d.features,
        d.hidden,
        d.embed,
        d.phonemes,
        ckpt.params.num_params()
    );
    println!("seed {}  config {}", ckpt.seed, ckpt.config_fingerprint);
    let Some(h) = &ckpt.heads else {
        println!("no projection heads stored");
        return Ok(());
    };
    println!("heads from epoch {} over {} texts", h.epoch, h.corpus_size);
    let total: f64 = h.svd.s.iter().sum();
    println!("singular values (sum {total:.6}):");
    let mut cum = 0.0;
    for (i, s) in h.svd.s.iter().enumerate().take(16) {
        cum += s;
        println!("  {:>3}  {s:.6e}  cumulative {:.4}", i + 1, cum / total);
    }
    if h.svd.s.len() > 16 {
        println!("  ... {} more", h.svd.s.len() - 16);
    }
    for (dim, head) in &h.heads {
        println!("head {dim:>4}  frobenius norm {:.6}", head.norm());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Train { config, seed, out } => cmd_train(config, *seed, out),
        Command::Eval { ckpt, config, out } => cmd_eval(ckpt, config, out.as_deref()),
        Command::Ablate {
            config,
            axis,
            seeds,
            out,
        } => cmd_ablate(config, axis, *seeds, out),
        Command::Inspect { ckpt } => cmd_inspect(ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
