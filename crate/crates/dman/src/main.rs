use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dman::checkpoint::{self, Checkpoint};
use dman::data::{generate_synthetic, ingest, segment};
use dman::error::{DmanError, Result};
use dman::eval::{rank_eval, CandidateMode, ModelScorer, RankingMetrics};
use dman::model::{train, ModelConfig, ModelParams, Variant};
use dman::runconfig;

#[derive(Parser)]
#[command(
    name = "dman",
    about = "Dynamic memory-based attention network for long behavior sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior log with a planted long-range signal.
    GenData {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        segments: usize,
        #[arg(long)]
        window: usize,
        #[arg(long, default_value_t = 5000)]
        vocab: u32,
        #[arg(long, default_value_t = 0.9)]
        period_strength: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run-config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's out_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank held-out test items and report HR/NDCG/Recall at each cutoff.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "10,50,100")]
        k: String,
        /// `all` or `sampled:<count>`.
        #[arg(long, default_value = "all")]
        candidate_mode: String,
        /// Also write machine-readable key=value metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time user profiling against the full-history scan baseline.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "4,16,64")]
        history_segments: String,
        #[arg(long, default_value_t = 1024)]
        users: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model and its ablations with a shared seed and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "xl,fifo,nran")]
        variants: String,
        #[arg(long, default_value = "10,50")]
        k: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| DmanError::InvalidArgument(format!("bad {what} entry `{p}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            users,
            segments,
            window,
            vocab,
            period_strength,
            seed,
            out,
        } => {
            let log = generate_synthetic(users, segments, window, vocab, period_strength, seed)?;
            log.write_tsv(&out)?;
            println!(
                "wrote {} records for {users} users to {}",
                log.records.len(),
                out.display()
            );
            Ok(())
        }

        Command::Train { config, out } => {
            let mut rc = runconfig::parse_file(&config)?;
            if let Some(out) = out {
                rc.out_path = out;
            }
            let data_path = rc.data_path.clone().ok_or_else(|| {
                DmanError::InvalidArgument("config must set data_path for training".into())
            })?;
            let log = ingest(&data_path)?;
            let histories = segment(&log, rc.model.window, true)?;
            if histories.is_empty() {
                return Err(DmanError::EmptyTestSet);
            }
            let vocab_size = log.max_item() as usize + 1;
            let mut params = ModelParams::init(&rc.model, vocab_size);
            let (train_log, adam) = train(&mut params, &histories, &rc.model)?;

            let loss_path = rc.out_path.with_extension("losslog");
            let mut f = std::fs::File::create(&loss_path)?;
            for line in &train_log.lines {
                writeln!(
                    f,
                    "epoch={} segment={} main={:.6} aux={:.6}",
                    line.epoch, line.segment, line.main_loss, line.aux_loss
                )?;
            }
            checkpoint::save(
                &rc.out_path,
                &Checkpoint {
                    config: rc.model.clone(),
                    params,
                    adam: Some(adam),
                    user_states: Vec::new(),
                },
            )?;
            println!(
                "trained {} users for {} epochs; final main loss {:.4}, aux loss {:.4}",
                histories.len(),
                rc.model.epochs,
                train_log.final_main_loss,
                train_log.final_aux_loss
            );
            println!(
                "checkpoint: {}  loss log: {}",
                rc.out_path.display(),
                loss_path.display()
            );
            Ok(())
        }

        Command::Eval {
            checkpoint: ckpt_path,
            data,
            k,
            candidate_mode,
            out,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let ks: Vec<usize> = parse_list(&k, "k")?;
            let mode = parse_candidate_mode(&candidate_mode)?;
            let log = ingest(&data)?;
            let vocab = ckpt.params.vocab_size() as u32 - 1;
            if log.max_item() > vocab {
                return Err(DmanError::InvalidArgument(format!(
                    "data contains item {} beyond the checkpoint vocabulary {vocab}",
                    log.max_item()
                )));
            }
            let histories = segment(&log, ckpt.config.window, true)?;
            let scorer = ModelScorer {
                params: &ckpt.params,
                cfg: &ckpt.config,
            };
            let metrics = rank_eval(&scorer, &histories, &ks, mode, vocab, ckpt.config.seed)?;
            print_metrics(&metrics, ckpt.config.variant);
            if let Some(out) = out {
                std::fs::write(&out, metrics.to_kv())?;
            }
            Ok(())
        }

        Command::Bench {
            checkpoint: ckpt_path,
            history_segments,
            users,
            out,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let n_list: Vec<usize> = parse_list(&history_segments, "history-segments")?;
            let primary = match ckpt.config.variant {
                Variant::FullScan => Variant::Dman,
                v => v,
            };
            let reports = dman::bench::efficiency_bench(
                &ckpt.params,
                &[primary, Variant::FullScan],
                &n_list,
                users,
                &ckpt.config,
            )?;
            println!(
                "{:<10} {:>4} {:>12} {:>14} {:>14}",
                "variant", "N", "sec/1024u", "scores/user", "analytic"
            );
            let mut kv = String::new();
            for r in &reports {
                println!(
                    "{:<10} {:>4} {:>12.4} {:>14} {:>14}",
                    r.variant.as_str(),
                    r.history_segments,
                    r.seconds_per_1024_users,
                    r.scores_per_user,
                    r.analytic_scores_per_user
                );
                kv.push_str(&r.to_kv());
            }
            if let Some(out) = out {
                std::fs::write(&out, kv)?;
            }
            Ok(())
        }

        Command::Ablate {
            config,
            variants,
            k,
        } => {
            let rc = runconfig::parse_file(&config)?;
            let ks: Vec<usize> = parse_list(&k, "k")?;
            let data_path = rc.data_path.clone().ok_or_else(|| {
                DmanError::InvalidArgument("config must set data_path for ablation".into())
            })?;
            let mut list = vec![Variant::Dman];
            for name in variants.split(',') {
                let v = Variant::parse(name.trim())?;
                if !list.contains(&v) {
                    list.push(v);
                }
            }
            let log = ingest(&data_path)?;
            let histories = segment(&log, rc.model.window, true)?;
            let vocab_size = log.max_item() as usize + 1;
            let vocab = vocab_size as u32 - 1;

            println!(
                "{:<8} {}",
                "variant",
                ks.iter()
                    .map(|k| format!("{:>9} {:>9}", format!("HR@{k}"), format!("NDCG@{k}")))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            for variant in list {
                let cfg = ModelConfig {
                    variant,
                    ..rc.model.clone()
                };
                let mut params = ModelParams::init(&cfg, vocab_size);
                train(&mut params, &histories, &cfg)?;
                let scorer = ModelScorer {
                    params: &params,
                    cfg: &cfg,
                };
                let metrics = rank_eval(
                    &scorer,
                    &histories,
                    &ks,
                    CandidateMode::AllItems,
                    vocab,
                    cfg.seed,
                )?;
                let cells = ks
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        format!("{:>9.4} {:>9.4}", metrics.hit_rate[i], metrics.ndcg[i])
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                println!("{:<8} {}", variant.as_str(), cells);
            }
            Ok(())
        }
    }
}

fn parse_candidate_mode(s: &str) -> Result<CandidateMode> {
    if s == "all" {
        return Ok(CandidateMode::AllItems);
    }
    if let Some(count) = s.strip_prefix("sampled:") {
        let count: usize = count
            .parse()
            .map_err(|_| DmanError::InvalidArgument(format!("bad sample count in `{s}`")))?;
        return Ok(CandidateMode::Sampled(count));
    }
    Err(DmanError::InvalidArgument(format!(
        "candidate mode must be `all` or `sampled:<count>`, got `{s}`"
    )))
}

fn print_metrics(metrics: &RankingMetrics, variant: Variant) {
    println!(
        "{} over {} users:",
        variant.as_str(),
        metrics.users_evaluated
    );
    for (i, k) in metrics.ks.iter().enumerate() {
        println!(
            "  HR@{k}={:.4}  NDCG@{k}={:.4}  Recall@{k}={:.4}",
            metrics.hit_rate[i], metrics.ndcg[i], metrics.recall[i]
        );
    }
}
