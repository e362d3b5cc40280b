use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finedeep::analysis::{
    capture_activations, count_flops, count_params, dump_activations, nsar_report, write_histogram_csv, write_nsar_csv,
};
use finedeep::block::RoutingMode;
use finedeep::gradcheck::check_gradients;
use finedeep::model::corpus::{byte_tokens, split_heldout, synthetic_corpus, unigram_entropy};
use finedeep::model::eval::eval_ppl;
use finedeep::model::experiment::{compare, format_table, ExperimentSpec};
use finedeep::model::train::{train, TrainOptions};
use finedeep::storage::{convert_checkpoint, load_checkpoint, save_checkpoint};
use finedeep::{Arch, LmModel, ModelConfig, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "finedeep", version, about = "Train, inspect and convert expert-partitioned dense transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh model on a byte corpus
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to stdout
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Train in 32-bit floats
        #[arg(long)]
        f32: bool,
        /// Write elapsed_ms as 0 so logs of identical runs compare equal
        #[arg(long)]
        no_timing: bool,
    },
    /// Perplexity of a checkpoint on a corpus
    Ppl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Non-sparse activation rates per layer / sub-layer
    Nsar {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Threshold; repeat for several
        #[arg(long, default_values_t = [0.1])]
        tau: Vec<f64>,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Activation histograms per layer / sub-layer
    Histogram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated, strictly increasing bin edges
        #[arg(long, allow_hyphen_values = true)]
        bins: String,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form parameter count
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form forward FLOPs
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        seq: usize,
    },
    /// Partition a dense checkpoint into M x K experts
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "M")]
        m: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Omit routers (requires K = 1)
        #[arg(long)]
        no_router: bool,
    },
    /// Finite-difference check of every parameter gradient
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Tokens in the checked window
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        /// Std of the re-drawn parameters (gains get 1 + N(0, scale/2));
        /// 0 checks the model exactly as initialised, where small weights
        /// leave some gradients below finite-difference resolution
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
    },
    /// Write captured activations in the FDAC format
    DumpActs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic byte corpus
    GenCorpus {
        #[arg(long)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train variants of a config under shared seeds and tabulate the results
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        variants: Variants,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.1)]
        heldout: f64,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        f32: bool,
        /// Also write per-run results as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variants {
    /// Dense baseline vs the config's expert layout
    Arch,
    /// Sigmoid vs softmax routing
    Routing,
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load(path: &Path) -> Result<LmModel<f64>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run_train<T: Scalar>(
    cfg: &ModelConfig,
    corpus: &[u8],
    steps: usize,
    out: &Path,
    log: &mut dyn Write,
    record_time: bool,
) -> Result<()> {
    let mut io_err = None;
    let opts = TrainOptions { steps, record_time };
    let (model, _) = train::<T>(cfg, corpus, opts, |rec| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", rec.to_json_line()).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics");
    }
    log.flush()?;
    save_checkpoint(&model, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn parse_edges(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad bin edge {p:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, corpus, steps, out, metrics, f32, no_timing } => {
            let cfg = read_config(&config)?;
            let corpus = read(&corpus)?;
            let mut log: Box<dyn Write> = match &metrics {
                Some(p) => Box::new(create(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            if f32 {
                run_train::<f32>(&cfg, &corpus, steps, &out, &mut log, !no_timing)
            } else {
                run_train::<f64>(&cfg, &corpus, steps, &out, &mut log, !no_timing)
            }
        }
        Cmd::Ppl { ckpt, corpus } => {
            let model = load(&ckpt)?;
            println!("{}", eval_ppl(&model, &read(&corpus)?)?);
            Ok(())
        }
        Cmd::Nsar { ckpt, corpus, tau, tokens, out } => {
            let model = load(&ckpt)?;
            let ids = byte_tokens(&read(&corpus)?, model.config().vocab_size)?;
            let caps = capture_activations(&model, &ids, tokens)?;
            let reports = tau.iter().map(|&t| nsar_report(&caps, t)).collect::<finedeep::Result<Vec<_>>>()?;
            let mut w = create(&out)?;
            write_nsar_csv(&mut w, &reports)?;
            w.flush()?;
            for r in &reports {
                println!("tau={} mean={:.6}", r.tau, r.mean_rate());
            }
            Ok(())
        }
        Cmd::Histogram { ckpt, corpus, bins, tokens, out } => {
            let edges = parse_edges(&bins)?;
            let model = load(&ckpt)?;
            let ids = byte_tokens(&read(&corpus)?, model.config().vocab_size)?;
            let caps = capture_activations(&model, &ids, tokens)?;
            let mut w = create(&out)?;
            write_histogram_csv(&mut w, &caps, &edges)?;
            w.flush()?;
            Ok(())
        }
        Cmd::Params { config } => {
            println!("{}", count_params(&read_config(&config)?)?);
            Ok(())
        }
        Cmd::Flops { config, batch, seq } => {
            let flops = count_flops(&read_config(&config)?, batch, seq)?;
            println!("{flops} ({:.2} GFLOPs)", flops as f64 / 1e9);
            Ok(())
        }
        Cmd::Convert { input, m, k, out, no_router } => {
            let model = convert_checkpoint(&input, m, k, !no_router, &out)?;
            println!("{} parameters", model.num_params());
            Ok(())
        }
        Cmd::Gradcheck { config, h, tol, tokens, scale } => {
            let cfg = read_config(&config)?;
            let mut model = LmModel::<f64>::init(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            if scale > 0.0 {
                for t in model.tensors_mut() {
                    *t = if t.ndim() == 1 {
                        Tensor::randn(t.shape(), scale / 2.0, &mut rng).map(|v| v + 1.0)
                    } else {
                        Tensor::randn(t.shape(), scale, &mut rng)
                    };
                }
            }
            let window: Vec<usize> = (0..=tokens).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let params: Vec<_> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let report = check_gradients(
                &params,
                |g, leaves| {
                    let vars = model.vars_from(leaves)?;
                    model.loss_graph(g, &vars, &window)
                },
                h,
                tol,
            )?;
            for ((name, _), err) in model.named_tensors().iter().zip(&report.per_param) {
                println!("{name:<40} {err:.3e}");
            }
            if let Some(w) = &report.worst {
                let names = model.named_tensors();
                println!("worst {}[{}] analytic={:.6e} numeric={:.6e}", names[w.param].0, w.index, w.analytic, w.numeric);
            }
            println!("max_rel_err={:.3e} coordinates={} pass={}", report.max_rel_err, report.coordinates, report.pass);
            if !report.pass {
                bail!("gradient check failed: max relative error {:.3e} > {tol}", report.max_rel_err);
            }
            Ok(())
        }
        Cmd::DumpActs { ckpt, corpus, tokens, out } => {
            let model = load(&ckpt)?;
            let ids = byte_tokens(&read(&corpus)?, model.config().vocab_size)?;
            let caps = dump_activations(&model, &ids, tokens, &out)?;
            for c in &caps {
                println!("{} {}x{}", c.name(), c.values.rows(), c.values.cols());
            }
            Ok(())
        }
        Cmd::GenCorpus { bytes, seed, out } => {
            let data = synthetic_corpus(bytes, seed);
            fs::write(&out, &data).with_context(|| format!("writing {}", out.display()))?;
            println!("unigram entropy {:.4} nats/byte", unigram_entropy(&data)?);
            Ok(())
        }
        Cmd::Compare { config, corpus, variants, steps, seeds, heldout, tokens, tau, f32, json } => {
            let base = read_config(&config)?;
            let data = read(&corpus)?;
            let (train_part, held_part) = split_heldout(&data, heldout)?;
            let variants = match variants {
                Variants::Arch => {
                    if base.arch != Arch::Finedeep {
                        bail!("--variants arch needs an expert config to compare against its dense baseline");
                    }
                    let mut dense = base.clone();
                    dense.arch = Arch::Dense;
                    let label = format!("finedeep M{}K{}", base.sublayers, base.experts_per_sublayer);
                    vec![("dense".to_string(), dense.canonical()), (label, base)]
                }
                Variants::Routing => {
                    if base.arch != Arch::Finedeep {
                        bail!("--variants routing needs an expert config");
                    }
                    [RoutingMode::Sigmoid, RoutingMode::Softmax]
                        .into_iter()
                        .map(|mode| {
                            let mut c = base.clone();
                            c.routing_mode = mode;
                            (mode.to_string(), c)
                        })
                        .collect()
                }
            };
            let spec = ExperimentSpec { steps, seeds, capture_tokens: tokens, tau };
            let progress = |msg: &str| eprintln!("{msg}");
            let rows = if f32 {
                compare::<f32>(&variants, train_part, held_part, &spec, progress)?
            } else {
                compare::<f64>(&variants, train_part, held_part, &spec, progress)?
            };
            println!("unigram entropy (train) {:.4}", unigram_entropy(train_part)?);
            print!("{}", format_table(&rows, tau));
            if let Some(p) = json {
                fs::write(&p, serde_json::to_string_pretty(&rows)?).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
