//! Batch operator surface: dataset generation, training, synthesis,
//! experiments and the runtime self-check.
//!
//! Exit codes: 0 success, 1 self-check failure, 2 usage/config error,
//! 3 numeric divergence, 4 IO/format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use troika::config::RunConfig;
use troika::data::record::{load_dataset, save_dataset};
use troika::data::{generate_shapesmed, write_pgm, Record, Split};
use troika::models::{load_checkpoint, Generator, Segmentor};
use troika::pipeline::{
    plan_strategy_i, plan_strategy_ii, run_experiment, synthesize, train_gan, train_segmentor,
    Strategy,
};
use troika::tensor::Scalar;
use troika::{Error, Result};

#[derive(Parser)]
#[command(name = "troika", version, about = "mask- and class-conditioned adversarial augmentation")]
struct Cli {
    /// Flat key=value configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both data.seed and train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results are identical either way;
    /// `--threads 1` additionally guarantees sequential execution.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run all numerics in 64-bit (verification mode).
    #[arg(long = "f64", global = true)]
    use_f64: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural dataset into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(subcommand)]
        which: TrainCmd,
    },
    /// Synthesize images from a trained generator.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// I (single class, requires --class) or II (balanced).
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump one PGM contact sheet per modality.
        #[arg(long)]
        grid: bool,
    },
    /// Run the full measurement protocol and write CSV + SVG reports.
    Experiment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline, I (requires --class) or II.
        #[arg(long, default_value = "II")]
        strategy: String,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Gradient checks and oracle suites, 64-bit.
    Selfcheck {
        /// Test hook: corrupt the named op's backward rule and prove the
        /// gradient suite catches it.
        #[arg(long, hide = true)]
        inject_backward_fault: Option<String>,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train a segmentor on the train split of a dataset.
    Seg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adversarial game against a frozen segmentor.
    Gan {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the frozen third player.
        #[arg(long)]
        segmentor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation arm: replace segmentor features with zeros.
        #[arg(long)]
        no_third_player: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(2);
        }
    }
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(code)
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Dim(_) | Error::Graph(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data_seed = seed;
        cfg.train_seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = load_config(cli)?;
    macro_rules! with_dtype {
        ($f:ident ( $($arg:expr),* )) => {
            if cli.use_f64 {
                $f::<f64>($($arg),*)
            } else {
                $f::<f32>($($arg),*)
            }
        };
    }
    match &cli.cmd {
        Cmd::GenData { out } => cmd_gen_data(&cfg, out),
        Cmd::Train { which } => match which {
            TrainCmd::Seg { data, out } => with_dtype!(cmd_train_seg(&cfg, data, out)),
            TrainCmd::Gan {
                data,
                segmentor,
                out,
                no_third_player,
            } => with_dtype!(cmd_train_gan(&cfg, data, segmentor, out, *no_third_player)),
        },
        Cmd::Synth {
            checkpoint,
            data,
            strategy,
            class,
            out,
            grid,
        } => with_dtype!(cmd_synth(&cfg, checkpoint, data, strategy, *class, out, *grid)),
        Cmd::Experiment {
            data,
            out,
            strategy,
            class,
        } => with_dtype!(cmd_experiment(&cfg, data, out, strategy, *class)),
        Cmd::Selfcheck {
            inject_backward_fault,
        } => cmd_selfcheck(inject_backward_fault.as_deref()),
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<u8> {
    let records = generate_shapesmed(&cfg.shapesmed())?;
    let manifest = save_dataset(out, &records)?;
    manifest.validate(cfg.n_classes)?;
    println!(
        "wrote {} records ({} classes) to {}",
        records.len(),
        cfg.n_classes,
        out.display()
    );
    Ok(0)
}

fn train_split(records: &[Record]) -> Vec<&Record> {
    records.iter().filter(|r| r.split == Split::Train).collect()
}

fn trace_path_for(out: &Path) -> PathBuf {
    out.with_file_name("loss_trace.csv")
}

fn cmd_train_seg<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<u8> {
    let records = load_dataset(data)?;
    let train = train_split(&records);
    let (seg, trace) = train_segmentor::<T>(&train, &cfg.segmentor_spec(), &cfg.train_config())?;
    seg.to_container().save(out)?;
    let mut csv = String::from("step,total,cross_entropy,jaccard_term\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.step, row.total, row.cross_entropy, row.jaccard_term
        ));
    }
    std::fs::write(trace_path_for(out), csv)?;
    println!(
        "segmentor checkpoint: {} ({} steps, final loss {:.4})",
        out.display(),
        trace.len(),
        trace.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn cmd_train_gan<T: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    segmentor: &Path,
    out: &Path,
    no_third_player: bool,
) -> Result<u8> {
    if !segmentor.exists() {
        return Err(Error::domain(format!(
            "frozen segmentor checkpoint {} does not exist",
            segmentor.display()
        )));
    }
    let records = load_dataset(data)?;
    let train = train_split(&records);
    let frozen = Segmentor::<T>::from_container(&load_checkpoint(segmentor, "segmentor")?)?.freeze();
    let mut tc = cfg.train_config();
    if no_third_player {
        tc.third_player = false;
    }
    let outcome = train_gan::<T>(
        &train,
        &frozen,
        &cfg.generator_spec(),
        &cfg.discriminator_spec(),
        &tc,
    )?;
    outcome.generator.to_container().save(out)?;
    outcome
        .discriminator
        .to_container()
        .save(&out.with_extension("disc.rgt"))?;
    let mut csv = String::from("step,d_loss,g_hinge,g_fm\n");
    for row in &outcome.trace {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.step, row.d_loss, row.g_hinge, row.g_fm
        ));
    }
    std::fs::write(trace_path_for(out), csv)?;
    println!(
        "generator checkpoint: {} ({} steps, third player {})",
        out.display(),
        outcome.trace.len(),
        if tc.third_player { "on" } else { "off" }
    );
    Ok(0)
}

fn parse_strategy(strategy: &str, class: Option<usize>) -> Result<Strategy> {
    match (strategy.to_ascii_uppercase().as_str(), class) {
        ("BASELINE", _) => Ok(Strategy::Baseline),
        ("I", Some(c)) => Ok(Strategy::SingleClass(c)),
        ("I", None) => Err(Error::domain("strategy I requires --class")),
        ("II", _) => Ok(Strategy::Balanced),
        (other, _) => Err(Error::domain(format!(
            "unknown strategy `{other}` (expected baseline, I or II)"
        ))),
    }
}

fn cmd_synth<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    strategy: &str,
    class: Option<usize>,
    out: &Path,
    grid: bool,
) -> Result<u8> {
    if !checkpoint.exists() {
        return Err(Error::domain(format!(
            "generator checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let strategy = parse_strategy(strategy, class)?;
    let gen = Generator::<T>::from_container(&load_checkpoint(checkpoint, "generator")?)?;
    let records = load_dataset(data)?;
    let train = train_split(&records);
    let plan = match strategy {
        Strategy::Baseline => {
            return Err(Error::domain("synth needs strategy I or II"));
        }
        Strategy::SingleClass(c) => {
            if c >= cfg.n_classes {
                return Err(Error::domain(format!("class {c} out of range")));
            }
            plan_strategy_i(&train, c)
        }
        Strategy::Balanced => plan_strategy_ii(&train, cfg.n_classes),
    };
    if plan.is_empty() {
        log::warn!("synthesis plan is empty (no complement records)");
    }
    let synth = synthesize(&gen, &train, &plan)?;
    save_dataset(out, &synth)?;
    if grid {
        write_grids(out, &synth, gen.spec.n_modalities, gen.spec.image_size)?;
    }
    println!("wrote {} synthetic records to {}", synth.len(), out.display());
    Ok(0)
}

/// One contact sheet per modality: up to 16 images tiled 4x4.
fn write_grids(out: &Path, synth: &[Record], n_mod: usize, s: usize) -> Result<()> {
    let n = synth.len().min(16);
    if n == 0 {
        return Ok(());
    }
    let cols = 4.min(n);
    let rows = n.div_ceil(cols);
    for m in 0..n_mod {
        let mut sheet = vec![-1.0f32; rows * s * cols * s];
        for (i, rec) in synth.iter().take(n).enumerate() {
            let (gy, gx) = (i / cols, i % cols);
            for y in 0..s {
                let src = &rec.image.data()[(m * s + y) * s..][..s];
                let dst_off = (gy * s + y) * cols * s + gx * s;
                sheet[dst_off..dst_off + s].copy_from_slice(src);
            }
        }
        write_pgm(&out.join(format!("grid_m{m}.pgm")), &sheet, cols * s, rows * s)?;
    }
    Ok(())
}

fn cmd_experiment<T: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    strategy: &str,
    class: Option<usize>,
) -> Result<u8> {
    let strategy = parse_strategy(strategy, class)?;
    let records = load_dataset(data)?;
    let report = run_experiment::<T>(cfg, &records, strategy)?;
    report.save(out)?;
    println!(
        "report: {} ({} cells, {} paired tests)",
        out.display(),
        report.cells.len(),
        report.wilcoxon.len()
    );
    Ok(0)
}

fn cmd_selfcheck(fault: Option<&str>) -> Result<u8> {
    let results = troika::selfcheck::run_all(fault);
    let mut failed = false;
    for r in &results {
        println!(
            "{} {:<18} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        failed |= !r.passed;
    }
    Ok(if failed { 1 } else { 0 })
}
