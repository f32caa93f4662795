use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use vt_core::accounting::{count_flops, count_params, reduction_report};
use vt_core::checkpoint::{load_checkpoint, save_checkpoint};
use vt_core::data::ShapeGenerator;
use vt_core::gradcheck::{run_gradcheck_suite, GRADCHECK_TOL};
use vt_core::image::Image;
use vt_core::model::{Architecture, Family, ModelConfig, Variant};
use vt_core::train::{accuracy, loss_summary, train_toy, TrainOptions};
use vt_core::visualize::visualize_attention;
use vt_core::{TensorError, VtError};

#[derive(Parser)]
#[command(name = "vt", version, about = "Visual transformer models, cost accounting and toy training")]
struct Cli {
    /// Shard batched work across threads. Low-order bits of results may
    /// differ from the default single-threaded mode.
    #[arg(long, global = true)]
    parallel: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layers, output shapes and parameter counts of a model.
    Summary {
        #[arg(long)]
        config: PathBuf,
    },
    /// Count multiply-accumulates per layer and stage.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Square input resolution; defaults to the model's own.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Compare a VT model with its baseline ResNet stage by stage.
    Reduction {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every VT component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train the reduced VT network on synthetic shapes.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Model config; defaults to the built-in toy network.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the per-step loss, one value per line.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Export tokenizer attention of a checkpoint as heatmaps.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM or PGM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write blue-to-red PPM heatmaps.
        #[arg(long)]
        colormap: bool,
    },
    /// Write synthetic shape samples as PPM files.
    GenShapes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = vt_core::data::SHAPE_NOISE)]
        noise: f32,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<VtError> for Failure {
    fn from(e: VtError) -> Self {
        let msg = e.to_string();
        match e {
            VtError::Io(_) | VtError::Checkpoint(_) | VtError::Truncated(_) | VtError::Image(_) => Failure::Io(msg),
            VtError::Numerical(_) | VtError::Tensor(TensorError::NonFinite { .. }) => Failure::Numerical(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        VtError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn read_config(path: &Path) -> Result<ModelConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(ModelConfig::from_json(&text)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    vt_core::tensor::set_parallel(cli.parallel);
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Summary { config } => {
            let cfg = read_config(&config)?;
            let arch = Architecture::new(&cfg)?;
            let report = count_params(&arch)?;
            writeln!(out, "{}", cfg.to_json())?;
            writeln!(out, "input {0}x{0}", arch.input_size())?;
            write!(out, "{}", report.layer_table())?;
            write!(out, "{}", report.stage_table())?;
            writeln!(out, "total parameters: {}", report.total.params)?;
        }
        Command::Flops { config, input, json } => {
            let cfg = read_config(&config)?;
            let arch = Architecture::new(&cfg)?;
            let report = count_flops(&arch, input.unwrap_or(arch.input_size()))?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report.to_json()).expect("json value"))?;
            } else {
                write!(out, "{}", report.layer_table())?;
                write!(out, "{}", report.stage_table())?;
            }
        }
        Command::Reduction { family, input, json } => {
            let vt = Architecture::new(&ModelConfig { input_size: Some(input), ..ModelConfig::new(family, Variant::Vt) })?;
            let base =
                Architecture::new(&ModelConfig { input_size: Some(input), ..ModelConfig::new(family, Variant::Baseline) })?;
            let report = reduction_report(&vt, &base, input)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report.to_json()).expect("json value"))?;
            } else {
                writeln!(out, "{family} @ {input}x{input}, ratio = baseline / VT")?;
                write!(out, "{}", report.table())?;
            }
        }
        Command::Gradcheck { seed, eps } => {
            if !(eps > 0.0) {
                return Err(Failure::Usage(format!("--eps must be positive, got {eps}")));
            }
            let cases = run_gradcheck_suite(seed, eps)?;
            let mut failed = 0;
            for case in &cases {
                let verdict = if case.passed() { "PASS" } else { "FAIL" };
                writeln!(
                    out,
                    "{verdict} {:<24} max rel err {:.3e} over {} coords",
                    case.name, case.report.max_rel_error, case.report.coords_checked
                )?;
                failed += usize::from(!case.passed());
            }
            if failed > 0 {
                return Err(Failure::Numerical(format!("{failed} case(s) above tolerance {GRADCHECK_TOL:e}")));
            }
        }
        Command::TrainToy { steps, batch, lr, seed, out: path, config, loss_log } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => ModelConfig::toy(),
            };
            if batch == 0 || !(lr > 0.0) {
                return Err(Failure::Usage("--batch and --lr must be positive".into()));
            }
            let opts = TrainOptions { steps, batch, lr, seed, ..TrainOptions::default() };
            let (model, losses) = train_toy(&cfg, &opts)?;
            save_checkpoint(&model, &path)?;
            if let Some(log_path) = loss_log {
                let text: String = losses.iter().map(|l| format!("{l}\n")).collect();
                std::fs::write(log_path, text)?;
            }
            let acc = accuracy(&model, &ShapeGenerator::new(seed), 512)?;
            match loss_summary(&losses, 10, 100) {
                Some((first, last)) => writeln!(out, "steps {steps}: loss {first:.4} -> {last:.4}, accuracy {acc:.4}")?,
                None => writeln!(out, "steps 0: untrained model, accuracy {acc:.4}")?,
            }
            writeln!(out, "checkpoint written to {}", path.display())?;
        }
        Command::Tokenize { ckpt, image, out_dir, colormap } => {
            let model = load_checkpoint(&ckpt)?;
            let img = Image::read(&image)?;
            let maps = visualize_attention(&model, &img, &out_dir, colormap)?;
            for m in &maps {
                info!("{}: column sum {:.6}", m.path.display(), m.column_sum);
            }
            writeln!(out, "wrote {} heatmaps to {}", maps.len(), out_dir.display())?;
        }
        Command::GenShapes { seed, n, out_dir, noise } => {
            if n == 0 || !(noise >= 0.0) {
                return Err(Failure::Usage("--n must be at least 1 and --noise non-negative".into()));
            }
            std::fs::create_dir_all(&out_dir)?;
            let g = ShapeGenerator::new(seed).with_noise(noise);
            for i in 0..n as u64 {
                let s = g.sample(i);
                Image::from_tensor(&s.image)?.write(out_dir.join(format!("{i:05}_{}.ppm", s.label)))?;
            }
            writeln!(out, "wrote {n} samples to {}", out_dir.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(3)
        }
    }
}
