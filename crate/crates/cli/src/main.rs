use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kdlsq::distill::LossMode;
use kdlsq::harness::{
    model_gradcheck, quantized_model_size, run_experiment, write_jsonl, ExperimentKind,
    ExperimentReport, ExperimentSpec, ModelGradcheckOptions, SweepAxis, MB,
};
use kdlsq::scale_init::{initialize_scales, InitMethod};
use kdlsq::trainer::{accuracy, train_teacher, TrainConfig};
use kdlsq::transformer::{load_checkpoint, save_checkpoint, Mode};
use kdlsq::{BitConfig, ModelConfig, ModelState};

#[derive(Parser)]
#[command(name = "kdlsq", version, about = "Distillation-aware LSQ quantization of small Transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full-precision teacher on the synthetic task.
    TrainTeacher(RunArgs),
    /// One quantized run per seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// W-E-A bit-widths, e.g. 2-2-8.
        #[arg(long)]
        bits: Option<BitConfig>,
        /// gt-only, kd-only or kd+gt.
        #[arg(long)]
        mode: Option<LossMode>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// Accuracy of a checkpoint on the task's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep W=E or A over {2,4,6,8}.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "weight")]
        axis: AxisArg,
        /// Bit-width held fixed on the other axis.
        #[arg(long, default_value_t = 8)]
        fixed: u32,
    },
    /// The three loss modes at each bit config.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "4-4-8,2-2-8")]
        bits: Vec<BitConfig>,
    },
    /// Truncation init against the fixed 4.0 / 16.0 thresholds.
    InitCompare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "2-2-8")]
        bits: Vec<BitConfig>,
    },
    /// Finite-difference check of weight and scale-factor gradients.
    Gradcheck {
        #[arg(long, default_value = "2-2-8")]
        bits: BitConfig,
        #[arg(long, default_value = "kd+gt")]
        mode: LossMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check every n-th weight element.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Model size and compression ratio.
    Size {
        #[arg(long, value_enum, default_value = "bert-base")]
        preset: Preset,
        #[arg(long, default_value = "32-32-32")]
        bits: BitConfig,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; runs use seed .. seed + repetitions.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Teacher checkpoint; trained per seed when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Truncation,
    Experience,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Weight,
    Activation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    BertBase,
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentSpec::default()),
    }
}

impl RunArgs {
    fn spec(&self, kind: ExperimentKind) -> Result<ExperimentSpec> {
        let mut spec = load_spec(self.config.as_deref())?;
        spec.kind = kind;
        spec.base_seed = self.seed;
        if let Some(r) = self.repetitions {
            spec.repetitions = r;
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(t) = &self.teacher {
            spec.teacher.checkpoint = Some(t.clone());
        }
        if let Some(n) = self.train_size {
            spec.task.train_size = n;
        }
        if let Some(n) = self.test_size {
            spec.task.test_size = n;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run_matrix(args: &RunArgs, kind: ExperimentKind, edit: impl FnOnce(&mut ExperimentSpec)) -> Result<bool> {
    let mut spec = args.spec(kind)?;
    edit(&mut spec);
    let report = run_experiment(&spec, Some(&args.out_dir))?;
    print_report(&report, &args.out_dir);
    Ok(report.all_ok())
}

fn print_report(report: &ExperimentReport, dir: &Path) {
    print!("{}", report.to_markdown());
    for r in report.runs.iter().filter(|r| !r.ok()) {
        eprintln!("run {} failed: {}", r.spec.run_id, r.error.as_deref().unwrap_or(""));
    }
    println!("wrote {}", dir.join("summary.csv").display());
}

fn train_teachers(args: &RunArgs) -> Result<bool> {
    let spec = args.spec(ExperimentKind::Single)?;
    let (train_set, test) = spec.task.generate()?;
    let epochs = args.epochs.unwrap_or(spec.teacher.train.epochs);
    for seed in spec.seeds() {
        let cfg = TrainConfig {
            seed,
            epochs,
            ..spec.teacher.train.clone()
        };
        let out = train_teacher(&spec.model, spec.teacher.init_std, &train_set, Some(&test), &cfg)?;
        let dir = args.out_dir.join(format!("s{seed}"));
        save_checkpoint(&out.student, &dir.join("checkpoint.json"))?;
        write_jsonl(&dir.join("metrics.jsonl"), &out.metrics)?;
        let acc = out.final_accuracy.unwrap_or(f64::NAN);
        println!("seed {seed}: test accuracy {:.2}% -> {}", 100.0 * acc, dir.display());
    }
    Ok(true)
}

fn eval(checkpoint: &Path, config: Option<&Path>) -> Result<bool> {
    let spec = load_spec(config)?;
    let state = load_checkpoint(checkpoint)?;
    let (_, test) = spec.task.generate()?;
    let mode = if state.scales.is_empty() {
        Mode::Teacher
    } else {
        Mode::Student
    };
    let acc = accuracy(&state, &test, mode, spec.train.eval_batch_size)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "bits": state.config.bits.to_string(),
            "examples": test.len(),
            "accuracy": acc,
        })
    );
    Ok(true)
}

fn gradcheck(bits: BitConfig, mode: LossMode, seed: u64, stride: usize, tolerance: f64) -> Result<bool> {
    let spec = ExperimentSpec::default();
    let (train_set, _) = spec.task.generate()?;
    let batch = train_set.batch(&[0, 1, 2])?;
    let teacher = ModelState::init(spec.model.clone(), seed, spec.teacher.init_std)?;
    let mut student = teacher.requantized(bits)?;
    initialize_scales(&mut student, &batch, InitMethod::default())?;
    let opts = ModelGradcheckOptions {
        stride,
        ..Default::default()
    };
    let r = model_gradcheck(&teacher, &student, &batch, mode, &opts)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    let ok = r.weights.max_rel_err <= tolerance && r.scales.max_rel_err <= tolerance;
    if !ok {
        eprintln!("relative error above {tolerance}");
    }
    Ok(ok)
}

fn size(preset: Preset, bits: BitConfig) -> Result<bool> {
    let base = match preset {
        Preset::Toy => ModelConfig::toy(),
        Preset::BertBase => ModelConfig::bert_base(),
    };
    let r = quantized_model_size(&base.with_bits(bits));
    println!(
        "{bits}: {} params ({} quantized, {} scale-factors), {} bytes ({:.3} MB), ratio x{:.2}",
        r.params,
        r.quantized_params,
        r.scale_factors,
        r.bytes,
        r.bytes / MB,
        r.ratio
    );
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainTeacher(args) => train_teachers(&args),
        Command::Train {
            run,
            bits,
            mode,
            init,
        } => run_matrix(&run, ExperimentKind::Single, |spec| {
            if let Some(b) = bits {
                spec.train.bits = b;
            }
            if let Some(m) = mode {
                spec.train.loss_mode = m;
            }
            match init {
                Some(InitArg::Experience) => spec.train.init = InitMethod::EXPERIENCE,
                Some(InitArg::Truncation) => spec.train.init = InitMethod::default(),
                None => {}
            }
        }),
        Command::Eval { checkpoint, config } => eval(&checkpoint, config.as_deref()),
        Command::Sweep { run, axis, fixed } => {
            let axis = match axis {
                AxisArg::Weight => SweepAxis::WeightEmbedding { activation: fixed },
                AxisArg::Activation => SweepAxis::Activation { weight: fixed },
            };
            run_matrix(&run, ExperimentKind::BitSweep { axis }, |_| {})
        }
        Command::Ablation { run, bits } => run_matrix(&run, ExperimentKind::Ablation { bits }, |_| {}),
        Command::InitCompare { run, bits } => {
            run_matrix(&run, ExperimentKind::InitCompare { bits }, |_| {})
        }
        Command::Gradcheck {
            bits,
            mode,
            seed,
            stride,
            tolerance,
        } => {
            if stride == 0 {
                bail!("--stride must be at least 1");
            }
            gradcheck(bits, mode, seed, stride, tolerance)
        }
        Command::Size { preset, bits } => size(preset, bits),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
