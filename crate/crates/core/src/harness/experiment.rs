//! Experiment matrices: single runs, bit sweeps, ablations and
//! init-method comparisons over several seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{LossBreakdown, LossMode};
use crate::error::{Error, Result};
use crate::scale_init::InitMethod;
use crate::trainer::{accuracy, train, train_teacher, TrainConfig, TrainOutcome};
use crate::transformer::{load_checkpoint, save_checkpoint, BitConfig, Mode, ModelConfig, ModelState};

use super::metrics::{write_jsonl, write_summary_csv, SummaryRow};
use super::size::{quantized_model_size, SizeReport};
use super::task::SyntheticTask;

/// Weight/embedding (or activation) widths enumerated by a bit sweep.
pub const SWEEP_BITS: [u32; 4] = [2, 4, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "kebab-case")]
pub enum SweepAxis {
    /// W = E over the sweep set, activations fixed.
    WeightEmbedding { activation: u32 },
    /// Activations over the sweep set, W = E fixed.
    Activation { weight: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// One run per seed with the train config as given.
    Single,
    BitSweep { axis: SweepAxis },
    /// The three loss modes at each bit config.
    Ablation { bits: Vec<BitConfig> },
    /// Truncation init against the fixed experience thresholds.
    InitCompare { bits: Vec<BitConfig> },
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::Single => "single",
            ExperimentKind::BitSweep { .. } => "bit-sweep",
            ExperimentKind::Ablation { .. } => "ablation",
            ExperimentKind::InitCompare { .. } => "init-compare",
        }
    }
}

/// How the full-precision teacher is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    /// Load this checkpoint for every seed instead of training.
    pub checkpoint: Option<PathBuf>,
    pub init_std: f64,
    /// Bits and loss mode are ignored: teachers train at 32 bits on the
    /// ground-truth loss.
    pub train: TrainConfig,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            init_std: 0.1,
            train: TrainConfig {
                epochs: 6,
                lr_weights: 2e-3,
                bits: BitConfig::FULL_PRECISION,
                loss_mode: LossMode::GtOnly,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub teacher: TeacherSpec,
    pub train: TrainConfig,
    pub kind: ExperimentKind,
    pub repetitions: usize,
    /// Seeds are `base_seed .. base_seed + repetitions`.
    pub base_seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            model: ModelConfig::toy(),
            task: SyntheticTask::default(),
            teacher: TeacherSpec::default(),
            train: TrainConfig::default(),
            kind: ExperimentKind::Single,
            repetitions: 5,
            base_seed: 0,
        }
    }
}

/// One cell of the run matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    pub bits: BitConfig,
    pub mode: LossMode,
    pub init: InitMethod,
    pub seed: u64,
}

impl RunSpec {
    fn new(bits: BitConfig, mode: LossMode, init: InitMethod, seed: u64) -> Self {
        Self {
            run_id: format!("{bits}_{mode}_{}_s{seed}", init.label()),
            bits,
            mode,
            init,
            seed,
        }
    }
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        self.teacher.train.validate()?;
        if self.model.vocab != self.task.vocab
            || self.model.num_classes != self.task.num_classes
            || self.model.max_seq < self.task.seq_len
        {
            return Err(Error::Config(
                "model vocab/classes/max_seq do not fit the task".into(),
            ));
        }
        match &self.kind {
            ExperimentKind::BitSweep { axis } => {
                let fixed = match axis {
                    SweepAxis::WeightEmbedding { activation } => *activation,
                    SweepAxis::Activation { weight } => *weight,
                };
                BitConfig::new(fixed, fixed, fixed).validate()?;
            }
            ExperimentKind::Ablation { bits } | ExperimentKind::InitCompare { bits } => {
                if bits.is_empty() {
                    return Err(Error::Config("no bit configs given".into()));
                }
                for b in bits {
                    b.validate()?;
                }
            }
            ExperimentKind::Single => {}
        }
        Ok(())
    }

    /// Every run of the matrix, seeds innermost.
    pub fn plan(&self) -> Vec<RunSpec> {
        let t = &self.train;
        let mut cells: Vec<(BitConfig, LossMode, InitMethod)> = Vec::new();
        match &self.kind {
            ExperimentKind::Single => cells.push((t.bits, t.loss_mode, t.init)),
            ExperimentKind::BitSweep { axis } => {
                for b in SWEEP_BITS {
                    let bits = match axis {
                        SweepAxis::WeightEmbedding { activation } => BitConfig::new(b, b, *activation),
                        SweepAxis::Activation { weight } => BitConfig::new(*weight, *weight, b),
                    };
                    cells.push((bits, t.loss_mode, t.init));
                }
            }
            ExperimentKind::Ablation { bits } => {
                for &b in bits {
                    for mode in LossMode::ALL {
                        cells.push((b, mode, t.init));
                    }
                }
            }
            ExperimentKind::InitCompare { bits } => {
                let truncation = match t.init {
                    InitMethod::Truncation { .. } => t.init,
                    InitMethod::Constant { .. } => InitMethod::default(),
                };
                for &b in bits {
                    for init in [truncation, InitMethod::EXPERIENCE] {
                        cells.push((b, t.loss_mode, init));
                    }
                }
            }
        }
        cells
            .into_iter()
            .flat_map(|(b, m, i)| self.seeds().into_iter().map(move |s| RunSpec::new(b, m, i, s)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherResult {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    /// `None` when the run finished; otherwise the failure.
    pub error: Option<String>,
    pub accuracy: f64,
    pub teacher_accuracy: f64,
    pub final_loss: LossBreakdown,
    pub size: SizeReport,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn summary_row(&self) -> SummaryRow {
        let l = self.final_loss;
        SummaryRow {
            run_id: self.spec.run_id.clone(),
            bits: self.spec.bits.to_string(),
            mode: self.spec.mode.to_string(),
            init: self.spec.init.label().to_string(),
            seed: self.spec.seed,
            status: if self.ok() { "ok".into() } else { "failed".into() },
            accuracy: self.accuracy,
            teacher_accuracy: self.teacher_accuracy,
            hidden: l.hidden,
            att: l.att,
            trm: l.trm,
            pre: l.pre,
            kd: l.kd,
            gt: l.gt,
            total: l.total,
            size_bytes: self.size.bytes,
            ratio: self.size.ratio,
        }
    }
}

/// Mean and spread of one (bits, mode, init) cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub bits: BitConfig,
    pub mode: LossMode,
    pub init: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub size_mb: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: String,
    pub teachers: Vec<TeacherResult>,
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(RunResult::ok)
    }

    pub fn cell(&self, bits: BitConfig, mode: LossMode, init: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.bits == bits && c.mode == mode && c.init == init)
    }

    pub fn teacher_mean(&self) -> f64 {
        mean_std(&self.teachers.iter().map(|t| t.accuracy).collect::<Vec<_>>()).0
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.runs.iter().map(RunResult::summary_row).collect()
    }

    /// Table with one row per cell, teacher first.
    pub fn to_markdown(&self) -> String {
        let pct = |x: f64| 100.0 * x;
        let mut s = String::new();
        let _ = writeln!(s, "# {} ({})\n", self.name, self.kind);
        let _ = writeln!(
            s,
            "| Method | W-E-A (#bit) | Size (MB) | Ratio | Accuracy (%) | Runs |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let accs: Vec<f64> = self.teachers.iter().map(|t| t.accuracy).collect();
        let (m, sd) = mean_std(&accs);
        if let Some(c) = self.cells.first() {
            let fp = c.size_mb * c.ratio;
            let _ = writeln!(
                s,
                "| teacher | 32-32-32 | {fp:.3} | 1.0 | {:.2} ± {:.2} | {} |",
                pct(m),
                pct(sd),
                accs.len()
            );
        }
        for c in &self.cells {
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.2} | {:.2} ± {:.2} | {}{} |",
                c.label,
                c.bits,
                c.size_mb,
                c.ratio,
                pct(c.mean_accuracy),
                pct(c.std_accuracy),
                c.runs - c.failed,
                if c.failed > 0 {
                    format!(" ({} failed)", c.failed)
                } else {
                    String::new()
                }
            );
        }
        s
    }
}

/// Mean and sample standard deviation; zero spread for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell_label(kind: &ExperimentKind, spec: &RunSpec) -> String {
    match kind {
        ExperimentKind::Ablation { .. } => spec.mode.ablation_label().to_string(),
        ExperimentKind::InitCompare { .. } => format!("init: {}", spec.init.label()),
        _ => format!("student ({})", spec.mode),
    }
}

/// Groups finished runs by cell, in plan order.
pub fn summarize(kind: &ExperimentKind, runs: &[RunResult]) -> Vec<CellSummary> {
    let mut order: Vec<(BitConfig, LossMode, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        let key = (r.spec.bits, r.spec.mode, r.spec.init.label().to_string());
        if !order.contains(&key) {
            order.push(key.clone());
        }
        groups
            .entry((key.0.to_string(), key.1.to_string(), key.2))
            .or_default()
            .push(r);
    }
    order
        .into_iter()
        .map(|(bits, mode, init)| {
            let rs = &groups[&(bits.to_string(), mode.to_string(), init.clone())];
            let accs: Vec<f64> = rs.iter().filter(|r| r.ok()).map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            CellSummary {
                label: cell_label(kind, &rs[0].spec),
                bits,
                mode,
                init,
                runs: rs.len(),
                failed: rs.len() - accs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                size_mb: rs[0].size.megabytes(),
                ratio: rs[0].size.ratio,
            }
        })
        .collect()
}

struct Teacher {
    state: ModelState,
    accuracy: f64,
    outcome: Option<TrainOutcome>,
}

fn obtain_teacher(spec: &ExperimentSpec, seed: u64, train_set: &Dataset, test: &Dataset) -> Result<Teacher> {
    let cfg = TrainConfig {
        seed,
        ..spec.teacher.train.clone()
    };
    let (state, outcome) = match &spec.teacher.checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "missing teacher checkpoint {}",
                    path.display()
                )));
            }
            (load_checkpoint(path)?, None)
        }
        None => {
            let out = train_teacher(&spec.model, spec.teacher.init_std, train_set, None, &cfg)?;
            (out.student.clone(), Some(out))
        }
    };
    let accuracy = accuracy(&state, test, Mode::Teacher, cfg.eval_batch_size)?;
    Ok(Teacher {
        state,
        accuracy,
        outcome,
    })
}

fn run_one(
    spec: &ExperimentSpec,
    run: &RunSpec,
    teacher: &Teacher,
    train_set: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> RunResult {
    let cfg = TrainConfig {
        bits: run.bits,
        loss_mode: run.mode,
        init: run.init,
        seed: run.seed,
        ..spec.train.clone()
    };
    let size = quantized_model_size(&teacher.state.config.clone().with_bits(run.bits));
    let mut result = RunResult {
        spec: run.clone(),
        error: None,
        accuracy: f64::NAN,
        teacher_accuracy: teacher.accuracy,
        final_loss: LossBreakdown::default(),
        size,
    };
    let outcome = train(&teacher.state, train_set, Some(test), &cfg);
    match outcome {
        Ok(out) => {
            result.accuracy = out.final_accuracy.unwrap_or(f64::NAN);
            result.final_loss = out.metrics.last().map(|m| m.loss).unwrap_or_default();
            if let Some(dir) = out_dir {
                let dir = dir.join("runs").join(&run.run_id);
                let written = write_jsonl(&dir.join("metrics.jsonl"), &out.metrics)
                    .and_then(|_| save_checkpoint(&out.student, &dir.join("checkpoint.json")))
                    .and_then(|_| {
                        Ok(fs::write(
                            dir.join("calibration.json"),
                            serde_json::to_vec_pretty(&out.calibration)?,
                        )?)
                    });
                if let Err(e) = written {
                    result.error = Some(e.to_string());
                }
            }
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// Runs the whole matrix. Teachers are trained (or loaded) once per seed;
/// runs execute in parallel and are reported in plan order. With `out_dir`
/// set, per-run metrics and checkpoints, `summary.csv`, `report.md` and
/// `report.json` are written there.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let (train_set, test) = spec.task.generate()?;
    let seeds = spec.seeds();
    let teachers: Vec<Teacher> = seeds
        .par_iter()
        .map(|&s| obtain_teacher(spec, s, &train_set, &test))
        .collect::<Result<_>>()?;
    if let Some(dir) = out_dir {
        for (seed, t) in seeds.iter().zip(&teachers) {
            let d = dir.join("teachers").join(format!("s{seed}"));
            save_checkpoint(&t.state, &d.join("checkpoint.json"))?;
            if let Some(out) = &t.outcome {
                write_jsonl(&d.join("metrics.jsonl"), &out.metrics)?;
            }
        }
    }
    let by_seed: BTreeMap<u64, &Teacher> = seeds.iter().copied().zip(&teachers).collect();

    let runs: Vec<RunResult> = spec
        .plan()
        .par_iter()
        .map(|r| run_one(spec, r, by_seed[&r.seed], &train_set, &test, out_dir))
        .collect();

    let report = ExperimentReport {
        name: spec.name.clone(),
        kind: spec.kind.label().to_string(),
        teachers: seeds
            .iter()
            .zip(&teachers)
            .map(|(&seed, t)| TeacherResult {
                seed,
                accuracy: t.accuracy,
            })
            .collect(),
        cells: summarize(&spec.kind, &runs),
        runs,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_summary_csv(&dir.join("summary.csv"), &report.summary_rows())?;
        fs::write(dir.join("report.md"), report.to_markdown())?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(spec)?)?;
    }
    Ok(report)
}
