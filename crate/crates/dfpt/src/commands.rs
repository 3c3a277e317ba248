//! Command implementations behind the CLI. Each writes a self-describing run
//! directory and returns the summary line it prints.

use std::path::{Path, PathBuf};

use dfpt_core::analysis::{count_dual, count_model, prompt_totals, CostReport, GapReport};
use dfpt_core::data::{gen_synth, LabeledDataset, SynthSpec};
use dfpt_core::dfpt::{DualForwardTeacher, PromptConfig};
use dfpt_core::models::{ArchSpec, Checkpoint, StagedModel};
use dfpt_core::nn::Group;
use dfpt_core::trainer::{pretrain_teacher, run, Distiller, Method, Split, TeacherSide, TrainConfig};
use sha2::{Digest, Sha256};

use crate::config::{Provenance, RunConfig};
use crate::error::Result;
use crate::format::{self, load_dataset, save_dataset, write_bytes};
use crate::plot::{line_chart, Series};
use crate::report::{read_gap_rows, read_metrics, read_series, similarity_table};

/// Environment variable naming the root of relative run directories.
pub const RUN_ROOT_ENV: &str = "DFPT_RUN_ROOT";

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const PROMPT_FILE: &str = "prompt.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Git-style object hash: SHA-256 over `blob <len>\0<contents>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// `out`, else the config's output dir; relative paths hang off
/// `$DFPT_RUN_ROOT` when set.
pub fn run_dir(out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    let p = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

fn provenance(seed: u64, inputs: &[PathBuf]) -> Result<Provenance> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(format!("{}  {}", content_hash(&format::read_bytes(p)?), p.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Provenance { seed, inputs })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn write_config(dir: &Path, cfg: &RunConfig, seed: u64, inputs: &[PathBuf]) -> Result<()> {
    let mut c = cfg.clone();
    c.provenance = provenance(seed, inputs)?;
    write_text(&dir.join(CONFIG_FILE), &c.to_toml())
}

fn arch_for(name: &str, ds: &LabeledDataset) -> Result<ArchSpec> {
    Ok(ArchSpec::named(name, ds.classes)?.with_in_channels(ds.image_shape[0]))
}

fn fmt_top1(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Trains the configured teacher with cross-entropy.
pub fn pretrain(cfg: &RunConfig, data_base: &Path, dir: &Path) -> Result<String> {
    let (train, test, inputs) = cfg.load_data(data_base)?;
    let spec = arch_for(&cfg.model.teacher, &train)?;
    let tc = cfg.pretrain_config()?;
    let (_, ckpt, log) = pretrain_teacher::<f32>(&spec, &train, &test, &tc)?;
    format::save(&dir.join(TEACHER_FILE), &ckpt)?;
    write_text(&dir.join(METRICS_FILE), &log.to_csv())?;
    write_config(dir, cfg, tc.seed, &inputs)?;
    Ok(format!(
        "teacher={} test_top1={}",
        spec.name,
        fmt_top1(log.last(Split::Test).map(|r| r.top1))
    ))
}

/// Distils the configured student from a teacher checkpoint.
pub fn distill(cfg: &RunConfig, teacher: &Path, data_base: &Path, dir: &Path) -> Result<String> {
    let tc = cfg.train_config()?;
    let ckpt = format::load(teacher)?;
    if tc.method != Method::CeOnly && ckpt.arch != cfg.model.teacher {
        return Err(dfpt_core::Error::ArchMismatch {
            expected: cfg.model.teacher.clone(),
            got: ckpt.arch.clone(),
        }
        .into());
    }
    let (train, test, mut inputs) = cfg.load_data(data_base)?;
    inputs.push(teacher.to_path_buf());
    let student = arch_for(&cfg.model.student, &train)?;
    let stages = ArchSpec::named(&ckpt.arch, 2)?.num_stages();
    let prompt = cfg.prompt_config(stages);
    let out = run::<f32>(&tc, Some(&prompt), Some(&ckpt), &student, &train, &test)?;
    format::save(&dir.join(STUDENT_FILE), &out.student_ckpt)?;
    if let Some(p) = &out.prompt_ckpt {
        format::save(&dir.join(PROMPT_FILE), p)?;
    }
    write_text(&dir.join(METRICS_FILE), &out.log.to_csv())?;
    write_config(dir, cfg, tc.seed, &inputs)?;
    let last = out.log.last(Split::Test);
    let mut line = format!(
        "method={} student={} top1={}",
        tc.method.label(),
        student.name,
        fmt_top1(last.map(|r| r.top1))
    );
    if let Some(p) = last.and_then(|r| r.prompt_top1) {
        line.push_str(&format!(" prompt_top1={p:.4}"));
    }
    Ok(line)
}

/// Writes `train` and `test` dataset files into `dir`.
pub fn gendata(spec: &SynthSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = gen_synth(spec)?;
    let (a, b) = (dir.join("train"), dir.join("test"));
    save_dataset(&a, &train)?;
    save_dataset(&b, &test)?;
    Ok((a, b))
}

/// Top-1 of a stored model on a dataset file.
pub fn eval(model: &Path, data: &Path) -> Result<f64> {
    let ck = format::load(model)?;
    let m = StagedModel::<f32>::from_checkpoint(&ck, Group::Psi)?;
    let ds = load_dataset(data)?;
    let cfg = TrainConfig {
        method: Method::CeOnly,
        ..TrainConfig::default()
    };
    let mut d = Distiller::new(cfg, m, TeacherSide::None)?;
    Ok(d.evaluate(&ds)?.top1)
}

/// Cost of a zoo model, or of its prompt path when `prompt` is given.
pub fn flops(arch: &str, classes: usize, input: [usize; 3], prompt: Option<&PromptConfig>) -> Result<(CostReport, String)> {
    let spec = ArchSpec::named(arch, classes)?.with_in_channels(input[0]);
    let model = StagedModel::<f32>::build(&spec, 0, "teacher", Group::Theta)?;
    let Some(p) = prompt else {
        let r = count_model(&model, input)?;
        let summary = format!("params={} macs={}", r.total_params(), r.total_macs());
        return Ok((r, summary));
    };
    let dual = DualForwardTeacher::new(model, p.clone(), 0)?;
    let r = count_dual(&dual, input)?;
    let ((pp, pm), (fp, fm)) = prompt_totals(&r);
    let summary = format!(
        "prompt_params={pp} prompt_macs={pm} fusion_params={fp} fusion_macs={fm} total_params={} total_macs={}",
        pp + fp,
        pm + fm
    );
    Ok((r.filtered("prompt"), summary))
}

pub fn gap(rows: &Path) -> Result<GapReport> {
    Ok(GapReport::new(read_gap_rows(rows)?)?)
}

pub fn similarity(a: &Path, b: &Path, split: Split) -> Result<String> {
    Ok(similarity_table(&read_metrics(a)?, &read_metrics(b)?, split))
}

pub fn plot(csv: &Path, cols: &[String], split: &str, out: &Path) -> Result<usize> {
    let series: Vec<Series> = read_series(csv, cols, split)?;
    let title = csv.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    write_text(out, &line_chart(&title, "epoch", &series)?)?;
    Ok(series.len())
}

/// Loads a checkpoint, for callers that only need its metadata.
pub fn inspect(path: &Path) -> Result<Checkpoint> {
    format::load(path)
}
