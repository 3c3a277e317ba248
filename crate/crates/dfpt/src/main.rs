use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dfpt::commands::{self, run_dir};
use dfpt::config::RunConfig;
use dfpt::{IoError, Result};
use dfpt_core::data::SynthSpec;
use dfpt_core::dfpt::PromptConfig;
use dfpt_core::models::ArchSpec;
use dfpt_core::trainer::{Method, Split};

/// Dual-forward path teacher distillation experiments.
#[derive(Parser)]
#[command(name = "dfpt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a teacher with cross-entropy.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distil a student from a pre-trained teacher.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// ce, kd, dfpt or dfpt-t (overrides the config).
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        teacher_lr_scale: Option<f64>,
    },
    /// Cost, gap and similarity reports.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Write a synthetic dataset as `train` and `test` files.
    Gendata {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-1 accuracy of a model checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Plot CSV columns against epoch as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        /// Rows to keep when the CSV has a `split` column.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory (defaults to the config's output dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Parameter and MAC counts of a model or its prompt path.
    Flops {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 100)]
        classes: usize,
        /// Input extent as C,H,W.
        #[arg(long, value_delimiter = ',', default_value = "3,32,32")]
        input: Vec<usize>,
        /// Prompt settings such as `r1=4,4,4,4 r2=0.5 k=3,5,7`.
        #[arg(long, num_args = 0..)]
        prompt: Option<Vec<String>>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Teacher/student gap table from `method,teacher,student` rows.
    Gap {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-epoch KL columns of two metrics CSVs side by side.
    Similarity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn usage(msg: &str) -> IoError {
    IoError::Config { line: 0, msg: msg.to_string() }
}

fn list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| usage(&format!("`{x}` is not a count"))))
        .collect()
}

fn prompt_settings(tokens: &[String], stages: usize) -> Result<PromptConfig> {
    let mut p = PromptConfig::for_stages(stages);
    for tok in tokens.iter().flat_map(|t| t.split_whitespace()) {
        let (k, v) = tok.split_once('=').ok_or_else(|| usage(&format!("prompt setting `{tok}` is not key=value")))?;
        match k {
            "r1" => p.r1 = list(v)?,
            "r2" => p.r2 = v.parse().map_err(|_| usage(&format!("r2 `{v}` is not a number")))?,
            "k" | "kernels" => p.kernels = list(v)?,
            "blocks" => p.blocks = list(v)?,
            "fusion" => p.fusion_convs = v.parse().map_err(|_| usage(&format!("fusion `{v}` is not a count")))?,
            other => return Err(IoError::UnknownKey(other.to_string())),
        }
    }
    Ok(p)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.is_file() {
        return Err(usage(&format!("config file {} not found", path.display())));
    }
    RunConfig::load(path)
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn apply_overrides(cfg: &mut RunConfig, run: &RunArgs, method: Option<&str>, scale: Option<f64>) -> Result<()> {
    if let Some(m) = method {
        let m = Method::parse(m).ok_or_else(|| usage(&format!("unknown method `{m}`")))?;
        cfg.train.method = m.label().into();
    }
    if let Some(s) = scale {
        cfg.train.teacher_lr_scale = s;
    }
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    cfg.resolve()
}

fn emit(text: &str, csv: Option<(&Path, &str)>) -> Result<()> {
    print!("{text}");
    if let Some((p, body)) = csv {
        dfpt::format::write_bytes(p, body.as_bytes())?;
    }
    Ok(())
}

fn split_arg(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| usage(&format!("split must be train or test, got `{s}`")))
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { run } => {
            let mut cfg = load_config(&run.config)?;
            apply_overrides(&mut cfg, &run, None, None)?;
            let dir = run_dir(run.out.as_deref(), &cfg);
            println!("{}", commands::pretrain(&cfg, &base_of(&run.config), &dir)?);
        }
        Cmd::Distill {
            run,
            method,
            teacher,
            teacher_lr_scale,
        } => {
            let mut cfg = load_config(&run.config)?;
            apply_overrides(&mut cfg, &run, method.as_deref(), teacher_lr_scale)?;
            let dir = run_dir(run.out.as_deref(), &cfg);
            println!("{}", commands::distill(&cfg, &teacher, &base_of(&run.config), &dir)?);
        }
        Cmd::Analyze { what } => match what {
            Analyze::Flops {
                arch,
                classes,
                input,
                prompt,
                csv,
            } => {
                let input: [usize; 3] = input.try_into().map_err(|_| usage("--input takes C,H,W"))?;
                let stages = ArchSpec::named(&arch, classes)?.num_stages();
                let p = prompt.map(|t| prompt_settings(&t, stages)).transpose()?;
                let (report, summary) = commands::flops(&arch, classes, input, p.as_ref())?;
                let body = report.to_csv();
                emit(&report.to_text(), csv.as_deref().map(|c| (c, body.as_str())))?;
                println!("{summary}");
            }
            Analyze::Gap { rows, csv } => {
                let r = commands::gap(&rows)?;
                let body = r.to_csv();
                emit(&r.to_text(), csv.as_deref().map(|c| (c, body.as_str())))?;
            }
            Analyze::Similarity { a, b, split, csv } => {
                let t = commands::similarity(&a, &b, split_arg(&split)?)?;
                emit(&t, csv.as_deref().map(|c| (c, t.as_str())))?;
            }
        },
        Cmd::Gendata {
            classes,
            per_class,
            size,
            channels,
            difficulty,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                per_class,
                size,
                channels,
                difficulty,
                seed,
            };
            let (a, b) = commands::gendata(&spec, &out)?;
            println!("wrote {} {}", a.display(), b.display());
        }
        Cmd::Eval { model, data } => {
            println!("top1={}", commands::eval(&model, &data)?);
        }
        Cmd::Plot { csv, cols, split, out } => {
            let n = commands::plot(&csv, &cols, &split, &out)?;
            println!("wrote {} ({n} series)", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == 2 {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(code as u8)
        }
    }
}
