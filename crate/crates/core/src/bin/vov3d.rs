use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vov3d::analysis::{analytic_cost, empirical_cost, factorization_ratio, trf_profile, CostReport};
use vov3d::blocks::Variant;
use vov3d::net::{ArchGraph, ModelWeights, Size, VoV3D, DEFAULT_CLASSES};
use vov3d::train::{mean_shifted_drop, robustness_sweep, run_demo, DemoConfig, RobustnessRow};
use vov3d::{gradcheck, Result, Rng, Shape5};

#[derive(Parser)]
#[command(name = "vov3d", version, about = "VoV3D video networks: summaries, cost analysis, gradient checks and desk training")]
struct Cli {
    /// Seed for every random stream; falls back to VOV3D_SEED.
    #[arg(long, global = true, env = "VOV3D_SEED")]
    seed: Option<u64>,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage layout, output sizes and parameter counts.
    Summary(ArchArgs),
    /// Parameter and FLOP report.
    Analyze {
        #[command(flatten)]
        arch: ArchArgs,
        /// Count conv MACs with the instrumented reference loop.
        #[arg(long)]
        empirical: bool,
        /// Directory receiving cost_<spatial>.txt and .json.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Temporal receptive field of every tensor.
    Trf {
        #[command(flatten)]
        arch: ArchArgs,
        /// Directory receiving trf.txt and trf.json.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or one check name.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train the tiny network on synthetic tempo data.
    TrainDemo {
        /// Demo config (TOML); desk preset when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the run log and checkpoints.
        #[arg(long, default_value = "vov3d-demo")]
        out: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy of a trained checkpoint across test strides.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Demo config the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated test strides.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<usize>>,
    },
    /// Print an architecture or demo config as TOML.
    ExportConfig {
        #[arg(value_enum, default_value_t = ConfigKind::Arch)]
        kind: ConfigKind,
        #[command(flatten)]
        arch: ArchArgs,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConfigKind {
    Arch,
    Demo,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value = "M", value_parser = parse_size)]
    size: Size,
    #[arg(long, default_value = "d21d", value_parser = parse_variant)]
    variant: Variant,
    /// Use the desk-scale profile instead of `--size`.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Input side length; repeatable.
    #[arg(long, default_values_t = [224, 256])]
    spatial: Vec<usize>,
    /// Architecture file (TOML); overrides the size and variant flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<Size, String> {
    s.parse().map_err(|e: vov3d::Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: vov3d::Error| e.to_string())
}

impl ArchArgs {
    fn graph(&self) -> Result<ArchGraph> {
        if let Some(path) = &self.config {
            return ArchGraph::from_toml(&std::fs::read_to_string(path)?);
        }
        let g = if self.tiny {
            ArchGraph::tiny(self.variant, self.classes)
        } else {
            ArchGraph::vov3d(self.size, self.variant, self.classes)
        };
        g.validate()?;
        Ok(g)
    }

    fn input(&self, graph: &ArchGraph, spatial: usize) -> Shape5 {
        Shape5::new(1, graph.stem.c_in, self.frames, spatial, spatial)
    }
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Table => print!("{}", table()),
        Format::Structured => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn write_pair(dir: &Path, stem: &str, text: &str, json: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.txt")), text)?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

fn load_demo(path: Option<&Path>) -> Result<DemoConfig> {
    match path {
        Some(p) => DemoConfig::from_toml(&std::fs::read_to_string(p)?),
        None => Ok(DemoConfig::desk()),
    }
}

#[derive(Serialize)]
struct SummaryRow {
    name: String,
    layer: String,
    output: Shape5,
    params: u64,
}

#[derive(Serialize)]
struct Summary {
    model: String,
    input: Shape5,
    rows: Vec<SummaryRow>,
    total_params: u64,
}

fn layer_label(graph: &ArchGraph, name: &str) -> String {
    let stem = &graph.stem;
    match name {
        "conv1" => format!("1x{k}^2, {t}x1^2, {c}", k = stem.k, t = stem.t, c = stem.c_out),
        "conv5" => format!("1x1^2, {}", graph.conv5),
        "pool5" => "global average".into(),
        "fc1" => format!("fc, {}", graph.fc1),
        "fc2" => format!("fc, {}", graph.num_classes),
        stage => graph
            .stages
            .iter()
            .find(|s| s.name == stage)
            .and_then(|s| s.blocks.first().map(|b| (s.blocks.len(), b)))
            .map(|(reps, b)| {
                format!("T-OSA x{reps}: n={} {} t={} inner {} out {}", b.n, b.inner_variant.name(), b.t, b.c_inner, b.c_stage)
            })
            .unwrap_or_default(),
    }
}

fn summary(graph: &ArchGraph, input: Shape5) -> Result<Summary> {
    let cost = analytic_cost(graph, input)?;
    let group_of = |row: &str| -> String {
        match row.split('.').next().unwrap_or(row) {
            "stem" => "conv1".into(),
            s if s.starts_with("conv5") => "conv5".into(),
            s if s.starts_with("fc1") => "fc1".into(),
            s => s.to_string(),
        }
    };
    let rows = graph
        .stage_shapes(input)?
        .into_iter()
        .map(|(name, output)| {
            let params = cost.rows.iter().filter(|r| group_of(&r.name) == name).map(|r| r.params).sum();
            SummaryRow { layer: layer_label(graph, &name), name, output, params }
        })
        .collect();
    Ok(Summary { model: graph.name.clone(), input, rows, total_params: cost.total_params })
}

fn summary_table(s: &Summary) -> String {
    let mut out = format!("# {}  input {}\n", s.model, s.input);
    let _ = writeln!(out, "{:8}  {:52}  {:>18}  {:>10}", "stage", "layer", "output C x T x H x W", "params");
    for r in &s.rows {
        let o = r.output;
        let shape = format!("{}x{}x{}x{}", o.c, o.t, o.h, o.w);
        let _ = writeln!(out, "{:8}  {:52}  {shape:>18}  {:>10}", r.name, r.layer, r.params);
    }
    let _ = writeln!(out, "total params {} ({:.3}M)", s.total_params, s.total_params as f64 / 1e6);
    out
}

#[derive(Serialize)]
struct Ratio {
    d12d_macs: u64,
    d21d_macs: u64,
    ratio: f64,
}

fn factorization_line() -> Result<(Ratio, String)> {
    let (d, e) = factorization_ratio(16, 3, 3, 2, Shape5::new(1, 16, 8, 28, 28))?;
    let r = Ratio { d12d_macs: d, d21d_macs: e, ratio: d as f64 / e as f64 };
    let line = format!("core MAC ratio d12d/d21d at stride 2 (t=3, k=3): {d}/{e} = {:.2}\n", r.ratio);
    Ok((r, line))
}

#[derive(Serialize)]
struct AnalyzeOut {
    reports: Vec<CostReport>,
    factorization: Ratio,
}

fn sweep_table(rows: &[RobustnessRow], tau_train: usize) -> String {
    let mut s = format!("{:>4}  {:>7}  {:>7}\n", "tau", "top1", "drop");
    for r in rows {
        let _ = writeln!(s, "{:>4}  {:>7.4}  {:>7.4}", r.tau, r.top1, r.drop);
    }
    let _ = writeln!(s, "mean drop off tau={tau_train}: {:.4}", mean_shifted_drop(rows, tau_train));
    s
}

fn run(cli: Cli) -> Result<bool> {
    let format = cli.format;
    match cli.command {
        Command::Summary(arch) => {
            let g = arch.graph()?;
            for &s in &arch.spatial {
                let sum = summary(&g, arch.input(&g, s))?;
                emit(format, &sum, || summary_table(&sum))?;
            }
        }
        Command::Analyze { arch, empirical, report } => {
            let g = arch.graph()?;
            let mut reports = Vec::new();
            for &s in &arch.spatial {
                let input = arch.input(&g, s);
                reports.push(if empirical { empirical_cost(&g, input)? } else { analytic_cost(&g, input)? });
            }
            if let Some(dir) = &report {
                for r in &reports {
                    write_pair(dir, &format!("cost_{}", r.input.h), &r.to_table(), &r.to_json()?)?;
                }
            }
            let (factorization, line) = factorization_line()?;
            let out = AnalyzeOut { reports, factorization };
            emit(format, &out, || {
                let mut s: String = out.reports.iter().map(|r| r.to_table()).collect();
                s.push_str(&line);
                s
            })?;
        }
        Command::Trf { arch, report } => {
            let p = trf_profile(&arch.graph()?)?;
            if let Some(dir) = &report {
                write_pair(dir, "trf", &p.to_table(), &p.to_json()?)?;
            }
            emit(format, &p, || p.to_table())?;
        }
        Command::Gradcheck { ops, seeds } => {
            let filter = (ops != "all").then_some(ops.as_str());
            let mut outcomes = gradcheck::run(filter, seeds, cli.seed.unwrap_or(0))?;
            outcomes.sort_by(|a, b| a.name.cmp(&b.name));
            let ok = outcomes.iter().all(|o| o.passed);
            emit(format, &outcomes, || {
                let mut s = format!("{:22}  {:>5}  {:>6}  {:>9}  {:>10}  {:>9}  result\n", "check", "seeds", "coords", "nonsmooth", "max_err", "worst");
                for o in &outcomes {
                    let verdict = if o.passed { "pass" } else { "FAIL" };
                    let _ = writeln!(
                        s,
                        "{:22}  {:>5}  {:>6}  {:>9}  {:>10.3e}  {:>9}  {verdict}",
                        o.name, o.seeds, o.coords, o.nonsmooth, o.max_rel_err, o.worst_seed
                    );
                }
                s
            })?;
            return Ok(ok);
        }
        Command::TrainDemo { config, out, epochs } => {
            let mut cfg = load_demo(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
                cfg.data.seed = seed;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            // Recorded relative to `out` so identical runs write identical files.
            cfg.train.checkpoint_dir = Some(PathBuf::from("checkpoints"));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let mut run = cfg.clone();
            run.train.checkpoint_dir = Some(out.join("checkpoints"));
            let (model, mut log) = run_demo(&run)?;
            log.config.checkpoint_dir = cfg.train.checkpoint_dir.clone();
            model.weights().save(out.join("model.weights"))?;
            std::fs::write(out.join("runlog.json"), log.to_json()?)?;
            emit(format, &log, || {
                let mut s = format!("# {}\n{:>5}  {:>9}  {:>9}  {:>9}\n", log.model, "epoch", "loss", "train", "val");
                for e in &log.epochs {
                    let _ = writeln!(s, "{:>5}  {:>9.4}  {:>9.4}  {:>9.4}", e.epoch, e.mean_loss, e.train_top1, e.val_top1);
                }
                s + &sweep_table(&log.robustness, cfg.train.sampler.stride)
            })?;
        }
        Command::Robustness { checkpoint, config, taus } => {
            let cfg = load_demo(config.as_deref())?;
            let mut model = VoV3D::build(cfg.graph(), &mut Rng::new(0))?;
            model.load_weights(&ModelWeights::load(&checkpoint)?)?;
            let (_, val) = cfg.datasets()?;
            let s = cfg.train.sampler;
            let taus = taus.unwrap_or_else(|| cfg.taus.clone());
            let rows = robustness_sweep(&model, &val, s.num_frames, &taus, s.stride)?;
            emit(format, &rows, || sweep_table(&rows, s.stride))?;
        }
        Command::ExportConfig { kind, arch, out } => {
            let text = match kind {
                ConfigKind::Arch => arch.graph()?.to_toml()?,
                ConfigKind::Demo => DemoConfig { variant: arch.variant, ..DemoConfig::desk() }.to_toml()?,
            };
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
