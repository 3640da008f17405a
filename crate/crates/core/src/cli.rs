//! `psat` command-line interface.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::attacks::PerturbationSet;
use crate::backbone::{count_params, BackbonePlan, Which};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::evaluation::{attack_records, evaluate, render_table, EvalMode, MetricsReport, Subject};
use crate::hypernet::member_param_count;
use crate::model::{AggregatedModel, Member};
use crate::seed::{self, purpose};
use crate::training::{train_avg, train_max, train_msd, train_psat, train_single, History, Strategy};

pub const CHECKPOINT_FILE: &str = "model.psat";
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "psat", about = "Parameter-saving adversarial training", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured strategy and write a checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Attack every member of a checkpoint and write per-example results.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.psat`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics and a table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["avg-surrogate", "per-member-worst"])]
        eval_mode: Option<String>,
    },
    /// Print parameter counts and savings.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge metric JSON files into one comparison table.
    Report {
        /// Metric files written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trade-off accuracy against parameter percentage, as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("psat: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            cmd_train(&cfg)
        }
        Command::Attack { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            cmd_attack(&cfg, checkpoint)
        }
        Command::Eval { common, checkpoint, eval_mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = eval_mode {
                cfg.eval.mode = m.parse::<EvalMode>()?;
            }
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            cmd_eval(&cfg, checkpoint)
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", params_summary(&cfg)?);
            Ok(())
        }
        Command::Report { inputs, out, svg } => cmd_report(&inputs, out, svg),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = c.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        cfg.set_workers(w);
    }
    Ok(cfg)
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Training(format!("{} is locked by another run ({})", dir.display(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Appends a timestamped line to `<dir>/run.log`, the only file that may
/// differ between identical runs.
fn sidecar(dir: &Path, msg: &str) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(dir.join("run.log")) {
        let _ = writeln!(f, "{ts} {msg}");
    }
}

fn model_name(cfg: &RunConfig) -> String {
    match cfg.train.strategy {
        Strategy::Psat => "psat".into(),
        Strategy::Single => match cfg.single_spec_index() {
            Ok(i) => format!("at_{}", cfg.perturbations.specs()[i].norm),
            Err(_) => "at_single".into(),
        },
        Strategy::Max => "at_max".into(),
        Strategy::Avg => "at_avg".into(),
        Strategy::Msd => "at_msd".into(),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out_dir;
    sidecar(out, &format!("train start seed={}", cfg.seed));
    let plan = cfg.build_plan()?;
    let train = cfg.data.load(Split::Train)?;
    let monitor = if cfg.train.eval_every > 0 { Some(cfg.data.load(Split::Test)?) } else { None };
    let monitor = monitor.as_ref();
    let set = &cfg.perturbations;
    let (members, histories): (Vec<Member<f32>>, Vec<(String, History)>) = match cfg.train.strategy {
        Strategy::Psat => {
            let (agg, hs) = train_psat(&plan, &cfg.hypernet, set, &train, &cfg.train, monitor)?;
            let names = agg.norms().iter().map(|n| format!("history_{n}.csv")).collect::<Vec<_>>();
            (agg.members, names.into_iter().zip(hs).collect())
        }
        s => {
            let init = Member::direct(&plan, seed::derive(&[cfg.seed, purpose::MEMBER]));
            let (m, h) = match s {
                Strategy::Single => {
                    let spec = &set.specs()[cfg.single_spec_index()?];
                    let (m, h) = train_single(&plan, init, &train, spec, &cfg.train, monitor)?;
                    (m.with_norm(spec.norm), h)
                }
                Strategy::Max => train_max(&plan, init, &train, set, &cfg.train, monitor)?,
                Strategy::Avg => train_avg(&plan, init, &train, set, &cfg.train, monitor)?,
                Strategy::Msd => train_msd(&plan, init, &train, set, &cfg.train, monitor)?,
                Strategy::Psat => unreachable!(),
            };
            (vec![m], vec![("history.csv".to_string(), h)])
        }
    };
    let ckpt = Checkpoint { plan, members, config_hash: cfg.hash() };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    for (name, h) in &histories {
        h.save(&out.join(name))?;
    }
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg).expect("config serializes") + "\n")?;
    info!("wrote {}", out.join(CHECKPOINT_FILE).display());
    sidecar(out, "train done");
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: Option<PathBuf>) -> Result<Checkpoint<f32>> {
    let path = path.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::<f32>::load(&path)?;
    if ckpt.plan.description() != &cfg.plan {
        return Err(Error::Config(format!("{}: checkpoint plan differs from plan in config", path.display())));
    }
    Ok(ckpt)
}

fn cmd_attack(cfg: &RunConfig, path: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(cfg, path)?;
    let test = cfg.data.load(Split::Test)?;
    sidecar(&cfg.out_dir, "attack start");
    let mut wr = csv::Writer::from_path(cfg.out_dir.join("attacks.csv")).map_err(|e| Error::Format(e.to_string()))?;
    wr.write_record(["member", "example", "norm", "label", "clean_pred", "adv_pred", "delta_norm"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (i, m) in ckpt.members.iter().enumerate() {
        for r in attack_records(&ckpt.plan, m, &test, &cfg.perturbations, &cfg.eval)? {
            wr.write_record([
                i.to_string(),
                r.example.to_string(),
                r.norm.to_string(),
                r.label.to_string(),
                r.clean_pred.to_string(),
                r.adv_pred.to_string(),
                r.delta_norm.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    wr.flush()?;
    sidecar(&cfg.out_dir, "attack done");
    Ok(())
}

/// Evaluates a checkpoint: one member on its own, several as an aggregate.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint<f32>,
    cfg: &RunConfig,
    set: &PerturbationSet,
    name: &str,
) -> Result<MetricsReport> {
    let test = cfg.data.load(Split::Test)?;
    let reference = count_params(&ckpt.plan, Which::All);
    let mut r = if ckpt.members.len() == 1 {
        let subject = Subject::Member { plan: &ckpt.plan, member: &ckpt.members[0] };
        evaluate(&subject, &test, set, &cfg.eval, reference, name)?
    } else {
        let agg = AggregatedModel::new(ckpt.plan.clone(), ckpt.members.clone())?;
        evaluate(&Subject::Aggregate(&agg), &test, set, &cfg.eval, reference, name)?
    };
    r.metadata.config_hash = ckpt.config_hash.clone();
    Ok(r)
}

fn cmd_eval(cfg: &RunConfig, path: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(cfg, path)?;
    sidecar(&cfg.out_dir, "eval start");
    let r = evaluate_checkpoint(&ckpt, cfg, &cfg.perturbations, &model_name(cfg))?;
    let out = &cfg.out_dir;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&r).expect("report serializes") + "\n")?;
    r.write_csv(File::create(out.join("metrics.csv"))?)?;
    let table = render_table(std::slice::from_ref(&r));
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    sidecar(out, "eval done");
    Ok(())
}

/// Text printed by `params`.
pub fn params_summary(cfg: &RunConfig) -> Result<String> {
    let plan: BackbonePlan = cfg.build_plan()?;
    let backbone = count_params(&plan, Which::All);
    let (member, members) = match cfg.train.strategy {
        Strategy::Psat => (member_param_count(&plan, &cfg.hypernet)?, cfg.perturbations.len()),
        _ => (backbone, 1),
    };
    let model = member * members;
    let pct = crate::evaluation::param_savings(model as f64, backbone as f64)?;
    Ok(format!(
        "backbone_params {backbone}\nbackbone_generated_params {}\nmember_params {member}\nmembers {members}\n\
         model_params {model}\nsavings {}\n",
        count_params(&plan, Which::Generated),
        crate::evaluation::format_savings(pct)
    ))
}

fn cmd_report(inputs: &[PathBuf], out: Option<PathBuf>, svg: Option<PathBuf>) -> Result<()> {
    let mut rows = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let r: MetricsReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        r.check().map_err(|e| e.context(p.display()))?;
        rows.push(r);
    }
    let norms: Vec<_> = rows[0].acc_per_norm.iter().map(|a| a.norm).collect();
    if rows.iter().any(|r| r.acc_per_norm.iter().map(|a| a.norm).collect::<Vec<_>>() != norms) {
        return Err(Error::Format("metric files cover different norms".into()));
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.txt"), &table)?;
        let mut wr = csv::Writer::from_path(dir.join("report.csv")).map_err(|e| Error::Format(e.to_string()))?;
        wr.write_record(rows[0].csv_header()).map_err(|e| Error::Format(e.to_string()))?;
        for r in &rows {
            wr.write_record(r.csv_record()).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
    }
    if let Some(path) = svg {
        let pts: Vec<(f64, f64, String)> = rows
            .iter()
            .filter(|r| r.param_count_reference > 0)
            .map(|r| {
                (100.0 * r.param_count_model as f64 / r.param_count_reference as f64, r.acc_tradeoff, r.metadata.model.clone())
            })
            .collect();
        std::fs::write(path, tradeoff_svg(&pts))?;
    }
    Ok(())
}

/// Line chart of trade-off accuracy against parameter percentage.
pub fn tradeoff_svg(points: &[(f64, f64, String)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(pts.iter().map(|p| p.0).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.1).collect());
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\" font-size=\"12\">parameters (% of backbone)</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">trade-off accuracy (%)</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ly = h - 12.0,
        cy = h / 2.0,
    );
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        s += &format!("<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{v:.1}</text>\n", h - m + 14.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        s += &format!("<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" font-size=\"10\">{v:.2}</text>\n", m - 4.0);
    }
    if pts.len() > 1 {
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
    }
    for p in &pts {
        let label = p.2.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        s += &format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"><title>{label}</title></circle>\n",
            sx(p.0),
            sy(p.1)
        );
    }
    s += "</svg>\n";
    s
}
