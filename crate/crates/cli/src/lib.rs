//! `stn` command line: dataset generation, training, evaluation, dumps,
//! neighborhood statistics, gradient audit and ablation sweeps.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use stn_core::checkpoint;
use stn_core::gradcheck::{gradcheck, GradcheckConfig};
use stn_core::network::Network;
use stn_core::tensor::Tape;
use stn_core::{BlockConfig, Head, NetworkConfig, PointCloud, Scalar, TransformFamily};
use stn_data::dataset::{load_dataset, Sample};
use stn_data::io::write_cloud;
use stn_data::stats::{neighborhood_std_stats, welch_t_test, StdStats, WelchResult};
use stn_data::{make_dataset, Augment, DatasetConfig, ShapeKind, Split};
use stn_train::ablation::{ablation_graphs, ablation_layers, GraphSweep};
use stn_train::run::run_experiment;
use stn_train::{evaluate_split, AdamConfig, ExperimentConfig, Metrics, Precision, TrainConfig};

/// Audit tolerance of `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser, Serialize)]
#[command(name = "stn", version, about = "Spatial-transformer point cloud networks", args_override_self = true)]
pub struct Cli {
    /// Seed for everything the subcommand draws at random.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Where outputs are written.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// key=value defaults; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic part-segmentation dataset into --out-dir.
    GenData(GenDataArgs),
    /// Train a network; writes <out-dir>/<config hash>-s<seed>/.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Write every transformer's coordinates for one shape as cloud files.
    TransformDump(DumpArgs),
    /// Write every transformer's k-NN graph for one shape.
    KnnDump(DumpArgs),
    /// Neighborhood spread before/after a transformer, with Welch's t-test.
    Stats(StatsArgs),
    /// Finite-difference audit of a small random network.
    Gradcheck(GradcheckArgs),
    /// Graph-count or per-layer ablation sweep; writes a CSV table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Comma-separated shape kinds.
    #[arg(long, value_delimiter = ',', default_value = "table,rocket,earphone,lamp")]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub per_kind: usize,
    #[arg(long, default_value_t = 512)]
    pub n_points: usize,
    /// none, rigid or rigid+jitter
    #[arg(long, default_value = "none")]
    pub augment: String,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ModelArgs {
    /// fixed, affine, projective or deformable
    #[arg(long, default_value = "deformable")]
    pub family: String,
    /// Transformers per block.
    #[arg(long, default_value_t = 2)]
    pub graphs: usize,
    /// Sub-feature width per transformer.
    #[arg(long, default_value_t = 16)]
    pub f: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 10)]
    pub k_nn: usize,
    /// Comma-separated hidden widths of the head.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub head_hidden: Vec<usize>,
    /// seg or cls
    #[arg(long, default_value = "seg")]
    pub task: String,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long)]
    pub freeze_transforms: bool,
    /// f32 or f64
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Position of the shape within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Dataset whose clouds are the "before" side.
    #[arg(long)]
    pub data: PathBuf,
    /// Transformed clouds of this checkpoint are the "after" side.
    #[arg(long, conflicts_with = "after", required_unless_present = "after")]
    pub checkpoint: Option<PathBuf>,
    /// A second dataset with the same entries as the "after" side.
    #[arg(long)]
    pub after: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub transformer: usize,
    /// Neighborhood size for the spread statistic.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Parameter entries to check.
    #[arg(long, default_value_t = 50)]
    pub params: usize,
    #[arg(long, default_value_t = 32)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// graphs or layers
    #[arg(long, default_value = "graphs")]
    pub which: String,
    /// Comma-separated seeds; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Width per transformer in the fixed-f regime.
    #[arg(long, default_value_t = 32)]
    pub fixed_f: usize,
    /// Total width k*f in the fixed-budget regime.
    #[arg(long, default_value_t = 64)]
    pub budget: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match with_config_defaults(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            2
        }
    }
}

/// Joins an error's causes, skipping any already spelled out by an outer message.
fn chain(e: &anyhow::Error) -> String {
    let mut s = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !s.contains(&msg) {
            if !s.is_empty() {
                s.push_str(": ");
            }
            s.push_str(&msg);
        }
    }
    s
}

/// Parses a key=value config file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got '{line}'", n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Splices config-file values in as flags right after the subcommand, so
/// any flag given on the command line comes later and overrides them.
fn with_config_defaults(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let cmd = Cli::command();
    let Some((pos, sub)) = strs
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s.clone())))
    else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {path}"))?;
    let entries = parse_config_file(&text).with_context(|| format!("malformed config file {path}"))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!("malformed config file {path}: 'config' cannot be set from a config file");
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .with_context(|| format!("malformed config file {path}: unknown key '{key}' for {}", sub.get_name()))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                other => bail!("malformed config file {path}: '{key}' expects true or false, got '{other}'"),
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::TransformDump(_) => "transform-dump",
        Command::KnnDump(_) => "knn-dump",
        Command::Stats(_) => "stats",
        Command::Gradcheck(_) => "gradcheck",
        Command::Ablate(_) => "ablate",
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let resolved = to_json(cli)?;
    print!("resolved config:\n{resolved}");
    write_text(&cli.out_dir.join(format!("resolved-{}.json", subcommand_name(&cli.command))), &resolved)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed, out),
        Command::Train(a) => train_cmd(a, cli.seed, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::TransformDump(a) => dump_cmd(a, out, false),
        Command::KnnDump(a) => dump_cmd(a, out, true),
        Command::Stats(a) => stats_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed, out),
        Command::Ablate(a) => ablate_cmd(a, cli.seed, out),
    }
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &Path) -> Result<i32> {
    let kinds = a
        .kinds
        .iter()
        .map(|k| k.trim().parse::<ShapeKind>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let augment: Augment = a.augment.parse()?;
    let cfg = DatasetConfig {
        kinds,
        per_kind: a.per_kind,
        n_points: a.n_points,
        seed,
        augment,
        train_frac: a.train_frac,
        val_frac: a.val_frac,
    };
    let ds = make_dataset(&cfg, out)?;
    println!("wrote {} clouds and manifest to {}", ds.len(), out.display());
    Ok(0)
}

fn network_config(m: &ModelArgs, seed: u64) -> Result<NetworkConfig> {
    let family: TransformFamily = m.family.parse()?;
    let head = match m.task.as_str() {
        "seg" => Head::Segmentation(stn_data::shapes::total_parts()),
        "cls" => Head::Classification(ShapeKind::ALL.len()),
        other => bail!("unknown task '{other}' (expected seg or cls)"),
    };
    if m.blocks == 0 {
        bail!("--blocks must be positive");
    }
    let mut cfg = NetworkConfig::uniform(family, m.graphs, m.f, m.k_nn, head);
    cfg.blocks = vec![BlockConfig::uniform(family, m.graphs, m.f, m.k_nn); m.blocks];
    cfg.head_hidden = m.head_hidden.clone();
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(o: &OptimArgs, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        adam: AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        },
        seed,
        freeze_transforms: o.freeze_transforms,
        precision: o.precision.parse()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<stn_data::Dataset> {
    load_dataset(dir).with_context(|| format!("cannot load dataset from {}", dir.display()))
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &Path) -> Result<i32> {
    let dataset = load_data(&a.data)?;
    let exp = ExperimentConfig {
        dataset: dataset.manifest.config.clone(),
        network: network_config(&a.model, seed)?,
        train: train_config(&a.optim, seed)?,
    };
    let (report, dir) = run_experiment(&dataset, &exp, Some(out))?;
    let dir = dir.expect("root given");
    for e in &report.epochs {
        println!(
            "epoch {:>3}  train loss {:.4} metric {:.4}  val loss {} metric {}",
            e.epoch,
            e.train_loss,
            e.train_metric,
            e.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            e.val_metric.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    if let Some(t) = &report.test {
        println!("test metric {:.4} (best epoch {})", t.metric, report.best_epoch);
    }
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn load_net<T: Scalar>(path: &Path) -> Result<Network<T>> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn eval_as<T: Scalar>(a: &EvalArgs, split: Split) -> Result<Metrics> {
    let net = load_net::<T>(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    evaluate_split(&net, &ds, split).with_context(|| {
        format!("checkpoint {} does not fit dataset {}", a.checkpoint.display(), a.data.display())
    })
}

fn eval_cmd(a: &EvalArgs, out: &Path) -> Result<i32> {
    let split: Split = a.split.parse()?;
    let m = match a.precision.parse::<Precision>()? {
        Precision::F32 => eval_as::<f32>(a, split)?,
        Precision::F64 => eval_as::<f64>(a, split)?,
    };
    let text = to_json(&m)?;
    print!("{text}");
    write_text(&out.join(format!("eval-{}.json", split.name())), &text)?;
    Ok(0)
}

fn pick<'a>(ds: &'a stn_data::Dataset, split: &str, index: usize) -> Result<&'a Sample> {
    let split: Split = split.parse()?;
    let samples = ds.split(split);
    samples
        .get(index)
        .copied()
        .with_context(|| format!("index {index} out of range: the {} split has {} shapes", split.name(), samples.len()))
}

type Traces = Vec<Vec<stn_core::network::SubgraphTrace<f64>>>;

fn traces(net: &Network<f64>, cloud: &PointCloud) -> Result<Traces> {
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    Ok(net.forward(&mut tape, &vars, &cloud.coords())?.trace)
}

fn trace_cloud(coords: &[f64], like: &Sample) -> Result<PointCloud> {
    let (like, parts) = (&like.cloud, like.entry.parts);
    let n = like.len();
    let points = (0..n).map(|i| [coords[i], coords[n + i], coords[2 * n + i]]).collect();
    let mut cloud = PointCloud::new(points)?;
    if let Some(labels) = like.part_labels() {
        cloud = cloud.with_labels(labels.to_vec(), parts)?;
    }
    if let Some(c) = like.category() {
        cloud = cloud.with_category(c);
    }
    Ok(cloud)
}

fn dump_cmd(a: &DumpArgs, out: &Path, knn: bool) -> Result<i32> {
    let net = load_net::<f64>(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let sample = pick(&ds, &a.split, a.index)?;
    let trace = traces(&net, &sample.cloud)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create directory {}", out.display()))?;
    let mut written = 0;
    for (t, block) in trace.iter().enumerate() {
        for (i, sub) in block.iter().enumerate() {
            let stem = format!("block{t}_tf{i}_{}", sub.family.name());
            if knn {
                write_text(&out.join(format!("{stem}.knn")), &sub.graph.to_text())?;
            } else {
                let cloud = trace_cloud(&sub.coords, sample)?;
                write_cloud(&out.join(format!("{stem}.txt")), &cloud, Some(sample.entry.parts))?;
            }
            written += 1;
        }
    }
    println!("wrote {written} files for {} to {}", sample.entry.path, out.display());
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub shapes: usize,
    pub k: usize,
    pub mean_std_before: f64,
    pub mean_std_after: f64,
    /// Relative reduction of the mean neighborhood spread, in percent.
    pub reduction_percent: f64,
    pub welch: WelchResult,
    pub per_shape: Vec<StdStats>,
}

fn stats_cmd(a: &StatsArgs, out: &Path) -> Result<i32> {
    let before = load_data(&a.data)?;
    let split: Split = a.split.parse()?;
    let samples = before.split(split);
    let after_clouds: Vec<PointCloud> = match (&a.checkpoint, &a.after) {
        (Some(ckpt), _) => {
            let net = load_net::<f64>(ckpt)?;
            let mut clouds = Vec::with_capacity(samples.len());
            for s in &samples {
                let trace = traces(&net, &s.cloud)?;
                let sub = trace
                    .get(a.block)
                    .and_then(|b| b.get(a.transformer))
                    .with_context(|| format!("network has no transformer {} in block {}", a.transformer, a.block))?;
                clouds.push(trace_cloud(&sub.coords, s)?);
            }
            clouds
        }
        (None, Some(dir)) => {
            let other = load_data(dir)?;
            let others = other.split(split);
            if others.len() != samples.len() {
                bail!("{} has {} {} shapes, {} has {}", dir.display(), others.len(), split.name(), a.data.display(), samples.len());
            }
            others.iter().map(|s| s.cloud.clone()).collect()
        }
        (None, None) => bail!("stats needs --checkpoint or --after"),
    };
    let per_shape = samples
        .iter()
        .zip(&after_clouds)
        .map(|(s, c)| neighborhood_std_stats(&s.cloud, c, a.k))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let b: Vec<f64> = per_shape.iter().map(|s| s.std_before).collect();
    let f: Vec<f64> = per_shape.iter().map(|s| s.std_after).collect();
    let welch = welch_t_test(&b, &f)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, ma) = (mean(&b), mean(&f));
    let report = StatsReport {
        shapes: per_shape.len(),
        k: a.k,
        mean_std_before: mb,
        mean_std_after: ma,
        reduction_percent: if mb == 0.0 { 0.0 } else { 100.0 * (mb - ma) / mb },
        welch,
        per_shape,
    };
    println!(
        "neighborhood std {:.6} -> {:.6}: reduction {:.2}%, Welch t = {:.4} (dof {:.1})",
        mb, ma, report.reduction_percent, welch.t, welch.dof
    );
    write_text(&out.join("stats.json"), &to_json(&report)?)?;
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64, out: &Path) -> Result<i32> {
    let cfg = GradcheckConfig {
        seed,
        num_params: a.params,
        step: a.step,
        n_points: a.points,
        ..Default::default()
    };
    let report = gradcheck(&cfg)?;
    write_text(&out.join("gradcheck.json"), &to_json(&report)?)?;
    println!(
        "max relative error {:.3e} over {} entries ({} skipped at kinks)",
        report.max_rel_err,
        report.checks.len(),
        report.skipped_kinks
    );
    if report.passed(GRADCHECK_TOL) {
        Ok(0)
    } else {
        let mut err = std::io::stderr();
        let _ = writeln!(err, "gradient audit failed: max relative error {:.3e} >= {GRADCHECK_TOL:e}", report.max_rel_err);
        Ok(2)
    }
}

fn ablate_cmd(a: &AblateArgs, seed: u64, out: &Path) -> Result<i32> {
    let dataset = load_data(&a.data)?;
    let base = ExperimentConfig {
        dataset: dataset.manifest.config.clone(),
        network: network_config(&a.model, seed)?,
        train: train_config(&a.optim, seed)?,
    };
    let seeds = if a.seeds.is_empty() { vec![seed] } else { a.seeds.clone() };
    let table = match a.which.as_str() {
        "graphs" => {
            let family: TransformFamily = a.model.family.parse()?;
            let sweep = GraphSweep {
                fixed_f: a.fixed_f,
                budget: a.budget,
            };
            ablation_graphs(&dataset, &base, family, sweep, &seeds)?
        }
        "layers" => ablation_layers(&dataset, &base, &seeds)?,
        other => bail!("unknown ablation '{other}' (expected graphs or layers)"),
    };
    let csv = table.to_csv();
    print!("{csv}");
    write_text(&out.join(format!("ablation_{}.csv", a.which)), &csv)?;
    Ok(0)
}
