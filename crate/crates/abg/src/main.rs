use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use abg::config::{parse_kv, ShiftSpec, TrainConfig, Variant};
use abg::data::generate;
use abg::dataio::{check_snapshot_compat, read_dataset, read_snapshot, write_dataset, write_snapshot};
use abg::gradcheck::audit_groups;
use abg::loss::SemiMask;
use abg::model::Model;
use abg::trainer::{dump_embeddings, evaluate, train, StepReport};
use abg::{AbgError, Result};

#[derive(Parser)]
#[command(name = "abg", version, about = "Adversarial bipartite graph learning for cross-domain sequence classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired source/target synthetic dataset
    Gen(GenArgs),
    /// Train a model on a source/target dataset pair
    Train(RunArgs),
    /// Evaluate a trained snapshot on a dataset pair
    Eval(SnapshotArgs),
    /// Audit analytic gradients of every parameter group against finite differences
    Gradcheck(GradcheckArgs),
    /// Write final video representations of both domains
    DumpEmbed(SnapshotArgs),
}

/// Hyperparameters resolve as preset < config file < command line.
#[derive(Args, Clone)]
struct HyperArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk (small, fast) or paper (published sizes)
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// abg (frame graph) or habg (adds the video-level graph)
    #[arg(long)]
    variant: Option<String>,
    /// avg, lstm, gru or trn
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Source batch size
    #[arg(long)]
    bs: Option<usize>,
    /// Target batch size
    #[arg(long)]
    bt: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of target videos with labels available
    #[arg(long = "semi-ratio")]
    semi_ratio: Option<f64>,
    /// Bypass the bipartite graphs (ablation)
    #[arg(long = "no-graph")]
    no_graph: bool,
}

impl HyperArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => {
                return Err(AbgError::ConfigError(format!(
                    "unknown preset `{other}` (expected desk or paper)"
                )))
            }
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AbgError::io(path.display().to_string(), e))?;
            cfg.apply_kv(&parse_kv(&text)?)?;
        }
        macro_rules! set {
            ($field:ident, $arg:expr) => {
                if let Some(v) = $arg {
                    cfg.$field = v;
                }
            };
        }
        set!(seed, self.seed);
        set!(alpha, self.alpha);
        set!(beta, self.beta);
        set!(gamma, self.gamma);
        set!(lambda, self.lambda);
        set!(epochs, self.epochs);
        set!(batch_source, self.bs);
        set!(batch_target, self.bt);
        set!(lr0, self.lr);
        set!(semi_ratio, self.semi_ratio);
        if let Some(v) = &self.variant {
            cfg.variant = Variant::from_str(v)
                .ok_or_else(|| AbgError::ConfigError(format!("unknown variant `{v}`")))?;
        }
        if let Some(a) = &self.agg {
            cfg.agg = abg::agg::AggKind::from_str(a)
                .ok_or_else(|| AbgError::ConfigError(format!("unknown aggregator `{a}`")))?;
        }
        if self.no_graph {
            cfg.no_graph = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Videos per domain
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Rotation angle (radians) of the target-domain shift
    #[arg(long = "rot-angle")]
    rot_angle: Option<f64>,
    /// Generate order-twin class pairs (see ShiftSpec)
    #[arg(long = "order-classes")]
    order_classes: bool,
    /// Generator config file with ShiftSpec keys
    #[arg(long = "shift-config")]
    shift_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnapshotArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Trained snapshot (.abgs) from `train`
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Worst allowed relative error per group
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| AbgError::io(path.display().to_string(), e))
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| AbgError::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    out_dir: &Path,
    cfg: Option<&TrainConfig>,
    inputs: &[(&str, &Path)],
    seed: u64,
    started: Instant,
) -> Result<()> {
    let mut hashes = serde_json::Map::new();
    for (name, path) in inputs {
        hashes.insert(name.to_string(), serde_json::json!(sha256_file(path)?));
    }
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "config": cfg,
        "input_sha256": hashes,
    });
    write_file(
        &out_dir.join("manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()),
    )
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| AbgError::io(path.display().to_string(), e))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = args.hyper.resolve()?;
    let mut spec = ShiftSpec::default();
    if let Some(path) = &args.shift_config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AbgError::io(path.display().to_string(), e))?;
        spec.apply_kv(&parse_kv(&text)?)?;
    }
    if let Some(a) = args.rot_angle {
        spec.rot_angle = a;
    }
    if args.order_classes {
        spec.order_classes = true;
    }
    let (source, target) = generate(cfg.classes, args.n, cfg.k, cfg.d_feat, &spec, cfg.seed)?;
    ensure_dir(&args.out)?;
    let sp = args.out.join("source.abgd");
    let tp = args.out.join("target.abgd");
    write_dataset(&sp, &source)?;
    write_dataset(&tp, &target)?;
    write_manifest(&args.out, Some(&cfg), &[("source", &sp), ("target", &tp)], cfg.seed, started)?;
    println!(
        "wrote {} and {} ({} videos x {} frames x {} dims, {} classes)",
        sp.display(),
        tp.display(),
        args.n,
        cfg.k,
        cfg.d_feat,
        cfg.classes
    );
    Ok(())
}

fn metrics_json(report: &abg::trainer::EvalReport) -> serde_json::Value {
    serde_json::json!({
        "accuracy": report.accuracy(),
        "correct": report.correct,
        "total": report.total,
        "confusion": report.confusion,
    })
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = args.hyper.resolve()?;
    let source = read_dataset(&args.source)?;
    let target = read_dataset(&args.target)?;
    // the dataset is authoritative for its own dimensions
    cfg.k = source.k;
    cfg.d_feat = source.d;
    cfg.classes = source.classes;
    cfg.validate()?;
    check_snapshot_compat(&cfg, &target)?;
    let model = Model::new(&cfg)?;
    let mut store = model.init_store(cfg.seed);
    ensure_dir(&args.out)?;
    let mut log = String::new();
    log.push_str(&StepReport::csv_header());
    log.push('\n');
    train(&model, &mut store, &cfg, &source, &target, |r| {
        log.push_str(&r.csv_row());
        log.push('\n');
    })?;
    write_file(&args.out.join("train_log.csv"), &log)?;
    let snap = args.out.join("model.abgs");
    write_snapshot(&snap, &cfg, &store)?;
    let report = evaluate(&model, &store, &cfg, &source, &target)?;
    write_file(
        &args.out.join("metrics.json"),
        &format!("{}\n", serde_json::to_string_pretty(&metrics_json(&report)).unwrap()),
    )?;
    write_manifest(
        &args.out,
        Some(&cfg),
        &[("source", &args.source), ("target", &args.target), ("model", &snap)],
        cfg.seed,
        started,
    )?;
    println!("accuracy {:.4} ({}/{})", report.accuracy(), report.correct, report.total);
    Ok(())
}

fn load_snapshot_run(args: &SnapshotArgs) -> Result<(TrainConfig, Model, abg::nn::ParameterStore, abg::data::Dataset, abg::data::Dataset)> {
    let (cfg, store) = read_snapshot(&args.model)?;
    let source = read_dataset(&args.source)?;
    let target = read_dataset(&args.target)?;
    check_snapshot_compat(&cfg, &source)?;
    check_snapshot_compat(&cfg, &target)?;
    let model = Model::new(&cfg)?;
    Ok((cfg, model, store, source, target))
}

fn cmd_eval(args: &SnapshotArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, model, store, source, target) = load_snapshot_run(args)?;
    let report = evaluate(&model, &store, &cfg, &source, &target)?;
    ensure_dir(&args.out)?;
    write_file(
        &args.out.join("metrics.json"),
        &format!("{}\n", serde_json::to_string_pretty(&metrics_json(&report)).unwrap()),
    )?;
    let mut tsv = String::from("video\tlabel\tprediction\n");
    for (v, &p) in report.predictions.iter().enumerate() {
        tsv.push_str(&format!("{v}\t{}\t{p}\n", target.labels[v]));
    }
    write_file(&args.out.join("predictions.tsv"), &tsv)?;
    write_manifest(
        &args.out,
        Some(&cfg),
        &[("source", &args.source), ("target", &args.target), ("model", &args.model)],
        cfg.seed,
        started,
    )?;
    println!("accuracy {:.4} ({}/{})", report.accuracy(), report.correct, report.total);
    Ok(())
}

fn cmd_dump_embed(args: &SnapshotArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, model, store, source, target) = load_snapshot_run(args)?;
    let (es, et) = dump_embeddings(&model, &store, &cfg, &source, &target)?;
    ensure_dir(&args.out)?;
    for (name, m, labels) in
        [("source", &es, &source.labels), ("target", &et, &target.labels)]
    {
        let mut tsv = String::from("video\tlabel\tembedding\n");
        for v in 0..m.rows {
            let vals: Vec<String> = m.row(v).iter().map(|x| format!("{x:.9e}")).collect();
            tsv.push_str(&format!("{v}\t{}\t{}\n", labels[v], vals.join(",")));
        }
        write_file(&args.out.join(format!("embeddings_{name}.tsv")), &tsv)?;
    }
    write_manifest(
        &args.out,
        Some(&cfg),
        &[("source", &args.source), ("target", &args.target), ("model", &args.model)],
        cfg.seed,
        started,
    )?;
    println!("wrote embeddings for {} source and {} target videos", es.rows, et.rows);
    Ok(())
}

/// Returns true when every group passes.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut cfg = args.hyper.resolve()?;
    // small, smooth and deterministic: this is an audit, not a run
    cfg.dropout = 0.0;
    cfg.d_feat = cfg.d_feat.min(6);
    cfg.d_frame = cfg.d_frame.min(4);
    cfg.d_video = cfg.d_video.min(4);
    cfg.hidden = cfg.hidden.min(5);
    cfg.k = cfg.k.min(3);
    cfg.classes = cfg.classes.min(3);
    let spec = ShiftSpec::default();
    let (source, target) = generate(cfg.classes, 4, cfg.k, cfg.d_feat, &spec, cfg.seed)?;
    let (feats_s, labels_s) = source.gather(&[0, 1, 2, 3]);
    let (feats_t, labels_t) = target.gather(&[0, 1, 2, 3]);
    let mask = if cfg.semi_ratio > 0.0 {
        SemiMask { labeled: vec![0, 2], labels: vec![labels_t[0], labels_t[2]] }
    } else {
        SemiMask::empty()
    };
    let report = audit_groups(&cfg, &feats_s, &labels_s, &feats_t, &mask)?;
    let mut ok = true;
    for (group, err) in &report {
        let pass = *err < args.tolerance;
        ok &= pass;
        println!(
            "group {:<3} max relative error {:.3e}  {}",
            group.as_str(),
            err,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|_| 0),
        Cmd::Train(a) => cmd_train(a).map(|_| 0),
        Cmd::Eval(a) => cmd_eval(a).map(|_| 0),
        Cmd::DumpEmbed(a) => cmd_dump_embed(a).map(|_| 0),
        Cmd::Gradcheck(a) => cmd_gradcheck(a).map(|ok| if ok { 0 } else { 3 }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                AbgError::ConfigError(_) | AbgError::InvalidSpec(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
