use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoseg::data::{build_splits, export_dataset, load_external_dataset, DatasetHandle, Renderer, SplitConfig};
use protoseg::evaluation::{
    ablate, emit_report, evaluate, fold_summary, AblationModels, MetricReport, RunConfig, RunManifest,
};
use protoseg::model::Model;
use protoseg::rng;
use protoseg::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainIo};

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Few-shot segmentation with latent prototypes and attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic dataset as PNG folders.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Samples rendered per class.
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Train a model and write `model.apic` plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train with attention disabled.
        #[arg(long)]
        no_attention: bool,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare probabilistic, deterministic and attention-free models and
    /// sweep L = M over the `--L` values.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        deterministic_checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_attention_checkpoint: Option<PathBuf>,
    },
    /// Merge `metrics.json` files and average Class-IoU over folds.
    Report {
        /// Directories or files holding `metrics.json`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Prototype samples; repeat to request a sweep.
    #[arg(long = "L")]
    samples_l: Vec<usize>,
    /// Attention samples (defaults to L).
    #[arg(long = "M")]
    samples_m: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

impl Common {
    fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                RunConfig::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.eval.seed = s;
        }
        if let Some(f) = self.fold {
            cfg.data.fold = f;
        }
        if let Some(k) = self.k {
            cfg.train.k_shot = k;
            cfg.eval.k_shot = k;
        }
        if let Some(&l) = self.samples_l.first() {
            cfg.eval.inference.samples_l = l;
            cfg.eval.inference.samples_m = l;
        }
        if let Some(m) = self.samples_m {
            cfg.eval.inference.samples_m = m;
        }
        if let Some(n) = self.episodes {
            cfg.eval.episodes = n;
        }
        if self.deterministic {
            cfg.train.deterministic = true;
            cfg.model.deterministic = true;
            cfg.eval.inference.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset(cfg: &RunConfig) -> CliResult<(DatasetHandle, SplitConfig)> {
    let ds = match &cfg.data.root {
        Some(root) => load_external_dataset(root, cfg.model.image_height, cfg.model.image_width)?,
        None => DatasetHandle::default_synthetic_sized(cfg.model.image_height, cfg.model.image_width)?,
    };
    let split = build_splits(&ds.class_ids(), cfg.data.folds, cfg.data.fold)?;
    Ok((ds, split))
}

fn manifest(command: &str, cfg: &RunConfig, ds: &DatasetHandle) -> CliResult<RunManifest> {
    let mut m = RunManifest::new(command, serde_json::to_value(cfg)?);
    m.seeds = vec![cfg.train.seed, cfg.eval.seed];
    let root = cfg.data.root.as_ref().map(|p| p.display().to_string());
    m.dataset = Some(ds.descriptor(root.as_deref()));
    Ok(m)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()).into())
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<Model> {
    let ck = load_checkpoint(path)?;
    let requested = protoseg::model::ModelConfig {
        deterministic: ck.model.config.deterministic,
        attention_enabled: ck.model.config.attention_enabled,
        ..cfg.model.clone()
    };
    ck.check_config(&requested)?;
    Ok(ck.model)
}

fn gen_data(common: &Common, per_class: usize) -> CliResult<()> {
    let cfg = common.run_config()?;
    let renderer = Renderer::new(cfg.model.image_height, cfg.model.image_width, protoseg::data::default_catalog())?;
    let mut r = rng::stream(cfg.train.seed, 0);
    let classes = renderer
        .catalog
        .iter()
        .map(|spec| {
            let samples = (0..per_class)
                .map(|_| renderer.render_sample(spec, &mut r))
                .collect::<protoseg::Result<Vec<_>>>()?;
            Ok((format!("{:02}_{}", spec.class_id, spec.family), samples))
        })
        .collect::<protoseg::Result<Vec<_>>>()?;
    export_dataset(&common.out, &classes)?;
    Ok(())
}

fn run_train(common: &Common, no_attention: bool, iterations: Option<usize>) -> CliResult<()> {
    let mut cfg = common.run_config()?;
    if no_attention {
        cfg.model.attention_enabled = false;
    }
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let (ds, split) = dataset(&cfg)?;
    create_dir(&common.out)?;
    let log_path = common.out.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?);
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let io = TrainIo {
        log: Some(&mut log),
        checkpoint_dir: (cfg.train.checkpoint_interval > 0).then(|| common.out.join("checkpoints")),
    };
    let mut m = manifest("train", &cfg, &ds)?;
    let out = train(model, &ds, &split, &cfg.train, io)?;
    let path = common.out.join("model.apic");
    let ck = Checkpoint::capture(&out.model, &out.adam, cfg.train.iterations, &cfg.train);
    save_checkpoint(&ck, &path)?;
    m.checkpoints.push(path);
    m.finish();
    std::fs::write(common.out.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn run_eval(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg = common.run_config()?;
    let (ds, split) = dataset(&cfg)?;
    let model = load_model(checkpoint, &cfg)?;
    let report = evaluate(&model, &ds, &split, &cfg.eval)?;
    let mut m = manifest("eval", &cfg, &ds)?;
    m.checkpoints.push(checkpoint.to_path_buf());
    m.finish();
    emit_report(&[report], &m, &common.out)?;
    Ok(())
}

fn run_ablate(
    common: &Common,
    checkpoint: &Path,
    deterministic: Option<&Path>,
    no_attention: Option<&Path>,
) -> CliResult<()> {
    let cfg = common.run_config()?;
    let (ds, split) = dataset(&cfg)?;
    let prob = load_model(checkpoint, &cfg)?;
    let det = deterministic.map(|p| load_model(p, &cfg)).transpose()?;
    let noatt = no_attention.map(|p| load_model(p, &cfg)).transpose()?;
    let sweep = if common.samples_l.is_empty() {
        vec![1, 5, 10, 15]
    } else {
        common.samples_l.clone()
    };
    let models = AblationModels {
        probabilistic: Some(&prob),
        deterministic: det.as_ref(),
        no_attention: noatt.as_ref(),
    };
    let reports = ablate(&models, &sweep, &ds, &split, &cfg.eval)?;
    let mut m = manifest("ablate", &cfg, &ds)?;
    m.checkpoints = [Some(checkpoint), deterministic, no_attention]
        .into_iter()
        .flatten()
        .map(Path::to_path_buf)
        .collect();
    m.finish();
    emit_report(&reports, &m, &common.out)?;
    Ok(())
}

fn run_report(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join("metrics.json") } else { input.clone() };
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut batch: Vec<MetricReport> =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        reports.append(&mut batch);
    }
    let summary = fold_summary(&reports)?;
    let mut m = RunManifest::new("report", serde_json::json!({ "inputs": inputs }));
    m.finish();
    emit_report(&reports, &m, out)?;
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    for s in &summary {
        println!(
            "{} k={} L={} M={} folds={:?} class_mean_iou={:.4}",
            s.mode, s.k, s.samples_l, s.samples_m, s.folds, s.class_mean_iou
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData { common, per_class } => gen_data(common, *per_class),
        Command::Train {
            common,
            no_attention,
            iterations,
        } => run_train(common, *no_attention, *iterations),
        Command::Eval { common, checkpoint } => run_eval(common, checkpoint),
        Command::Ablate {
            common,
            checkpoint,
            deterministic_checkpoint,
            no_attention_checkpoint,
        } => run_ablate(
            common,
            checkpoint,
            deterministic_checkpoint.as_deref(),
            no_attention_checkpoint.as_deref(),
        ),
        Command::Report { inputs, out } => run_report(inputs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
