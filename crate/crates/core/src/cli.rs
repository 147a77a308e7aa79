//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on validation or runtime failures, 2 on usage errors.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::bench;
use crate::checkpoint::{load_generator, save_generator};
use crate::data::{gen_two_domain_dataset, read_images, write_dataset, EdgeConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use crate::perceptual::{
    dino_struct_dist, fit_stats, frechet_distance, FeatureNet, DINO_REPORT_SCALE,
};
use crate::service::{AppState, LoadedModel, ServiceConfig};
use crate::trainer::{
    dataset_size_sweep, finetune_diversity, parse_variants, pretrain_backbone, run_ablation,
    train_paired, train_unpaired, write_csv, DomainImages, PairedData, TrainConfig, Trained,
    UnpairedData,
};
use crate::types::{psnr, LatentMap, TensorImage};

pub const HOME_ENV: &str = "TURBO_I2I_HOME";
pub const RESOLVED_CONFIG: &str = "run_config.json";
pub const HISTORY: &str = "history.jsonl";

/// Everything a run can be configured with. Loaded from `--config`, then
/// overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub adapters: AdapterSpec,
    pub train: TrainConfig,
    pub scenes: SceneSpec,
    pub edges: EdgeConfig,
    /// Scenes generated by `gen-data`.
    pub scene_count: usize,
    /// Images per domain held out for metrics.
    pub held_out: usize,
    pub domain_x: String,
    pub domain_y: String,
    pub max_request_bytes: usize,
    pub max_image_side: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let service = ServiceConfig::default();
        RunConfig {
            generator: GeneratorConfig::default(),
            adapters: AdapterSpec::default(),
            train: TrainConfig::default(),
            scenes: SceneSpec::default(),
            edges: EdgeConfig::default(),
            scene_count: 250,
            held_out: 50,
            domain_x: "day".into(),
            domain_y: "night".into(),
            max_request_bytes: service.max_request_bytes,
            max_image_side: service.max_image_side,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.train.seed = v;
            self.scenes.seed = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = o.eval_every {
            self.train.eval_every = v;
        }
        if let Some(v) = o.held_out {
            self.held_out = v;
        }
        if let Some(v) = o.lora_rank {
            self.adapters.lora_rank = v;
        }
        if let Some(v) = &o.domain_x {
            self.domain_x = v.clone();
        }
        if let Some(v) = &o.domain_y {
            self.domain_y = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.held_out == 0 {
            return Err(Error::Validation("held_out must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration next to an output.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.extension().is_some() {
            let mut name = output.file_stem().unwrap_or_default().to_os_string();
            name.push(".config.json");
            output.with_file_name(name)
        } else {
            fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
            output.join(RESOLVED_CONFIG)
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "turbo-i2i",
    version,
    about = "One-step image translation with adapters on a pretrained backbone"
)]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    #[arg(long, global = true)]
    pub held_out: Option<usize>,
    #[arg(long, global = true)]
    pub lora_rank: Option<usize>,
    #[arg(long, global = true)]
    pub domain_x: Option<String>,
    #[arg(long, global = true)]
    pub domain_y: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic two-domain dataset as PNG folders.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a backbone from scratch on a dataset folder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained backbone between two unpaired domains.
    TrainUnpaired {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained backbone to map edge maps to `target` images.
    TrainPaired {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a paired model with noise-interpolation finetuning.
    FinetuneDiversity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate one PNG.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Compare two image folders: FID, and structure distance and PSNR when
    /// the folders pair up one to one.
    Evaluate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the ablation variants on one dataset and write a CSV.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "A,B,C,D,FULL")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full variant at several training-set sizes and write a CSV.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sizes; `full` means every training image.
        #[arg(long, default_value = "10,full")]
        sizes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single forward passes.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve checkpoints over HTTP.
    Serve {
        /// Checkpoint directories; the first is the default model.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Resolves a checkpoint path: absolute paths and paths that exist are used
/// as given, anything else is taken relative to `$TURBO_I2I_HOME` when set.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        return p.to_path_buf();
    }
    match std::env::var_os(HOME_ENV) {
        Some(home) if !home.is_empty() => Path::new(&home).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_sets(root: &Path, domains: &[&str]) -> Result<Vec<DomainImages>> {
    domains
        .iter()
        .map(|d| {
            let images = read_images(&root.join(d))?;
            if images.is_empty() {
                return Err(Error::Validation(format!(
                    "no PNG images in {}",
                    root.join(d).display()
                )));
            }
            Ok(DomainImages {
                domain: d.to_string(),
                images,
            })
        })
        .collect()
}

fn unpaired_data(cfg: &RunConfig, root: &Path) -> Result<UnpairedData> {
    let sets = load_sets(root, &[&cfg.domain_x, &cfg.domain_y])?;
    UnpairedData::from_sets(&sets[0], &sets[1], cfg.held_out)
}

fn paired_data(cfg: &RunConfig, root: &Path, target: &str) -> Result<PairedData> {
    let sets = load_sets(root, &[target])?;
    PairedData::from_edges(&sets[0], &cfg.edges, cfg.held_out, cfg.train.seed)
}

fn load_model(p: &Path) -> Result<GeneratorState> {
    Ok(load_generator(&checkpoint_path(p))?.0)
}

fn save_trained(t: &Trained, cfg: &RunConfig, out: &Path) -> Result<()> {
    let out = checkpoint_path(out);
    save_generator(&t.state, Some(&t.aux), &out, None)?;
    t.history.write_jsonl(&out.join(HISTORY))?;
    cfg.write_beside(&out)?;
    if let Some(m) = t.history.final_metrics() {
        println!("{}", serde_json::to_string(m)?);
    }
    Ok(())
}

fn with_fresh_adapters(mut state: GeneratorState, spec: &AdapterSpec) -> Result<GeneratorState> {
    if state.adapter_spec.is_none() {
        state.attach_adapters(spec.clone())?;
    }
    Ok(state)
}

fn parse_sizes(list: &str, full: usize) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim() {
            "full" => Ok(full),
            n => n.parse().map_err(|_| {
                Error::Validation(format!("sweep size {n:?} is not an integer or `full`"))
            }),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct FolderReport {
    fid: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dino_struct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
}

fn evaluate_folders(cfg: &RunConfig, source: &Path, target: &Path) -> Result<FolderReport> {
    let a = read_images(source)?;
    let b = read_images(target)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation(
            "each folder needs at least 2 PNG images".into(),
        ));
    }
    let net = FeatureNet::new(cfg.train.metric_seed);
    let fid = frechet_distance(&fit_stats(&a, &net)?, &fit_stats(&b, &net)?)?;
    let paired = a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|(x, y)| x.height() == y.height() && x.width() == y.width());
    let (dino_struct, psnr_db) = if paired {
        let mut d = 0.0;
        let mut p = 0.0;
        for (x, y) in a.iter().zip(&b) {
            d += dino_struct_dist(&net, x, y)?;
            p += psnr(x, y)?.min(100.0);
        }
        let n = a.len() as f64;
        (Some(d * DINO_REPORT_SCALE / n), Some(p / n))
    } else {
        (None, None)
    };
    Ok(FolderReport {
        fid,
        dino_struct,
        psnr: psnr_db,
    })
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides);
    cfg.validate()?;
    match cli.command {
        Command::GenData { out, count, size } => {
            if let Some(n) = count {
                cfg.scene_count = n;
            }
            if let Some(s) = size {
                cfg.scenes.size = s;
            }
            let ds = gen_two_domain_dataset(cfg.scene_count, &cfg.scenes)?;
            let m = write_dataset(&ds, &out)?;
            cfg.write_beside(&out)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Pretrain { data, out } => {
            let names: Vec<&str> = cfg.generator.domains.iter().map(String::as_str).collect();
            let sets = load_sets(&data, &names)?;
            let (state, history) = pretrain_backbone(cfg.generator.clone(), &sets, &cfg.train)?;
            let out = checkpoint_path(&out);
            save_generator(&state, None, &out, None)?;
            history.write_jsonl(&out.join(HISTORY))?;
            cfg.write_beside(&out)?;
        }
        Command::TrainUnpaired { model, data, out } => {
            let state = with_fresh_adapters(load_model(&model)?, &cfg.adapters)?;
            let t = train_unpaired(state, &unpaired_data(&cfg, &data)?, &cfg.train)?;
            save_trained(&t, &cfg, &out)?;
        }
        Command::TrainPaired {
            model,
            data,
            target,
            out,
        } => {
            if cli.config.is_none() {
                cfg.train.weights = crate::objectives::LossWeights::paired();
            }
            let state = with_fresh_adapters(load_model(&model)?, &cfg.adapters)?;
            let t = train_paired(state, &paired_data(&cfg, &data, &target)?, &cfg.train)?;
            save_trained(&t, &cfg, &out)?;
        }
        Command::FinetuneDiversity {
            model,
            data,
            target,
            out,
        } => {
            if cli.config.is_none() {
                cfg.train.weights = crate::objectives::LossWeights::paired();
            }
            let state = load_model(&model)?;
            let t = finetune_diversity(state, &paired_data(&cfg, &data, &target)?, &cfg.train)?;
            save_trained(&t, &cfg, &out)?;
        }
        Command::Translate {
            model,
            input,
            out,
            domain,
            gamma,
        } => {
            let state = load_model(&model)?;
            let x = TensorImage::load_png(&input)?;
            let z = LatentMap::seeded_noise(x.height(), x.width(), cfg.train.seed);
            state.translate(&x, &z, gamma, &domain)?.save_png(&out)?;
            cfg.write_beside(&out)?;
        }
        Command::Evaluate {
            source,
            target,
            out,
        } => {
            let report = evaluate_folders(&cfg, &source, &target)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = out {
                fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
                cfg.write_beside(&out)?;
            }
            println!("{text}");
        }
        Command::Ablate {
            model,
            data,
            variants,
            out,
        } => {
            let variants = parse_variants(&variants)?;
            let backbone = load_model(&model)?;
            let rows = run_ablation(
                &variants,
                &backbone,
                &cfg.adapters,
                &unpaired_data(&cfg, &data)?,
                &cfg.train,
            )?;
            write_csv(&rows, &out)?;
            cfg.write_beside(&out)?;
        }
        Command::Sweep {
            model,
            data,
            sizes,
            out,
        } => {
            let data = unpaired_data(&cfg, &data)?;
            let sizes = parse_sizes(&sizes, data.x.len().min(data.y.len()))?;
            let backbone = load_model(&model)?;
            let rows = dataset_size_sweep(&sizes, &backbone, &cfg.adapters, &data, &cfg.train)?;
            write_csv(&rows, &out)?;
            cfg.write_beside(&out)?;
        }
        Command::Bench {
            model,
            size,
            reps,
            gamma,
            out,
        } => {
            let report = bench(&load_model(&model)?, size, reps, gamma)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = out {
                fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
                cfg.write_beside(&out)?;
            }
            println!("{text}");
        }
        Command::Serve { model, host, port } => {
            let models = model
                .iter()
                .map(|p| LoadedModel::load(&checkpoint_path(p)))
                .collect::<Result<Vec<_>>>()?;
            let state = AppState::new(
                models,
                ServiceConfig {
                    max_request_bytes: cfg.max_request_bytes,
                    max_image_side: cfg.max_image_side,
                },
            )?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Validation(format!("bad address {host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(addr.to_string(), e))?;
            rt.block_on(crate::service::serve(state, addr))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
