//! The `airdet` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use airdet::checkpoint::Checkpoint;
use airdet::config::Config;
use airdet::data::image_io::read_image;
use airdet::data::synth::{write_synthetic, SynthConfig, ANNOTATION_FILE};
use airdet::data::{crop_support, load_coco, Dataset};
use airdet::eval::{draw_supports, evaluate};
use airdet::model::checkpoint_config;
use airdet::train::{base_split, fine_tune, train};
use airdet::{BBox, Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::service::{router, AppState};
use crate::session::{Frames, Model, Session, Snapshot};

#[derive(Debug, Parser)]
#[command(name = "airdet", version, about = "Few-shot object detection without fine-tuning")]
pub struct Cli {
    /// TOML config file; defaults to $AIRDET_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory holding `annotations.json` and the images it names.
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation file, if not `<data>/annotations.json`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let ann = self.annotations.clone().unwrap_or_else(|| self.data.join(ANNOTATION_FILE));
        load_coco(ann, &self.data)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Episodic training on the base classes.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for checkpoints and the loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint on k novel supports per class.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        /// Support draw seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Novel-class evaluation over several support draws.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// JSON output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the fixed-column CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Detect support-defined classes in one image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `CLASS_ID:IMAGE:x1,y1,x2,y2`, repeatable.
        #[arg(long = "support", required = true)]
        supports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic-shapes dataset.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        base_images: Option<usize>,
        #[arg(long)]
        novel_images: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { data, out } => {
            let ds = data.load()?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(out, e))?;
            let res = train(&cfg, &ds, Some(out))?;
            let last = res.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
            eprintln!("trained {} iterations, final loss {last:.4}, checkpoint {}", res.losses.len(), res.checkpoint.id());
            Ok(())
        }
        Command::Finetune {
            data,
            checkpoint,
            shots,
            seed,
            out,
        } => {
            let ds = data.load()?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let split = base_split(&checkpoint_config(&ckpt)?, &ds)?;
            let mut supports = draw_supports(&split, *shots, *seed)?;
            if supports.len() < 2 {
                let base = split
                    .base_classes
                    .iter()
                    .next()
                    .ok_or_else(|| Error::Data("fine-tuning a single novel class needs a base class".into()))?;
                supports.insert(*base, split.supports_of(*base).into_iter().take(*shots).collect());
            }
            let tuned = fine_tune(&ckpt, &ds, &supports, &cfg)?;
            tuned.save(out)?;
            eprintln!("fine-tuned checkpoint {} written to {}", tuned.id(), out.display());
            Ok(())
        }
        Command::Evaluate {
            data,
            checkpoint,
            shots,
            seeds,
            out,
            csv,
        } => {
            let ds = data.load()?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let mut eval_cfg = checkpoint_config(&ckpt)?;
            eval_cfg.data.base_classes = cfg.data.base_classes.clone();
            eval_cfg.data.novel_classes = cfg.data.novel_classes.clone();
            eval_cfg.evaluation = cfg.evaluation.clone();
            let res = evaluate(&ckpt, &ds, *shots, seeds, &eval_cfg)?;
            write_or_print(out.as_deref(), &res.to_json())?;
            if let Some(p) = csv {
                write_or_print(Some(p), &res.to_csv())?;
            }
            Ok(())
        }
        Command::Detect {
            checkpoint,
            image,
            supports,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let model = Model::from_checkpoint(ckpt)?;
            let mut chips: BTreeMap<u64, Vec<_>> = BTreeMap::new();
            for spec in supports {
                let (class_id, path, bbox) = parse_support(spec)?;
                let img = read_image(&path)?;
                chips
                    .entry(class_id)
                    .or_default()
                    .push(crop_support(&img, &bbox, model.support_size())?.pixels);
            }
            let query = read_image(image)?;
            let protos = chips
                .iter()
                .map(|(&c, v)| model.prototype(c, v))
                .collect::<Result<Vec<_>>>()?;
            let dets = model.detect(&query, &protos)?;
            let json = serde_json::to_string_pretty(&dets).map_err(|e| Error::Format(e.to_string()))?;
            write_or_print(out.as_deref(), &json)
        }
        Command::GenSynthetic {
            out,
            seed,
            base_images,
            novel_images,
        } => {
            let mut sc = SynthConfig {
                seed: *seed,
                ..Default::default()
            };
            if let Some(n) = base_images {
                sc.base_images = *n;
            }
            if let Some(n) = novel_images {
                sc.novel_images = *n;
            }
            let ds = write_synthetic(out, &sc)?;
            eprintln!("wrote {} images to {}", ds.images.len(), out.display());
            Ok(())
        }
        Command::Serve { checkpoint, frames, bind } => {
            let mut scfg = cfg.service.clone();
            if let Some(c) = checkpoint {
                scfg.checkpoint = c.display().to_string();
            }
            if let Some(f) = frames {
                scfg.frames_dir = f.display().to_string();
            }
            if let Some(b) = bind {
                scfg.bind = b.clone();
            }
            serve(&scfg)
        }
    }
}

/// Parses `CLASS_ID:IMAGE:x1,y1,x2,y2`.
pub fn parse_support(spec: &str) -> Result<(u64, PathBuf, BBox)> {
    let bad = || Error::InvalidArgument(format!("support `{spec}` is not CLASS_ID:IMAGE:x1,y1,x2,y2"));
    let (class, rest) = spec.split_once(':').ok_or_else(bad)?;
    let (path, coords) = rest.rsplit_once(':').ok_or_else(bad)?;
    let class_id: u64 = class.trim().parse().map_err(|_| bad())?;
    let v: Vec<f64> = coords
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [x1, y1, x2, y2] = v[..] else { return Err(bad()) };
    let bbox = BBox::new(x1, y1, x2, y2);
    bbox.validate()?;
    Ok((class_id, PathBuf::from(path), bbox))
}

/// Builds the service state described by `scfg`, restoring a snapshot when
/// one exists.
pub fn build_session(scfg: &airdet::config::ServiceConfig) -> Result<Arc<Session>> {
    let model = Model::from_checkpoint(Checkpoint::load(&scfg.checkpoint)?)?;
    let frames = Frames::scan(&scfg.frames_dir)?;
    let session = Arc::new(Session::new(model, frames));
    if !scfg.snapshot.is_empty() && Path::new(&scfg.snapshot).exists() {
        let text = std::fs::read_to_string(&scfg.snapshot).map_err(|e| Error::io(&scfg.snapshot, e))?;
        let snap: Snapshot = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: scfg.snapshot.clone().into(),
            source: e,
        })?;
        session
            .restore(&snap)
            .map_err(|r| Error::Data(format!("cannot restore {}: {r:?}", scfg.snapshot)))?;
    }
    Ok(session)
}

fn serve(scfg: &airdet::config::ServiceConfig) -> Result<()> {
    let session = build_session(scfg)?;
    let mut app = router(AppState {
        session: Arc::clone(&session),
        page_size: scfg.page_size,
    });
    if !scfg.static_dir.is_empty() {
        app = app.nest_service("/console", tower_http::services::ServeDir::new(&scfg.static_dir));
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&scfg.bind)
            .await
            .map_err(|e| Error::io(&scfg.bind, e))?;
        eprintln!("serving on http://{}", scfg.bind);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(&scfg.bind, e))
    })?;
    if !scfg.snapshot.is_empty() {
        let json = serde_json::to_string_pretty(&session.snapshot()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&scfg.snapshot, json).map_err(|e| Error::io(&scfg.snapshot, e))?;
    }
    Ok(())
}
