mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2gan::data::{
    load_manifest, png_names, synthesize, DatasetManifest, PairEntry, Split, GT_DIR, MANIFEST_FILE, RAIN_DIR,
};
use m2gan::generator::Generator;
use m2gan::losses::AdvLossMode;
use m2gan::metrics::{evaluate_dirs, RandomCnnEmbedder};
use m2gan::params::derive_seed;
use m2gan::plane::ImagePlane;
use m2gan::training::{load_generator, Ablation, Trainer};
use m2gan::{M2ganError, Result};

use config::{resolve, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "m2gan", version, about = "Raindrop synthesis, training, deraining and evaluation")]
struct Cli {
    /// TOML file with [synthesis], [pipeline] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for synthesis, initialisation and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record the run as deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Composite raindrops over clean images into a paired dataset.
    Synthesize {
        #[arg(long)]
        clean_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a paired dataset directory.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run only the first N stages.
        #[arg(long)]
        stages: Option<usize>,
        /// Also write every stage's attention rain map.
        #[arg(long)]
        dump_maps: bool,
        /// Also write every intermediate stage estimate.
        #[arg(long)]
        all_stages: bool,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Where metrics.json and metrics.txt go; defaults to the prediction directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Seed of the random embedder used for FID.
        #[arg(long, default_value_t = 0)]
        embedder_seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root holding rain/ and gt/, or a manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    adv_mode: Option<AdvLossMode>,
}

fn resolved(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("synthesis.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    if cli.deterministic {
        overrides.push("train.deterministic=true".into());
    }
    if let Command::Train(t) = &cli.command {
        if let Some(e) = t.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(s) = t.stages {
            overrides.push(format!("pipeline.num_stages={s}"));
        }
        if let Some(a) = t.ablation {
            overrides.push(format!("train.ablation=\"{}\"", a.as_str()));
        }
        if let Some(m) = t.adv_mode {
            overrides.push(format!("train.adv_mode=\"{}\"", m.as_str()));
        }
    }
    let cfg = resolve(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
    }
    Ok(cfg)
}

fn cmd_synthesize(cfg: &RunConfig, clean_dir: &Path, out_dir: &Path) -> Result<()> {
    let names = png_names(clean_dir)?;
    if names.is_empty() {
        return Err(M2ganError::Ingestion { path: clean_dir.to_path_buf(), reason: "no PNG images found".into() });
    }
    std::fs::create_dir_all(out_dir.join(RAIN_DIR))?;
    std::fs::create_dir_all(out_dir.join(GT_DIR))?;
    let mut pairs = Vec::new();
    for name in &names {
        let clean = match ImagePlane::load_png(&clean_dir.join(name)) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("warning: skipping {name}: {e}");
                continue;
            }
        };
        let id = m2gan::data::file_id(name);
        let mut syn_cfg = cfg.synthesis.clone();
        syn_cfg.seed = derive_seed(cfg.synthesis.seed, &id);
        let rain = match synthesize(&clean, &syn_cfg) {
            Ok(s) => s.image,
            Err(e) if e.is_validation() => {
                eprintln!("warning: skipping {name}: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        rain.save_png(&out_dir.join(RAIN_DIR).join(name))?;
        clean.save_png(&out_dir.join(GT_DIR).join(name))?;
        pairs.push(PairEntry { id, rain: Path::new(RAIN_DIR).join(name), gt: Path::new(GT_DIR).join(name) });
    }
    if pairs.is_empty() {
        return Err(M2ganError::Ingestion { path: clean_dir.to_path_buf(), reason: "no image could be used".into() });
    }
    let manifest = DatasetManifest::new(out_dir, Split::Train, pairs)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    cfg.write(out_dir)?;
    println!("wrote {} pairs to {}", manifest.len(), out_dir.display());
    Ok(())
}

fn open_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_file() {
        DatasetManifest::load(path)
    } else if path.join(MANIFEST_FILE).is_file() {
        DatasetManifest::load(&path.join(MANIFEST_FILE))
    } else {
        load_manifest(path)
    }
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let data = open_dataset(&args.data)?.load_pairs()?;
    let mut trainer = if args.resume {
        Trainer::resume(&args.run_dir, data, args.epochs)?
    } else {
        cfg.write(&args.run_dir)?;
        Trainer::new(&args.run_dir, cfg.pipeline.clone(), cfg.train.clone(), data)?
    };
    println!(
        "training {} epochs from epoch {} ({} steps per epoch)",
        trainer.cfg.epochs,
        trainer.epochs_completed,
        trainer.steps_per_epoch()
    );
    while trainer.epochs_completed < trainer.cfg.epochs {
        let lr = trainer.current_lr()?;
        let reports = trainer.run_epoch()?;
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&m2gan::training::LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        println!(
            "epoch {:>3}  lr {lr:.3e}  g_total {:.5}  g_mae {:.5}",
            trainer.epochs_completed,
            mean(|r| r.g_total),
            mean(|r| r.g_mae)
        );
    }
    println!("run directory: {}", args.run_dir.display());
    Ok(())
}

/// Reflect-pad so both sides are multiples of `d`.
fn pad_to_multiple(img: &ImagePlane, d: usize) -> ImagePlane {
    let (h, w, c) = img.dims();
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let reflect = |i: usize, n: usize| {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    ImagePlane::from_fn(ph, pw, c, |ch, y, x| img.get(ch, reflect(y, h), reflect(x, w)))
}

fn derain_one(
    generator: &Generator,
    segmenter: &m2gan::conditioning::SegmenterHandle,
    observation: &ImagePlane,
    stages: Option<usize>,
) -> Result<Vec<m2gan::generator::StageOutput>> {
    let (h, w, _) = observation.dims();
    let padded = pad_to_multiple(observation, generator.cfg.urdb.divisor());
    let mut outs = generator.multistage_forward(&padded, segmenter, stages)?;
    if padded.dims() != observation.dims() {
        for o in &mut outs {
            o.estimate = o.estimate.crop(0, 0, h, w)?;
            let map = o.rain_map_out.plane().crop(0, 0, h, w)?;
            o.rain_map_out = m2gan::plane::AttentionRainMap::new(map)?;
        }
    }
    Ok(outs)
}

fn cmd_derain(
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    stages: Option<usize>,
    dump_maps: bool,
    all_stages: bool,
) -> Result<()> {
    let (generator, meta) = load_generator(checkpoint)?;
    if let Some(s) = stages {
        if s == 0 || s > generator.cfg.num_stages {
            return Err(M2ganError::Config(format!(
                "--stages {s} outside 1..={} for this checkpoint",
                generator.cfg.num_stages
            )));
        }
    }
    let segmenter = m2gan::conditioning::SegmenterHandle::Toy(meta.train.segmenter.clone());
    let names = png_names(input_dir)?;
    if names.is_empty() {
        return Err(M2ganError::Ingestion { path: input_dir.to_path_buf(), reason: "no PNG images found".into() });
    }
    std::fs::create_dir_all(out_dir)?;
    for name in &names {
        let observation = ImagePlane::load_png(&input_dir.join(name))?;
        let outs = derain_one(&generator, &segmenter, &observation, stages)?;
        let last = outs.last().expect("at least one stage");
        last.estimate.save_png(&out_dir.join(name))?;
        let id = m2gan::data::file_id(name);
        for (k, o) in outs.iter().enumerate() {
            if all_stages {
                let dir = out_dir.join("stages");
                std::fs::create_dir_all(&dir)?;
                o.estimate.save_png(&dir.join(format!("{id}_stage{}.png", k + 1)))?;
            }
            if dump_maps {
                let dir = out_dir.join("rain_maps");
                std::fs::create_dir_all(&dir)?;
                o.rain_map_out.plane().save_png(&dir.join(format!("{id}_stage{}.png", k + 1)))?;
            }
        }
    }
    println!("derained {} images into {}", names.len(), out_dir.display());
    Ok(())
}

fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, out_dir: Option<&Path>, embedder_seed: u64) -> Result<()> {
    let report = evaluate_dirs(pred_dir, gt_dir, &RandomCnnEmbedder::new(embedder_seed))?;
    print!("{}", report.to_table());
    report.write(out_dir.unwrap_or(pred_dir))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolved(cli)?;
    match &cli.command {
        Command::Synthesize { clean_dir, out_dir } => cmd_synthesize(&cfg, clean_dir, out_dir),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Derain { checkpoint, input_dir, out_dir, stages, dump_maps, all_stages } => {
            cmd_derain(checkpoint, input_dir, out_dir, *stages, *dump_maps, *all_stages)
        }
        Command::Evaluate { pred_dir, gt_dir, out_dir, embedder_seed } => {
            cmd_evaluate(pred_dir, gt_dir, out_dir.as_deref(), *embedder_seed)
        }
    }
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let M2ganError::Validation { ids, .. } = &e {
                for id in ids {
                    eprintln!("  {id}");
                }
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
