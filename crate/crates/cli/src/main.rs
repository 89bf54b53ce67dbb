use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vitsplice::config::Config;
use vitsplice::convert::convert_checkpoint;
use vitsplice::dump::{dump_features, keys_pca, write_pca};
use vitsplice::error::ErrorKind;
use vitsplice::inversion::{capture_target, invert_with, Facet};
use vitsplice::metrics::evaluate_transfer;
use vitsplice::trainer::{RunDir, Trainer};
use vitsplice::{Backbone, ImageTensor, SyntheticBackbone};

mod manifest;

use manifest::{file_hash, Manifest, RunRecord};

pub const WEIGHTS_ENV: &str = "VITSPLICE_WEIGHTS";
const DEFAULT_WEIGHTS: &str = "weights/backbone.safetensors";

#[derive(Parser)]
#[command(name = "vitsplice", version, about = "Semantic appearance transfer with a frozen ViT")]
struct Cli {
    /// Backbone archive (or a directory containing backbone.safetensors).
    /// Falls back to $VITSPLICE_WEIGHTS, then ./weights/backbone.safetensors.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set loss.alpha=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Term {
    App,
    Structure,
    Id,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    VitB8,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on one structure/appearance pair.
    Transfer {
        #[arg(long, required_unless_present = "resume")]
        structure: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume")]
        appearance: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume")]
        out: Option<PathBuf>,
        /// Continue an existing run directory from its latest checkpoint.
        #[arg(long, conflicts_with = "out")]
        resume: Option<PathBuf>,
        /// Remove a loss term; may be repeated.
        #[arg(long, value_enum)]
        ablate: Vec<Term>,
        #[arg(long)]
        deterministic: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct an image from its [CLS] token or keys.
    Invert {
        #[arg(long)]
        image: PathBuf,
        /// One of: cls, keys.
        #[arg(long, default_value = "cls")]
        facet: String,
        /// Backbone layer; defaults to the deepest.
        #[arg(long)]
        layer: Option<usize>,
        /// Independent runs with consecutive noise seeds.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export the top principal components of the deepest-layer key self-similarity.
    PcaKeys {
        #[arg(long)]
        image: PathBuf,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Convert a PyTorch ViT checkpoint into a backbone archive.
    ConvertWeights {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attention heads; defaults to embed_dim / 64.
        #[arg(long)]
        num_heads: Option<usize>,
    },
    /// Write raw per-layer features of an image.
    DumpFeatures {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Write a randomly initialized backbone archive (for tests and offline demos).
    SynthWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vit-b8")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute transfer metrics for a structure, appearance and output image.
    Evaluate {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Append the report to this run directory's manifest.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<vitsplice::Error>())
        .map(|e| e.kind());
    match kind {
        Some(ErrorKind::Usage) => 2,
        Some(ErrorKind::Input) => 3,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Internal) | None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_weights(flag: Option<&Path>) -> anyhow::Result<PathBuf> {
    let candidate = match flag {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(WEIGHTS_ENV) {
            Some(v) => PathBuf::from(v),
            None => PathBuf::from(DEFAULT_WEIGHTS),
        },
    };
    let path = if candidate.is_dir() {
        candidate.join("backbone.safetensors")
    } else {
        candidate
    };
    if !path.is_file() {
        return Err(vitsplice::Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "backbone archive not found"),
        ))
        .context(format!("set --weights or ${WEIGHTS_ENV}"));
    }
    Ok(path)
}

fn load_backbone(flag: Option<&Path>) -> anyhow::Result<(Backbone, PathBuf)> {
    let path = resolve_weights(flag)?;
    let archive = vitsplice::archive::WeightArchive::read(&path)?;
    let backbone = Backbone::from_archive(&archive, &candle_core::Device::Cpu, candle_core::DType::F32)?;
    info!("backbone {} ({} layers, checksum {})", path.display(), backbone.num_layers(), &backbone.checksum()[..12]);
    Ok((backbone, path))
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg = cfg.with_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
        cfg.inversion.noise_seed = seed;
    }
    Ok(cfg)
}

fn load_image(p: &Path) -> anyhow::Result<ImageTensor> {
    Ok(ImageTensor::load(p)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let weights = cli.weights.as_deref();
    match cli.command {
        Command::Transfer {
            structure,
            appearance,
            out,
            resume,
            ablate,
            deterministic,
            config,
        } => cmd_transfer(weights, structure, appearance, out, resume, &ablate, deterministic, &config),
        Command::Invert {
            image,
            facet,
            layer,
            runs,
            out,
            config,
        } => cmd_invert(weights, &image, &facet, layer, runs, &out, &config),
        Command::PcaKeys { image, k, out, size } => cmd_pca_keys(weights, &image, k, &out, size),
        Command::ConvertWeights { source, out, num_heads } => cmd_convert(&source, &out, num_heads),
        Command::DumpFeatures {
            image,
            layers,
            out,
            size,
        } => {
            let img = load_image(&image)?;
            let (backbone, _) = load_backbone(weights)?;
            let m = dump_features(&backbone, &img, &layers, size, &out)?;
            println!("wrote {} arrays to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::SynthWeights { out, preset, seed } => {
            let synth = match preset {
                Preset::VitB8 => SyntheticBackbone::vit_b8(seed),
                Preset::Desk => SyntheticBackbone::desk(seed),
            };
            let archive = synth.build();
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            archive.write(&out)?;
            println!("parameters: {}", archive.parameter_count());
            println!("checksum: {}", archive.checksum());
            Ok(())
        }
        Command::Evaluate {
            structure,
            appearance,
            output,
            size,
            run_dir,
        } => {
            let (s, t, o) = (load_image(&structure)?, load_image(&appearance)?, load_image(&output)?);
            let (backbone, _) = load_backbone(weights)?;
            let report = evaluate_transfer(&backbone, &s, &t, &o, size)?;
            print!("{}", report.to_text());
            if let Some(dir) = run_dir {
                Manifest::open(&dir)?.append(&RunRecord::metrics(report))?;
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_transfer(
    weights: Option<&Path>,
    structure: Option<PathBuf>,
    appearance: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    ablate: &[Term],
    deterministic: bool,
    args: &ConfigArgs,
) -> anyhow::Result<()> {
    let (run_root, resumed) = match (&resume, &out) {
        (Some(r), _) => (r.clone(), true),
        (None, Some(o)) => (o.clone(), false),
        (None, None) => return Err(anyhow!(vitsplice::Error::InvalidArgument("--out is required".into()))),
    };
    let (structure, appearance) = if resumed {
        let m = Manifest::open(&run_root)?;
        let first = m.first_run()?;
        (
            structure.or_else(|| first.input("structure")).ok_or_else(|| anyhow!("manifest has no structure path"))?,
            appearance.or_else(|| first.input("appearance")).ok_or_else(|| anyhow!("manifest has no appearance path"))?,
        )
    } else {
        (structure.expect("required by clap"), appearance.expect("required by clap"))
    };
    // Read everything before touching the output directory.
    let s = load_image(&structure)?;
    let t = load_image(&appearance)?;
    let (backbone, weights_path) = load_backbone(weights)?;

    let trainer = if resumed {
        if !ablate.is_empty() || args.config.is_some() || !args.set.is_empty() || args.seed.is_some() {
            return Err(anyhow!(vitsplice::Error::InvalidArgument(
                "a resumed run keeps its recorded configuration".into()
            )));
        }
        Trainer::resume(&backbone, s.clone(), t.clone(), RunDir::open(&run_root)?)?
    } else {
        let mut cfg = load_config(args)?;
        for term in ablate {
            match term {
                Term::App => cfg.ablation.app = true,
                Term::Structure => cfg.ablation.structure = true,
                Term::Id => cfg.ablation.id = true,
            }
        }
        if deterministic {
            cfg.trainer.deterministic = true;
        }
        let trainer = Trainer::new(&backbone, s.clone(), t.clone(), cfg.train())?;
        trainer.with_run_dir(RunDir::create(&run_root)?)?
    };
    let train_cfg = trainer.config().clone();
    let mut manifest = Manifest::open_or_create(&run_root)?;
    let mut record = RunRecord::start(
        if resumed { "transfer --resume" } else { "transfer" },
        train_cfg.to_toml()?,
        train_cfg.trainer.seed,
        train_cfg.ablation.flags(),
        train_cfg.trainer.deterministic,
    );
    record.add_input("structure", &structure, file_hash(&structure)?);
    record.add_input("appearance", &appearance, file_hash(&appearance)?);
    record.add_input("weights", &weights_path, backbone.checksum().to_string());
    manifest.append(&record)?;

    let total = train_cfg.trainer.total_iterations;
    let every = (total / 20).max(1);
    let started = std::time::Instant::now();
    let outcome = trainer.run_with(|r| {
        if r.iteration % every == 0 || r.iteration == 1 {
            info!(
                "iter {}/{}: total {:.4} app {:.4} structure {:.4} id {:.4}",
                r.iteration, total, r.total, r.app, r.structure, r.id
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.append(&RunRecord::failure(&e.to_string()))?;
            return Err(e.into());
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    let report = evaluate_transfer(&backbone, &s, &t, &outcome.output, train_cfg.trainer.feature_resize)?;
    let report_path = run_root.join("outputs").join("report.txt");
    std::fs::write(&report_path, report.to_text()).with_context(|| report_path.display().to_string())?;
    manifest.append(&RunRecord::finish(outcome.state.iteration, elapsed))?;
    manifest.append(&RunRecord::metrics(report))?;
    println!("{}", run_root.join("outputs").join("final.png").display());
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_invert(
    weights: Option<&Path>,
    image: &Path,
    facet: &str,
    layer: Option<usize>,
    runs: usize,
    out: &Path,
    args: &ConfigArgs,
) -> anyhow::Result<()> {
    let facet: Facet = facet.parse()?;
    if runs == 0 {
        return Err(anyhow!(vitsplice::Error::InvalidArgument("--runs must be at least 1".into())));
    }
    let cfg = load_config(args)?;
    let img = load_image(image)?;
    let (backbone, weights_path) = load_backbone(weights)?;
    let layer = layer.unwrap_or(backbone.num_layers());
    let mut inv = cfg.inversion.clone();
    inv.output_size = backbone.processed_size(img.height(), img.width(), inv.feature_size)?;
    let target = capture_target(&backbone, &img, facet, layer, inv.feature_size)?;

    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let mut manifest = Manifest::open_or_create(out)?;
    let mut record = RunRecord::start(
        "invert",
        toml::to_string(&inv).context("serializing inversion config")?,
        inv.noise_seed,
        vec![],
        true,
    );
    record.add_input("image", image, file_hash(image)?);
    record.add_input("weights", &weights_path, backbone.checksum().to_string());
    record.extra("facet", facet.to_string());
    record.extra("layer", layer.to_string());
    record.extra("runs", runs.to_string());
    manifest.append(&record)?;

    let started = std::time::Instant::now();
    for r in 0..runs {
        let mut cfg_r = inv.clone();
        cfg_r.noise_seed = inv.noise_seed + r as u64;
        let dir = if runs == 1 { out.to_path_buf() } else { out.join(format!("run_{r}")) };
        let every = (cfg_r.iterations / 10).max(1);
        let result = invert_with(&backbone, &target, &cfg_r, |i, d| {
            if i % every == 0 {
                info!("run {r} iter {i}: distance {d:.5}");
            }
        });
        let result = match result {
            Ok(v) => v,
            Err(e) => {
                manifest.append(&RunRecord::failure(&e.to_string()))?;
                return Err(e.into());
            }
        };
        result.write(&dir, &target, &cfg_r)?;
        println!(
            "{}: distance {:.5} -> {:.5} (seed {})",
            dir.join("result.png").display(),
            result.initial_distance(),
            result.best_distance,
            cfg_r.noise_seed
        );
    }
    manifest.append(&RunRecord::finish(inv.iterations, started.elapsed().as_secs_f64()))?;
    Ok(())
}

fn cmd_pca_keys(weights: Option<&Path>, image: &Path, k: usize, out: &Path, size: usize) -> anyhow::Result<()> {
    if k == 0 {
        return Err(anyhow!(vitsplice::Error::InvalidArgument("k must be at least 1".into())));
    }
    let img = load_image(image)?;
    let (backbone, _) = load_backbone(weights)?;
    let pca = keys_pca(&backbone, &img, k, size)?;
    write_pca(&pca, &img, out)?;
    if pca.degenerate {
        log::warn!("self-similarity spectrum is degenerate; component order is arbitrary");
    }
    println!("wrote {k} components ({}x{}) to {}", pca.grid.0, pca.grid.1, out.display());
    Ok(())
}

fn cmd_convert(source: &Path, out: &Path, num_heads: Option<usize>) -> anyhow::Result<()> {
    let archive = convert_checkpoint(source, num_heads)?;
    archive.write(out)?;
    println!("parameters: {}", archive.parameter_count());
    println!("checksum: {}", archive.checksum());
    Ok(())
}
