//! `cryograph` command-line driver.
//!
//! Settings come from a TOML run config; flags override a few of them. The
//! log level is read from `CRYOGRAPH_LOG` (`quiet`, `info` or `debug`).
//! Failures print one `error[class]: message` line to stderr and exit with 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cryograph::config::RunConfig;
use cryograph::container::peek_magic;
use cryograph::data::{read_stack, simulate_stack, write_stack, StackReader, STACK_MAGIC};
use cryograph::eval::{ensure_matching, evaluate};
use cryograph::graph::ProteinGraph;
use cryograph::pose::{PoseCache, POSE_CACHE_MAGIC};
use cryograph::train::{metrics_csv, Checkpoint, PoseMode, Trainer, CHECKPOINT_MAGIC};
use cryograph::{Error, Result};

#[derive(Parser)]
#[command(name = "cryograph", version, about = "Per-image backbone reconstruction from simulated cryo-EM images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Poses {
    Known,
    Esl,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an image stack from the config's template, trajectory and imaging settings.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output stack (default: paths.stack).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a decoder and per-image latents on a stack.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Input stack (default: paths.stack).
        #[arg(long)]
        stack: Option<PathBuf>,
        /// Output directory (default: paths.out_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Decoder name: the kind of [train.decoder] or a key of [decoders].
        #[arg(long)]
        decoder: Option<String>,
        #[arg(long, value_enum)]
        poses: Option<Poses>,
        /// Override train.max_epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against the ground truth of its stack.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Histogram bin width in Å.
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
        /// Evaluate even if the checkpoint was trained on a different stack.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a stack, checkpoint or pose-cache file without reading its payload.
    Inspect {
        path: PathBuf,
        /// Also verify every section checksum.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Level {
    Quiet,
    Info,
    Debug,
}

fn log_level() -> Level {
    match std::env::var("CRYOGRAPH_LOG").as_deref() {
        Ok("quiet") | Ok("error") => Level::Quiet,
        Ok("debug") => Level::Debug,
        _ => Level::Info,
    }
}

fn info(msg: &str) {
    if log_level() >= Level::Info {
        eprintln!("{msg}");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    if let Some(n) = cfg.threads {
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn cmd_simulate(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let template = cfg.template()?;
    let model = cfg.forward_model(&template)?;
    let frames = cfg.trajectory(&template)?;
    let spec = cfg.simulation_spec()?;
    let mut stack = simulate_stack(&frames, &model, &spec)?;
    stack.config_hash = cfg.hash();
    let out = out.unwrap_or_else(|| cfg.paths.stack.clone());
    write_stack(&stack, &out)?;
    let g = stack.grid;
    println!(
        "wrote {}: {} images ({} frames x {}), {}x{} px at {} A, noise sigma {:.4e}, config {}",
        out.display(),
        stack.len(),
        frames.len(),
        spec.images_per_frame,
        g.side(),
        g.side(),
        g.pixel_size(),
        stack.noise_sigma,
        stack.config_hash
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    stack_path: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    decoder: Option<String>,
    poses: Option<Poses>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let poses = poses.map(|p| match p {
        Poses::Known => PoseMode::Known,
        Poses::Esl => PoseMode::Esl,
    });
    cfg.apply_overrides(decoder.as_deref(), poses, epochs)?;
    let hash = cfg.hash();
    let train = cfg.train_config()?.clone();
    let stack_path = stack_path.unwrap_or_else(|| cfg.paths.stack.clone());
    let out_dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
    let stack = read_stack(&stack_path)?;
    let template = cfg.template()?;
    let graph = cfg.graph(&template)?;
    fs::create_dir_all(&out_dir)?;

    let mut trainer = match &resume {
        Some(path) => {
            let mut ck = Checkpoint::read(path)?;
            let mut launched = ck.config.clone();
            launched.max_epochs = train.max_epochs;
            if launched != train {
                return Err(Error::Config(format!(
                    "{}: the checkpoint was trained with a different [train] configuration",
                    path.display()
                )));
            }
            ck.config.max_epochs = train.max_epochs;
            info(&format!("resuming {} after epoch {}", path.display(), ck.epochs_done));
            Trainer::resume(&stack, &graph, ck)?
        }
        None => Trainer::new(&stack, &template.coords, &graph, train, Some(hash))?,
    };
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut walls: Vec<Option<f64>> = vec![None; trainer.epochs_done()];
    let decoder = trainer.state().decoder.kind();
    info(&format!(
        "training {decoder} ({} weights) on {} images, {:?} poses",
        trainer.state().decoder.param_count(),
        stack.len(),
        trainer.state().config.pose_mode
    ));
    trainer.run(|t, m| {
        walls.push(Some(m.wall_time_s));
        let s = t.state();
        s.write(&ckpt_path)?;
        write_file(&metrics_path, &metrics_csv(&s.config_hash, &s.history, &walls))?;
        let rmsd = m.record.mean_rmsd.map(|r| format!(" rmsd {r:.4}")).unwrap_or_default();
        info(&format!(
            "epoch {} loss {:.6e}{rmsd} ({:.2} s)",
            m.record.epoch, m.record.mean_loss, m.wall_time_s
        ));
        Ok(())
    })?;
    let s = trainer.state();
    if let Some(cache) = &s.pose_cache {
        cache.write(&out_dir.join("poses.cache"))?;
    }
    // a resumed run that is already finished still leaves its files in place
    s.write(&ckpt_path)?;
    write_file(&metrics_path, &metrics_csv(&s.config_hash, &s.history, &walls))?;
    let last = s.history.last();
    println!(
        "trained {} epochs; final loss {}; mean rmsd {}; checkpoint {}; config {}",
        s.epochs_done,
        last.map(|r| format!("{:.6e}", r.mean_loss)).unwrap_or_else(|| "-".into()),
        last.and_then(|r| r.mean_rmsd).map(|r| format!("{r:.4} A")).unwrap_or_else(|| "-".into()),
        ckpt_path.display(),
        s.config_hash
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, stack_path: &Path, out_dir: &Path, bin_width: f64, force: bool) -> Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let stack = read_stack(stack_path)?;
    if let Err(e) = ensure_matching(&ck, &stack) {
        if !force {
            return Err(Error::Config(format!("{e} (pass --force to evaluate anyway)")));
        }
        info(&format!("warning: {e}; continuing because of --force"));
    }
    let graph = ProteinGraph::from_edges(ck.template.residue_count(), ck.edges.iter().copied())?;
    let report = evaluate(&ck, &stack, &graph)?;
    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("report.json"), &report.to_json())?;
    let frame_of = &stack.ground_truth()?.frame_of;
    write_file(&out_dir.join("report.csv"), &report.to_csv(frame_of))?;
    write_file(&out_dir.join("histogram.csv"), &report.histogram_csv(bin_width)?)?;
    let pose = report
        .pose_error_stats
        .as_ref()
        .map(|p| format!("; pose error mean {:.4} rad, median {:.4} rad", p.mean, p.median))
        .unwrap_or_default();
    println!(
        "{} images: mean rmsd {:.4} A, median {:.4} A, template baseline {:.4} A{pose}; reports in {}",
        report.per_image_rmsd.len(),
        report.mean_rmsd,
        report.median_rmsd,
        report.template_mean_rmsd,
        out_dir.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path, verify: bool) -> Result<()> {
    let magic = peek_magic(path)?;
    if &magic == STACK_MAGIC {
        let reader = StackReader::open(path)?;
        let h = reader.header();
        println!("stack {}", path.display());
        println!("  images        {}", h.image_count);
        println!("  grid          {}x{} px, {} A/px", h.grid.side(), h.grid.side(), h.grid.pixel_size());
        println!("  residues      {}", h.profile.len());
        match &h.ctf {
            Some(c) => println!(
                "  ctf           Cs {} mm, defocus {} um, amplitude contrast {}",
                c.cs_mm, c.defocus_um, c.amplitude_contrast
            ),
            None => println!("  ctf           none"),
        }
        println!("  noise sigma   {:.6e}", h.noise_sigma);
        if let Some(d) = h.dose {
            println!("  dose          {d} e/A^2");
        }
        println!("  ground truth  {}", if h.has_ground_truth() { format!("{} frames", h.frame_count) } else { "none".into() });
        println!("  seed          {}", h.seed);
        println!("  config hash   {}", h.config_hash);
        if verify {
            reader.container().verify()?;
            println!("  checksums     ok");
        }
    } else if &magic == CHECKPOINT_MAGIC {
        let (meta, container) = Checkpoint::read_meta(path)?;
        println!("checkpoint {}", path.display());
        println!("  decoder       {} ({} weights)", meta.decoder_kind, meta.param_count);
        println!("  latents       {} x {}", meta.latent_count, meta.latent_dim);
        println!("  residues      {}, {} edges", meta.residue_count, meta.edges.len());
        println!("  poses         {:?}", meta.config.pose_mode);
        println!("  epochs        {} of {}", meta.epochs_done, meta.config.max_epochs);
        if let Some(r) = meta.history.last() {
            let rmsd = r.mean_rmsd.map(|v| format!(", mean rmsd {v:.4} A")).unwrap_or_default();
            println!("  last epoch    loss {:.6e}{rmsd}", r.mean_loss);
        }
        println!("  stack digest  {}", meta.stack_digest);
        println!("  config hash   {}", meta.config_hash);
        if verify {
            container.verify()?;
            println!("  checksums     ok");
        }
    } else if &magic == POSE_CACHE_MAGIC {
        let cache = PoseCache::load(path)?;
        println!("pose cache {}", path.display());
        println!("  images        {}", cache.entries.len());
        println!("  grid points   {}", cache.grid_points);
        println!("  epoch         {}", cache.epoch);
        println!("  config hash   {}", cache.config_hash);
    } else {
        return Err(Error::Format(format!(
            "{}: not a cryograph file (magic {:?})",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, out),
        Command::Train {
            config,
            stack,
            out_dir,
            decoder,
            poses,
            epochs,
            resume,
        } => cmd_train(&config, stack, out_dir, decoder, poses, epochs, resume),
        Command::Evaluate {
            checkpoint,
            stack,
            out_dir,
            bin_width,
            force,
        } => cmd_evaluate(&checkpoint, &stack, &out_dir, bin_width, force),
        Command::Inspect { path, verify } => cmd_inspect(&path, verify),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
