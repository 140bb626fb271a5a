use clap::{Parser, Subcommand};
use endomap::evaluation::EvalReport;
use endomap::pipeline::{exceeds_ceiling, run_pipeline, run_stage, synth_dataset, PipelineConfig};
use endomap::synthkit::DatasetParams;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "endomap", version, about = "Surface maps from monocular endoscopic frame sequences")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic standard dataset into --out.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Reflection suppression, vignetting correction, sharpening, undistortion.
    Preprocess,
    /// Dense descriptors and consecutive-frame matches.
    Features,
    /// Register and blend frames into a canvas.
    Stitch,
    /// Shape from shading on the canvas.
    Sfs,
    /// Compare depth against the reference.
    Evaluate,
    /// All stages in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, endomap::Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!(
            "group_size={} groups={} mean={:.3}% std={:.3}% raw_mean={:.3}%",
            r.group_size,
            r.rms_percent.len(),
            r.mean,
            r.stddev,
            r.raw_mean
        );
    }
}

fn run(cli: &Cli) -> Result<ExitCode, endomap::Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { frames, size } => {
            let mut p: DatasetParams = cfg.synth;
            if let Some(f) = frames {
                p.frames = *f;
            }
            if let Some(s) = size {
                p.size = *s;
            }
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
            let (_, files) = synth_dataset(&p, &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Pipeline => {
            let (manifest, reports) = run_pipeline(&cfg)?;
            println!("manifest {} ({} stages)", cfg.output.join("manifest.json").display(), manifest.stages.len());
            if let Some(r) = reports {
                print_reports(&r);
                if exceeds_ceiling(&r, cfg.evaluation.rms_ceiling) {
                    eprintln!("RMS ceiling {}% exceeded", cfg.evaluation.rms_ceiling);
                    return Ok(ExitCode::from(2));
                }
            }
        }
        stage => {
            let name = match stage {
                Command::Preprocess => "preprocess",
                Command::Features => "features",
                Command::Stitch => "stitch",
                Command::Sfs => "sfs",
                _ => "evaluate",
            };
            let m = run_stage(name, &cfg)?;
            for w in &m.warnings {
                log::warn!("{w}");
            }
            println!("{name}: {} outputs in {:.0} ms", m.outputs.len(), m.timing_ms);
            if name == "evaluate" {
                let reports: Vec<EvalReport> = serde_json::from_value(m.records.clone())
                    .map_err(|e| endomap::Error::Format(e.to_string()))?;
                print_reports(&reports);
                if exceeds_ceiling(&reports, cfg.evaluation.rms_ceiling) {
                    eprintln!("RMS ceiling {}% exceeded", cfg.evaluation.rms_ceiling);
                    return Ok(ExitCode::from(2));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
