use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use log::info;

use evdm::evaluation::{DisplacementTable, MetricReport};
use evdm::optimizer::TrackerConfig;
use evdm::simulator::{self, SceneSpec};
use evdm::tracker::{self, Dataset};
use evdm::{config::FlatConfig, render};

#[derive(Parser)]
#[command(name = "evdm", version, about = "Dense deformation tracking from events and frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a sequence.
    Track {
        #[arg(long)]
        events: PathBuf,
        /// Frame manifest.
        #[arg(long)]
        frames: PathBuf,
        /// Tracker config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted displacements against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write PGM visualizations of a tracking result.
    #[command(group(ArgGroup::new("kind").required(true).multiple(true).args(["iwe", "strain"])))]
    Render {
        /// Warped-event images and outlier-fraction maps.
        #[arg(long)]
        iwe: bool,
        /// Von Mises strain heat maps.
        #[arg(long)]
        strain: bool,
        /// Tracking output directory.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn simulate(spec: &Path, out: &Path) -> evdm::Result<()> {
    let spec = SceneSpec::from_config(&FlatConfig::load(spec)?)?;
    let m = simulator::make_sequence(&spec, out)?;
    println!(
        "{} frames, {} events, {} query points -> {}",
        m.frames,
        m.events,
        m.query_points,
        out.display()
    );
    Ok(())
}

fn track(events: &Path, frames: &Path, config: Option<&Path>, out: &Path) -> evdm::Result<()> {
    let cfg = match config {
        Some(p) => TrackerConfig::load(p)?,
        None => TrackerConfig::default(),
    };
    let data = Dataset::load(events, frames)?;
    info!("{} events, {} frames", data.events.len(), data.frames.len());
    let result = tracker::track_sequence(&data, &cfg)?;
    result.write(out, Some((events, frames)))?;
    let failed = result.windows.iter().filter(|w| w.error.is_some()).count();
    println!(
        "{} windows ({failed} failed) -> {}",
        result.windows.len(),
        out.display()
    );
    Ok(())
}

fn eval(pred: &Path, gt: &Path, report: &Path) -> evdm::Result<()> {
    let pred = DisplacementTable::read_csv(pred)?;
    let gt = DisplacementTable::read_csv(gt)?;
    let r = MetricReport::compute(&pred, &gt)?;
    r.write(report)?;
    print!("{}", r.to_text());
    Ok(())
}

fn run(command: Command) -> evdm::Result<()> {
    match command {
        Command::Simulate { spec, out } => simulate(&spec, &out),
        Command::Track {
            events,
            frames,
            config,
            out,
        } => track(&events, &frames, config.as_deref(), &out),
        Command::Eval { pred, gt, report } => eval(&pred, &gt, &report),
        Command::Render {
            iwe,
            strain,
            input,
            out,
        } => {
            let mut n = 0;
            if iwe {
                n += render::render_iwe(&input, &out)?.len();
            }
            if strain {
                n += render::render_strain(&input, &out)?.len();
            }
            println!("{n} images -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
