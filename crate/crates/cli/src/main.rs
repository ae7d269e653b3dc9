use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fetalseg::augment::IiaParams;
use fetalseg::config::ExperimentConfig;
use fetalseg::experiment::{
    self, checkpoint_path, data_dir, image_path, load_dataset, prediction_path, AblationArm, Stage,
};
use fetalseg::metrics::Subset;
use fetalseg::nnet::gradcheck;
use fetalseg::Error;

#[derive(Parser)]
#[command(
    name = "fetalseg",
    version,
    about = "Fetal brain MRI tissue segmentation with intensity inhomogeneity augmentation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent training jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and manifest under <out>/data.
    Phantom,
    /// Train one stage and write <out>/models/<stage>_<arm>.unet.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long, default_value = "flip+rot+IIA")]
        arm: AblationArm,
    },
    /// Run the two-stage pipeline on one volume, or on every test volume.
    Segment {
        /// Input `.mvol`; without it every test case in <out>/data is segmented.
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// ICV checkpoint; defaults to <out>/models/icv_<arm>.unet.
        #[arg(long)]
        icv: Option<PathBuf>,
        /// Tissue checkpoint; defaults to <out>/models/tissue_<arm>.unet.
        #[arg(long)]
        tissue: Option<PathBuf>,
        #[arg(long, default_value = "flip+rot+IIA")]
        arm: AblationArm,
    },
    /// Score predictions against the references of the test cases.
    Evaluate {
        /// Dataset directory; defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction directory; defaults to <out>/pred.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Train and compare the four augmentation arms.
    Ablation,
    /// Train with different IIA proportions per batch.
    Sweep {
        /// Comma-separated proportions; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        proportions: Option<Vec<f64>>,
    },
    /// Augmentation tools.
    Augment {
        #[command(subcommand)]
        command: AugmentCommand,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck,
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Write original / field / augmented PGM triptychs for every slice.
    Preview {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(label: &str, report: &fetalseg::metrics::MetricsReport) {
    let cells: Vec<String> = Subset::ALL
        .iter()
        .map(|&s| {
            let m = report.grand(s);
            format!(
                "{} dc={} msd={}",
                s.name(),
                fetalseg::metrics::na(m.dc.map(|v| (v * 1e4).round() / 1e4)),
                fetalseg::metrics::na(m.msd.map(|v| (v * 1e4).round() / 1e4))
            )
        })
        .collect();
    println!("{label:>14}: {}", cells.join("  "));
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gradcheck => {
            let seed = g.seed.unwrap_or(1);
            let mut ok = true;
            for (r, tol) in gradcheck::run_all(seed)? {
                let pass = r.passes(tol);
                ok &= pass;
                println!(
                    "{} {:<32} {:>6} values  max rel error {:.3e} (limit {tol:.0e})",
                    if pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.checked,
                    r.max_rel_error
                );
            }
            if !ok {
                bail!("gradient check failed");
            }
        }
        Command::Phantom => {
            let cfg = load_config(g)?;
            let ds = experiment::cmd_phantom(&cfg)?;
            println!(
                "wrote {} cases ({} train, {} test) to {}",
                ds.cases.len(),
                ds.train.len(),
                ds.test.len(),
                data_dir(&cfg.out_dir).display()
            );
        }
        Command::Train { stage, arm } => {
            let cfg = load_config(g)?;
            let (path, model) = experiment::cmd_train(&cfg, stage, arm, |epoch, loss| {
                eprintln!("epoch {epoch:>4}  loss {loss:.6}");
            })?;
            println!(
                "{} steps, {} slices augmented ({} flipped, {} rotated, {} with IIA); checkpoint {}",
                model.report.steps,
                model.report.draws.slices,
                model.report.draws.flipped,
                model.report.draws.rotated,
                model.report.draws.iia,
                path.display()
            );
        }
        Command::Segment {
            input,
            output,
            icv,
            tissue,
            arm,
        } => {
            let cfg = load_config(g)?;
            let icv = icv.unwrap_or_else(|| checkpoint_path(&cfg.out_dir, Stage::Icv, arm));
            let tissue = tissue.unwrap_or_else(|| checkpoint_path(&cfg.out_dir, Stage::Tissue, arm));
            let jobs: Vec<(PathBuf, PathBuf)> = match (input, output) {
                (Some(i), Some(o)) => vec![(i, o)],
                _ => {
                    let dir = data_dir(&cfg.out_dir);
                    let ds = load_dataset(&dir).context("no dataset; run `fetalseg phantom` first")?;
                    let pred = cfg.out_dir.join("pred");
                    ds.test_cases()
                        .map(|c| (image_path(&dir, &c.id), prediction_path(&pred, &c.id)))
                        .collect()
                }
            };
            for (i, o) in jobs {
                let seg = experiment::cmd_segment(&cfg, &i, &icv, &tissue, &o)?;
                println!(
                    "{} -> {} (ICV {} voxels, ROI {})",
                    i.display(),
                    o.display(),
                    seg.icv.mask.count(),
                    seg.icv.roi.to_text()
                );
            }
        }
        Command::Evaluate { data, pred } => {
            let cfg = load_config(g)?;
            let data = data.unwrap_or_else(|| data_dir(&cfg.out_dir));
            let pred = pred.unwrap_or_else(|| cfg.out_dir.join("pred"));
            let out = cfg.out_dir.join("evaluation");
            let (scores, report) = experiment::cmd_evaluate(&data, &pred, &out)?;
            println!("{} slice/class scores written to {}", scores.len(), out.display());
            print_summary("prediction", &report);
        }
        Command::Ablation => {
            let cfg = load_config(g)?;
            for (arm, r) in experiment::cmd_ablation(&cfg, g.jobs)? {
                print_summary(arm.name(), &r.report);
            }
            println!("results in {}", cfg.out_dir.join("ablation").display());
        }
        Command::Sweep { proportions } => {
            let cfg = load_config(g)?;
            let props = proportions.unwrap_or_else(|| cfg.sweep_proportions.clone());
            for (p, r) in experiment::cmd_sweep(&cfg, &props, g.jobs)? {
                print_summary(&format!("p={p}"), &r.report);
            }
            println!("results in {}", cfg.out_dir.join("sweep").display());
        }
        Command::Augment {
            command: AugmentCommand::Preview { input },
        } => {
            let cfg = load_config(g)?;
            let out = cfg.out_dir.join("preview");
            let paths = experiment::cmd_augment_preview(&input, &out, &IiaParams::default(), cfg.seed)?;
            println!("wrote {} triptychs to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Divergence(_)) => 3,
        Some(Error::NoIcv) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
