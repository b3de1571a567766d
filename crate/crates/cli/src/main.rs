//! `corncount` command-line frontend.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corncount::augment::Sample;
use corncount::config::RunConfig;
use corncount::dataio::{DatasetManifest, SplitTag};
use corncount::densitymap::{default_threshold, segment};
use corncount::evaluate::{self, compare_models, compute_metrics, CountRecord, EstimateMode, NamedReport};
use corncount::model::{checkpoint, Network};
use corncount::pipeline;
use corncount::raster::Image;
use corncount::ssl;
use corncount::synthgen::{generate_dataset, MANIFEST_FILE};
use corncount::train::{plot, train_teacher, CheckpointPlan, TrainOutcome, TrainingHistory};
use corncount::{agronomy, Error, Result};
use serde::Serialize;

const RUN_FILE: &str = "run.toml";

#[derive(Parser, Debug)]
#[command(name = "corncount", version, about = "Corn kernel counting with density maps")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything not set.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the small single-core preset instead of full-size defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write ground-truth density maps for an annotated dataset, in place.
    Densify {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build the multi-scale patch set for training.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher network on a patch set.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label unlabeled images with a teacher and build noisy copies.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose images are used; any labels are ignored.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh student on labeled patches mixed with pseudo-labeled copies.
    TrainStudent {
        #[arg(long)]
        labeled: PathBuf,
        /// Directory written by `pseudo-label`.
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count kernels on one or two side images of an ear.
    Count {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "frontside")]
        mode: EstimateMode,
        #[arg(long)]
        front: Option<PathBuf>,
        #[arg(long)]
        back: Option<PathBuf>,
        /// Write segmentation overlays into this directory.
        #[arg(long, value_name = "DIR")]
        overlay: Option<PathBuf>,
    },
    /// Score checkpoints on a dataset (raw per-image counts), or a records CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// CSV with columns ear_id,mode,ground_truth,predicted.
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        records: Option<PathBuf>,
        /// Write report CSVs here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Yield in bushels per acre from stand count and kernels per ear.
    Yield {
        #[arg(long)]
        stand: f64,
        #[arg(long)]
        kernels: f64,
        #[arg(long, default_value_t = agronomy::DEFAULT_KERNELS_PER_BUSHEL)]
        kernels_per_bushel: f64,
    },
    /// Render a training-history CSV as a loss plot PNG.
    PlotHistory {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        width: u32,
        #[arg(long, default_value_t = 500)]
        height: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Densify { .. } => "densify",
            Command::Augment { .. } => "augment",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::PseudoLabel { .. } => "pseudo-label",
            Command::TrainStudent { .. } => "train-student",
            Command::Count { .. } => "count",
            Command::Evaluate { .. } => "evaluate",
            Command::Yield { .. } => "yield",
            Command::PlotHistory { .. } => "plot-history",
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    artifacts: Vec<String>,
    config: &'a RunConfig,
}

fn write_run(dir: &Path, command: &str, config: &RunConfig, mut artifacts: Vec<String>) -> Result<()> {
    artifacts.sort();
    let text = toml::to_string(&RunRecord { command, artifacts, config }).expect("run record serializes");
    let path = dir.join(RUN_FILE);
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn parse_split(s: &str) -> Result<SplitTag> {
    match s {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        other => Err(Error::Argument(format!("unknown split `{other}` (train, val or test)"))),
    }
}

fn load_samples(manifest: &Path, config: &RunConfig) -> Result<Vec<Sample>> {
    let m = DatasetManifest::load(manifest)?;
    Ok(pipeline::load_labeled(&m, &config.sigma)?
        .into_iter()
        .map(|l| l.sample)
        .collect())
}

fn training_artifacts(role: &str, outcome: &TrainOutcome, out: &Path) -> Result<Vec<String>> {
    #[derive(Serialize)]
    struct Split<'a> {
        train: &'a [usize],
        val: &'a [usize],
    }
    let split = toml::to_string(&Split {
        train: &outcome.train_indices,
        val: &outcome.val_indices,
    })
    .expect("split serializes");
    let path = out.join(format!("{role}_split.toml"));
    fs::write(&path, split).map_err(|e| Error::Io { path, source: e })?;
    let h = &outcome.history;
    let last = h.steps.last().map(|s| s.train_loss).unwrap_or(f64::NAN);
    let val = h.evals.last().map(|e| format!("{:.5}", e.val_loss)).unwrap_or_else(|| "-".into());
    println!("{role}: {} iterations, final train loss {last:.5}, val loss {val}", h.len());
    Ok(vec![
        format!("{role}_final.ckpt"),
        format!("{role}_history.csv"),
        format!("{role}_split.toml"),
    ])
}

fn image_id(manifest: &DatasetManifest, i: usize) -> String {
    let e = &manifest.entries[i];
    e.annotation.as_ref().map(|a| a.image_id.clone()).unwrap_or_else(|| {
        Path::new(&e.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.image.clone())
    })
}

fn count_side(net: &Network, path: &Path, overlay: Option<&Path>) -> Result<f64> {
    let image = Image::load(path)?;
    let map = net.forward(&image)?;
    if !map.is_finite() {
        return Err(Error::Numerical(format!("non-finite density for {}", path.display())));
    }
    if let Some(dir) = overlay {
        let (_, over) = segment(&map, &image, default_threshold(&map))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        over.save(dir.join(format!("{stem}_overlay.png")))?;
    }
    Ok(map.sum())
}

fn run(cli: Cli) -> Result<()> {
    // Every section is validated here, before any command writes a file.
    let base = if cli.desk { RunConfig::desk() } else { RunConfig::default() };
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let config = merge(&base, &text, &cli.overrides)?;
    let name = cli.command.name();

    match cli.command {
        Command::Synth { n, seed, split, out } => {
            let split = parse_split(&split)?;
            let mut spec = config.synth.clone();
            if let Some(s) = seed {
                spec.seed = s;
            }
            for w in spec.warnings() {
                log::warn!("{w}");
            }
            let m = generate_dataset(&spec, n, &out, split)?;
            println!("wrote {} images to {}", m.entries.len(), out.display());
            let cfg = RunConfig { synth: spec, ..config };
            write_run(&out, name, &cfg, vec![MANIFEST_FILE.into(), "annotations.jsonl".into(), "images/".into()])?;
        }
        Command::Densify { manifest } => {
            let m = DatasetManifest::load(&manifest)?;
            let dense = pipeline::densify(&m, &config.sigma)?;
            dense.save(&manifest)?;
            println!("wrote {} density maps", dense.entries.iter().filter(|e| e.density.is_some()).count());
        }
        Command::Augment { manifest, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let samples: Vec<Sample> = pipeline::load_labeled(&m, &config.sigma)?.into_iter().map(|l| l.sample).collect();
            let patches = pipeline::build_patches(&samples, &config.augment)?;
            create_dir(&out)?;
            pipeline::save_patches(&patches, &out, m.split)?;
            println!("wrote {} patches from {} images", patches.len(), samples.len());
            write_run(&out, name, &config, vec![MANIFEST_FILE.into(), "images/".into(), "densities/".into()])?;
        }
        Command::TrainTeacher { manifest, out } => {
            let patches = load_samples(&manifest, &config)?;
            create_dir(&out)?;
            let net = Network::build(config.network.clone())?;
            let plan = CheckpointPlan { dir: Some(out.clone()), role: "teacher".into() };
            let outcome = train_teacher(&patches, net, &config.training, &plan)?;
            let artifacts = training_artifacts("teacher", &outcome, &out)?;
            write_run(&out, name, &config, artifacts)?;
        }
        Command::PseudoLabel { checkpoint: ckpt, manifest, out } => {
            let (teacher, _) = checkpoint::load(&ckpt)?;
            let m = DatasetManifest::load(&manifest)?;
            let mut images = Vec::with_capacity(m.entries.len());
            for (i, e) in m.entries.iter().enumerate() {
                images.push((image_id(&m, i), Image::load(m.resolve(&e.image))?));
            }
            let pseudo = ssl::pseudo_label(&teacher, &images)?;
            let noisy = ssl::make_noisy_copies(&pseudo, &config.ssl, &config.augment)?;
            create_dir(&out)?;
            ssl::save_pseudo_set(&noisy, &out)?;
            println!(
                "pseudo-labeled {} images ({} rejected), {} noisy copies",
                pseudo.len(),
                pseudo.rejected.len(),
                noisy.len()
            );
            write_run(
                &out,
                name,
                &config,
                vec![MANIFEST_FILE.into(), ssl::PROVENANCE_FILE.into(), "images/".into(), "densities/".into()],
            )?;
        }
        Command::TrainStudent { labeled, pseudo, out } => {
            let labeled = load_samples(&labeled, &config)?;
            let pseudo = ssl::load_pseudo_set(&pseudo)?;
            create_dir(&out)?;
            let plan = CheckpointPlan { dir: Some(out.clone()), role: "student".into() };
            let outcome = ssl::train_student(
                &labeled,
                &pseudo,
                config.network.clone(),
                &config.ssl,
                &config.training,
                &plan,
            )?;
            let artifacts = training_artifacts("student", &outcome, &out)?;
            write_run(&out, name, &config, artifacts)?;
        }
        Command::Count { checkpoint: ckpt, mode, front, back, overlay } => {
            let need_front = mode != EstimateMode::Backside;
            let need_back = mode != EstimateMode::Frontside;
            if (need_front && front.is_none()) || (need_back && back.is_none()) {
                return Err(Error::Argument(format!("{mode} mode needs {}", match mode {
                    EstimateMode::Frontside => "--front",
                    EstimateMode::Backside => "--back",
                    EstimateMode::Bothside => "--front and --back",
                })));
            }
            let (net, _) = checkpoint::load(&ckpt)?;
            if let Some(dir) = &overlay {
                create_dir(dir)?;
            }
            let raw = |side: &str, path: &Option<PathBuf>| -> Result<Option<f64>> {
                let Some(p) = path else { return Ok(None) };
                let c = count_side(&net, p, overlay.as_deref())?;
                println!("{side}\t{}\traw {c:.2}", p.display());
                Ok(Some(c))
            };
            let f = raw("front", &front)?;
            let b = raw("back", &back)?;
            let ear = pipeline::ear_count(mode, f, b, &config.ear)?;
            println!("{mode}\testimate {:.2}", ear.estimate);
        }
        Command::Evaluate { checkpoint: ckpts, manifest, records, out } => {
            if let Some(dir) = &out {
                create_dir(dir)?;
            }
            if let Some(path) = records {
                let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                let report = compute_metrics(&evaluate::records_from_csv(&text)?)?;
                print!("{}", report.to_text());
                if let Some(dir) = &out {
                    write_text(&dir.join("report.csv"), &report.to_csv())?;
                }
                return Ok(());
            }
            let manifest = manifest.ok_or_else(|| Error::Argument("evaluate needs --manifest or --records".into()))?;
            if ckpts.is_empty() {
                return Err(Error::Argument("evaluate needs at least one --checkpoint".into()));
            }
            let m = DatasetManifest::load(&manifest)?;
            let data = pipeline::load_labeled(&m, &config.sigma)?;
            let mut named = Vec::new();
            for c in &ckpts {
                let (net, meta) = checkpoint::load(c)?;
                let label = meta.get("role").cloned().unwrap_or_else(|| {
                    c.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                });
                let label = if named.iter().any(|n: &NamedReport| n.name == label) {
                    c.display().to_string()
                } else {
                    label
                };
                let mut recs = Vec::with_capacity(data.len());
                for l in &data {
                    recs.push(CountRecord {
                        ear_id: l.id.clone(),
                        ground_truth: l.count,
                        predicted: pipeline::raw_count(&net, &l.sample.image)?,
                        mode: EstimateMode::Frontside,
                    });
                }
                let report = compute_metrics(&recs)?;
                println!("== {label}");
                print!("{}", report.to_text());
                if let Some(dir) = &out {
                    write_text(&dir.join(format!("records_{label}.csv")), &evaluate::records_to_csv(&recs))?;
                    write_text(&dir.join(format!("report_{label}.csv")), &report.to_csv())?;
                }
                named.push(NamedReport { name: label, report, param_count: Some(net.param_count()) });
            }
            let table = compare_models(named);
            println!("== comparison");
            print!("{}", table.to_text());
            if let Some(dir) = &out {
                write_text(&dir.join("comparison.csv"), &table.to_csv())?;
            }
        }
        Command::Yield { stand, kernels, kernels_per_bushel } => {
            let y = agronomy::estimate_yield(&agronomy::YieldInput {
                stand_count: stand,
                avg_kernels_per_ear: kernels,
                kernels_per_bushel,
            })?;
            println!("{y:.2}");
        }
        Command::PlotHistory { history, out, width, height } => {
            let text = fs::read_to_string(&history).map_err(|e| Error::Io { path: history.clone(), source: e })?;
            let h = TrainingHistory::from_csv(&text)?;
            plot::save_loss_plot(&h, &out, width, height)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Layer the user's config text and overrides on top of `base`.
fn merge(base: &RunConfig, text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut all: Vec<String> = flatten(&toml::Value::try_from(base).expect("config serializes"), "");
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {}", e.message())))?;
    all.extend(flatten(&toml::Value::Table(user), ""));
    all.extend(overrides.iter().cloned());
    RunConfig::from_toml_with_overrides("", &all)
}

/// `key.path=value` lines for every leaf of a TOML tree.
fn flatten(v: &toml::Value, prefix: &str) -> Vec<String> {
    match v {
        toml::Value::Table(t) => t
            .iter()
            .flat_map(|(k, v)| {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key)
            })
            .collect(),
        leaf => vec![format!("{prefix}={leaf}")],
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {}", cat.as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
