mod datasets;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bimm::checkpoint::{load_checkpoint, save_checkpoint};
use bimm::data::{gen_synthetic_motion_dataset, load_frames_dir, read_image, write_image, ImageDataset};
use bimm::experiment::{
    ablation_csv, ablation_markdown, gradcheck_joint, random_dorsal, reconstruct_images, run_ablation,
    run_finetune, run_pretrain_joint, run_pretrain_ventral, AblationAxis, ExperimentConfig,
    GradcheckConfig,
};
use bimm::model::init_encoder;
use bimm::numerics::ParamStore;
use bimm::targets::BranchInput;
use bimm::training::TargetBuilder;
use bimm::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use datasets::{read_motion, read_shapes, write_dataset, DataKind};

#[derive(Parser, Debug)]
#[command(name = "bimm", version, about = "Dual-branch masked image and video pretraining")]
struct Cli {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration used when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Derives every stage seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked image pretraining of the ventral branch.
    PretrainVentral {
        /// A synthetic_shapes tree from gen-data instead of generated images.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Joint pretraining of both branches from ventral weights.
    PretrainJoint {
        /// Ventral checkpoint; fresh weights when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// A synthetic_motion tree from gen-data instead of generated clips.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// End-to-end motion classification with the dorsal encoder.
    Finetune(FinetuneArgs),
    /// Linear probe on frozen dorsal features.
    Probe(FinetuneArgs),
    /// Prediction targets of one input.
    Targets {
        #[command(subcommand)]
        action: TargetsAction,
    },
    /// Original / masked / reconstructed image grid from the deepest ventral decoder.
    Reconstruct {
        #[arg(long)]
        init: PathBuf,
        /// Number of synthetic shape images.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Writes a synthetic dataset as image files plus labels.json.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        n: usize,
    },
    /// Compares joint-loss gradients with finite differences on a toy model.
    Gradcheck,
    /// Sweeps one configuration axis and tabulates the results.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(clap::Args, Debug)]
struct FinetuneArgs {
    /// Joint checkpoint; a random-init dorsal encoder when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train and test synthetic_motion trees.
    #[arg(long, requires = "test_data")]
    train_data: Option<PathBuf>,
    #[arg(long, requires = "train_data")]
    test_data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum TargetsAction {
    /// Writes targets.json with one matrix per tap.
    Dump {
        /// An image file (ventral targets).
        #[arg(long, conflicts_with = "clip")]
        image: Option<PathBuf>,
        /// A directory of frames (dorsal targets).
        #[arg(long)]
        clip: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => 3,
        Some(Error::Config(_)) | Some(Error::Contract(_)) | Some(Error::Shape(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => match cli.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Toy => ExperimentConfig::toy(),
        },
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Data(format!("creating {}: {e}", out.display())).into())
}

struct Metrics(BufWriter<File>);

impl Metrics {
    fn create(out: &Path) -> Result<Self> {
        let path = out.join("metrics.jsonl");
        let f = File::create(&path).map_err(|e| Error::Data(format!("creating {}: {e}", path.display())))?;
        Ok(Metrics(BufWriter::new(f)))
    }

    fn write(&mut self, rec: &impl serde::Serialize) -> bimm::Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        writeln!(self.0)
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::Data(format!("metrics: {e}")))
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::Data(format!("metrics: {e}")))?;
        Ok(())
    }
}

/// Checks that `store` carries every parameter of `reference` with the same shape.
fn check_compatible(store: &ParamStore<f32>, reference: &ParamStore<f32>, what: &Path) -> Result<()> {
    for (name, p) in reference.iter() {
        let have = store
            .value(name)
            .map_err(|_| Error::Data(format!("{}: missing parameter {name}", what.display())))?;
        if have.shape() != p.value.shape() {
            return Err(Error::Data(format!(
                "{}: {name} has shape {:?}, configuration expects {:?}",
                what.display(),
                have.shape(),
                p.value.shape()
            ))
            .into());
        }
    }
    Ok(())
}

fn load_init(path: &Path, reference: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let (store, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    check_compatible(&store, reference, path)?;
    Ok(store)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::PretrainVentral { data } => {
            let images = match data {
                Some(d) => read_shapes(d)?.images,
                None => cfg.shapes_dataset()?.images,
            };
            create_out(out)?;
            let mut m = Metrics::create(out)?;
            let (store, reports) = run_pretrain_ventral(&cfg, &images, |r| m.write(r))?;
            m.finish()?;
            save_checkpoint(&out.join("ventral.ckpt"), &store, &cfg.to_json_value())?;
            if let Some(r) = reports.last() {
                println!("step {} L_V {:.6}", r.step, r.l_v);
            }
        }
        Command::PretrainJoint { init, data } => {
            let ventral = cfg.ventral_branch()?;
            let fresh = init_encoder(&ventral, cfg.ventral.seed)?;
            let mut store = match init {
                Some(p) => {
                    let mut s = load_init(p, &fresh)?;
                    // drop anything but the ventral encoder and its decoders
                    let keep: Vec<String> = fresh.names().map(String::from).collect();
                    let extra: Vec<String> = s.names().filter(|n| !keep.iter().any(|k| k == n)).map(String::from).collect();
                    for n in extra {
                        s.remove(&n);
                    }
                    s
                }
                None => fresh,
            };
            let clips = match data {
                Some(d) => read_motion(d, &cfg.motion, cfg.data.seed)?.clips,
                None => cfg.motion_dataset()?.clips,
            };
            create_out(out)?;
            let mut m = Metrics::create(out)?;
            let (_, reports) = run_pretrain_joint(&cfg, &mut store, &clips, |r| m.write(r))?;
            m.finish()?;
            save_checkpoint(&out.join("joint.ckpt"), &store, &cfg.to_json_value())?;
            if let Some(r) = reports.last() {
                println!("step {} L {:.6} L_V {:.6} L_D {:.6}", r.step, r.l, r.l_v, r.l_d);
            }
        }
        Command::Finetune(args) | Command::Probe(args) => {
            let mut ft = cfg.finetune.clone();
            ft.probe = matches!(cli.command, Command::Probe(_));
            let (reference, dorsal) = random_dorsal(&cfg, cfg.finetune.seed)?;
            let mut store = match &args.init {
                Some(p) => load_init(p, &reference)?,
                None => reference,
            };
            let (train, test) = match (&args.train_data, &args.test_data) {
                (Some(a), Some(b)) => (
                    read_motion(a, &cfg.motion, cfg.data.seed)?,
                    read_motion(b, &cfg.motion, cfg.data.seed)?,
                ),
                _ => cfg.finetune_datasets()?,
            };
            create_out(out)?;
            let mut m = Metrics::create(out)?;
            let report = run_finetune(&ft, &mut store, &dorsal, &train, &test, |r| m.write(r))?;
            m.finish()?;
            let name = if ft.probe { "probe" } else { "finetune" };
            save_checkpoint(&out.join(format!("{name}.ckpt")), &store, &cfg.to_json_value())?;
            let result = json!({ "mode": name, "test_acc": report.test_acc, "test_size": test.labels.len() });
            fs::write(out.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")
                .map_err(|e| Error::Data(format!("writing result.json: {e}")))?;
            println!("{name} test accuracy {:.4}", report.test_acc);
        }
        Command::Targets {
            action: TargetsAction::Dump { image, clip },
        } => dump_targets(&cfg, image.as_deref(), clip.as_deref(), out)?,
        Command::Reconstruct { init, n, ratio } => {
            let branch = cfg.ventral_branch()?;
            let store = load_init(init, &init_encoder(&branch, 0)?)?;
            let ImageDataset { images, .. } = cfg.shapes_dataset()?;
            let images: Vec<_> = images.into_iter().take(*n).collect();
            let ratio = ratio.unwrap_or(cfg.ventral.mask.ratio_image);
            let grid = reconstruct_images(
                &store,
                &branch,
                &images,
                ratio,
                cfg.targets.normalize_rgb,
                cfg.ventral.seed,
            )?;
            create_out(out)?;
            write_image(&out.join("reconstruction.png"), &grid)?;
            println!("wrote {}", out.join("reconstruction.png").display());
        }
        Command::GenData { kind, n } => {
            let seed = cli.seed.unwrap_or(cfg.data.seed);
            write_dataset(out, *kind, *n, seed, &cfg.image, &cfg.motion)?;
            println!("wrote {n} items to {}", out.display());
        }
        Command::Gradcheck => {
            let mut gc = match &cli.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?;
                    serde_json::from_str::<GradcheckConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(s) = cli.seed {
                gc.seed = s;
            }
            let r = gradcheck_joint(&gc)?;
            println!(
                "{} coordinates, max relative error {:.3e} ({})",
                r.coords, r.max_rel_err, r.worst
            );
            create_out(out)?;
            fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&r)? + "\n")
                .map_err(|e| Error::Data(format!("writing gradcheck.json: {e}")))?;
            if !r.pass {
                eprintln!("gradcheck failed: tolerance {:e}", gc.tolerance);
                return Ok(3);
            }
        }
        Command::Ablate { axis, values } => {
            let axis: AblationAxis = axis.parse()?;
            create_out(out)?;
            let mut m = Metrics::create(out)?;
            let rows = run_ablation(&cfg, axis, values, |r| {
                eprintln!("{} = {}: L {:.4}, test acc {:.3}", r.axis, r.value, r.l, r.test_acc);
                m.write(r)
            })?;
            m.finish()?;
            let csv = out.join(format!("ablation_{axis}.csv"));
            let md = out.join(format!("ablation_{axis}.md"));
            fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::Data(format!("writing {}: {e}", csv.display())))?;
            let table = ablation_markdown(&rows);
            fs::write(&md, &table).map_err(|e| Error::Data(format!("writing {}: {e}", md.display())))?;
            print!("{table}");
        }
    }
    Ok(0)
}

fn dump_targets(cfg: &ExperimentConfig, image: Option<&Path>, clip: Option<&Path>, out: &Path) -> Result<()> {
    let bank = cfg.gabor_bank()?;
    let tb = TargetBuilder {
        cfg: &cfg.targets,
        bank: &bank,
    };
    let (branch, set) = match (image, clip) {
        (Some(p), _) => {
            let img = read_image(p)?;
            let mut c = cfg.clone();
            c.image.height = img.height;
            c.image.width = img.width;
            let b = c.ventral_branch()?;
            let set = tb.prepare(&b, BranchInput::Image(&img))?.targets;
            (b, set)
        }
        (None, Some(dir)) => {
            // the loader reads clip directories below a root; pick this one out
            let parent = dir.parent().unwrap_or(Path::new("."));
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let c = load_frames_dir(parent, &cfg.motion.clip, cfg.data.seed)?
                .into_iter()
                .find(|c| c.name == name)
                .ok_or_else(|| Error::Data(format!("clip {} not found", dir.display())))?;
            let b = cfg.dorsal_branch()?;
            let set = tb.prepare(&b, BranchInput::Clip(&c.clip))?.targets;
            (b, set)
        }
        (None, None) => {
            let ds = gen_synthetic_motion_dataset(&cfg.motion, 1, cfg.data.seed)?;
            let b = cfg.dorsal_branch()?;
            let set = tb.prepare(&b, BranchInput::Clip(&ds.clips[0]))?.targets;
            (b, set)
        }
    };
    let taps: Vec<_> = set
        .kinds
        .iter()
        .zip(&set.maps)
        .enumerate()
        .map(|(i, (k, m))| {
            json!({
                "tap": i + 1,
                "block": branch.cfg.separation[i],
                "kind": k.name(),
                "shape": m.shape(),
                "data": m.data(),
            })
        })
        .collect();
    create_out(out)?;
    let doc = json!({ "branch": branch.kind.name(), "taps": taps });
    let path = out.join("targets.json");
    fs::write(&path, serde_json::to_string(&doc)? + "\n").map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    for t in doc["taps"].as_array().into_iter().flatten() {
        println!("tap {} (block {}): {} {}", t["tap"], t["block"], t["kind"], t["shape"]);
    }
    Ok(())
}
