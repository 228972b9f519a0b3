use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hepaseg::boundary::{refine, MbrStrategy, StructuringElement};
use hepaseg::metrics::{render_table, DiceReport};
use hepaseg::pipeline::checkpoint::{check_compatible, load_checkpoint};
use hepaseg::pipeline::image_io::{write_binary_pgm, write_label_pgm, write_overlay_png, write_slice_pgm};
use hepaseg::pipeline::infer::{evaluate_cases, infer_volume};
use hepaseg::pipeline::selftest::{self_test_report, SelfTestOptions};
use hepaseg::pipeline::split::{split_cases, DatasetSplit};
use hepaseg::pipeline::synth::{synth_dataset, SynthParams};
use hepaseg::pipeline::train::{prepare_case, train, Sample, TrainOptions};
use hepaseg::pipeline::volume_io::{list_volumes, load_volume, save_mask_stack, save_volume, VolumeCase};
use hepaseg::pipeline::{image_io::read_pgm, train::EpochRecord};
use hepaseg::preprocess::{reform_slice_stages, slice_volume};
use hepaseg::{LabelMask, ModelConfig, ParamStore, ProbMap};

const CHECKPOINT_FILE: &str = "checkpoint.hsck";
const LOG_FILE: &str = "train_log.tsv";

#[derive(Parser)]
#[command(name = "hepaseg", version, about = "Liver and tumor segmentation of abdominal CT slices")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON model configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Modules to switch off, comma separated.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    ablate: Vec<Module>,
    /// Boundary refinement strategy.
    #[arg(long, global = true)]
    mbr: Option<MbrStrategy>,
    /// Root for default input and output locations.
    #[arg(long, global = true, env = "HEPASEG_DATA", default_value = ".")]
    data_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Scaled,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Module {
    Ccr,
    Dca,
    Msas,
    Mbr,
}

#[derive(Subcommand)]
enum Command {
    /// Write the prepared slices of a volume as PGM images.
    Preprocess {
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the windowed, resized and equalized images.
        #[arg(long)]
        debug: bool,
    },
    /// Generate a synthetic labelled dataset.
    Synth {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        /// Defaults to `<data root>/volumes`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the cases of a volume directory into train, val and test.
    Split {
        #[arg(long)]
        volumes: Option<PathBuf>,
        /// Defaults to `<data root>/split.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        fractions: Vec<f64>,
    },
    /// Train on the train subset, validating on val each epoch.
    Train {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        volumes: Option<PathBuf>,
        /// Directory for the checkpoint and epoch log; defaults to `<data root>/run`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment a volume with a trained checkpoint.
    Infer {
        volume: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write color overlays as PNG.
        #[arg(long)]
        overlays: bool,
        /// Write per-slice class probabilities for later refinement.
        #[arg(long)]
        save_probs: bool,
    },
    /// Score a checkpoint on one subset of a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        volumes: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        subset: String,
        /// Report whose scores fill the drop columns.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Defaults to `<data root>/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Boundary extraction and refinement of a label PGM.
    Refine {
        mask: PathBuf,
        /// Little-endian f32 probabilities, height x width x 3, from `infer --save-probs`.
        #[arg(long)]
        probs: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        tau: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    SelfTest {
        #[arg(long, hide = true)]
        corrupt_conv_gradient: bool,
    },
}

impl Common {
    fn root(&self, rel: &str) -> PathBuf {
        self.data_root.join(rel)
    }

    fn architecture_overridden(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || self.ablate.iter().any(|&m| m != Module::Mbr)
    }

    fn apply_runtime(&self, cfg: &mut ModelConfig) {
        if let Some(m) = self.mbr {
            cfg.mbr = m;
        }
        if self.ablate.contains(&Module::Mbr) {
            cfg.mbr = MbrStrategy::Off;
        }
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ModelConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(Preset::Scaled)) => ModelConfig::scaled(),
            (None, _) => ModelConfig::default(),
        };
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for m in &self.ablate {
            match m {
                Module::Ccr => cfg.modules.ccr = false,
                Module::Dca => cfg.modules.dca = false,
                Module::Msas => cfg.modules.msas = false,
                Module::Mbr => {}
            }
        }
        self.apply_runtime(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The checkpoint's parameters with a configuration that fits them.
    fn load_model(&self, checkpoint: Option<&Path>) -> Result<(ModelConfig, ParamStore<f32>)> {
        let path = checkpoint.map_or_else(|| self.root("run").join(CHECKPOINT_FILE), Path::to_path_buf);
        let (mut cfg, params) =
            load_checkpoint::<f32>(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if self.architecture_overridden() {
            let wanted = self.model_config()?;
            check_compatible(&wanted, &params)?;
            cfg = wanted;
        } else {
            self.apply_runtime(&mut cfg);
            cfg.validate()?;
        }
        Ok((cfg, params))
    }
}

fn load_cases(dir: &Path, ids: &[String]) -> Result<Vec<VolumeCase>> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.json"));
            load_volume(&path).with_context(|| format!("loading {}", path.display()))
        })
        .collect()
}

fn samples(cfg: &ModelConfig, cases: &[VolumeCase]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for case in cases {
        let masks = case.masks.as_ref().with_context(|| format!("case `{}` has no mask", case.volume.id))?;
        out.extend(prepare_case(cfg, &case.volume, masks)?);
    }
    Ok(out)
}

fn write_probs(path: &Path, probs: &ProbMap) -> Result<()> {
    let bytes: Vec<u8> = probs.probs().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_probs(path: &Path, height: usize, width: usize) -> Result<ProbMap> {
    let bytes = fs::read(path)?;
    ensure!(bytes.len() == height * width * 3 * 4, "{} does not hold {height}x{width}x3 floats", path.display());
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(ProbMap::new(height, width, 3, values)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    match cli.command {
        Command::Preprocess { volume, out, debug } => {
            let cfg = common.model_config()?;
            let case = load_volume(&volume)?;
            fs::create_dir_all(&out)?;
            let slices = slice_volume(&case.volume)?;
            for (k, raw) in slices.iter().enumerate() {
                let stages = reform_slice_stages(raw, &cfg.reformation)?;
                write_slice_pgm(&out.join(format!("slice_{k:03}.pgm")), &stages.normalized)?;
                if debug {
                    write_slice_pgm(&out.join(format!("slice_{k:03}_windowed.pgm")), &stages.windowed)?;
                    write_slice_pgm(&out.join(format!("slice_{k:03}_resized.pgm")), &stages.resized)?;
                    write_slice_pgm(&out.join(format!("slice_{k:03}_equalized.pgm")), &stages.equalized)?;
                }
            }
            println!("wrote {} slices to {}", slices.len(), out.display());
        }
        Command::Synth { cases, size, depth, out } => {
            ensure!(cases >= 1, "--cases must be at least 1");
            let seed = common.seed.unwrap_or(0);
            let out = out.unwrap_or_else(|| common.root("volumes"));
            fs::create_dir_all(&out)?;
            let params = SynthParams { size, depth, ..SynthParams::default() };
            for case in synth_dataset(seed, cases, &params)? {
                let path = out.join(format!("{}.json", case.volume.id));
                save_volume(&path, &case.volume, Some(&case.masks))?;
            }
            println!("wrote {cases} cases to {}", out.display());
        }
        Command::Split { volumes, out, fractions } => {
            let dir = volumes.unwrap_or_else(|| common.root("volumes"));
            let ids: Vec<String> = list_volumes(&dir)?
                .iter()
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            ensure!(!ids.is_empty(), "no volumes in {}", dir.display());
            let split = split_cases(&ids, (fractions[0], fractions[1], fractions[2]), common.seed.unwrap_or(0))?;
            let out = out.unwrap_or_else(|| common.root("split.json"));
            split.save(&out)?;
            println!(
                "train {} / val {} / test {} written to {}",
                split.train.len(),
                split.val.len(),
                split.test.len(),
                out.display()
            );
        }
        Command::Train { split, volumes, out, epochs } => {
            let cfg = common.model_config()?;
            let split = DatasetSplit::load(&split.unwrap_or_else(|| common.root("split.json")))?;
            let dir = volumes.unwrap_or_else(|| common.root("volumes"));
            let train_set = samples(&cfg, &load_cases(&dir, &split.train)?)?;
            let val_set = samples(&cfg, &load_cases(&dir, &split.val)?)?;
            let out = out.unwrap_or_else(|| common.root("run"));
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let outcome = train(
                &cfg,
                &train_set,
                &val_set,
                TrainOptions {
                    epochs,
                    log_path: Some(out.join(LOG_FILE)),
                    checkpoint_path: Some(out.join(CHECKPOINT_FILE)),
                    ..TrainOptions::default()
                },
            )?;
            println!("{}", EpochRecord::TSV_HEADER);
            for r in &outcome.history {
                println!("{}", r.tsv());
            }
            println!("best validation dice {:.4}; checkpoint in {}", outcome.best_val_dsc, out.display());
        }
        Command::Infer { volume, checkpoint, out, overlays, save_probs } => {
            let (cfg, params) = common.load_model(checkpoint.as_deref())?;
            let case = load_volume(&volume)?;
            fs::create_dir_all(&out)?;
            let preds = infer_volume(&cfg, &params, &case.volume)?;
            let labels: Vec<LabelMask> = preds.iter().map(|p| p.labels.clone()).collect();
            save_mask_stack(&out.join(format!("{}.mask", case.volume.id)), &labels)?;
            for (k, p) in preds.iter().enumerate() {
                write_label_pgm(&out.join(format!("slice_{k:03}_labels.pgm")), &p.labels)?;
                if let Some(b) = &p.boundary {
                    write_binary_pgm(&out.join(format!("slice_{k:03}_boundary.pgm")), &b.boundary)?;
                }
                if overlays {
                    write_overlay_png(&out.join(format!("slice_{k:03}_overlay.png")), &p.image, &p.labels)?;
                }
                if save_probs {
                    write_probs(&out.join(format!("slice_{k:03}.probs")), &p.probs)?;
                }
            }
            println!("segmented {} slices into {}", preds.len(), out.display());
        }
        Command::Eval { checkpoint, split, volumes, subset, reference, out } => {
            let (cfg, params) = common.load_model(checkpoint.as_deref())?;
            let split = DatasetSplit::load(&split.unwrap_or_else(|| common.root("split.json")))?;
            let ids = split.subset(&subset)?;
            ensure!(!ids.is_empty(), "subset `{subset}` is empty");
            let cases = load_cases(&volumes.unwrap_or_else(|| common.root("volumes")), ids)?;
            let reference = match reference {
                Some(p) => Some(DiceReport::from_json(&fs::read_to_string(&p)?)?),
                None => None,
            };
            let report = evaluate_cases(&cfg, &params, &cases, reference.as_ref())?;
            let out = out.unwrap_or_else(|| common.root("report.json"));
            fs::write(&out, report.to_json()? + "\n")?;
            print!("{}", render_table(&[(subset, report)]));
        }
        Command::Refine { mask, probs, tau, out } => {
            let (w, h, _, pixels) = read_pgm(&mask)?;
            let labels = LabelMask::new(h, w, pixels)?;
            let strategy = common.mbr.unwrap_or(MbrStrategy::EmitOnly);
            if strategy == MbrStrategy::Off {
                bail!("refine with --mbr off has nothing to do");
            }
            let probs = match (probs, strategy) {
                (Some(p), _) => read_probs(&p, h, w)?,
                (None, MbrStrategy::ProbGated) => bail!("--mbr prob-gated needs --probs"),
                (None, _) => ProbMap::one_hot(&labels),
            };
            let art = refine(&labels, &probs, strategy, tau, StructuringElement::default())?;
            fs::create_dir_all(&out)?;
            write_label_pgm(&out.join("refined.pgm"), &art.refined)?;
            write_label_pgm(&out.join("eroded.pgm"), &art.eroded)?;
            write_binary_pgm(&out.join("boundary.pgm"), &art.boundary)?;
            let changed = labels.labels().iter().zip(art.refined.labels()).filter(|(a, b)| a != b).count();
            println!("{} boundary pixels, {changed} relabelled", art.boundary.count());
        }
        Command::SelfTest { corrupt_conv_gradient } => {
            let (passed, text) = self_test_report(SelfTestOptions { corrupt_conv_gradient });
            print!("{text}");
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
