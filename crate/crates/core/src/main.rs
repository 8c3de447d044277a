use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use xmoda::config::{load_pipeline_config, load_toml_with, parse_override, PipelineConfig};
use xmoda::ensemble::fuse_union;
use xmoda::metrics::evaluate_cohort;
use xmoda::phantom::{generate_cohort, PhantomConfig};
use xmoda::pipeline::{
    finish_segmentation, image_path, labels_path, list_ids, load_cohort, load_prepared, prepare, provenance_path, run_pipeline, save_prepared,
    train_model,
};
use xmoda::preprocess::ProvenanceRecord;
use xmoda::record::{hash_inputs, RunRecord};
use xmoda::segnets::SegNet;
use xmoda::synthesis::{collect_slices, resume_translator, train_translator, translate_volume, Generator, SynthesisConfig};
use xmoda::volume::{load_labels, load_volume, save_labels, save_volume};

#[derive(Parser)]
#[command(name = "xmoda", version, about = "Cross-modality VS and cochlea segmentation pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file path for `evaluate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.max_epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    A2b,
    B2a,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise, register, bias-correct, crop and normalize the cohort.
    Preprocess,
    /// Train the slice translator on a preprocessed cohort.
    SynthTrain {
        /// Output of `preprocess`.
        #[arg(long)]
        input: PathBuf,
        /// Continue from a saved translator state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every `<id>_image.nii.gz` in a directory.
    SynthApply {
        #[arg(long, value_enum)]
        generator: Direction,
        /// Directory written by `synth-train`, or a generator checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        axis: Option<usize>,
    },
    /// Train the ensemble members on `<id>_image` / `<id>_labels` pairs.
    SegTrain {
        #[arg(long)]
        input: PathBuf,
        /// Train only this member.
        #[arg(long)]
        model: Option<String>,
    },
    /// Segment preprocessed images with every trained member.
    Infer {
        /// Directory with `<name>/best.ckpt` per member.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Union-fuse ROI segmentations, keep the largest VS component and map
    /// back to native grids.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Directory with `<id>_provenance.json` files.
        #[arg(long)]
        provenance: PathBuf,
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Dice and ASSD of `<id>.nii.gz` predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        /// Holds `<id>.nii.gz` or `<id>_labels.nii.gz`.
        #[arg(long)]
        truth_dir: PathBuf,
    },
    /// Write a synthetic two-modality cohort.
    Phantom {
        #[arg(long)]
        n: usize,
    },
    /// Run everything end to end.
    Pipeline,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn overrides(cli: &Cli) -> anyhow::Result<Vec<(String, String)>> {
    let mut o = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = cli.seed {
        o.push(("train.seed".into(), s.to_string()));
    }
    Ok(o)
}

fn pipeline_config(cli: &Cli) -> anyhow::Result<(PipelineConfig, serde_json::Value)> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config is required for this subcommand"))?;
    let (cfg, value) = load_pipeline_config(path, &overrides(cli)?)?;
    Ok((cfg, serde_json::to_value(value)?))
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    cli.out.clone().ok_or_else(|| anyhow!("--out is required for this subcommand"))
}

fn finish(mut rec: RunRecord, inputs: &[PathBuf], dir: &Path, started: Instant) -> anyhow::Result<()> {
    rec.inputs = hash_inputs(inputs)?;
    rec.elapsed_seconds = started.elapsed().as_secs_f64();
    let p = rec.write(dir)?;
    log::info!("run record {}", p.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    match &cli.command {
        Command::Pipeline => {
            let (cfg, value) = pipeline_config(&cli)?;
            let out = match &cli.out {
                Some(o) => o.clone(),
                None => {
                    let stem = cli.config.as_ref().and_then(|p| p.file_stem()).and_then(|s| s.to_str()).unwrap_or("run");
                    PathBuf::from("runs").join(stem)
                }
            };
            let result = run_pipeline(&cfg, &out)?;
            if let Some(r) = &result.ensemble_report {
                for s in &r.summary {
                    log::info!("ensemble {}: Dice {:.4} ± {:.4}", s.class, s.dice_mean, s.dice_std);
                }
            }
            let mut rec = RunRecord::new("pipeline", value, &out);
            rec.seeds.insert("train.seed".into(), cfg.train.seed);
            if let Some(p) = &cfg.phantom {
                rec.seeds.insert("phantom.config.seed".into(), p.config.seed);
            }
            let mut inputs = vec![cli.config.clone().unwrap()];
            inputs.extend(cfg.data.cohort.clone());
            inputs.extend(cfg.data.test_cohort.clone());
            inputs.extend(cfg.data.template.clone());
            for l in [&cfg.data.source_images, &cfg.data.source_labels, &cfg.data.target_images, &cfg.data.target_labels] {
                inputs.extend(l.iter().cloned());
            }
            finish(rec, &inputs, &out, started)
        }
        Command::Preprocess => {
            let (cfg, value) = pipeline_config(&cli)?;
            let out = out_dir(&cli)?;
            xmoda::pipeline::ensure_phantom(&cfg)?;
            let cohort = load_cohort(&cfg)?;
            let prep = prepare(&cohort, &cfg)?;
            save_prepared(&prep.source, &out.join("source"), None)?;
            save_prepared(&prep.target, &out.join("target"), None)?;
            save_prepared(&prep.evaluation, &out.join("test"), Some(&out.join("truth")))?;
            fs::write(out.join("roi.json"), serde_json::to_string_pretty(&prep.roi)?)?;
            let mut rec = RunRecord::new("preprocess", value, &out);
            rec.seeds.insert("train.seed".into(), cfg.train.seed);
            let mut inputs = vec![cli.config.clone().unwrap()];
            inputs.extend(cfg.data.cohort.clone());
            inputs.extend(cfg.data.test_cohort.clone());
            finish(rec, &inputs, &out, started)
        }
        Command::SynthTrain { input, resume } => {
            let (cfg, value) = pipeline_config(&cli)?;
            let out = out_dir(&cli)?;
            let syn = &cfg.synthesis;
            let vols = |sub: &str| -> anyhow::Result<Vec<_>> {
                Ok(load_prepared(&input.join(sub))?.into_iter().map(|s| s.pre.volume).collect())
            };
            let a = collect_slices(&vols("source")?, syn.axis)?;
            let b = collect_slices(&vols("target")?, syn.axis)?;
            let run = match resume {
                Some(state) => resume_translator(state, &a, &b, syn, &cfg.train, Some(&out))?,
                None => train_translator(&a, &b, syn, &cfg.train, Some(&out))?,
            };
            log::info!("selected translator epoch {}", run.selected_epoch);
            let mut rec = RunRecord::new("synth-train", value, &out);
            rec.seeds.insert("train.seed".into(), cfg.train.seed);
            let mut inputs = vec![cli.config.clone().unwrap(), input.join("source"), input.join("target")];
            inputs.extend(resume.clone());
            finish(rec, &inputs, &out, started)
        }
        Command::SynthApply {
            generator,
            checkpoint,
            input,
            axis,
        } => {
            let out = out_dir(&cli)?;
            let cfg_axis = match &cli.config {
                Some(_) => pipeline_config(&cli)?.0.synthesis.axis,
                None => SynthesisConfig::default().axis,
            };
            let axis = axis.unwrap_or(cfg_axis);
            let file = match generator {
                Direction::A2b => "g_a2b.ckpt",
                Direction::B2a => "g_b2a.ckpt",
            };
            let ckpt = if checkpoint.is_dir() { checkpoint.join(file) } else { checkpoint.clone() };
            let g = Generator::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            fs::create_dir_all(&out)?;
            let ids = list_ids(input, "_image.nii.gz")?;
            if ids.is_empty() {
                bail!("no *_image.nii.gz files in {}", input.display());
            }
            for id in &ids {
                let v = load_volume(image_path(input, id))?;
                save_volume(&translate_volume(&v, &g, axis)?, image_path(&out, id))?;
                for p in [labels_path(input, id), provenance_path(input, id)] {
                    if p.exists() {
                        fs::copy(&p, out.join(p.file_name().unwrap()))?;
                    }
                }
                log::info!("translated {id}");
            }
            let mut rec = RunRecord::new("synth-apply", serde_json::json!({ "axis": axis, "generator": file }), &out);
            rec.seeds.insert("none".into(), 0);
            finish(rec, &[ckpt, input.clone()], &out, started)
        }
        Command::SegTrain { input, model } => {
            let (cfg, value) = pipeline_config(&cli)?;
            let out = out_dir(&cli)?;
            let subjects = load_prepared(input)?;
            let pairs = subjects
                .into_iter()
                .map(|s| {
                    let id = s.id.clone();
                    Ok((s.pre.volume, s.pre.labels.ok_or_else(|| anyhow!("{id} has no labels in {}", input.display()))?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut trained = 0;
            for (i, spec) in cfg.models.iter().enumerate() {
                if model.as_ref().is_some_and(|m| *m != spec.name) {
                    continue;
                }
                let m = train_model(i, spec, &pairs, &cfg, Some(&out.join(&spec.name)))?;
                log::info!("{}: best epoch {}", spec.name, m.run.best_epoch);
                trained += 1;
            }
            if trained == 0 {
                bail!("no model named {:?} in the configuration", model.as_deref().unwrap_or(""));
            }
            let mut rec = RunRecord::new("seg-train", value, &out);
            rec.seeds.insert("train.seed".into(), cfg.train.seed);
            finish(rec, &[cli.config.clone().unwrap(), input.clone()], &out, started)
        }
        Command::Infer { models, input } => {
            let out = out_dir(&cli)?;
            let mut nets = Vec::new();
            let mut ckpts = Vec::new();
            let mut names: Vec<_> = fs::read_dir(models)
                .with_context(|| format!("reading {}", models.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.join("best.ckpt").exists())
                .collect();
            names.sort();
            for dir in names {
                let name = dir.file_name().unwrap().to_string_lossy().to_string();
                nets.push((name, SegNet::load(&dir.join("best.ckpt"))?));
                ckpts.push(dir.join("best.ckpt"));
            }
            if nets.is_empty() {
                bail!("no <name>/best.ckpt under {}", models.display());
            }
            let subjects = load_prepared(input)?;
            for (name, net) in &nets {
                let d = out.join(name);
                fs::create_dir_all(&d)?;
                for s in &subjects {
                    save_labels(&net.predict_labels(&s.pre.volume)?, d.join(format!("{}.nii.gz", s.id)))?;
                }
                log::info!("{name}: {} subjects segmented", subjects.len());
            }
            let rec = RunRecord::new("infer", serde_json::json!({ "models": nets.iter().map(|n| &n.0).collect::<Vec<_>>() }), &out);
            ckpts.push(input.clone());
            finish(rec, &ckpts, &out, started)
        }
        Command::Ensemble {
            inputs,
            provenance,
            no_postprocess,
        } => {
            let out = out_dir(&cli)?;
            fs::create_dir_all(&out)?;
            let mut ids = list_ids(&inputs[0], ".nii.gz")?;
            for d in &inputs[1..] {
                let other = list_ids(d, ".nii.gz")?;
                ids.retain(|i| other.contains(i));
            }
            if ids.is_empty() {
                bail!("no subject appears in every input directory");
            }
            for id in &ids {
                let segs = inputs
                    .iter()
                    .map(|d| load_labels(d.join(format!("{id}.nii.gz"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let p = ProvenanceRecord::load(&provenance_path(provenance, id))?;
                let fused = finish_segmentation(&fuse_union(&segs)?, &p, !no_postprocess)?;
                save_labels(&fused, out.join(format!("{id}.nii.gz")))?;
            }
            log::info!("{} subjects fused", ids.len());
            let rec = RunRecord::new("ensemble", serde_json::json!({ "postprocess": !no_postprocess }), &out);
            let mut all = inputs.clone();
            all.push(provenance.clone());
            finish(rec, &all, &out, started)
        }
        Command::Evaluate { pred_dir, truth_dir } => {
            let out = out_dir(&cli)?;
            let (report_path, dir) = if out.extension().is_some_and(|e| e == "csv") {
                (out.clone(), out.parent().map(Path::to_path_buf).unwrap_or_default())
            } else {
                (out.join("report.csv"), out.clone())
            };
            let ids = list_ids(pred_dir, ".nii.gz")?;
            let mut rows = Vec::new();
            for id in ids.iter().filter(|i| !i.ends_with("_labels")) {
                let truth = [truth_dir.join(format!("{id}.nii.gz")), labels_path(truth_dir, id)]
                    .into_iter()
                    .find(|p| p.exists())
                    .ok_or_else(|| anyhow!("no ground truth for {id} in {}", truth_dir.display()))?;
                rows.push((id.clone(), load_labels(pred_dir.join(format!("{id}.nii.gz")))?, load_labels(truth)?));
            }
            if rows.is_empty() {
                bail!("no predictions in {}", pred_dir.display());
            }
            let report = evaluate_cohort(&rows)?;
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(&dir)?;
            }
            report.write_csv(&report_path)?;
            for s in &report.summary {
                log::info!("{}: Dice {:.4} ± {:.4}", s.class, s.dice_mean, s.dice_std);
            }
            let rec = RunRecord::new("evaluate", serde_json::json!({ "report": report_path }), &dir);
            finish(rec, &[pred_dir.clone(), truth_dir.clone()], &dir, started)
        }
        Command::Phantom { n } => {
            let out = out_dir(&cli)?;
            let text = match &cli.config {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            let mut o: Vec<(String, String)> = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
            if let Some(s) = cli.seed {
                o.push(("seed".into(), s.to_string()));
            }
            let (cfg, value): (PhantomConfig, _) = load_toml_with(&text, &o)?;
            generate_cohort(&cfg, *n, &out)?;
            let mut rec = RunRecord::new("phantom", serde_json::to_value(value)?, &out);
            rec.seeds.insert("seed".into(), cfg.seed);
            finish(rec, &cli.config.iter().cloned().collect::<Vec<_>>(), &out, started)
        }
    }
}
