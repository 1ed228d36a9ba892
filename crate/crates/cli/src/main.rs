//! `mas` — train, inspect, and sample the scene-conditioned text-to-image
//! pipeline.
//!
//! Model state lives in run directories: `config.kv` plus checkpoints
//! (`vqseg.ckpt`, `vqimg.ckpt`, `sbt.ckpt`, `bpe.vocab`) and
//! `manifest.jsonl`. `mas pipeline` produces a complete run directory; the
//! per-module subcommands train or exercise one component at a time.
//! MAS_SEED overrides the config seed everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mas_core::harness::{
    eval_suite, load_artifacts, pipeline_train, read_manifest, synth_generate, write_manifest,
    EvalOptions, PipelineConfig,
};
use mas_core::io;
use mas_core::rng::derive;
use mas_core::sampler::{generate, Models, SampleConfig, SampleMode};
use mas_core::scene::{edit_scene, SceneEdit, SceneGroup};
use mas_core::sbt::CfMode;
use mas_core::textbpe::{bpe_encode, bpe_train, BpeVocab};
use mas_core::vq::TokenGrid;
use mas_core::vqseg::VqSegModel;
use mas_core::vqimg::VqImgModel;
use mas_core::rng::SeedRng;

#[derive(Parser)]
#[command(name = "mas", about = "scene-conditioned text-to-image token generation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train everything: corpus, tokenizers, transformer, CF fine-tune.
    Pipeline(PipelineArgs),
    /// Run the metric battery against a trained run directory.
    Eval(EvalArgs),
    /// Sample an image (and optionally a scene) from text.
    Generate(GenerateArgs),
    /// Render synthetic (image, scene, caption) triplets to disk.
    Synth(SynthArgs),
    /// Scene-map file utilities.
    Scene(SceneCmd),
    /// Text tokenizer.
    Bpe(BpeCmd),
    /// Scene tokenizer.
    Vqseg(VqCmd),
    /// Image tokenizer.
    Vqimg(VqCmd),
    /// Scene-based transformer.
    Sbt(SbtCmd),
}

#[derive(Args)]
struct PipelineArgs {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Guidance scales to sweep, comma separated.
    #[arg(long, default_value = "0,1,3,5", value_delimiter = ',')]
    alpha_c: Vec<f64>,
    #[arg(long)]
    generations: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    text: String,
    /// Scene map to condition on (fixed-scene mode).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    alpha_c: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    top_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SceneCmd {
    #[command(subcommand)]
    action: SceneAction,
}

#[derive(Subcommand)]
enum SceneAction {
    /// Read, validate, and rewrite a scene-map file.
    Copy { input: PathBuf, output: PathBuf },
    /// Apply class replacements and sketch pastes, then rewrite.
    Edit {
        input: PathBuf,
        output: PathBuf,
        /// group:from:to, e.g. panoptic:1:3
        #[arg(long = "replace")]
        replaces: Vec<String>,
        /// group:class:x,y,w,h, e.g. panoptic:2:4,4,6,6
        #[arg(long = "paste")]
        pastes: Vec<String>,
    },
}

#[derive(Args)]
struct BpeCmd {
    #[command(subcommand)]
    action: BpeAction,
}

#[derive(Subcommand)]
enum BpeAction {
    /// Learn merges from the configured synthetic caption corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode text to a fixed-length token line (JSON array).
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 16)]
        length: usize,
    },
}

#[derive(Args)]
struct VqCmd {
    #[command(subcommand)]
    action: VqAction,
}

#[derive(Subcommand)]
enum VqAction {
    /// Train this tokenizer alone on the configured corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// File -> token grid (JSON on stdout or --out).
    Encode {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token grid (JSON file) -> decoded file.
    Decode {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SbtCmd {
    #[command(subcommand)]
    action: SbtAction,
}

#[derive(Subcommand)]
enum SbtAction {
    /// Train the transformer over a run directory holding trained
    /// tokenizers (vqseg.ckpt, vqimg.ckpt, bpe.vocab).
    Train {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Continue training with classifier-free text dropout.
    FinetuneCf {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_kv_text(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => PipelineConfig::desk(),
    };
    if let Ok(seed) = std::env::var("MAS_SEED") {
        cfg.seed = seed.parse().context("MAS_SEED must be an integer")?;
    }
    Ok(cfg)
}

fn corpus_of(cfg: &PipelineConfig) -> Result<Vec<mas_core::harness::Sample>> {
    Ok(synth_generate(&cfg.synth_spec(), cfg.corpus_size, derive(cfg.seed, 0xc0a9))?)
}

fn parse_group(s: &str) -> Result<SceneGroup> {
    match s {
        "panoptic" => Ok(SceneGroup::Panoptic),
        "human" => Ok(SceneGroup::Human),
        "face" => Ok(SceneGroup::Face),
        _ => bail!("unknown group {s:?} (want panoptic|human|face)"),
    }
}

fn parse_edits(replaces: &[String], pastes: &[String]) -> Result<Vec<SceneEdit>> {
    let mut edits = Vec::new();
    for r in replaces {
        let parts: Vec<&str> = r.split(':').collect();
        if parts.len() != 3 {
            bail!("--replace wants group:from:to, got {r:?}");
        }
        edits.push(SceneEdit::ReplaceClass {
            group: parse_group(parts[0])?,
            from: parts[1].parse()?,
            to: parts[2].parse()?,
        });
    }
    for p in pastes {
        let parts: Vec<&str> = p.split(':').collect();
        if parts.len() != 3 {
            bail!("--paste wants group:class:x,y,w,h, got {p:?}");
        }
        let rect: Vec<usize> = parts[2]
            .split(',')
            .map(|v| v.parse().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
        if rect.len() != 4 {
            bail!("--paste rect wants x,y,w,h");
        }
        edits.push(SceneEdit::PasteSketch {
            group: parse_group(parts[0])?,
            class: parts[1].parse()?,
            x: rect[0],
            y: rect[1],
            w: rect[2],
            h: rect[3],
        });
    }
    Ok(edits)
}

fn read_token_grid(path: &Path) -> Result<TokenGrid> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pipeline(a) => {
            let cfg = load_config(&a.config)?;
            let art = pipeline_train(&cfg, Some(&a.out_dir))?;
            for stage in &art.manifest.stages {
                let line: Vec<String> = stage
                    .metrics
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect();
                println!("{}: {}", stage.name, line.join(" "));
            }
            println!("run written to {}", a.out_dir.display());
        }
        Command::Eval(a) => {
            let art = load_artifacts(&a.run_dir)?;
            let mut opts = EvalOptions::from_config(&art.config);
            opts.alpha_grid = a.alpha_c;
            if let Some(n) = a.generations {
                opts.generations = n;
            }
            let report = eval_suite(&art, &opts)?;
            print!("{}", report.render_table());
            // append the eval metrics to the run manifest
            let mut manifest = read_manifest(a.run_dir.join("manifest.jsonl"))?;
            manifest.stages.retain(|s| s.name != "eval");
            manifest.stages.push(report.to_stage());
            write_manifest(a.run_dir.join("manifest.jsonl"), &manifest)?;
        }
        Command::Generate(a) => {
            let art = load_artifacts(&a.run_dir)?;
            let scene = a.scene.as_deref().map(io::read_scene).transpose()?;
            let cfg = SampleConfig {
                alpha_c: a.alpha_c,
                seed: match std::env::var("MAS_SEED") {
                    Ok(s) => s.parse().context("MAS_SEED must be an integer")?,
                    Err(_) => a.seed,
                },
                mode: if scene.is_some() {
                    SampleMode::FixedScene
                } else {
                    SampleMode::FreeScene
                },
                top_fraction: a.top_fraction,
            };
            let models = Models {
                vocab: &art.vocab,
                vqseg: &art.vqseg,
                vqimg: &art.vqimg,
                sbt: &art.sbt,
            };
            let out = generate(&a.text, scene.as_ref(), &models, &cfg)?;
            std::fs::create_dir_all(&a.out_dir)?;
            io::write_scene(a.out_dir.join("scene.scnm"), &out.decoded_scene)?;
            io::write_image(a.out_dir.join("image.imgb"), &out.decoded_image)?;
            let manifest = serde_json::json!({
                "text": a.text,
                "alpha_c": cfg.alpha_c,
                "seed": cfg.seed,
                "mode": match cfg.mode { SampleMode::FreeScene => "free-scene", SampleMode::FixedScene => "fixed-scene" },
                "top_fraction": cfg.top_fraction,
                "text_tokens": out.text_tokens,
                "scene_tokens": out.scene_tokens,
                "image_tokens": out.image_tokens,
            });
            std::fs::write(a.out_dir.join("run.jsonl"), format!("{manifest}\n"))?;
            println!("wrote {}", a.out_dir.display());
        }
        Command::Synth(a) => {
            let mut cfg = load_config(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let spec = cfg.synth_spec();
            let samples = synth_generate(&spec, a.count, derive(cfg.seed, 0xc0a9))?;
            std::fs::create_dir_all(&a.out_dir)?;
            let mut captions = String::new();
            for (i, s) in samples.iter().enumerate() {
                io::write_scene(a.out_dir.join(format!("sample_{i:04}.scnm")), &s.scene)?;
                io::write_image(a.out_dir.join(format!("sample_{i:04}.imgb")), &s.image)?;
                captions.push_str(&format!("{i:04}\t{}\n", s.caption));
            }
            std::fs::write(a.out_dir.join("captions.tsv"), captions)?;
            println!("wrote {} samples to {}", samples.len(), a.out_dir.display());
        }
        Command::Scene(SceneCmd { action }) => match action {
            SceneAction::Copy { input, output } => {
                let scene = io::read_scene(&input)?;
                io::write_scene(&output, &scene)?;
                println!("{}x{} scene copied", scene.h, scene.w);
            }
            SceneAction::Edit {
                input,
                output,
                replaces,
                pastes,
            } => {
                let scene = io::read_scene(&input)?;
                let schema = PipelineConfig::desk().vqseg.schema;
                let edits = parse_edits(&replaces, &pastes)?;
                let edited = edit_scene(&scene, &schema, &edits)?;
                io::write_scene(&output, &edited)?;
                println!("applied {} edits", edits.len());
            }
        },
        Command::Bpe(BpeCmd { action }) => match action {
            BpeAction::Train { config, out } => {
                let cfg = load_config(&config)?;
                let captions: Vec<String> =
                    corpus_of(&cfg)?.into_iter().map(|s| s.caption).collect();
                let vocab = bpe_train(&captions, cfg.bpe_vocab)?;
                std::fs::write(&out, vocab.to_text())?;
                println!("vocab size {} ({} merges)", vocab.size(), vocab.merges().len());
            }
            BpeAction::Encode { vocab, text, length } => {
                let vocab = BpeVocab::from_text(&std::fs::read_to_string(&vocab)?)?;
                let tokens = bpe_encode(&text, &vocab, length);
                println!("{}", serde_json::to_string(&tokens)?);
            }
        },
        Command::Vqseg(VqCmd { action }) => match action {
            VqAction::Train { config, out_dir } => {
                let cfg = load_config(&config)?;
                let samples = corpus_of(&cfg)?;
                let scenes: Vec<_> = samples.iter().map(|s| s.scene.clone()).collect();
                let mut model = VqSegModel::new(cfg.vqseg.clone(), cfg.seed);
                model.seed_codebook(&scenes[..cfg.vqseg.batch.max(8).min(scenes.len())], cfg.seed)?;
                let mut last = 0.0;
                for step in 0..cfg.vqseg.steps {
                    let batch: Vec<_> = (0..cfg.vqseg.batch)
                        .map(|j| scenes[(step * cfg.vqseg.batch + j) % scenes.len()].clone())
                        .collect();
                    last = model.train_step(&batch)?.total;
                }
                std::fs::create_dir_all(&out_dir)?;
                std::fs::write(out_dir.join("config.kv"), cfg.to_kv_text())?;
                io::write_checkpoint(out_dir.join("vqseg.ckpt"), &model.params().dump_named())?;
                println!("trained {} steps, final loss {last:.4}", cfg.vqseg.steps);
            }
            VqAction::Encode { run_dir, input, out } => {
                let (model, _) = load_vqseg(&run_dir)?;
                let scene = io::read_scene(&input)?;
                let channels = mas_core::scene::encode_channels(&scene, &model.cfg.schema)?;
                let grid = model.seg_encode(&channels)?;
                write_or_print(&out, &serde_json::to_string(&grid)?)?;
            }
            VqAction::Decode { run_dir, tokens, out } => {
                let (model, _) = load_vqseg(&run_dir)?;
                let grid = read_token_grid(&tokens)?;
                let logits = model.seg_decode(&grid)?;
                let (scene, _) = model.seg_decode_hard(&logits)?;
                io::write_scene(&out, &scene)?;
                println!("decoded {}x{} scene", scene.h, scene.w);
            }
        },
        Command::Vqimg(VqCmd { action }) => match action {
            VqAction::Train { config, out_dir } => {
                let cfg = load_config(&config)?;
                let samples = corpus_of(&cfg)?;
                let pairs: Vec<_> = samples
                    .iter()
                    .map(|s| (s.image.clone(), s.scene.clone()))
                    .collect();
                let mut model = VqImgModel::new(cfg.vqimg.clone(), cfg.seed);
                let probe: Vec<_> = samples
                    .iter()
                    .take(cfg.vqimg.batch.max(8))
                    .map(|s| s.image.clone())
                    .collect();
                model.seed_codebook(&probe, cfg.seed)?;
                let face = mas_core::vqimg::FeatureExtractor::new(mas_core::vqimg::CropRole::Face, cfg.seed);
                let object = mas_core::vqimg::FeatureExtractor::new(mas_core::vqimg::CropRole::Object, cfg.seed);
                let mut last = 0.0;
                for step in 0..cfg.vqimg.steps {
                    let batch: Vec<_> = (0..cfg.vqimg.batch)
                        .map(|j| pairs[(step * cfg.vqimg.batch + j) % pairs.len()].clone())
                        .collect();
                    last = model.train_step(&batch, &face, &object)?.total;
                }
                std::fs::create_dir_all(&out_dir)?;
                std::fs::write(out_dir.join("config.kv"), cfg.to_kv_text())?;
                io::write_checkpoint(out_dir.join("vqimg.ckpt"), &model.params().dump_named())?;
                println!("trained {} steps, final loss {last:.4}", cfg.vqimg.steps);
            }
            VqAction::Encode { run_dir, input, out } => {
                let (model, _) = load_vqimg(&run_dir)?;
                let image = io::read_image(&input)?;
                let grid = model.img_encode(&image)?;
                write_or_print(&out, &serde_json::to_string(&grid)?)?;
            }
            VqAction::Decode { run_dir, tokens, out } => {
                let (model, _) = load_vqimg(&run_dir)?;
                let grid = read_token_grid(&tokens)?;
                let image = model.img_decode(&grid)?;
                io::write_image(&out, &image)?;
                println!("decoded {:?} image", image.shape());
            }
        },
        Command::Sbt(SbtCmd { action }) => match action {
            SbtAction::Train { run_dir } => {
                // needs trained tokenizers in the directory, not a full run
                let (vqseg, cfg) = load_vqseg(&run_dir)?;
                let (vqimg, _) = load_vqimg(&run_dir)?;
                let vocab =
                    BpeVocab::from_text(&std::fs::read_to_string(run_dir.join("bpe.vocab"))?)?;
                let train: Vec<_> = corpus_of(&cfg)?;
                let sequences = mas_core::harness::pipeline::tokenize_corpus(
                    &train, &vocab, &vqseg, &vqimg, &cfg,
                )?;
                let mut sbt = mas_core::sbt::SbtModel::new(cfg.sbt_config(vocab.size()), cfg.seed)?;
                let tcfg = cfg.sbt_train.clone();
                let mut rng = SeedRng::substream(cfg.seed, 0xcf17);
                let mut last = 0.0;
                for step in 0..tcfg.steps {
                    let batch: Vec<_> = (0..tcfg.batch)
                        .map(|j| sequences[(step * tcfg.batch + j) % sequences.len()].clone())
                        .collect();
                    last = sbt.train_step(&batch, &tcfg, CfMode::Off, &mut rng)?.total;
                }
                save_sbt_model(&run_dir, &sbt)?;
                println!("trained {} steps, final loss {last:.4}", tcfg.steps);
            }
            SbtAction::FinetuneCf { run_dir, steps } => {
                let mut art = load_artifacts(&run_dir)?;
                let sequences = mas_core::harness::pipeline::tokenize_corpus(
                    &art.train,
                    &art.vocab,
                    &art.vqseg,
                    &art.vqimg,
                    &art.config,
                )?;
                let tcfg = art.config.sbt_train.clone();
                let n = steps.unwrap_or(tcfg.cf_steps);
                let mut rng = SeedRng::substream(art.config.seed, 0xcf18);
                let mut last = 0.0;
                for step in 0..n {
                    let batch: Vec<_> = (0..tcfg.batch)
                        .map(|j| sequences[(step * tcfg.batch + j) % sequences.len()].clone())
                        .collect();
                    last = art.sbt.train_step(&batch, &tcfg, CfMode::On, &mut rng)?.total;
                }
                save_sbt_model(&run_dir, &art.sbt)?;
                println!("fine-tuned {n} steps with text dropout, final loss {last:.4}");
            }
        },
    }
    Ok(())
}

fn load_vqseg(dir: &Path) -> Result<(VqSegModel, PipelineConfig)> {
    let cfg = PipelineConfig::from_kv_text(&std::fs::read_to_string(dir.join("config.kv"))?)?;
    let mut model = VqSegModel::new(cfg.vqseg.clone(), cfg.seed);
    model
        .params_mut()
        .load_named(&io::read_checkpoint(dir.join("vqseg.ckpt"))?)?;
    Ok((model, cfg))
}

fn load_vqimg(dir: &Path) -> Result<(VqImgModel, PipelineConfig)> {
    let cfg = PipelineConfig::from_kv_text(&std::fs::read_to_string(dir.join("config.kv"))?)?;
    let mut model = VqImgModel::new(cfg.vqimg.clone(), cfg.seed);
    model
        .params_mut()
        .load_named(&io::read_checkpoint(dir.join("vqimg.ckpt"))?)?;
    Ok((model, cfg))
}

fn save_sbt_model(dir: &Path, sbt: &mas_core::sbt::SbtModel) -> Result<()> {
    let mut blobs = sbt.params().dump_named();
    blobs.push(("meta.step".into(), vec![1], vec![sbt.step_count() as f64]));
    io::write_checkpoint(dir.join("sbt.ckpt"), &blobs)?;
    Ok(())
}
