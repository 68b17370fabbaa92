use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use pointattn_core::attention::AttentionKind;
use pointattn_core::bench::{bench_attention, BenchRecord, DEFAULT_REPS};
use pointattn_core::config::KeyValues;
use pointattn_core::eval::evaluate;
use pointattn_core::geometry::{Detection, LabeledBox};
use pointattn_core::model::{Detector, ModelConfig};
use pointattn_core::scene::{generate_dataset, load_dataset, load_scene, save_dataset, write_detections, SceneSpec};
use pointattn_core::train::{Sample, TrainConfig, Trainer, DEFAULT_BATCH, DEFAULT_LR};
use pointattn_core::votes::dump_votes;

#[derive(Parser, Debug)]
#[command(name = "pointattn", version, about = "Attentional point-cloud detection on synthetic indoor scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of scenes (PLY points plus box sidecars).
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Target points per scene.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train a detector and write it to a model directory.
    Train {
        /// Model config (key = value lines). Defaults to the chosen profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        /// Overrides the attention kind of the config.
        #[arg(long)]
        attention: Option<AttentionKind>,
        /// Profile used when no config is given.
        #[arg(long, value_enum, default_value_t = Profile::Toy)]
        profile: Profile,
        /// Seed of the data shuffle.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a model on a dataset and print the report as TSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        iou: Vec<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-scene detection files into this directory.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Time eval-mode forwards of one attention module.
    Bench {
        #[arg(long)]
        attention: AttentionKind,
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024])]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        c: usize,
        #[arg(long, default_value_t = DEFAULT_REPS)]
        reps: usize,
    },
    /// Write seeds, votes and GT centroids of one scene to a PLY file.
    DumpVotes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Toy,
    Standard,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { seed, scenes, out, points } => gen(seed, scenes, &out, points),
        Command::Train { config, data, out, epochs, lr, batch, attention, profile, seed } => {
            train(config.as_deref(), &data, &out, epochs, TrainConfig { lr, batch_size: batch, seed }, attention, profile)
        }
        Command::Eval { model, data, iou, out, detections } => eval(&model, &data, &iou, out.as_deref(), detections.as_deref()),
        Command::Bench { attention, n_list, c, reps } => bench(attention, &n_list, c, reps),
        Command::DumpVotes { model, scene, out } => votes(&model, &scene, &out),
    }
}

fn gen(seed: u64, count: usize, out: &Path, points: Option<usize>) -> Result<()> {
    let mut spec = SceneSpec::default();
    if let Some(p) = points {
        spec.points = p;
    }
    let scenes = generate_dataset(seed, count, &spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_dataset(&scenes, out)?;
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    println!("wrote {count} scenes ({boxes} boxes) to {}", out.display());
    Ok(())
}

fn model_config(config: Option<&Path>, profile: Profile, classes: Vec<String>) -> Result<ModelConfig> {
    let Some(path) = config else {
        return Ok(match profile {
            Profile::Toy => ModelConfig::toy(classes),
            Profile::Standard => ModelConfig::standard(classes),
        });
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kv = KeyValues::parse(&text, path)?;
    if !kv.contains("classes") {
        // take the vocabulary from the data; the appended line keeps line numbers intact
        kv = KeyValues::parse(&format!("{text}\nclasses = {}\n", classes.join(",")), path)?;
    }
    Ok(ModelConfig::from_kv(&kv)?)
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    epochs: usize,
    tc: TrainConfig,
    attention: Option<AttentionKind>,
    profile: Profile,
) -> Result<()> {
    let scenes = load_dataset(data, &SceneSpec::default().class_names())?;
    let mut cfg = model_config(config, profile, scenes[0].class_names.clone())?;
    if let Some(kind) = attention {
        cfg.backbone.attention = kind;
    }
    cfg.validate()?;
    check_vocab(&cfg.class_names, scenes.iter().flat_map(|s| &s.boxes))?;
    let (det, mut store) = Detector::init::<f32>(cfg)?;
    let boxes: Vec<LabeledBox> = scenes.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    det.fit_anchors(&mut store, &boxes)?;
    let samples = scenes.iter().map(|s| Sample { points: &s.points, boxes: &s.boxes }).collect();
    let mut trainer = Trainer::new(&det, samples, tc)?;
    let per_epoch = trainer.steps_per_epoch();
    let t0 = Instant::now();
    let mut curve = String::from("step\ttotal\tvote\tobjectness\tcenter\tsize\tclass\tpositives\n");
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let c = trainer.step(&mut store)?;
            sum += c.total;
            let _ = writeln!(
                curve,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                trainer.history.len(),
                c.total,
                c.vote,
                c.objectness,
                c.center,
                c.size,
                c.class,
                c.positives
            );
        }
        println!("epoch {epoch}/{epochs}\tloss {:.4}\t{:.1}s", sum / per_epoch as f64, t0.elapsed().as_secs_f64());
    }
    det.save(&store, out)?;
    std::fs::write(out.join("loss.tsv"), curve)?;
    println!("trained `{}` for {} steps; saved to {}", det.config().backbone.attention, trainer.history.len(), out.display());
    Ok(())
}

fn check_vocab<'a>(classes: &[String], boxes: impl IntoIterator<Item = &'a LabeledBox>) -> Result<()> {
    if let Some(b) = boxes.into_iter().find(|b| b.class >= classes.len()) {
        bail!("ground-truth class id {} outside the model's {} classes", b.class, classes.len());
    }
    Ok(())
}

fn eval(model: &Path, data: &Path, iou: &[f64], out: Option<&Path>, det_dir: Option<&Path>) -> Result<()> {
    let (det, store) = Detector::load::<f32>(model).with_context(|| format!("loading model from {}", model.display()))?;
    let names = det.config().class_names.clone();
    let scenes = load_dataset(data, &names)?;
    check_vocab(&names, scenes.iter().flat_map(|s| &s.boxes))?;
    let dets: Vec<Vec<Detection>> = scenes.iter().map(|s| det.detect(&store, &s.points)).collect::<pointattn_core::Result<_>>()?;
    if let Some(dir) = det_dir {
        std::fs::create_dir_all(dir)?;
        for (s, d) in scenes.iter().zip(&dets) {
            write_detections(&dir.join(format!("{}.txt", s.id)), d)?;
        }
    }
    let gts: Vec<Vec<LabeledBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let report = evaluate(&dets, &gts, iou, &names)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = out {
        std::fs::write(path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn bench(kind: AttentionKind, ns: &[usize], c: usize, reps: usize) -> Result<()> {
    let records = bench_attention(kind, ns, c, reps)?;
    println!("{}", BenchRecord::TSV_HEADER);
    for r in &records {
        println!("{}", r.to_tsv());
    }
    Ok(())
}

fn votes(model: &Path, scene: &Path, out: &Path) -> Result<()> {
    let (det, store) = Detector::load::<f32>(model).with_context(|| format!("loading model from {}", model.display()))?;
    let scene = load_scene(scene, &det.config().class_names)?;
    match dump_votes(&det, &store, &scene, out)? {
        Some(d) => println!("mean vote-to-centroid distance {d:.4} m"),
        None => println!("no seed lies on an object; mean vote distance undefined"),
    }
    println!("wrote {}", out.display());
    Ok(())
}
