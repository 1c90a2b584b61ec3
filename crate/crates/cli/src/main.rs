//! Batch command line for the in-context segmentation pipeline: synthesize
//! datasets, train, predict at all three granularities, run episodic and
//! video evaluations, and self-test the oracles.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 usage/config error,
//! 3 runtime/protocol error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icseg::encoder::Image;
use icseg::error::Error;
use icseg::infer;
use icseg::interact::InContextExample;
use icseg::mask::{LabelMap, Mask};
use icseg::memory::{track_video, TrackOptions};
use icseg::metrics;
use icseg::params::ModelParams;
use icseg::pnm;
use icseg::synth;
use icseg::train::{build_dataset, save_checkpoint, train, TrainConfig};

#[derive(Parser)]
#[command(name = "icseg", version, about = "In-context segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth {
        /// Scene config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        count: usize,
        /// Base seed; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a config (and optionally a pre-built dataset).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Scene dataset directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a target image guided by a reference example, writing all
    /// three granularities.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference scene directory (image.ppm + annotations.json + masks).
        #[arg(long = "ref-dir")]
        ref_dir: PathBuf,
        /// Target image (.ppm file or a scene directory).
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = infer::DEFAULT_PRESENCE_THRESH)]
        presence_thresh: f64,
        #[arg(long, default_value_t = infer::DEFAULT_SCORE_THRESH)]
        score_thresh: f64,
        #[arg(long, default_value_t = infer::DEFAULT_BACKGROUND_THRESH)]
        background_thresh: f64,
    },
    /// Episodic one-shot semantic evaluation.
    EvalFss {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode list JSON.
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semi-supervised video evaluation with memory banks.
    EvalVos {
        #[arg(long)]
        ckpt: PathBuf,
        /// Video directory (frames/ plus optional gt/).
        #[arg(long)]
        video: PathBuf,
        /// First-frame annotation directory; defaults to <video>/gt/frame_0000.
        #[arg(long)]
        ann: Option<PathBuf>,
        /// Memory bank capacity.
        #[arg(long = "K", default_value_t = icseg::memory::DEFAULT_CAPACITY)]
        capacity: usize,
        /// Time-decay ratio of retention scores.
        #[arg(long, default_value_t = icseg::memory::DEFAULT_DECAY)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-frame label maps (optional).
        #[arg(long)]
        masks_out: Option<PathBuf>,
    },
    /// Run every built-in oracle and invariant check.
    Selftest,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Json(_)
        | Error::Format { .. }
        | Error::Contract(_)
        | Error::Io(_)
        | Error::Sampling(_)
        | Error::Generation(_) => 2,
        _ => 3,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn file_hash(path: &Path) -> Result<String, Error> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Attach the offending path to errors from loaders that do not carry one.
fn with_path<T>(r: Result<T, Error>, what: &str, path: &Path) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{what} {}: {io}", path.display()),
        )),
        other => other,
    })
}

fn load_target_image(path: &Path) -> Result<Image, Error> {
    let file = if path.is_dir() {
        path.join("image.ppm")
    } else {
        path.to_path_buf()
    };
    with_path(pnm::ppm_load(&file), "target image", &file)
}

fn load_scenes_dir(dir: &Path) -> Result<Vec<synth::Scene>, Error> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "dataset directory {} holds no scene subdirectories",
            dir.display()
        )));
    }
    let mut scenes = Vec::with_capacity(names.len());
    for n in &names {
        let sub = dir.join(n);
        let (image, annotations) = with_path(synth::load_scene_dir(&sub), "scene", &sub)?;
        scenes.push(synth::Scene {
            image,
            annotations,
            seed: 0,
            dropped: 0,
        });
    }
    Ok(scenes)
}

#[derive(Serialize)]
struct DatasetManifest {
    config_hash: String,
    count: usize,
    base_seed: u64,
    scenes: Vec<String>,
}

fn cmd_synth(config: &Path, out: &Path, count: usize, seed: u64) -> Result<(), Error> {
    let cfg: synth::SceneConfig =
        serde_json::from_str(&std::fs::read_to_string(config).map_err(Error::Io)?)?;
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let scene = synth::gen_scene(&cfg, seed + i as u64)?;
        let name = format!("scene_{i:04}");
        synth::save_scene_dir(&out.join(&name), &scene)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        config_hash: file_hash(config)?,
        count,
        base_seed: seed,
        scenes: names,
    };
    std::fs::write(
        out.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    config_hash: String,
    steps: usize,
    num_params: usize,
    first_loss: f64,
    final_loss: f64,
}

fn cmd_train(config: &Path, data: Option<&Path>, out: &Path) -> Result<(), Error> {
    let cfg = TrainConfig::from_json_file(config)?;
    let scenes = match data {
        Some(dir) => load_scenes_dir(dir)?,
        None => build_dataset(&cfg)?,
    };
    let outcome = train(&cfg, &scenes)?;
    save_checkpoint(out, &outcome)?;
    let report = TrainReport {
        config_hash: file_hash(config)?,
        steps: cfg.steps,
        num_params: outcome.params.num_params(),
        first_loss: outcome.curve.first().map_or(f64::NAN, |p| p.loss),
        final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
    };
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "trained {} steps ({} parameters), loss {:.4} -> {:.4}",
        cfg.steps, report.num_params, report.first_loss, report.final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct IdEntry {
    index: usize,
    score: f64,
    mask_file: String,
}

#[derive(Serialize)]
struct InstanceEntry {
    category: u32,
    score: f64,
    mask_file: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    ckpt: &Path,
    ref_dir: &Path,
    target: &Path,
    out: &Path,
    presence_thresh: f64,
    score_thresh: f64,
    background_thresh: f64,
) -> Result<(), Error> {
    let params = with_path(ModelParams::load_dir(ckpt), "checkpoint", ckpt)?;
    let reference = with_path(synth::load_example_dir(ref_dir), "reference", ref_dir)?;
    let target_img = load_target_image(target)?;
    let run = infer::run_model(&params, &reference, &target_img)?;
    std::fs::create_dir_all(out)?;
    let (h, w) = run.image_size;

    let id_outputs = infer::decode_id(&run.prediction, presence_thresh, h, w)?;
    let mut id_entries = Vec::with_capacity(id_outputs.len());
    for o in &id_outputs {
        let mask_file = format!("id_{}.pgm", o.index);
        pnm::mask_save(&out.join(&mask_file), &o.mask)?;
        id_entries.push(IdEntry {
            index: o.index,
            score: o.score,
            mask_file,
        });
    }
    std::fs::write(
        out.join("id.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "objects": id_entries }))?,
    )?;

    let instances = infer::decode_instances(&run.prediction, &run.sem_categories, score_thresh, h, w)?;
    let mut inst_entries = Vec::with_capacity(instances.len());
    for (k, o) in instances.iter().enumerate() {
        let mask_file = format!("inst_{k}.pgm");
        pnm::mask_save(&out.join(&mask_file), &o.mask)?;
        inst_entries.push(InstanceEntry {
            category: o.category,
            score: o.score,
            mask_file,
        });
    }
    std::fs::write(
        out.join("instances.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "instances": inst_entries }))?,
    )?;

    let semantic = infer::decode_semantic(
        &run.prediction,
        &run.sem_categories,
        background_thresh,
        h,
        w,
    )?;
    pnm::label_map_save(&out.join("semantic.pgm"), &semantic)?;
    println!(
        "wrote {} identity masks, {} instances, semantic map to {}",
        id_entries.len(),
        inst_entries.len(),
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct EpisodeFile {
    episodes: Vec<EpisodeSpec>,
}

#[derive(Deserialize)]
struct EpisodeSpec {
    reference: String,
    target: String,
    category: u32,
}

#[derive(Serialize)]
struct EpisodeResult {
    reference: String,
    target: String,
    category: u32,
    iou: f64,
}

#[derive(Serialize)]
struct FssReport {
    config_hash: String,
    episodes: Vec<EpisodeResult>,
    mean_iou: f64,
}

fn restrict_example(ex: &InContextExample, category: u32) -> Result<InContextExample, Error> {
    let keep: Vec<usize> = (0..ex.masks.len())
        .filter(|&i| ex.categories[i] == category)
        .collect();
    if keep.is_empty() {
        return Err(Error::Contract(format!(
            "reference has no instance of category {category}"
        )));
    }
    Ok(InContextExample {
        image: ex.image.clone(),
        masks: keep.iter().map(|&i| ex.masks[i].clone()).collect(),
        categories: keep.iter().map(|&i| ex.categories[i]).collect(),
    })
}

fn category_union(annotations: &[synth::Annotation], category: u32, h: usize, w: usize) -> Mask {
    let mut u = Mask::new(h, w);
    for a in annotations {
        if a.category == category {
            u.union_with(&a.mask);
        }
    }
    u
}

fn cmd_eval_fss(ckpt: &Path, episodes: &Path, out: &Path) -> Result<(), Error> {
    let params = with_path(ModelParams::load_dir(ckpt), "checkpoint", ckpt)?;
    let file: EpisodeFile = serde_json::from_str(
        &std::fs::read_to_string(episodes).map_err(Error::Io)?,
    )?;
    if file.episodes.is_empty() {
        return Err(Error::Metric("episode list is empty".to_string()));
    }
    let base = episodes.parent().unwrap_or_else(|| Path::new("."));
    let mut results = Vec::with_capacity(file.episodes.len());
    let mut sum = 0.0;
    for spec in &file.episodes {
        let ref_dir = base.join(&spec.reference);
        let tgt_dir = base.join(&spec.target);
        let full_ref = with_path(synth::load_example_dir(&ref_dir), "reference", &ref_dir)?;
        let reference = restrict_example(&full_ref, spec.category)?;
        let (target_img, target_ann) =
            with_path(synth::load_scene_dir(&tgt_dir), "target", &tgt_dir)?;
        let gt = category_union(
            &target_ann,
            spec.category,
            target_img.height(),
            target_img.width(),
        );
        let iou = infer::semantic_episode_iou(&params, &reference, &target_img, &gt, spec.category)?;
        sum += iou;
        results.push(EpisodeResult {
            reference: spec.reference.clone(),
            target: spec.target.clone(),
            category: spec.category,
            iou,
        });
    }
    let report = FssReport {
        config_hash: sha256_hex(
            format!("{}{}", file_hash(episodes)?, ckpt_hash(ckpt)?).as_bytes(),
        ),
        mean_iou: sum / results.len() as f64,
        episodes: results,
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("mean one-shot IoU over {} episodes: {:.4}", report.episodes.len(), report.mean_iou);
    Ok(())
}

fn ckpt_hash(ckpt: &Path) -> Result<String, Error> {
    file_hash(&ckpt.join("manifest.txt"))
}

#[derive(Serialize)]
struct VosReport {
    config_hash: String,
    capacity: usize,
    lambda: f64,
    frames: usize,
    objects: usize,
    per_frame_scores: Vec<Vec<f64>>,
    j: Option<f64>,
    f: Option<f64>,
    jf: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_vos(
    ckpt: &Path,
    video: &Path,
    ann: Option<&Path>,
    capacity: usize,
    lambda: f64,
    out: &Path,
    masks_out: Option<&Path>,
) -> Result<(), Error> {
    let params = with_path(ModelParams::load_dir(ckpt), "checkpoint", ckpt)?;
    let (frames, gt) = with_path(synth::load_video_dir(video), "video", video)?;
    let ann_dir = ann
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| video.join("gt").join("frame_0000"));
    let annotation = with_path(synth::load_example_dir(&ann_dir), "annotation", &ann_dir)?;
    let opts = TrackOptions {
        capacity,
        decay: lambda,
        presence_thresh: infer::DEFAULT_PRESENCE_THRESH,
    };
    let result = track_video(&frames, &annotation, &params, &opts)?;

    if let Some(dir) = masks_out {
        std::fs::create_dir_all(dir)?;
        for (t, frame_masks) in result.masks.iter().enumerate() {
            let mut map = LabelMap::new(frames[0].height(), frames[0].width());
            for (obj, mask) in frame_masks.iter().enumerate() {
                for y in 0..mask.height() {
                    for x in 0..mask.width() {
                        if mask.get(y, x) {
                            map.set(y, x, (obj + 1) as u8);
                        }
                    }
                }
            }
            pnm::label_map_save(&dir.join(format!("frame_{t:04}.pgm")), &map)?;
        }
    }

    let mut j = None;
    let mut f = None;
    let mut jf = None;
    if let Some(gt_frames) = &gt {
        if gt_frames.len() == frames.len() && frames.len() > 1 {
            let n_obj = annotation.masks.len();
            let preds: Vec<Vec<Mask>> = result.masks[1..].to_vec();
            let gts: Vec<Vec<Mask>> = gt_frames[1..]
                .iter()
                .map(|anns| anns.iter().take(n_obj).map(|a| a.mask.clone()).collect())
                .collect();
            if gts.iter().all(|g| g.len() == n_obj) {
                let score = metrics::jf_score(&preds, &gts)?;
                j = Some(score.j);
                f = Some(score.f);
                jf = Some(score.jf);
            }
        }
    }
    let report = VosReport {
        config_hash: sha256_hex(format!("{}{capacity}{lambda}", ckpt_hash(ckpt)?).as_bytes()),
        capacity,
        lambda,
        frames: frames.len(),
        objects: annotation.masks.len(),
        per_frame_scores: result.scores,
        j,
        f,
        jf,
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    match jf {
        Some(v) => println!(
            "tracked {} objects over {} frames: J&F = {v:.4}",
            report.objects, report.frames
        ),
        None => println!(
            "tracked {} objects over {} frames (no ground truth for scoring)",
            report.objects, report.frames
        ),
    }
    Ok(())
}

fn cmd_selftest() -> u8 {
    let mut failures = 0;
    for check in icseg::selftest::run_all() {
        match &check.outcome {
            Ok(()) => println!("[ok]   {}", check.name),
            Err(e) => {
                println!("[FAIL] {}: {e}", check.name);
                failures += 1;
            }
        }
    }
    if failures == 0 {
        println!("all checks passed");
        0
    } else {
        println!("{failures} check(s) failed");
        1
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth {
            config,
            out,
            count,
            seed,
        } => cmd_synth(config, out, *count, *seed),
        Command::Train { config, data, out } => cmd_train(config, data.as_deref(), out),
        Command::Predict {
            ckpt,
            ref_dir,
            target,
            out,
            presence_thresh,
            score_thresh,
            background_thresh,
        } => cmd_predict(
            ckpt,
            ref_dir,
            target,
            out,
            *presence_thresh,
            *score_thresh,
            *background_thresh,
        ),
        Command::EvalFss {
            ckpt,
            episodes,
            out,
        } => cmd_eval_fss(ckpt, episodes, out),
        Command::EvalVos {
            ckpt,
            video,
            ann,
            capacity,
            lambda,
            out,
            masks_out,
        } => cmd_eval_vos(
            ckpt,
            video,
            ann.as_deref(),
            *capacity,
            *lambda,
            out,
            masks_out.as_deref(),
        ),
        Command::Selftest => unreachable!("handled before run()"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::Selftest) {
        return ExitCode::from(cmd_selftest());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
