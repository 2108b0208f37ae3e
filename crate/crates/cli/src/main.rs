//! `jant`: generate synthetic data, train and fine-tune the joint model,
//! evaluate it against the baselines, and render predictions.
//!
//! Every config key can come from a JSON file (`--config`) and be overridden
//! by the flag of the same name (`num_samples` ↔ `--num-samples`).
//! Exit codes: 0 ok, 2 usage/config/IO, 3 evaluation error, 4 divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jant::baselines::{Baseline, Window};
use jant::checkpoint::{load_checkpoint, save_checkpoint};
use jant::dataset::{read_dataset, read_sample, write_dataset};
use jant::eval::{evaluate, Predictor};
use jant::flowio::{flow_to_color, labels_to_image, read_flo, read_segm, write_flo, write_label_png_like, Palette, RgbImage, SegmPayload};
use jant::nets::{JointModel, ModelConfig};
use jant::steering::{evaluate_steering, train_steering, SteeringConfig};
use jant::synthgen::{DatasetConfig, VideoSample};
use jant::trainer::{rollout, train, Phase, Sgd, TrainConfig};
use jant::{ClassTable, Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "jant", version, args_override_self = true, about = "Joint flow and scene-parsing anticipation on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        /// Dataset config JSON (keys of `DatasetConfig`; scene keys under "scene").
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        top: DatasetFlags,
        #[command(flatten)]
        scene: SceneFlags,
    },
    /// Single-step training from scratch.
    Train {
        /// Training config JSON: `TrainConfig` keys plus a "model" object.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Recurrent (BPTT) fine-tuning of a checkpoint.
    FinetuneBptt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Metrics report of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Recursive prediction steps before scoring.
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint forward on one sample; writes `.flo` and label PPMs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sample directory of a generated dataset.
        #[arg(long)]
        sample: PathBuf,
        /// Number of predicted steps T.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// First predicted frame index (default: right after the history).
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a `.flo` (colour wheel) or `.segm` (palette) file as PPM.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flow magnitude mapped to full saturation (default: 99th percentile).
        #[arg(long)]
        max_flow: Option<f32>,
    },
    /// Score a non-learned baseline with the same report schema as `eval`.
    Baseline {
        /// `copy_last` or `warp_last`.
        #[arg(long)]
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        /// History length used to place the rollout start.
        #[arg(long, default_value_t = 4)]
        history_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the steering head on top of a trained checkpoint.
    SteeringTrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        steering: SteeringFlags,
    },
    /// Steering predictions as CSV (`frame_id,predicted_deg,gt_deg`).
    SteeringEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Serialize, Default)]
struct DatasetFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_yaw: Option<i32>,
    /// Dataset seed; per-sample seeds derive from it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Default)]
struct SceneFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sequence_length: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_shapes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_speed: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    camera_yaw_rate: Option<i32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    annotate_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    logit_magnitude: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_patches: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    min_shape_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_shape_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    texture: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    texture_scale: Option<i32>,
}

#[derive(Args, Serialize, Default)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_steps: Option<usize>,
    /// Training seed (shuffling and crops).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bptt_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rollout_horizon: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_decay_at: Option<f64>,
    /// Training crop as two numbers: height width.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    crop: Option<Vec<usize>>,
    /// Train on full frames (sets `crop` to null).
    #[arg(long, conflicts_with = "crop")]
    #[serde(skip)]
    no_crop: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_through_warp: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_grad_norm: Option<f64>,
    /// Disable gradient clipping (sets `clip_grad_norm` to null).
    #[arg(long, conflicts_with = "clip_grad_norm")]
    #[serde(skip)]
    no_clip: bool,
}

#[derive(Args, Serialize, Default)]
struct ModelFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    history_len: Option<usize>,
    #[arg(long = "model-num-classes")]
    #[serde(rename = "num_classes", skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    branch_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    transform_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    inject_flow_features: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warp_parse_base: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_prior: Option<bool>,
    /// Weight-initialization seed (`model.seed` in the config file).
    #[arg(long = "model-seed")]
    #[serde(rename = "seed", skip_serializing_if = "Option::is_none")]
    model_seed: Option<u64>,
}

#[derive(Args, Serialize, Default)]
struct SteeringFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    /// 0 picks a step size from the feature scale (frozen backbone only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    finetune_backbone: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// `TrainConfig` keys at the top level, model keys under "model".
#[derive(Serialize, Deserialize, Default)]
struct TrainFile {
    #[serde(default)]
    model: ModelConfig,
    #[serde(flatten)]
    train: TrainConfig,
}

fn read_json(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn object<'a>(v: &'a mut Value, key: &str) -> &'a mut Map<String, Value> {
    let Value::Object(m) = v else {
        unreachable!("config roots are objects")
    };
    let slot = m.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    if !slot.is_object() {
        *slot = Value::Object(Map::new());
    }
    slot.as_object_mut().expect("object")
}

fn root(v: &mut Value) -> Result<&mut Map<String, Value>> {
    v.as_object_mut()
        .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))
}

fn overlay(dst: &mut Map<String, Value>, flags: &impl Serialize) -> Result<()> {
    if let Value::Object(m) = serde_json::to_value(flags)? {
        dst.extend(m);
    }
    Ok(())
}

fn parse_config<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn train_config(path: Option<&Path>, flags: &TrainFlags, model: Option<&ModelFlags>) -> Result<(ModelConfig, TrainConfig)> {
    let mut v = read_json(path)?;
    overlay(root(&mut v)?, flags)?;
    if flags.no_crop {
        root(&mut v)?.insert("crop".into(), Value::Null);
    }
    if flags.no_clip {
        root(&mut v)?.insert("clip_grad_norm".into(), Value::Null);
    }
    if let Some(m) = model {
        overlay(object(&mut v, "model"), m)?;
    }
    let file: TrainFile = parse_config(v)?;
    file.model.validate()?;
    file.train.validate()?;
    Ok((file.model, file.train))
}

fn log_line(value: Value) {
    eprintln!("{value}");
}

fn write_report(report_json: &str, out: Option<&Path>) -> Result<()> {
    println!("{report_json}");
    if let Some(p) = out {
        fs::write(p, format!("{report_json}\n"))?;
    }
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<VideoSample>> {
    Ok(read_dataset(dir)?.1)
}

fn run_training(model: &mut JointModel, opt: &mut Sgd, data: &Path, cfg: &TrainConfig, phase: Phase, out: &Path) -> Result<()> {
    let data = load_data(data)?;
    fs::create_dir_all(out)?;
    let stderr = std::io::stderr();
    let mut lock = stderr.lock();
    let summary = train(model, opt, &data, cfg, phase, Some(&mut lock as &mut dyn Write))?;
    drop(lock);
    save_checkpoint(model, Some(opt), out.join("model.jant"))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    log_line(json!({"event": "saved", "checkpoint": out.join("model.jant"), "steps": summary.steps}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, top, scene } => {
            let mut v = read_json(config.as_deref())?;
            overlay(root(&mut v)?, &top)?;
            overlay(object(&mut v, "scene"), &scene)?;
            let cfg: DatasetConfig = parse_config(v)?;
            let manifest = write_dataset(&cfg, &out)?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "num_samples": manifest.num_samples,
                    "height": cfg.scene.height,
                    "width": cfg.scene.width,
                    "sequence_length": cfg.scene.sequence_length,
                    "classes": manifest.classes.names,
                })
            );
        }
        Command::Train { config, data, out, train, model } => {
            let (mcfg, tcfg) = train_config(config.as_deref(), &train, Some(&model))?;
            let mut m = JointModel::new(mcfg)?;
            let mut opt = Sgd::from_config(&m, &tcfg);
            run_training(&mut m, &mut opt, &data, &tcfg, Phase::Single, &out)?;
        }
        Command::FinetuneBptt { checkpoint, config, data, out, train } => {
            let (_, tcfg) = train_config(config.as_deref(), &train, None)?;
            let (mut m, opt) = load_checkpoint(&checkpoint)?;
            let mut opt = opt.unwrap_or_else(|| Sgd::from_config(&m, &tcfg));
            opt.momentum = tcfg.momentum as f32;
            opt.weight_decay = tcfg.weight_decay as f32;
            run_training(&mut m, &mut opt, &data, &tcfg, Phase::Bptt, &out)?;
        }
        Command::Eval { checkpoint, data, horizon, out } => {
            let (m, _) = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            let report = evaluate(Predictor::Model(&m), &data, m.config.history_len, horizon)?;
            write_report(&report.to_json(), out.as_deref())?;
        }
        Command::Baseline { name, data, horizon, history_len, out } => {
            let b = Baseline::parse(&name)?;
            let data = load_data(&data)?;
            let report = evaluate(Predictor::Baseline(b), &data, history_len, horizon)?;
            write_report(&report.to_json(), out.as_deref())?;
        }
        Command::Predict { checkpoint, sample, steps, start, out } => {
            let (m, _) = load_checkpoint(&checkpoint)?;
            let table = m.config.class_table();
            let s = read_sample(&sample, &table)?;
            let k = m.config.history_len;
            let t0 = start.unwrap_or(k);
            let window = Window::from_sample(&s, t0, k)?;
            let preds = rollout(&m, &window, steps)?;
            fs::create_dir_all(&out)?;
            let palette = Palette::for_table(&table);
            for (i, (flow, seg)) in preds.iter().enumerate() {
                write_flo(flow, out.join(format!("step_{i:02}.flo")))?;
                write_label_png_like(seg, &palette, out.join(format!("step_{i:02}_labels.ppm")))?;
            }
            log_line(json!({"event": "predict", "start": t0, "steps": steps, "out": out}));
        }
        Command::Viz { input, out, max_flow } => {
            let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
            let img = match ext {
                "flo" => flow_to_color(&read_flo(&input)?, max_flow)?,
                "segm" => match read_segm(&input)? {
                    SegmPayload::Scores(s) => {
                        let p = Palette::for_table(&ClassTable::for_classes(s.classes));
                        labels_to_image(&s.labels(), s.width, s.height, &p)?
                    }
                    SegmPayload::Labels { classes, height, width, labels } => {
                        let p = Palette::for_table(&ClassTable::for_classes(classes));
                        labels_to_image(&labels, width, height, &p)?
                    }
                    SegmPayload::Mask { height, width, mask } => RgbImage {
                        width,
                        height,
                        pixels: mask.iter().map(|&b| if b { [255; 3] } else { [0; 3] }).collect(),
                    },
                },
                _ => return Err(Error::Usage(format!("cannot visualize {}: expected .flo or .segm", input.display()))),
            };
            img.write_ppm(&out)?;
        }
        Command::SteeringTrain { checkpoint, config, data, heldout, out, steering } => {
            let mut v = read_json(config.as_deref())?;
            overlay(root(&mut v)?, &steering)?;
            let cfg: SteeringConfig = parse_config(v)?;
            let (mut m, _) = load_checkpoint(&checkpoint)?;
            let train_d = load_data(&data)?;
            let held = load_data(&heldout)?;
            let curve = train_steering(&mut m, &train_d, &held, &cfg)?;
            for (epoch, mse) in curve.iter().enumerate() {
                log_line(json!({"event": "steering_epoch", "epoch": epoch, "heldout_mse": mse}));
            }
            fs::create_dir_all(&out)?;
            save_checkpoint(&m, None, out.join("model.jant"))?;
            fs::write(out.join("steering_curve.json"), serde_json::to_string(&curve)?)?;
        }
        Command::SteeringEval { checkpoint, data, out } => {
            let (m, _) = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            let (pred, gt, mse) = evaluate_steering(&m, &data)?;
            let mut csv = String::from("frame_id,predicted_deg,gt_deg\n");
            for (i, (p, g)) in pred.iter().zip(&gt).enumerate() {
                csv.push_str(&format!("{i},{p},{g}\n"));
            }
            fs::write(&out, csv)?;
            println!("{}", json!({"steering_mse": mse, "n": pred.len()}));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Evaluation(_) => 3,
        Error::Divergence(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log_line(json!({"event": "error", "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}
