//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/sample_0000/meta.json
//! <root>/sample_0000/frame_00.ppm …        frames
//! <root>/sample_0000/seg_00.segm …         teacher scores (f32)
//! <root>/sample_0000/label_00.segm …       label maps (u8)
//! <root>/sample_0000/flow_01.flo …         O_t for t >= 1
//! <root>/sample_0000/valid_01.segm …       warp validity masks
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use jant_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::{read_flo, read_segm, write_flo, write_segm, Palette, RgbImage, SegmPayload};
use crate::synthgen::{DatasetConfig, SceneConfig, VideoSample};
use crate::types::{ClassTable, SegMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub dir: String,
    pub seed: u64,
    pub camera_yaw_rate: i32,
    pub steering_angle: f32,
    pub annotated: Vec<bool>,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_samples: usize,
    pub config: DatasetConfig,
    pub classes: ClassTable,
    pub palette: Palette,
    pub samples: Vec<SampleMeta>,
}

fn sample_dir(i: usize) -> String {
    format!("sample_{i:04}")
}

fn frame_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("frame of shape {:?}", t.shape())));
    };
    let hw = h * w;
    let d = t.data();
    let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: (0..hw).map(|p| [q(d[p]), q(d[hw + p]), q(d[2 * hw + p])]).collect(),
    })
}

fn image_to_frame(img: &RgbImage) -> Result<Tensor<f32>> {
    let hw = img.width * img.height;
    let mut data = vec![0f32; 3 * hw];
    for (p, px) in img.pixels.iter().enumerate() {
        for ch in 0..3 {
            data[ch * hw + p] = px[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, img.height, img.width], data)?)
}

pub fn write_sample(sample: &VideoSample, scene: &SceneConfig, dir: &Path) -> Result<SampleMeta> {
    fs::create_dir_all(dir)?;
    for (t, f) in sample.frames.iter().enumerate() {
        frame_to_image(f)?.write_ppm(dir.join(format!("frame_{t:02}.ppm")))?;
    }
    for (t, s) in sample.segs.iter().enumerate() {
        write_segm(&SegmPayload::Scores(s.clone()), dir.join(format!("seg_{t:02}.segm")))?;
        let labels = SegmPayload::Labels {
            classes: s.classes,
            height: s.height,
            width: s.width,
            labels: s.labels(),
        };
        write_segm(&labels, dir.join(format!("label_{t:02}.segm")))?;
    }
    for t in 1..sample.len() {
        write_flo(sample.flow_at(t), dir.join(format!("flow_{t:02}.flo")))?;
        let mask = SegmPayload::Mask {
            height: sample.height(),
            width: sample.width(),
            mask: sample.valid_at(t).to_vec(),
        };
        write_segm(&mask, dir.join(format!("valid_{t:02}.segm")))?;
    }
    let meta = SampleMeta {
        dir: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: sample.seed,
        camera_yaw_rate: sample.camera_yaw_rate,
        steering_angle: sample.steering_angle,
        annotated: sample.annotated.clone(),
        scene: scene.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Generates and writes a whole dataset; returns its manifest.
pub fn write_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let classes = cfg.scene.class_table();
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let scene = cfg.sample_config(i);
        let sample = crate::synthgen::generate_sequence(&scene)?;
        samples.push(write_sample(&sample, &scene, &root.join(sample_dir(i)))?);
    }
    let manifest = Manifest {
        num_samples: cfg.num_samples,
        config: cfg.clone(),
        palette: Palette::for_table(&classes),
        classes,
        samples,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

fn read_scores(path: PathBuf) -> Result<SegMap> {
    match read_segm(&path)? {
        SegmPayload::Scores(s) => Ok(s),
        _ => Err(Error::Format(format!("{} does not hold scores", path.display()))),
    }
}

pub fn read_sample(dir: &Path, classes: &ClassTable) -> Result<VideoSample> {
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| Error::Format(format!("sample meta: {e}")))?;
    let n = meta.annotated.len();
    if n < 2 {
        return Err(Error::Format("sample shorter than two frames".into()));
    }
    let frames = (0..n)
        .map(|t| image_to_frame(&RgbImage::read_ppm(dir.join(format!("frame_{t:02}.ppm")))?))
        .collect::<Result<Vec<_>>>()?;
    let segs = (0..n)
        .map(|t| read_scores(dir.join(format!("seg_{t:02}.segm"))))
        .collect::<Result<Vec<_>>>()?;
    let flows = (1..n)
        .map(|t| read_flo(dir.join(format!("flow_{t:02}.flo"))))
        .collect::<Result<Vec<_>>>()?;
    let valid = (1..n)
        .map(|t| match read_segm(dir.join(format!("valid_{t:02}.segm")))? {
            SegmPayload::Mask { mask, .. } => Ok(mask),
            _ => Err(Error::Format("validity file does not hold a mask".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSample {
        frames,
        segs,
        flows,
        valid,
        annotated: meta.annotated,
        steering_angle: meta.steering_angle,
        camera_yaw_rate: meta.camera_yaw_rate,
        seed: meta.seed,
        table: classes.clone(),
    })
}

/// Loads every sample listed in the manifest.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<VideoSample>)> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .samples
        .iter()
        .map(|m| read_sample(&root.join(&m.dir), &manifest.classes))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
