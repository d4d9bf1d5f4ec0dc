//! On-disk layout:
//!
//! ```text
//! <root>/dataset.toml
//! <root>/<video_id>/frames/00000.png
//! <root>/<video_id>/keypoints.jsonl      {"frame": 0, "points": [[x, y], ...]}
//! <root>/<video_id>/masks/00000.png      optional, 8-bit grayscale
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DatasetSchema, KeypointSet, VideoSample};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct KeypointRecord {
    frame: usize,
    points: Vec<[f32; 2]>,
}

/// Load every video directory under `root`. Directories without a
/// `keypoints.jsonl` are skipped with a warning.
pub fn load_dataset(root: &Path, schema: &DatasetSchema) -> Result<Vec<VideoSample>> {
    schema.validate()?;
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();

    let mut videos = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let kp_path = dir.join("keypoints.jsonl");
        if !kp_path.is_file() {
            log::warn!("skipping {}: no keypoints.jsonl", dir.display());
            continue;
        }
        videos.push(load_video(&dir, &kp_path, schema)?);
    }
    Ok(videos)
}

fn load_video(dir: &Path, kp_path: &Path, schema: &DatasetSchema) -> Result<VideoSample> {
    let video_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Integrity(format!("{}: non-utf8 directory name", dir.display())))?
        .to_string();
    let keypoints = read_keypoints_jsonl(kp_path)?;

    let frames: Vec<RgbImage> = list_pngs(&dir.join("frames"))?
        .iter()
        .map(|p| Ok(image::open(p)?.to_rgb8()))
        .collect::<Result<_>>()?;
    let mask_dir = dir.join("masks");
    let masks = if mask_dir.is_dir() {
        Some(
            list_pngs(&mask_dir)?
                .iter()
                .map(|p| Ok(image::open(p)?.to_luma8()))
                .collect::<Result<Vec<GrayImage>>>()?,
        )
    } else {
        None
    };

    if let Some(f) = frames.first() {
        if f.dimensions() != (schema.width, schema.height) {
            return Err(Error::Integrity(format!(
                "{video_id}: frames are {}x{}, schema says {}x{}",
                f.width(),
                f.height(),
                schema.width,
                schema.height
            )));
        }
    }
    VideoSample::new(video_id, frames, keypoints, masks, schema.fps, schema.n_points)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Parse a keypoint sequence. Records must be numbered consecutively from 0.
pub fn read_keypoints_jsonl(path: &Path) -> Result<Vec<KeypointSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: KeypointRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.frame != out.len() {
            return Err(parse_err(format!("expected frame {}, found {}", out.len(), rec.frame)));
        }
        out.push(KeypointSet::new(rec.points).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_keypoints_jsonl(path: &Path, keypoints: &[KeypointSet]) -> Result<()> {
    let mut buf = Vec::new();
    for (frame, k) in keypoints.iter().enumerate() {
        let rec = KeypointRecord {
            frame,
            points: k.points().to_vec(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(root: &Path, schema: &DatasetSchema, videos: &[VideoSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let schema_path = root.join("dataset.toml");
    fs::write(&schema_path, schema.to_toml()).map_err(|e| Error::io(&schema_path, e))?;
    for v in videos {
        let dir = root.join(v.video_id());
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (i, f) in v.frames().iter().enumerate() {
            f.save(frames_dir.join(format!("{i:05}.png")))?;
        }
        if let Some(masks) = v.masks() {
            let mask_dir = dir.join("masks");
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            for (i, m) in masks.iter().enumerate() {
                m.save(mask_dir.join(format!("{i:05}.png")))?;
            }
        }
        write_keypoints_jsonl(&dir.join("keypoints.jsonl"), v.keypoints())?;
    }
    Ok(())
}
