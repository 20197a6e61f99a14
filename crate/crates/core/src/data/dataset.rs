//! Dataset directory layout: `manifest.json` plus one raw little-endian
//! f32 frame payload and one line-set JSON per clip.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lines::LineSegmentSet;
use crate::numerics::Tensor;

use super::codec::VideoClip;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub seed: u64,
    pub frames_file: String,
    pub lines_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// [height, width] in pixels.
    pub resolution: [usize; 2],
    pub n_intermediate: usize,
    pub lambda_s: usize,
    pub lambda_t: usize,
    pub clips: Vec<ClipEntry>,
}

/// One clip with its ground-truth geometry.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub seed: u64,
    pub clip: VideoClip,
    pub lines: Vec<LineSegmentSet>,
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ClipRecord>,
}

impl Dataset {
    pub fn seeds(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.seed).collect()
    }
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!(
            "payload {} has length {} not divisible by 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes clips and line sets with a manifest. Lossless round trip.
pub fn dataset_write(
    dir: &Path,
    records: &[ClipRecord],
    lambda_s: usize,
    lambda_t: usize,
) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::data("refusing to write an empty dataset"))?;
    let resolution = [first.clip.height(), first.clip.width()];
    let n_intermediate = first.clip.n_intermediate();
    fs::create_dir_all(dir)?;
    let mut clips = Vec::with_capacity(records.len());
    for rec in records {
        if rec.clip.height() != resolution[0]
            || rec.clip.width() != resolution[1]
            || rec.clip.n_intermediate() != n_intermediate
        {
            return Err(Error::data("mixed clip geometry in one dataset"));
        }
        let frames_file = format!("clip_{:08}.f32", rec.seed);
        let lines_file = format!("clip_{:08}.lines.json", rec.seed);
        write_f32_le(&dir.join(&frames_file), rec.clip.frames.data())?;
        let lines_json = serde_json::to_vec_pretty(&rec.lines)?;
        fs::write(dir.join(&lines_file), lines_json)?;
        clips.push(ClipEntry {
            seed: rec.seed,
            frames_file,
            lines_file,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution,
        n_intermediate,
        lambda_s,
        lambda_t,
        clips,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads a dataset back, validating the manifest against the payloads.
pub fn dataset_read(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = fs::read(dir.join("manifest.json"))
        .map_err(|e| Error::data(format!("cannot read manifest: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let [h, w] = manifest.resolution;
    let frames_per_clip = manifest.n_intermediate + 2;
    let expected_len = frames_per_clip * h * w;
    let mut records = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let data = read_f32_le(&dir.join(&entry.frames_file))?;
        if data.len() != expected_len {
            return Err(Error::data(format!(
                "{}: payload holds {} values, manifest implies {expected_len}",
                entry.frames_file,
                data.len()
            )));
        }
        let frames = Tensor::new(vec![frames_per_clip, 1, h, w], data)?;
        let clip = VideoClip::new(frames, 30.0)?;
        let lines_bytes = fs::read(dir.join(&entry.lines_file))?;
        let lines: Vec<LineSegmentSet> = serde_json::from_slice(&lines_bytes)?;
        if lines.len() != frames_per_clip {
            return Err(Error::data(format!(
                "{}: {} line sets for {frames_per_clip} frames",
                entry.lines_file,
                lines.len()
            )));
        }
        records.push(ClipRecord {
            seed: entry.seed,
            clip,
            lines,
        });
    }
    Ok(Dataset { manifest, records })
}
