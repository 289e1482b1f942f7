//! Demonstration recording, the on-disk shard format (manifest.json plus
//! raw little-endian blobs), normalization statistics, and batch assembly.

use crate::action::DimStats;
use crate::error::{Result, TrimotError};
use crate::semantic::Vocabulary;
use crate::sim::{self, Suite, IMG};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayDesc {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDesc {
    pub start_step: usize,
    pub length: usize,
    pub instruction: String,
    pub suite: Suite,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub action: DimStats,
    pub proprio: DimStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub arrays: Vec<ArrayDesc>,
    pub episodes: Vec<EpisodeDesc>,
    pub norm_stats: NormStats,
}

/// An in-memory shard: the manifest plus the raw step arrays.
#[derive(Debug, Clone)]
pub struct Shard {
    pub manifest: ShardManifest,
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub proprio: Vec<f32>,
    pub action: Vec<f32>,
    pub steps: usize,
}

/// One assembled training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub rgb: Array3<u8>,
    pub depth_gt: Array2<f64>,
    pub tokens: Vec<u32>,
    /// Normalized proprioceptive state.
    pub proprio: Vec<f64>,
    /// Normalized k-chunk, padded by repeating the last action.
    pub actions: Array2<f64>,
    pub pad_count: usize,
}

fn mix_seed(seed: u64, i: u64) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Records expert demonstrations for a suite mix into a shard directory.
/// Deterministic in `seed`; episodes are capped at `sim::EPISODE_CAP` steps.
pub fn record_dataset(mix: &[(Suite, usize)], seed: u64, out_dir: &Path) -> Result<ShardManifest> {
    let mut rgb: Vec<u8> = Vec::new();
    let mut depth: Vec<f32> = Vec::new();
    let mut proprio: Vec<f32> = Vec::new();
    let mut action: Vec<f32> = Vec::new();
    let mut episodes: Vec<EpisodeDesc> = Vec::new();
    let mut start = 0usize;
    let mut i = 0u64;
    for &(suite, count) in mix {
        for _ in 0..count {
            let ep_seed = mix_seed(seed, i);
            i += 1;
            let (scene, task) = sim::generate_scene(ep_seed, suite);
            let record = sim::rollout_expert(&scene, &task, sim::EPISODE_CAP)?;
            let len = record.actions.len();
            for t in 0..len {
                let obs = sim::render(&record.scenes[t], &task.instruction);
                rgb.extend(obs.rgb.iter().copied());
                depth.extend(obs.depth_gt.iter().map(|&d| d as f32));
                proprio.extend(obs.proprio.iter().map(|&p| p as f32));
                action.extend(record.actions[t].iter().map(|&a| a as f32));
            }
            episodes.push(EpisodeDesc {
                start_step: start,
                length: len,
                instruction: task.instruction.clone(),
                suite,
                seed: ep_seed,
            });
            start += len;
        }
    }
    if start == 0 {
        return Err(TrimotError::Data("no steps recorded".into()));
    }

    let norm_stats = NormStats {
        action: stats_of(&action, 4),
        proprio: stats_of(&proprio, 4),
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| TrimotError::io(out_dir.display().to_string(), e))?;
    let total = start;
    let mut arrays = Vec::new();
    write_blob(out_dir, "rgb", &rgb, &mut arrays, vec![total, IMG, IMG, 3])?;
    write_blob_f32(out_dir, "depth", &depth, &mut arrays, vec![total, IMG, IMG])?;
    write_blob_f32(out_dir, "proprio", &proprio, &mut arrays, vec![total, 4])?;
    write_blob_f32(out_dir, "action", &action, &mut arrays, vec![total, 4])?;

    let manifest = ShardManifest {
        version: MANIFEST_VERSION,
        arrays,
        episodes,
        norm_stats,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    Ok(manifest)
}

fn stats_of(data: &[f32], dims: usize) -> DimStats {
    let mut min = vec![f64::INFINITY; dims];
    let mut max = vec![f64::NEG_INFINITY; dims];
    for (i, &v) in data.iter().enumerate() {
        let d = i % dims;
        let v = v as f64;
        min[d] = min[d].min(v);
        max[d] = max[d].max(v);
    }
    DimStats { min, max }
}

/// Per-dimension min/max over recorded actions and proprio of many shards.
pub fn compute_norm_stats(shards: &[Shard]) -> Result<NormStats> {
    if shards.is_empty() || shards.iter().all(|s| s.steps == 0) {
        return Err(TrimotError::Data("empty dataset".into()));
    }
    let merge = |a: &DimStats, b: &DimStats| DimStats {
        min: a.min.iter().zip(&b.min).map(|(x, y)| x.min(*y)).collect(),
        max: a.max.iter().zip(&b.max).map(|(x, y)| x.max(*y)).collect(),
    };
    let mut action = stats_of(&shards[0].action, 4);
    let mut proprio = stats_of(&shards[0].proprio, 4);
    for s in &shards[1..] {
        action = merge(&action, &stats_of(&s.action, 4));
        proprio = merge(&proprio, &stats_of(&s.proprio, 4));
    }
    Ok(NormStats { action, proprio })
}

fn write_blob(
    dir: &Path,
    name: &str,
    data: &[u8],
    arrays: &mut Vec<ArrayDesc>,
    shape: Vec<usize>,
) -> Result<()> {
    let file = format!("{name}.bin");
    let path = dir.join(&file);
    std::fs::write(&path, data).map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    arrays.push(ArrayDesc {
        name: name.to_string(),
        dtype: "u8".into(),
        shape,
        byte_offset: 0,
        byte_length: data.len() as u64,
        file,
    });
    Ok(())
}

fn write_blob_f32(
    dir: &Path,
    name: &str,
    data: &[f32],
    arrays: &mut Vec<ArrayDesc>,
    shape: Vec<usize>,
) -> Result<()> {
    let file = format!("{name}.bin");
    let path = dir.join(&file);
    let mut f = std::fs::File::create(&path)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    arrays.push(ArrayDesc {
        name: name.to_string(),
        dtype: "f32".into(),
        shape,
        byte_offset: 0,
        byte_length: bytes.len() as u64,
        file,
    });
    Ok(())
}

impl ShardManifest {
    /// Checks offsets, lengths, and shape/step-count consistency.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(TrimotError::Data(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let steps: usize = self.episodes.iter().map(|e| e.length).sum();
        for a in &self.arrays {
            let elem = match a.dtype.as_str() {
                "u8" => 1,
                "f32" => 4,
                other => {
                    return Err(TrimotError::Data(format!("unknown dtype {other}")));
                }
            };
            let count: usize = a.shape.iter().product();
            if count as u64 * elem != a.byte_length {
                return Err(TrimotError::Data(format!(
                    "array {} shape {:?} inconsistent with byte_length {}",
                    a.name, a.shape, a.byte_length
                )));
            }
            if a.shape.first() != Some(&steps) {
                return Err(TrimotError::Data(format!(
                    "array {} leading dim {:?} != step count {steps}",
                    a.name,
                    a.shape.first()
                )));
            }
        }
        // overlap check within each file
        let mut spans: Vec<(&str, u64, u64)> = self
            .arrays
            .iter()
            .map(|a| (a.file.as_str(), a.byte_offset, a.byte_offset + a.byte_length))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[0].0 == w[1].0 && w[0].2 > w[1].1 {
                return Err(TrimotError::Data(format!(
                    "overlapping arrays in {}",
                    w[0].0
                )));
            }
        }
        let mut starts: Vec<usize> = self.episodes.iter().map(|e| e.start_step).collect();
        starts.sort_unstable();
        let mut expect = 0;
        for (s, e) in starts.iter().zip(&self.episodes) {
            if *s != expect {
                return Err(TrimotError::Data("episode spans are not contiguous".into()));
            }
            expect += e.length;
        }
        Ok(())
    }
}

pub fn load_shard(dir: &Path) -> Result<Shard> {
    let path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&path)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    let manifest: ShardManifest = serde_json::from_str(&json)?;
    manifest.validate()?;
    let read = |name: &str| -> Result<Vec<u8>> {
        let a = manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| TrimotError::Data(format!("array {name} missing from manifest")))?;
        let p = dir.join(&a.file);
        let mut f =
            std::fs::File::open(&p).map_err(|e| TrimotError::io(p.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| TrimotError::io(p.display().to_string(), e))?;
        let (lo, hi) = (a.byte_offset as usize, (a.byte_offset + a.byte_length) as usize);
        if bytes.len() < hi {
            return Err(TrimotError::Data(format!("blob {} too short", a.file)));
        }
        Ok(bytes[lo..hi].to_vec())
    };
    let to_f32 = |bytes: Vec<u8>| -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    let steps: usize = manifest.episodes.iter().map(|e| e.length).sum();
    Ok(Shard {
        rgb: read("rgb")?,
        depth: to_f32(read("depth")?),
        proprio: to_f32(read("proprio")?),
        action: to_f32(read("action")?),
        manifest,
        steps,
    })
}

impl Shard {
    pub fn rgb_at(&self, step: usize) -> Array3<u8> {
        let n = IMG * IMG * 3;
        Array3::from_shape_vec((IMG, IMG, 3), self.rgb[step * n..(step + 1) * n].to_vec())
            .expect("rgb step")
    }

    pub fn depth_at(&self, step: usize) -> Array2<f64> {
        let n = IMG * IMG;
        let slice = &self.depth[step * n..(step + 1) * n];
        Array2::from_shape_vec((IMG, IMG), slice.iter().map(|&v| v as f64).collect())
            .expect("depth step")
    }

    pub fn proprio_at(&self, step: usize) -> [f64; 4] {
        let s = &self.proprio[step * 4..step * 4 + 4];
        [s[0] as f64, s[1] as f64, s[2] as f64, s[3] as f64]
    }

    pub fn action_at(&self, step: usize) -> [f64; 4] {
        let s = &self.action[step * 4..step * 4 + 4];
        [s[0] as f64, s[1] as f64, s[2] as f64, s[3] as f64]
    }
}

/// Assembles one training sample: chunk padded by repeating the last action
/// with an explicit pad count, normalization applied from `stats`.
pub fn load_sample(
    shard: &Shard,
    episode: usize,
    t: usize,
    k: usize,
    stats: &NormStats,
    vocab: &Vocabulary,
    text_len: usize,
) -> Result<TrainingSample> {
    let ep = shard
        .manifest
        .episodes
        .get(episode)
        .ok_or_else(|| TrimotError::Index(format!("episode {episode} out of range")))?;
    if t >= ep.length {
        return Err(TrimotError::Index(format!(
            "step {t} out of range for episode of length {}",
            ep.length
        )));
    }
    let tokens = crate::semantic::tokenize_instruction(&ep.instruction, vocab, text_len)?;
    let step = ep.start_step + t;
    let mut raw = Array2::zeros((k, 4));
    let mut pad_count = 0;
    for i in 0..k {
        let src = if t + i < ep.length {
            ep.start_step + t + i
        } else {
            pad_count += 1;
            ep.start_step + ep.length - 1
        };
        let a = shard.action_at(src);
        for d in 0..4 {
            raw[(i, d)] = a[d];
        }
    }
    let actions = crate::action::normalize(&raw, &stats.action)?;
    let p = shard.proprio_at(step);
    let p_row = Array2::from_shape_vec((1, 4), p.to_vec()).unwrap();
    let p_norm = crate::action::normalize(&p_row, &stats.proprio)?;
    Ok(TrainingSample {
        rgb: shard.rgb_at(step),
        depth_gt: shard.depth_at(step),
        tokens,
        proprio: p_norm.row(0).to_vec(),
        actions,
        pad_count,
    })
}

/// A loaded collection of shards with a flat (shard, episode, t) index.
pub struct DataSet {
    pub shards: Vec<Shard>,
    pub index: Vec<(usize, usize, usize)>,
    pub stats: NormStats,
}

impl DataSet {
    pub fn load(dirs: &[PathBuf]) -> Result<DataSet> {
        let mut shards = Vec::new();
        for d in dirs {
            shards.push(load_shard(d)?);
        }
        let stats = compute_norm_stats(&shards)?;
        let mut index = Vec::new();
        for (si, s) in shards.iter().enumerate() {
            for (ei, ep) in s.manifest.episodes.iter().enumerate() {
                for t in 0..ep.length {
                    index.push((si, ei, t));
                }
            }
        }
        Ok(DataSet {
            shards,
            index,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(
        &self,
        i: usize,
        k: usize,
        vocab: &Vocabulary,
        text_len: usize,
    ) -> Result<TrainingSample> {
        let (si, ei, t) = self.index[i];
        load_sample(&self.shards[si], ei, t, k, &self.stats, vocab, text_len)
    }
}
