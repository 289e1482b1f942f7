//! Depth expert: patch encoder, linear log-depth head, and the
//! scale-invariant log loss.

use crate::config::ModelConfig;
use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real, Var};
use crate::mot::{positional_encoding, shared_attention_layer, StreamLayout};
use crate::params::ParamSet;
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Dense metric depth with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    pub values: Array2<T>,
    pub valid: Array2<bool>,
}

impl<T: Real> DepthMap<T> {
    pub fn all_valid(values: Array2<T>) -> Self {
        let valid = Array2::from_elem(values.dim(), true);
        DepthMap { values, valid }
    }
}

/// λ of the scale-invariant log loss; 0.5 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiLossConfig {
    pub lambda: f64,
}

impl Default for SiLossConfig {
    fn default() -> Self {
        SiLossConfig { lambda: 0.5 }
    }
}

impl SiLossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TrimotError::Config(format!(
                "lambda must lie in [0,1], got {lambda}"
            )));
        }
        Ok(SiLossConfig { lambda })
    }
}

/// sqrt( mean(y²) − λ·(mean y)² ) with y = log d̂ − log d, means over the
/// jointly valid pixels.
pub fn si_log_loss<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    cfg: SiLossConfig,
) -> Result<f64> {
    if pred.values.dim() != gt.values.dim() {
        return Err(TrimotError::Shape(format!(
            "depth shapes differ: {:?} vs {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for ((p, g), (vp, vg)) in pred
        .values
        .iter()
        .zip(gt.values.iter())
        .zip(pred.valid.iter().zip(gt.valid.iter()))
    {
        if !(*vp && *vg) {
            continue;
        }
        let (p, g) = (p.as_f64(), g.as_f64());
        if p <= 0.0 || g <= 0.0 {
            return Err(TrimotError::Domain(format!(
                "nonpositive depth under valid mask: pred {p}, gt {g}"
            )));
        }
        let y = p.ln() - g.ln();
        sum += y;
        sum_sq += y * y;
        n += 1;
    }
    if n == 0 {
        return Err(TrimotError::Eval("no jointly valid pixels".into()));
    }
    let nf = n as f64;
    let mean_sq = sum_sq / nf;
    let mean = sum / nf;
    let arg = (mean_sq - cfg.lambda * mean * mean).max(0.0);
    Ok(arg.sqrt())
}

/// Patch projection plus E self-attention layers over the depth tokens;
/// output enters the shared MoT stack as the depth stream.
pub fn depth_encode<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    patches: &Array2<T>,
) -> Result<Var> {
    if patches.dim() != (cfg.n_patches(), cfg.patch * cfg.patch * 3) {
        return Err(TrimotError::Shape(format!(
            "patch matrix {:?} does not match config",
            patches.dim()
        )));
    }
    let px = g.constant(patches.clone());
    let w = g.param(params, "depth.embed.patch.w");
    let b = g.param(params, "depth.embed.patch.b");
    let proj = g.matmul(px, w);
    let embedded = g.add_row(proj, b);
    let pos = g.constant(positional_encoding(cfg.n_depth(), cfg.depth_width)?);
    let mut tokens = g.add(embedded, pos);

    let layout = StreamLayout::with_optional(0, cfg.n_depth(), 0);
    let mask = Arc::new(Array2::from_elem((layout.total, layout.total), true));
    for i in 0..cfg.depth_enc_layers {
        let prefixes = [
            String::new(),
            format!("depth.enc.l{i}"),
            String::new(),
        ];
        let out = shared_attention_layer(
            g,
            params,
            cfg,
            &layout,
            &mask,
            &prefixes,
            &[None, Some(tokens), None],
        );
        tokens = out[1].expect("depth encoder stream");
    }
    Ok(tokens)
}

/// Linear head from final depth-stream tokens to per-patch log-depth.
pub fn depth_head<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, tokens: Var) -> Var {
    let w = g.param(params, "depth.head.w");
    let b = g.param(params, "depth.head.b");
    let proj = g.matmul(tokens, w);
    g.add_row(proj, b)
}

/// Rearranges an n_d × p² log-depth matrix into an H×W map and
/// exponentiates, so positivity is structural.
pub fn assemble_depth_map<T: Real>(log_depth: &Array2<T>, cfg: &ModelConfig) -> DepthMap<T> {
    let p = cfg.patch;
    let side = cfg.patches_per_side();
    assert_eq!(log_depth.dim(), (side * side, p * p));
    let mut values = Array2::zeros((cfg.image_size, cfg.image_size));
    for pr in 0..side {
        for pc in 0..side {
            let row = pr * side + pc;
            for i in 0..p {
                for j in 0..p {
                    values[(pr * p + i, pc * p + j)] = log_depth[(row, i * p + j)].exp();
                }
            }
        }
    }
    DepthMap::all_valid(values)
}

/// Graph node for L_si given predicted per-patch log-depth and a
/// ground-truth map (flattened to the same patch layout).
pub fn si_log_loss_node<T: Real>(
    g: &mut Graph<T>,
    pred_log: Var,
    gt: &DepthMap<T>,
    cfg: &ModelConfig,
    lambda: f64,
) -> Result<Var> {
    let p = cfg.patch;
    let side = cfg.patches_per_side();
    let (rows, cols) = g.value(pred_log).dim();
    if rows != side * side || cols != p * p {
        return Err(TrimotError::Shape(format!(
            "log-depth matrix {rows}×{cols} does not match patch grid"
        )));
    }
    // ground-truth log depth and validity, rearranged into patch rows
    let mut gt_log = Array2::zeros((side * side, p * p));
    let mut weight = Array2::zeros((side * side, p * p));
    let mut n = 0usize;
    for pr in 0..side {
        for pc in 0..side {
            let row = pr * side + pc;
            for i in 0..p {
                for j in 0..p {
                    let (y, x) = (pr * p + i, pc * p + j);
                    if gt.valid[(y, x)] {
                        let d = gt.values[(y, x)].as_f64();
                        if d <= 0.0 {
                            return Err(TrimotError::Domain(format!(
                                "nonpositive ground-truth depth {d} under valid mask"
                            )));
                        }
                        gt_log[(row, i * p + j)] = T::from_f64(d.ln());
                        weight[(row, i * p + j)] = T::one();
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(TrimotError::Eval("no valid ground-truth pixels".into()));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let gt_node = g.constant(gt_log);
    let y = g.sub(pred_log, gt_node);
    let weight = Arc::new(weight);
    let yw = g.mul_const(y, Arc::clone(&weight));
    let y_sq = g.mul(yw, y);
    let sum_sq = g.sum(y_sq);
    let mean_sq = g.scale(sum_sq, inv_n);
    let sum_y = g.sum(yw);
    let mean_y = g.scale(sum_y, inv_n);
    let mean_y_sq = g.mul(mean_y, mean_y);
    let scaled = g.scale(mean_y_sq, T::from_f64(-lambda));
    let arg = g.add(mean_sq, scaled);
    Ok(g.sqrt(arg))
}

const DEPTH_EXPORT_MIN: f64 = 0.1;
const DEPTH_EXPORT_MAX: f64 = 4.0;

fn quantize(d: f64, maxval: u32) -> u32 {
    let t = ((d - DEPTH_EXPORT_MIN) / (DEPTH_EXPORT_MAX - DEPTH_EXPORT_MIN)).clamp(0.0, 1.0);
    (t * maxval as f64).round() as u32
}

/// 16-bit binary PGM (P5, maxval 65535), depth mapped linearly from
/// [0.1 m, 4.0 m]. Sample values are big-endian per the Netpbm format.
pub fn write_pgm16<T: Real>(path: &Path, map: &DepthMap<T>) -> Result<()> {
    let (h, w) = map.values.dim();
    let mut out = Vec::with_capacity(h * w * 2 + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for v in map.values.iter() {
        let q = quantize(v.as_f64(), 65535) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_file(path, &out)
}

/// 8-bit fallback PGM with the same linear mapping.
pub fn write_pgm8<T: Real>(path: &Path, map: &DepthMap<T>) -> Result<()> {
    let (h, w) = map.values.dim();
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in map.values.iter() {
        out.push(quantize(v.as_f64(), 255) as u8);
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))
}

/// Parses a binary PGM written by this module back into metric depth
/// (quantized to the export resolution).
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    let header_err = || TrimotError::Data(format!("bad PGM header in {}", path.display()));
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let mut fields = text.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(header_err());
    }
    let w: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(header_err)?;
    let h: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(header_err)?;
    let maxval: u32 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(header_err)?;
    // header is three whitespace-separated fields after the magic, then one
    // whitespace byte before the raster
    let mut pos = 0;
    let mut seen = 0;
    let mut in_field = false;
    for (i, b) in bytes.iter().enumerate() {
        let ws = b.is_ascii_whitespace();
        if in_field && ws {
            seen += 1;
            in_field = false;
            if seen == 4 {
                pos = i + 1;
                break;
            }
        } else if !ws {
            in_field = true;
        }
    }
    let raster = &bytes[pos..];
    let mut values = Array2::zeros((h, w));
    let scale = (DEPTH_EXPORT_MAX - DEPTH_EXPORT_MIN) / maxval as f64;
    for i in 0..h * w {
        let q = if maxval > 255 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        };
        values[(i / w, i % w)] = DEPTH_EXPORT_MIN + q as f64 * scale;
    }
    Ok(values)
}
