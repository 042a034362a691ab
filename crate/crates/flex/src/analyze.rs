//! `FLEXATTN` attention dumps and the response reports built from them.
//!
//! Dump layout: magic, `u32` version, `u64` header length, JSON
//! [`AttnHeader`], then `heads × K × keys` little-endian `f32` weights.

use std::path::{Path, PathBuf};

use flex_core::analysis::{response_map, sorted_response_curve, token_responses, ResponseGrid, TokenResponse};
use flex_core::scene::{AttentionRecord, ImageSlot};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, read_preamble, write_file, write_preamble, Encoder};
use crate::error::{FlexError, Result};

pub const MAGIC: &[u8; 8] = b"FLEXATTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnHeader {
    pub clip_id: u64,
    pub heads: usize,
    pub k: usize,
    pub slots: Vec<ImageSlot>,
}

pub fn encode_attention(clip_id: u64, record: &AttentionRecord) -> Result<Vec<u8>> {
    let header = AttnHeader { clip_id, heads: record.heads, k: record.k, slots: record.slots.clone() };
    let mut e = Encoder::default();
    write_preamble(&mut e, MAGIC, VERSION, &header)?;
    e.f32s(&record.weights);
    Ok(e.buf)
}

pub fn decode_attention(path: &Path, bytes: &[u8]) -> Result<(u64, AttentionRecord)> {
    let (h, _, mut d): (AttnHeader, _, _) = read_preamble(path, bytes, MAGIC, VERSION)?;
    let keys: usize = h.slots.iter().map(|s| s.rows * s.cols).sum();
    let n = h.heads * h.k * keys;
    let weights = d.f32s(n).ok_or_else(|| FlexError::format(path, format!("expected {n} weights")))?;
    if d.remaining() != 0 {
        return Err(FlexError::format(path, format!("{} trailing bytes", d.remaining())));
    }
    Ok((h.clip_id, AttentionRecord { heads: h.heads, k: h.k, slots: h.slots, weights }))
}

pub fn dump_path(dir: &Path, clip_id: u64) -> PathBuf {
    dir.join(format!("clip{clip_id:06}.attn"))
}

pub fn write_attention(dir: &Path, clip_id: u64, record: &AttentionRecord) -> Result<PathBuf> {
    let path = dump_path(dir, clip_id);
    write_file(&path, &encode_attention(clip_id, record)?)?;
    Ok(path)
}

pub fn read_attention(path: &Path) -> Result<(u64, AttentionRecord)> {
    decode_attention(path, &read_file(path)?)
}

/// Dumps in `dir`, sorted by file name. A missing directory or an empty one
/// is an error naming the path.
pub fn read_attention_dir(dir: &Path) -> Result<Vec<(u64, AttentionRecord)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| FlexError::input(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "attn"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FlexError::input(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no .attn dumps")));
    }
    paths.iter().map(|p| read_attention(p)).collect()
}

/// Per-token mean of the maximal response over clips, with ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSummary {
    pub mean_max_response: Vec<f64>,
    pub rank: Vec<usize>,
    pub curve: Vec<f64>,
}

pub fn summarize(per_clip: &[Vec<TokenResponse>]) -> Result<ResponseSummary> {
    let curve = sorted_response_curve(per_clip)?;
    let k = per_clip[0].len();
    let mean: Vec<f64> = (0..k)
        .map(|t| per_clip.iter().map(|r| r[t].max_response).sum::<f64>() / per_clip.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &t) in order.iter().enumerate() {
        rank[t] = r;
    }
    Ok(ResponseSummary { mean_max_response: mean, rank, curve })
}

pub fn responses_csv(s: &ResponseSummary) -> String {
    let mut out = String::from("token_index,mean_max_response,rank\n");
    for (t, (m, r)) in s.mean_max_response.iter().zip(&s.rank).enumerate() {
        out.push_str(&format!("{t},{m},{r}\n"));
    }
    out
}

pub fn curve_csv(s: &ResponseSummary) -> String {
    let mut out = String::from("rank,mean_max_response\n");
    for (r, v) in s.curve.iter().enumerate() {
        out.push_str(&format!("{r},{v}\n"));
    }
    out
}

/// ASCII PGM of one grid, scaled so `scale` maps to 255.
pub fn pgm(grid: &ResponseGrid, scale: f64) -> String {
    let mut out = format!("P2\n{} {}\n255\n", grid.cols, grid.rows);
    for r in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols)
            .map(|c| {
                let v = if scale > 0.0 { grid.values[r * grid.cols + c] / scale } else { 0.0 };
                ((v.clamp(0.0, 1.0) * 255.0).round() as u32).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Files written by [`analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub responses: PathBuf,
    pub curve: PathBuf,
    pub maps: Vec<PathBuf>,
}

/// Writes `responses.csv`, `curve.csv` and, for the `top` highest-ranked
/// tokens, response maps of the first dump under `maps/`.
pub fn analyze(dumps: &[(u64, AttentionRecord)], out_dir: &Path, top: usize) -> Result<AnalysisOutput> {
    let per_clip: Vec<Vec<TokenResponse>> = dumps.iter().map(|(_, r)| token_responses(r)).collect::<std::result::Result<_, _>>()?;
    let summary = summarize(&per_clip)?;
    let responses = out_dir.join("responses.csv");
    write_file(&responses, responses_csv(&summary).as_bytes())?;
    let curve = out_dir.join("curve.csv");
    write_file(&curve, curve_csv(&summary).as_bytes())?;
    let (clip_id, record) = &dumps[0];
    let mut by_rank: Vec<usize> = (0..summary.rank.len()).collect();
    by_rank.sort_by_key(|&t| summary.rank[t]);
    let mut maps = Vec::new();
    for &token in by_rank.iter().take(top) {
        let grids = response_map(record, token)?;
        let scale = grids.iter().flat_map(|g| g.values.iter().copied()).fold(0.0, f64::max);
        for g in &grids {
            let path = out_dir.join("maps").join(format!(
                "clip{clip_id:06}_rank{}_token{token}_cam{}_t{}.pgm",
                summary.rank[token], g.camera, g.timestep
            ));
            write_file(&path, pgm(g, scale).as_bytes())?;
            maps.push(path);
        }
    }
    Ok(AnalysisOutput { responses, curve, maps })
}
