//! On-disk layout of run outputs.
//!
//! A generation writes `output.png`, `metadata.json` and, when present,
//! `archive.sctc` (captured attention) and `stacks.sctc` (control masks and
//! bias maps). An ablation writes one such directory per mode plus
//! `manifest.json` and a labelled `grid.png`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::AttentionArchive;
use crate::bias::BiasStack;
use crate::container::{archive_to_container, stacks_to_container};
use crate::error::{Error, Result};
use crate::grid::{emit_grid, Layout, Tile};
use crate::image_io::heatmap;
use crate::mask::ControlScaleStack;
use crate::pipeline::{AblationManifest, AblationTable, GenerationResult};

pub const OUTPUT_PNG: &str = "output.png";
pub const METADATA_JSON: &str = "metadata.json";
pub const ARCHIVE_FILE: &str = "archive.sctc";
pub const STACKS_FILE: &str = "stacks.sctc";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const GRID_PNG: &str = "grid.png";

const HEATMAP_UPSCALE: usize = 4;
const TOKENS_PER_ROW: usize = 8;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes one run's artifacts into `dir`, returning the files created.
pub fn write_result(result: &GenerationResult, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let png = dir.join(OUTPUT_PNG);
    result.image.save_png(&png)?;
    written.push(png);
    if let Some(archive) = &result.archive {
        let path = dir.join(ARCHIVE_FILE);
        archive_to_container(archive)?.save(&path)?;
        written.push(path);
    }
    if result.control_stack.is_some() || result.bias_stack.is_some() {
        let path = dir.join(STACKS_FILE);
        stacks_to_container(result.control_stack.as_ref(), result.bias_stack.as_ref())?
            .save(&path)?;
        written.push(path);
    }
    let meta = dir.join(METADATA_JSON);
    write_json(&meta, &result.metadata)?;
    written.push(meta);
    Ok(written)
}

/// Writes every successful mode under `dir/<mode label>/`, then the
/// manifest and a comparison grid of the successful images.
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<AblationManifest> {
    create_dir(dir)?;
    for row in &table.rows {
        if let Ok(result) = &row.result {
            write_result(result, &dir.join(row.mode.to_string()))?;
        }
    }
    let manifest = table.manifest();
    write_json(&dir.join(MANIFEST_JSON), &manifest)?;
    let labels: Vec<String> = table.rows.iter().map(|r| r.mode.to_string()).collect();
    let tiles: Vec<Tile<'_>> = table
        .rows
        .iter()
        .zip(&labels)
        .filter_map(|(row, label)| {
            row.result.as_ref().ok().map(|r| Tile {
                image: &r.image,
                label,
            })
        })
        .collect();
    if !tiles.is_empty() {
        emit_grid(&tiles, Layout::Row)?.save_png(&dir.join(GRID_PNG))?;
    }
    Ok(manifest)
}

/// One sheet per archive entry: every non-excluded token's map, labelled by
/// index and scaled to the entry's maximum.
pub fn export_attention_heatmaps(
    archive: &AttentionArchive,
    tokens: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for (key, map) in archive.entries() {
        let res = archive.resolution(key.layer)?;
        let hi = map.data().iter().copied().fold(f32::MIN_POSITIVE, f32::max);
        let cols: Vec<usize> = if tokens.is_empty() {
            (0..map.cols()).collect()
        } else {
            tokens.to_vec()
        };
        let mut images = Vec::with_capacity(cols.len());
        let mut labels = Vec::with_capacity(cols.len());
        for &c in &cols {
            images.push(heatmap(&map.column(c, res)?, 0.0, hi, HEATMAP_UPSCALE));
            labels.push(format!("t{c}"));
        }
        let tiles: Vec<Tile<'_>> = images
            .iter()
            .zip(&labels)
            .map(|(image, label)| Tile { image, label })
            .collect();
        let path = dir.join(format!(
            "attn_s{:03}_{}_m{}.png",
            key.step, key.layer, key.module
        ));
        emit_grid(&tiles, Layout::Columns(TOKENS_PER_ROW))?.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Control masks on a fixed `[0, 1]` scale; bias maps scaled to their maximum.
pub fn export_stack_heatmaps(
    control: Option<&ControlScaleStack>,
    bias: Option<&BiasStack>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    if let Some(stack) = control {
        for (&(step, layer), g) in stack.masks() {
            let path = dir.join(format!("alpha_s{step:03}_{layer}.png"));
            heatmap(g, 0.0, 1.0, HEATMAP_UPSCALE).save_png(&path)?;
            written.push(path);
        }
    }
    if let Some(stack) = bias {
        for (key, g) in stack.biases() {
            let hi = g.max().max(f32::MIN_POSITIVE);
            let path = dir.join(format!(
                "beta_s{:03}_{}_m{}.png",
                key.step, key.layer, key.module
            ));
            heatmap(g, 0.0, hi, HEATMAP_UPSCALE).save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
