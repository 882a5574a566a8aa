use std::fs;
use std::path::{Path, PathBuf};

use super::RenderConfig;
use crate::corpus::{write_manifest, ManifestRecord, MANIFEST};
use crate::error::{Error, Result};

fn record_id(index: usize) -> String {
    format!("{index:06}")
}

fn render_all<'a>(
    items: impl Iterator<Item = (&'a str, Option<&'a str>)>,
    cfg: &RenderConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    cfg.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::new();
    for (i, (source, target)) in items.enumerate() {
        let id = record_id(i);
        let spec = cfg.sample_spec(seed.wrapping_add(i as u64));
        let img = cfg.render(source, &spec).map_err(|e| Error::record(&id, e.to_string()))?;
        let rel = format!("images/{id}.png");
        img.save_png(&out_dir.join(&rel))?;
        records.push(ManifestRecord {
            id,
            image_path: Some(rel),
            source: Some(source.to_string()),
            target: target.map(str::to_string),
            render: Some(spec),
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to synthesize".into()));
    }
    let path = out_dir.join(MANIFEST);
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Renders each source sentence; records keep both source and target text.
pub fn synth_tit_dataset(
    pairs: &[(String, String)],
    cfg: &RenderConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    render_all(
        pairs.iter().map(|(s, t)| (s.as_str(), Some(t.as_str()))),
        cfg,
        out_dir,
        seed,
    )
}

pub fn synth_ocr_dataset<S: AsRef<str>>(
    texts: &[S],
    cfg: &RenderConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    render_all(texts.iter().map(|s| (s.as_ref(), None)), cfg, out_dir, seed)
}

/// Text-only parallel manifest.
pub fn synth_mt_dataset(pairs: &[(String, String)], out_dir: &Path) -> Result<PathBuf> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to synthesize".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<_> = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| ManifestRecord {
            id: record_id(i),
            image_path: None,
            source: Some(s.clone()),
            target: Some(t.clone()),
            render: None,
        })
        .collect();
    let path = out_dir.join(MANIFEST);
    write_manifest(&path, &records)?;
    Ok(path)
}
