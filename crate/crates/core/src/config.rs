//! Plain-text run configuration: `key = value` lines, `#` comments,
//! preset defaults, file values, then flag overrides, in that order.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::owdecoder::DecoderConfig;
use crate::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Minutes-scale CPU defaults.
    Desk,
    /// The full-scale training recipe.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                backbone: BackboneConfig {
                    num_blocks: 4,
                    width: 16,
                    in_channels: 1,
                    residual_scale: 1.0,
                    global_skip: true,
                },
                decoder: DecoderConfig {
                    m: 4,
                    depth: 16,
                    mlp_hidden: vec![64, 64],
                    out_channels: 1,
                    append_offset: false,
                },
                train: TrainConfig {
                    epochs: 30,
                    batch_images: 4,
                    points_per_image: 256,
                    lr0: 2e-3,
                    milestones: vec![12, 18, 21],
                    gamma: 0.3,
                    scale_range: (1.0, 4.0),
                    crop: 48,
                    seed: 0,
                },
                train_dir: None,
                val_dir: None,
                checkpoint: None,
                output: None,
            },
            Preset::Paper => RunConfig {
                backbone: BackboneConfig {
                    num_blocks: 16,
                    width: 64,
                    in_channels: 3,
                    residual_scale: 1.0,
                    global_skip: true,
                },
                decoder: DecoderConfig {
                    m: 6,
                    depth: 64,
                    mlp_hidden: vec![256, 256, 256, 256],
                    out_channels: 3,
                    append_offset: false,
                },
                train: TrainConfig {
                    epochs: 100,
                    batch_images: 16,
                    points_per_image: 1500,
                    lr0: 1e-4,
                    milestones: vec![40, 60, 70],
                    gamma: 0.3,
                    scale_range: (1.0, 4.0),
                    crop: 48,
                    seed: 0,
                },
                train_dir: None,
                val_dir: None,
                checkpoint: None,
                output: None,
            },
        }
    }

    /// Applies one `key = value` entry; errors name the offending key.
    pub fn apply_entry(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_blocks" => self.backbone.num_blocks = parse(key, value)?,
            "width" => {
                self.backbone.width = parse(key, value)?;
                self.decoder.depth = self.backbone.width;
            }
            "in_channels" => self.backbone.in_channels = parse(key, value)?,
            "residual_scale" => self.backbone.residual_scale = parse(key, value)?,
            "global_skip" => self.backbone.global_skip = parse(key, value)?,
            "M" => self.decoder.m = parse(key, value)?,
            "mlp_hidden" => self.decoder.mlp_hidden = parse_list(key, value)?,
            "out_channels" => self.decoder.out_channels = parse(key, value)?,
            "append_offset" => self.decoder.append_offset = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_images" => self.train.batch_images = parse(key, value)?,
            "points_per_image" => self.train.points_per_image = parse(key, value)?,
            "lr0" => self.train.lr0 = parse(key, value)?,
            "milestones" => self.train.milestones = parse_list(key, value)?,
            "gamma" => self.train.gamma = parse(key, value)?,
            "scale_min" => self.train.scale_range.0 = parse(key, value)?,
            "scale_max" => self.train.scale_range.1 = parse(key, value)?,
            "crop" => self.train.crop = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "train_dir" => self.train_dir = Some(PathBuf::from(value)),
            "val_dir" => self.val_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            other => {
                return Err(Error::config(other, "unknown key"));
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (entry_key, entry_value) in entries(text)? {
            if entry_key == "preset" {
                continue; // handled by load()
            }
            self.apply_entry(&entry_key, &entry_value)?;
        }
        Ok(())
    }

    /// Full resolution order: preset defaults, file entries, overrides.
    /// A `preset = ...` line in the file replaces the flag-level preset.
    pub fn load(
        preset: Preset,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let text = match file {
            Some(path) => std::fs::read_to_string(path)?,
            None => String::new(),
        };
        let mut effective = preset;
        for (key, value) in entries(&text)? {
            if key == "preset" {
                effective = value.parse()?;
            }
        }
        let mut cfg = RunConfig::preset(effective);
        cfg.apply_text(&text)?;
        for (key, value) in overrides {
            cfg.apply_entry(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        if self.backbone.width != self.decoder.depth {
            return Err(Error::config(
                "width",
                "backbone width and decoder depth diverged",
            ));
        }
        Ok(())
    }

    /// The resolved configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let b = &self.backbone;
        let d = &self.decoder;
        let t = &self.train;
        let list = |xs: &[usize]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "num_blocks = {}", b.num_blocks);
        let _ = writeln!(s, "width = {}", b.width);
        let _ = writeln!(s, "in_channels = {}", b.in_channels);
        let _ = writeln!(s, "residual_scale = {}", b.residual_scale);
        let _ = writeln!(s, "global_skip = {}", b.global_skip);
        let _ = writeln!(s, "M = {}", d.m);
        let _ = writeln!(s, "mlp_hidden = {}", list(&d.mlp_hidden));
        let _ = writeln!(s, "out_channels = {}", d.out_channels);
        let _ = writeln!(s, "append_offset = {}", d.append_offset);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_images = {}", t.batch_images);
        let _ = writeln!(s, "points_per_image = {}", t.points_per_image);
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let _ = writeln!(s, "milestones = {}", list(&t.milestones));
        let _ = writeln!(s, "gamma = {}", t.gamma);
        let _ = writeln!(s, "scale_min = {}", t.scale_range.0);
        let _ = writeln!(s, "scale_max = {}", t.scale_range.1);
        let _ = writeln!(s, "crop = {}", t.crop);
        let _ = writeln!(s, "seed = {}", t.seed);
        for (key, path) in [
            ("train_dir", &self.train_dir),
            ("val_dir", &self.val_dir),
            ("checkpoint", &self.checkpoint),
            ("output", &self.output),
        ] {
            if let Some(p) = path {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        s
    }
}

/// Splits config text into (key, value) pairs; `#` starts a comment.
fn entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(line, "expected `key = value`")
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}
