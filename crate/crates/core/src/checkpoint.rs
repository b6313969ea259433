//! Versioned checkpoint container.
//!
//! Layout: `OWSLR1` magic, a length-prefixed `key = value` text block
//! (configs, epoch, optimizer step, RNG state), then keyed tensor
//! records until EOF. Each record is key string, shape header (count +
//! dims as 32-bit unsigned, little-endian), then the little-endian f32
//! payload. Reload restores parameters, optimizer moments, and the RNG
//! position bit-exactly.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::AdamState;
use crate::owdecoder::DecoderConfig;
use crate::trainer::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 6] = b"OWSLR1";

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);

    let text = config_block(trainer);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    for (key, tensor) in trainer.model.params() {
        push_record(&mut out, &key, &tensor.shape, &tensor.data);
    }
    let keys: Vec<String> = trainer.model.params().into_iter().map(|(k, _)| k).collect();
    for ((m, v), key) in trainer.opt.moments().zip(&keys) {
        push_record(&mut out, &format!("opt.{key}.m"), &[m.len()], m);
        push_record(&mut out, &format!("opt.{key}.v"), &[v.len()], v);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(6)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an OWSLR1 file)".into()));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let fields = parse_block(text)?;
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))
    };

    let bcfg = BackboneConfig {
        num_blocks: parse(get("num_blocks")?, "num_blocks")?,
        width: parse(get("width")?, "width")?,
        in_channels: parse(get("in_channels")?, "in_channels")?,
        residual_scale: parse(get("residual_scale")?, "residual_scale")?,
        global_skip: parse(get("global_skip")?, "global_skip")?,
    };
    let dcfg = DecoderConfig {
        m: parse(get("M")?, "M")?,
        depth: bcfg.width,
        mlp_hidden: parse_list(get("mlp_hidden")?, "mlp_hidden")?,
        out_channels: parse(get("out_channels")?, "out_channels")?,
        append_offset: parse(get("append_offset")?, "append_offset")?,
    };
    let tcfg = TrainConfig {
        epochs: parse(get("epochs")?, "epochs")?,
        batch_images: parse(get("batch_images")?, "batch_images")?,
        points_per_image: parse(get("points_per_image")?, "points_per_image")?,
        lr0: parse(get("lr0")?, "lr0")?,
        milestones: parse_list(get("milestones")?, "milestones")?,
        gamma: parse(get("gamma")?, "gamma")?,
        scale_range: (
            parse(get("scale_min")?, "scale_min")?,
            parse(get("scale_max")?, "scale_max")?,
        ),
        crop: parse(get("crop")?, "crop")?,
        seed: parse(get("seed")?, "seed")?,
    };
    let epoch: usize = parse(get("epoch")?, "epoch")?;
    let adam_t: u64 = parse(get("adam_t")?, "adam_t")?;

    let seed_hex = get("rng_seed")?;
    if seed_hex.len() != 64 || !seed_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Checkpoint("rng_seed must be 64 hex digits".into()));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex digits");
        seed[i] = u8::from_str_radix(s, 16).expect("validated hex");
    }
    let word_pos: u128 = parse(get("rng_word_pos")?, "rng_word_pos")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let mut model: Model<f32> = Model::init(&bcfg, &dcfg, 0)?;

    // index expected keys, then replay the records over them
    let mut pending: BTreeMap<String, Vec<usize>> = model
        .params()
        .into_iter()
        .map(|(k, t)| (k, t.shape.clone()))
        .collect();
    let mut opt_records: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    while !r.done() {
        let key_len = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(key_len)?)
            .map_err(|_| Error::Checkpoint("record key is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
        }
        if let Some(want_shape) = pending.remove(&key) {
            if want_shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{key}` has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            set_param(&mut model, &key, data);
        } else if key.starts_with("opt.") {
            opt_records.insert(key, data);
        } else {
            return Err(Error::Checkpoint(format!("unknown parameter key `{key}`")));
        }
    }
    if let Some(key) = pending.keys().next() {
        return Err(Error::Checkpoint(format!("missing parameter `{key}`")));
    }

    let mut opt = AdamState::new();
    if adam_t > 0 || !opt_records.is_empty() {
        let mut moments = Vec::new();
        for (key, tensor) in model.params() {
            let m = opt_records
                .remove(&format!("opt.{key}.m"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record for `{key}`")))?;
            let v = opt_records
                .remove(&format!("opt.{key}.v"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record for `{key}`")))?;
            if m.len() != tensor.numel() || v.len() != tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for `{key}` have wrong length"
                )));
            }
            moments.push((m, v));
        }
        if let Some(key) = opt_records.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter key `{key}`")));
        }
        opt.restore(adam_t, moments);
    }

    Ok(Trainer {
        model,
        opt,
        cfg: tcfg,
        rng,
        epoch,
    })
}

fn config_block(trainer: &Trainer) -> String {
    let b = &trainer.model.backbone.cfg;
    let d = &trainer.model.decoder.cfg;
    let t = &trainer.cfg;
    let mlp: Vec<String> = d.mlp_hidden.iter().map(|v| v.to_string()).collect();
    let milestones_text: Vec<String> = t.milestones.iter().map(|v| v.to_string()).collect();
    let seed_hex: String = trainer
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    format!(
        "num_blocks = {}\nwidth = {}\nin_channels = {}\nresidual_scale = {}\nglobal_skip = {}\n\
         M = {}\nmlp_hidden = {}\nout_channels = {}\nappend_offset = {}\n\
         epochs = {}\nbatch_images = {}\npoints_per_image = {}\nlr0 = {}\nmilestones = {}\n\
         gamma = {}\nscale_min = {}\nscale_max = {}\ncrop = {}\nseed = {}\n\
         epoch = {}\nadam_t = {}\nrng_seed = {}\nrng_word_pos = {}\n",
        b.num_blocks,
        b.width,
        b.in_channels,
        b.residual_scale,
        b.global_skip,
        d.m,
        mlp.join(","),
        d.out_channels,
        d.append_offset,
        t.epochs,
        t.batch_images,
        t.points_per_image,
        t.lr0,
        milestones_text.join(","),
        t.gamma,
        t.scale_range.0,
        t.scale_range.1,
        t.crop,
        t.seed,
        trainer.epoch,
        trainer.opt.t,
        seed_hex,
        trainer.rng.get_word_pos(),
    )
}

fn set_param(model: &mut Model<f32>, key: &str, data: Vec<f32>) {
    for (k, t) in model.params_mut() {
        if k == key {
            t.data = data;
            return;
        }
    }
    unreachable!("caller verified the key");
}

fn push_record(out: &mut Vec<u8>, key: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_block(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{line}`")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Checkpoint(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim(), key)).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::ImageBuffer;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn small_trainer(seed: u64) -> Trainer {
        let bcfg = BackboneConfig {
            num_blocks: 1,
            width: 4,
            in_channels: 1,
            residual_scale: 1.0,
            global_skip: true,
        };
        let dcfg = DecoderConfig {
            m: 4,
            depth: 4,
            mlp_hidden: vec![8],
            out_channels: 1,
            append_offset: false,
        };
        let tcfg = TrainConfig {
            epochs: 10,
            batch_images: 2,
            points_per_image: 8,
            lr0: 1e-3,
            milestones: vec![4, 7],
            gamma: 0.3,
            scale_range: (1.0, 2.0),
            crop: 12,
            seed,
        };
        Trainer::new(Model::init(&bcfg, &dcfg, seed).unwrap(), tcfg).unwrap()
    }

    fn some_images() -> Vec<ImageBuffer> {
        (0..3)
            .map(|i| {
                let t = Tensor::<f32>::uniform(&[144], 60 + i, 0.0, 1.0).unwrap();
                ImageBuffer::new(12, 12, 1, t.data).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_restores_state_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owslr");
        let mut trainer = small_trainer(9);
        let images = some_images();
        for _ in 0..2 {
            trainer.run_epoch(&images).unwrap();
        }
        save_checkpoint(&trainer, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.epoch, trainer.epoch);
        assert_eq!(loaded.opt.t, trainer.opt.t);
        assert_eq!(loaded.cfg, trainer.cfg);
        for ((ka, ta), (kb, tb)) in trainer.model.params().iter().zip(loaded.model.params()) {
            assert_eq!(ka, &kb);
            assert_eq!(ta.data, tb.data, "{ka}");
        }
        for ((ma, va), (mb, vb)) in trainer.opt.moments().zip(loaded.opt.moments()) {
            assert_eq!(ma, mb);
            assert_eq!(va, vb);
        }
        // the RNG stream continues from the same point
        assert_eq!(trainer.rng.gen::<u64>(), loaded.rng.gen::<u64>());

        // forward outputs are bit-identical
        let img = &images[0];
        let a = crate::trainer::infer_full(&trainer.model, img, 1.5).unwrap();
        let b = crate::trainer::infer_full(&loaded.model, img, 1.5).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owslr");
        let trainer = small_trainer(1);
        save_checkpoint(&trainer, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owslr");
        let trainer = small_trainer(2);
        save_checkpoint(&trainer, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_parameter_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owslr");
        let trainer = small_trainer(3);
        save_checkpoint(&trainer, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        push_record(&mut bytes, "backbone.bogus.weight", &[2], &[1.0, 2.0]);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("backbone.bogus.weight"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owslr");
        let trainer = small_trainer(4);
        // rebuild the file with one record's dims transposed
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        let text = config_block(&trainer);
        bytes.extend_from_slice(&(text.len() as u32).to_le_bytes());
        bytes.extend_from_slice(text.as_bytes());
        for (key, tensor) in trainer.model.params() {
            if key == "backbone.head.weight" {
                let mut shape = tensor.shape.clone();
                shape.reverse();
                push_record(&mut bytes, &key, &shape, &tensor.data);
            } else {
                push_record(&mut bytes, &key, &tensor.shape, &tensor.data);
            }
        }
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("backbone.head.weight"), "{err}");
        assert!(err.contains("shape"), "{err}");
    }
}
