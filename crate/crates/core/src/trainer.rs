//! Training recipe: random-scale pair synthesis, point sampling, the
//! L1/Adam loop with milestone learning-rate decay, and full-image
//! inference at any real-valued factor.

use crate::error::{Error, Result};
use crate::imageio::{bicubic_resize, ImageBuffer};
use crate::model::Model;
use crate::numerics::{AdamState, Graph, Tensor};
use crate::sampler::{extract_region, hr_to_norm, NormCoord};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_images: usize,
    pub points_per_image: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Downsampling factors are drawn uniformly from this closed range.
    pub scale_range: (f64, f64),
    /// HR crop side used for pair synthesis.
    pub crop: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_images < 1 {
            return Err(Error::config("batch_images", "must be >= 1"));
        }
        if self.points_per_image < 1 {
            return Err(Error::config("points_per_image", "must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::config("milestones", "must all be < epochs"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must be in (0, 1)"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("scale_range", "need 1 <= lo <= hi"));
        }
        if self.crop < (hi.ceil() as usize) * 2 {
            return Err(Error::config(
                "crop",
                format!("must be >= 2*ceil(scale_max) = {}", (hi.ceil() as usize) * 2),
            ));
        }
        Ok(())
    }
}

/// One synthesized training item: the LR rendering of an HR crop plus the
/// sampled query coordinates and their ground-truth values.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub lr_image: ImageBuffer,
    pub queries: Vec<(NormCoord, Vec<f32>)>,
    pub scale: f64,
}

/// Piecewise-constant milestone decay: lr0 * gamma^(#milestones <= epoch).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr0 * cfg.gamma.powi(drops as i32)
}

/// Synthesizes an LR/query pair from an HR crop. Query pixels are sampled
/// uniformly without replacement (with replacement once `n_points`
/// exceeds the pixel count); targets are the exact HR values.
pub fn make_pair(
    hr_crop: &ImageBuffer,
    scale: f64,
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainPair> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be >= 1")));
    }
    let (h, w) = (hr_crop.height, hr_crop.width);
    let min_side = (scale.ceil() as usize) * 2;
    if h < min_side || w < min_side {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} crop too small for scale {scale} (need {min_side})"
        )));
    }
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be >= 1".into()));
    }
    let lr_h = (h as f64 / scale).floor() as usize;
    let lr_w = (w as f64 / scale).floor() as usize;
    let lr_image = bicubic_resize(hr_crop, lr_h, lr_w)?;

    let total = h * w;
    let picks: Vec<usize> = if n_points <= total {
        rand::seq::index::sample(rng, total, n_points).into_vec()
    } else {
        (0..n_points).map(|_| rng.gen_range(0..total)).collect()
    };
    let queries = picks
        .into_iter()
        .map(|idx| {
            let (row, col) = (idx / w, idx % w);
            let coord = hr_to_norm(row, col, h, w)?;
            Ok((coord, hr_crop.pixel(row, col).to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainPair {
        lr_image,
        queries,
        scale,
    })
}

/// One optimization step over a batch: forward every query, mean L1 over
/// all sampled points, backward, Adam update. Returns the pre-step loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    batch: &[TrainPair],
    lr: f64,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let out_c = model.decoder.cfg.out_channels;
    for pair in batch {
        if pair.queries.is_empty() {
            return Err(Error::Train("pair with empty query list".into()));
        }
        if pair.queries.iter().any(|(_, t)| t.len() != out_c) {
            return Err(Error::Train(format!(
                "target channel count does not match out_channels {out_c}"
            )));
        }
    }

    let mut g = Graph::<f32>::new();
    let mut leaves = Vec::new();
    let bound = model.bind(&mut g, &mut leaves)?;
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for pair in batch {
        let input = g.leaf(&pair.lr_image.to_tensor())?;
        let psi = bound.backbone.forward(&mut g, input)?;
        for (coord, target) in &pair.queries {
            preds.push(bound.decode_at(&mut g, psi, *coord)?);
            targets.extend_from_slice(target);
        }
    }
    let pred = g.concat(&preds, 0)?;
    let target = g.leaf(&Tensor::from_vec(&[preds.len(), out_c], targets)?)?;
    let loss = g.l1_loss(pred, target)?;
    let loss_value = g.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::Train(format!("non-finite loss {loss_value}")));
    }
    g.backward(loss)?;
    model.apply_grads(&g, &leaves)?;
    opt.step(&mut model.params_mut(), lr as f32)?;
    Ok(loss_value)
}

/// Training-loop state: model, optimizer, RNG stream, epoch counter.
#[derive(Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            opt: AdamState::new(),
            cfg,
            rng,
            epoch: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.epoch, &self.cfg)
    }

    /// One pass over the image list in shuffled order; returns mean step loss.
    pub fn run_epoch(&mut self, images: &[ImageBuffer]) -> Result<f32> {
        if images.is_empty() {
            return Err(Error::Train("no training images".into()));
        }
        let lr = self.current_lr();
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_images) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let crop = random_crop(&images[idx], self.cfg.crop, &mut self.rng);
                let (lo, hi) = self.cfg.scale_range;
                let scale = if lo == hi {
                    lo
                } else {
                    self.rng.gen_range(lo..=hi)
                };
                batch.push(make_pair(
                    &crop,
                    scale,
                    self.cfg.points_per_image,
                    &mut self.rng,
                )?);
            }
            total += train_step(&mut self.model, &mut self.opt, &batch, lr)? as f64;
            steps += 1;
        }
        self.epoch += 1;
        Ok((total / steps as f64) as f32)
    }
}

/// Uniformly placed square crop; images smaller than the crop side are
/// used whole along that axis.
pub fn random_crop(img: &ImageBuffer, side: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let ch = side.min(img.height);
    let cw = side.min(img.width);
    if ch == img.height && cw == img.width {
        return img.clone();
    }
    let top = if img.height > ch {
        rng.gen_range(0..=img.height - ch)
    } else {
        0
    };
    let left = if img.width > cw {
        rng.gen_range(0..=img.width - cw)
    } else {
        0
    };
    let c = img.channels;
    let mut data = Vec::with_capacity(ch * cw * c);
    for r in 0..ch {
        let base = ((top + r) * img.width + left) * c;
        data.extend_from_slice(&img.data[base..base + cw * c]);
    }
    ImageBuffer::new(ch, cw, c, data).expect("crop of a valid image")
}

fn worker_count(rows: usize) -> usize {
    let default = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    std::env::var("OWSLR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(default)
        .min(rows)
        .max(1)
}

/// Upscales by any positive real factor: the feature map is computed
/// once, then every output pixel is decoded independently. Rows fan out
/// across workers (capped by OWSLR_THREADS); the result does not depend
/// on the worker count.
pub fn infer_full(model: &Model<f32>, lr_image: &ImageBuffer, scale: f64) -> Result<ImageBuffer> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale}")));
    }
    let out_h = (lr_image.height as f64 * scale).floor() as usize;
    let out_w = (lr_image.width as f64 * scale).floor() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} yields degenerate {out_h}x{out_w} output"
        )));
    }
    let psi = model.backbone.extract_features(lr_image)?;
    let decoder = &model.decoder;
    let (m, out_c) = (decoder.cfg.m, decoder.cfg.out_channels);

    let mut out = vec![0f32; out_h * out_w * out_c];
    let workers = worker_count(out_h);
    let rows_per_band = out_h.div_ceil(workers);
    let band_len = rows_per_band * out_w * out_c;

    std::thread::scope(|s| -> Result<()> {
        let mut handles = Vec::new();
        for (band_idx, band) in out.chunks_mut(band_len).enumerate() {
            let psi = &psi;
            let handle = s.spawn(move || -> Result<()> {
                let row0 = band_idx * rows_per_band;
                let rows = band.len() / (out_w * out_c);
                for r in 0..rows {
                    let mut g = Graph::<f32>::new();
                    let mut leaves = Vec::new();
                    let bound = decoder.bind(&mut g, &mut leaves)?;
                    for cidx in 0..out_w {
                        let coord = hr_to_norm(row0 + r, cidx, out_h, out_w)?;
                        let region = extract_region(coord, m, psi)?;
                        let rv = g.leaf(&region.values)?;
                        let decoded = bound.decode(&mut g, rv, &region.geometry)?;
                        let vals = g.value(decoded);
                        band[(r * out_w + cidx) * out_c..(r * out_w + cidx + 1) * out_c]
                            .copy_from_slice(vals);
                    }
                }
                Ok(())
            });
            handles.push(handle);
        }
        for h in handles {
            h.join().expect("inference worker panicked")?;
        }
        Ok(())
    })?;
    ImageBuffer::from_values_clamped(out_h, out_w, out_c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::owdecoder::DecoderConfig;

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_images: 4,
            points_per_image: 32,
            lr0: 1e-3,
            milestones: vec![12, 18, 21],
            gamma: 0.3,
            scale_range: (1.0, 2.0),
            crop: 16,
            seed: 5,
        }
    }

    fn paper_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            batch_images: 16,
            points_per_image: 1500,
            lr0: 1e-4,
            milestones: vec![40, 60, 70],
            gamma: 0.3,
            scale_range: (1.0, 4.0),
            crop: 48,
            seed: 0,
        }
    }

    fn tiny_model(m: usize, d: usize) -> Model<f32> {
        Model::init(
            &BackboneConfig {
                num_blocks: 1,
                width: d,
                in_channels: 1,
                residual_scale: 1.0,
                global_skip: true,
            },
            &DecoderConfig {
                m,
                depth: d,
                mlp_hidden: vec![8],
                out_channels: 1,
                append_offset: false,
            },
            3,
        )
        .unwrap()
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let t = Tensor::<f32>::uniform(&[h * w], seed, 0.0, 1.0).unwrap();
        ImageBuffer::new(h, w, 1, t.data).unwrap()
    }

    #[test]
    fn schedule_matches_paper_milestones() {
        let cfg = paper_cfg();
        // bit-exact against the defining expression lr0 * gamma^k
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(39, &cfg), 1e-4);
        assert_eq!(lr_schedule(40, &cfg), 1e-4 * 0.3f64.powi(1));
        assert_eq!(lr_schedule(45, &cfg), 1e-4 * 0.3f64.powi(1));
        assert_eq!(lr_schedule(60, &cfg), 1e-4 * 0.3f64.powi(2));
        assert_eq!(lr_schedule(75, &cfg), 1e-4 * 0.3f64.powi(3));
        // and within float-literal rounding of the decimal values
        assert!((lr_schedule(45, &cfg) - 3e-5).abs() < 1e-18);
        assert!((lr_schedule(60, &cfg) - 9e-6).abs() < 1e-18);
        assert!((lr_schedule(75, &cfg) - 2.7e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_with_exactly_three_drops() {
        let cfg = paper_cfg();
        let mut drops = 0;
        let mut prev = lr_schedule(0, &cfg);
        for e in 1..cfg.epochs {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= prev);
            if lr < prev {
                drops += 1;
            }
            prev = lr;
        }
        assert_eq!(drops, cfg.milestones.len());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = desk_cfg();
        c.milestones = vec![5, 5];
        assert!(c.validate().is_err());
        let mut c = desk_cfg();
        c.milestones = vec![40];
        assert!(c.validate().is_err()); // >= epochs
        let mut c = desk_cfg();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = desk_cfg();
        c.scale_range = (0.5, 2.0);
        assert!(c.validate().is_err());
        let mut c = desk_cfg();
        c.crop = 3;
        assert!(c.validate().is_err());
        assert!(desk_cfg().validate().is_ok());
        assert!(paper_cfg().validate().is_ok());
    }

    #[test]
    fn make_pair_floor_rule_and_identity_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hr = rand_image(2, 48, 48);
        let pair = make_pair(&hr, 2.0, 10, &mut rng).unwrap();
        assert_eq!((pair.lr_image.height, pair.lr_image.width), (24, 24));

        let pair = make_pair(&hr, 1.0, 10, &mut rng).unwrap();
        assert_eq!(pair.lr_image.data, hr.data); // same-size resize is exact
    }

    #[test]
    fn make_pair_targets_are_exact_source_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hr = rand_image(3, 16, 16);
        let pair = make_pair(&hr, 2.0, 40, &mut rng).unwrap();
        for (coord, target) in &pair.queries {
            let row = (coord.y * 16.0 - 0.5).round() as usize;
            let col = (coord.x * 16.0 - 0.5).round() as usize;
            assert_eq!(target.as_slice(), hr.pixel(row, col));
        }
    }

    #[test]
    fn make_pair_is_reproducible_and_distinct() {
        let hr = rand_image(4, 8, 8);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            make_pair(&hr, 1.0, 4, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.queries.len(), 4);
        let coords: Vec<_> = a.queries.iter().map(|(c, _)| (c.x, c.y)).collect();
        let mut dedup = coords.clone();
        dedup.sort_by(|p, q| p.partial_cmp(q).unwrap());
        dedup.dedup();
        assert_eq!(dedup.len(), 4); // sampled without replacement
        for (qa, qb) in a.queries.iter().zip(&b.queries) {
            assert_eq!(qa, qb);
        }
    }

    #[test]
    fn make_pair_rejects_undersized_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hr = rand_image(5, 6, 6);
        assert!(make_pair(&hr, 4.0, 4, &mut rng).is_err());
    }

    #[test]
    fn train_step_loss_matches_forward_only_oracle() {
        let mut model = tiny_model(4, 4);
        let mut opt = AdamState::new();
        let gray = ImageBuffer::new(8, 8, 1, vec![0.5; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = make_pair(&gray, 1.0, 10, &mut rng).unwrap();

        // independent forward-only evaluation with the pre-step weights
        let psi = model.backbone.extract_features(&gray).unwrap();
        let mut acc = 0f32;
        for (coord, target) in &pair.queries {
            let region = extract_region(*coord, 4, &psi).unwrap();
            let out = model.decoder.decode_region(&region).unwrap();
            for (o, t) in out.iter().zip(target) {
                acc += (o - t).abs();
            }
        }
        let oracle = acc / pair.queries.len() as f32;

        let loss = train_step(&mut model, &mut opt, &[pair], 1e-3).unwrap();
        assert!((loss - oracle).abs() <= 1e-6, "{loss} vs {oracle}");
    }

    #[test]
    fn two_steps_decrease_loss_for_most_seeds() {
        let mut decreases = 0;
        let trials = 20;
        for seed in 0..trials {
            let mut model = tiny_model(4, 4);
            let mut opt = AdamState::new();
            let hr = rand_image(100 + seed, 12, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = make_pair(&hr, 1.0, 24, &mut rng).unwrap();
            let l1 = train_step(&mut model, &mut opt, &[pair.clone()], 1e-3).unwrap();
            let l2 = train_step(&mut model, &mut opt, &[pair], 1e-3).unwrap();
            if l2 < l1 {
                decreases += 1;
            }
        }
        assert!(decreases * 100 >= trials * 95, "{decreases}/{trials}");
    }

    #[test]
    fn degenerate_batches_rejected() {
        let mut model = tiny_model(4, 4);
        let mut opt = AdamState::new();
        assert!(train_step(&mut model, &mut opt, &[], 1e-3).is_err());
        let pair = TrainPair {
            lr_image: rand_image(1, 8, 8),
            queries: vec![],
            scale: 1.0,
        };
        assert!(train_step(&mut model, &mut opt, &[pair], 1e-3).is_err());
    }

    #[test]
    fn infer_full_output_dims_follow_floor_rule() {
        let model = tiny_model(4, 4);
        let img = rand_image(6, 24, 24);
        let out = infer_full(&model, &img, 2.4).unwrap();
        assert_eq!((out.height, out.width), (57, 57));
        let out = infer_full(&model, &img, 1.0).unwrap();
        assert_eq!((out.height, out.width), (24, 24));
        assert!(infer_full(&model, &img, 0.01).is_err());
    }

    #[test]
    fn inference_does_not_depend_on_worker_count() {
        let model = tiny_model(4, 4);
        let img = rand_image(8, 12, 12);
        std::env::set_var("OWSLR_THREADS", "1");
        let a = infer_full(&model, &img, 1.7).unwrap();
        std::env::set_var("OWSLR_THREADS", "3");
        let b = infer_full(&model, &img, 1.7).unwrap();
        std::env::remove_var("OWSLR_THREADS");
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn fixed_seed_gives_identical_loss_trace() {
        let images: Vec<ImageBuffer> = (0..6).map(|i| rand_image(50 + i, 16, 16)).collect();
        let run = || {
            let mut trainer = Trainer::new(tiny_model(4, 4), desk_cfg()).unwrap();
            (0..3)
                .map(|_| trainer.run_epoch(&images).unwrap())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }
}
