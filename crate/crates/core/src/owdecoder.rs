//! Overlapping-window aggregation and MLP decode.
//!
//! The M x M semi-local region is shrunk one step at a time: at side
//! k+1, four k x k corner windows (TL, TR, BL, BR) are each multiplied
//! elementwise with a learned k x k x D weight tensor and summed, so
//! interior cells are covered by several windows at once. The chain runs
//! from side M down to M/2. A final 2 x 2 window is then chosen centered
//! on the query's sub-cell offset (top-left on ties) and decoded by a
//! small MLP into the output channels.
//!
//! Corner weights start at 1/4, making the untrained chain an unbiased
//! corner average: a constant region stays constant all the way through.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Value};
use crate::sampler::{CellGeometry, SemiLocalRegion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CORNER_NAMES: [&str; 4] = ["tl", "tr", "bl", "br"];

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Semi-local region side M (even, >= 4).
    pub m: usize,
    /// Latent depth D, matching the backbone width.
    pub depth: usize,
    pub mlp_hidden: Vec<usize>,
    pub out_channels: usize,
    /// Feed the query's sub-cell offset (dx, dy) to the MLP as two extra
    /// inputs. Off by default.
    pub append_offset: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 4 || self.m % 2 != 0 {
            return Err(Error::config("M", format!("must be even and >= 4, got {}", self.m)));
        }
        if self.depth < 1 {
            return Err(Error::config("width", "must be >= 1"));
        }
        if self.mlp_hidden.iter().any(|&w| w < 1) {
            return Err(Error::config("mlp_hidden", "layer widths must be >= 1"));
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return Err(Error::config("out_channels", "must be 1 or 3"));
        }
        Ok(())
    }

    /// Window sides visited by the shrink chain: M, M-1, ..., M/2.
    pub fn chain_sides(&self) -> Vec<usize> {
        (self.m / 2..=self.m).rev().collect()
    }

    fn mlp_input(&self) -> usize {
        4 * self.depth + if self.append_offset { 2 } else { 0 }
    }
}

/// Learned corner weights for one shrink step down to side `k`.
#[derive(Debug, Clone)]
pub struct WindowLevel<S: Scalar> {
    pub k: usize,
    /// TL, TR, BL, BR; each [k, k, D].
    pub corners: [Tensor<S>; 4],
}

#[derive(Debug, Clone)]
pub struct MlpLayer<S: Scalar> {
    /// [fan_in, fan_out]
    pub weight: Tensor<S>,
    /// [fan_out]
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct OwDecoder<S: Scalar> {
    pub cfg: DecoderConfig,
    /// One level per iteration, sides M-1 down to M/2.
    pub levels: Vec<WindowLevel<S>>,
    pub mlp: Vec<MlpLayer<S>>,
}

/// Tape handles for one forward pass of the decoder parameters.
pub struct BoundDecoder {
    cfg: DecoderConfig,
    levels: Vec<(usize, [Value; 4])>,
    mlp: Vec<(Value, Value)>,
}

impl<S: Scalar> OwDecoder<S> {
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter = S::from_f64(0.25);
        let d = cfg.depth;
        let levels = (cfg.m / 2..cfg.m)
            .rev()
            .map(|k| {
                let corner = || Tensor::constant(&[k, k, d], quarter).map(Tensor::with_grad);
                Ok(WindowLevel {
                    k,
                    corners: [corner()?, corner()?, corner()?, corner()?],
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut dims = vec![cfg.mlp_input()];
        dims.extend_from_slice(&cfg.mlp_hidden);
        dims.push(cfg.out_channels);
        let mlp = dims
            .windows(2)
            .map(|io| {
                let bound = S::from_f64(1.0 / (io[0] as f64).sqrt());
                Ok(MlpLayer {
                    weight: Tensor::uniform_from(&[io[0], io[1]], &mut rng, -bound, bound)?
                        .with_grad(),
                    bias: Tensor::uniform_from(&[io[1]], &mut rng, -bound, bound)?.with_grad(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OwDecoder {
            cfg: cfg.clone(),
            levels,
            mlp,
        })
    }

    /// Parameters in checkpoint order with their key paths.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        for level in &self.levels {
            for (name, t) in CORNER_NAMES.iter().zip(&level.corners) {
                out.push((format!("owd.win.{}.{name}", level.k), t));
            }
        }
        for (i, layer) in self.mlp.iter().enumerate() {
            out.push((format!("owd.mlp.{i}.weight"), &layer.weight));
            out.push((format!("owd.mlp.{i}.bias"), &layer.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for level in &mut self.levels {
            for (name, t) in CORNER_NAMES.iter().zip(&mut level.corners) {
                out.push((format!("owd.win.{}.{name}", level.k), t));
            }
        }
        for (i, layer) in self.mlp.iter_mut().enumerate() {
            out.push((format!("owd.mlp.{i}.weight"), &mut layer.weight));
            out.push((format!("owd.mlp.{i}.bias"), &mut layer.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a graph leaf, in checkpoint order.
    pub fn bind(&self, g: &mut Graph<S>, leaves: &mut Vec<Value>) -> Result<BoundDecoder> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let c = &level.corners;
            let vals = [g.leaf(&c[0])?, g.leaf(&c[1])?, g.leaf(&c[2])?, g.leaf(&c[3])?];
            leaves.extend_from_slice(&vals);
            levels.push((level.k, vals));
        }
        let mut mlp = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            let w = g.leaf(&layer.weight)?;
            let b = g.leaf(&layer.bias)?;
            leaves.push(w);
            leaves.push(b);
            mlp.push((w, b));
        }
        Ok(BoundDecoder {
            cfg: self.cfg.clone(),
            levels,
            mlp,
        })
    }

    /// Inference-path decode of one extracted region.
    pub fn decode_region(&self, region: &SemiLocalRegion<S>) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let mut leaves = Vec::new();
        let bound = self.bind(&mut g, &mut leaves)?;
        let value = g.leaf(&region.values)?;
        let out = bound.decode(&mut g, value, &region.geometry)?;
        Ok(g.value(out).to_vec())
    }
}

/// One shrink iteration: the four k x k corner windows of a (k+1)-sided
/// grid, each weighted elementwise and summed.
pub fn shrink_step<S: Scalar>(
    g: &mut Graph<S>,
    grid: Value,
    corners: &[Value; 4],
) -> Result<Value> {
    let shape = g.shape(grid).to_vec();
    let k = g.shape(corners[0])[0];
    if shape.len() != 3 || shape[0] != k + 1 || shape[1] != k + 1 {
        return Err(Error::shape("shrink_step", &[k + 1, k + 1, 0], &shape));
    }
    // corner order TL, TR, BL, BR
    let origins = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let mut acc: Option<Value> = None;
    for (w, (r0, c0)) in corners.iter().zip(origins) {
        let window = g.crop(grid, r0, c0, k, k)?;
        let weighted = g.mul(window, *w)?;
        acc = Some(match acc {
            None => weighted,
            Some(prev) => g.add(prev, weighted)?,
        });
    }
    Ok(acc.expect("four corners"))
}

/// Top-left origin of the 2 x 2 sub-window of an n x n grid whose center
/// is nearest the grid center displaced by (dx, dy) cell units. Ties
/// resolve toward the top-left.
pub fn final_window_origin(n: usize, rel_offset: (f64, f64)) -> (usize, usize) {
    debug_assert!(n >= 2);
    let pick = |delta: f64| -> usize {
        let target = (n as f64 - 1.0) / 2.0 + delta;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for origin in 0..=n - 2 {
            let d = (origin as f64 + 0.5 - target).abs();
            if d < best_d {
                best_d = d;
                best = origin;
            }
        }
        best
    };
    (pick(rel_offset.1), pick(rel_offset.0))
}

impl BoundDecoder {
    /// Full decode of a region value: shrink chain, centered final window,
    /// MLP readout. Output is a [1, out_channels] value, unclamped.
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        region: Value,
        geometry: &CellGeometry,
    ) -> Result<Value> {
        let shape = g.shape(region).to_vec();
        let (m, d) = (self.cfg.m, self.cfg.depth);
        if shape != [m, m, d] {
            return Err(Error::shape("decode region", &[m, m, d], &shape));
        }
        let mut grid = region;
        for (k, corners) in &self.levels {
            debug_assert_eq!(g.shape(grid)[0], k + 1);
            grid = shrink_step(g, grid, corners)?;
        }
        let n = m / 2;
        let (r0, c0) = final_window_origin(n, geometry.rel_offset);
        let window = g.crop(grid, r0, c0, 2, 2)?;
        let mut x = g.reshape(window, &[1, 4 * d])?;
        if self.cfg.append_offset {
            let off = Tensor::from_vec(
                &[1, 2],
                vec![
                    S::from_f64(geometry.rel_offset.0),
                    S::from_f64(geometry.rel_offset.1),
                ],
            )?;
            let off = g.leaf(&off)?;
            x = g.concat(&[x, off], 1)?;
        }
        let last = self.mlp.len() - 1;
        for (i, (w, b)) in self.mlp.iter().enumerate() {
            x = g.matmul(x, *w)?;
            x = g.bias_add(x, *b)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::CellGeometry;

    fn cfg(m: usize, d: usize) -> DecoderConfig {
        DecoderConfig {
            m,
            depth: d,
            mlp_hidden: vec![8],
            out_channels: 1,
            append_offset: false,
        }
    }

    fn centered_geometry() -> CellGeometry {
        CellGeometry {
            cell_w: 0.125,
            cell_h: 0.125,
            rel_offset: (0.0, 0.0),
        }
    }

    fn region_of(m: usize, d: usize, data: Vec<f64>) -> SemiLocalRegion<f64> {
        SemiLocalRegion {
            values: Tensor::from_vec(&[m, m, d], data).unwrap(),
            geometry: centered_geometry(),
        }
    }

    #[test]
    fn level_sizes_follow_the_chain() {
        let dec = OwDecoder::<f32>::init(&cfg(6, 16), 0).unwrap();
        let ks: Vec<usize> = dec.levels.iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![5, 4, 3]);
        assert!(dec.levels.iter().all(|l| l.corners.len() == 4));
        assert_eq!(cfg(6, 16).chain_sides(), vec![6, 5, 4, 3]);

        let dec = OwDecoder::<f32>::init(&cfg(4, 8), 0).unwrap();
        let ks: Vec<usize> = dec.levels.iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![3, 2]);
    }

    #[test]
    fn window_param_count_formula() {
        // 4 * D * sum_{k=M/2}^{M-1} k^2
        for (m, d) in [(4usize, 3usize), (6, 5)] {
            let dec = OwDecoder::<f32>::init(&cfg(m, d), 1).unwrap();
            let windows: usize = dec
                .levels
                .iter()
                .map(|l| l.corners.iter().map(|t| t.numel()).sum::<usize>())
                .sum();
            let want: usize = (m / 2..m).map(|k| 4 * d * k * k).sum();
            assert_eq!(windows, want);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(OwDecoder::<f32>::init(&cfg(5, 4), 0).is_err());
        assert!(OwDecoder::<f32>::init(&cfg(2, 4), 0).is_err());
        let mut bad = cfg(4, 4);
        bad.mlp_hidden = vec![0];
        assert!(OwDecoder::<f32>::init(&bad, 0).is_err());
    }

    #[test]
    fn shrink_step_hand_case() {
        // k=1: 2x2 grid (1,2,3,4), all weights 1/4 -> [2.5]
        let mut g = Graph::<f64>::new();
        let grid = g
            .leaf(&Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let w = Tensor::constant(&[1, 1, 1], 0.25).unwrap();
        let corners = [
            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
        ];
        let out = shrink_step(&mut g, grid, &corners).unwrap();
        assert_eq!(g.value(out), &[2.5]);
    }

    #[test]
    fn shrink_step_preserves_constants_at_init() {
        let mut g = Graph::<f64>::new();
        let grid = g
            .leaf(&Tensor::constant(&[4, 4, 2], 0.77).unwrap())
            .unwrap();
        let w = Tensor::constant(&[3, 3, 2], 0.25).unwrap();
        let corners = [

            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
            g.leaf(&w).unwrap(),
        ];
        let out = shrink_step(&mut g, grid, &corners).unwrap();
        assert!(g.value(out).iter().all(|&v| (v - 0.77).abs() < 1e-15));
    }

    #[test]
    fn indicator_weights_select_a_corner_bit_exact() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.13 - 0.4).collect();
        let grid_t = Tensor::from_vec(&[3, 3, 1], data).unwrap();
        let grid = g.leaf(&grid_t).unwrap();
        let ones = Tensor::constant(&[2, 2, 1], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2, 2, 1]).unwrap();
        let corners = [
            g.leaf(&ones).unwrap(),
            g.leaf(&zeros).unwrap(),
            g.leaf(&zeros).unwrap(),
            g.leaf(&zeros).unwrap(),
        ];
        let out = shrink_step(&mut g, grid, &corners).unwrap();
        let direct = g.crop(grid, 0, 0, 2, 2).unwrap();
        assert_eq!(g.value(out), g.value(direct));
    }

    #[test]
    fn final_window_origin_cases() {
        assert_eq!(final_window_origin(2, (0.3, -0.2)), (0, 0)); // only candidate
        assert_eq!(final_window_origin(3, (0.3, 0.3)), (1, 1)); // rows {1,2}
        assert_eq!(final_window_origin(3, (0.0, 0.0)), (0, 0)); // tie: top-left
        assert_eq!(final_window_origin(3, (-0.3, 0.3)), (1, 0));
    }

    #[test]
    fn decode_output_shape_contract() {
        for (m, d, out_c) in [(4usize, 3usize, 1usize), (6, 5, 3), (8, 2, 1)] {
            let mut c = cfg(m, d);
            c.out_channels = out_c;
            let dec = OwDecoder::<f32>::init(&c, 3).unwrap();
            let region = SemiLocalRegion {
                values: Tensor::uniform(&[m, m, d], 5, -1.0, 1.0).unwrap(),
                geometry: centered_geometry(),
            };
            let out = dec.decode_region(&region).unwrap();
            assert_eq!(out.len(), out_c);
        }
    }

    #[test]
    fn constant_region_with_averaging_readout_returns_the_constant() {
        // replace the MLP with one linear layer of weights 1/(4D), zero
        // bias; a constant region must pass through untouched
        for m in [4usize, 6, 8] {
            let d = 3;
            let mut c = cfg(m, d);
            c.mlp_hidden = vec![];
            let mut dec = OwDecoder::<f64>::init(&c, 0).unwrap();
            let fan_in = 4 * d;
            dec.mlp[0].weight =
                Tensor::constant(&[fan_in, 1], 1.0 / fan_in as f64).unwrap().with_grad();
            dec.mlp[0].bias = Tensor::zeros(&[1]).unwrap().with_grad();
            let value = 0.613;
            let region = region_of(m, d, vec![value; m * m * d]);
            let out = dec.decode_region(&region).unwrap();
            assert!((out[0] - value).abs() < 1e-5, "M={m}: {}", out[0]);
        }
    }

    #[test]
    fn repeated_corner_selection_equals_direct_slicing() {
        // all-TL indicator weights at every level: the chain must equal
        // taking the top-left (M/2)-sided sub-grid, bit-exact
        let m = 6;
        let d = 2;
        let mut dec = OwDecoder::<f64>::init(&cfg(m, d), 0).unwrap();
        for level in &mut dec.levels {
            level.corners[0] =
                Tensor::constant(&[level.k, level.k, d], 1.0).unwrap().with_grad();
            for c in 1..4 {
                level.corners[c] = Tensor::zeros(&[level.k, level.k, d]).unwrap().with_grad();
            }
        }
        let region_t = Tensor::uniform(&[m, m, d], 11, -2.0, 2.0).unwrap();
        let mut g = Graph::<f64>::new();
        let mut leaves = Vec::new();
        let bound = dec.bind(&mut g, &mut leaves).unwrap();
        let region = g.leaf(&region_t).unwrap();
        let mut grid = region;
        for (k, corners) in &bound.levels {
            let _ = k;
            grid = shrink_step(&mut g, grid, corners).unwrap();
        }
        let direct = g.crop(region, 0, 0, m / 2, m / 2).unwrap();
        assert_eq!(g.value(grid), g.value(direct));
    }

    #[test]
    fn decode_is_deterministic() {
        let dec = OwDecoder::<f32>::init(&cfg(4, 4), 9).unwrap();
        let region = SemiLocalRegion {
            values: Tensor::uniform(&[4, 4, 4], 2, 0.0, 1.0).unwrap(),
            geometry: centered_geometry(),
        };
        assert_eq!(
            dec.decode_region(&region).unwrap(),
            dec.decode_region(&region).unwrap()
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        // analytic grads (f32 and f64) vs central differences on the f64
        // model; loss = l1(decode(region), target)
        let config = cfg(4, 3);
        let dec32 = OwDecoder::<f32>::init(&config, 21).unwrap();
        let mut dec64 = OwDecoder::<f64>::init(&config, 21).unwrap();
        let promoted: Vec<Vec<f64>> = dec32
            .params()
            .iter()
            .map(|(_, t)| t.data.iter().map(|&v| v as f64).collect())
            .collect();
        for ((_, t), src) in dec64.params_mut().into_iter().zip(&promoted) {
            t.data = src.clone();
        }

        let region64 = Tensor::<f64>::uniform(&[4, 4, 3], 31, -1.0, 1.0).unwrap();
        let region32 = Tensor::<f32> {
            shape: region64.shape.clone(),
            data: region64.data.iter().map(|&v| v as f32).collect(),
            requires_grad: false,
            grad: None,
        };
        let geometry = CellGeometry {
            cell_w: 0.25,
            cell_h: 0.25,
            rel_offset: (0.2, -0.1),
        };
        let target64 = Tensor::<f64>::from_vec(&[1, 1], vec![0.35]).unwrap();
        let target32 = Tensor::<f32>::from_vec(&[1, 1], vec![0.35]).unwrap();

        let grads32 = {
            let mut g = Graph::<f32>::new();
            let mut leaves = Vec::new();
            let bound = dec32.bind(&mut g, &mut leaves).unwrap();
            let region = g.leaf(&region32).unwrap();
            let out = bound.decode(&mut g, region, &geometry).unwrap();
            let t = g.leaf(&target32).unwrap();
            let loss = g.l1_loss(out, t).unwrap();
            g.backward(loss).unwrap();
            leaves
                .iter()
                .map(|v| g.grad(*v).unwrap().to_vec())
                .collect::<Vec<_>>()
        };
        let grads64 = {
            let mut g = Graph::<f64>::new();
            let mut leaves = Vec::new();
            let bound = dec64.bind(&mut g, &mut leaves).unwrap();
            let region = g.leaf(&region64).unwrap();
            let out = bound.decode(&mut g, region, &geometry).unwrap();
            let t = g.leaf(&target64).unwrap();
            let loss = g.l1_loss(out, t).unwrap();
            g.backward(loss).unwrap();
            leaves
                .iter()
                .map(|v| g.grad(*v).unwrap().to_vec())
                .collect::<Vec<_>>()
        };

        let eval = |dec: &OwDecoder<f64>| -> f64 {
            let region = SemiLocalRegion {
                values: region64.clone(),
                geometry,
            };
            (dec.decode_region(&region).unwrap()[0] - 0.35).abs()
        };
        let h = 1e-6;
        let (mut worst32, mut worst64) = (0f64, 0f64);
        for (param_idx, g64) in grads64.iter().enumerate() {
            for j in 0..g64.len().min(6) {
                let mut plus = dec64.clone();
                plus.params_mut()[param_idx].1.data[j] += h;
                let mut minus = dec64.clone();
                minus.params_mut()[param_idx].1.data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a64 = g64[j];
                let a32 = grads32[param_idx][j] as f64;
                worst64 = worst64.max((a64 - fd).abs() / a64.abs().max(fd.abs()).max(1e-6));
                worst32 = worst32.max((a32 - fd).abs() / a32.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst64 <= 1e-6, "f64 worst rel err {worst64}");
        assert!(worst32 <= 1e-4, "f32 worst rel err {worst32}");
    }
}
