//! Finite-difference verification of every differentiable operation and
//! of the end-to-end decode loss, run at f64.
//!
//! Each check builds small random instances, computes analytic gradients
//! through the tape, and compares them against central differences
//! (h = 1e-6) evaluated through forward-only rebuilds. The forward path
//! is shared, but the reverse pass under test never participates in the
//! difference quotient. Inputs near relu/L1 kinks are nudged away so the
//! quotient stays on one linear piece.

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::imageio::ImageBuffer;
use crate::model::Model;
use crate::numerics::{Graph, Tensor, Value};
use crate::owdecoder::DecoderConfig;
use crate::sampler::{CellGeometry, NormCoord, SemiLocalRegion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const DECODE_TOLERANCE: f64 = 1e-6;
pub const INSTANCES: usize = 20;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err.is_finite() && self.worst_rel_err <= self.tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random values kept away from zero so relu/L1 kinks stay outside the
/// difference window.
fn kink_safe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag: f64 = rng.gen_range(0.05..1.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            mag * sign
        })
        .collect()
}

/// Generic harness: `scalar` must rebuild the computation from plain
/// input tensors and return the scalar output value's handle.
fn check_op(
    name: &str,
    seed: u64,
    tolerance: f64,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    scalar: impl Fn(&mut Graph<f64>, &[Value]) -> Result<Value>,
) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64) << 8);
        let inputs = make_inputs(&mut rng);

        // analytic gradients
        let mut g = Graph::new();
        let handles: Vec<Value> = inputs
            .iter()
            .map(|t| g.leaf(&t.clone().with_grad()))
            .collect::<Result<_>>()?;
        let out = scalar(&mut g, &handles)?;
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = handles
            .iter()
            .map(|v| g.grad(*v).expect("tracked leaf").to_vec())
            .collect();

        // forward-only evaluation for the difference quotient
        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let handles: Vec<Value> = perturbed
                .iter()
                .map(|t| g.leaf(t).expect("finite input"))
                .collect();
            let out = scalar(&mut g, &handles).expect("same structure");
            g.value(out)[0]
        };
        for (ti, t) in inputs.iter().enumerate() {
            for j in 0..t.data.len() {
                let mut plus = inputs.clone();
                plus[ti].data[j] += FD_H;
                let mut minus = inputs.clone();
                minus[ti].data[j] -= FD_H;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                worst = worst.max(rel_err(analytic[ti][j], fd));
            }
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        instances: INSTANCES,
        worst_rel_err: worst,
        tolerance,
    })
}

fn check_elementwise(seed: u64) -> Result<Vec<CheckReport>> {
    let pair = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(2..12);
        vec![
            Tensor::from_vec(&[n], kink_safe(rng, n)).unwrap(),
            Tensor::from_vec(&[n], kink_safe(rng, n)).unwrap(),
        ]
    };
    let single = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(2..12);
        vec![Tensor::from_vec(&[n], kink_safe(rng, n)).unwrap()]
    };
    Ok(vec![
        check_op("add", seed ^ 1, OP_TOLERANCE, pair, |g, v| {
            let s = g.add(v[0], v[1])?;
            g.sum(s)
        })?,
        check_op("mul", seed ^ 2, OP_TOLERANCE, pair, |g, v| {
            let s = g.mul(v[0], v[1])?;
            g.sum(s)
        })?,
        check_op("relu", seed ^ 3, OP_TOLERANCE, single, |g, v| {
            let s = g.relu(v[0])?;
            g.sum(s)
        })?,
        check_op("scale", seed ^ 4, OP_TOLERANCE, single, |g, v| {
            let s = g.scale(v[0], 0.37)?;
            g.sum(s)
        })?,
        check_op("sum", seed ^ 5, OP_TOLERANCE, single, |g, v| g.sum(v[0]))?,
        check_op("mean", seed ^ 6, OP_TOLERANCE, single, |g, v| g.mean(v[0]))?,
    ])
}

fn check_matmul(seed: u64) -> Result<CheckReport> {
    check_op(
        "matmul",
        seed ^ 7,
        OP_TOLERANCE,
        |rng| {
            let (m, k, n) = (
                rng.gen_range(1..5),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            vec![
                Tensor::from_vec(&[m, k], kink_safe(rng, m * k)).unwrap(),
                Tensor::from_vec(&[k, n], kink_safe(rng, k * n)).unwrap(),
            ]
        },
        |g, v| {
            let s = g.matmul(v[0], v[1])?;
            g.sum(s)
        },
    )
}

fn check_conv2d(seed: u64) -> Result<CheckReport> {
    check_op(
        "conv2d",
        seed ^ 8,
        OP_TOLERANCE,
        |rng| {
            let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            vec![
                Tensor::from_vec(&[h, w, cin], kink_safe(rng, h * w * cin)).unwrap(),
                Tensor::from_vec(&[k, k, cin, cout], kink_safe(rng, k * k * cin * cout)).unwrap(),
            ]
        },
        |g, v| {
            let s = g.conv2d(v[0], v[1])?;
            g.sum(s)
        },
    )
}

fn check_bias_add(seed: u64) -> Result<CheckReport> {
    check_op(
        "bias_add",
        seed ^ 9,
        OP_TOLERANCE,
        |rng| {
            let (h, w, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
            vec![
                Tensor::from_vec(&[h, w, c], kink_safe(rng, h * w * c)).unwrap(),
                Tensor::from_vec(&[c], kink_safe(rng, c)).unwrap(),
            ]
        },
        |g, v| {
            let s = g.bias_add(v[0], v[1])?;
            g.sum(s)
        },
    )
}

fn check_l1(seed: u64) -> Result<CheckReport> {
    check_op(
        "l1_loss",
        seed ^ 10,
        OP_TOLERANCE,
        |rng| {
            // zero target keeps kink-safe predictions off the |.| kink
            let n = rng.gen_range(2..10);
            vec![Tensor::from_vec(&[n], kink_safe(rng, n)).unwrap()]
        },
        |g, v| {
            let n = g.shape(v[0])[0];
            let target = g.leaf(&Tensor::zeros(&[n])?)?;
            g.l1_loss(v[0], target)
        },
    )
}

fn check_gather_and_crop(seed: u64) -> Result<Vec<CheckReport>> {
    let grid = |rng: &mut ChaCha8Rng| {
        let (r, c, d) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..3));
        vec![Tensor::from_vec(&[r, c, d], kink_safe(rng, r * c * d)).unwrap()]
    };
    Ok(vec![
        check_op("gather_cells", seed ^ 11, OP_TOLERANCE, grid, |g, v| {
            let shape = g.shape(v[0]).to_vec();
            let cells = [
                (0, 0),
                (shape[0] - 1, shape[1] - 1),
                (0, shape[1] - 1),
                (0, 0),
            ];
            let s = g.gather_cells(v[0], &cells, 2)?;
            g.sum(s)
        })?,
        check_op("crop", seed ^ 12, OP_TOLERANCE, grid, |g, v| {
            let shape = g.shape(v[0]).to_vec();
            let s = g.crop(v[0], shape[0] - 2, shape[1] - 2, 2, 2)?;
            g.sum(s)
        })?,
        check_op("concat", seed ^ 13, OP_TOLERANCE, |rng| {
            let c = rng.gen_range(1..4);
            vec![
                Tensor::from_vec(&[1, c], kink_safe(rng, c)).unwrap(),
                Tensor::from_vec(&[1, c], kink_safe(rng, c)).unwrap(),
            ]
        }, |g, v| {
            let rows = g.concat(&[v[0], v[1]], 0)?;
            let cols = g.concat(&[v[0], v[1]], 1)?;
            let a = g.sum(rows)?;
            let b = g.sum(cols)?;
            let t = g.add(a, b)?;
            g.sum(t)
        })?,
    ])
}

/// Decoder decode loss (region -> L1) against finite differences over
/// every decoder parameter; the configuration pins M = 4, D = 3.
fn check_decode(seed: u64) -> Result<CheckReport> {
    let dcfg = DecoderConfig {
        m: 4,
        depth: 3,
        mlp_hidden: vec![8],
        out_channels: 1,
        append_offset: false,
    };
    let mut worst: f64 = 0.0;
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 14 ^ ((instance as u64) << 8));
        let dec = crate::owdecoder::OwDecoder::<f64>::init(&dcfg, rng.gen())?;
        let region_t = Tensor::from_vec(&[4, 4, 3], kink_safe(&mut rng, 48))?;
        let geometry = CellGeometry {
            cell_w: 0.125,
            cell_h: 0.125,
            rel_offset: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
        };
        let target = rng.gen_range(0.1f64..0.9);

        let mut g = Graph::<f64>::new();
        let mut leaves = Vec::new();
        let bound = dec.bind(&mut g, &mut leaves)?;
        let rv = g.leaf(&region_t)?;
        let out = bound.decode(&mut g, rv, &geometry)?;
        let tv = g.leaf(&Tensor::from_vec(&[1, 1], vec![target])?)?;
        let loss = g.l1_loss(out, tv)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

        let eval = |dec: &crate::owdecoder::OwDecoder<f64>| -> f64 {
            let region = SemiLocalRegion {
                values: region_t.clone(),
                geometry,
            };
            (dec.decode_region(&region).unwrap()[0] - target).abs()
        };
        for (pi, grads) in analytic.iter().enumerate() {
            for j in 0..grads.len() {
                let mut plus = dec.clone();
                plus.params_mut()[pi].1.data[j] += FD_H;
                let mut minus = dec.clone();
                minus.params_mut()[pi].1.data[j] -= FD_H;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                worst = worst.max(rel_err(grads[j], fd));
            }
        }
    }
    Ok(CheckReport {
        name: "decode".into(),
        instances: INSTANCES,
        worst_rel_err: worst,
        tolerance: DECODE_TOLERANCE,
    })
}

/// End-to-end: image -> backbone -> region gather -> decode -> L1, all
/// parameter gradients against finite differences on a 6x6 instance.
fn check_end_to_end(seed: u64) -> Result<CheckReport> {
    let bcfg = BackboneConfig {
        num_blocks: 1,
        width: 3,
        in_channels: 1,
        residual_scale: 1.0,
        global_skip: true,
    };
    let dcfg = DecoderConfig {
        m: 4,
        depth: 3,
        mlp_hidden: vec![6],
        out_channels: 1,
        append_offset: false,
    };
    let model = Model::<f64>::init(&bcfg, &dcfg, seed ^ 15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 16);
    let img_data: Vec<f32> = (0..36).map(|_| rng.gen_range(0.05f32..0.95)).collect();
    let img = ImageBuffer::new(6, 6, 1, img_data)?;
    let coord = NormCoord::new(0.47, 0.61)?;
    let target = 0.42;

    let mut g = Graph::<f64>::new();
    let mut leaves = Vec::new();
    let bound = model.bind(&mut g, &mut leaves)?;
    let input = g.leaf(&img.to_tensor())?;
    let psi = bound.backbone.forward(&mut g, input)?;
    let out = bound.decode_at(&mut g, psi, coord)?;
    let tv = g.leaf(&Tensor::from_vec(&[1, 1], vec![target])?)?;
    let loss = g.l1_loss(out, tv)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

    let eval = |model: &Model<f64>| -> f64 {
        let psi = model.backbone.extract_features(&img).unwrap();
        let region = crate::sampler::extract_region(coord, 4, &psi).unwrap();
        let out = model.decoder.decode_region(&region).unwrap();
        (out[0] - target).abs()
    };
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        // spot-check a handful of entries per tensor to stay fast
        let step = (grads.len() / 6).max(1);
        for j in (0..grads.len()).step_by(step) {
            let mut plus = model.clone();
            plus.params_mut()[pi].1.data[j] += FD_H;
            let mut minus = model.clone();
            minus.params_mut()[pi].1.data[j] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(grads[j], fd));
        }
    }
    Ok(CheckReport {
        name: "end_to_end".into(),
        instances: 1,
        worst_rel_err: worst,
        tolerance: DECODE_TOLERANCE,
    })
}

/// The full suite, in report order.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = check_elementwise(seed)?;
    reports.push(check_matmul(seed)?);
    reports.push(check_conv2d(seed)?);
    reports.push(check_bias_add(seed)?);
    reports.push(check_l1(seed)?);
    reports.extend(check_gather_and_crop(seed)?);
    reports.push(check_decode(seed)?);
    reports.push(check_end_to_end(seed)?);
    Ok(reports)
}
