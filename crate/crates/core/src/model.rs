//! The full pipeline model: backbone encoder plus overlapping-window
//! decoder, with a single parameter namespace for the optimizer and
//! checkpoints.

use crate::backbone::{Backbone, BackboneConfig, BoundBackbone};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Value};
use crate::owdecoder::{BoundDecoder, DecoderConfig, OwDecoder};
use crate::sampler::{extract_region_on_graph, NormCoord};

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub backbone: Backbone<S>,
    pub decoder: OwDecoder<S>,
}

/// Tape handles for one forward pass of every model parameter.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub decoder: BoundDecoder,
    m: usize,
}

impl<S: Scalar> Model<S> {
    /// Builds both halves from one seed. The decoder depth must equal the
    /// backbone width; this is the one cross-config consistency rule.
    pub fn init(bcfg: &BackboneConfig, dcfg: &DecoderConfig, seed: u64) -> Result<Self> {
        if bcfg.width != dcfg.depth {
            return Err(Error::config(
                "width",
                format!(
                    "backbone width {} != decoder depth {}",
                    bcfg.width, dcfg.depth
                ),
            ));
        }
        Ok(Model {
            backbone: Backbone::init(bcfg, seed)?,
            decoder: OwDecoder::init(dcfg, seed.wrapping_add(1))?,
        })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.backbone.params();
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.backbone.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.decoder.param_count()
    }

    /// Records all parameters as leaves; `leaves` ends up in params order.
    pub fn bind(&self, g: &mut Graph<S>, leaves: &mut Vec<Value>) -> Result<BoundModel> {
        let backbone = self.backbone.bind(g, leaves)?;
        let decoder = self.decoder.bind(g, leaves)?;
        Ok(BoundModel {
            backbone,
            decoder,
            m: self.decoder.cfg.m,
        })
    }

    /// Pulls gradients of a completed backward pass into the parameter
    /// tensors; `leaves` must come from `bind` on the same graph.
    pub fn apply_grads(&mut self, g: &Graph<S>, leaves: &[Value]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != leaves.len() {
            return Err(Error::InvalidArgument(format!(
                "{} leaves for {} params",
                leaves.len(),
                params.len()
            )));
        }
        for ((name, param), leaf) in params.iter_mut().zip(leaves) {
            match g.grad(*leaf) {
                Some(grad) => param.accumulate_grad(grad)?,
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        Ok(())
    }
}

impl BoundModel {
    /// Decodes one query against an already-computed feature-map value.
    pub fn decode_at<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        psi: Value,
        coord: NormCoord,
    ) -> Result<Value> {
        let (region, geometry) = extract_region_on_graph(g, coord, self.m, psi)?;
        self.decoder.decode(g, region, &geometry)
    }
}
