use crate::config::ModelConfig;
use crate::decoder::{Decoder, StagePrediction};
use crate::encoder::{pad_image, Encoder, FeaturePyramid, QueryState};
use crate::error::Result;
use crate::nn::{Builder, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Encoder + decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Everything one forward pass records.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub init_queries: QueryState,
    pub m0: Var,
    pub stages: Vec<StagePrediction>,
}

impl ForwardOutput {
    pub fn last(&self) -> &StagePrediction {
        self.stages.last().expect("at least one stage")
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let root = Rng::seed(seed);
        let mut enc_rng = root.split(0);
        let encoder = Encoder::new(&config, &mut Builder::new(&mut params, &mut enc_rng));
        let mut dec_rng = root.split(1);
        let decoder = Decoder::new(&config, &mut Builder::new(&mut params, &mut dec_rng));
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the layer structure for `config` and installs `params`, which
    /// must contain exactly the same names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing parameter {name}")))?;
            let value = params.get(src);
            if value.shape() != model.params.get(id).shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    /// Full forward pass on a `[3, H, W]` image in `[0, 1]`.
    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<ForwardOutput> {
        let padded = pad_image(image)?;
        let x = s.constant(padded);
        let (pyramid, init_queries, m0) = self.encoder.forward(s, x)?;
        let stages = self.decoder.forward(s, &pyramid, init_queries, m0)?;
        Ok(ForwardOutput {
            pyramid,
            init_queries,
            m0,
            stages,
        })
    }
}
