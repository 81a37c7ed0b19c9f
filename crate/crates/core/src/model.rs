//! The full segmentation model: encoder with fusion blocks, feature pyramid and head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::clicks::{click_radius, encode_clicks, ClickState};
use crate::config::{ModelConfig, INPUT_CHANNELS};
use crate::encoder::{Encoder, TokenSet};
use crate::error::{contract, Result};
use crate::head::{MlpHead, SimpleFpn};
use crate::mst::{Mode, MstTrace, Scale};
use crate::params::{Bound, ParamStore};
use crate::raster::{Image, Plane};
use crate::sparse::{bilinear, SparseMatrix};
use crate::tensor::{Real, Tensor};

pub struct Forward<T> {
    pub logits: Var,
    pub tokens: TokenSet,
    pub traces: Vec<MstTrace<T>>,
}

/// Per-block record of which auxiliary tokens were selected, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSummary {
    pub block: usize,
    pub chosen: Scale,
    pub tiny: Vec<(usize, f64)>,
    pub large: Vec<(usize, f64)>,
}

impl SelectionSummary {
    pub fn for_scale(&self, scale: Scale) -> &[(usize, f64)] {
        match scale {
            Scale::Tiny => &self.tiny,
            Scale::Large => &self.large,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MstModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder<T>,
    fpn: SimpleFpn<T>,
    head: MlpHead,
    upsample: Arc<SparseMatrix<f64>>,
}

impl<T: Real> MstModel<T> {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config)?;
        let fpn = SimpleFpn::new(&mut params, &mut rng, &config)?;
        let head = MlpHead::new(&mut params, &mut rng, &config);
        let out = config.output_side();
        let side = config.image_size;
        Ok(Self {
            upsample: Arc::new(bilinear((out, out), (side, side), false)),
            config,
            params,
            encoder,
            fpn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Result<MstModel<U>> {
        let mut m = MstModel::<U>::new(self.config.clone(), 0)?;
        m.params.load(self.params.cast::<U>().tensors().to_vec())?;
        Ok(m)
    }

    /// `[6, W, W]` network input: centred RGB, click disks, previous mask.
    pub fn build_input(&self, image: &Image, state: &ClickState) -> Result<Tensor<T>> {
        let side = self.config.image_size;
        if image.width != side || image.height != side {
            return Err(contract(format!(
                "image is {}x{}, model expects {side}x{side}",
                image.width, image.height
            )));
        }
        if state.width != side || state.height != side {
            return Err(contract("click canvas does not match the model resolution"));
        }
        let plane = side * side;
        let clicks = encode_clicks::<T>(&state.clicks, side, side, click_radius(side))?;
        let mut data = Vec::with_capacity(INPUT_CHANNELS * plane);
        data.extend(image.data.iter().map(|&v| T::lit(v as f64 - 0.5)));
        data.extend_from_slice(clicks.data());
        data.extend(state.prev_mask.data.iter().map(|&v| T::lit(v as f64)));
        Tensor::new(&[INPUT_CHANNELS, side, side], data)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Image,
        state: &ClickState,
        mode: &mut Mode<'_>,
    ) -> Result<Forward<T>> {
        let input = self.build_input(image, state)?;
        self.forward_input(g, p, &input, &state.positive_points(), mode)
    }

    pub fn forward_input(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        positive_points: &[(f64, f64)],
        mode: &mut Mode<'_>,
    ) -> Result<Forward<T>> {
        let enc = self.encoder.encode(g, p, input, positive_points, mode)?;
        let features = self.fpn.forward(g, p, enc.tokens.base)?;
        let logits = self.head.forward(g, p, features)?;
        Ok(Forward {
            logits,
            tokens: enc.tokens,
            traces: enc.traces,
        })
    }

    /// Foreground probabilities at full resolution: `sigmoid(x_P)` bilinearly upsampled.
    pub fn probabilities(&self, logits: &Tensor<T>) -> Plane {
        let side = self.config.image_size;
        let probs: Vec<f64> = logits
            .data()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z.as_f64()).exp()))
            .collect();
        let data = (0..self.upsample.rows())
            .map(|r| {
                self.upsample
                    .row(r)
                    .iter()
                    .map(|&(c, w)| w * probs[c])
                    .sum::<f64>() as f32
            })
            .collect();
        Plane {
            width: side,
            height: side,
            data,
        }
    }

    /// Inference forward pass.
    pub fn predict(&self, image: &Image, state: &ClickState) -> Result<Plane> {
        Ok(self.predict_with_selection(image, state)?.0)
    }

    /// Inference forward pass that also reports the selected tokens of every fusion block.
    pub fn predict_with_selection(
        &self,
        image: &Image,
        state: &ClickState,
    ) -> Result<(Plane, Vec<SelectionSummary>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image, state, &mut Mode::Inference)?;
        let probs = self.probabilities(g.value(out.logits));
        let summaries = out
            .traces
            .iter()
            .zip(&self.encoder.mst)
            .map(|(t, (block, _))| {
                let pick = |s: Scale| {
                    let r = t.result(s);
                    r.indices
                        .iter()
                        .zip(&r.topk_scores)
                        .map(|(&i, &v)| (i, v.as_f64()))
                        .collect()
                };
                SelectionSummary {
                    block: *block,
                    chosen: t.chosen,
                    tiny: pick(Scale::Tiny),
                    large: pick(Scale::Large),
                }
            })
            .collect();
        Ok((probs, summaries))
    }
}
