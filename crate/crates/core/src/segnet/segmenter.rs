use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvBlock, UpConv, DOWN2, POINT, SAME3};
use super::params::{Initializer, ParamStore};
use super::SegnetError;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Resolution levels, counting the full-resolution one.
    pub levels: usize,
    pub norm: NormKind,
    pub activation: Activation,
    /// Without it the network is a plain single-head segmenter.
    pub sdm_head: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            levels: 3,
            norm: NormKind::Instance,
            activation: Activation::Relu,
            sdm_head: true,
        }
    }
}

impl SegmenterConfig {
    /// Five levels with 16 base channels, the usual full-size backbone.
    pub fn full_size() -> Self {
        Self {
            base_channels: 16,
            levels: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SegnetError> {
        if self.in_channels != 1 {
            return Err(SegnetError::Config(format!("in_channels must be 1, got {}", self.in_channels)));
        }
        if self.levels < 2 {
            return Err(SegnetError::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.base_channels < 4 {
            return Err(SegnetError::Config(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolution blocks per stage at `level`.
    pub fn blocks(&self, level: usize) -> usize {
        (level + 1).min(3)
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<(), SegnetError> {
        let k = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % k != 0) {
            return Err(SegnetError::IndivisibleInput { dims, divisor: k });
        }
        Ok(())
    }
}

/// Graph handles of one segmenter pass.
#[derive(Clone, Copy, Debug)]
pub struct SegmenterOutput {
    /// Foreground probability `[N, 1, D, H, W]`.
    pub prob: Var,
    /// Signed distance prediction `[N, 1, D, H, W]`, when the head exists.
    pub sdm: Option<Var>,
    /// Shared decoder features that both heads read.
    pub features: Var,
}

/// Encoder-decoder with additive skips and two heads over shared decoder features.
#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    params: ParamStore,
    encoder: Vec<Vec<ConvBlock>>,
    down: Vec<ConvBlock>,
    up: Vec<(UpConv, super::layers::Norm)>,
    decoder: Vec<Vec<ConvBlock>>,
    seg_head: Conv,
    sdm_block: Option<ConvBlock>,
    sdm_head: Option<Conv>,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self, SegnetError> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Initializer::new(seed);
        let levels = config.levels;
        let mut encoder = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            let c = config.channels(l);
            let mut stage = Vec::new();
            for b in 0..config.blocks(l) {
                let cin = if l == 0 && b == 0 { config.in_channels } else { c };
                stage.push(ConvBlock::new(&mut p, &mut init, &format!("enc{l}.{b}"), cin, c, SAME3));
            }
            encoder.push(stage);
            if l + 1 < levels {
                let next = config.channels(l + 1);
                down.push(ConvBlock::new(&mut p, &mut init, &format!("down{l}"), c, next, DOWN2));
            }
        }
        let mut up = Vec::with_capacity(levels - 1);
        let mut decoder = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let c = config.channels(l);
            let uc = UpConv::new(&mut p, &mut init, &format!("up{l}.conv"), config.channels(l + 1), c);
            let norm = super::layers::Norm::new(&mut p, &format!("up{l}.norm"), c);
            up.push((uc, norm));
            let stage = (0..config.blocks(l))
                .map(|b| ConvBlock::new(&mut p, &mut init, &format!("dec{l}.{b}"), c, c, SAME3))
                .collect();
            decoder.push(stage);
        }
        let c0 = config.channels(0);
        let seg_head = Conv::new(&mut p, &mut init, "seg_head", c0, 1, POINT, 1.0);
        let (sdm_block, sdm_head) = if config.sdm_head {
            let block = ConvBlock::new(&mut p, &mut init, "sdm_block", c0, c0, SAME3);
            let head = Conv::new(&mut p, &mut init, "sdm_head", c0, 1, POINT, 1.0);
            (Some(block), Some(head))
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            params: p,
            encoder,
            down,
            up,
            decoder,
            seg_head,
            sdm_block,
            sdm_head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the final 1x1x1 layers so that `prob = 0.5` and `sdm = 0` everywhere.
    pub fn zero_output_layers(&mut self) {
        let mut heads = vec![self.seg_head];
        heads.extend(self.sdm_head);
        for h in heads {
            self.params.get_mut(h.w).data_mut().fill(0.0);
            self.params.get_mut(h.b).data_mut().fill(0.0);
        }
    }

    /// Slots of parameters feeding both heads: everything except the head layers.
    pub fn shared_slots(&self) -> Vec<usize> {
        let mut own = vec![self.seg_head.w, self.seg_head.b];
        if let (Some(block), Some(head)) = (self.sdm_block, self.sdm_head) {
            own.extend([block.conv.w, block.conv.b, block.norm.gamma, block.norm.beta, head.w, head.b]);
        }
        (0..self.params.len()).filter(|s| !own.contains(s)).collect()
    }

    /// Builds the forward pass for `x: [N, 1, D, H, W]` with parameters bound as `p`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<SegmenterOutput, SegnetError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(SegnetError::InputShape(shape));
        }
        self.config.check_input([shape[2], shape[3], shape[4]])?;
        assert_eq!(p.len(), self.params.len(), "parameter binding length");

        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            for block in &self.encoder[l] {
                h = block.apply(g, p, h);
            }
            if l + 1 < levels {
                skips.push(h);
                h = self.down[l].apply(g, p, h);
            }
        }
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let (uc, norm) = &self.up[i];
            let u = uc.apply(g, p, h);
            let u = norm.apply(g, p, u);
            let u = g.relu(u);
            h = g.add(u, skips[l]);
            for block in &self.decoder[i] {
                h = block.apply(g, p, h);
            }
        }
        let features = h;
        let logits = self.seg_head.apply(g, p, features);
        let prob = g.sigmoid(logits);
        let sdm = match (self.sdm_block, self.sdm_head) {
            (Some(block), Some(head)) => {
                let s = block.apply(g, p, features);
                let s = head.apply(g, p, s);
                Some(g.tanh(s))
            }
            _ => None,
        };
        Ok(SegmenterOutput { prob, sdm, features })
    }

    /// Gradient-free inference. Returns `(prob, sdm)` tensors.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>), SegnetError> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        let prob = g.value(out.prob).clone();
        let sdm = out.sdm.map(|s| g.value(s).clone());
        Ok((prob, sdm))
    }
}
