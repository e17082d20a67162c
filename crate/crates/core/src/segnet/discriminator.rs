use serde::{Deserialize, Serialize};

use super::layers::{Conv, Linear};
use super::params::{Initializer, ParamStore};
use super::SegnetError;
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub mlp_hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 128, 256],
            kernel: 4,
            stride: 2,
            mlp_hidden: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), SegnetError> {
        if self.conv_channels.len() != 5 {
            return Err(SegnetError::Config(format!(
                "discriminator needs exactly 5 conv stages, got {}",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.contains(&0) || self.mlp_hidden == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(SegnetError::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            pad: (self.kernel - 1) / 2,
        }
    }
}

/// Scores `(volume, sdm)` pairs: probability that the pair comes from labeled data.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv>,
    hidden: Linear,
    out: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self, SegnetError> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Initializer::new(seed);
        let geom = config.geometry();
        let mut cin = 2;
        let mut convs = Vec::new();
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv::new(&mut p, &mut init, &format!("conv{i}"), cin, c, geom, LEAKY_SLOPE));
            cin = c;
        }
        let hidden = Linear::new(&mut p, &mut init, "mlp.hidden", cin, config.mlp_hidden, LEAKY_SLOPE);
        let out = Linear::new(&mut p, &mut init, "mlp.out", config.mlp_hidden, 1, 1.0);
        Ok(Self {
            config,
            params: p,
            convs,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the last MLP layer so every output is exactly 0.5.
    pub fn zero_output_layers(&mut self) {
        self.params.get_mut(self.out.w).data_mut().fill(0.0);
        self.params.get_mut(self.out.b).data_mut().fill(0.0);
    }

    /// `x, s: [N, 1, D, H, W]` to probabilities `[N, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, s: Var) -> Result<Var, SegnetError> {
        let (xs, ss) = (g.value(x).shape().to_vec(), g.value(s).shape().to_vec());
        if xs.len() != 5 || xs[1] != 1 || xs != ss {
            return Err(SegnetError::PairShape(xs, ss));
        }
        assert_eq!(p.len(), self.params.len(), "parameter binding length");
        let mut h = g.concat_channels(x, s);
        for conv in &self.convs {
            h = conv.apply(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        let z = self.hidden.apply(g, p, pooled);
        let z = g.leaky_relu(z, LEAKY_SLOPE);
        let logit = self.out.apply(g, p, z);
        Ok(g.sigmoid(logit))
    }

    pub fn predict(&self, x: &Tensor, s: &Tensor) -> Result<Tensor, SegnetError> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let (xv, sv) = (g.constant(x.clone()), g.constant(s.clone()));
        let d = self.forward(&mut g, &p, xv, sv)?;
        Ok(g.value(d).clone())
    }
}
