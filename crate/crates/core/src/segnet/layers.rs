use super::params::{Initializer, ParamStore};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

pub(crate) const SAME3: ConvGeometry = ConvGeometry {
    kernel: 3,
    stride: 1,
    pad: 1,
};
pub(crate) const DOWN2: ConvGeometry = ConvGeometry {
    kernel: 2,
    stride: 2,
    pad: 0,
};
pub(crate) const POINT: ConvGeometry = ConvGeometry {
    kernel: 1,
    stride: 1,
    pad: 0,
};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub geom: ConvGeometry,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        slope: f32,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = cin * k * k * k;
        let w = store.push(format!("{name}.weight"), init.kaiming(&[cout, cin, k, k, k], fan_in, slope));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, geom }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.conv3d(x, p[self.w], p[self.b], self.geom)
    }
}

/// Stride-2 transposed convolution with a 2-voxel kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpConv {
    pub w: usize,
    pub b: usize,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.push(format!("{name}.weight"), init.kaiming(&[cin, cout, 2, 2, 2], cin, 0.0));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.up_conv2(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.instance_norm(x, p[self.gamma], p[self.beta])
    }
}

/// conv -> instance norm -> ReLU.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
    ) -> Self {
        let conv = Conv::new(store, init, &format!("{name}.conv"), cin, cout, geom, 0.0);
        let norm = Norm::new(store, &format!("{name}.norm"), cout);
        Self { conv, norm }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = self.conv.apply(g, p, x);
        let y = self.norm.apply(g, p, y);
        g.relu(y)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, fin: usize, fout: usize, slope: f32) -> Self {
        let w = store.push(format!("{name}.weight"), init.kaiming(&[fout, fin], fin, slope));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }
}
