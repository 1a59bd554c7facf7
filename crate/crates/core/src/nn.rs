use rand::Rng;

use crate::error::Result;
use crate::tensor::{ConvGeometry, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// A convolution whose weight (and optional bias) live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.insert_conv_weight(format!("{name}.weight"), out_channels, in_channels, kernel, gain, rng)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geom,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }

    /// Parameter ids owned by this layer.
    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}
