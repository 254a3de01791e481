//! Named parameter storage and the layer building blocks that bind it into
//! a [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{ConvGeom, ConvSpec};
use crate::nn::deform::{DeformableConvSpec, OFFSET_CHANNELS};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids().map(|id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|id| self.trainable[id.0])
            .map(|id| self.values[id.0].numel())
            .sum()
    }

    /// Replace a value, checking that the shape is unchanged.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

/// Kaiming-style fan-in scaled normal initialization.
pub fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = kaiming(&geom.weight_shape(), geom.fan_in(), rng);
        Self::with_weights(store, name, geom, w, bias)
    }

    /// Weights scaled down from the Kaiming default by `gain`.
    pub fn scaled<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeom,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = kaiming::<T>(&geom.weight_shape(), geom.fan_in(), rng).map(|v| v * T::from_f64(gain));
        Self::with_weights(store, name, geom, w, bias)
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, geom: ConvGeom, bias: bool) -> Result<Self> {
        Self::with_weights(store, name, geom, Tensor::zeros(&geom.weight_shape()), bias)
    }

    fn with_weights<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeom,
        w: Tensor<T>,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[geom.out_channels]), true)?)
        } else {
            None
        };
        Ok(Self { geom, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv(x, w, b, self.geom)
    }

    pub fn spec<T: Scalar>(&self, store: &ParamStore<T>) -> ConvSpec<T> {
        ConvSpec {
            in_channels: self.geom.in_channels,
            out_channels: self.geom.out_channels,
            kernel: self.geom.kernel,
            depthwise: self.geom.depthwise,
            weight: store.get(self.weight).clone(),
            bias: self.bias.map(|b| store.get(b).clone()),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Channel layer norm with learned affine (gamma = 1, beta = 0 at init).
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Deformable 3×3 convolution: dense 3×3 base plus a zero-initialized
/// offset predictor, so it starts out as a standard convolution.
#[derive(Clone, Copy, Debug)]
pub struct DeformConv {
    pub base: Conv,
    pub offsets: Conv,
}

impl DeformConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = Conv::new(store, &format!("{name}.base"), ConvGeom::new(in_channels, out_channels, 3, false)?, true, rng)?;
        let offsets = Conv::zeros(
            store,
            &format!("{name}.offset"),
            ConvGeom::new(in_channels, OFFSET_CHANNELS, 3, false)?,
            true,
        )?;
        Ok(Self { base, offsets })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let off = self.offsets.forward(g, store, x)?;
        let w = g.param(store, self.base.weight);
        let b = self.base.bias.map(|b| g.param(store, b));
        g.deform_conv(x, off, w, b)
    }

    pub fn spec<T: Scalar>(&self, store: &ParamStore<T>) -> Result<DeformableConvSpec<T>> {
        DeformableConvSpec::new(self.base.spec(store), self.offsets.spec(store))
    }
}
