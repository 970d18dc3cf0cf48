//! Named parameter storage and convolution layers bound onto a graph.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

/// Weights, bias and geometry of one convolution, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, geometry: ConvGeometry) -> Result<Self> {
        let [out_c, _, _, _] = weight.shape()[..] else {
            return Err(Error::dim("rank", format!("conv weight must be rank 4, got {:?}", weight.shape())));
        };
        if bias.shape() != [out_c] {
            return Err(Error::dim(
                "out_channels",
                format!("bias {:?} vs {} output channels", bias.shape(), out_c),
            ));
        }
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, geometry: ConvGeometry) -> Self {
        Self {
            weight: Tensor::zeros([out_c, in_c, k, k]),
            bias: Tensor::zeros([out_c]),
            geometry,
        }
    }

    /// Uniform in `[-a, a]` with `a = sqrt(1 / fan_in)` for weights and bias.
    pub fn uniform(out_c: usize, in_c: usize, k: usize, geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (in_c * k * k) as f64).sqrt();
        Self {
            weight: Tensor::uniform([out_c, in_c, k, k], bound, rng),
            bias: Tensor::uniform([out_c], bound, rng),
            geometry,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Puts the parameters on `g`, tracked or as constants.
    pub fn bind(&self, g: &Graph, tracked: bool) -> BoundConv {
        let put = |t: &Tensor| if tracked { g.param(t.clone()) } else { g.input(t.clone()) };
        BoundConv {
            weight: put(&self.weight),
            bias: put(&self.bias),
            geometry: self.geometry,
            out_channels: self.out_channels(),
            in_channels: self.in_channels(),
        }
    }
}

/// A convolution whose parameters live on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub geometry: ConvGeometry,
    pub out_channels: usize,
    pub in_channels: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.geometry)
    }

    /// Convolution followed by ReLU.
    pub fn block(&self, g: &Graph, x: Var) -> Result<Var> {
        Ok(g.relu(self.apply(g, x)?))
    }
}

/// Untracked convenience convolution.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let g = Graph::new();
    let x = g.input(input.clone());
    let p = params.bind(&g, false);
    let y = p.apply(&g, x)?;
    let out = g.value(y).clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter `{}`", name)));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar counts grouped by the first dotted component of each name.
    pub fn counts_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.iter() {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += t.len();
        }
        out
    }

    /// Replaces every value with `values[name]`, checking names and shapes.
    pub fn load_from(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, (name, t)) in values.iter().enumerate() {
            if name != &self.names[i] {
                return Err(Error::Config(format!(
                    "parameter {} is `{}` in the model but `{}` in the source",
                    i, self.names[i], name
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::dim(
                    "shape",
                    format!("parameter `{}`: {:?} vs {:?}", name, self.tensors[i].shape(), t.shape()),
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Tracked leaves for every parameter, in store order.
    pub fn bind(&self, g: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Constant leaves for inference.
    pub fn bind_frozen(&self, g: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.input(t.clone())).collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps graph leaves created elsewhere, one per store entry in order.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self { vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform `[-a, a]`, `a = sqrt(1 / fan_in)`.
    Uniform,
    Zeros,
}

pub struct Initializer {
    scheme: InitScheme,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Self {
            scheme,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn conv(&mut self, out_c: usize, in_c: usize, k: usize, geometry: ConvGeometry) -> ConvParams {
        match self.scheme {
            InitScheme::Uniform => ConvParams::uniform(out_c, in_c, k, geometry, &mut self.rng),
            InitScheme::Zeros => ConvParams::zeros(out_c, in_c, k, geometry),
        }
    }
}

/// A convolution whose parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    /// Registers `<name>.weight` and `<name>.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        geometry: ConvGeometry,
    ) -> Result<Self> {
        let p = init.conv(out_c, in_c, k, geometry);
        let weight = store.add(format!("{}.weight", name), p.weight)?;
        let bias = store.add(format!("{}.bias", name), p.bias)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            geometry,
            in_channels: in_c,
            out_channels: out_c,
        })
    }

    /// Registers only `<name>.weight`; the bias is a constant zero.
    pub fn without_bias(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        geometry: ConvGeometry,
    ) -> Result<Self> {
        let p = init.conv(out_c, in_c, k, geometry);
        let weight = store.add(format!("{}.weight", name), p.weight)?;
        Ok(Self {
            weight,
            bias: None,
            geometry,
            in_channels: in_c,
            out_channels: out_c,
        })
    }

    pub fn bind(&self, g: &Graph, p: &Bound) -> BoundConv {
        let bias = match self.bias {
            Some(id) => p[id],
            None => g.input(Tensor::zeros([self.out_channels])),
        };
        BoundConv {
            weight: p[self.weight],
            bias,
            geometry: self.geometry,
            out_channels: self.out_channels,
            in_channels: self.in_channels,
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}
