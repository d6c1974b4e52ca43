use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Constant(f64),
    /// Stacked `[i, f, o, g]` gate bias with the forget slice at one.
    ForgetGate { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize]) -> Self {
        let fan_in = shape[1..].iter().product();
        ParamSpec { name: name.into(), shape: shape.to_vec(), init: Init::HeUniform { fan_in } }
    }

    pub fn bias(name: impl Into<String>, n: usize, value: f64) -> Self {
        ParamSpec { name: name.into(), shape: vec![n], init: Init::Constant(value) }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut store = Self::new();
        for s in specs {
            let t = match s.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::of(rng.random_range(-bound..bound)))
                }
                Init::Constant(v) => Tensor::full(&s.shape, T::of(v)),
                Init::ForgetGate { channels } => Tensor::from_fn(&s.shape, |i| {
                    if (channels..2 * channels).contains(&i) {
                        T::one()
                    } else {
                        T::zero()
                    }
                }),
            };
            store.insert(&s.name, t);
        }
        store
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut store = Self::new();
        for s in specs {
            store.insert(&s.name, Tensor::zeros(&s.shape));
        }
        store
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Checks that every spec is present with the declared shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.get(&s.name) {
                None => return Err(Error::Config(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// A graph plus lazily bound parameters. Blocks take `&mut Ctx` and pull
/// the weights they need by name.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { g, params, bound: HashMap::new() }
    }

    /// Uses `v` for parameter `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Graph variable for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = self.g.leaf(t, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Parameter name to graph variable for every parameter used so far.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    /// `1 × 1` convolution with weight `{prefix}.w` and, when present, bias
    /// `{prefix}.b`.
    pub fn pointwise(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let bias = format!("{prefix}.b");
        let b = if self.bound.contains_key(&bias) || self.params.get(&bias).is_some() {
            Some(self.p(&bias)?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, 1, 0)
    }

    pub fn conv3x3(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.conv2d(x, w, Some(b), stride, 1)
    }
}

/// Specs of a convolution `{prefix}.w [c_out, c_in, k, k]` plus bias.
pub fn conv_specs(prefix: &str, c_in: usize, c_out: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), &[c_out, c_in, k, k]),
        ParamSpec::bias(format!("{prefix}.b"), c_out, 0.0),
    ]
}
