use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Conv2dSpec, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Records parameter names, shapes and initializers in creation order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for spec in &self.specs {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(IxDyn(&spec.shape)),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_shape_simple_fn(IxDyn(&spec.shape), || dist.sample(&mut rng))
                }
            };
            set.push(spec.name.clone(), value);
        }
        set
    }

    /// True when `params` has exactly these names and shapes.
    pub fn matches(&self, params: &ParamSet) -> bool {
        params.len() == self.specs.len()
            && self
                .specs
                .iter()
                .zip(params.names().iter().zip(params.values()))
                .all(|(s, (n, v))| &s.name == n && v.shape() == s.shape.as_slice())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(layout: &mut Layout, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            w: layout.add(
                format!("{name}.weight"),
                &[inputs, outputs],
                Init::Normal((1.0 / inputs as f64).sqrt()),
            ),
            b: layout.add(format!("{name}.bias"), &[outputs], Init::Zeros),
        }
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        x.linear(p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    spec: Conv2dSpec,
}

impl Conv {
    /// 3×3 convolution, time stride 1, frequency stride `stride_f`.
    pub fn k3(layout: &mut Layout, name: &str, cin: usize, cout: usize, stride_f: usize) -> Self {
        let fan_in = (cin * 9) as f64;
        Self {
            w: layout.add(
                format!("{name}.weight"),
                &[cout, cin, 3, 3],
                Init::Normal((2.0 / fan_in).sqrt()),
            ),
            b: layout.add(format!("{name}.bias"), &[cout], Init::Zeros),
            spec: Conv2dSpec {
                stride_f,
                pad_t: 1,
                pad_f: 1,
            },
        }
    }

    /// 1×1 projection.
    pub fn k1(layout: &mut Layout, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: layout.add(
                format!("{name}.weight"),
                &[cout, cin, 1, 1],
                Init::Normal((1.0 / cin as f64).sqrt()),
            ),
            b: layout.add(format!("{name}.bias"), &[cout], Init::Zeros),
            spec: Conv2dSpec {
                stride_f: 1,
                pad_t: 0,
                pad_f: 0,
            },
        }
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        x.conv2d(p[self.w], p[self.b], self.spec)
    }

    /// Frames of temporal context added on each side.
    pub fn time_radius(&self) -> usize {
        self.spec.pad_t
    }
}
