use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Shape and initialization fans of one learnable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `(fan_in, fan_out)` for weights; `None` for zero-initialized biases.
    pub fans: Option<(usize, usize)>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn conv(specs: &mut Vec<ParamSpec>, name: String, f: usize, c: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![f, c, k, k],
        fans: Some((c * k * k, f * k * k)),
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![f],
        fans: None,
    });
}

fn dense(specs: &mut Vec<ParamSpec>, name: String, d: usize, m: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![d, m],
        fans: Some((d, m)),
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![m],
        fans: None,
    });
}

/// Every learnable tensor of `config`, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for stream in ["u", "v"] {
        let mut cin = 1;
        for (layer, f) in [(1, config.branch_filters_l1), (2, config.branch_filters_l2)] {
            let p = format!("{stream}.inc{layer}");
            conv(&mut s, format!("{p}.b1"), f, cin, 1);
            conv(&mut s, format!("{p}.b2r"), f, cin, 1);
            conv(&mut s, format!("{p}.b2"), f, f, 3);
            conv(&mut s, format!("{p}.b3r"), f, cin, 1);
            conv(&mut s, format!("{p}.b3"), f, f, 5);
            conv(&mut s, format!("{p}.b4"), f, cin, 1);
            cin = 4 * f;
        }
    }
    let d = config.shared_dim;
    dense(&mut s, "shared".into(), 2 * config.stream_features(), d);
    if config.variant.has_branches() {
        for k in 0..config.num_classes {
            dense(&mut s, format!("att{k}"), d, d);
            dense(&mut s, format!("det{k}.h"), d, config.detector_hidden);
            dense(&mut s, format!("det{k}.o"), config.detector_hidden, 1);
        }
    }
    dense(&mut s, "cls.h".into(), config.fused_dim(), config.classifier_hidden);
    dense(&mut s, "cls.o".into(), config.classifier_hidden, config.num_classes);
    s
}

/// Exact number of learnable weights and biases.
pub fn count_parameters(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(ParamSpec::numel).sum()
}

/// Named learnable tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_tensors(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(named.len());
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, mut t)) in named.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate parameter {name}")));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
            t.set_requires_grad(true);
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors, index })
    }

    /// Checks that the tensors are exactly those `config` needs.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        if specs.len() != self.len() {
            return Err(Error::Data(format!(
                "{} parameters given, {} expected for the config",
                self.len(),
                specs.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape` without copying.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound<'a> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
            index: &self.index,
        }
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound<'p> {
    vars: Vec<Var>,
    index: &'p HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    /// Handles in canonical parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Initializes parameters for `config` from `seed`: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = param_specs(config)
        .into_iter()
        .map(|spec| {
            let data = match spec.fans {
                Some((fan_in, fan_out)) => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..spec.numel())
                        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                        .collect()
                }
                None => vec![T::zero(); spec.numel()],
            };
            Ok((spec.name, Tensor::new(spec.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(named)
}
