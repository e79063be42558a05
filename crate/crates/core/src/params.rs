//! Named trainable parameters with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±bound.
    Uniform(f64),
    Normal(f64),
    Values(Vec<f64>),
}

impl Init {
    /// Variance-preserving fan-in scaling: uniform with variance 1/fan_in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((3.0 / fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter; names must be unique.
    pub fn create<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        init: Init,
        rng: &mut R,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * { let v: f64 = StandardNormal.sample(rng); v })
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!(
                        "`{name}`: {} initial values for shape {shape:?}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::config(
                "params",
                format!("expected {} arrays, found {}", self.vars.len(), values.len()),
            ));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::config(format!("params.{name}"), "missing array"))?;
            if v.dims() != var.dims() {
                return Err(Error::config(
                    format!("params.{name}"),
                    format!("shape {:?} does not match {:?}", v.dims(), var.dims()),
                ));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }
}
