//! Parameter storage and the small set of layers the models are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initialiser used for every
/// projection matrix and learned token.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    /// Parameters that exist only to support training and are dropped when
    /// the model is stripped for inference.
    pub train_only: bool,
}

/// Named parameters of one model, in a deterministic (sorted) order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            train_only: false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to inference parameters.
    pub fn num_scalars(&self, include_train_only: bool) -> usize {
        self.params
            .values()
            .filter(|p| include_train_only || !p.train_only)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn train_only_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.train_only)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Snapshot of parameter values (deep copies).
    pub fn tensors(&self, include_train_only: bool) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .filter(|(_, p)| include_train_only || !p.train_only)
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from `values`. Every name in `required` must be
    /// present; names not in the store are rejected.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, require_train_only: bool) -> Result<()> {
        for name in values.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::Contract(format!("unexpected parameter {name}")));
            }
        }
        for (name, p) in &self.params {
            match values.get(name) {
                Some(v) => {
                    if v.dims() != p.var.dims() {
                        return Err(Error::Contract(format!(
                            "parameter {name}: shape {:?} does not match {:?}",
                            v.dims(),
                            p.var.dims()
                        )));
                    }
                    p.var.set(&v.to_dtype(self.dtype)?)?;
                }
                None if p.train_only && !require_train_only => {}
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    /// Copies the current value of every parameter that also exists in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Contract(format!("source lacks parameter {name}")))?;
            p.var.set(&src.var.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn insert(&mut self, name: String, value: Tensor, train_only: bool) -> Result<Var> {
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} declared twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(
            name,
            Param {
                var: var.clone(),
                train_only,
            },
        );
        Ok(var)
    }

    fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                values.push(v);
            }
        }
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
    }
}

/// A naming prefix inside a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    train_only: bool,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
            train_only: self.train_only,
        }
    }

    /// Marks everything declared below this scope as train-only.
    pub fn train_only(mut self) -> Self {
        self.train_only = true;
        self
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let value = self.store.trunc_normal(shape, INIT_STD)?;
        self.store.insert(self.full(name), value, self.train_only)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let value = Tensor::zeros(shape, DType::F64, &Device::Cpu)?;
        self.store.insert(self.full(name), value, self.train_only)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let value = Tensor::ones(shape, DType::F64, &Device::Cpu)?;
        self.store.insert(self.full(name), value, self.train_only)
    }
}

/// Affine map `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn new(mut scope: Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.trunc_normal("weight", &[d_in, d_out])?,
            bias: scope.zeros("bias", &[d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dims().last().copied().unwrap_or(0);
        if last != self.d_in() {
            return Err(Error::Contract(format!(
                "dense layer expects width {}, got {last}",
                self.d_in()
            )));
        }
        Ok(x.broadcast_matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }

    /// Multiply-accumulates to apply this layer to `rows` vectors.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in() * self.d_out()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(mut scope: Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.ones("gamma", &[dim])?,
            beta: scope.zeros("beta", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Two dense layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new(mut scope: Scope, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Dense::new(scope.pp("fc1"), d_in, hidden)?,
            fc2: Dense::new(scope.pp("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.fc1.macs(rows) + self.fc2.macs(rows)
    }
}

/// Exact GELU, `x * (1 + erf(x / sqrt 2)) / 2`, built from primitive ops so
/// its gradient is exact for the forward actually computed.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let e = (x * std::f64::consts::FRAC_1_SQRT_2)?.erf()?;
    Ok((((e + 1.0)? * x)? * 0.5)?)
}

/// Fails with a numeric error if `t` holds any NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let bad = t
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .any(|v| !v.is_finite());
    if bad {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Reads a rank-0 tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_truncated() {
        let make = |seed| {
            let mut s = ParamStore::new(DType::F64, seed);
            let v = s.root().pp("a").trunc_normal("w", &[64, 64]).unwrap();
            v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let a = make(1);
        assert_eq!(a, make(1));
        assert_ne!(a, make(2));
        assert!(a.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let std = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((std - 0.88 * INIT_STD).abs() < 0.002, "std {std}");
    }

    #[test]
    fn scopes_name_and_flag_params() {
        let mut s = ParamStore::new(DType::F32, 0);
        let mut root = s.root();
        Dense::new(root.pp("backbone").pp("head"), 3, 2).unwrap();
        Dense::new(root.pp("aux").train_only(), 3, 2).unwrap();
        let names: Vec<_> = s.iter().map(|(n, p)| (n.to_string(), p.train_only)).collect();
        assert_eq!(
            names,
            vec![
                ("aux.bias".into(), true),
                ("aux.weight".into(), true),
                ("backbone.head.bias".into(), false),
                ("backbone.head.weight".into(), false),
            ]
        );
        assert_eq!(s.num_scalars(true), 16);
        assert_eq!(s.num_scalars(false), 8);
        assert!(s.root().zeros("aux.bias", &[1]).is_err());
    }

    #[test]
    fn layer_norm_normalises() {
        let mut s = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(s.root().pp("ln"), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let mut s = ParamStore::new(DType::F64, 0);
        let d = Dense::new(s.root().pp("d"), 3, 2).unwrap();
        let x = Tensor::zeros((5, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x), Err(Error::Contract(_))));
        assert_eq!(d.macs(5), 30);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut a = ParamStore::new(DType::F32, 0);
        Dense::new(a.root().pp("d"), 2, 2).unwrap();
        Dense::new(a.root().pp("t").train_only(), 2, 2).unwrap();
        let inference = a.tensors(false).unwrap();
        assert!(a.load(&inference, false).is_ok());
        assert!(a.load(&inference, true).is_err());
        let mut wrong = inference.clone();
        wrong.insert("d.bias".into(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(a.load(&wrong, false).is_err());
    }
}
