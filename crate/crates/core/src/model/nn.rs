//! Parameter storage with seeded initialisation, and the layers the backbones
//! are assembled from.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Module, ModuleT, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Const(f32),
}

#[derive(Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Every named tensor of a model. Each parameter's initial value depends only
/// on the seed and its name, so building order does not matter.
pub struct ParamStore {
    seed: u64,
    device: Device,
    entries: Mutex<BTreeMap<String, Entry>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, device: Device::Cpu, entries: Mutex::new(BTreeMap::new()) }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(v) => vec![v; n],
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(self.seed, seeds::hash_str(name)));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect()
            }
        };
        let var = Var::from_vec(data, shape, &self.device)?;
        let t = var.as_tensor().clone();
        entries.insert(name.to_string(), Entry { var, trainable });
        Ok(t)
    }

    /// Variables updated by the optimiser, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries.values().filter(|e| e.trainable).map(|e| e.var.clone()).collect()
    }

    pub fn trainable_named(&self) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k.clone(), e.var.clone())).collect()
    }

    /// Trainable scalar count. Running statistics are excluded.
    pub fn num_parameters(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    /// All tensors including running statistics, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?.detach())))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.snapshot()? {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Overwrites stored values. Every stored name must be present with the
    /// same shape unless `partial`, in which case absent names keep their
    /// initial values. Mismatches are reported together.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, partial: bool) -> Result<usize> {
        let entries = self.entries.lock().expect("param store poisoned");
        let mut problems = Vec::new();
        for (name, e) in entries.iter() {
            match tensors.get(name) {
                Some(t) if t.dims() != e.var.dims() => problems.push(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    e.var.dims(),
                    t.dims()
                )),
                None if !partial => problems.push(format!("{name}: missing")),
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::WeightLoad(problems.join("; ")));
        }
        let mut loaded = 0;
        for (name, e) in entries.iter() {
            if let Some(t) = tensors.get(name) {
                e.var.set(&t.to_dtype(e.var.dtype())?.to_device(&self.device)?)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn he(&self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.store.create(&self.name(leaf), shape, Init::He { fan_in }, true)
    }

    fn constant(&self, leaf: &str, shape: &[usize], v: f32, trainable: bool) -> Result<Tensor> {
        self.store.create(&self.name(leaf), shape, Init::Const(v), trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Relu6,
    Silu,
}

impl Act {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Identity => x.clone(),
            Act::Relu => x.relu()?,
            Act::Relu6 => x.clamp(0f32, 6f32)?,
            Act::Silu => x.silu()?,
        })
    }
}

/// 2-D convolution with "same" padding for odd kernels.
pub struct Conv {
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        Self::grouped(s, cin, cout, k, stride, 1, bias)
    }

    pub fn grouped(
        s: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!("{}: channels {cin}->{cout} not divisible by {groups} groups", s.prefix)));
        }
        let fan_in = cin / groups * k * k;
        let w = s.he("weight", &[cout, cin / groups, k, k], fan_in)?;
        let b = if bias { Some(s.constant("bias", &[cout], 0.0, true)?) } else { None };
        Ok(Self { w, b, stride, pad: k / 2, groups })
    }

    pub fn out_channels(&self) -> usize {
        self.w.dims()[0]
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (cout, cin_g, k, _) = self.w.dims4()?;
        let y = if self.groups > 1 && cin_g == 1 && self.groups == cout {
            depthwise(x, &self.w, k, self.stride, self.pad)?
        } else {
            x.conv2d(&self.w, self.pad, self.stride, 1, self.groups)?
        };
        match &self.b {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Keeps every `stride`-th row and column starting at 0.
fn subsample(x: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let x = x.pad_with_zeros(2, 0, ho * stride - h)?.pad_with_zeros(3, 0, wo * stride - w)?;
    x.reshape((n, c, ho, stride, wo, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((n, c, ho, wo))
}

/// Depthwise convolution as a sum of shifted, per-channel scaled copies. The
/// generic grouped path splits into one convolution per channel, which is far
/// slower for wide layers.
fn depthwise(x: &Tensor, w: &Tensor, k: usize, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let tap = w.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
            let term = xp.narrow(2, dy, oh)?.narrow(3, dx, ow)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    subsample(&acc.expect("kernel is non-empty"), stride)
}

/// Batch normalisation over channels with running statistics kept in the store.
pub struct Bn(candle_nn::BatchNorm);

impl Bn {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        let weight = s.constant("weight", &[c], 1.0, true)?;
        let bias = s.constant("bias", &[c], 0.0, true)?;
        let mean = s.constant("running_mean", &[c], 0.0, false)?;
        let var = s.constant("running_var", &[c], 1.0, false)?;
        Ok(Self(candle_nn::BatchNorm::new(c, mean, var, weight, bias, 1e-5)?))
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.0.forward_t(x, train)
    }
}

/// Convolution, optional batch norm, activation.
pub struct ConvBnAct {
    conv: Conv,
    bn: Option<Bn>,
    act: Act,
}

impl ConvBnAct {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, act: Act) -> Result<Self> {
        Self::grouped(s, cin, cout, k, stride, 1, act)
    }

    pub fn grouped(
        s: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: Act,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::grouped(&s.pp("conv"), cin, cout, k, stride, groups, false)?,
            bn: Some(Bn::new(&s.pp("bn"), cout)?),
            act,
        })
    }

    /// Convolution with bias and no normalisation.
    pub fn plain(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, act: Act) -> Result<Self> {
        Ok(Self { conv: Conv::new(&s.pp("conv"), cin, cout, k, stride, true)?, bn: None, act })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward_t(&y, train)?;
        }
        self.act.apply(&y)
    }
}

/// 3x3 stride-2 max pooling with one pixel of padding, composed from
/// element-wise maxima so it stays differentiable. Expects non-negative input.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let along = |x: &Tensor, dim: usize| -> candle_core::Result<Tensor> {
        let len = x.dim(dim)?;
        let even = len + len % 2;
        let xp = x.pad_with_zeros(dim, 1, 1 + even - len)?;
        let pick = |off: usize| -> candle_core::Result<Tensor> {
            let s = xp.narrow(dim, off, even)?;
            let mut shape = s.dims().to_vec();
            shape[dim] = even / 2;
            shape.insert(dim + 1, 2);
            let mut out = shape.clone();
            out.remove(dim + 1);
            s.reshape(shape)?.narrow(dim + 1, 0, 1)?.reshape(out)
        };
        pick(0)?.maximum(&pick(1)?)?.maximum(&pick(2)?)
    };
    Ok(along(&along(x, 2)?, 3)?)
}

pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d(2)?)
}

pub fn avg_pool_2x2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}
