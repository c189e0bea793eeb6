//! Named parameter storage with gradient slots, initialization policy and the
//! binary checkpoint format.
//!
//! Checkpoint layout: a UTF-8 manifest with one `"<path> <d0>x<d1>..."` line
//! per parameter, terminated by a line `data`, followed by every parameter's
//! values as little-endian `f64` in manifest order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NdArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<NdArray>,
    grads: Vec<NdArray>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(vec![format!("duplicate parameter path {name}")]));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(NdArray::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Creates a parameter whose initial values depend only on `(seed, name)`,
    /// so adding or removing other parameters never shifts this one.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let value = match init {
            Init::Zeros => NdArray::zeros(shape),
            Init::Ones => NdArray::full(shape, 1.0),
            Init::Constant(c) => NdArray::full(shape, c),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                NdArray::from_fn(shape, |_| rng.random_range(-bound..=bound))
            }
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(vec![e.to_string()]))?;
                NdArray::from_fn(shape, |_| normal.sample(&mut rng))
            }
        };
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: NdArray) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(vec![format!("unknown parameter {name}")]))?;
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Multiplies every gradient slot by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn snapshot(&self) -> Vec<NdArray> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[NdArray]) -> Result<()> {
        if snapshot.len() != self.values.len()
            || snapshot.iter().zip(&self.values).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("snapshot does not match parameter layout"));
        }
        self.values.clone_from_slice(snapshot);
        Ok(())
    }

    /// Text manifest: one `"<path> <shape>"` line per parameter.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = v.shape().iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            let _ = writeln!(out, "{name} {dims}");
        }
        out
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(self.manifest().as_bytes())?;
        w.write_all(b"data\n")?;
        for v in &self.values {
            for x in v.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut layout = Vec::new();
        loop {
            let mut line = String::new();
            let n = r
                .read_line(&mut line)
                .map_err(|e| bad(format!("reading manifest: {e}")))?;
            if n == 0 {
                return Err(bad("manifest not terminated by `data`".into()));
            }
            let line = line.trim_end_matches('\n');
            if line == "data" {
                break;
            }
            let (name, dims) = line
                .rsplit_once(' ')
                .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
            let shape: Vec<usize> = if dims == "scalar" {
                vec![]
            } else {
                dims.split('x')
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("malformed shape in {line:?}")))?
            };
            layout.push((name.to_string(), shape));
        }
        let mut store = Self::new();
        let mut buf = [0u8; 8];
        for (name, shape) in layout {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated data for {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(name, NdArray::new(&shape, data)?)?;
        }
        Ok(store)
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
