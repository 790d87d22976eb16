//! Named parameter tensors and their binary container.
//!
//! Container layout (little endian):
//!
//! ```text
//! magic "TEPS" | u32 version | u32 tensor count
//! manifest: per tensor  u32 name length | name bytes | u32 ndim | u64 dims...
//! data:     per tensor  f64 values, row-major, in manifest order
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TEPS";
const VERSION: u32 = 1;
const MAX_NAME: u32 = 1 << 12;
const MAX_DIMS: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Slot description used to build and check a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    /// Initialization bound is `1/sqrt(fan_in)`.
    pub fan_in: usize,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered named tensors. Models index tensors by position in their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(layout: &[ParamSlot]) -> Self {
        Self {
            names: layout.iter().map(|s| s.name.clone()).collect(),
            tensors: layout.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn in layout order.
    pub fn init_uniform(layout: &[ParamSlot], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(layout);
        for (slot, t) in layout.iter().zip(&mut p.tensors) {
            let bound = 1.0 / (slot.fan_in.max(1) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub(crate) fn data(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub(crate) fn data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn matches_layout(&self, layout: &[ParamSlot]) -> bool {
        self.tensors.len() == layout.len()
            && layout
                .iter()
                .zip(self.names.iter().zip(&self.tensors))
                .all(|(s, (n, t))| *n == s.name && t.shape == s.shape)
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        for v in self.values_mut() {
            *v = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
        }
        for t in &self.tensors {
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut names = Vec::with_capacity(count.min(1024));
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()?;
            if len > MAX_NAME {
                return Err(bad("tensor name too long"));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf)?;
            names.push(String::from_utf8(buf).map_err(|_| bad("tensor name is not UTF-8"))?);
            let ndim = r.read_u32::<LittleEndian>()?;
            if ndim > MAX_DIMS {
                return Err(bad("too many dimensions"));
            }
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            shapes.push(shape);
        }
        let mut tensors = Vec::with_capacity(count);
        for shape in shapes {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let mut data = Vec::new();
            for _ in 0..n {
                data.push(r.read_f64::<LittleEndian>()?);
            }
            tensors.push(Tensor { shape, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { names, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<ParamSlot> {
        vec![
            ParamSlot::new("a.weight", &[3, 4], 4),
            ParamSlot::new("a.bias", &[3], 4),
            ParamSlot::new("b", &[2, 1, 2], 9),
        ]
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let l = layout();
        let a = ParamSet::init_uniform(&l, 5);
        assert_eq!(a, ParamSet::init_uniform(&l, 5));
        assert_ne!(a, ParamSet::init_uniform(&l, 6));
        assert!(a.tensor(0).data.iter().all(|v| v.abs() <= 0.5));
        assert!(a.tensor(2).data.iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(a.matches_layout(&l));
        assert_eq!(a.num_values(), 12 + 3 + 4);
    }

    #[test]
    fn rejects_corrupt_containers() {
        let p = ParamSet::init_uniform(&layout(), 1);
        let bytes = p.to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamSet::from_bytes(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(ParamSet::from_bytes(&wrong), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(ParamSet::from_bytes(&version).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(seed in any::<u64>(), special in prop::sample::select(vec![0.0, -0.0, f64::MIN_POSITIVE, 1e308, f64::NAN])) {
            let mut p = ParamSet::init_uniform(&layout(), seed);
            p.tensor_mut(1).data[0] = special;
            let bytes = p.to_bytes();
            let back = ParamSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.names(), p.names());
            for (a, b) in back.values().zip(p.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
