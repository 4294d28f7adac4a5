//! Named dense tensors.
//!
//! [`TensorMap`] is the universal currency for model parameters, optimizer
//! moments, task vectors, and checkpoints: an ordered map from
//! `/`-separated names to dense row-major arrays of f32 or f64.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Row-major payload of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor { shape, data: TensorData::F64(data) })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor { shape, data: TensorData::F32(data) })
    }

    pub fn zeros_f64(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: TensorData::F64(vec![0.0; n]) }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 (copy for f32 tensors).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Borrow as f64 slice; errors if the tensor is f32.
    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::F32(_) => Err(Error::InvalidInput("expected f64 tensor".into())),
        }
    }

    pub fn as_f64_mut(&mut self) -> Result<&mut [f64]> {
        match &mut self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::F32(_) => Err(Error::InvalidInput("expected f64 tensor".into())),
        }
    }

    /// Cast an f64 value vector back to this tensor's dtype.
    pub fn with_values_cast(&self, values: Vec<f64>) -> Result<Tensor> {
        check_len(&self.shape, values.len())?;
        let data = match self.dtype() {
            Dtype::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values),
        };
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn iter_f64(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.data {
            TensorData::F32(v) => Box::new(v.iter().map(|&x| x as f64)),
            TensorData::F64(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter_f64().all(|x| x.is_finite())
    }

    /// Raw little-endian payload bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Rebuild from little-endian payload bytes.
    pub fn from_le_bytes(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if bytes.len() != count * dtype.size_bytes() {
            return Err(Error::Format(format!(
                "payload length {} does not match shape {:?} ({} {} elements)",
                bytes.len(),
                shape,
                count,
                dtype.name()
            )));
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} implies {expect} elements, got {len}"
        )));
    }
    Ok(())
}

/// Ordered collection of named tensors. Iteration order is lexicographic by
/// name, which makes every whole-map operation canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert under a validated name. Names are nonempty ASCII with
    /// `/`-separated nonempty segments; duplicates are rejected.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        validate_name(name)?;
        if self.entries.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name '{name}'")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing tensor '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names in canonical (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// True when both maps hold the same names with the same shapes.
    pub fn congruent(&self, other: &TensorMap) -> bool {
        self.len() == other.len()
            && self.iter().all(|(name, t)| {
                other.entries.get(name).map(|o| o.shape == t.shape).unwrap_or(false)
            })
    }

    /// A congruent all-zero f64 map (gradient / moment buffers).
    pub fn zeros_like(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, t) in self.iter() {
            out.entries.insert(name.to_string(), Tensor::zeros_f64(t.shape.clone()));
        }
        out
    }

    /// Convenience accessor for f64 model parameters.
    pub fn f64_slice(&self, name: &str) -> Result<&[f64]> {
        self.get(name)?.as_f64()
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.is_ascii() {
        return Err(Error::InvalidInput(format!("invalid tensor name '{name}'")));
    }
    if name.split('/').any(|seg| seg.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "tensor name '{name}' has empty path segments"
        )));
    }
    Ok(())
}
