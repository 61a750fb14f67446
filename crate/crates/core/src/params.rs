//! Layer-addressed parameter sets.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Embedding,
    LinearWeight,
    LinearBias,
    NormScale,
    NormShift,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::Embedding,
        LayerKind::LinearWeight,
        LayerKind::LinearBias,
        LayerKind::NormScale,
        LayerKind::NormShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Embedding => "embedding",
            LayerKind::LinearWeight => "linear_weight",
            LayerKind::LinearBias => "linear_bias",
            LayerKind::NormScale => "norm_scale",
            LayerKind::NormShift => "norm_shift",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LayerKind::Embedding => 0,
            LayerKind::LinearWeight => 1,
            LayerKind::LinearBias => 2,
            LayerKind::NormScale => 3,
            LayerKind::NormShift => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub depth_index: usize,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, shape: Vec<usize>, depth_index: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            shape,
            depth_index,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("parameter specs differ")]
    SpecMismatch,
    #[error("duplicate layer name {0:?}")]
    DuplicateName(String),
    #[error("layer {0:?} declared out of depth order")]
    DepthOrder(String),
    #[error("flat vector has {actual} values, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Validated, shareable list of layer specs.
pub type Specs = Arc<[LayerSpec]>;

pub fn validate_specs(specs: &[LayerSpec]) -> Result<(), ParamsError> {
    let mut seen = HashSet::new();
    let mut depth = 0;
    for s in specs {
        if !seen.insert(s.name.as_str()) {
            return Err(ParamsError::DuplicateName(s.name.clone()));
        }
        if s.depth_index < depth {
            return Err(ParamsError::DepthOrder(s.name.clone()));
        }
        if s.shape.is_empty() || s.shape.contains(&0) {
            return Err(DiffError::InvalidShape(s.shape.clone()).into());
        }
        depth = s.depth_index;
    }
    Ok(())
}

/// One tensor per [`LayerSpec`], in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    specs: Specs,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(specs: Specs, values: Vec<Tensor>) -> Result<Self, ParamsError> {
        validate_specs(&specs)?;
        if specs.len() != values.len()
            || specs.iter().zip(&values).any(|(s, v)| s.shape != v.shape())
        {
            return Err(ParamsError::SpecMismatch);
        }
        Ok(Self { specs, values })
    }

    pub fn filled(specs: Specs, v: f64) -> Self {
        let values = specs.iter().map(|s| Tensor::filled(&s.shape, v)).collect();
        Self { specs, values }
    }

    pub fn zeros(specs: Specs) -> Self {
        Self::filled(specs, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.specs.clone())
    }

    pub fn ones_like(&self) -> Self {
        Self::filled(self.specs.clone(), 1.0)
    }

    /// Builds a set with the same specs from per-layer values.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self, ParamsError> {
        Self::new(self.specs.clone(), values)
    }

    pub fn specs(&self) -> &Specs {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Tensor> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.specs.iter().map(LayerSpec::numel).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerSpec, &Tensor)> {
        self.specs.iter().zip(&self.values)
    }

    pub fn same_specs(&self, other: &ParamSet) -> bool {
        Arc::ptr_eq(&self.specs, &other.specs) || self.specs == other.specs
    }

    fn check(&self, other: &ParamSet) -> Result<(), ParamsError> {
        if self.same_specs(other) {
            Ok(())
        } else {
            Err(ParamsError::SpecMismatch)
        }
    }

    fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<Self, ParamsError> {
        self.check(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.zip_map(b, &f))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            specs: self.specs.clone(),
            values,
        })
    }

    /// `a * x + y`
    pub fn axpy(a: f64, x: &ParamSet, y: &ParamSet) -> Result<Self, ParamsError> {
        x.zip_with(y, |xv, yv| a * xv + yv)
    }

    pub fn hadamard(x: &ParamSet, y: &ParamSet) -> Result<Self, ParamsError> {
        x.zip_with(y, |a, b| a * b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<Self, ParamsError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            specs: self.specs.clone(),
            values: self.values.iter().map(|v| v.map(&f)).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn unflatten(specs: Specs, flat: &[f64]) -> Result<Self, ParamsError> {
        let expected: usize = specs.iter().map(LayerSpec::numel).sum();
        if flat.len() != expected {
            return Err(ParamsError::LengthMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let mut values = Vec::with_capacity(specs.len());
        for s in specs.iter() {
            let n = s.numel();
            values.push(Tensor::new(s.shape.clone(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Self::new(specs, values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Records every layer on `tape` as a leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Reads values back from tape nodes (e.g. a merged set).
    pub fn from_vars(specs: Specs, vars: &[Var<'_>]) -> Result<Self, ParamsError> {
        Self::new(specs, vars.iter().map(|v| (*v.value()).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specs_2x3() -> Specs {
        vec![
            LayerSpec::new("w", LayerKind::LinearWeight, vec![2, 3], 0),
            LayerSpec::new("b", LayerKind::LinearBias, vec![3], 0),
        ]
        .into()
    }

    fn vec_set(vals: &[f64]) -> ParamSet {
        let specs: Specs = vec![LayerSpec::new("v", LayerKind::LinearBias, vec![vals.len()], 0)].into();
        ParamSet::new(specs, vec![Tensor::vector(vals.to_vec())]).unwrap()
    }

    #[test]
    fn total_dim_counts_all_layers() {
        assert_eq!(ParamSet::zeros(specs_2x3()).total_dim(), 9);
    }

    #[test]
    fn axpy_direct() {
        let out = ParamSet::axpy(0.5, &vec_set(&[0.5, -1.0]), &vec_set(&[1.0, 2.0])).unwrap();
        assert_eq!(out.flatten(), vec![1.25, 1.5]);
    }

    #[test]
    fn identities() {
        let x = ParamSet::unflatten(specs_2x3(), &(0..9).map(|i| i as f64 * 0.7 - 2.0).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(ParamSet::axpy(1.0, &x, &x.zeros_like()).unwrap(), x);
        assert_eq!(ParamSet::hadamard(&x, &x.ones_like()).unwrap(), x);
    }

    #[test]
    fn unflatten_wrong_length() {
        assert!(matches!(
            ParamSet::unflatten(specs_2x3(), &[0.0; 8]),
            Err(ParamsError::LengthMismatch { expected: 9, actual: 8 })
        ));
    }

    #[test]
    fn spec_mismatch_rejected() {
        let a = ParamSet::zeros(specs_2x3());
        assert!(ParamSet::axpy(1.0, &a, &vec_set(&[1.0])).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs: Specs = vec![
            LayerSpec::new("w", LayerKind::LinearWeight, vec![2], 0),
            LayerSpec::new("w", LayerKind::LinearBias, vec![2], 0),
        ]
        .into();
        assert!(matches!(
            ParamSet::new(specs, vec![Tensor::zeros(&[2]), Tensor::zeros(&[2])]),
            Err(ParamsError::DuplicateName(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn flatten_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 9)) {
            let p = ParamSet::unflatten(specs_2x3(), &vals).unwrap();
            let q = ParamSet::unflatten(specs_2x3(), &p.flatten()).unwrap();
            prop_assert_eq!(&q, &p);
            prop_assert_eq!(q.flatten(), vals);
        }

        #[test]
        fn ops_commute_with_flatten(
            x in proptest::collection::vec(-10f64..10.0, 9),
            y in proptest::collection::vec(-10f64..10.0, 9),
            a in -3f64..3.0,
        ) {
            let px = ParamSet::unflatten(specs_2x3(), &x).unwrap();
            let py = ParamSet::unflatten(specs_2x3(), &y).unwrap();
            let ax: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + yv).collect();
            prop_assert_eq!(ParamSet::axpy(a, &px, &py).unwrap().flatten(), ax);
            let hd: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| xv * yv).collect();
            prop_assert_eq!(ParamSet::hadamard(&px, &py).unwrap().flatten(), hd);
        }
    }
}
