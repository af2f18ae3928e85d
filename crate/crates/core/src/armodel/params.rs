//! Flat parameter storage with named tensors in declaration order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Every trainable value lives in one contiguous vector; tensors are views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub specs: Vec<TensorSpec>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero tensor and returns its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.data.len();
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.data.resize(offset + spec.len(), 0.0);
        self.specs.push(spec);
        offset
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn fill(&mut self, offset: usize, len: usize, value: f64) {
        self.data[offset..offset + len]
            .iter_mut()
            .for_each(|v| *v = value);
    }

    pub fn fill_normal<R: Rng>(&mut self, offset: usize, len: usize, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut self.data[offset..offset + len] {
            *v = dist.sample(rng);
        }
    }

    /// Mask of entries subject to weight decay (rank-2 tensors).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for s in &self.specs {
            if s.shape.len() == 2 {
                mask[s.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_follow_declaration_order() {
        let mut p = ParamStore::new();
        let a = p.add("a", &[2, 3]);
        let b = p.add("b", &[4]);
        assert_eq!((a, b, p.len()), (0, 6, 10));
        assert_eq!(p.spec("b").unwrap().range(), 6..10);
        let m = p.decay_mask();
        assert!(m[..6].iter().all(|x| *x) && m[6..].iter().all(|x| !*x));
    }
}
