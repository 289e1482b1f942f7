//! Named parameter blocks backed by one flat vector.
//!
//! The flat vector is the unit of optimization, checkpointing, and freezing;
//! blocks are 2-D views addressed by name with a stable ordering derived
//! from the model configuration.

use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real, Var};
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    pub data: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn from_shapes(shapes: &[(String, usize, usize)]) -> Self {
        let mut specs = Vec::with_capacity(shapes.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            assert!(
                index.insert(name.clone(), specs.len()).is_none(),
                "duplicate parameter block {name}"
            );
            specs.push(ParamSpec {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
                offset,
            });
            offset += rows * cols;
        }
        ParamSet {
            specs,
            index,
            data: vec![T::zero(); offset],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    /// Deterministic initialization: gains to 1, biases to 0, everything
    /// else N(0, 1/fan_in) with fan_in = rows of the block.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &self.specs {
            let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".gain") {
                slice.fill(T::one());
            } else if spec.name.ends_with(".b") {
                slice.fill(T::zero());
            } else {
                let std = T::from_f64(1.0 / (spec.rows as f64).sqrt());
                for v in slice.iter_mut() {
                    *v = T::standard_normal(&mut rng) * std;
                }
            }
        }
    }

    pub fn view(&self, name: &str) -> ArrayView2<'_, T> {
        let spec = self.spec(name).unwrap_or_else(|| panic!("no parameter block {name}"));
        ArrayView2::from_shape((spec.rows, spec.cols), &self.data[spec.offset..spec.offset + spec.len()])
            .expect("param view")
    }

    pub fn view_mut(&mut self, name: &str) -> ArrayViewMut2<'_, T> {
        let spec = self
            .spec(name)
            .unwrap_or_else(|| panic!("no parameter block {name}"))
            .clone();
        ArrayViewMut2::from_shape(
            (spec.rows, spec.cols),
            &mut self.data[spec.offset..spec.offset + spec.len()],
        )
        .expect("param view")
    }

    pub fn to_array(&self, name: &str) -> Array2<T> {
        self.view(name).to_owned()
    }

    /// Overwrites this set's blocks from `other` wherever names and shapes
    /// match; returns the number of blocks copied.
    pub fn copy_matching(&mut self, other: &ParamSet<T>) -> usize {
        let mut copied = 0;
        for spec in other.specs.clone() {
            if let Some(dst) = self.spec(&spec.name).cloned() {
                if dst.rows == spec.rows && dst.cols == spec.cols {
                    let src = &other.data[spec.offset..spec.offset + spec.len()];
                    self.data[dst.offset..dst.offset + dst.len()].copy_from_slice(src);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Rebuilds the structured set from a flat vector with this set's layout.
    pub fn unflatten(&self, flat: &[T]) -> Result<ParamSet<T>> {
        if flat.len() != self.data.len() {
            return Err(TrimotError::Shape(format!(
                "flat vector length {} does not match parameter count {}",
                flat.len(),
                self.data.len()
            )));
        }
        Ok(ParamSet {
            specs: self.specs.clone(),
            index: self.index.clone(),
            data: flat.to_vec(),
        })
    }

    /// Boolean per flat index, true where the block name starts with any of
    /// the given prefixes.
    pub fn prefix_mask(&self, prefixes: &[&str]) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for spec in &self.specs {
            if prefixes.iter().any(|p| spec.name.starts_with(p)) {
                mask[spec.offset..spec.offset + spec.len()].fill(true);
            }
        }
        mask
    }

    /// Name of the block owning flat index `i`.
    pub fn block_of(&self, i: usize) -> &str {
        for spec in &self.specs {
            if i >= spec.offset && i < spec.offset + spec.len() {
                return &spec.name;
            }
        }
        panic!("flat index {i} out of range");
    }
}

impl<T: Real> Graph<T> {
    /// Registers a parameter block as a tape leaf; its gradient lands in the
    /// flat slot recorded by [`Graph::param_grads`].
    pub fn param(&mut self, set: &ParamSet<T>, name: &str) -> Var {
        let spec = set
            .spec(name)
            .unwrap_or_else(|| panic!("no parameter block {name}"))
            .clone();
        let v = self.constant(set.view(name).to_owned());
        self.param_nodes.push((v.0, spec.offset, spec.rows, spec.cols));
        v
    }

    /// Accumulates parameter gradients from a backward pass into `flat`
    /// (which must have the full parameter length).
    pub fn param_grads(&self, grads: &[Option<Array2<T>>], flat: &mut [T]) {
        for &(node, offset, rows, cols) in &self.param_nodes {
            if let Some(g) = &grads[node] {
                debug_assert_eq!(g.dim(), (rows, cols));
                let mut i = offset;
                for v in g.iter() {
                    flat[i] = flat[i] + *v;
                    i += 1;
                }
            }
        }
    }
}
