//! Packing of free model parameters into a flat vector and back.

use serde::{Deserialize, Serialize};

use super::{ModelSpec, SlopeConstraint};

/// Where one item-by-dimension slope takes its value from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeSlot {
    /// Free (or equality-class) slope living at this packed index.
    Packed(usize),
    /// Slope fixed at a constant.
    Const(f64),
}

/// Index map between the packed parameter vector and the (slope, intercept,
/// hyper-parameter) slots of a model.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_params: usize,
    pub n_dims: usize,
    pub categories: Vec<usize>,
    slopes: Vec<SlopeSlot>,        // item-major, J * M
    intercept_start: Vec<usize>,   // packed start of item j's intercepts
    pub variance: Option<usize>,
    pub names: Vec<String>,
}

impl ParamLayout {
    #[inline]
    pub fn slope_slot(&self, item: usize, dim: usize) -> SlopeSlot {
        self.slopes[item * self.n_dims + dim]
    }

    /// Packed index of a slope when it is free or class-shared.
    #[inline]
    pub fn slope_index(&self, item: usize, dim: usize) -> Option<usize> {
        match self.slope_slot(item, dim) {
            SlopeSlot::Packed(i) => Some(i),
            SlopeSlot::Const(_) => None,
        }
    }

    /// Packed index of intercept k (0-based) of an item.
    #[inline]
    pub fn intercept_index(&self, item: usize, k: usize) -> usize {
        self.intercept_start[item] + k
    }

    pub fn n_items(&self) -> usize {
        self.categories.len()
    }

    /// Expand a packed vector into per-item parameter structs.
    pub fn unpack(&self, packed: &[f64]) -> Unpacked {
        debug_assert_eq!(packed.len(), self.n_params);
        let items = (0..self.n_items())
            .map(|j| {
                let slopes = (0..self.n_dims)
                    .map(|m| match self.slope_slot(j, m) {
                        SlopeSlot::Packed(i) => packed[i],
                        SlopeSlot::Const(v) => v,
                    })
                    .collect();
                let k = self.categories[j];
                let start = self.intercept_start[j];
                let intercepts = packed[start..start + (k - 1)].to_vec();
                ItemParams { slopes, intercepts }
            })
            .collect();
        Unpacked { items, variance: self.variance.map(|i| packed[i]) }
    }

    /// Collapse per-item parameters back into a packed vector. Exact inverse
    /// of [`unpack`](Self::unpack); for equality classes the value is read
    /// from the first member item.
    pub fn pack(&self, unpacked: &Unpacked) -> ParameterVector {
        let mut values = vec![0.0; self.n_params];
        for (j, item) in unpacked.items.iter().enumerate() {
            for m in 0..self.n_dims {
                if let SlopeSlot::Packed(i) = self.slope_slot(j, m) {
                    values[i] = item.slopes[m];
                }
            }
            let start = self.intercept_start[j];
            values[start..start + item.intercepts.len()].copy_from_slice(&item.intercepts);
        }
        if let (Some(i), Some(v)) = (self.variance, unpacked.variance) {
            values[i] = v;
        }
        ParameterVector { values }
    }
}

/// One item's slopes (length M) and intercepts (length K-1).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemParams {
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
}

/// Fully expanded parameters for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Unpacked {
    pub items: Vec<ItemParams>,
    pub variance: Option<f64>,
}

/// The packed vector of all free parameters (item parameters first, then
/// free hyper-parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl ModelSpec {
    /// Build the packed-parameter layout for this spec. Slopes come first
    /// (item-major, equality classes allocated at first occurrence), then
    /// intercepts, then the free variance when present.
    pub fn layout(&self) -> ParamLayout {
        let j = self.n_items();
        let m = self.n_dims;
        let mut slopes = Vec::with_capacity(j * m);
        let mut names = Vec::new();
        let mut next = 0usize;
        let mut class_index: Vec<(u32, usize)> = Vec::new();
        for jj in 0..j {
            for mm in 0..m {
                let slot = match self.slopes[jj][mm] {
                    SlopeConstraint::Free => {
                        let i = next;
                        next += 1;
                        names.push(format!("a[{},{}]", jj + 1, mm + 1));
                        SlopeSlot::Packed(i)
                    }
                    SlopeConstraint::Fixed(v) => SlopeSlot::Const(v),
                    SlopeConstraint::Class(c) => {
                        if let Some(&(_, i)) = class_index.iter().find(|(cc, _)| *cc == c) {
                            SlopeSlot::Packed(i)
                        } else {
                            let i = next;
                            next += 1;
                            names.push(format!("a[class {}]", c));
                            class_index.push((c, i));
                            SlopeSlot::Packed(i)
                        }
                    }
                };
                slopes.push(slot);
            }
        }
        let mut intercept_start = Vec::with_capacity(j);
        for jj in 0..j {
            intercept_start.push(next);
            for k in 1..self.categories[jj] {
                names.push(format!("b[{},{}]", jj + 1, k));
                next += 1;
            }
        }
        let variance = if matches!(self.covariance, super::Covariance::FreeVariance) {
            let i = next;
            next += 1;
            names.push("var".into());
            Some(i)
        } else {
            None
        };
        ParamLayout {
            n_params: next,
            n_dims: m,
            categories: self.categories.clone(),
            slopes,
            intercept_start,
            variance,
            names,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use proptest::prelude::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::two_pl(10).layout().n_params, 20);
        assert_eq!(ModelSpec::rasch(10).layout().n_params, 11);
        assert_eq!(ModelSpec::grm(10, 4).layout().n_params, 40);
        assert_eq!(ModelSpec::two_dim_two_pl(10).layout().n_params, 29);
        assert_eq!(ModelSpec::two_pl_constrained(10, 0..5, 5..10).layout().n_params, 11);
        // Application-style 6-item 5-category pair
        assert_eq!(ModelSpec::grm(6, 5).layout().n_params, 30);
        assert_eq!(ModelSpec::md_grm(6, 5, 2).layout().n_params, 35);
    }

    #[test]
    fn equality_class_shares_one_index() {
        let spec = ModelSpec::two_pl_constrained(4, 0..2, 2..4);
        let layout = spec.layout();
        assert_eq!(layout.slope_index(0, 0), layout.slope_index(1, 0));
        assert_eq!(layout.slope_index(2, 0), None);
    }

    proptest! {
        #[test]
        fn unpack_pack_round_trip(values in proptest::collection::vec(-5.0f64..5.0, 29)) {
            let spec = ModelSpec::two_dim_two_pl(10);
            let layout = spec.layout();
            prop_assert_eq!(values.len(), layout.n_params);
            let unpacked = layout.unpack(&values);
            let packed = layout.pack(&unpacked);
            prop_assert_eq!(packed.values, values);
        }

        #[test]
        fn unpack_pack_round_trip_rasch(values in proptest::collection::vec(-5.0f64..5.0, 10), var in 0.1f64..4.0) {
            let spec = ModelSpec::rasch(10);
            let layout = spec.layout();
            let mut all = values.clone();
            all.push(var);
            let unpacked = layout.unpack(&all);
            prop_assert_eq!(unpacked.variance, Some(var));
            let packed = layout.pack(&unpacked);
            prop_assert_eq!(packed.values, all);
        }
    }
}
