use std::ops::{Add, Index};

use serde::{Deserialize, Serialize};

macro_rules! real_vector {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn dot(&self, other: &[f64]) -> f64 {
                debug_assert_eq!(self.0.len(), other.len());
                self.0.iter().zip(other).map(|(a, b)| a * b).sum()
            }

            pub fn add_assign(&mut self, other: &[f64]) {
                for (a, b) in self.0.iter_mut().zip(other) {
                    *a += b;
                }
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl Add for &$name {
            type Output = $name;
            fn add(self, rhs: &$name) -> $name {
                $name(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
            }
        }
    };
}

real_vector!(
    /// Per-transition features φ(s, a, s′).
    FeatureVector
);
real_vector!(
    /// Linear reward weights; r = φ · w.
    WeightVector
);

impl FeatureVector {
    /// Reward of this feature vector under `w`.
    pub fn reward(&self, w: &WeightVector) -> f64 {
        w.dot(&self.0)
    }
}
