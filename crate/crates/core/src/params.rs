//! Named parameter trees.
//!
//! Each weight struct is generic over its leaf type so the same layout can
//! hold stored tensors, tape variables bound for one forward pass, or
//! gradients. Leaf names are dotted paths (`head.layer1.wq`).

use rand::Rng;

use crate::numerics::Tensor;

macro_rules! param_tree {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $leaf:ident ),* $(,)?
            $( ; $( $child:ident : $cty:ident ),* $(,)? )?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $( pub $leaf: T, )*
            $( $( pub $child: $cty<T>, )* )?
        }

        impl<T> $name<T> {
            pub fn map_named<U>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> U,
            ) -> $name<U> {
                $name {
                    $( $leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf), )*
                    $( $( $child: self.$child.map_named(
                        &$crate::params::join(prefix, stringify!($child)), f), )* )?
                }
            }

            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $( f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf); )*
                $( $( self.$child.visit(&$crate::params::join(prefix, stringify!($child)), f); )* )?
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf); )*
                $( $( self.$child.visit_mut(&$crate::params::join(prefix, stringify!($child)), f); )* )?
            }
        }
    };
}

pub(crate) use param_tree;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Projection init: N(0, 1 / rows).
pub(crate) fn proj<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

pub(crate) fn zeros_row(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

pub(crate) fn ones_row(n: usize) -> Tensor {
    Tensor::filled(&[1, n], 1.0)
}
