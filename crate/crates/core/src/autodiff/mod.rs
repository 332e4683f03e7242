//! Minimal reverse-mode differentiation over dense NHWC tensors.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the adjoints in reverse. One graph is built per forward pass and
//! owned by a single thread; independent graphs share nothing.

/// Channels per register block of the blocked kernels.
const LANES: usize = 16;

/// Calls `$f::<T, W>(args.., c0)` for each block `c0..c0 + W` of at most
/// [`LANES`] channels, with `W` a const parameter so accumulators are
/// fixed-size arrays.
macro_rules! per_block {
    ($channels:expr, $f:ident($($arg:expr),*)) => {
        for c0 in (0..$channels).step_by(LANES) {
            match ($channels - c0).min(LANES) {
                1 => $f::<T, 1>($($arg,)* c0),
                2 => $f::<T, 2>($($arg,)* c0),
                3 => $f::<T, 3>($($arg,)* c0),
                4 => $f::<T, 4>($($arg,)* c0),
                5 => $f::<T, 5>($($arg,)* c0),
                6 => $f::<T, 6>($($arg,)* c0),
                7 => $f::<T, 7>($($arg,)* c0),
                8 => $f::<T, 8>($($arg,)* c0),
                9 => $f::<T, 9>($($arg,)* c0),
                10 => $f::<T, 10>($($arg,)* c0),
                11 => $f::<T, 11>($($arg,)* c0),
                12 => $f::<T, 12>($($arg,)* c0),
                13 => $f::<T, 13>($($arg,)* c0),
                14 => $f::<T, 14>($($arg,)* c0),
                15 => $f::<T, 15>($($arg,)* c0),
                _ => $f::<T, LANES>($($arg,)* c0),
            }
        }
    };
}

pub mod attention;
pub mod conv;
mod gradcheck;
mod graph;
pub mod norm;
pub mod sample;

pub use gradcheck::{grad_check, GradCheckError, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NormStats, Var};

#[cfg(test)]
mod tests;
