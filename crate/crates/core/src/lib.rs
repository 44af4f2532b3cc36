//! Open-world detection core: numerics, synthetic data, the detector and its
//! training/evaluation math. No I/O lives here.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod numerics;
pub mod boxes;
pub mod detector;
pub mod etop;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod objectness;
pub mod protocol;
pub mod shapeworld;
pub mod tdqi;
