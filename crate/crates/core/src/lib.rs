//! Tensors, reverse-mode autograd and the building blocks of a small
//! temporal video-language model.
//!
//! ```
//! use tempora_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().trainable());
//! let y = x.mul(x).unwrap().sum();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod attention;
pub mod autograd;
pub mod bank;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interface;
pub mod lm;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Tape, TapeStats, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
