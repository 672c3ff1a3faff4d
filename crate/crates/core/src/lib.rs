//! Simulator and resource planner for linear quantum-repeater chains built
//! from fusillades (banks of transmitters) and fusiland banks (receivers).
//!
//! * [`algebra`]: link failure probabilities, purification and swap
//!   composition, in closed form and per sampled pair.
//! * [`protocol`]: the fusilier, fusiland and node state machines.
//! * [`engine`]: a deterministic discrete-event core with reproducible
//!   random substreams.
//! * [`network`]: pipelined herald sweeps over a whole chain.
//! * [`metrics`]: run summaries, rate arithmetic and sizing tables.
//!
//! ```
//! use fusillade::algebra::{min_fusiliers, purify3_analytic, Fidelity};
//!
//! // Fusiliers needed to fill one fusiland with 99% certainty at p = 0.25.
//! assert_eq!(min_fusiliers(1, 0.25, 0.01)?, 17);
//!
//! let purified = purify3_analytic(Fidelity::new(0.95)?);
//! assert!(purified.value() >= 0.99);
//! # Ok::<(), fusillade::Error>(())
//! ```

pub mod algebra;
pub mod engine;
mod error;
pub mod metrics;
pub mod network;
pub mod protocol;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets stay in step with the API.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sizing.md")]
    mod sizing {}
    #[doc = include_str!("../../../book/src/purification.md")]
    mod purification {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/pipelining.md")]
    mod pipelining {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
