//! Counterfactual effect decomposition for multi-branch ensemble classifiers.
//!
//! An ensemble fuses a question-only branch, a vision-only branch and a
//! vision-language branch. Subtracting the score obtained when only the
//! question is seen (the natural direct effect) from the factual score
//! leaves the total indirect effect, which ranks answers without the
//! memorized answer prior of the question-only shortcut.
//!
//! - [`effects`]: fusion functions and TE/NDE/TIE/TDE/NIE.
//! - [`nn`]: dense layers, losses, gradient checking and Adam.
//! - [`model`]: the three-branch ensemble.
//! - [`data`]: synthetic changing-priors task.
//! - [`train`] and [`eval`]: training loop, metrics and ablations.
//! - [`cli`]: the `cf-effects` command.

pub mod cli;
pub mod data;
pub mod effects;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

use std::sync::OnceLock;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CF_EFFECTS_THREADS";

/// Runs `f` inside the crate's worker pool, sized by `CF_EFFECTS_THREADS`
/// (all cores when unset or unparsable).
pub fn install<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool")
    });
    pool.install(f)
}
