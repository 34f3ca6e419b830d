//! Back-end toolkit for conversational speech recognition experiments.
//!
//! - [`graph`]: mixed-history senone LM and the sparse denominator graph
//! - [`seqtrain`]: lattice-free MMI forward-backward, objective and gradients
//! - [`am`]: toy acoustic model with spatial smoothing and speaker conditioning
//! - [`lm`]: backoff N-gram and toy recurrent language models
//! - [`rescore`]: N-best rescoring, weight optimisation, oracle WER
//! - [`combine`]: confusion networks and multi-system combination
//! - [`score`]: NIST-style alignment, WER and error tables
//! - [`parallel`]: 1-bit quantised data-parallel SGD simulator

pub mod am;
pub mod combine;
pub mod error;
pub mod graph;
pub mod lm;
pub mod numeric;
pub mod parallel;
pub mod rescore;
pub mod score;
pub mod seqtrain;
