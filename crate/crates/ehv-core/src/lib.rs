#![forbid(unsafe_code)]

//! Runtime governance engine for agentic token generation.
//!
//! Policies are right-linear grammars compiled to DFAs whose per-state
//! allowed-token sets mask logits before sampling; policy state is a
//! causal-graph CRDT of signed mutations committed as a Merkle root; an
//! epoch attestation cache gives constant-time in-epoch verification with
//! strict fail-closed semantics; every decision lands in a hash-chained,
//! OSCAL-exportable audit log. A deterministic discrete-event simulator and
//! a small-scope exhaustive explorer check the end-to-end safety invariant:
//! no invalid action ever receives a PERMIT verdict.
//!
//! The enforcement core in miniature — a disallowed token cannot be
//! sampled no matter how strongly the model scored it:
//!
//! ```
//! use ehv_core::dfa::compile;
//! use ehv_core::grammar::parse_grammar;
//! use ehv_core::logits::{mask, softmax, GreedySampler, Logits, Sampler};
//! use ehv_core::Vocabulary;
//!
//! let grammar = parse_grammar(
//!     "token \"hold\" = 0\ntoken \"fire\" = 1\nrule Action -> \"hold\"\n",
//! )?;
//! let dfa = compile(&grammar, &Vocabulary::anonymous(2))?;
//!
//! // The model wants the forbidden token; the mask zeroes it out.
//! let raw = Logits::new(vec![-1.0, 9.0]);
//! let masked = mask(&raw, &dfa.allowed(dfa.start())?)?;
//! assert_eq!(softmax(&masked)[1], 0.0);
//! assert_eq!(GreedySampler.sample(&masked), Some(0));
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod clock;
pub mod crypto;
pub mod dfa;
pub mod epoch;
pub mod fixtures;
pub mod gbom;
pub mod grammar;
pub mod identity;
pub mod logits;
pub mod pep;
pub mod policy;
pub mod sim;
pub mod vocab;

pub use crypto::Digest;
pub use vocab::{TokenId, Vocabulary};
