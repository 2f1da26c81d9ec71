//! Entropy dynamics laboratory for tabular softmax policies.
//!
//! This crate implements a desk-scale numerical testbed for studying how
//! policy entropy evolves under policy-gradient style reinforcement learning
//! with verifiable (binary) rewards:
//!
//! * [`policy`] — tabular softmax policies (bandit and autoregressive), exact
//!   probabilities, entropies and score-function Jacobians;
//! * [`tasks`] — synthetic exact-match sequence tasks and seeded group rollouts;
//! * [`advantage`] — REINFORCE / GRPO / RLOO advantage estimators and prompt
//!   filtering;
//! * [`losses`] — surrogate losses and update rules (PG, NPG, PPO-clip,
//!   clip-higher, entropy bonus, reference-KL, Clip-Cov, KL-Cov) with analytic
//!   gradients over the logit table;
//! * [`dynamics`] — first-order entropy-change predictions and their numerical
//!   verification, plus training-run instrumentation (batch covariance,
//!   consumption curves, covariance quantile tables);
//! * [`fitlab`] — closed-form fits of the entropy/performance law
//!   `R = -a*exp(H) + b` and log-linear coefficient scaling;
//! * [`harness`] — experiment orchestration: config, seeded deterministic runs,
//!   CSV/JSONL persistence and verification suites.

pub mod advantage;
pub mod dynamics;
pub mod fitlab;
pub mod harness;
pub mod losses;
pub mod numeric;
pub mod policy;
pub mod tasks;
