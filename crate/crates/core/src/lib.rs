//! Deterministic discrete-time simulation of a cooperative signalized
//! intersection, with scripted V2X attack scenarios, a layered
//! misbehavior-detection pipeline, and security-notification mitigation
//! (DENM warnings, traffic-light overrides, key purging).

pub mod agents;
pub mod attacks;
pub mod canbus;
pub mod detection;
pub mod geom;
pub mod messages;
pub mod metrics;
pub mod mitigation;
pub mod runner;
pub mod trust;
pub mod world;
