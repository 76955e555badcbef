//! Compartmental simulation of open thermodynamic gas networks.
//!
//! The crate models networks of ideal-gas compartments that exchange matter
//! and heat with each other and with the exterior through ports, heat
//! sources, diffusive couplings, and an optional piston. It integrates the
//! resulting evolution equations and audits every trajectory against the
//! first law, the second law, and mole balance. A generic solver for
//! time-dependent nonlinearly constrained Lagrangian systems provides an
//! independent cross-check of the specialized equations.

pub mod audit;
pub mod dynamics;
pub mod gas;
pub mod integrate;
pub mod model;
pub mod nonholonomic;
pub mod scenario;
