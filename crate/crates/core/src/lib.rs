//! Low-thrust cislunar trajectory workbench.
//!
//! The crate is organized around a single pipeline: normalized Earth-Moon
//! CR3BP dynamics ([`cr3bp`]), halo-orbit families and their stable
//! manifolds ([`halo`]), a forward-backward shooting transcription of two
//! transfer problems ([`transcribe`]), an augmented-Lagrangian solver
//! ([`nlp`]), a dataset farm ([`datagen`]), a conditional denoising
//! diffusion model over solved decision vectors ([`ddpm`]), and
//! warm-start comparison studies ([`bench`]). The [`cli`] module wires
//! everything to the `cislunar` binary.

pub mod bench;
pub mod cli;
pub mod cr3bp;
pub mod datagen;
pub mod ddpm;
pub mod halo;
pub mod nlp;
pub mod ode;
pub mod transcribe;

pub use cr3bp::{ControlSchedule, State7, Stm, SystemParams};




