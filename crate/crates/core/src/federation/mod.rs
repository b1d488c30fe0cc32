//! The training protocol: client rounds, server aggregation with a central
//! optimizer, and the nine method variants.

mod client;
mod experiment;
mod method;
mod packet;
mod server;

pub use client::{client_round, ClientContext, ClientOutput, ClientSettings, UserState};
pub use experiment::{run_experiment, Checkpoint, RoundSummary, Simulation};
pub use method::{Assignment, HeadChoice, Method, MethodBehavior};
pub use packet::GradientPacket;
pub use server::{server_aggregate, server_apply, server_noise};
