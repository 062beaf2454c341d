//! Geometric multipath channel model for the RIS-aided uplink: UPA steering
//! vectors, MU-RIS and RIS-BS channels, received signals, and RIS phase
//! shift profiles.

mod links;
mod phase;
mod scenario;
mod signal;
mod steering;
mod types;

pub use links::{
    channel_from_paths, channel_realization, mu_ris_channel, mu_ris_paths, ris_bs_channel,
    ris_bs_channel_from_paths, ris_bs_paths,
};
pub use phase::{optimize_phase_shifts, PhaseOptimization};
pub use scenario::{dbm_to_watts, ArrayConfig, Region, Scatterer, Scenario, ScenarioConfig, SPEED_OF_LIGHT};
pub use signal::{bs_received, cascaded_channel, random_phase_shifts, received_snr, ris_received};
pub use steering::{clamp_angle, geometric_angles, path_gain, steering_vector};
pub use types::{check_angle, ArrayGeometry, ChannelRealization, PathSet, PhaseShiftVector, Position};
