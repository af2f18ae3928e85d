//! Synthetic driving world: scenes, expert demonstrations, BEV
//! rasterization, closed-loop execution and driving metrics.

pub mod episode;
pub mod eval;
pub mod expert;
pub mod geometry;
pub mod raster;
pub mod scene;
pub mod sim;

pub use episode::{
    episode_seed, expert_trace, generate_dataset, load_dataset, read_episode, rollout_episode,
    write_episode, Episode, EpisodeConfig, FrameRecord, Manifest, ManifestEntry, SimConfig,
    MANIFEST_FILE,
};
pub use eval::{
    aggregate, closed_loop_eval, closed_loop_scene, open_loop_eval, pdms, Aggregate,
    ClosedLoopConfig, ClosedLoopResult, DrivingPolicy, ExpertDriver, Observation, OpenLoopPolicy,
    OpenLoopRow, PolicyOutput, ReplayPolicy, StopDriver,
};
pub use expert::{expert_policy, fit_to_grid, ExpertAction, ExpertConfig};
pub use geometry::Rect;
pub use raster::{lane_likelihood_map, rasterize_bev, BevConfig};
pub use scene::{build_scene, command, Agent, Difficulty, Lane, Scene, N_COMMANDS};
pub use sim::{distances, frame_reward, step, time_to_collision, Distances, StepFlags};
