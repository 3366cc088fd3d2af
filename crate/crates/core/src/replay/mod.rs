//! Episodic replay with sequence-window slicing.

mod history;
mod snapshot;
mod store;

pub use history::RollingHistory;
pub use snapshot::{read_snapshot, write_snapshot};
pub use store::{
    supervision_positions, EpisodeStore, Record, SequenceBatch, SequenceSample, SliceMode,
    SliceSpec, Supervision, Transition,
};
