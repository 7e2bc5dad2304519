//! Verb-conditioned object selection by energy minimization.
//!
//! A scene is a set of candidate regions, each with grasp proposals and an
//! embedding. For a verb query every region gets three energies (grasp
//! feasibility, knowledge-base affordance, embedding alignment) and the
//! region with the lowest weighted sum wins. Every number behind a
//! decision is kept in the result so it can be inspected or edited.

pub mod dataio;
pub mod engine;
pub mod eval;
pub mod grasp;
pub mod ingest;
pub mod kb;
pub mod percept;
pub mod scene;
pub mod synth;

pub use engine::{
    explain, ground, total_energy, EnergyBreakdown, EnergyWeights, Explanation, GroundError,
    GroundingConfig, GroundingResult, HypothesisMode,
};
pub use grasp::{GraspCandidate, GraspRect};
pub use kb::{EdgeEdit, EdgeKind, GroundingPath, KbError, KnowledgeBase, PathCombiner};
pub use percept::{EmbeddingTable, EmbeddingVector, HypothesisPosterior};
pub use scene::{BBox, GroundTruth, Scene, SceneCandidate};
