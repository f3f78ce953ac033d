//! Block-structured backbones, generalized/specialized decomposition and
//! task-driven expansion.

mod backbone;
mod model;

pub use backbone::{build, build_range, init_bound, BackboneSpec, BackboneState, Block};
pub use model::{
    projected_param_count, BoundModel, ClassifierInit, ExpandableModel, ForwardPass, FreezePolicy, Strategy,
};
