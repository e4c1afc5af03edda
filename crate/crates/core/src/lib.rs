//! Dense per-point pseudo labels for point clouds from box annotations and
//! subcloud class tags, plus a small segmentation network trained on them.
//!
//! Stages, in pipeline order:
//!
//! 1. [`partition`]: split points into potential foreground, ambiguous and
//!    background by box membership.
//! 2. [`grabcut`]: unsupervised foreground extraction inside each box.
//! 3. [`pcam`]: a tag classifier whose class activations label background points.
//! 4. [`ast`]: attention-based self-training on the merged pseudo labels.
//! 5. [`bench`]: metrics, box perturbations and the synthetic scene generator.
//!
//! [`pipeline`] wires them together; the `boxseg` binary exposes each stage.

pub mod ast;
pub mod bench;
pub mod features;
pub mod grabcut;
pub mod net;
pub mod partition;
pub mod pcam;
pub mod pipeline;
pub mod scene;
pub mod spatial;

pub use partition::{partition_points, PartitionMap, PointCategory};
pub use scene::{
    parse_labels, parse_scene, point_in_box, serialize_labels, serialize_scene, BoundingBox, Point, Provenance,
    PseudoLabel, PseudoLabelMap, Scene, SceneError, Subcloud, SubcloudTag,
};
