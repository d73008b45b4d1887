//! The black box: quad scenes, a pinhole camera, direct and one-bounce
//! evaluation from primary-sample-space points, analytic toy targets, and
//! brute-force reference images.

pub mod geom;
mod blackbox;
mod reference;
mod scene;
mod toy;

pub use blackbox::{eval_direct, eval_indirect, eval_toy, BlackBoxRenderer, PathSample, RenderMode};
pub use reference::reference_render;
pub use scene::{box_manylights, builtin, corridor_indirect, Camera, Scene};
pub use toy::{gauss_legendre_unit, ToyDensity, ToyKind};
