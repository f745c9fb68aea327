//! Articulated 2D Gaussian surfels: a differentiable tile rasterizer for
//! planar Gaussian primitives, linear blend skinning with learned weight and
//! pose corrections, and the training loop that fits them to masked images.

pub mod articulation;
pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imagebuf;
pub mod loss;
pub mod mlp;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod surfel;
pub mod synth;
pub mod train;

pub use articulation::{Joint, JointTransforms, PoseParams, Skeleton, SkinField};
pub use camera::Camera;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use eval::{evaluate_held_out, EvalOptions, EvalReport};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, ParamClass};
pub use imagebuf::{Image, Plane};
pub use loss::{LossParts, LossWeights};
pub use mlp::Mlp;
pub use pipeline::{Model, ModelGrad};
pub use raster::{compare_with_oracle, render, render_oracle, OracleComparison, RenderOptions, RenderOutput};
pub use scene::{load_dataset, load_scene, save_scene, Rig, SceneFile};
pub use surfel::{PosedSurfel, Surfel};
pub use synth::{generate_synthetic_body, SynthConfig, SyntheticBody};
pub use train::{AblationConfig, Dataset, StepMetrics, TrainConfig, TrainState};
