//! Patch-based robustness tooling for image classifiers.
//!
//! - [`augment`]: Patch Mixing, Mixup and CutMix with proportional label mixing.
//! - [`attacks`]: patch mix, patch drop and patch permutation at fixed information loss.
//! - [`smd`]: occluder superimposition at controlled occlusion fractions.
//! - [`crise`]: contrastive RISE saliency and patch selectivity.
//! - [`oracle`]: black-box classifiers, in-process or over an NDJSON pipe.
//! - [`harness`]: dataset sweeps producing accuracy tables and curves.

pub mod attacks;
pub mod augment;
pub mod crise;
pub mod error;
pub mod grid;
pub mod harness;
pub mod image;
pub mod oracle;
pub mod rng;
pub mod smd;

pub use attacks::{
    apply_permutation, invert_permutation, patch_drop, patch_mix_attack, patch_mix_attack_per_patch, patch_permute,
    unpermute, AttackKind, AttackSpec, DropFill, MAX_LOSS,
};
pub use augment::{
    augment_batch, augment_pair, cutmix, mix_labels, mixup, patch_mix, AugmentPolicy, CategoryDistribution,
    MixMethod, MixedSample, RatioDraw,
};
pub use crise::{
    crise_map, crise_map_with_masks, generate_rise_masks, inverse_patch_selectivity, patch_selectivity,
    softmax_normalize, RiseConfig, RiseMaskGenerator, SaliencyMap, ScoreSpace,
};
pub use error::{Error, Result};
pub use grid::{make_grid, mask_to_pixel_field, sample_patch_mask, GridSpec, PatchGrid, PatchMask};
pub use harness::{
    emit_plots, run_attack_sweep, run_selectivity_eval, run_sweep, Condition, Dataset, EvalRecord, PlotSeries,
    SelectivityConfig, SelectivityReport, SweepConfig, SweepSummary, write_eval_outputs,
};
pub use image::{load_image, save_png, ImageTensor};
pub use oracle::{
    open_oracle, Classifier, Contrastive, ContrastiveClassifier, ExternalOracle, LinearProbe, OracleScores,
    OracleSpec, ScoreKind,
};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use smd::{
    generate_smd, occlude_image, place_occluders, replay_manifest, OcclusionManifest, OccluderSprite, SmdConfig,
    SpriteLibrary,
};
