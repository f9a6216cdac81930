//! Reconstruction evaluation over held-out scenes, shared by the ablation
//! harness, the layer probe, and the conditioning-effect check.
//!
//! A scene is reconstructed by sampling from noise with the scene's text
//! tags and (optionally) its reference image; the score is pixel MSE
//! against the held-out target. Paired conditioned/unconditional runs use
//! the same per-scene sampler seed so they start from identical noise.

use crate::encoder::Encoder;
use crate::error::Result;
use crate::fusion::{
    baseline_fuse, BaselineFuse, ConcatProjParams, ExpertVars, FusionCoefficients, FusionVars,
};
use crate::model::{AttentionMode, ModelParams, TextCond};
use crate::sample::{euler_sample, ReferenceInput, SampleSpec, SubjectSource};
use crate::scenes::{scene_at, Pairing, ToyScene};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How reference tokens are produced for evaluation runs.
#[derive(Debug, Clone)]
pub enum FusionVariant {
    Routed,
    Manual(FusionCoefficients),
    Baseline(BaselineFuse),
}

impl FusionVariant {
    pub fn name(&self) -> String {
        match self {
            FusionVariant::Routed => "routed".into(),
            FusionVariant::Manual(c) => format!(
                "manual({:.3},{:.3},{:.3})",
                c.values[0], c.values[1], c.values[2]
            ),
            FusionVariant::Baseline(b) => b.name(),
        }
    }
}

/// Produce reference tokens for one subject under the given variant.
/// Routed/manual run the model's own fusion; baselines run the ablation
/// fusers (concat uses a seed-initialized projection since the trained
/// model has none).
pub fn reference_tokens_for_variant(
    params: &ModelParams<f32>,
    features: &crate::encoder::HierFeatures<f32>,
    variant: &FusionVariant,
) -> Result<(ReferenceInput, Option<FusionCoefficients>)> {
    match variant {
        FusionVariant::Routed => Ok((ReferenceInput::Features(features.clone()), None)),
        FusionVariant::Manual(_) => Ok((ReferenceInput::Features(features.clone()), None)),
        FusionVariant::Baseline(mode) => {
            let mut tape: Tape<f32> = Tape::new();
            let vars = FusionVars::register(&mut tape, &params.fusion);
            let full = [0, 1, 2].map(|i| tape.leaf(features.levels[i].full.clone()));
            let concat_params;
            let concat_vars;
            let concat_ref = if matches!(mode, BaselineFuse::Concat) {
                let mut rng = ChaCha8Rng::seed_from_u64(params.cfg.seed.wrapping_add(0xC0CA));
                concat_params = ConcatProjParams::<f32>::init(
                    params.cfg.encoder.width,
                    params.cfg.width,
                    &mut rng,
                );
                concat_vars = ExpertVars {
                    weight: tape.leaf(concat_params.net.weight.clone()),
                    bias: tape.leaf(concat_params.net.bias.clone()),
                    gamma: tape.leaf(concat_params.net.gamma.clone()),
                    beta: tape.leaf(concat_params.net.beta.clone()),
                };
                Some(&concat_vars)
            } else {
                None
            };
            let tokens = baseline_fuse(&mut tape, &vars, &full, *mode, concat_ref)?;
            Ok((
                ReferenceInput::Tokens(tape.value(tokens).clone()),
                None,
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub scenes: usize,
    pub scene_seed: u64,
    /// First scene index; keep disjoint from training indices for held-out
    /// evaluation.
    pub scene_start: u64,
    pub steps: usize,
    pub guidance: f64,
    pub sample_seed: u64,
    pub mode: AttentionMode,
    pub fusion: FusionVariant,
    pub conditioned: bool,
    pub lambda: f64,
}

impl EvalSpec {
    pub fn held_out(scenes: usize, steps: usize) -> Self {
        EvalSpec {
            scenes,
            scene_seed: 7,
            scene_start: 1_000_000,
            steps,
            guidance: 1.0,
            sample_seed: 2024,
            mode: AttentionMode::InferImageOnly,
            fusion: FusionVariant::Routed,
            conditioned: true,
            lambda: 1.0,
        }
    }
}

fn scene_for(params: &ModelParams<f32>, spec: &EvalSpec, i: usize) -> ToyScene {
    scene_at(
        spec.scene_seed,
        spec.scene_start + i as u64,
        Pairing::Intra,
        params.cfg.image_size,
        params.cfg.encoder.image_size,
    )
}

/// Reconstruct each held-out scene and return its pixel MSE vs target.
pub fn reconstruction_mse(
    params: &ModelParams<f32>,
    encoder: &Encoder<f32>,
    spec: &EvalSpec,
) -> Result<Vec<f64>> {
    let m = params.cfg.image_tokens();
    let mut out = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let scene = scene_for(params, spec, i);
        let subjects = if spec.conditioned {
            let features = encoder.encode(&scene.reference)?;
            let (reference, _) = reference_tokens_for_variant(params, &features, &spec.fusion)?;
            vec![SubjectSource {
                reference,
                mask: vec![1; m],
                lambda: spec.lambda,
            }]
        } else {
            Vec::new()
        };
        let fusion_override = match &spec.fusion {
            FusionVariant::Manual(c) => Some(*c),
            _ => None,
        };
        let sample_spec = SampleSpec {
            steps: spec.steps,
            guidance: spec.guidance,
            text: TextCond::Tags(scene.text.clone()),
            subjects,
            fusion_override,
            mode: spec.mode,
            seed: spec.sample_seed ^ (i as u64).wrapping_mul(0x9E37_79B9),
        };
        let outcome = euler_sample(params, &sample_spec)?;
        out.push(mse(&outcome.pixels, &scene.target));
    }
    Ok(out)
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.numel() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
