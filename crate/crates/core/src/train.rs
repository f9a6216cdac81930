//! Flow-matching training loop.
//!
//! Rectified-flow construction: `x_t = (1 - t) x_0 + t eps`, target
//! velocity `v = eps - x_0`. The loop runs two stages - intra pairs only,
//! then an intra/cross mixture - with independent text/image/joint
//! conditioning dropout, per-expert dropout, and a decoupled-weight-decay
//! Adam update on a cosine schedule.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{fuse_features, CoeffMode};
use crate::model::{
    param_group, velocity_forward, AttentionMode, ForwardOptions, ModelConfig, ModelParams,
    ModelVars, ParamGroup, SubjectTokens, TextCond,
};
use crate::params::VisitParams;
use crate::scalar::Scalar;
use crate::scenes::{scene_at, Pairing, ToyScene};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub drop_text_p: f64,
    pub drop_image_p: f64,
    pub drop_both_p: f64,
    pub expert_drop_p: f64,
    pub lambda: f64,
    /// Fraction of stage-2 samples drawn as cross pairs.
    pub stage2_cross_fraction: f64,
    /// Train only adapter/fusion parameters, freezing the base stack.
    pub train_adapter_only: bool,
    /// Emit a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            seed: 7,
            stage1_steps: 300,
            stage2_steps: 700,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            drop_text_p: 0.05,
            drop_image_p: 0.05,
            drop_both_p: 0.05,
            expert_drop_p: 0.05,
            lambda: 1.0,
            stage2_cross_fraction: 0.5,
            train_adapter_only: false,
            checkpoint_every: 0,
            model: ModelConfig::desk_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_text_p", self.drop_text_p),
            ("drop_image_p", self.drop_image_p),
            ("drop_both_p", self.drop_both_p),
            ("expert_drop_p", self.expert_drop_p),
            ("stage2_cross_fraction", self.stage2_cross_fraction),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} not in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.stage1_steps + self.stage2_steps == 0 {
            return Err(Error::Config("batch size and total steps must be positive".into()));
        }
        if !self.lambda.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lambda must be finite, lr positive".into()));
        }
        self.model.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }
}

/// Linear noising path: `x_t = (1 - t) x_0 + t eps`, `v = eps - x_0`.
pub fn flow_sample<S: Scalar>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: f64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension {
            op: "flow_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
    }
    let ts = S::of_f64(t);
    let one_minus = S::one() - ts;
    let mut xt = Vec::with_capacity(x0.numel());
    let mut v = Vec::with_capacity(x0.numel());
    for (&a, &e) in x0.data().iter().zip(eps.data().iter()) {
        xt.push(one_minus * a + ts * e);
        v.push(e - a);
    }
    Ok((
        Tensor::new(x0.shape().to_vec(), xt)?,
        Tensor::new(x0.shape().to_vec(), v)?,
    ))
}

/// Cosine decay from `initial` at step 0 to 0 at the final step.
pub fn cosine_lr(initial: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return initial;
    }
    let frac = step as f64 / (total - 1) as f64;
    initial * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Decoupled-weight-decay Adam, moments aligned with parameter traversal
/// order.
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: usize,
    moments: Vec<(String, Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ModelParams<S>, weight_decay: f64) -> Self {
        let mut moments = Vec::new();
        params.visit("", &mut |name, t| {
            moments.push((
                name.to_string(),
                Tensor::zeros(t.shape().to_vec()),
                Tensor::zeros(t.shape().to_vec()),
            ));
        });
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments,
        }
    }

    /// One update over every trainable parameter. `grads` maps parameter
    /// name to gradient; `trainable` filters which names move.
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &HashMap<String, Tensor<S>>,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (S::of_f64(self.beta1), S::of_f64(self.beta2));
        let (ob1, ob2) = (S::of_f64(1.0 - self.beta1), S::of_f64(1.0 - self.beta2));
        let lr_s = S::of_f64(lr);
        let wd = S::of_f64(self.weight_decay);
        let eps = S::of_f64(self.eps);
        let (ibc1, ibc2) = (S::of_f64(1.0 / bc1), S::of_f64(1.0 / bc2));

        let mut idx = 0usize;
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, tensor| {
            let slot = &mut moments[idx];
            debug_assert_eq!(slot.0, name);
            idx += 1;
            if !trainable(name) {
                return;
            }
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let m = slot.1.data_mut();
            let v = slot.2.data_mut();
            let theta = tensor.data_mut();
            for k in 0..theta.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + ob1 * gk;
                v[k] = b2 * v[k] + ob2 * gk * gk;
                let mhat = m[k] * ibc1;
                let vhat = v[k] * ibc2;
                theta[k] = theta[k] - lr_s * (mhat / (vhat.sqrt() + eps) + wd * theta[k]);
            }
        });
    }

    /// Moment tensors as (name, tensor) pairs for checkpointing.
    pub fn named_state(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, m, _) in &self.moments {
            out.push((format!("adam.m.{name}"), m));
        }
        for (name, _, v) in &self.moments {
            out.push((format!("adam.v.{name}"), v));
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor<S>>, step_count: usize) -> Result<()> {
        for (name, m, v) in self.moments.iter_mut() {
            let em = state
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Contract(format!("missing optimizer moment for {name}")))?;
            let ev = state
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Contract(format!("missing optimizer moment for {name}")))?;
            *m = em.clone();
            *v = ev.clone();
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// Conditioning-dropout decision for one sample: three independent draws,
/// joint drop forcing both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondDrop {
    pub text: bool,
    pub image: bool,
}

pub fn draw_conditioning(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> CondDrop {
    let d_text = rng.gen::<f64>() < cfg.drop_text_p;
    let d_image = rng.gen::<f64>() < cfg.drop_image_p;
    let d_both = rng.gen::<f64>() < cfg.drop_both_p;
    CondDrop {
        text: d_text || d_both,
        image: d_image || d_both,
    }
}

fn trainable_filter(cfg: &TrainConfig) -> impl Fn(&str) -> bool {
    let adapter_only = cfg.train_adapter_only;
    move |name: &str| match param_group(name) {
        ParamGroup::Frozen => false,
        ParamGroup::Base => !adapter_only,
        _ => true,
    }
}

/// One optimization step over a batch of scenes. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    optimizer: &mut AdamW<f32>,
    encoder: &Encoder<f32>,
    batch: &[ToyScene],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let mcfg = params.cfg.clone();
    let m = mcfg.image_tokens();
    let side = mcfg.image_size;
    let h = mcfg.encoder.token_count();
    let d = mcfg.width;

    let mut tape: Tape<f32> = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let full_mask = vec![1u8; m];
    let mut sample_losses = Vec::with_capacity(batch.len());

    for scene in batch {
        let drop = draw_conditioning(rng, cfg);
        let tokens = if drop.image {
            tape.leaf(Tensor::zeros(vec![h, d]))
        } else {
            let feats = encoder.encode(&scene.reference)?;
            let fused = fuse_features(
                &mut tape,
                &vars.fusion,
                &feats,
                &CoeffMode::Routed,
                Some((cfg.expert_drop_p, rng)),
            )?;
            fused.tokens
        };
        let text = if drop.text {
            TextCond::Null
        } else {
            TextCond::Tags(scene.text.clone())
        };
        let t: f64 = rng.gen::<f64>();
        let eps: Tensor<f32> = Tensor::randn(vec![side * side, 3], 1.0, rng);
        let (xt, v_target) = flow_sample(&scene.target, &eps, t)?;

        let mask = crate::model::register_mask(&mut tape, &full_mask, m)?;
        let subject = SubjectTokens {
            tokens,
            mask,
            lambda: cfg.lambda,
        };
        let out = velocity_forward(
            &mut tape,
            &vars,
            &mcfg,
            &xt,
            t,
            &text,
            &[subject],
            AttentionMode::TrainJoint,
            &ForwardOptions::default(),
        )?;
        let target = tape.leaf(v_target);
        sample_losses.push(tape.mse(out.velocity, target)?);
    }

    let mut total = sample_losses[0];
    for &l in &sample_losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f32);
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        let per_sample: Vec<f32> = sample_losses
            .iter()
            .map(|&l| tape.value(l).item())
            .collect();
        return Err(Error::Numeric {
            op: "train_step",
            detail: format!(
                "non-finite loss {loss_value} at optimizer step {}; per-sample losses {per_sample:?}",
                optimizer.step_count + 1
            ),
        });
    }

    let grads = tape.backward(loss)?;
    let mut by_name = HashMap::new();
    for (name, var) in vars.named_vars() {
        if let Some(g) = grads.get(var) {
            by_name.insert(name, g.clone());
        }
    }
    optimizer.step(params, &by_name, lr, &trainable_filter(cfg));
    Ok(loss_value)
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Debug, Default, Clone)]
pub struct PairingCounts {
    pub intra: usize,
    pub cross: usize,
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW<f32>,
    pub losses: Vec<LossRow>,
    pub pairings: PairingCounts,
}

/// Run the full two-stage schedule. `sink`, when given, is called with
/// (step, params, optimizer) at every checkpoint interval and once at the
/// end. Deterministic in the config seed.
pub fn run_training(
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn FnMut(usize, &ModelParams<f32>, &AdamW<f32>) -> Result<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params: ModelParams<f32> = ModelParams::init(cfg.model.clone())?;
    let mut optimizer = AdamW::new(&params, cfg.weight_decay);
    let encoder: Encoder<f32> = Encoder::from_config(cfg.model.encoder.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_steps();
    let mut losses = Vec::with_capacity(total);
    let mut pairings = PairingCounts::default();

    for step in 0..total {
        let stage = if step < cfg.stage1_steps { 1 } else { 2 };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let pairing = if stage == 1 {
                Pairing::Intra
            } else if rng.gen::<f64>() < cfg.stage2_cross_fraction {
                Pairing::Cross
            } else {
                Pairing::Intra
            };
            match pairing {
                Pairing::Intra => pairings.intra += 1,
                Pairing::Cross => pairings.cross += 1,
            }
            let index = (step * cfg.batch_size + b) as u64;
            batch.push(scene_at(
                cfg.seed,
                index,
                pairing,
                cfg.model.image_size,
                cfg.model.encoder.image_size,
            ));
        }
        let lr = cosine_lr(cfg.lr, step, total);
        let loss = train_step(
            &mut params,
            &mut optimizer,
            &encoder,
            &batch,
            cfg,
            lr,
            &mut rng,
        )?;
        losses.push(LossRow {
            step,
            stage,
            lr,
            loss,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total {
            if let Some(sink) = sink.as_deref_mut() {
                sink(step + 1, &params, &optimizer)?;
            }
        }
    }
    if let Some(sink) = sink.as_deref_mut() {
        sink(total, &params, &optimizer)?;
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        losses,
        pairings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny_train_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk_default();
        cfg.model = ModelConfig {
            image_size: 12,
            patch_size: 4,
            width: 16,
            heads: 2,
            depth: 2,
            mlp_hidden: 32,
            time_dim: 8,
            text_vocab: 8,
            router_hidden: 12,
            use_rope: true,
            seed: 21,
            encoder: EncoderConfig {
                image_size: 12,
                patch_size: 6,
                depth: 3,
                width: 16,
                heads: 2,
                mlp_hidden: 24,
                taps: [1, 2, 3],
                seed: 22,
            },
        };
        cfg.batch_size = 2;
        cfg.stage1_steps = 2;
        cfg.stage2_steps = 2;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn flow_sample_endpoints_and_affinity() {
        let x0: Tensor<f64> = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let eps: Tensor<f64> = Tensor::from_rows(&[vec![-0.5, 1.0, 2.0]]).unwrap();
        let (xt, v) = flow_sample(&x0, &eps, 0.0).unwrap();
        assert!(xt.bit_eq(&x0));
        for (a, (b, c)) in v.data().iter().zip(eps.data().iter().zip(x0.data())) {
            assert_eq!(*a, b - c);
        }
        let (xt, _) = flow_sample(&x0, &eps, 1.0).unwrap();
        assert!(xt.bit_eq(&eps));

        // x_t affine in t: max deviation from the chord < 1e-7
        let (x25, _) = flow_sample(&x0, &eps, 0.25).unwrap();
        let (x75, _) = flow_sample(&x0, &eps, 0.75).unwrap();
        let (x50, _) = flow_sample(&x0, &eps, 0.5).unwrap();
        for k in 0..3 {
            let chord = 0.5 * (x25.data()[k] + x75.data()[k]);
            assert!((chord - x50.data()[k]).abs() < 1e-7);
        }

        assert!(flow_sample(&x0, &eps, 1.5).is_err());
        let bad: Tensor<f64> = Tensor::zeros(vec![2, 2]);
        assert!(flow_sample(&x0, &bad, 0.5).is_err());
    }

    #[test]
    fn perfect_velocity_prediction_has_zero_loss() {
        let x0: Tensor<f64> = Tensor::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let eps: Tensor<f64> = Tensor::from_rows(&[vec![1.1, 0.2]]).unwrap();
        let (_, v) = flow_sample(&x0, &eps, 0.37).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let pred = tape.leaf(v.clone());
        let target = tape.leaf(v);
        let loss = tape.mse(pred, target).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let total = 1000;
        assert_eq!(cosine_lr(1e-3, 0, total), 1e-3);
        assert!(cosine_lr(1e-3, total - 1, total) <= 1e-3 * 1e-3);
        // single-step schedule stays at the initial rate
        assert_eq!(cosine_lr(0.5, 0, 1), 0.5);
    }

    #[test]
    fn zero_gradient_step_applies_exactly_weight_decay() {
        let cfg = tiny_train_config();
        let mut params: ModelParams<f32> = ModelParams::init(cfg.model.clone()).unwrap();
        let before = crate::params::named_tensors(&params);
        let mut opt = AdamW::new(&params, 1e-2);
        let lr = 0.1;
        let mut zero_grads = HashMap::new();
        params.visit("", &mut |name, t| {
            zero_grads.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()));
        });
        opt.step(&mut params, &zero_grads, lr, &|_| true);
        // exact-zero gradients: only theta -= lr * (wd * theta) applies
        let mut checked = 0;
        params.visit("", &mut |name, t| {
            let prev = &before.iter().find(|(n, _)| n == name).unwrap().1;
            for (a, b) in t.data().iter().zip(prev.data().iter()) {
                let expect = b - (lr as f32) * ((1e-2 as f32) * b);
                assert!((a - expect).abs() <= 2.0 * f32::EPSILON * b.abs().max(1.0));
                checked += 1;
            }
        });
        assert!(checked > 0);
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let cfg = tiny_train_config();
        let mut params: ModelParams<f32> = ModelParams::init(cfg.model.clone()).unwrap();
        let before = crate::params::named_tensors(&params);
        let mut opt = AdamW::new(&params, cfg.weight_decay);
        let encoder: Encoder<f32> = Encoder::from_config(cfg.model.encoder.clone()).unwrap();
        let batch = crate::scenes::synth_batch(1, 0, 2, Pairing::Intra, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        train_step(&mut params, &mut opt, &encoder, &batch, &cfg, 0.0, &mut rng).unwrap();
        params.visit("", &mut |name, t| {
            let prev = &before.iter().find(|(n, _)| n == name).unwrap().1;
            assert!(t.bit_eq(prev), "{name} moved at lr 0");
        });
    }

    #[test]
    fn overfitting_one_batch_reduces_loss() {
        let mut cfg = tiny_train_config();
        cfg.drop_text_p = 0.0;
        cfg.drop_image_p = 0.0;
        cfg.drop_both_p = 0.0;
        cfg.expert_drop_p = 0.0;
        let mut params: ModelParams<f32> = ModelParams::init(cfg.model.clone()).unwrap();
        let mut opt = AdamW::new(&params, cfg.weight_decay);
        let encoder: Encoder<f32> = Encoder::from_config(cfg.model.encoder.clone()).unwrap();
        let batch = crate::scenes::synth_batch(2, 0, 2, Pairing::Intra, 12, 12);
        let mut losses = Vec::new();
        for k in 0..30 {
            // same noise draw every iteration: re-seed per step
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let loss = train_step(
                &mut params, &mut opt, &encoder, &batch, &cfg, 3e-3, &mut rng,
            )
            .unwrap();
            losses.push(loss);
            let _ = k;
        }
        let first: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let last: f32 = losses[20..].iter().sum::<f32>() / 10.0;
        assert!(last < first, "no overfit progress: {first} -> {last}");
    }

    #[test]
    fn conditioning_dropout_rates_within_three_sigma() {
        let mut cfg = tiny_train_config();
        cfg.drop_text_p = 0.05;
        cfg.drop_image_p = 0.05;
        cfg.drop_both_p = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20_000usize;
        let mut text_only = 0usize;
        let mut image_only = 0usize;
        let mut both = 0usize;
        for _ in 0..n {
            let d = draw_conditioning(&mut rng, &cfg);
            if d.text {
                text_only += 1;
            }
            if d.image {
                image_only += 1;
            }
            if d.text && d.image {
                both += 1;
            }
        }
        // marginal drop rate for each stream: 1 - (1-p)(1-p_both)
        let expect = 1.0 - (1.0 - 0.05) * (1.0 - 0.05);
        let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
        for count in [text_only, image_only] {
            let rate = count as f64 / n as f64;
            assert!((rate - expect).abs() < 3.0 * sigma, "rate {rate} vs {expect}");
        }
        // joint rate: both dropped requires joint draw or both singles
        let expect_both = 0.05 + (1.0 - 0.05) * 0.05 * 0.05;
        let sigma_b = (expect_both * (1.0 - expect_both) / n as f64).sqrt();
        let rate_b = both as f64 / n as f64;
        assert!((rate_b - expect_both).abs() < 3.0 * sigma_b);
    }

    #[test]
    fn stage1_only_config_never_samples_cross_pairs() {
        let mut cfg = tiny_train_config();
        cfg.stage2_steps = 0;
        let out = run_training(&cfg, None).unwrap();
        assert_eq!(out.pairings.cross, 0);
        assert_eq!(out.pairings.intra, cfg.stage1_steps * cfg.batch_size);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let cfg = tiny_train_config();
        let a = run_training(&cfg, None).unwrap();
        let b = run_training(&cfg, None).unwrap();
        let ta = crate::params::named_tensors(&a.params);
        let tb = crate::params::named_tensors(&b.params);
        assert_eq!(ta.len(), tb.len());
        for ((na, va), (nb, vb)) in ta.iter().zip(tb.iter()) {
            assert_eq!(na, nb);
            assert!(va.bit_eq(vb), "{na} differs between same-seed runs");
        }
        for (x, y) in a.losses.iter().zip(b.losses.iter()) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn adapter_only_training_freezes_base() {
        let mut cfg = tiny_train_config();
        cfg.train_adapter_only = true;
        let before: ModelParams<f32> = ModelParams::init(cfg.model.clone()).unwrap();
        let out = run_training(&cfg, None).unwrap();
        let mut base_moved = false;
        let mut adapter_moved = false;
        out.params.visit("", &mut |name, t| {
            let mut prev = None;
            before.visit("", &mut |n2, t2| {
                if n2 == name {
                    prev = Some(t2.clone());
                }
            });
            let prev = prev.unwrap();
            let same = t.bit_eq(&prev);
            match param_group(name) {
                ParamGroup::Base | ParamGroup::Frozen => {
                    if !same {
                        base_moved = true;
                    }
                }
                _ => {
                    if !same {
                        adapter_moved = true;
                    }
                }
            }
        });
        assert!(!base_moved, "base parameters moved in adapter-only mode");
        assert!(adapter_moved, "adapter parameters did not move");
    }
}
