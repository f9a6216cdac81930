//! Hierarchical mixture-of-experts feature fusion.
//!
//! Three level-specific experts (linear + GELU + layer norm) project the
//! encoder's full tokens from width d1 to the transformer width d. A router
//! (one two-layer tanh MLP per level, scalar logit each) reads the class
//! tokens and produces convex fusion coefficients via a softmax across
//! levels; the fused tokens are the coefficient-weighted sum of expert
//! outputs. Coefficients can be overridden manually for granularity
//! control, and experts can be dropped during training.

use crate::encoder::{HierFeatures, Level, LEVELS};
use crate::error::{Error, Result};
use crate::params::{join, VisitParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const COEFF_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoeffSource {
    Routed,
    Manual,
}

impl CoeffSource {
    pub fn name(self) -> &'static str {
        match self {
            CoeffSource::Routed => "routed",
            CoeffSource::Manual => "manual",
        }
    }
}

/// Convex weights over the (low, mid, high) experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCoefficients {
    pub values: [f64; 3],
    pub source: CoeffSource,
    /// Set only by [`FusionCoefficients::manual_unnormalized`].
    pub allow_unnormalized: bool,
}

impl FusionCoefficients {
    pub fn routed(values: [f64; 3]) -> Self {
        FusionCoefficients {
            values,
            source: CoeffSource::Routed,
            allow_unnormalized: false,
        }
    }

    /// Manual override; rejects negative entries and sums off 1 by more
    /// than 1e-6.
    pub fn manual(values: [f64; 3]) -> Result<Self> {
        if values.iter().any(|&w| w < 0.0) {
            return Err(Error::Validation(format!(
                "fusion coefficients must be nonnegative, got {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > COEFF_TOLERANCE {
            return Err(Error::Validation(format!(
                "fusion coefficients must sum to 1 (got {sum})"
            )));
        }
        Ok(FusionCoefficients {
            values,
            source: CoeffSource::Manual,
            allow_unnormalized: false,
        })
    }

    /// Manual override with the sum check waived (entries still must be
    /// nonnegative).
    pub fn manual_unnormalized(values: [f64; 3]) -> Result<Self> {
        if values.iter().any(|&w| w < 0.0) {
            return Err(Error::Validation(format!(
                "fusion coefficients must be nonnegative, got {values:?}"
            )));
        }
        Ok(FusionCoefficients {
            values,
            source: CoeffSource::Manual,
            allow_unnormalized: true,
        })
    }
}

/// Plain softmax over three logits; the seam used to inject hand-set logits
/// below the routing MLPs.
pub fn coefficients_from_logits(logits: [f64; 3]) -> [f64; 3] {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - mx).exp());
    let z: f64 = exps.iter().sum();
    exps.map(|e| e / z)
}

// ---- parameters -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExpertParams<S: Scalar> {
    pub weight: Tensor<S>, // d1 x d
    pub bias: Tensor<S>,   // 1 x d
    pub gamma: Tensor<S>,  // 1 x d
    pub beta: Tensor<S>,   // 1 x d
}

impl<S: Scalar> ExpertParams<S> {
    pub fn init(d1: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        ExpertParams {
            weight: Tensor::randn(vec![d1, d], 0.02, rng),
            bias: Tensor::zeros(vec![1, d]),
            gamma: Tensor::full(vec![1, d], S::one()),
            beta: Tensor::zeros(vec![1, d]),
        }
    }
}

impl<S: Scalar> VisitParams<S> for ExpertParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct RouterParams<S: Scalar> {
    pub fc1_w: Tensor<S>, // d1 x hidden
    pub fc1_b: Tensor<S>, // 1 x hidden
    pub fc2_w: Tensor<S>, // hidden x 1
    pub fc2_b: Tensor<S>, // 1 x 1
}

impl<S: Scalar> RouterParams<S> {
    pub fn init(d1: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        RouterParams {
            fc1_w: Tensor::randn(vec![d1, hidden], 0.02, rng),
            fc1_b: Tensor::zeros(vec![1, hidden]),
            fc2_w: Tensor::randn(vec![hidden, 1], 0.02, rng),
            fc2_b: Tensor::zeros(vec![1, 1]),
        }
    }
}

impl<S: Scalar> VisitParams<S> for RouterParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "fc1_w"), &self.fc1_w);
        f(&join(prefix, "fc1_b"), &self.fc1_b);
        f(&join(prefix, "fc2_w"), &self.fc2_w);
        f(&join(prefix, "fc2_b"), &self.fc2_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "fc1_w"), &mut self.fc1_w);
        f(&join(prefix, "fc1_b"), &mut self.fc1_b);
        f(&join(prefix, "fc2_w"), &mut self.fc2_w);
        f(&join(prefix, "fc2_b"), &mut self.fc2_b);
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams<S: Scalar> {
    pub experts: [ExpertParams<S>; 3],
    pub routers: [RouterParams<S>; 3],
}

impl<S: Scalar> FusionParams<S> {
    pub fn init(d1: usize, d: usize, router_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionParams {
            experts: [
                ExpertParams::init(d1, d, rng),
                ExpertParams::init(d1, d, rng),
                ExpertParams::init(d1, d, rng),
            ],
            routers: [
                RouterParams::init(d1, router_hidden, rng),
                RouterParams::init(d1, router_hidden, rng),
                RouterParams::init(d1, router_hidden, rng),
            ],
        }
    }

    pub fn input_width(&self) -> usize {
        self.experts[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.experts[0].weight.cols()
    }
}

impl<S: Scalar> VisitParams<S> for FusionParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for l in LEVELS {
            self.experts[l.index()].visit(&join(prefix, &format!("expert.{}", l.name())), f);
        }
        for l in LEVELS {
            self.routers[l.index()].visit(&join(prefix, &format!("router.{}", l.name())), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for l in LEVELS {
            self.experts[l.index()].visit_mut(&join(prefix, &format!("expert.{}", l.name())), f);
        }
        for l in LEVELS {
            self.routers[l.index()].visit_mut(&join(prefix, &format!("router.{}", l.name())), f);
        }
    }
}

// ---- tape-side handles -------------------------------------------------------

pub struct ExpertVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

pub struct RouterVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub struct FusionVars {
    pub experts: [ExpertVars; 3],
    pub routers: [RouterVars; 3],
}

impl FusionVars {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, params: &FusionParams<S>) -> Self {
        let experts = [0, 1, 2].map(|i| {
            let e = &params.experts[i];
            ExpertVars {
                weight: tape.leaf(e.weight.clone()),
                bias: tape.leaf(e.bias.clone()),
                gamma: tape.leaf(e.gamma.clone()),
                beta: tape.leaf(e.beta.clone()),
            }
        });
        let routers = [0, 1, 2].map(|i| {
            let r = &params.routers[i];
            RouterVars {
                fc1_w: tape.leaf(r.fc1_w.clone()),
                fc1_b: tape.leaf(r.fc1_b.clone()),
                fc2_w: tape.leaf(r.fc2_w.clone()),
                fc2_b: tape.leaf(r.fc2_b.clone()),
            }
        });
        FusionVars { experts, routers }
    }
}

const LN_EPS: f64 = 1e-5;

/// One expert: `layer_norm(gelu(x W + b))`, differentiable.
pub fn expert_apply<S: Scalar>(
    tape: &mut Tape<S>,
    expert: &ExpertVars,
    full_tokens: Var,
) -> Result<Var> {
    if tape.value(full_tokens).cols() != tape.value(expert.weight).rows() {
        return Err(Error::Config(format!(
            "expert input width {} does not match weight {:?}",
            tape.value(full_tokens).cols(),
            tape.value(expert.weight).shape()
        )));
    }
    let h = tape.linear(full_tokens, expert.weight, Some(expert.bias))?;
    let h = tape.gelu(h);
    tape.layer_norm(h, expert.gamma, expert.beta, S::of_f64(LN_EPS))
}

/// All three experts over the per-level full tokens.
pub fn expert_apply_all<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &FusionVars,
    full_tokens: &[Var; 3],
) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for l in LEVELS {
        out.push(expert_apply(tape, &vars.experts[l.index()], full_tokens[l.index()])?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Routing: per-level scalar logits from the class tokens, jointly
/// normalized by a softmax across levels. Returns the three coefficient
/// scalars as 1x1 vars (differentiable into the router MLPs).
pub fn route<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &FusionVars,
    cls: &[Var; 3],
) -> Result<[Var; 3]> {
    let mut logits = Vec::with_capacity(3);
    for l in LEVELS {
        let r = &vars.routers[l.index()];
        let h = tape.linear(cls[l.index()], r.fc1_w, Some(r.fc1_b))?;
        let h = tape.tanh(h);
        logits.push(tape.linear(h, r.fc2_w, Some(r.fc2_b))?);
    }
    let joint = tape.concat_cols(&logits)?;
    let w = tape.softmax_rows(joint)?;
    Ok([
        tape.slice_cols(w, 0, 1)?,
        tape.slice_cols(w, 1, 1)?,
        tape.slice_cols(w, 2, 1)?,
    ])
}

/// Weighted fusion of expert outputs. Terms whose coefficient is exactly
/// zero are skipped, so a one-hot weight returns that expert bit-for-bit
/// and an all-zero weight (every expert dropped) yields the zero tensor.
pub fn fuse<S: Scalar>(tape: &mut Tape<S>, e: &[Var; 3], w: &[Var; 3]) -> Result<Var> {
    let shape = tape.value(e[0]).shape().to_vec();
    for &ei in e.iter() {
        if tape.value(ei).shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "fuse",
                lhs: shape,
                rhs: tape.value(ei).shape().to_vec(),
            });
        }
    }
    let mut acc: Option<Var> = None;
    for i in 0..3 {
        if tape.value(w[i]).item() == S::zero() {
            continue;
        }
        let term = tape.scale_var(e[i], w[i])?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.leaf(Tensor::zeros(shape)),
    })
}

/// Validated user-facing fuse: checks the coefficient contract before
/// dispatching to the tape-level [`fuse`].
pub fn fuse_with_coefficients<S: Scalar>(
    tape: &mut Tape<S>,
    e: &[Var; 3],
    coeffs: &FusionCoefficients,
) -> Result<Var> {
    let sum: f64 = coeffs.values.iter().sum();
    if (sum - 1.0).abs() > COEFF_TOLERANCE
        && !(coeffs.source == CoeffSource::Manual && coeffs.allow_unnormalized)
    {
        return Err(Error::Contract(format!(
            "fusion coefficients sum to {sum}, expected 1"
        )));
    }
    let w = coeffs.values.map(|v| tape.scalar_leaf(S::of_f64(v)));
    fuse(tape, e, &w)
}

/// Per-expert training dropout: each expert is zeroed independently with
/// probability `p`; surviving coefficients are renormalized to sum 1. If
/// all three drop, the adjusted coefficients are all zero and [`fuse`]
/// yields the zero tensor.
pub fn expert_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    e: &[Var; 3],
    w: &[Var; 3],
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<([Var; 3], [Var; 3])> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep: [bool; 3] = [(); 3].map(|_| rng.gen::<f64>() >= p);
    apply_expert_mask(tape, e, w, keep)
}

/// Deterministic core of [`expert_dropout`], exposed for tests.
pub fn apply_expert_mask<S: Scalar>(
    tape: &mut Tape<S>,
    e: &[Var; 3],
    w: &[Var; 3],
    keep: [bool; 3],
) -> Result<([Var; 3], [Var; 3])> {
    if keep == [true; 3] {
        return Ok((*e, *w));
    }
    let zero_w = tape.scalar_leaf(S::zero());
    if keep == [false; 3] {
        let shape = tape.value(e[0]).shape().to_vec();
        let zero_e = tape.leaf(Tensor::zeros(shape));
        return Ok(([zero_e; 3], [zero_w; 3]));
    }
    // sum of surviving coefficients, then renormalize on-tape so the
    // router still receives gradient through the kept weights
    let mut total: Option<Var> = None;
    for i in 0..3 {
        if keep[i] {
            total = Some(match total {
                None => w[i],
                Some(t) => tape.add(t, w[i])?,
            });
        }
    }
    let inv = tape.recip(total.unwrap());
    let mut new_e = Vec::with_capacity(3);
    let mut new_w = Vec::with_capacity(3);
    for i in 0..3 {
        if keep[i] {
            new_e.push(e[i]);
            new_w.push(tape.mul(w[i], inv)?);
        } else {
            let shape = tape.value(e[i]).shape().to_vec();
            new_e.push(tape.leaf(Tensor::zeros(shape)));
            new_w.push(zero_w);
        }
    }
    Ok((
        [new_e[0], new_e[1], new_e[2]],
        [new_w[0], new_w[1], new_w[2]],
    ))
}

// ---- baseline fusers (ablation modes) ---------------------------------------

/// Channel-concat baseline projection: 3*d1 -> d expert-shaped net.
#[derive(Debug, Clone)]
pub struct ConcatProjParams<S: Scalar> {
    pub net: ExpertParams<S>,
}

impl<S: Scalar> ConcatProjParams<S> {
    pub fn init(d1: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        ConcatProjParams {
            net: ExpertParams::init(3 * d1, d, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineFuse {
    /// Unweighted sum of the per-level expert outputs.
    Add,
    /// Channel concatenation of the three levels, then one projection.
    Concat,
    /// One level's expert path only.
    Single(Level),
}

impl BaselineFuse {
    pub fn name(self) -> String {
        match self {
            BaselineFuse::Add => "add".into(),
            BaselineFuse::Concat => "concat".into(),
            BaselineFuse::Single(l) => format!("single:{}", l.name()),
        }
    }
}

pub fn baseline_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &FusionVars,
    full_tokens: &[Var; 3],
    mode: BaselineFuse,
    concat: Option<&ExpertVars>,
) -> Result<Var> {
    match mode {
        BaselineFuse::Add => {
            let e = expert_apply_all(tape, vars, full_tokens)?;
            let s = tape.add(e[0], e[1])?;
            tape.add(s, e[2])
        }
        BaselineFuse::Concat => {
            let proj = concat.ok_or_else(|| {
                Error::Contract("concat baseline requires its projection params".into())
            })?;
            let cat = tape.concat_cols(full_tokens)?;
            expert_apply(tape, proj, cat)
        }
        BaselineFuse::Single(level) => {
            expert_apply(tape, &vars.experts[level.index()], full_tokens[level.index()])
        }
    }
}

// ---- convenience: features -> reference tokens --------------------------------

/// How fusion coefficients are chosen for a forward pass.
#[derive(Debug, Clone)]
pub enum CoeffMode {
    Routed,
    Manual(FusionCoefficients),
}

/// Outcome of fusing one reference image's features.
pub struct FusedReference {
    pub tokens: Var,
    pub coefficients: FusionCoefficients,
}

/// Register features as constants and run experts + routing (or the manual
/// override) + fusion. `dropout` is (probability, rng) during training.
pub fn fuse_features<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &FusionVars,
    features: &HierFeatures<S>,
    mode: &CoeffMode,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<FusedReference> {
    let full = [0, 1, 2].map(|i| tape.leaf(features.levels[i].full.clone()));
    let e = expert_apply_all(tape, vars, &full)?;
    let (w, coefficients) = match mode {
        CoeffMode::Routed => {
            let cls = [0, 1, 2].map(|i| tape.leaf(features.levels[i].cls.clone()));
            let w = route(tape, vars, &cls)?;
            let values = [0, 1, 2].map(|i| tape.value(w[i]).item().as_f64());
            (w, FusionCoefficients::routed(values))
        }
        CoeffMode::Manual(c) => {
            let sum: f64 = c.values.iter().sum();
            if (sum - 1.0).abs() > COEFF_TOLERANCE && !c.allow_unnormalized {
                return Err(Error::Contract(format!(
                    "fusion coefficients sum to {sum}, expected 1"
                )));
            }
            let w = c.values.map(|v| tape.scalar_leaf(S::of_f64(v)));
            (w, *c)
        }
    };
    let (e, w) = match dropout {
        Some((p, rng)) => expert_dropout(tape, &e, &w, p, rng)?,
        None => (e, w),
    };
    let tokens = fuse(tape, &e, &w)?;
    Ok(FusedReference {
        tokens,
        coefficients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randt(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    fn fusion_setup(seed: u64) -> (FusionParams<f64>, Tape<f64>, FusionVars) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: FusionParams<f64> = FusionParams::init(6, 8, 6, &mut rng);
        let mut tape = Tape::new();
        let vars = FusionVars::register(&mut tape, &params);
        (params, tape, vars)
    }

    #[test]
    fn zeroed_expert_produces_zero_rows() {
        let (_, mut tape, _) = fusion_setup(1);
        let expert = ExpertVars {
            weight: tape.leaf(Tensor::zeros(vec![6, 8])),
            bias: tape.leaf(Tensor::zeros(vec![1, 8])),
            gamma: tape.leaf(Tensor::full(vec![1, 8], 1.0)),
            beta: tape.leaf(Tensor::zeros(vec![1, 8])),
        };
        let x = tape.leaf(randt(vec![4, 6], 2));
        let e = expert_apply(&mut tape, &expert, x).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

        // g = 1 keeps shape 1 x d
        let x1 = tape.leaf(randt(vec![1, 6], 3));
        let e1 = expert_apply(&mut tape, &expert, x1).unwrap();
        assert_eq!(tape.value(e1).shape(), &[1, 8]);
    }

    #[test]
    fn expert_matches_composed_primitive_oracle() {
        let (params, mut tape, vars) = fusion_setup(4);
        let x = randt(vec![5, 6], 5);
        let vx = tape.leaf(x.clone());
        let e = expert_apply(&mut tape, &vars.experts[0], vx).unwrap();

        // scalar-loop oracle: linear, exact gelu, layer norm
        let ep = &params.experts[0];
        let (g, d1, d) = (5, 6, 8);
        let mut lin = vec![0.0f64; g * d];
        for i in 0..g {
            for j in 0..d {
                let mut s = ep.bias.get(&[0, j]);
                for k in 0..d1 {
                    s += x.get(&[i, k]) * ep.weight.get(&[k, j]);
                }
                lin[i * d + j] = s;
            }
        }
        let act: Vec<f64> = lin
            .iter()
            .map(|&v| v * 0.5 * (1.0 + libm::erf(v / 2.0f64.sqrt())))
            .collect();
        for i in 0..g {
            let row = &act[i * d..(i + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let expect = (row[j] - mean) / (var + 1e-5).sqrt() * ep.gamma.get(&[0, j])
                    + ep.beta.get(&[0, j]);
                assert!((tape.value(e).get(&[i, j]) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_routers_give_uniform_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params: FusionParams<f64> = FusionParams::init(6, 8, 6, &mut rng);
        for r in params.routers.iter_mut() {
            r.fc1_w = Tensor::zeros(vec![6, 6]);
            r.fc2_w = Tensor::zeros(vec![6, 1]);
        }
        let mut tape = Tape::new();
        let vars = FusionVars::register(&mut tape, &params);
        let cls = [0, 1, 2].map(|i| tape.leaf(randt(vec![1, 6], 10 + i)));
        let w = route(&mut tape, &vars, &cls).unwrap();
        for wi in w {
            assert!((tape.value(wi).item() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routed_coefficients_are_convex() {
        for seed in 0..20 {
            let (_, mut tape, vars) = fusion_setup(seed);
            let cls = [0, 1, 2].map(|i| tape.leaf(randt(vec![1, 6], 100 + seed * 3 + i)));
            let w = route(&mut tape, &vars, &cls).unwrap();
            let sum: f64 = w.iter().map(|&wi| tape.value(wi).item()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for wi in w {
                let v = tape.value(wi).item();
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn hand_set_logits_give_closed_form_weights() {
        let w = coefficients_from_logits([0.0, 2.0f64.ln(), 4.0f64.ln()]);
        assert!((w[0] - 1.0 / 7.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 7.0).abs() < 1e-12);
        assert!((w[2] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_invariance() {
        let base = coefficients_from_logits([0.3, -1.2, 0.7]);
        let shifted = coefficients_from_logits([0.3 + 5.0, -1.2 + 5.0, 0.7 + 5.0]);
        for i in 0..3 {
            assert!((base[i] - shifted[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_selection_convexity_and_oracle() {
        let (_, mut tape, _) = fusion_setup(7);
        let e = [0, 1, 2].map(|i| tape.leaf(randt(vec![4, 8], 20 + i)));

        // one-hot selects bitwise
        let w_onehot = [0.0, 0.0, 1.0].map(|v| tape.scalar_leaf(v));
        let f = fuse(&mut tape, &e, &w_onehot).unwrap();
        assert!(tape.value(f).bit_eq(tape.value(e[2])));

        // identical experts: fused equals the common tensor for any valid w
        let shared = randt(vec![4, 8], 30);
        let es = [(); 3].map(|_| tape.leaf(shared.clone()));
        let w = [0.2, 0.5, 0.3].map(|v| tape.scalar_leaf(v));
        let f = fuse(&mut tape, &es, &w).unwrap();
        assert!(tape.value(f).max_abs_diff(&shared) < 1e-12);

        // random case vs scalar-loop weighted sum to 1e-7
        let wv = [0.1, 0.6, 0.3];
        let w = wv.map(|v| tape.scalar_leaf(v));
        let f = fuse(&mut tape, &e, &w).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                let expect: f64 = (0..3)
                    .map(|k| wv[k] * tape.value(e[k]).get(&[i, j]))
                    .sum();
                assert!((tape.value(f).get(&[i, j]) - expect).abs() < 1e-7);
            }
        }

        // linearity in e: fuse(alpha e, w) = alpha fuse(e, w)
        let alpha = 2.75;
        let scaled = [0, 1, 2].map(|i| tape.scale(e[i], alpha));
        let fs = fuse(&mut tape, &scaled, &w).unwrap();
        let fexpect = tape.scale(f, alpha);
        assert!(tape.value(fs).max_abs_diff(tape.value(fexpect)) < 1e-6);
    }

    #[test]
    fn manual_coefficient_validation() {
        assert!(FusionCoefficients::manual([0.3, 0.3, 0.4]).is_ok());
        assert!(FusionCoefficients::manual([0.5, 0.6, 0.1]).is_err());
        assert!(FusionCoefficients::manual([-0.1, 0.6, 0.5]).is_err());
        assert!(FusionCoefficients::manual_unnormalized([0.5, 0.6, 0.1]).is_ok());
        assert!(FusionCoefficients::manual_unnormalized([-0.5, 0.6, 0.1]).is_err());
    }

    #[test]
    fn manual_override_bypasses_router_and_matches_routed_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: FusionParams<f64> = FusionParams::init(6, 8, 6, &mut rng);
        let feats = HierFeatures {
            levels: [0, 1, 2].map(|i| crate::encoder::LevelFeatures {
                full: randt(vec![4, 6], 40 + i),
                cls: randt(vec![1, 6], 50 + i),
            }),
        };

        let mut tape = Tape::new();
        let vars = FusionVars::register(&mut tape, &params);
        let routed =
            fuse_features(&mut tape, &vars, &feats, &CoeffMode::Routed, None).unwrap();
        let routed_tokens = tape.value(routed.tokens).clone();

        // identical numeric values through the manual path
        let manual = FusionCoefficients {
            values: routed.coefficients.values,
            source: CoeffSource::Manual,
            allow_unnormalized: false,
        };
        let mut tape2 = Tape::new();
        let vars2 = FusionVars::register(&mut tape2, &params);
        let m =
            fuse_features(&mut tape2, &vars2, &feats, &CoeffMode::Manual(manual), None).unwrap();
        assert!(tape2.value(m.tokens).bit_eq(&routed_tokens));
        assert_eq!(m.coefficients.source, CoeffSource::Manual);

        // manual path leaves router parameters without gradient
        let loss = tape2.sum_all(m.tokens);
        let sq = tape2.mul(loss, loss).unwrap();
        let grads = tape2.backward(sq).unwrap();
        for r in vars2.routers.iter() {
            for v in [r.fc1_w, r.fc1_b, r.fc2_w, r.fc2_b] {
                assert!(grads.get(v).unwrap().data().iter().all(|&x| x == 0.0));
            }
        }

        // (1, 0, 0) selects the low expert exactly
        let mut tape3 = Tape::new();
        let vars3 = FusionVars::register(&mut tape3, &params);
        let m = fuse_features(
            &mut tape3,
            &vars3,
            &feats,
            &CoeffMode::Manual(FusionCoefficients::manual([1.0, 0.0, 0.0]).unwrap()),
            None,
        )
        .unwrap();
        let full0 = tape3.leaf(feats.levels[0].full.clone());
        let e0 = expert_apply(&mut tape3, &vars3.experts[0], full0).unwrap();
        assert!(tape3.value(m.tokens).bit_eq(tape3.value(e0)));
    }

    #[test]
    fn dropout_identity_renormalization_and_all_dropped() {
        let (_, mut tape, _) = fusion_setup(9);
        let e = [0, 1, 2].map(|i| tape.leaf(randt(vec![3, 8], 60 + i)));
        let w = [0.2, 0.3, 0.5].map(|v| tape.scalar_leaf(v));

        // p = 0 is the identity
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (e2, w2) = expert_dropout(&mut tape, &e, &w, 0.0, &mut rng).unwrap();
        assert_eq!(e, e2);
        assert_eq!(w, w2);

        // (dropped, kept, kept) renormalizes to (0, 0.375, 0.625)
        let (e3, w3) = apply_expert_mask(&mut tape, &e, &w, [false, true, true]).unwrap();
        assert_eq!(tape.value(w3[0]).item(), 0.0);
        assert!((tape.value(w3[1]).item() - 0.375).abs() < 1e-12);
        assert!((tape.value(w3[2]).item() - 0.625).abs() < 1e-12);
        assert!(tape.value(e3[0]).data().iter().all(|&v| v == 0.0));
        let wsum: f64 = w3.iter().map(|&wi| tape.value(wi).item()).sum();
        assert!((wsum - 1.0).abs() < 1e-6);

        // all dropped -> fused output is the zero tensor
        let (e4, w4) = apply_expert_mask(&mut tape, &e, &w, [false; 3]).unwrap();
        let f = fuse(&mut tape, &e4, &w4).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_rate_matches_binomial_bounds() {
        let (_, mut tape, _) = fusion_setup(10);
        let e = [0, 1, 2].map(|i| tape.leaf(randt(vec![1, 8], 70 + i)));
        let w = [(); 3].map(|_| tape.scalar_leaf(1.0 / 3.0));
        let p = 0.35;
        let trials = 4000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut dropped = 0usize;
        for _ in 0..trials {
            let (_, w2) = expert_dropout(&mut tape, &e, &w, p, &mut rng).unwrap();
            for wi in w2 {
                if tape.value(wi).item() == 0.0 {
                    dropped += 1;
                }
            }
        }
        let n = (trials * 3) as f64;
        let rate = dropped as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs p {p}");
    }

    #[test]
    fn baselines_match_their_algebraic_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params: FusionParams<f64> = FusionParams::init(6, 8, 6, &mut rng);
        let full = [0, 1, 2].map(|i| randt(vec![4, 6], 80 + i));

        // single:high equals fuse with w = (0, 0, 1)
        {
            let mut tape = Tape::new();
            let vars = FusionVars::register(&mut tape, &params);
            let fv = [0, 1, 2].map(|i| tape.leaf(full[i].clone()));
            let single =
                baseline_fuse(&mut tape, &vars, &fv, BaselineFuse::Single(Level::High), None)
                    .unwrap();
            let e = expert_apply_all(&mut tape, &vars, &fv).unwrap();
            let w = [0.0, 0.0, 1.0].map(|v| tape.scalar_leaf(v));
            let f = fuse(&mut tape, &e, &w).unwrap();
            assert!(tape.value(single).bit_eq(tape.value(f)));
        }

        // add with two experts zeroed equals the remaining expert path
        {
            let zero = ExpertParams {
                weight: Tensor::zeros(vec![6, 8]),
                bias: Tensor::zeros(vec![1, 8]),
                gamma: Tensor::zeros(vec![1, 8]),
                beta: Tensor::zeros(vec![1, 8]),
            };
            params.experts[0] = zero.clone();
            params.experts[2] = zero;
            let mut tape = Tape::new();
            let vars = FusionVars::register(&mut tape, &params);
            let fv = [0, 1, 2].map(|i| tape.leaf(full[i].clone()));
            let add = baseline_fuse(&mut tape, &vars, &fv, BaselineFuse::Add, None).unwrap();
            let mid = expert_apply(&mut tape, &vars.experts[1], fv[1]).unwrap();
            assert!(tape.value(add).max_abs_diff(tape.value(mid)) < 1e-12);
        }

        // concat of identical levels: stacked blocks act like a summed
        // linear map before the shared gelu + norm
        {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let proj: ConcatProjParams<f64> = ConcatProjParams::init(6, 8, &mut rng);
            let shared = randt(vec![4, 6], 90);
            let mut tape = Tape::new();
            let params2: FusionParams<f64> =
                FusionParams::init(6, 8, 6, &mut ChaCha8Rng::seed_from_u64(13));
            let vars = FusionVars::register(&mut tape, &params2);
            let concat_vars = ExpertVars {
                weight: tape.leaf(proj.net.weight.clone()),
                bias: tape.leaf(proj.net.bias.clone()),
                gamma: tape.leaf(proj.net.gamma.clone()),
                beta: tape.leaf(proj.net.beta.clone()),
            };
            let fv = [(); 3].map(|_| tape.leaf(shared.clone()));
            let cat = baseline_fuse(
                &mut tape,
                &vars,
                &fv,
                BaselineFuse::Concat,
                Some(&concat_vars),
            )
            .unwrap();

            // oracle: W_sum = W_low + W_mid + W_high block rows
            let mut wsum = vec![0.0f64; 6 * 8];
            for blk in 0..3 {
                for k in 0..6 {
                    for j in 0..8 {
                        wsum[k * 8 + j] += proj.net.weight.get(&[blk * 6 + k, j]);
                    }
                }
            }
            let wsum = Tensor::new(vec![6, 8], wsum).unwrap();
            let vx = tape.leaf(shared.clone());
            let vw = tape.leaf(wsum);
            let vb = tape.leaf(proj.net.bias.clone());
            let lin = tape.linear(vx, vw, Some(vb)).unwrap();
            let act = tape.gelu(lin);
            let g = tape.leaf(proj.net.gamma.clone());
            let b = tape.leaf(proj.net.beta.clone());
            let expect = tape.layer_norm(act, g, b, 1e-5).unwrap();
            assert!(tape.value(cat).max_abs_diff(tape.value(expect)) < 1e-9);
        }
    }

    #[test]
    fn gradient_flows_through_routing() {
        // finite differences on one router weight through route + fuse
        let run = |params: &FusionParams<f64>, feats: &HierFeatures<f64>| -> (f64, Tensor<f64>) {
            let mut tape = Tape::new();
            let vars = FusionVars::register(&mut tape, &params.clone());
            let fused =
                fuse_features(&mut tape, &vars, feats, &CoeffMode::Routed, None).unwrap();
            let loss = tape.sum_all(fused.tokens);
            let sq = tape.mul(loss, loss).unwrap();
            let grads = tape.backward(sq).unwrap();
            (
                tape.value(sq).item(),
                grads.get(vars.routers[1].fc1_w).unwrap().clone(),
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params: FusionParams<f64> = FusionParams::init(6, 8, 6, &mut rng);
        let feats = HierFeatures {
            levels: [0, 1, 2].map(|i| crate::encoder::LevelFeatures {
                full: randt(vec![4, 6], 200 + i),
                cls: randt(vec![1, 6], 210 + i),
            }),
        };
        let (_, analytic) = run(&params, &feats);
        let eps = 1e-3;
        for k in [0usize, 7, 20] {
            let mut plus = params.clone();
            plus.routers[1].fc1_w.data_mut()[k] += eps;
            let mut minus = params.clone();
            minus.routers[1].fc1_w.data_mut()[k] -= eps;
            let fd = (run(&plus, &feats).0 - run(&minus, &feats).0) / (2.0 * eps);
            let an = analytic.data()[k];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(((an - fd) / denom).abs() < 1e-4, "k={k}: {an} vs {fd}");
        }
    }
}
