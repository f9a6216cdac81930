//! Command-line surface: training, inference, composition, diagnostics,
//! and report emission.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoder::{Encoder, Level};
use crate::error::{Error, Result};
use crate::eval::{mean, reconstruction_mse, EvalSpec, FusionVariant};
use crate::fusion::{fuse_features, BaselineFuse, CoeffMode, FusionCoefficients, FusionVars};
use crate::model::{
    attention_map, velocity_forward, AttentionMode, ForwardOptions, ModelParams, ModelVars,
    SubjectTokens, TextCond,
};
use crate::pnm::{parse_mask, read_ppm, write_pbm, write_pgm, write_ppm};
use crate::report::{write_csv, write_svg_bars, write_svg_line};
use crate::sample::{euler_sample, ReferenceInput, SampleSpec, SubjectSource};
use crate::scenes::{scene_at, tag_id, Pairing};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{run_training, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "minidit",
    version,
    about = "Desk-scale multimodal diffusion transformer with reference-image adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on procedural scenes and emit checkpoints plus a loss curve.
    Train(TrainArgs),
    /// Generate one image conditioned on text tags and a reference image.
    Infer(InferArgs),
    /// Mask-guided multi-subject composition (two or more references).
    Compose(ComposeArgs),
    /// Finite-difference verification of every trainable parameter group.
    Gradcheck(GradcheckArgs),
    /// Run the ablation configurations end to end and emit a comparison CSV.
    Ablate(AblateArgs),
    /// Report routed fusion coefficients over a set of reference images.
    InspectRouting(InspectRoutingArgs),
    /// Export per-branch adapter attention maps under the probe settings.
    AttnMap(AttnMapArgs),
    /// Reconstruction probe injecting each feature level individually.
    ProbeLayer(ProbeLayerArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; defaults to the built-in desk-scale recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (loss.csv, config.json, checkpoint/).
    #[arg(long)]
    out: PathBuf,
    /// Override total step count, keeping the stage-1/stage-2 ratio.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also emit an SVG loss curve.
    #[arg(long)]
    svg: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InferMode {
    /// Image-branch-only reference conditioning.
    Infer,
    /// Joint-branch conditioning at inference (ablation baseline).
    Legacy,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference image (PPM) at the encoder's input size.
    #[arg(long)]
    reference: PathBuf,
    /// Optional P1 mask over image tokens; defaults to all ones.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Comma-separated condition tags, e.g. "bg:slate,pos:tl".
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manual fusion coefficients "low,mid,high" overriding the router.
    #[arg(long)]
    fusion_weights: Option<String>,
    /// Accept fusion weights that do not sum to 1.
    #[arg(long)]
    allow_unnormalized: bool,
    #[arg(long, value_enum, default_value_t = InferMode::Infer)]
    mode: InferMode,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
    /// Routing-coefficient CSV (defaults next to the output image).
    #[arg(long)]
    routing_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference images, one per subject (repeat the flag).
    #[arg(long, required = true)]
    reference: Vec<PathBuf>,
    /// P1 token masks, one per subject.
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    /// Per-subject weights; one value is broadcast to all subjects.
    #[arg(long, default_values_t = vec![1.0])]
    lambda: Vec<f64>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    fusion_weights: Option<String>,
    #[arg(long)]
    allow_unnormalized: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    routing_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 2)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// Trained checkpoint to evaluate; omit to train briefly from scratch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training steps when no checkpoint is given.
    #[arg(long, default_value_t = 50)]
    train_steps: usize,
    /// Held-out scenes per configuration.
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    /// Euler steps per reconstruction.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comparison CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectRoutingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of synthesized reference images to route.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also emit a bar chart of the coefficients.
    #[arg(long)]
    svg: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeSetting {
    Text,
    Image,
    Both,
    All,
}

#[derive(Args)]
struct AttnMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    text: Option<String>,
    /// Which injection setting(s) to probe.
    #[arg(long, value_enum, default_value_t = ProbeSetting::All)]
    setting: ProbeSetting,
    /// Diffusion time for the probed state.
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV + PGM maps.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProbeLayerArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one reconstruction image per level.
    #[arg(long)]
    image_dir: Option<PathBuf>,
}

/// Parse and run; clap usage errors exit 2, runtime failures return Err.
pub fn run(argv: &[String]) -> Result<()> {
    let cli = Cli::parse_from(argv);
    dispatch(cli)
}

/// Non-exiting variant for tests: usage errors come back as Err too.
pub fn try_run(argv: &[String]) -> std::result::Result<(), String> {
    let cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    dispatch(cli).map_err(|e| e.to_string())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::InspectRouting(args) => cmd_inspect_routing(args),
        Command::AttnMap(args) => cmd_attn_map(args),
        Command::ProbeLayer(args) => cmd_probe_layer(args),
    }
}

fn parse_tags(text: &Option<String>) -> Result<TextCond> {
    match text {
        None => Ok(TextCond::Null),
        Some(s) => {
            let ids: Result<Vec<usize>> = s
                .split(|c| c == ',' || c == ' ')
                .filter(|t| !t.is_empty())
                .map(tag_id)
                .collect();
            Ok(TextCond::Tags(ids?))
        }
    }
}

fn parse_fusion_weights(
    spec: &Option<String>,
    allow_unnormalized: bool,
) -> Result<Option<FusionCoefficients>> {
    let Some(s) = spec else { return Ok(None) };
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad fusion weight '{p}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Validation(format!(
            "fusion weights need exactly three values, got {}",
            parts.len()
        )));
    }
    let values = [parts[0], parts[1], parts[2]];
    Ok(Some(if allow_unnormalized {
        FusionCoefficients::manual_unnormalized(values)?
    } else {
        FusionCoefficients::manual(values)?
    }))
}

fn load_reference(
    encoder: &Encoder<f32>,
    path: &Path,
) -> Result<crate::encoder::HierFeatures<f32>> {
    let (w, h, pixels) = read_ppm(path)?;
    let side = encoder.cfg.image_size;
    if w != side || h != side {
        return Err(Error::Config(format!(
            "reference {} is {w}x{h}, encoder expects {side}x{side}",
            path.display()
        )));
    }
    encoder.encode(&pixels)
}

fn routing_rows(reports: &[crate::sample::SubjectReport], ids: &[String]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            let (w, source) = match &r.coefficients {
                Some(c) => (c.values, c.source.name()),
                None => ([f64::NAN; 3], "pre-fused"),
            };
            vec![
                ids.get(r.index).cloned().unwrap_or_else(|| r.index.to_string()),
                format!("{:.6}", w[0]),
                format!("{:.6}", w[1]),
                format!("{:.6}", w[2]),
                source.to_string(),
            ]
        })
        .collect()
}

const ROUTING_HEADER: [&str; 5] = ["image", "w_low", "w_mid", "w_high", "source"];

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        }
        None => TrainConfig::desk_default(),
    };
    if let Some(total) = args.steps {
        let ratio = cfg.stage1_steps as f64
            / (cfg.stage1_steps + cfg.stage2_steps).max(1) as f64;
        cfg.stage1_steps = ((total as f64) * ratio).round() as usize;
        cfg.stage2_steps = total - cfg.stage1_steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let resolved = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::format("config", e.to_string()))?;
    crate::blob::atomic_write(&args.out.join("config.json"), resolved.as_bytes())?;

    let out_dir = args.out.clone();
    let stage1 = cfg.stage1_steps;
    let total = cfg.total_steps();
    let mut sink = |step: usize, params: &ModelParams<f32>, opt: &crate::train::AdamW<f32>| {
        let dir = if step >= total {
            out_dir.join("checkpoint")
        } else {
            out_dir.join(format!("checkpoint-step{step}"))
        };
        let stage = if step <= stage1 { 1 } else { 2 };
        save_checkpoint(params, Some(opt), step, stage, &dir)
    };
    eprintln!(
        "training: {} stage-1 + {} stage-2 steps, batch {}",
        cfg.stage1_steps, cfg.stage2_steps, cfg.batch_size
    );
    let outcome = run_training(&cfg, Some(&mut sink))?;

    let rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.stage.to_string(),
                format!("{:.8}", r.lr),
                format!("{:.6}", r.loss),
            ]
        })
        .collect();
    write_csv(&args.out.join("loss.csv"), &["step", "stage", "lr", "loss"], &rows)?;
    if args.svg {
        let ys: Vec<f64> = outcome.losses.iter().map(|r| r.loss as f64).collect();
        write_svg_line(&args.out.join("loss.svg"), "training loss", &ys)?;
    }
    eprintln!(
        "done: final loss {:.4}, {} intra / {} cross pairs, checkpoint at {}",
        outcome.losses.last().map(|r| r.loss).unwrap_or(f32::NAN),
        outcome.pairings.intra,
        outcome.pairings.cross,
        args.out.join("checkpoint").display()
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;
    let m = params.cfg.image_tokens();
    let features = load_reference(&encoder, &args.reference)?;
    let mask = match &args.mask {
        Some(path) => parse_mask(path, m)?,
        None => vec![1; m],
    };
    let spec = SampleSpec {
        steps: args.steps,
        guidance: args.guidance,
        text: parse_tags(&args.text)?,
        subjects: vec![SubjectSource {
            reference: ReferenceInput::Features(features),
            mask,
            lambda: args.lambda,
        }],
        fusion_override: parse_fusion_weights(&args.fusion_weights, args.allow_unnormalized)?,
        mode: match args.mode {
            InferMode::Infer => AttentionMode::InferImageOnly,
            InferMode::Legacy => AttentionMode::BothBranchesLegacy,
        },
        seed: args.seed,
    };
    let outcome = euler_sample(&params, &spec)?;
    write_ppm(&args.out, params.cfg.image_size, &outcome.pixels)?;
    let csv_path = args
        .routing_csv
        .unwrap_or_else(|| args.out.with_extension("routing.csv"));
    let ids = vec![args.reference.display().to_string()];
    write_csv(&csv_path, &ROUTING_HEADER, &routing_rows(&outcome.reports, &ids))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    if args.reference.len() < 2 {
        return Err(Error::Contract(
            "compose needs at least two --reference images".into(),
        ));
    }
    if args.mask.len() != args.reference.len() {
        return Err(Error::Contract(format!(
            "got {} masks for {} references",
            args.mask.len(),
            args.reference.len()
        )));
    }
    let lambdas: Vec<f64> = if args.lambda.len() == 1 {
        vec![args.lambda[0]; args.reference.len()]
    } else if args.lambda.len() == args.reference.len() {
        args.lambda.clone()
    } else {
        return Err(Error::Contract(format!(
            "got {} lambdas for {} references",
            args.lambda.len(),
            args.reference.len()
        )));
    };
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;
    let m = params.cfg.image_tokens();
    let mut subjects = Vec::new();
    for ((reference, mask), lambda) in args.reference.iter().zip(&args.mask).zip(&lambdas) {
        subjects.push(SubjectSource {
            reference: ReferenceInput::Features(load_reference(&encoder, reference)?),
            mask: parse_mask(mask, m)?,
            lambda: *lambda,
        });
    }
    let spec = SampleSpec {
        steps: args.steps,
        guidance: args.guidance,
        text: parse_tags(&args.text)?,
        subjects,
        fusion_override: parse_fusion_weights(&args.fusion_weights, args.allow_unnormalized)?,
        mode: AttentionMode::InferImageOnly,
        seed: args.seed,
    };
    let outcome = crate::sample::compose_multi(&params, &spec)?;
    write_ppm(&args.out, params.cfg.image_size, &outcome.pixels)?;
    let csv_path = args
        .routing_csv
        .unwrap_or_else(|| args.out.with_extension("routing.csv"));
    let ids: Vec<String> = args.reference.iter().map(|p| p.display().to_string()).collect();
    write_csv(&csv_path, &ROUTING_HEADER, &routing_rows(&outcome.reports, &ids))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports =
        crate::gradcheck::gradient_check_suite(args.seed, args.seeds, args.probes, args.tolerance)?;
    let mut failed = false;
    for r in &reports {
        for g in &r.groups {
            let ok = g.max_rel_err < args.tolerance;
            failed |= !ok;
            println!(
                "seed {:3} {:8} probes {:4} max_rel {:.3e} {}",
                r.seed,
                g.group,
                g.probes,
                g.max_rel_err,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if failed {
        return Err(Error::Numeric {
            op: "gradcheck",
            detail: format!("gradients exceeded tolerance {}", args.tolerance),
        });
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let params = match &args.checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => {
            let mut cfg = TrainConfig::desk_default();
            cfg.seed = args.seed;
            let ratio = 0.3;
            cfg.stage1_steps = ((args.train_steps as f64) * ratio).round() as usize;
            cfg.stage2_steps = args.train_steps - cfg.stage1_steps;
            eprintln!("no checkpoint given: training {} steps first", args.train_steps);
            run_training(&cfg, None)?.params
        }
    };
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;

    let configs: Vec<(&str, AttentionMode, FusionVariant)> = vec![
        ("full", AttentionMode::InferImageOnly, FusionVariant::Routed),
        ("wo_dds", AttentionMode::BothBranchesLegacy, FusionVariant::Routed),
        ("add_fusion", AttentionMode::InferImageOnly, FusionVariant::Baseline(BaselineFuse::Add)),
        ("concat_fusion", AttentionMode::InferImageOnly, FusionVariant::Baseline(BaselineFuse::Concat)),
        ("single_low", AttentionMode::InferImageOnly, FusionVariant::Baseline(BaselineFuse::Single(Level::Low))),
        ("single_mid", AttentionMode::InferImageOnly, FusionVariant::Baseline(BaselineFuse::Single(Level::Mid))),
        ("single_high", AttentionMode::InferImageOnly, FusionVariant::Baseline(BaselineFuse::Single(Level::High))),
    ];
    let mut rows = Vec::new();
    for (name, mode, fusion) in configs {
        let mut spec = EvalSpec::held_out(args.scenes, args.steps);
        spec.scene_seed = args.seed;
        spec.mode = mode;
        spec.fusion = fusion;
        let scores = reconstruction_mse(&params, &encoder, &spec)?;
        eprintln!("{name}: mean reconstruction mse {:.5}", mean(&scores));
        rows.push(vec![
            name.to_string(),
            mode.name().to_string(),
            spec.fusion.name(),
            args.scenes.to_string(),
            format!("{:.6}", mean(&scores)),
        ]);
    }
    write_csv(
        &args.out,
        &["config", "attention_mode", "fusion", "scenes", "mean_mse"],
        &rows,
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_inspect_routing(args: InspectRoutingArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut triples = Vec::new();
    for i in 0..args.count {
        let scene = scene_at(
            args.seed,
            2_000_000 + i as u64,
            Pairing::Cross,
            params.cfg.image_size,
            params.cfg.encoder.image_size,
        );
        let features = encoder.encode(&scene.reference)?;
        let mut tape: Tape<f32> = Tape::new();
        let vars = FusionVars::register(&mut tape, &params.fusion);
        let fused = fuse_features(&mut tape, &vars, &features, &CoeffMode::Routed, None)?;
        let w = fused.coefficients.values;
        let id = format!(
            "scene-{i}:{:?}/{}/{:?}",
            scene.subject.shape, scene.subject.color, scene.subject.texture
        );
        rows.push(vec![
            id.clone(),
            format!("{:.6}", w[0]),
            format!("{:.6}", w[1]),
            format!("{:.6}", w[2]),
            fused.coefficients.source.name().to_string(),
        ]);
        labels.push(format!("s{i}"));
        triples.push(w);
    }
    write_csv(&args.out, &ROUTING_HEADER, &rows)?;
    if args.svg {
        write_svg_bars(
            &args.out.with_extension("svg"),
            "fusion coefficients (low/mid/high)",
            &labels,
            &triples,
        )?;
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_attn_map(args: AttnMapArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;
    let features = load_reference(&encoder, &args.reference)?;
    let text = match parse_tags(&args.text)? {
        TextCond::Null => TextCond::Tags(vec![0, 3]),
        other => other,
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;

    let settings: Vec<(&str, AttentionMode)> = match args.setting {
        ProbeSetting::Text => vec![("text", AttentionMode::TextOnlyProbe)],
        ProbeSetting::Image => vec![("image", AttentionMode::InferImageOnly)],
        ProbeSetting::Both => vec![("both", AttentionMode::BothBranchesLegacy)],
        ProbeSetting::All => vec![
            ("text", AttentionMode::TextOnlyProbe),
            ("image", AttentionMode::InferImageOnly),
            ("both", AttentionMode::BothBranchesLegacy),
        ],
    };

    let side = params.cfg.image_size;
    let m = params.cfg.image_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let state: Tensor<f32> = Tensor::randn(vec![side * side, 3], 1.0, &mut rng);

    for (name, mode) in settings {
        let mut tape: Tape<f32> = Tape::new();
        let vars = ModelVars::register(&mut tape, &params);
        let fused = fuse_features(&mut tape, &vars.fusion, &features, &CoeffMode::Routed, None)?;
        let mask = crate::model::register_mask(&mut tape, &vec![1; m], m)?;
        let subject = SubjectTokens {
            tokens: fused.tokens,
            mask,
            lambda: 1.0,
        };
        let opts = ForwardOptions {
            collect_diagnostics: true,
            ..Default::default()
        };
        let out = velocity_forward(
            &mut tape, &vars, &params.cfg, &state, args.t, &text, &[subject], mode, &opts,
        )?;
        let diag = out.diagnostics.expect("diagnostics requested");
        for (bi, block) in diag.blocks.iter().enumerate() {
            let mut emit = |branch: &str, q: crate::tape::Var| -> Result<()> {
                let map = attention_map(
                    &mut tape,
                    q,
                    fused.tokens,
                    &vars.blocks[bi],
                    params.cfg.heads,
                )?;
                let map_t = tape.value(map).clone();
                let stem = format!("{name}.block{bi}.{branch}");
                let rows: Vec<Vec<String>> = (0..map_t.rows())
                    .map(|i| {
                        (0..map_t.cols())
                            .map(|j| format!("{:.6}", map_t.get(&[i, j])))
                            .collect()
                    })
                    .collect();
                let header: Vec<String> =
                    (0..map_t.cols()).map(|j| format!("ref{j}")).collect();
                let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
                write_csv(&args.out_dir.join(format!("{stem}.csv")), &header_refs, &rows)?;
                write_pgm(&args.out_dir.join(format!("{stem}.pgm")), &map_t)?;
                Ok(())
            };
            if let Some(q_t) = block.q_t {
                emit("text", q_t)?;
            }
            emit("image", block.q_x)?;
        }
    }
    eprintln!("wrote attention maps to {}", args.out_dir.display());
    Ok(())
}

fn cmd_probe_layer(args: ProbeLayerArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let encoder: Encoder<f32> = Encoder::from_config(params.cfg.encoder.clone())?;
    let variants: Vec<(String, FusionVariant)> = vec![
        ("routed".into(), FusionVariant::Routed),
        (
            "low".into(),
            FusionVariant::Manual(FusionCoefficients::manual([1.0, 0.0, 0.0])?),
        ),
        (
            "mid".into(),
            FusionVariant::Manual(FusionCoefficients::manual([0.0, 1.0, 0.0])?),
        ),
        (
            "high".into(),
            FusionVariant::Manual(FusionCoefficients::manual([0.0, 0.0, 1.0])?),
        ),
    ];
    let mut rows = Vec::new();
    for (name, fusion) in variants {
        let mut spec = EvalSpec::held_out(args.scenes, args.steps);
        spec.scene_seed = args.seed;
        spec.fusion = fusion.clone();
        let scores = reconstruction_mse(&params, &encoder, &spec)?;
        rows.push(vec![
            name.clone(),
            args.scenes.to_string(),
            format!("{:.6}", mean(&scores)),
        ]);
        if let Some(dir) = &args.image_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
            // one sample image per variant for visual comparison
            let scene = scene_at(
                args.seed,
                spec.scene_start,
                Pairing::Intra,
                params.cfg.image_size,
                params.cfg.encoder.image_size,
            );
            let features = encoder.encode(&scene.reference)?;
            let sample_spec = SampleSpec {
                steps: args.steps,
                guidance: 1.0,
                text: TextCond::Tags(scene.text.clone()),
                subjects: vec![SubjectSource {
                    reference: ReferenceInput::Features(features),
                    mask: vec![1; params.cfg.image_tokens()],
                    lambda: 1.0,
                }],
                fusion_override: match &fusion {
                    FusionVariant::Manual(c) => Some(*c),
                    _ => None,
                },
                mode: AttentionMode::InferImageOnly,
                seed: spec.sample_seed,
            };
            let outcome = euler_sample(&params, &sample_spec)?;
            write_ppm(
                &dir.join(format!("{name}.ppm")),
                params.cfg.image_size,
                &outcome.pixels,
            )?;
        }
    }
    write_csv(&args.out, &["injected_level", "scenes", "mean_mse"], &rows)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

/// Quadrant token mask writer, handy for composing demos.
#[allow(dead_code)]
pub fn write_quadrant_mask(path: &Path, side: usize, patch: usize, quadrant: usize) -> Result<()> {
    let grid = side / patch;
    let mask = crate::scenes::quadrant_token_mask(side, patch, quadrant);
    write_pbm(path, grid, grid, &mask)
}
