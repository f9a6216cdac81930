//! Procedural toy scenes for training and evaluation.
//!
//! A scene places one textured, colored shape in a quadrant of a small
//! canvas over a uniform background. The paired reference image shows the
//! same subject segmented onto white: intra pairs keep the target's
//! placement (reference == target with background turned white), cross
//! pairs re-render the subject centered on a white canvas. Text carries
//! only concept-agnostic tags (background color, placement), so subject
//! appearance is learnable from the reference alone.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SUBJECT_COLORS: [[f32; 3]; 4] = [
    [0.9, -0.7, -0.7], // red
    [-0.7, 0.9, -0.7], // green
    [-0.7, -0.7, 0.9], // blue
    [0.9, 0.9, -0.7],  // yellow
];

pub const BG_COLORS: [[f32; 3]; 3] = [
    [-0.45, -0.45, -0.35], // slate
    [-0.15, 0.05, -0.55],  // olive
    [0.15, -0.55, 0.1],    // plum
];

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

/// Tag vocabulary: 3 background tags then 4 placement tags.
pub const TAG_NAMES: [&str; 7] = [
    "bg:slate", "bg:olive", "bg:plum", "pos:tl", "pos:tr", "pos:bl", "pos:br",
];

pub fn tag_id(name: &str) -> Result<usize> {
    TAG_NAMES
        .iter()
        .position(|&t| t == name)
        .ok_or_else(|| Error::Validation(format!("unknown tag '{name}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureMotif {
    Solid,
    Stripes,
}

/// Everything that defines the subject's appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: usize,
    pub texture: TextureMotif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    Intra,
    Cross,
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub subject: SubjectSpec,
    /// 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
    pub quadrant: usize,
    pub bg_color: usize,
    pub pairing: Pairing,
    /// Target pixels `[side*side, 3]` in [-1, 1].
    pub target: Tensor<f32>,
    /// Reference pixels at the encoder's input size, subject on white.
    pub reference: Tensor<f32>,
    /// Conditioning tag ids: background then placement.
    pub text: Vec<usize>,
}

fn shape_hit(shape: Shape, u: usize, v: usize, box_side: usize) -> bool {
    let b = box_side as f64;
    let uf = u as f64;
    let vf = v as f64;
    match shape {
        Shape::Square => u >= 1 && v >= 1 && uf < b - 1.0 && vf < b - 1.0,
        Shape::Circle => {
            let c = (b - 1.0) / 2.0;
            let r = b / 2.0 - 1.0;
            (uf - c) * (uf - c) + (vf - c) * (vf - c) <= r * r
        }
        Shape::Triangle => {
            let c = (b - 1.0) / 2.0;
            vf < b - 1.0 && (uf - c).abs() <= vf / 2.0
        }
    }
}

/// Render the subject in the given quadrant (or centered when `quadrant`
/// is `None`) over `bg` (`None` = white).
pub fn render(
    side: usize,
    subject: SubjectSpec,
    quadrant: Option<usize>,
    bg: Option<usize>,
) -> Tensor<f32> {
    let box_side = side / 2;
    let (oy, ox) = match quadrant {
        Some(q) => ((q / 2) * box_side, (q % 2) * box_side),
        None => (side / 4, side / 4),
    };
    let bg_rgb = match bg {
        Some(i) => BG_COLORS[i],
        None => WHITE,
    };
    let color = SUBJECT_COLORS[subject.color];
    let dark = color.map(|c| c * 0.25 - 0.2);
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let inside = y >= oy
                && x >= ox
                && y < oy + box_side
                && x < ox + box_side
                && shape_hit(subject.shape, x - ox, y - oy, box_side);
            let rgb = if inside {
                match subject.texture {
                    TextureMotif::Solid => color,
                    TextureMotif::Stripes => {
                        if (y / 2) % 2 == 0 {
                            color
                        } else {
                            dark
                        }
                    }
                }
            } else {
                bg_rgb
            };
            data.extend_from_slice(&rgb);
        }
    }
    Tensor::new(vec![side * side, 3], data).expect("render shape")
}

/// Turn background pixels of a rendered scene white, keeping the subject.
/// Constructively equals re-rendering with a white background.
pub fn whiten_background(scene: &ToyScene, side: usize) -> Tensor<f32> {
    render(side, scene.subject, Some(scene.quadrant), None)
}

/// Token-grid mask covering the quadrant box, for a patch grid of the
/// given side / patch size.
pub fn quadrant_token_mask(side: usize, patch: usize, quadrant: usize) -> Vec<u8> {
    let grid = side / patch;
    let box_side = side / 2;
    let (oy, ox) = ((quadrant / 2) * box_side, (quadrant % 2) * box_side);
    let mut mask = Vec::with_capacity(grid * grid);
    for ty in 0..grid {
        for tx in 0..grid {
            let cy = ty * patch + patch / 2;
            let cx = tx * patch + patch / 2;
            let hit = cy >= oy && cy < oy + box_side && cx >= ox && cx < ox + box_side;
            mask.push(u8::from(hit));
        }
    }
    mask
}

/// Deterministic scene for (seed, index): the same pair is produced by any
/// caller, so held-out sets are disjoint index ranges.
pub fn scene_at(
    seed: u64,
    index: u64,
    pairing: Pairing,
    target_side: usize,
    reference_side: usize,
) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let subject = SubjectSpec {
        shape: match rng.gen_range(0..3) {
            0 => Shape::Square,
            1 => Shape::Circle,
            _ => Shape::Triangle,
        },
        color: rng.gen_range(0..SUBJECT_COLORS.len()),
        texture: if rng.gen_range(0..2) == 0 {
            TextureMotif::Solid
        } else {
            TextureMotif::Stripes
        },
    };
    let quadrant = rng.gen_range(0..4);
    let bg_color = rng.gen_range(0..BG_COLORS.len());
    let target = render(target_side, subject, Some(quadrant), Some(bg_color));
    let reference = match pairing {
        Pairing::Intra => render(reference_side, subject, Some(quadrant), None),
        Pairing::Cross => render(reference_side, subject, None, None),
    };
    ToyScene {
        subject,
        quadrant,
        bg_color,
        pairing,
        target,
        reference,
        text: vec![bg_color, 3 + quadrant],
    }
}

/// A batch of consecutive scene indices with one pairing kind.
pub fn synth_batch(
    seed: u64,
    start_index: u64,
    count: usize,
    pairing: Pairing,
    target_side: usize,
    reference_side: usize,
) -> Vec<ToyScene> {
    (0..count as u64)
        .map(|i| scene_at(seed, start_index + i, pairing, target_side, reference_side))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_batch() {
        let a = synth_batch(7, 100, 4, Pairing::Intra, 24, 24);
        let b = synth_batch(7, 100, 4, Pairing::Intra, 24, 24);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.target.bit_eq(&y.target));
            assert!(x.reference.bit_eq(&y.reference));
            assert_eq!(x.text, y.text);
        }
    }

    #[test]
    fn intra_reference_is_target_with_white_background() {
        for i in 0..8 {
            let s = scene_at(3, i, Pairing::Intra, 24, 24);
            assert!(s.reference.bit_eq(&whiten_background(&s, 24)));
            // every non-subject pixel is white, subject pixels match target
            for p in 0..24 * 24 {
                for c in 0..3 {
                    let r = s.reference.get(&[p, c]);
                    let t = s.target.get(&[p, c]);
                    assert!(r == 1.0 || r == t);
                }
            }
        }
    }

    #[test]
    fn cross_pair_same_descriptor_different_pixels() {
        for i in 0..8 {
            let s = scene_at(4, i, Pairing::Cross, 24, 24);
            let intra = scene_at(4, i, Pairing::Intra, 24, 24);
            assert_eq!(s.subject, intra.subject);
            assert!(!s.reference.bit_eq(&s.target));
        }
    }

    #[test]
    fn quadrant_mask_covers_quarter_of_tokens() {
        for q in 0..4 {
            let mask = quadrant_token_mask(24, 4, q);
            assert_eq!(mask.len(), 36);
            assert_eq!(mask.iter().map(|&b| b as usize).sum::<usize>(), 9);
        }
        // disjoint and complementary over the four quadrants
        let mut total = vec![0u8; 36];
        for q in 0..4 {
            for (t, m) in total.iter_mut().zip(quadrant_token_mask(24, 4, q)) {
                *t += m;
            }
        }
        assert!(total.iter().all(|&v| v == 1));
    }

    #[test]
    fn tags_resolve_and_match_scene_fields() {
        assert_eq!(tag_id("bg:olive").unwrap(), 1);
        assert_eq!(tag_id("pos:br").unwrap(), 6);
        assert!(tag_id("pos:center").is_err());
        let s = scene_at(5, 9, Pairing::Intra, 24, 24);
        assert_eq!(s.text[0], s.bg_color);
        assert_eq!(s.text[1], 3 + s.quadrant);
    }
}
