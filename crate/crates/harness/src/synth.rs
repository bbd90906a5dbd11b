//! Synthetic IDX corpus generator.
//!
//! The harness trains on overlaid 28×28 grayscale sources in the standard
//! IDX layout. When the real archives are not available, `mtvib synth`
//! renders a stand-in corpus with the same format, value range, and label
//! structure: ten digit classes drawn as pen strokes and ten garment
//! classes drawn as filled silhouettes, each instance perturbed by a random
//! affine warp, brightness shift, and pixel noise so the classes overlap
//! the way camera data does rather than being ten fixed bitmaps.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mtvib_core::data::{Source, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, SOURCE_HW};
use mtvib_core::rng::{stream_rng, streams};

use crate::error::{HarnessError, Result};

type Point = (f64, f64);

/// One drawable class: pen strokes (polylines with a round nib) plus filled
/// polygons, all in unit coordinates with y growing downward.
struct Template {
    strokes: Vec<Vec<Point>>,
    polygons: Vec<Vec<Point>>,
}

impl Template {
    fn strokes(strokes: Vec<Vec<Point>>) -> Template {
        Template { strokes, polygons: Vec::new() }
    }
}

/// Closed ellipse outline as a polyline (first point repeated at the end).
fn ring(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let a = std::f64::consts::TAU * i as f64 / n as f64;
        pts.push((cx + rx * a.cos(), cy + ry * a.sin()));
    }
    pts
}

fn digit_templates() -> Vec<Template> {
    vec![
        // 0 — oval ring
        Template::strokes(vec![ring(0.50, 0.50, 0.21, 0.30, 14)]),
        // 1 — slim vertical bar with flag and base
        Template::strokes(vec![
            vec![(0.40, 0.32), (0.50, 0.20), (0.50, 0.82)],
            vec![(0.40, 0.82), (0.60, 0.82)],
        ]),
        // 2 — wide top arc, diagonal, wide base bar
        Template::strokes(vec![vec![
            (0.28, 0.34),
            (0.33, 0.22),
            (0.48, 0.17),
            (0.62, 0.21),
            (0.70, 0.31),
            (0.67, 0.42),
            (0.50, 0.57),
            (0.33, 0.70),
            (0.26, 0.80),
            (0.74, 0.80),
        ]]),
        // 3 — two right-facing bumps
        Template::strokes(vec![vec![
            (0.32, 0.24),
            (0.45, 0.17),
            (0.60, 0.22),
            (0.65, 0.33),
            (0.56, 0.44),
            (0.46, 0.47),
            (0.60, 0.52),
            (0.68, 0.62),
            (0.63, 0.74),
            (0.48, 0.82),
            (0.32, 0.76),
        ]]),
        // 4 — open diagonal, crossbar, tall right stroke
        Template::strokes(vec![
            vec![(0.58, 0.18), (0.30, 0.58), (0.74, 0.58)],
            vec![(0.58, 0.18), (0.58, 0.84)],
        ]),
        // 5 — long flag top, left stem, right-facing belly
        Template::strokes(vec![vec![
            (0.72, 0.17),
            (0.34, 0.17),
            (0.33, 0.44),
            (0.55, 0.40),
            (0.68, 0.48),
            (0.70, 0.62),
            (0.60, 0.78),
            (0.42, 0.82),
            (0.30, 0.72),
        ]]),
        // 6 — swept stem closing into a lower loop
        Template::strokes(vec![vec![
            (0.62, 0.18),
            (0.48, 0.24),
            (0.38, 0.38),
            (0.33, 0.56),
            (0.36, 0.72),
            (0.48, 0.81),
            (0.61, 0.75),
            (0.66, 0.62),
            (0.58, 0.50),
            (0.44, 0.50),
            (0.35, 0.58),
        ]]),
        // 7 — top bar and long diagonal
        Template::strokes(vec![vec![(0.30, 0.20), (0.70, 0.20), (0.44, 0.82)]]),
        // 8 — stacked rings
        Template::strokes(vec![
            ring(0.50, 0.33, 0.14, 0.13, 12),
            ring(0.50, 0.64, 0.17, 0.16, 12),
        ]),
        // 9 — upper ring with a trailing tail
        Template::strokes(vec![
            ring(0.50, 0.35, 0.15, 0.14, 12),
            vec![(0.65, 0.38), (0.63, 0.60), (0.55, 0.80)],
        ]),
    ]
}

fn fashion_templates() -> Vec<Template> {
    vec![
        // 0 t-shirt — boxy body with short sleeves
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.22, 0.28),
                (0.36, 0.20),
                (0.44, 0.25),
                (0.56, 0.25),
                (0.64, 0.20),
                (0.78, 0.28),
                (0.74, 0.44),
                (0.64, 0.40),
                (0.66, 0.78),
                (0.34, 0.78),
                (0.36, 0.40),
                (0.26, 0.44),
            ]],
        },
        // 1 trouser — two legs from a shared waist
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.34, 0.18),
                (0.66, 0.18),
                (0.70, 0.82),
                (0.56, 0.82),
                (0.52, 0.42),
                (0.48, 0.42),
                (0.44, 0.82),
                (0.30, 0.82),
            ]],
        },
        // 2 pullover — winged long sleeves angled outward
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.20, 0.30),
                (0.34, 0.20),
                (0.44, 0.24),
                (0.56, 0.24),
                (0.66, 0.20),
                (0.80, 0.30),
                (0.88, 0.58),
                (0.74, 0.64),
                (0.67, 0.46),
                (0.67, 0.80),
                (0.33, 0.80),
                (0.33, 0.46),
                (0.26, 0.64),
                (0.12, 0.58),
            ]],
        },
        // 3 dress — fitted top flaring to a wide hem
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.38, 0.16),
                (0.62, 0.16),
                (0.58, 0.36),
                (0.74, 0.82),
                (0.26, 0.82),
                (0.42, 0.36),
            ]],
        },
        // 4 coat — long body with a center opening
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.20, 0.24),
                (0.38, 0.16),
                (0.50, 0.28),
                (0.62, 0.16),
                (0.80, 0.24),
                (0.84, 0.60),
                (0.72, 0.62),
                (0.70, 0.86),
                (0.53, 0.86),
                (0.53, 0.38),
                (0.47, 0.38),
                (0.47, 0.86),
                (0.30, 0.86),
                (0.28, 0.62),
                (0.16, 0.60),
            ]],
        },
        // 5 sandal — flat sole with straps
        Template {
            strokes: vec![
                vec![(0.30, 0.70), (0.54, 0.46), (0.70, 0.70)],
                vec![(0.54, 0.46), (0.54, 0.60)],
            ],
            polygons: vec![vec![(0.18, 0.70), (0.82, 0.70), (0.84, 0.80), (0.16, 0.80)]],
        },
        // 6 shirt — slim body with a deep V placket
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.26, 0.26),
                (0.40, 0.18),
                (0.50, 0.48),
                (0.60, 0.18),
                (0.74, 0.26),
                (0.70, 0.42),
                (0.63, 0.39),
                (0.64, 0.84),
                (0.36, 0.84),
                (0.37, 0.39),
                (0.30, 0.42),
            ]],
        },
        // 7 sneaker — low wedge profile
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.16, 0.72),
                (0.20, 0.56),
                (0.34, 0.52),
                (0.48, 0.56),
                (0.70, 0.62),
                (0.84, 0.68),
                (0.84, 0.78),
                (0.16, 0.78),
            ]],
        },
        // 8 bag — compact body with an arched handle
        Template {
            strokes: vec![vec![
                (0.40, 0.48),
                (0.40, 0.36),
                (0.45, 0.29),
                (0.55, 0.29),
                (0.60, 0.36),
                (0.60, 0.48),
            ]],
            polygons: vec![vec![(0.26, 0.48), (0.74, 0.48), (0.78, 0.80), (0.22, 0.80)]],
        },
        // 9 ankle boot — tall shaft over a flat sole
        Template {
            strokes: vec![],
            polygons: vec![vec![
                (0.30, 0.20),
                (0.52, 0.20),
                (0.54, 0.52),
                (0.66, 0.56),
                (0.82, 0.66),
                (0.84, 0.78),
                (0.18, 0.78),
                (0.22, 0.66),
                (0.28, 0.58),
            ]],
        },
    ]
}

fn templates_for(source: Source) -> Vec<Template> {
    match source {
        Source::Mnist => digit_templates(),
        Source::Fashion => fashion_templates(),
    }
}

// ---- geometry -----------------------------------------------------------

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Even–odd inside test plus distance to the nearest edge.
fn polygon_coverage(p: Point, poly: &[Point], aa: f64) -> f64 {
    let n = poly.len();
    let mut inside = false;
    let mut d = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        d = d.min(dist_to_segment(p, a, b));
        if (a.1 > p.1) != (b.1 > p.1) {
            let x_cross = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
            if p.0 < x_cross {
                inside = !inside;
            }
        }
    }
    let signed = if inside { d } else { -d };
    (0.5 + signed / aa).clamp(0.0, 1.0)
}

fn stroke_coverage(p: Point, polyline: &[Point], half_width: f64, aa: f64) -> f64 {
    let mut d = f64::INFINITY;
    for w in polyline.windows(2) {
        d = d.min(dist_to_segment(p, w[0], w[1]));
    }
    (0.5 + (half_width - d) / aa).clamp(0.0, 1.0)
}

// ---- rendering ----------------------------------------------------------

struct Jitter {
    /// Inverse of the 2×2 warp (rotation · shear · scale).
    inv: [f64; 4],
    translate: Point,
    brightness: f64,
    stroke_half_width: f64,
}

fn draw_jitter(rng: &mut ChaCha8Rng) -> Jitter {
    let theta: f64 = rng.gen_range(-0.18..0.18);
    let scale = rng.gen_range(0.85..1.08);
    let shear = rng.gen_range(-0.08..0.08);
    let translate = (rng.gen_range(-0.07..0.07), rng.gen_range(-0.07..0.07));
    let brightness = rng.gen_range(0.75..1.0);
    let stroke_half_width = rng.gen_range(0.040..0.055);

    // Forward warp A = R(theta) · Shear(shear) · scale, inverted analytically.
    let (sin, cos) = theta.sin_cos();
    let a = scale * cos;
    let b = scale * (shear * cos - sin);
    let c = scale * sin;
    let d = scale * (shear * sin + cos);
    let det = a * d - b * c;
    let inv = [d / det, -b / det, -c / det, a / det];

    Jitter { inv, translate, brightness, stroke_half_width }
}

const NOISE_SIGMA: f64 = 0.03;
const EDGE_AA: f64 = 0.025;

fn render(template: &Template, jitter: &Jitter, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let hw = SOURCE_HW;
    let mut out = Vec::with_capacity(hw * hw);
    for row in 0..hw {
        for col in 0..hw {
            // Pixel center in unit coordinates, pulled back into template
            // space through the inverse warp around the canvas center.
            let px = (col as f64 + 0.5) / hw as f64 - 0.5 - jitter.translate.0;
            let py = (row as f64 + 0.5) / hw as f64 - 0.5 - jitter.translate.1;
            let q = (
                jitter.inv[0] * px + jitter.inv[1] * py + 0.5,
                jitter.inv[2] * px + jitter.inv[3] * py + 0.5,
            );

            let mut ink: f64 = 0.0;
            for poly in &template.polygons {
                ink = ink.max(polygon_coverage(q, poly, EDGE_AA));
            }
            for stroke in &template.strokes {
                ink = ink.max(stroke_coverage(q, stroke, jitter.stroke_half_width, EDGE_AA));
            }

            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_SIGMA;
            let value = (ink * jitter.brightness + noise).clamp(0.0, 1.0);
            out.push((value * 255.0).round() as u8);
        }
    }
    out
}

/// Render `n` images with cycled labels 0,1,…,9,0,… from one rng stream.
fn render_split(
    templates: &[Template],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(n * SOURCE_HW * SOURCE_HW);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % templates.len();
        let jitter = draw_jitter(rng);
        images.extend_from_slice(&render(&templates[class], &jitter, rng));
        labels.push(class as u8);
    }
    (images, labels)
}

// ---- IDX emission -------------------------------------------------------

fn idx_image_bytes(images: &[u8], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(SOURCE_HW as u32).to_be_bytes());
    out.extend_from_slice(&(SOURCE_HW as u32).to_be_bytes());
    out.extend_from_slice(images);
    out
}

fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Render a corpus for `source` and write the four standard IDX files under
/// `data_dir/<source>/`. The output is a pure function of
/// (source, n_train, n_test, seed).
pub fn generate(
    data_dir: &Path,
    source: Source,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    let templates = templates_for(source);
    let mut rng = stream_rng(seed, streams::SYNTH);
    let (train_images, train_labels) = render_split(&templates, n_train, &mut rng);
    let (test_images, test_labels) = render_split(&templates, n_test, &mut rng);

    let dir = data_dir.join(source.as_str());
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;

    let files = [
        ("train-images-idx3-ubyte", idx_image_bytes(&train_images, n_train)),
        ("train-labels-idx1-ubyte", idx_label_bytes(&train_labels)),
        ("t10k-images-idx3-ubyte", idx_image_bytes(&test_images, n_test)),
        ("t10k-labels-idx1-ubyte", idx_label_bytes(&test_labels)),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}
