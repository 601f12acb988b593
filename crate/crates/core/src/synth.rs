//! Seeded synthetic datasets: blob textures, faces, stroke digits, tone-grid
//! music, random networks, and the degradations used by the benchmarks.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Network, NetworkBuilder, Payload, Value, VarId, VariableKind};
use crate::io::ImageBuffer;
use crate::layouts::{Region, MNIST_SIDE};
use crate::subspace::{Basis, HiddenDomain, SubspaceFactor};
use crate::table::MemoryTable;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn put(img: &mut ImageBuffer, x: usize, y: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        img.set(x, y, c, crate::io::float_to_byte(*v));
    }
}

/// RGB texture of a few soft colored blobs over a flat background.
pub fn blob_texture(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = rng_for(seed, 1);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(3..=6))
        .map(|_| {
            (
                [rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64)],
                rng.random_range(1.5..5.0),
                std::array::from_fn(|_| rng.random_range(-0.6..0.6)),
            )
        })
        .collect();
    let mut img = ImageBuffer::new(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let mut v = bg;
            for (c, r, col) in &blobs {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                for k in 0..3 {
                    v[k] += g * col[k];
                }
            }
            put(&mut img, x, y, v);
        }
    }
    img
}

/// Where the eyes of [`face`] sit.
pub fn eye_region(width: usize, height: usize) -> Region {
    let y0 = height * 3 / 10;
    let x0 = width / 8;
    Region {
        x0,
        y0,
        w: width - 2 * x0,
        h: (height / 5).max(1),
    }
}

/// Cartoon face: skin oval, two eyes, mouth, varied by seed.
pub fn face(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = rng_for(seed, 2);
    let (w, h) = (width as f64, height as f64);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let tone = rng.random_range(0.45..0.95);
    let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.7)];
    let iris: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let eye_y = h * rng.random_range(0.37..0.43);
    let eye_dx = w * rng.random_range(0.17..0.22);
    let eye_r = w * rng.random_range(0.06..0.09);
    let mouth_y = h * rng.random_range(0.68..0.76);
    let mouth_w = w * rng.random_range(0.12..0.22);
    let (cx, cy) = (w / 2.0 + rng.random_range(-1.0..1.0), h / 2.0);
    let (rx, ry) = (w * rng.random_range(0.38..0.46), h * rng.random_range(0.40..0.47));
    let mut img = ImageBuffer::new(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let oval = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            let mut v = if oval <= 1.0 {
                // darker toward the rim
                let shade = 1.0 - 0.25 * oval;
                [skin[0] * shade, skin[1] * shade, skin[2] * shade]
            } else {
                bg
            };
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let d = (((px - ex) / eye_r).powi(2) + ((py - eye_y) / (0.6 * eye_r)).powi(2)).sqrt();
                if d <= 0.5 {
                    v = iris;
                } else if d <= 1.0 {
                    v = [0.92, 0.92, 0.9];
                }
            }
            if (py - mouth_y).abs() <= 0.04 * h + 0.5 && (px - cx).abs() <= mouth_w {
                v = [0.6, 0.15, 0.2];
            }
            put(&mut img, x, y, v);
        }
    }
    img
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    (0..=12)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / 12.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn digit_strokes(class: u32) -> Vec<Vec<(f64, f64)>> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.32, 0.44)],
        1 => vec![vec![(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)]],
        2 => vec![vec![(0.15, 0.25), (0.35, 0.05), (0.7, 0.05), (0.85, 0.25), (0.8, 0.45), (0.15, 0.95), (0.85, 0.95)]],
        3 => vec![vec![(0.15, 0.1), (0.8, 0.1), (0.45, 0.45), (0.85, 0.65), (0.7, 0.92), (0.15, 0.9)]],
        4 => vec![vec![(0.7, 0.95), (0.7, 0.05), (0.1, 0.65), (0.9, 0.65)]],
        5 => vec![vec![(0.85, 0.05), (0.2, 0.05), (0.15, 0.45), (0.7, 0.42), (0.85, 0.7), (0.65, 0.95), (0.15, 0.9)]],
        6 => vec![vec![(0.75, 0.05), (0.3, 0.35), (0.15, 0.7), (0.35, 0.95), (0.7, 0.92), (0.82, 0.7), (0.6, 0.5), (0.2, 0.62)]],
        7 => vec![vec![(0.1, 0.05), (0.9, 0.05), (0.4, 0.95)]],
        8 => vec![ellipse(0.5, 0.27, 0.27, 0.22), ellipse(0.5, 0.72, 0.32, 0.24)],
        9 => vec![ellipse(0.5, 0.3, 0.3, 0.24), vec![(0.8, 0.3), (0.7, 0.95)]],
        _ => panic!("digit class {class} out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

pub const DIGIT_SIDE: usize = 28;

/// 28x28 gray stroke digit with seeded jitter of control points, scale,
/// offset and pen width.
pub fn stroke_digit(class: u32, seed: u64) -> Vec<u8> {
    let mut rng = rng_for(seed, 3);
    let jitter = 0.06;
    let scale = rng.random_range(0.85..1.05);
    let (ox, oy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let pen = rng.random_range(1.0..1.8);
    let strokes: Vec<Vec<(f64, f64)>> = digit_strokes(class)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let x = x + rng.random_range(-jitter..jitter);
                    let y = y + rng.random_range(-jitter..jitter);
                    (4.0 + ox + 20.0 * scale * x, 3.0 + oy + 22.0 * scale * y)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0u8; DIGIT_SIDE * DIGIT_SIDE];
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            out[y * DIGIT_SIDE + x] = crate::io::float_to_byte(1.0 + pen - d.max(pen));
        }
    }
    out
}

/// Center a 28x28 digit in the 32x32 hierarchy frame.
pub fn pad_digit(d: &[u8]) -> Vec<u8> {
    assert_eq!(d.len(), DIGIT_SIDE * DIGIT_SIDE);
    let pad = (MNIST_SIDE - DIGIT_SIDE) / 2;
    let mut out = vec![0u8; MNIST_SIDE * MNIST_SIDE];
    for y in 0..DIGIT_SIDE {
        out[(y + pad) * MNIST_SIDE + pad..(y + pad) * MNIST_SIDE + pad + DIGIT_SIDE]
            .copy_from_slice(&d[y * DIGIT_SIDE..(y + 1) * DIGIT_SIDE]);
    }
    out
}

/// Mono music: every `beat` seconds, one to three notes from a pentatonic
/// scale with a decaying envelope and two overtones.
pub fn tone_grid(rate: u32, seconds: f64, beat: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 4);
    let n = (rate as f64 * seconds) as usize;
    let per_beat = ((rate as f64 * beat) as usize).max(1);
    let scale = [0, 2, 4, 7, 9, 12, 14, 16, 19, 21];
    let mut out = vec![0.0; n];
    for start in (0..n).step_by(per_beat) {
        let k = rng.random_range(1..=3);
        let notes: Vec<f64> = (0..k)
            .map(|_| 220.0 * 2f64.powf(scale[rng.random_range(0..scale.len())] as f64 / 12.0))
            .collect();
        for t in start..(start + per_beat).min(n) {
            let s = (t - start) as f64 / rate as f64;
            let env = (-4.0 * s / beat).exp() * (1.0 - (-200.0 * s).exp());
            let mut v = 0.0;
            for f in &notes {
                let ph = 2.0 * PI * f * t as f64 / rate as f64;
                v += ph.sin() + 0.5 * (2.0 * ph).sin() + 0.25 * (3.0 * ph).sin();
            }
            out[t] = 0.25 * env * v / k as f64;
        }
    }
    out
}

/// Add N(0, sigma) noise on the byte scale, clamping and rounding.
pub fn gaussian_noise(img: &ImageBuffer, sigma: f64, seed: u64) -> ImageBuffer {
    let mut rng = rng_for(seed, 5);
    let mut out = img.clone();
    if sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for b in out.data.iter_mut() {
        let v = *b as f64 + normal.sample(&mut rng);
        *b = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Exactly `count` connected pixels grown by a seeded random walk from the
/// image center (4-neighborhood, walk clamped to the image).
pub fn random_blob(width: usize, height: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    assert!(count <= width * height, "blob larger than image");
    let mut rng = rng_for(seed, 6);
    let mut inside = vec![false; width * height];
    let mut out = Vec::with_capacity(count);
    let (mut x, mut y) = (width / 2, height / 2);
    while out.len() < count {
        if !inside[y * width + x] {
            inside[y * width + x] = true;
            out.push((x, y));
        }
        match rng.random_range(0..4) {
            0 if x + 1 < width => x += 1,
            1 if x > 0 => x -= 1,
            2 if y + 1 < height => y += 1,
            3 if y > 0 => y -= 1,
            _ => {}
        }
    }
    out
}

/// Random connected network with mixed real, integer and label variables,
/// memory tables and the occasional nonnegative subspace factor. Every
/// factor shares a variable with an earlier one and at least one factor
/// variable carries evidence.
pub fn random_network(seed: u64, max_vars: usize, max_factors: usize) -> Network {
    let mut rng = rng_for(seed, 7);
    let n_vars = rng.random_range(2..=max_vars.max(2));
    let kinds: Vec<VariableKind> = (0..n_vars)
        .map(|_| match rng.random_range(0..3) {
            0 => VariableKind::REAL_NONNEG,
            1 => VariableKind::Integer { range: Some((-5, 10)) },
            _ => VariableKind::Label {
                domain: rng.random_range(2..=10),
            },
        })
        .collect();
    let random_value = |rng: &mut ChaCha8Rng, k: VariableKind| match k {
        VariableKind::Real { .. } => Value::Real((rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0),
        VariableKind::Integer { .. } => Value::Int(rng.random_range(-5..=10)),
        VariableKind::Label { domain } => Value::Label(rng.random_range(0..domain)),
        VariableKind::Complex => unreachable!(),
    };
    let weight = |rng: &mut ChaCha8Rng, k: VariableKind| {
        if k.is_discrete() {
            1.0
        } else {
            rng.random_range(0.5..3.0)
        }
    };
    let mut b = NetworkBuilder::with_variables(kinds.clone());
    let n_factors = rng.random_range(1..=max_factors.max(1));
    let mut used: Vec<VarId> = Vec::new();
    let mut order: Vec<VarId> = (0..n_vars).collect();
    for a in 0..n_factors {
        order.shuffle(&mut rng);
        let degree = rng.random_range(1..=4.min(n_vars));
        let mut nb: Vec<VarId> = order[..degree].to_vec();
        if a > 0 && !nb.iter().any(|i| used.contains(i)) {
            nb[0] = used[rng.random_range(0..used.len())];
            nb.sort_unstable();
            nb.dedup();
        }
        for &i in &nb {
            if !used.contains(&i) {
                used.push(i);
            }
        }
        let weights: Vec<f64> = nb.iter().map(|&i| weight(&mut rng, kinds[i])).collect();
        let all_real = nb.iter().all(|&i| matches!(kinds[i], VariableKind::Real { .. }));
        let payload = if all_real && nb.len() >= 2 && rng.random_bool(0.4) {
            let n = nb.len();
            let p = rng.random_range(1..n);
            let w = DMatrix::from_fn(n, p, |_, _| rng.random_range(0.0..1.0));
            Payload::Subspace(Arc::new(
                SubspaceFactor::new(Basis::Real(w), HiddenDomain::NonnegReals).expect("valid basis"),
            ))
        } else {
            let rows: Vec<Vec<Value>> = (0..rng.random_range(1..=6))
                .map(|_| nb.iter().map(|&i| random_value(&mut rng, kinds[i])).collect())
                .collect();
            Payload::table(Arc::new(MemoryTable::new(rows).expect("typed rows")))
        };
        b.add_memory_factor(payload, nb, weights);
    }
    let mut observed = false;
    for i in 0..n_vars {
        let must = !observed && i == *used.iter().max().expect("nonempty");
        if must || rng.random_bool(0.4) {
            observed |= used.contains(&i);
            let v = random_value(&mut rng, kinds[i]);
            let w = weight(&mut rng, kinds[i]);
            b.add_evidence(i, v, w);
        }
    }
    b.build().expect("generated network is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(blob_texture(16, 16, 3), blob_texture(16, 16, 3));
        assert_ne!(blob_texture(16, 16, 3), blob_texture(16, 16, 4));
        assert_eq!(face(24, 32, 1), face(24, 32, 1));
        assert_eq!(stroke_digit(7, 5), stroke_digit(7, 5));
        assert_eq!(tone_grid(8000, 0.5, 0.25, 2), tone_grid(8000, 0.5, 0.25, 2));
    }

    #[test]
    fn blob_has_exact_size_and_is_connected() {
        for seed in 0..20 {
            let blob = random_blob(16, 16, 36, seed);
            assert_eq!(blob.len(), 36);
            let set: std::collections::HashSet<_> = blob.iter().copied().collect();
            assert_eq!(set.len(), 36);
            let mut seen = std::collections::HashSet::new();
            let mut stack = vec![blob[0]];
            while let Some((x, y)) = stack.pop() {
                if !seen.insert((x, y)) {
                    continue;
                }
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let q = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                    if set.contains(&q) {
                        stack.push(q);
                    }
                }
            }
            assert_eq!(seen.len(), 36);
        }
    }

    #[test]
    fn digits_have_ink_and_padding() {
        for c in 0..10 {
            let d = pad_digit(&stroke_digit(c, c as u64));
            assert!(d.iter().filter(|&&b| b > 128).count() > 20, "class {c}");
            assert!(d[..2 * MNIST_SIDE].iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn noise_zero_is_identity() {
        let img = blob_texture(8, 8, 0);
        assert_eq!(gaussian_noise(&img, 0.0, 1), img);
        assert_ne!(gaussian_noise(&img, 40.0, 1), img);
    }

    #[test]
    fn random_networks_build() {
        for s in 0..50 {
            let net = random_network(s, 20, 10);
            assert!(net.evidence_factors().count() >= 1);
        }
    }
}
