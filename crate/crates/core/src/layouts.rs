//! Network skeletons for images, spectrograms and the digit hierarchy.
//!
//! A [`Skeleton`] lists variables and memory-factor templates (neighbors and
//! weights) without payloads; [`Skeleton::bind`] attaches payloads and
//! evidence to produce a [`Network`]. Memory factors keep their template index
//! as their factor id; evidence factors follow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, Network, NetworkBuilder, Payload, Value, VarId, VariableKind};
use crate::training::Exemplars;

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("region {w}x{h} is smaller than one {patch}x{patch} patch")]
    TooSmall { w: usize, h: usize, patch: usize },
    #[error("region of interest exceeds the image")]
    RegionOutside,
    #[error("patch {patch} must be twice the linked patch {linked} and twice the stride {stride}")]
    Geometry {
        patch: usize,
        linked: usize,
        stride: usize,
    },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("{got} payloads for {expected} factor templates")]
    PayloadCount { got: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Tiling of `[0, size)` by windows of length `len` at `stride`: windows start
/// at multiples of the stride until one reaches the end; the last may be
/// truncated.
pub fn tile_starts(size: usize, len: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        let e = (s + len).min(size);
        out.push((s, e - s));
        if s + len >= size {
            break;
        }
        s += stride;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Single-channel square over channel `c`.
    Mono(usize),
    /// Small square over all color channels (and gray when present).
    Linked,
    /// Full square over all channels.
    Combined,
    /// Full-spectrum column block.
    Spectrum,
    /// Hierarchy factor at a level.
    Level(usize),
}

/// Geometric footprint of a factor, in layout coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTemplate {
    pub group: Group,
    pub region: Region,
    pub neighbors: Vec<VarId>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub variables: Vec<VariableKind>,
    pub factors: Vec<FactorTemplate>,
}

impl Skeleton {
    /// Attach one payload per template plus single-variable evidence.
    pub fn bind(
        &self,
        payloads: Vec<Payload>,
        evidence: &[(VarId, Value, f64)],
    ) -> Result<Network, LayoutError> {
        if payloads.len() != self.factors.len() {
            return Err(LayoutError::PayloadCount {
                got: payloads.len(),
                expected: self.factors.len(),
            });
        }
        let mut b = NetworkBuilder::with_variables(self.variables.clone());
        for (t, p) in self.factors.iter().zip(payloads) {
            b.add_memory_factor(p, t.neighbors.clone(), t.weights.clone());
        }
        for &(i, v, w) in evidence {
            b.add_evidence(i, v, w);
        }
        Ok(b.build()?)
    }

    /// Exemplar rows for template `f`, one per full variable sample.
    pub fn exemplars(&self, f: usize, samples: &[Vec<Value>]) -> Exemplars {
        let t = &self.factors[f];
        samples
            .iter()
            .map(|s| t.neighbors.iter().map(|&i| s[i]).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Mono,
    Rgb,
    RgbGray,
}

impl Channels {
    pub fn planes(self) -> usize {
        match self {
            Channels::Mono => 1,
            Channels::Rgb => 3,
            Channels::RgbGray => 4,
        }
    }

    /// Planes covered by single-channel factors (gray is linked-only).
    fn color_planes(self) -> usize {
        match self {
            Channels::Mono => 1,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageLayoutSpec {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub stride: usize,
    pub linked_patch: usize,
    pub channels: Channels,
    pub region: Option<Region>,
    pub factor_weight: f64,
}

impl Default for ImageLayoutSpec {
    fn default() -> Self {
        ImageLayoutSpec {
            width: 16,
            height: 16,
            patch: 8,
            stride: 4,
            linked_patch: 4,
            channels: Channels::Rgb,
            region: None,
            factor_weight: 1.0,
        }
    }
}

impl ImageLayoutSpec {
    fn roi(&self) -> Result<Region, LayoutError> {
        let r = self.region.unwrap_or(Region {
            x0: 0,
            y0: 0,
            w: self.width,
            h: self.height,
        });
        if r.x0 + r.w > self.width || r.y0 + r.h > self.height {
            return Err(LayoutError::RegionOutside);
        }
        if r.w < self.patch || r.h < self.patch {
            return Err(LayoutError::TooSmall {
                w: r.w,
                h: r.h,
                patch: self.patch,
            });
        }
        Ok(r)
    }

    fn check_geometry(&self) -> Result<(), LayoutError> {
        if self.patch == 0 || self.stride == 0 {
            return Err(LayoutError::Zero("patch and stride"));
        }
        if self.patch != 2 * self.linked_patch || self.patch != 2 * self.stride {
            return Err(LayoutError::Geometry {
                patch: self.patch,
                linked: self.linked_patch,
                stride: self.stride,
            });
        }
        Ok(())
    }

    /// Variable id of pixel `(x, y)` (image coordinates) in plane `c`.
    pub fn var(&self, c: usize, x: usize, y: usize) -> Option<VarId> {
        let r = self.roi().ok()?;
        if x < r.x0 || y < r.y0 || x >= r.x0 + r.w || y >= r.y0 + r.h || c >= self.channels.planes() {
            return None;
        }
        Some((c * r.h + (y - r.y0)) * r.w + (x - r.x0))
    }
}

fn image_variables(spec: &ImageLayoutSpec, r: &Region) -> Vec<VariableKind> {
    vec![VariableKind::REAL_NONNEG; spec.channels.planes() * r.w * r.h]
}

fn square(r: &Region, planes: &[usize], x0: usize, y0: usize, w: usize, h: usize) -> Vec<VarId> {
    let mut out = Vec::with_capacity(planes.len() * w * h);
    for &c in planes {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                out.push((c * r.h + y) * r.w + x);
            }
        }
    }
    out
}

/// Per-channel squares at stride plus linked small squares across channels.
pub fn build_image_layout(spec: &ImageLayoutSpec) -> Result<Skeleton, LayoutError> {
    spec.check_geometry()?;
    let r = spec.roi()?;
    let variables = image_variables(spec, &r);
    let mut factors = Vec::new();
    let xs = tile_starts(r.w, spec.patch, spec.stride);
    let ys = tile_starts(r.h, spec.patch, spec.stride);
    for c in 0..spec.channels.color_planes() {
        for &(y0, h) in &ys {
            for &(x0, w) in &xs {
                let neighbors = square(&r, &[c], x0, y0, w, h);
                factors.push(FactorTemplate {
                    group: Group::Mono(c),
                    region: Region { x0, y0, w, h },
                    weights: vec![spec.factor_weight; neighbors.len()],
                    neighbors,
                });
            }
        }
    }
    if spec.channels != Channels::Mono {
        let planes: Vec<usize> = (0..spec.channels.planes()).collect();
        let lp = spec.linked_patch;
        for &(y0, h) in &tile_starts(r.h, lp, lp) {
            for &(x0, w) in &tile_starts(r.w, lp, lp) {
                let neighbors = square(&r, &planes, x0, y0, w, h);
                factors.push(FactorTemplate {
                    group: Group::Linked,
                    region: Region { x0, y0, w, h },
                    weights: vec![spec.factor_weight; neighbors.len()],
                    neighbors,
                });
            }
        }
    }
    Ok(Skeleton { variables, factors })
}

/// Full squares over every channel, no linked factors.
pub fn build_combined_color_layout(spec: &ImageLayoutSpec) -> Result<Skeleton, LayoutError> {
    if spec.patch == 0 || spec.stride == 0 {
        return Err(LayoutError::Zero("patch and stride"));
    }
    let r = spec.roi()?;
    let variables = image_variables(spec, &r);
    let planes: Vec<usize> = (0..spec.channels.planes()).collect();
    let mut factors = Vec::new();
    for &(y0, h) in &tile_starts(r.h, spec.patch, spec.stride) {
        for &(x0, w) in &tile_starts(r.w, spec.patch, spec.stride) {
            let neighbors = square(&r, &planes, x0, y0, w, h);
            factors.push(FactorTemplate {
                group: Group::Combined,
                region: Region { x0, y0, w, h },
                weights: vec![spec.factor_weight; neighbors.len()],
                neighbors,
            });
        }
    }
    Ok(Skeleton { variables, factors })
}

/// Spectrogram layout. Variable `frame * n_bins + bin`; factors cover every
/// bin over `width` frames at stride `max(width / 2, 1)`, the last truncated.
/// The region's `x0, w` are frames and `h = n_bins`.
pub fn build_spectrogram_layout(
    n_bins: usize,
    n_frames: usize,
    width: usize,
    factor_weight: f64,
) -> Result<Skeleton, LayoutError> {
    if width == 0 {
        return Err(LayoutError::Zero("factor width"));
    }
    if n_bins == 0 || n_frames == 0 {
        return Err(LayoutError::Zero("spectrogram size"));
    }
    let variables = vec![VariableKind::Complex; n_bins * n_frames];
    let factors = tile_starts(n_frames, width, (width / 2).max(1))
        .into_iter()
        .map(|(f0, w)| {
            let neighbors: Vec<VarId> = (f0 * n_bins..(f0 + w) * n_bins).collect();
            FactorTemplate {
                group: Group::Spectrum,
                region: Region {
                    x0: f0,
                    y0: 0,
                    w,
                    h: n_bins,
                },
                weights: vec![factor_weight; neighbors.len()],
                neighbors,
            }
        })
        .collect();
    Ok(Skeleton { variables, factors })
}

pub const MNIST_SIDE: usize = 32;
pub const MNIST_LEVELS: usize = 4;
pub const MNIST_CLASSES: u32 = 10;
pub const MNIST_LABEL_WEIGHT: f64 = 32.0;

/// Indexing of the digit hierarchy's variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hierarchy;

impl Hierarchy {
    pub fn pixel_side(level: usize) -> usize {
        MNIST_SIDE >> level
    }

    pub fn label_side(level: usize) -> usize {
        (Self::pixel_side(level) - 4) / 2 + 1
    }

    fn pixel_offset(level: usize) -> usize {
        (0..level).map(|l| Self::pixel_side(l).pow(2)).sum()
    }

    fn n_pixels() -> usize {
        Self::pixel_offset(MNIST_LEVELS)
    }

    fn label_offset(level: usize) -> usize {
        Self::n_pixels() + (0..level).map(|l| Self::label_side(l).pow(2)).sum::<usize>()
    }

    pub fn n_variables() -> usize {
        Self::label_offset(MNIST_LEVELS)
    }

    pub fn pixel(level: usize, y: usize, x: usize) -> VarId {
        Self::pixel_offset(level) + y * Self::pixel_side(level) + x
    }

    pub fn label(level: usize, y: usize, x: usize) -> VarId {
        Self::label_offset(level) + y * Self::label_side(level) + x
    }

    /// The single top label.
    pub fn top_label() -> VarId {
        Self::label(MNIST_LEVELS - 1, 0, 0)
    }

    /// Fill in a full training sample from a 32x32 byte image: each hidden
    /// pixel is the rounded mean of the 2x2 patch below it and every label is
    /// the class.
    pub fn training_sample(image: &[u8], class: u32) -> Vec<Value> {
        assert_eq!(image.len(), MNIST_SIDE * MNIST_SIDE);
        let mut out = vec![Value::Int(0); Self::n_variables()];
        let mut level: Vec<i64> = image.iter().map(|&b| b as i64).collect();
        for l in 0..MNIST_LEVELS {
            let side = Self::pixel_side(l);
            for y in 0..side {
                for x in 0..side {
                    out[Self::pixel(l, y, x)] = Value::Int(level[y * side + x]);
                }
            }
            if l + 1 < MNIST_LEVELS {
                let half = side / 2;
                level = (0..half * half)
                    .map(|k| {
                        let (y, x) = (2 * (k / half), 2 * (k % half));
                        let s = level[y * side + x]
                            + level[y * side + x + 1]
                            + level[(y + 1) * side + x]
                            + level[(y + 1) * side + x + 1];
                        (s + 2) / 4
                    })
                    .collect();
            }
        }
        for l in 0..MNIST_LEVELS {
            let side = Self::label_side(l);
            for y in 0..side {
                for x in 0..side {
                    out[Self::label(l, y, x)] = Value::Label(class);
                }
            }
        }
        out
    }
}

/// Pixel/label hierarchy over a 32x32 digit. Factors on levels 0..=2 cover an
/// 8x8 pixel patch at stride 4, the 3x3 labels of its stride-2 4x4
/// subregions, the 4x4 pixels above it on the next level and the label above.
pub fn build_mnist_hierarchy() -> Skeleton {
    let mut variables = vec![VariableKind::Integer { range: Some((0, 255)) }; Hierarchy::n_pixels()];
    variables.resize(Hierarchy::n_variables(), VariableKind::Label { domain: MNIST_CLASSES });
    let mut factors = Vec::new();
    for n in 0..MNIST_LEVELS - 1 {
        let g = (Hierarchy::pixel_side(n) - 8) / 4 + 1;
        for fy in 0..g {
            for fx in 0..g {
                let mut neighbors = Vec::with_capacity(90);
                let mut weights = Vec::with_capacity(90);
                for y in 4 * fy..4 * fy + 8 {
                    for x in 4 * fx..4 * fx + 8 {
                        neighbors.push(Hierarchy::pixel(n, y, x));
                        weights.push(1.0);
                    }
                }
                for dy in 0..3 {
                    for dx in 0..3 {
                        neighbors.push(Hierarchy::label(n, 2 * fy + dy, 2 * fx + dx));
                        weights.push(MNIST_LABEL_WEIGHT);
                    }
                }
                for y in 2 * fy..2 * fy + 4 {
                    for x in 2 * fx..2 * fx + 4 {
                        neighbors.push(Hierarchy::pixel(n + 1, y, x));
                        weights.push(1.0);
                    }
                }
                neighbors.push(Hierarchy::label(n + 1, fy, fx));
                weights.push(MNIST_LABEL_WEIGHT);
                factors.push(FactorTemplate {
                    group: Group::Level(n),
                    region: Region {
                        x0: 4 * fx,
                        y0: 4 * fy,
                        w: 8,
                        h: 8,
                    },
                    neighbors,
                    weights,
                });
            }
        }
    }
    Skeleton { variables, factors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(w: usize, h: usize, channels: Channels) -> ImageLayoutSpec {
        ImageLayoutSpec {
            width: w,
            height: h,
            channels,
            ..ImageLayoutSpec::default()
        }
    }

    fn count(s: &Skeleton, g: Group) -> usize {
        s.factors.iter().filter(|f| f.group == g).count()
    }

    #[test]
    fn tiling() {
        assert_eq!(tile_starts(16, 8, 4), vec![(0, 8), (4, 8), (8, 8)]);
        assert_eq!(tile_starts(18, 8, 4), vec![(0, 8), (4, 8), (8, 8), (12, 6)]);
        assert_eq!(tile_starts(8, 8, 4), vec![(0, 8)]);
        assert_eq!(tile_starts(3, 10, 5), vec![(0, 3)]);
    }

    #[test]
    fn image_counts() {
        let s = build_image_layout(&spec(16, 16, Channels::Mono)).unwrap();
        assert_eq!(s.factors.len(), 9);
        let s = build_image_layout(&spec(8, 8, Channels::Rgb)).unwrap();
        assert_eq!(count(&s, Group::Mono(0)), 1);
        assert_eq!(count(&s, Group::Mono(2)), 1);
        assert_eq!(count(&s, Group::Linked), 4);
        assert!(s.factors.iter().filter(|f| f.group == Group::Linked).all(|f| f.neighbors.len() == 48));
        let s = build_image_layout(&spec(8, 8, Channels::RgbGray)).unwrap();
        assert!(s.factors.iter().filter(|f| f.group == Group::Linked).all(|f| f.neighbors.len() == 64));
        assert!(build_image_layout(&spec(4, 4, Channels::Rgb)).is_err());
    }

    #[test]
    fn full_face_layout_has_truncated_boundary() {
        let s = build_image_layout(&spec(52, 72, Channels::Rgb)).unwrap();
        // 52 wide: starts 0..=44 step 4, last window 44..52 full; 72 high ends exactly
        let xs = tile_starts(52, 8, 4);
        let ys = tile_starts(72, 8, 4);
        assert_eq!(count(&s, Group::Mono(0)), xs.len() * ys.len());
        assert_eq!(count(&s, Group::Linked), 13 * 18);
        let s = build_image_layout(&spec(50, 70, Channels::Rgb)).unwrap();
        assert!(s.factors.iter().any(|f| f.group == Group::Mono(1) && f.neighbors.len() < 64));
        assert!(s.factors.iter().any(|f| f.group == Group::Linked && f.neighbors.len() < 48));
    }

    #[test]
    fn combined_counts() {
        let s = build_combined_color_layout(&spec(8, 8, Channels::Rgb)).unwrap();
        assert_eq!(s.factors.len(), 1);
        assert_eq!(s.factors[0].neighbors.len(), 192);
        let s = build_combined_color_layout(&spec(16, 16, Channels::Rgb)).unwrap();
        assert_eq!(s.factors.len(), 9);
        assert!(build_combined_color_layout(&spec(4, 4, Channels::Rgb)).is_err());
    }

    #[test]
    fn neighbors_match_regions() {
        let sp = spec(18, 14, Channels::RgbGray);
        let s = build_image_layout(&sp).unwrap();
        for f in &s.factors {
            let planes: Vec<usize> = match f.group {
                Group::Mono(c) => vec![c],
                _ => (0..4).collect(),
            };
            let mut expect = Vec::new();
            for &c in &planes {
                for y in f.region.y0..f.region.y0 + f.region.h {
                    for x in f.region.x0..f.region.x0 + f.region.w {
                        expect.push(sp.var(c, x, y).unwrap());
                    }
                }
            }
            assert_eq!(f.neighbors, expect);
        }
    }

    #[test]
    fn interior_overlap_is_a_4x4_block() {
        let s = build_image_layout(&spec(16, 16, Channels::Mono)).unwrap();
        let set = |k: usize| s.factors[k].neighbors.iter().copied().collect::<BTreeSet<_>>();
        let center = set(4);
        for k in [1, 3, 5, 7] {
            assert_eq!(center.intersection(&set(k)).count(), 32);
        }
        // corner-adjacent share a 4x4 block
        assert_eq!(center.intersection(&set(0)).count(), 16);
    }

    #[test]
    fn spectrogram_layouts() {
        let s = build_spectrogram_layout(400, 40, 10, 1.0).unwrap();
        assert!(s.factors.iter().all(|f| f.neighbors.len() == 4000));
        let s = build_spectrogram_layout(16, 7, 2, 1.0).unwrap();
        assert_eq!(s.factors.len(), 6);
        let s = build_spectrogram_layout(16, 3, 10, 1.0).unwrap();
        assert_eq!(s.factors.len(), 1);
        assert_eq!(s.factors[0].neighbors.len(), 48);
    }

    #[test]
    fn hierarchy_counts() {
        let s = build_mnist_hierarchy();
        assert_eq!(s.factors.len(), 59);
        assert!(s.factors.iter().all(|f| f.neighbors.len() == 90));
        let feq = |k: VariableKind| s.variables.iter().filter(|&&v| v == k).count();
        assert_eq!(feq(VariableKind::Label { domain: 10 }), 284);
        assert_eq!(feq(VariableKind::Integer { range: Some((0, 255)) }), 1360);
        for l in 0..4 {
            assert_eq!(Hierarchy::label_side(l), (Hierarchy::pixel_side(l) - 4) / 2 + 1);
        }
        assert_eq!([0, 1, 2, 3].map(Hierarchy::label_side), [15, 7, 3, 1]);
        // each factor's labels sit on the 4x4 subregions inside its patch
        for f in &s.factors {
            let Group::Level(n) = f.group else { panic!() };
            for (k, &i) in f.neighbors[64..73].iter().enumerate() {
                let (dy, dx) = (k / 3, k % 3);
                let (ly, lx) = (f.region.y0 / 2 + dy, f.region.x0 / 2 + dx);
                assert_eq!(i, Hierarchy::label(n, ly, lx));
                assert!(2 * ly >= f.region.y0 && 2 * ly + 4 <= f.region.y0 + 8);
            }
        }
        let net_ok = s
            .bind(vec![], &[])
            .unwrap_err();
        assert!(matches!(net_ok, LayoutError::PayloadCount { .. }));
    }

    #[test]
    fn hierarchy_fill_in() {
        let mut img = vec![0u8; 1024];
        img[0] = 1;
        img[1] = 2;
        img[32] = 3;
        img[33] = 5;
        let s = Hierarchy::training_sample(&img, 7);
        assert_eq!(s[Hierarchy::pixel(1, 0, 0)], Value::Int(3));
        assert_eq!(s[Hierarchy::top_label()], Value::Label(7));
        assert_eq!(s.len(), 1360 + 284);
    }
}
