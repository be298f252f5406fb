//! Procedural shape/color/background stimuli and probe triples.
//!
//! A stimulus is a pure function of its [`StimulusSpec`]: one of 12 shape
//! prototypes, filled with one of 8 palette colors, on one of 5 backgrounds,
//! with a small rotation/scale/translation jitter drawn from `jitter_seed`.
//! Edges are anti-aliased by 2×2 supersampling followed by a box filter.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::seed::SeedKey;

pub const N_SHAPES: usize = 12;
pub const N_COLORS: usize = 8;
pub const N_BACKGROUNDS: usize = 5;
pub const DEFAULT_SIZE: usize = 32;

pub const SHAPE_NAMES: [&str; N_SHAPES] = [
    "triangle", "square", "cross", "T", "L", "H", "disc", "ring", "star", "arrow", "U", "Z",
];

pub const PALETTE: [[u8; 3]; N_COLORS] = [
    [220, 40, 40],   // red
    [40, 170, 60],   // green
    [40, 80, 220],   // blue
    [235, 210, 40],  // yellow
    [200, 50, 200],  // magenta
    [40, 200, 210],  // cyan
    [240, 130, 30],  // orange
    [130, 75, 30],   // brown
];

pub const BACKGROUND_GRAY: [u8; 3] = [180, 180, 180];
const BACKGROUND_DARK: [u8; 3] = [96, 96, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StimulusSpec {
    pub shape_id: usize,
    pub color_id: usize,
    pub background_id: usize,
    pub jitter_seed: u64,
}

impl StimulusSpec {
    fn validate(&self) -> Result<()> {
        if self.shape_id >= N_SHAPES || self.color_id >= N_COLORS || self.background_id >= N_BACKGROUNDS {
            return Err(Error::contract(format!(
                "stimulus ids out of range: shape {} color {} background {}",
                self.shape_id, self.color_id, self.background_id
            )));
        }
        Ok(())
    }
}

/// A rendered image. `spec` is `None` for images loaded from disk, whose
/// shape/color provenance is unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stimulus {
    pub spec: Option<StimulusSpec>,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeTriple {
    pub triple_id: usize,
    pub background_id: usize,
    pub probe: Stimulus,
    pub shape_match: Stimulus,
    pub color_match: Stimulus,
}

impl ProbeTriple {
    /// Checks the id-level invariants; external triples (no specs) pass.
    pub fn check(&self) -> Result<()> {
        let (Some(p), Some(s), Some(c)) = (self.probe.spec, self.shape_match.spec, self.color_match.spec) else {
            return Ok(());
        };
        let ok = s.shape_id == p.shape_id
            && s.color_id != p.color_id
            && c.color_id == p.color_id
            && c.shape_id != p.shape_id;
        if !ok {
            return Err(Error::contract(format!("triple {} is malformed", self.triple_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetMode {
    ByShape,
    ByColor,
    Conjunction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledStimulus {
    pub stimulus: Stimulus,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub items: Vec<LabeledStimulus>,
    pub mode: DatasetMode,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Split by class: labels `< n_train` form the first part, the remaining
    /// classes form the held-out part with labels shifted to start at 0.
    pub fn split_classes(&self, n_train: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_train == 0 || n_train >= self.n_classes {
            return Err(Error::contract(format!(
                "class split {n_train} must lie in 1..{}",
                self.n_classes
            )));
        }
        let (train, held): (Vec<_>, Vec<_>) = self.items.iter().cloned().partition(|it| it.label < n_train);
        let held = held
            .into_iter()
            .map(|mut it| {
                it.label -= n_train;
                it
            })
            .collect();
        Ok((
            LabeledDataset {
                items: train,
                mode: self.mode,
                n_classes: n_train,
            },
            LabeledDataset {
                items: held,
                mode: self.mode,
                n_classes: self.n_classes - n_train,
            },
        ))
    }
}

/// Shape/color library sizes and raster size used when generating data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StimConfig {
    pub size: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
}

impl Default for StimConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_SIZE,
            n_shapes: N_SHAPES,
            n_colors: N_COLORS,
        }
    }
}

impl StimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::contract(format!("image size {} < 16", self.size)));
        }
        if self.n_shapes == 0 || self.n_shapes > N_SHAPES || self.n_colors == 0 || self.n_colors > N_COLORS {
            return Err(Error::contract(format!(
                "library sizes out of range: {} shapes, {} colors",
                self.n_shapes, self.n_colors
            )));
        }
        Ok(())
    }
}

// --- geometry ---------------------------------------------------------------

type Pt = (f64, f64);

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Pt> {
    vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
}

fn in_polygon(poly: &[Pt], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

enum Prototype {
    Polygons(Vec<Vec<Pt>>),
    Disc(f64),
    Ring(f64, f64),
}

fn prototype(shape_id: usize) -> Prototype {
    use Prototype::*;
    match shape_id {
        0 => Polygons(vec![vec![(0.0, -0.6), (0.62, 0.45), (-0.62, 0.45)]]),
        1 => Polygons(vec![rect(-0.45, -0.45, 0.45, 0.45)]),
        2 => Polygons(vec![rect(-0.18, -0.6, 0.18, 0.6), rect(-0.6, -0.18, 0.6, 0.18)]),
        3 => Polygons(vec![rect(-0.6, -0.6, 0.6, -0.25), rect(-0.18, -0.25, 0.18, 0.6)]),
        4 => Polygons(vec![rect(-0.5, -0.6, -0.15, 0.6), rect(-0.5, 0.25, 0.5, 0.6)]),
        5 => Polygons(vec![
            rect(-0.55, -0.6, -0.22, 0.6),
            rect(0.22, -0.6, 0.55, 0.6),
            rect(-0.22, -0.15, 0.22, 0.15),
        ]),
        6 => Disc(0.52),
        7 => Ring(0.32, 0.6),
        8 => {
            let pts = (0..10)
                .map(|k| {
                    let r = if k % 2 == 0 { 0.66 } else { 0.28 };
                    let a = std::f64::consts::PI * (k as f64 / 5.0) - std::f64::consts::FRAC_PI_2;
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            Polygons(vec![pts])
        }
        9 => Polygons(vec![
            rect(-0.6, -0.15, 0.1, 0.15),
            vec![(0.1, -0.45), (0.6, 0.0), (0.1, 0.45)],
        ]),
        10 => Polygons(vec![
            rect(-0.5, -0.6, -0.2, 0.6),
            rect(0.2, -0.6, 0.5, 0.6),
            rect(-0.5, 0.3, 0.5, 0.6),
        ]),
        11 => Polygons(vec![
            rect(-0.55, -0.6, 0.55, -0.3),
            rect(-0.55, 0.3, 0.55, 0.6),
            vec![(0.25, -0.3), (0.55, -0.3), (-0.25, 0.3), (-0.55, 0.3)],
        ]),
        _ => unreachable!("shape ids are validated before rendering"),
    }
}

impl Prototype {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Prototype::Polygons(polys) => polys.iter().any(|p| in_polygon(p, x, y)),
            Prototype::Disc(r) => x * x + y * y <= r * r,
            Prototype::Ring(inner, outer) => {
                let d = x * x + y * y;
                d >= inner * inner && d <= outer * outer
            }
        }
    }
}

struct Jitter {
    cos: f64,
    sin: f64,
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Jitter {
    fn draw(seed: u64) -> Self {
        let mut rng = SeedKey::new(seed).child("jitter").rng();
        let angle = rng.gen_range(-20f64..=20.0).to_radians();
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            scale: rng.gen_range(0.85..=1.1),
            dx: rng.gen_range(-0.06..=0.06),
            dy: rng.gen_range(-0.06..=0.06),
        }
    }

    /// Image-space point in `[-1, 1]²` back to prototype coordinates.
    fn to_canonical(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = ((u - self.dx) / self.scale, (v - self.dy) / self.scale);
        (self.cos * x + self.sin * y, -self.sin * x + self.cos * y)
    }
}

/// Fraction of each pixel covered by the shape, in quarters (2×2 samples).
pub fn render_coverage(spec: &StimulusSpec, size: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if size < 16 {
        return Err(Error::contract(format!("image size {size} < 16")));
    }
    let proto = prototype(spec.shape_id);
    let jitter = Jitter::draw(spec.jitter_seed);
    let mut cov = vec![0.0; size * size];
    let s = size as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let u = 2.0 * (px as f64 + (sx as f64 + 0.5) / 2.0) / s - 1.0;
                    let v = 2.0 * (py as f64 + (sy as f64 + 0.5) / 2.0) / s - 1.0;
                    let (x, y) = jitter.to_canonical(u, v);
                    if proto.contains(x, y) {
                        hits += 1;
                    }
                }
            }
            cov[py * size + px] = hits as f64 / 4.0;
        }
    }
    Ok(cov)
}

fn background(spec: &StimulusSpec, size: usize) -> RgbImage {
    let gray = |v: f64| {
        let g = v.round().clamp(0.0, 255.0) as u8;
        [g, g, g]
    };
    let mut img = RgbImage::filled(size, size, BACKGROUND_GRAY);
    let last = (size - 1) as f64;
    match spec.background_id {
        0 => {}
        1 => img = RgbImage::filled(size, size, BACKGROUND_DARK),
        2 => {
            for y in 0..size {
                for x in 0..size {
                    img.set(x, y, gray(230.0 - 170.0 * y as f64 / last));
                }
            }
        }
        3 => {
            for y in 0..size {
                for x in 0..size {
                    img.set(x, y, gray(60.0 + 170.0 * (x + y) as f64 / (2.0 * last)));
                }
            }
        }
        _ => {
            let mut rng = SeedKey::new(spec.jitter_seed).child("noise").rng();
            for y in 0..size {
                for x in 0..size {
                    img.set(x, y, gray(rng.gen_range(90.0..=210.0)));
                }
            }
        }
    }
    img
}

/// Render a stimulus. Identical specs give identical bytes.
pub fn render_stimulus(spec: StimulusSpec, size: usize) -> Result<Stimulus> {
    let cov = render_coverage(&spec, size)?;
    let mut img = background(&spec, size);
    let fg = PALETTE[spec.color_id];
    for y in 0..size {
        for x in 0..size {
            let a = cov[y * size + x];
            if a == 0.0 {
                continue;
            }
            let bg = img.get(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (a * fg[c] as f64 + (1.0 - a) * bg[c] as f64).round() as u8;
            }
            img.set(x, y, px);
        }
    }
    Ok(Stimulus {
        spec: Some(spec),
        image: img,
    })
}

/// Fraction of pixels at least half covered by the shape.
pub fn foreground_fraction(spec: &StimulusSpec, size: usize) -> Result<f64> {
    let cov = render_coverage(spec, size)?;
    Ok(cov.iter().filter(|&&a| a >= 0.5).count() as f64 / cov.len() as f64)
}

/// `n` probe triples. Triple `i` shows object set `i / 5` on background
/// `i % 5`, so every object set appears on all five backgrounds when `n` is
/// a multiple of 5. Each object set has a distinct (shape, color) probe.
pub fn make_probe_triples(config: &StimConfig, n: usize, seed: u64) -> Result<Vec<ProbeTriple>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::contract("need at least one triple"));
    }
    if config.n_shapes < 2 || config.n_colors < 2 {
        return Err(Error::contract(format!(
            "triples need at least 2 shapes and 2 colors, got {} and {}",
            config.n_shapes, config.n_colors
        )));
    }
    let n_sets = n.div_ceil(N_BACKGROUNDS);
    let mut identities: Vec<(usize, usize)> = (0..config.n_shapes)
        .flat_map(|s| (0..config.n_colors).map(move |c| (s, c)))
        .collect();
    if n_sets > identities.len() {
        return Err(Error::contract(format!(
            "{n_sets} distinct probes requested but only {} (shape, color) pairs exist",
            identities.len()
        )));
    }
    let key = SeedKey::new(seed).child("triples");
    let mut rng = key.rng();
    identities.shuffle(&mut rng);

    struct ObjectSet {
        probe: (usize, usize, u64),
        shape_match: (usize, usize, u64),
        color_match: (usize, usize, u64),
    }
    let sets: Vec<ObjectSet> = identities[..n_sets]
        .iter()
        .map(|&(shape, color)| {
            let mut other_color = rng.gen_range(0..config.n_colors - 1);
            if other_color >= color {
                other_color += 1;
            }
            let mut other_shape = rng.gen_range(0..config.n_shapes - 1);
            if other_shape >= shape {
                other_shape += 1;
            }
            ObjectSet {
                probe: (shape, color, rng.gen()),
                shape_match: (shape, other_color, rng.gen()),
                color_match: (other_shape, color, rng.gen()),
            }
        })
        .collect();

    (0..n)
        .map(|i| {
            let set = &sets[i / N_BACKGROUNDS];
            let background_id = i % N_BACKGROUNDS;
            let make = |(shape_id, color_id, jitter_seed): (usize, usize, u64)| {
                render_stimulus(
                    StimulusSpec {
                        shape_id,
                        color_id,
                        background_id,
                        jitter_seed,
                    },
                    config.size,
                )
            };
            let triple = ProbeTriple {
                triple_id: i,
                background_id,
                probe: make(set.probe)?,
                shape_match: make(set.shape_match)?,
                color_match: make(set.color_match)?,
            };
            triple.check()?;
            Ok(triple)
        })
        .collect()
}

/// A labeled training world. Items are ordered by class; every class has
/// exactly `n_per_class` items with backgrounds and jitter drawn at random.
///
/// * `ByShape`: class `k` is shape `k`, colors uniform over the palette.
/// * `ByColor`: class `k` is color `k`, shapes uniform over the library.
/// * `Conjunction`: class `k` is the pair `(k / n_colors, k % n_colors)`.
pub fn generate_dataset(
    config: &StimConfig,
    mode: DatasetMode,
    n_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    config.validate()?;
    let limit = match mode {
        DatasetMode::ByShape => config.n_shapes,
        DatasetMode::ByColor => config.n_colors,
        DatasetMode::Conjunction => config.n_shapes * config.n_colors,
    };
    if n_classes == 0 || n_classes > limit || n_per_class == 0 {
        return Err(Error::contract(format!(
            "{mode:?} supports 1..={limit} classes with at least one item each, got {n_classes} x {n_per_class}"
        )));
    }
    let mut rng = SeedKey::new(seed).child("dataset").rng();
    let mut items = Vec::with_capacity(n_classes * n_per_class);
    for label in 0..n_classes {
        for _ in 0..n_per_class {
            let (shape_id, color_id) = match mode {
                DatasetMode::ByShape => (label, rng.gen_range(0..config.n_colors)),
                DatasetMode::ByColor => (rng.gen_range(0..config.n_shapes), label),
                DatasetMode::Conjunction => (label / config.n_colors, label % config.n_colors),
            };
            let spec = StimulusSpec {
                shape_id,
                color_id,
                background_id: rng.gen_range(0..N_BACKGROUNDS),
                jitter_seed: rng.gen(),
            };
            items.push(LabeledStimulus {
                stimulus: render_stimulus(spec, config.size)?,
                label,
            });
        }
    }
    Ok(LabeledDataset {
        items,
        mode,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(shape_id: usize, color_id: usize, background_id: usize, jitter_seed: u64) -> StimulusSpec {
        StimulusSpec {
            shape_id,
            color_id,
            background_id,
            jitter_seed,
        }
    }

    #[test]
    fn rendering_is_pure() {
        let s = spec(8, 3, 4, 99);
        assert_eq!(render_stimulus(s, 32).unwrap(), render_stimulus(s, 32).unwrap());
    }

    #[test]
    fn background_zero_is_flat_gray() {
        for shape in 0..N_SHAPES {
            let s = spec(shape, 2, 0, shape as u64);
            let img = render_stimulus(s, 32).unwrap().image;
            let cov = render_coverage(&s, 32).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let a = cov[y * 32 + x];
                    if a == 0.0 {
                        assert_eq!(img.get(x, y), BACKGROUND_GRAY);
                    } else if a == 1.0 {
                        assert_eq!(img.get(x, y), PALETTE[2]);
                    }
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_sweep() {
        // oracle sweep: every prototype, jitter seeds 0..99
        for shape in 0..N_SHAPES {
            for seed in 0..100 {
                let f = foreground_fraction(&spec(shape, 0, 0, seed), 32).unwrap();
                assert!((0.05..=0.60).contains(&f), "shape {shape} seed {seed}: {f}");
            }
        }
    }

    #[test]
    fn shapes_are_distinct() {
        let masks: BTreeSet<Vec<u8>> = (0..N_SHAPES)
            .map(|s| {
                render_coverage(&spec(s, 0, 0, 1), 32)
                    .unwrap()
                    .iter()
                    .map(|&a| (a * 4.0) as u8)
                    .collect()
            })
            .collect();
        assert_eq!(masks.len(), N_SHAPES);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        assert!(render_stimulus(spec(12, 0, 0, 0), 32).is_err());
        assert!(render_stimulus(spec(0, 8, 0, 0), 32).is_err());
        assert!(render_stimulus(spec(0, 0, 5, 0), 32).is_err());
        assert!(render_stimulus(spec(0, 0, 0, 0), 15).is_err());
    }

    #[test]
    fn fifty_triples_are_ten_probes_on_five_backgrounds() {
        let triples = make_probe_triples(&StimConfig::default(), 50, 0).unwrap();
        assert_eq!(triples.len(), 50);
        let probes: BTreeSet<_> = triples
            .iter()
            .map(|t| {
                let p = t.probe.spec.unwrap();
                (p.shape_id, p.color_id)
            })
            .collect();
        assert_eq!(probes.len(), 10);
        for chunk in triples.chunks(5) {
            let bgs: Vec<_> = chunk.iter().map(|t| t.probe.spec.unwrap().background_id).collect();
            assert_eq!(bgs, vec![0, 1, 2, 3, 4]);
        }
        for t in &triples {
            let (p, s, c) = (t.probe.spec.unwrap(), t.shape_match.spec.unwrap(), t.color_match.spec.unwrap());
            assert_eq!(s.shape_id, p.shape_id);
            assert_ne!(s.color_id, p.color_id);
            assert_eq!(c.color_id, p.color_id);
            assert_ne!(c.shape_id, p.shape_id);
            assert_eq!(t.background_id, p.background_id);
        }
    }

    #[test]
    fn seeds_change_triple_identities() {
        let ids = |seed| -> Vec<(usize, usize)> {
            make_probe_triples(&StimConfig::default(), 10, seed)
                .unwrap()
                .iter()
                .map(|t| (t.probe.spec.unwrap().shape_id, t.probe.spec.unwrap().color_id))
                .collect()
        };
        assert_ne!(ids(0), ids(1));
        assert_eq!(ids(0), ids(0));
    }

    #[test]
    fn triples_need_two_shapes_and_colors() {
        let cfg = StimConfig {
            n_colors: 1,
            ..StimConfig::default()
        };
        assert!(make_probe_triples(&cfg, 5, 0).is_err());
        assert!(make_probe_triples(&StimConfig::default(), 0, 0).is_err());
    }

    #[test]
    fn by_shape_classes_share_shape_and_vary_color() {
        let ds = generate_dataset(&StimConfig::default(), DatasetMode::ByShape, 10, 100, 4).unwrap();
        assert_eq!(ds.len(), 1000);
        for label in 0..10 {
            let specs: Vec<_> = ds
                .items
                .iter()
                .filter(|it| it.label == label)
                .map(|it| it.stimulus.spec.unwrap())
                .collect();
            assert_eq!(specs.len(), 100);
            assert!(specs.iter().all(|s| s.shape_id == specs[0].shape_id));
            let colors: BTreeSet<_> = specs.iter().map(|s| s.color_id).collect();
            assert!(colors.len() >= 2);
        }
    }

    #[test]
    fn by_color_classes_share_color() {
        let ds = generate_dataset(&StimConfig::default(), DatasetMode::ByColor, 8, 100, 4).unwrap();
        for label in 0..8 {
            let colors: BTreeSet<_> = ds
                .items
                .iter()
                .filter(|it| it.label == label)
                .map(|it| it.stimulus.spec.unwrap().color_id)
                .collect();
            assert_eq!(colors.len(), 1);
        }
    }

    #[test]
    fn conjunction_classes_fix_both_factors() {
        let ds = generate_dataset(&StimConfig::default(), DatasetMode::Conjunction, 20, 3, 4).unwrap();
        for it in &ds.items {
            let s = it.stimulus.spec.unwrap();
            assert_eq!((s.shape_id, s.color_id), (it.label / N_COLORS, it.label % N_COLORS));
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        let cfg = StimConfig::default();
        assert_eq!(
            generate_dataset(&cfg, DatasetMode::ByShape, 3, 5, 9).unwrap(),
            generate_dataset(&cfg, DatasetMode::ByShape, 3, 5, 9).unwrap()
        );
    }

    #[test]
    fn infeasible_class_counts_are_rejected() {
        let cfg = StimConfig::default();
        assert!(generate_dataset(&cfg, DatasetMode::ByShape, 13, 5, 0).is_err());
        assert!(generate_dataset(&cfg, DatasetMode::ByColor, 9, 5, 0).is_err());
    }

    #[test]
    fn label_is_independent_of_color_in_by_shape_world() {
        let ds = generate_dataset(&StimConfig::default(), DatasetMode::ByShape, 10, 100, 21).unwrap();
        let mut table = [[0f64; N_COLORS]; 10];
        for it in &ds.items {
            table[it.label][it.stimulus.spec.unwrap().color_id] += 1.0;
        }
        let n = ds.len() as f64;
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..N_COLORS).map(|c| table.iter().map(|r| r[c]).sum()).collect();
        let mut chi2 = 0.0;
        for r in 0..10 {
            for c in 0..N_COLORS {
                let e = rows[r] * cols[c] / n;
                chi2 += (table[r][c] - e).powi(2) / e;
            }
        }
        // 0.99 quantile of chi-square with 63 degrees of freedom (scipy.stats.chi2.ppf)
        assert!(chi2 < 92.01002361413214, "chi2 = {chi2}");
    }

    #[test]
    fn class_split_relabels_held_out_part() {
        let ds = generate_dataset(&StimConfig::default(), DatasetMode::ByShape, 10, 2, 0).unwrap();
        let (train, held) = ds.split_classes(8).unwrap();
        assert_eq!((train.n_classes, held.n_classes), (8, 2));
        assert_eq!(held.len(), 4);
        assert!(held.items.iter().all(|it| it.label < 2 && it.stimulus.spec.unwrap().shape_id >= 8));
        assert!(ds.split_classes(10).is_err());
    }
}
