//! Procedural multi-domain image generator.
//!
//! Class identity is carried purely by geometry: each class owns a fixed
//! arrangement of rotated elliptical blobs, jittered per sample. Domain
//! identity is carried only by channel statistics (per-channel affine) and
//! value-noise texture, scaled by `domain_gap`, so a model that ignores style
//! can recover the class in every domain.

use rand::Rng as _;

use super::{DataError, DatasetManifest, Result, Role, SampleRecord, Split};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Per-domain style: the carrier of domain identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub channel_shift: [f64; 3],
    pub channel_scale: [f64; 3],
    pub noise_amplitude: f64,
    /// Fraction of the image resolution used for the value-noise grid;
    /// small values give coarse blotches, 1.0 gives per-pixel noise.
    pub noise_frequency: f64,
}

impl DomainStyle {
    pub fn neutral() -> Self {
        DomainStyle {
            channel_shift: [0.0; 3],
            channel_scale: [1.0; 3],
            noise_amplitude: 0.04,
            noise_frequency: 1.0,
        }
    }

    /// Interpolate from `base` toward `self` by `gap`.
    fn at_gap(&self, base: &DomainStyle, gap: f64) -> DomainStyle {
        let lerp = |a: f64, b: f64| a + gap * (b - a);
        DomainStyle {
            channel_shift: [
                lerp(base.channel_shift[0], self.channel_shift[0]),
                lerp(base.channel_shift[1], self.channel_shift[1]),
                lerp(base.channel_shift[2], self.channel_shift[2]),
            ],
            channel_scale: [
                lerp(base.channel_scale[0], self.channel_scale[0]),
                lerp(base.channel_scale[1], self.channel_scale[1]),
                lerp(base.channel_scale[2], self.channel_scale[2]),
            ],
            noise_amplitude: lerp(base.noise_amplitude, self.noise_amplitude),
            noise_frequency: lerp(base.noise_frequency, self.noise_frequency),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    /// Samples generated per class in every domain.
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub domains: Vec<DomainStyle>,
    /// Scales the style divergence between domains; 0 means all domains are
    /// identically distributed.
    pub domain_gap: f64,
    pub seed: u64,
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
}

impl Default for GeneratorConfig {
    /// Calibrated defaults: with `domain_gap = 0` a raw-pixel nearest-centroid
    /// classifier clears 90% on 5-way 5-shot episodes, and at `domain_gap = 1`
    /// the same classifier supported on the source domain loses well over ten
    /// points on the target domain. Frozen; the cross-domain tests depend on
    /// these numbers.
    fn default() -> Self {
        GeneratorConfig {
            n_classes: 16,
            samples_per_class: 30,
            height: 16,
            width: 16,
            domains: vec![
                DomainStyle::neutral(),
                DomainStyle {
                    channel_shift: [0.25, -0.15, 0.1],
                    channel_scale: [1.7, 0.4, 0.75],
                    noise_amplitude: 0.45,
                    noise_frequency: 0.15,
                },
            ],
            domain_gap: 1.0,
            seed: 0,
            base_classes: 8,
            val_classes: 3,
            novel_classes: 5,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(DataError::Invalid("need at least 2 classes".into()));
        }
        if self.samples_per_class < 2 {
            return Err(DataError::Invalid(
                "need at least 2 samples per class".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(DataError::Invalid(format!(
                "image {}x{} too small to render glyphs (need at least 8x8)",
                self.height, self.width
            )));
        }
        if self.domains.is_empty() {
            return Err(DataError::Invalid("need at least one domain".into()));
        }
        if self.domain_gap < 0.0 {
            return Err(DataError::Invalid("domain_gap must be >= 0".into()));
        }
        if self.base_classes + self.val_classes + self.novel_classes != self.n_classes {
            return Err(DataError::Invalid(format!(
                "splits {}+{}+{} do not partition {} classes",
                self.base_classes, self.val_classes, self.novel_classes, self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    elong: f64,
    angle: f64,
}

/// Class-defining geometry, deterministic from the class seed.
struct GlyphSpec {
    blobs: Vec<Blob>,
}

fn glyph_for_class(seed: u64, class_id: usize) -> GlyphSpec {
    let mut rng = stream(seed, "glyph", &[class_id as u64]);
    let n_blobs = rng.gen_range(2..=4usize);
    let blobs = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.gen_range(0.22..0.78),
            cy: rng.gen_range(0.22..0.78),
            r: rng.gen_range(0.10..0.22),
            elong: rng.gen_range(0.45..1.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect();
    GlyphSpec { blobs }
}

/// Glyph intensity in [0,1] at normalized coordinates, after applying a
/// per-sample rigid jitter (rotation about the image center + translation).
fn glyph_intensity(spec: &GlyphSpec, jitter: &Jitter, u: f64, v: f64) -> f64 {
    let mut best: f64 = 0.0;
    let (sin_j, cos_j) = jitter.rotation.sin_cos();
    for blob in &spec.blobs {
        // jittered blob center
        let (ox, oy) = (blob.cx - 0.5, blob.cy - 0.5);
        let cx = 0.5 + ox * cos_j - oy * sin_j + jitter.dx;
        let cy = 0.5 + ox * sin_j + oy * cos_j + jitter.dy;
        let angle = blob.angle + jitter.rotation;
        let r = blob.r * jitter.scale;
        let (s, c) = angle.sin_cos();
        let (px, py) = (u - cx, v - cy);
        let along = (px * c + py * s) / r;
        let across = (-px * s + py * c) / (r * blob.elong);
        let d2 = along * along + across * across;
        best = best.max((1.4 - d2).clamp(0.0, 1.0));
    }
    best
}

struct Jitter {
    dx: f64,
    dy: f64,
    rotation: f64,
    scale: f64,
}

/// Bilinearly interpolated value-noise field in [-1, 1].
struct NoiseField {
    gh: usize,
    gw: usize,
    grid: Vec<f64>,
}

impl NoiseField {
    fn draw(rng: &mut crate::rng::Rng, h: usize, w: usize, frequency: f64) -> Self {
        let gh = ((h as f64 * frequency).round() as usize).max(2);
        let gw = ((w as f64 * frequency).round() as usize).max(2);
        let grid = (0..(gh + 1) * (gw + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        NoiseField { gh, gw, grid }
    }

    fn at(&self, h: usize, w: usize, height: usize, width: usize) -> f64 {
        let fy = h as f64 / height as f64 * self.gh as f64;
        let fx = w as f64 / width as f64 * self.gw as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let g = |y: usize, x: usize| self.grid[y * (self.gw + 1) + x];
        let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
        let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Generate the full multi-domain dataset described by `config`.
/// Deterministic: the same config (seed included) yields a bit-identical
/// manifest.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let glyphs: Vec<GlyphSpec> = (0..config.n_classes)
        .map(|c| glyph_for_class(config.seed, c))
        .collect();
    let base_style = &config.domains[0];
    let styles: Vec<DomainStyle> = config
        .domains
        .iter()
        .map(|d| d.at_gap(base_style, config.domain_gap))
        .collect();

    let split_map: Vec<Split> = (0..config.n_classes)
        .map(|c| {
            if c < config.base_classes {
                Split::Base
            } else if c < config.base_classes + config.val_classes {
                Split::Val
            } else {
                Split::Novel
            }
        })
        .collect();

    let mut samples = Vec::new();
    for class_id in 0..config.n_classes {
        for (domain_id, style) in styles.iter().enumerate() {
            for index in 0..config.samples_per_class {
                let mut rng = stream(
                    config.seed,
                    "sample",
                    &[class_id as u64, domain_id as u64, index as u64],
                );
                let jitter = Jitter {
                    dx: rng.gen_range(-0.05..0.05),
                    dy: rng.gen_range(-0.05..0.05),
                    rotation: rng.gen_range(-0.22..0.22),
                    scale: rng.gen_range(0.9..1.1),
                };
                let noise: Vec<NoiseField> = (0..3)
                    .map(|_| NoiseField::draw(&mut rng, h, w, style.noise_frequency))
                    .collect();
                let mut data = vec![0.0; 3 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 + 0.5) / w as f64;
                        let v = (y as f64 + 0.5) / h as f64;
                        let g = glyph_intensity(&glyphs[class_id], &jitter, u, v);
                        let base = 0.25 + 0.5 * g;
                        for c in 0..3 {
                            let styled = base * style.channel_scale[c] + style.channel_shift[c];
                            let noisy = styled
                                + style.noise_amplitude * noise[c].at(y, x, h, w);
                            data[(c * h + y) * w + x] = noisy.clamp(0.0, 1.0);
                        }
                    }
                }
                let role = if domain_id == 0 {
                    Role::LabeledSource
                } else if split_map[class_id] == Split::Novel {
                    Role::TestTarget
                } else {
                    Role::UnlabeledTarget
                };
                samples.push(SampleRecord {
                    image: Tensor::new(vec![3, h, w], data)?,
                    class_id,
                    domain_id,
                    role,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        samples,
        class_names: (0..config.n_classes).map(|c| format!("class{c:02}")).collect(),
        domain_names: (0..config.domains.len())
            .map(|d| if d == 0 { "source".to_string() } else { format!("target{d}") })
            .collect(),
        split_map,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleFilter;

    #[test]
    fn same_seed_gives_bit_identical_manifests() {
        let config = GeneratorConfig {
            n_classes: 4,
            samples_per_class: 3,
            base_classes: 2,
            val_classes: 1,
            novel_classes: 1,
            ..Default::default()
        };
        let a = generate_synthetic(&config).unwrap();
        let b = generate_synthetic(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gap_zero_domains_share_channel_statistics() {
        let config = GeneratorConfig {
            n_classes: 8,
            samples_per_class: 20,
            base_classes: 4,
            val_classes: 2,
            novel_classes: 2,
            domain_gap: 0.0,
            ..Default::default()
        };
        let m = generate_synthetic(&config).unwrap();
        let mean_of = |domain: usize, channel: usize| {
            let idxs = m.select(SampleFilter {
                domain: Some(domain),
                ..Default::default()
            });
            let mut total = 0.0;
            let mut count = 0usize;
            for &i in &idxs {
                let img = &m.samples[i].image;
                let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
                assert_eq!(c, 3);
                let lane = &img.data()[channel * h * w..(channel + 1) * h * w];
                total += lane.iter().sum::<f64>();
                count += lane.len();
            }
            total / count as f64
        };
        for channel in 0..3 {
            let diff = (mean_of(0, channel) - mean_of(1, channel)).abs();
            assert!(diff < 0.01, "channel {channel} mean diff {diff}");
        }
    }

    #[test]
    fn gap_one_domains_differ_visibly() {
        let m = generate_synthetic(&GeneratorConfig::default()).unwrap();
        let first_red = |domain: usize| {
            let idx = m
                .select(SampleFilter {
                    domain: Some(domain),
                    ..Default::default()
                })[0];
            let img = &m.samples[idx].image;
            img.data()[..img.numel() / 3].iter().sum::<f64>() / (img.numel() / 3) as f64
        };
        assert!((first_red(0) - first_red(1)).abs() > 0.05);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let config = GeneratorConfig {
            height: 6,
            ..Default::default()
        };
        let err = generate_synthetic(&config).unwrap_err();
        assert!(err.to_string().contains("too small"));
    }

    #[test]
    fn roles_follow_domain_and_split() {
        let m = generate_synthetic(&GeneratorConfig::default()).unwrap();
        for s in &m.samples {
            let expected = if s.domain_id == 0 {
                Role::LabeledSource
            } else if m.split_map[s.class_id] == Split::Novel {
                Role::TestTarget
            } else {
                Role::UnlabeledTarget
            };
            assert_eq!(s.role, expected);
        }
    }
}
