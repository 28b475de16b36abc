//! Synthetic straightened-vessel volumes with parametric plaques.
//!
//! Each image is a straight tube along the first axis. Cross-sections are
//! square, the centerline is the central voxel column, and every plaque
//! narrows the lumen radius by an exactly known fraction, so per-voxel
//! ground truth is available without annotation.

use std::collections::HashSet;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Radial thickness of the vessel wall outside the lumen, in voxels.
pub const WALL_THICKNESS: f64 = 1.0;

/// Narrowing above this fraction is significant stenosis.
pub const SIGNIFICANT_NARROWING: f64 = 0.5;

pub const PHANTOM_KIND: &str = "phantom";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaqueKind {
    Calcified,
    NonCalcified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaqueProfile {
    /// Constant narrowing over the whole span.
    Rectangular,
    /// Raised-cosine taper peaking at the middle of the span.
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaqueSpec {
    pub start: usize,
    pub length: usize,
    pub max_narrowing: f64,
    pub kind: PlaqueKind,
    pub profile: PlaqueProfile,
}

impl PlaqueSpec {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    /// Narrowing fraction contributed at centerline position `z`.
    pub fn narrowing_at(&self, z: usize) -> f64 {
        if z < self.start || z >= self.end() {
            return 0.0;
        }
        match self.profile {
            PlaqueProfile::Rectangular => self.max_narrowing,
            PlaqueProfile::Smooth => {
                let phase = (z - self.start) as f64 + 0.5;
                let taper =
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase / self.length as f64).cos());
                self.max_narrowing * taper
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub centerline_length: usize,
    pub cross_section_size: usize,
    pub lumen_radius: f64,
    pub lumen_intensity: f64,
    pub wall_intensity: f64,
    pub background_intensity: f64,
    pub calcified_intensity: f64,
    pub noise_std: f64,
    pub plaques: Vec<PlaqueSpec>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            centerline_length: 150,
            cross_section_size: 21,
            lumen_radius: 4.0,
            lumen_intensity: 350.0,
            wall_intensity: 50.0,
            background_intensity: -50.0,
            calcified_intensity: 900.0,
            noise_std: 0.0,
            plaques: Vec::new(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.centerline_length < 1 {
            return Err(Error::config("centerline_length must be at least 1"));
        }
        if self.cross_section_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "cross_section_size must be odd, got {}",
                self.cross_section_size
            )));
        }
        if !(self.lumen_radius.is_finite() && self.lumen_radius > 0.0) {
            return Err(Error::config("lumen_radius must be positive"));
        }
        if (self.cross_section_size as f64) < 2.0 * self.lumen_radius + 3.0 {
            return Err(Error::config(format!(
                "cross_section_size {} is smaller than 2*lumen_radius+3 = {}",
                self.cross_section_size,
                2.0 * self.lumen_radius + 3.0
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be a finite value >= 0"));
        }
        for (i, p) in self.plaques.iter().enumerate() {
            if p.length == 0 || p.end() > self.centerline_length {
                return Err(Error::config(format!(
                    "plaques[{i}] span [{}, {}) lies outside the centerline of length {}",
                    p.start,
                    p.end(),
                    self.centerline_length
                )));
            }
            if !(0.0..=1.0).contains(&p.max_narrowing) {
                return Err(Error::config(format!(
                    "plaques[{i}].max_narrowing {} is outside [0, 1]",
                    p.max_narrowing
                )));
            }
        }
        for i in 0..self.plaques.len() {
            for j in (i + 1)..self.plaques.len() {
                let (a, b) = (&self.plaques[i], &self.plaques[j]);
                if a.start < b.end() && b.start < a.end() {
                    return Err(Error::config(format!(
                        "plaques[{i}] [{}, {}) overlaps plaques[{j}] [{}, {})",
                        a.start,
                        a.end(),
                        b.start,
                        b.end()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact narrowing fraction at every centerline voxel.
    pub fn narrowing_profile(&self) -> Vec<f64> {
        (0..self.centerline_length)
            .map(|z| {
                self.plaques
                    .iter()
                    .map(|p| p.narrowing_at(z))
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Straightened vessel volume indexed `(z, y, x)` with `z` along the centerline.
#[derive(Debug, Clone, PartialEq)]
pub struct MprImage<T> {
    pub id: String,
    pub intensities: Array3<T>,
    pub narrowing: Vec<f64>,
    pub labels: Vec<bool>,
    pub config: PhantomConfig,
}

impl<T: Scalar> MprImage<T> {
    pub fn centerline_length(&self) -> usize {
        self.intensities.dim().0
    }

    pub fn cross_section_size(&self) -> usize {
        self.intensities.dim().1
    }

    /// In-plane coordinate of the centerline.
    pub fn axis_index(&self) -> usize {
        self.cross_section_size() / 2
    }

    pub fn background(&self) -> T {
        T::lit(self.config.background_intensity)
    }

    pub fn positive_voxels(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(PHANTOM_KIND);
        c.set_field("id", &self.id)?;
        c.set_field("config", &self.config)?;
        c.insert("intensities", Tensor::from_array(&self.intensities));
        c.insert(
            "narrowing",
            Tensor::from_array(&ndarray::Array1::from(self.narrowing.clone())),
        );
        c.insert(
            "labels",
            Tensor::from_u8(
                vec![self.labels.len()],
                self.labels.iter().map(|&l| l as u8).collect(),
            ),
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(PHANTOM_KIND)?;
        let intensities = c
            .tensor("intensities")?
            .to_array::<T>()?
            .into_dimensionality()
            .map_err(|e| Error::Container(format!("intensities: {e}")))?;
        let narrowing: Vec<f64> = c.tensor("narrowing")?.to_array::<f64>()?.iter().copied().collect();
        let labels: Vec<bool> = c.tensor("labels")?.as_u8()?.iter().map(|&v| v != 0).collect();
        let image = MprImage {
            id: c.field("id")?,
            intensities,
            narrowing,
            labels,
            config: c.field("config")?,
        };
        if image.labels.len() != image.centerline_length()
            || image.narrowing.len() != image.centerline_length()
        {
            return Err(Error::Container(
                "label/narrowing length differs from the centerline length".to_string(),
            ));
        }
        Ok(image)
    }
}

/// Significant stenosis iff the luminal narrowing strictly exceeds 50%.
pub fn narrowing_to_label(narrowing: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&narrowing) {
        return Err(Error::Domain(format!(
            "narrowing {narrowing} is outside [0, 1]"
        )));
    }
    Ok(narrowing > SIGNIFICANT_NARROWING)
}

pub fn generate_phantom<T: Scalar>(config: &PhantomConfig) -> Result<MprImage<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let len = config.centerline_length;
    let size = config.cross_section_size;
    let axis = (size / 2) as f64;
    let radius = config.lumen_radius;
    let narrowing = config.narrowing_profile();

    // Non-calcified plaque material sits within 10% of the wall intensity.
    let plaque_intensity: Vec<f64> = config
        .plaques
        .iter()
        .map(|p| match p.kind {
            PlaqueKind::Calcified => config.calcified_intensity,
            PlaqueKind::NonCalcified => {
                let spread = 0.1 * config.wall_intensity.abs();
                config.wall_intensity + rng.random_range(-0.9..=0.9) * spread
            }
        })
        .collect();

    let mut intensities = Array3::<T>::zeros((len, size, size));
    for z in 0..len {
        let plaque = config
            .plaques
            .iter()
            .position(|p| z >= p.start && z < p.end());
        let open_radius = radius * (1.0 - narrowing[z]);
        let mut slice = intensities.slice_mut(s![z, .., ..]);
        for ((y, x), v) in slice.indexed_iter_mut() {
            let rho = ((y as f64 - axis).powi(2) + (x as f64 - axis).powi(2)).sqrt();
            let value = if rho <= open_radius {
                config.lumen_intensity
            } else if rho <= radius {
                match plaque {
                    Some(i) => plaque_intensity[i],
                    None => config.lumen_intensity,
                }
            } else if rho <= radius + WALL_THICKNESS {
                config.wall_intensity
            } else {
                config.background_intensity
            };
            *v = T::lit(value);
        }
    }

    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std)
            .map_err(|e| Error::config(format!("noise_std: {e}")))?;
        for v in intensities.iter_mut() {
            *v += T::lit(normal.sample(&mut rng));
        }
    }

    let labels = narrowing.iter().map(|&n| n > SIGNIFICANT_NARROWING).collect();
    Ok(MprImage {
        id: format!("phantom-{}", config.seed),
        intensities,
        narrowing,
        labels,
        config: config.clone(),
    })
}

/// Generates one image per config; ids are assigned by position (`cl0000`, ...).
pub fn generate_dataset<T: Scalar>(configs: &[PhantomConfig]) -> Result<Vec<MprImage<T>>> {
    let mut seen = HashSet::new();
    for c in configs {
        if !seen.insert(c.seed) {
            log::warn!("seed {} is used more than once; those images are identical", c.seed);
        }
    }
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut image = generate_phantom(c)?;
            image.id = format!("cl{i:04}");
            Ok(image)
        })
        .collect()
}

/// Randomized dataset description expanded into concrete phantom configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRecipe {
    pub count: usize,
    pub seed: u64,
    /// Inclusive range of centerline lengths.
    pub centerline_length: (usize, usize),
    pub cross_section_size: usize,
    pub lumen_radius: (f64, f64),
    pub noise_std: f64,
    pub max_plaques: usize,
    /// Inclusive range of plaque lengths.
    pub plaque_length: (usize, usize),
    pub narrowing: (f64, f64),
    pub calcified_fraction: f64,
    pub smooth_fraction: f64,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            count: 10,
            seed: 0,
            centerline_length: (100, 150),
            cross_section_size: 21,
            lumen_radius: (3.5, 4.5),
            noise_std: 20.0,
            max_plaques: 2,
            plaque_length: (12, 30),
            narrowing: (0.2, 0.95),
            calcified_fraction: 0.5,
            smooth_fraction: 0.5,
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.centerline_length;
        if lo < 1 || lo > hi {
            return Err(Error::config("recipe.centerline_length must be a range with 1 <= lo <= hi"));
        }
        let (plo, phi) = self.plaque_length;
        if plo < 1 || plo > phi || phi > lo {
            return Err(Error::config(
                "recipe.plaque_length must satisfy 1 <= lo <= hi <= shortest centerline",
            ));
        }
        let (nlo, nhi) = self.narrowing;
        if !(0.0 <= nlo && nlo <= nhi && nhi <= 1.0) {
            return Err(Error::config("recipe.narrowing must be a sub-range of [0, 1]"));
        }
        let (rlo, rhi) = self.lumen_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config("recipe.lumen_radius must be a positive range"));
        }
        if !(0.0..=1.0).contains(&self.calcified_fraction)
            || !(0.0..=1.0).contains(&self.smooth_fraction)
        {
            return Err(Error::config(
                "recipe.calcified_fraction and recipe.smooth_fraction must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Expands the recipe; every config receives a distinct seed.
    pub fn configs(&self) -> Result<Vec<PhantomConfig>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let length = rng.random_range(self.centerline_length.0..=self.centerline_length.1);
            let lumen_radius = rng.random_range(self.lumen_radius.0..=self.lumen_radius.1);
            let wanted = rng.random_range(0..=self.max_plaques);
            let mut plaques: Vec<PlaqueSpec> = Vec::new();
            for _ in 0..wanted {
                // A few placement attempts; leave the plaque out if the tube is crowded.
                for _attempt in 0..20 {
                    let plen = rng.random_range(self.plaque_length.0..=self.plaque_length.1);
                    if plen > length {
                        break;
                    }
                    let start = rng.random_range(0..=length - plen);
                    let clear = plaques
                        .iter()
                        .all(|p| start + plen + 2 <= p.start || p.end() + 2 <= start);
                    if clear {
                        plaques.push(PlaqueSpec {
                            start,
                            length: plen,
                            max_narrowing: rng.random_range(self.narrowing.0..=self.narrowing.1),
                            kind: if rng.random_bool(self.calcified_fraction) {
                                PlaqueKind::Calcified
                            } else {
                                PlaqueKind::NonCalcified
                            },
                            profile: if rng.random_bool(self.smooth_fraction) {
                                PlaqueProfile::Smooth
                            } else {
                                PlaqueProfile::Rectangular
                            },
                        });
                        break;
                    }
                }
            }
            plaques.sort_by_key(|p| p.start);
            out.push(PhantomConfig {
                centerline_length: length,
                cross_section_size: self.cross_section_size,
                lumen_radius,
                noise_std: self.noise_std,
                plaques,
                seed: self
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(i as u64 + 1),
                ..PhantomConfig::default()
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plaque(start: usize, length: usize, n: f64, kind: PlaqueKind, profile: PlaqueProfile) -> PlaqueSpec {
        PlaqueSpec {
            start,
            length,
            max_narrowing: n,
            kind,
            profile,
        }
    }

    #[test]
    fn narrowing_threshold_is_strict() {
        assert!(narrowing_to_label(0.51).unwrap());
        assert!(!narrowing_to_label(0.50).unwrap());
        assert!(!narrowing_to_label(0.0).unwrap());
        assert!(narrowing_to_label(1.0).unwrap());
        assert!(matches!(narrowing_to_label(1.2), Err(Error::Domain(_))));
        assert!(narrowing_to_label(-0.1).is_err());
    }

    #[test]
    fn healthy_vessel_has_no_positive_labels() {
        let img = generate_phantom::<f32>(&PhantomConfig::default()).unwrap();
        assert!(img.labels.iter().all(|&l| !l));
        assert!(img.narrowing.iter().all(|&n| n == 0.0));
        assert_eq!(img.intensities.dim(), (150, 21, 21));
    }

    #[test]
    fn rectangular_plaque_labels_exact_span() {
        let config = PhantomConfig {
            plaques: vec![plaque(40, 20, 0.7, PlaqueKind::NonCalcified, PlaqueProfile::Rectangular)],
            ..PhantomConfig::default()
        };
        let img = generate_phantom::<f64>(&config).unwrap();
        // Independent label computation straight from the plaque list.
        for z in 0..150 {
            let inside = (40..60).contains(&z);
            let expected = inside && 0.7 > 0.5;
            assert_eq!(img.labels[z], expected, "z = {z}");
            assert_eq!(img.narrowing[z], if inside { 0.7 } else { 0.0 });
        }
    }

    #[test]
    fn half_narrowing_is_not_significant() {
        let config = PhantomConfig {
            plaques: vec![plaque(10, 30, 0.5, PlaqueKind::Calcified, PlaqueProfile::Rectangular)],
            ..PhantomConfig::default()
        };
        let img = generate_phantom::<f32>(&config).unwrap();
        assert!(img.labels.iter().all(|&l| !l));
    }

    #[test]
    fn smooth_profile_tapers_to_both_ends() {
        let p = plaque(10, 21, 0.8, PlaqueKind::Calcified, PlaqueProfile::Smooth);
        assert!((p.narrowing_at(20) - 0.8).abs() < 1e-12);
        assert!(p.narrowing_at(10) < 0.05);
        assert!(p.narrowing_at(30) < 0.05);
        assert_eq!(p.narrowing_at(31), 0.0);
        assert_eq!(p.narrowing_at(9), 0.0);
    }

    #[test]
    fn overlapping_plaques_are_rejected() {
        let config = PhantomConfig {
            plaques: vec![
                plaque(10, 20, 0.7, PlaqueKind::Calcified, PlaqueProfile::Rectangular),
                plaque(25, 10, 0.7, PlaqueKind::Calcified, PlaqueProfile::Rectangular),
            ],
            ..PhantomConfig::default()
        };
        let err = generate_phantom::<f32>(&config).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("plaques[0]"));
        assert!(err.to_string().contains("plaques[1]"));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let even = PhantomConfig {
            cross_section_size: 20,
            ..PhantomConfig::default()
        };
        assert!(even.validate().is_err());
        let cramped = PhantomConfig {
            cross_section_size: 9,
            lumen_radius: 4.0,
            ..PhantomConfig::default()
        };
        assert!(cramped.validate().is_err());
        let noisy = PhantomConfig {
            noise_std: -1.0,
            ..PhantomConfig::default()
        };
        assert!(noisy.validate().is_err());
        let outside = PhantomConfig {
            plaques: vec![plaque(140, 20, 0.7, PlaqueKind::Calcified, PlaqueProfile::Smooth)],
            ..PhantomConfig::default()
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn noiseless_healthy_cross_sections_are_identical() {
        let img = generate_phantom::<f32>(&PhantomConfig::default()).unwrap();
        let first = img.intensities.slice(s![0, .., ..]).to_owned();
        for z in 1..img.centerline_length() {
            assert_eq!(img.intensities.slice(s![z, .., ..]), first);
        }
    }

    fn plaque_region_mean(img: &MprImage<f64>, z: usize) -> f64 {
        let axis = img.axis_index() as f64;
        let r = img.config.lumen_radius;
        let open = r * (1.0 - img.narrowing[z]);
        let mut sum = 0.0;
        let mut n = 0;
        for ((y, x), v) in img.intensities.slice(s![z, .., ..]).indexed_iter() {
            let rho = ((y as f64 - axis).powi(2) + (x as f64 - axis).powi(2)).sqrt();
            if rho > open && rho <= r {
                sum += v;
                n += 1;
            }
        }
        assert!(n > 0);
        sum / n as f64
    }

    #[test]
    fn plaque_intensity_depends_on_kind() {
        let config = PhantomConfig {
            plaques: vec![
                plaque(20, 20, 0.8, PlaqueKind::Calcified, PlaqueProfile::Rectangular),
                plaque(80, 20, 0.8, PlaqueKind::NonCalcified, PlaqueProfile::Rectangular),
            ],
            ..PhantomConfig::default()
        };
        let img = generate_phantom::<f64>(&config).unwrap();
        assert!(plaque_region_mean(&img, 30) > config.lumen_intensity);
        let soft = plaque_region_mean(&img, 90);
        assert!((soft - config.wall_intensity).abs() <= 0.1 * config.wall_intensity.abs());
    }

    #[test]
    fn generation_is_deterministic() {
        let config = PhantomConfig {
            noise_std: 25.0,
            seed: 7,
            plaques: vec![plaque(30, 25, 0.9, PlaqueKind::NonCalcified, PlaqueProfile::Smooth)],
            ..PhantomConfig::default()
        };
        let a = generate_phantom::<f32>(&config).unwrap();
        let b = generate_phantom::<f32>(&config).unwrap();
        assert_eq!(a, b);
        let other = generate_phantom::<f32>(&PhantomConfig { seed: 8, ..config }).unwrap();
        assert_ne!(a.intensities, other.intensities);
    }

    #[test]
    fn dataset_sizes_and_ids() {
        assert!(generate_dataset::<f32>(&[]).unwrap().is_empty());
        let configs = DatasetRecipe {
            count: 76,
            centerline_length: (40, 60),
            ..DatasetRecipe::default()
        }
        .configs()
        .unwrap();
        let seeds: HashSet<u64> = configs.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 76);
        let images = generate_dataset::<f32>(&configs).unwrap();
        assert_eq!(images.len(), 76);
        assert_eq!(images[3].id, "cl0003");
        let twice = generate_dataset::<f32>(&[configs[0].clone(), configs[0].clone()]).unwrap();
        assert_eq!(twice[0].intensities, twice[1].intensities);
    }

    #[test]
    fn recipe_configs_are_valid_and_reproducible() {
        let recipe = DatasetRecipe {
            count: 50,
            seed: 3,
            ..DatasetRecipe::default()
        };
        let a = recipe.configs().unwrap();
        assert_eq!(a, recipe.configs().unwrap());
        for c in &a {
            c.validate().unwrap();
        }
        assert!(a.iter().any(|c| c.plaques.is_empty()));
        assert!(a.iter().any(|c| c.plaques.len() == 2));
    }

    #[test]
    fn container_round_trip() {
        let config = PhantomConfig {
            centerline_length: 30,
            noise_std: 5.0,
            plaques: vec![plaque(5, 10, 0.6, PlaqueKind::Calcified, PlaqueProfile::Smooth)],
            ..PhantomConfig::default()
        };
        let img = generate_phantom::<f32>(&config).unwrap();
        let c = Container::from_bytes(&img.to_container().unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(MprImage::<f32>::from_container(&c).unwrap(), img);
    }

    proptest::proptest! {
        #[test]
        fn labels_always_follow_narrowing(
            start in 0usize..60,
            length in 1usize..40,
            n in 0.0f64..=1.0,
            smooth in proptest::bool::ANY,
        ) {
            let config = PhantomConfig {
                centerline_length: 100,
                plaques: vec![plaque(start, length, n, PlaqueKind::Calcified,
                    if smooth { PlaqueProfile::Smooth } else { PlaqueProfile::Rectangular })],
                ..PhantomConfig::default()
            };
            let img = generate_phantom::<f32>(&config).unwrap();
            for z in 0..100 {
                proptest::prop_assert_eq!(img.labels[z], img.narrowing[z] > 0.5);
            }
        }
    }
}
