//! Turns straightened vessel images into ordered sequences of cubic volumes.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::MprImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub stride: usize,
    pub cube_side: usize,
    pub max_seq_len: usize,
    pub jitter_max: usize,
    pub rotate: bool,
    pub balance_trim: bool,
    /// Runs closer than this many centers to a positive center are never trimmed.
    pub trim_margin: usize,
    /// Trimming stops once the positive fraction reaches this value.
    pub trim_target: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            stride: 5,
            cube_side: 29,
            max_seq_len: 30,
            jitter_max: 3,
            rotate: true,
            balance_trim: true,
            trim_margin: 10,
            trim_target: 0.08,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::config("stride must be at least 1"));
        }
        if self.cube_side.is_multiple_of(2) || self.cube_side < 3 {
            return Err(Error::config(format!(
                "cube_side must be odd and >= 3, got {}",
                self.cube_side
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::config("max_seq_len must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.trim_target) {
            return Err(Error::config("trim_target must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The same geometry without augmentation or trimming.
    pub fn evaluation_view(&self) -> Self {
        SamplingConfig {
            jitter_max: 0,
            rotate: false,
            balance_trim: false,
            ..self.clone()
        }
    }

    pub fn augments(&self) -> bool {
        self.jitter_max > 0 || self.rotate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence<T> {
    pub cubes: Vec<Array3<T>>,
    pub center_indices: Vec<usize>,
    pub labels: Vec<bool>,
    pub source_id: String,
}

impl<T> VolumeSequence<T> {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Centerline positions `0, stride, 2*stride, ...` below `centerline_length`.
pub fn center_positions(centerline_length: usize, stride: usize) -> Result<Vec<usize>> {
    if stride < 1 {
        return Err(Error::config("stride must be at least 1"));
    }
    Ok((0..centerline_length).step_by(stride).collect())
}

pub fn select_centers<T: Scalar>(image: &MprImage<T>, stride: usize) -> Result<Vec<usize>> {
    center_positions(image.centerline_length(), stride)
}

/// Cube of side `n` centred on `center = (z, y, x)`; voxels outside the image
/// take the background intensity.
pub fn extract_cube<T: Scalar>(
    image: &MprImage<T>,
    center: [usize; 3],
    n: usize,
) -> Result<Array3<T>> {
    if n.is_multiple_of(2) {
        return Err(Error::config(format!(
            "cube side must be odd to have a unique center, got {n}"
        )));
    }
    let dims = image.intensities.dim();
    let dims = [dims.0, dims.1, dims.2];
    if center.iter().zip(dims).any(|(&c, d)| c >= d) {
        return Err(Error::Domain(format!(
            "center {center:?} lies outside the image of shape {dims:?}"
        )));
    }
    let half = (n / 2) as isize;
    let mut cube = Array3::from_elem((n, n, n), image.background());

    // Intersect the cube window with the image per axis.
    let mut src = [(0usize, 0usize); 3];
    let mut dst = [0usize; 3];
    for a in 0..3 {
        let lo = center[a] as isize - half;
        let hi = center[a] as isize + half + 1;
        let clo = lo.max(0);
        let chi = hi.min(dims[a] as isize);
        src[a] = (clo as usize, chi as usize);
        dst[a] = (clo - lo) as usize;
    }
    let window = image.intensities.slice(s![
        src[0].0..src[0].1,
        src[1].0..src[1].1,
        src[2].0..src[2].1
    ]);
    let (wz, wy, wx) = window.dim();
    cube.slice_mut(s![
        dst[0]..dst[0] + wz,
        dst[1]..dst[1] + wy,
        dst[2]..dst[2] + wx
    ])
    .assign(&window);
    Ok(cube)
}

/// Moves `center` by 0..=`jitter_max` voxels along one of the six axis
/// directions, clamped to `dims`.
pub fn jitter_center<R: Rng + ?Sized>(
    center: [usize; 3],
    jitter_max: usize,
    dims: [usize; 3],
    rng: &mut R,
) -> [usize; 3] {
    if jitter_max == 0 {
        return center;
    }
    let direction = rng.random_range(0..6usize);
    let magnitude = rng.random_range(0..=jitter_max) as isize;
    let axis = direction / 2;
    let sign = if direction % 2 == 0 { 1 } else { -1 };
    let mut out = center;
    let moved = center[axis] as isize + sign * magnitude;
    out[axis] = moved.clamp(0, dims[axis] as isize - 1) as usize;
    out
}

pub fn random_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

fn bilinear_clamped<T: Scalar>(slice: &ArrayView2<T>, y: f64, x: f64) -> T {
    let (h, w) = slice.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::lit(y - y0 as f64);
    let fx = T::lit(x - x0 as f64);
    let one = T::one();
    let top = slice[[y0, x0]] * (one - fx) + slice[[y0, x1]] * fx;
    let bottom = slice[[y1, x0]] * (one - fx) + slice[[y1, x1]] * fx;
    top * (one - fy) + bottom * fy
}

/// Rotates every cross-section (plane normal to the first axis) by `angle`
/// radians about the cube's central axis. Bilinear interpolation; samples
/// falling outside a slice take the nearest edge value.
pub fn rotate_cube<T: Scalar>(cube: &Array3<T>, angle: f64) -> Array3<T> {
    let (depth, h, w) = cube.dim();
    if h < 2 || w < 2 || angle == 0.0 {
        return cube.clone();
    }
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = Array3::zeros((depth, h, w));
    for z in 0..depth {
        let src = cube.index_axis(Axis(0), z);
        let mut dst = out.index_axis_mut(Axis(0), z);
        for ((y, x), v) in dst.indexed_iter_mut() {
            // Inverse mapping: rotate the output coordinate back by -angle.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            *v = bilinear_clamped(&src, sy, sx);
        }
    }
    out
}

/// Distance (in centers) from every center to the nearest positive one.
fn distance_to_positive(labels: &[bool]) -> Vec<usize> {
    let n = labels.len();
    let mut dist = vec![usize::MAX; n];
    let mut last = None;
    for i in 0..n {
        if labels[i] {
            last = Some(i);
        }
        if let Some(p) = last {
            dist[i] = i - p;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if labels[i] {
            last = Some(i);
        }
        if let Some(p) = last {
            dist[i] = dist[i].min(p - i);
        }
    }
    dist
}

/// Decides which centers survive class-balance trimming.
///
/// `tracks` holds the center labels of each centerline. Maximal runs of
/// negative centers at least `margin` centers away from every positive
/// center are dropped, longest first, until the pooled positive fraction
/// reaches `target` or no run is left. Tracks without any positive are
/// eligible as a whole; a pool without positives is returned untouched.
pub fn balance_trim(tracks: &[Vec<bool>], margin: usize, target: f64) -> Vec<Vec<bool>> {
    let mut keep: Vec<Vec<bool>> = tracks.iter().map(|t| vec![true; t.len()]).collect();
    let positives: usize = tracks.iter().map(|t| t.iter().filter(|&&l| l).count()).sum();
    let mut kept: usize = tracks.iter().map(Vec::len).sum();
    if positives == 0 {
        return keep;
    }

    // (length, track, start)
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, labels) in tracks.iter().enumerate() {
        let dist = distance_to_positive(labels);
        let mut i = 0;
        while i < labels.len() {
            if !labels[i] && dist[i] >= margin {
                let start = i;
                while i < labels.len() && !labels[i] && dist[i] >= margin {
                    i += 1;
                }
                runs.push((i - start, t, start));
            } else {
                i += 1;
            }
        }
    }
    runs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    for (len, t, start) in runs {
        if kept == 0 || positives as f64 / kept as f64 >= target {
            break;
        }
        keep[t][start..start + len].iter_mut().for_each(|k| *k = false);
        kept -= len;
    }
    keep
}

/// Splits retained centers into contiguous runs (consecutive centers one
/// stride apart) and chunks each run into pieces of at most `max_len`.
pub fn chunk_centers(centers: &[usize], stride: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, out: &mut Vec<Vec<usize>>| {
        for chunk in run.chunks(max_len) {
            out.push(chunk.to_vec());
        }
        run.clear();
    };
    for &c in centers {
        if let Some(&prev) = run.last() {
            if c != prev + stride {
                flush(&mut run, &mut out);
            }
        }
        run.push(c);
    }
    flush(&mut run, &mut out);
    out
}

/// Stable per-image seed so augmentation does not depend on processing order.
pub fn stream_seed(root: u64, source_id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in source_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ root.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn sequences_from_kept<T: Scalar>(
    image: &MprImage<T>,
    centers: &[usize],
    keep: &[bool],
    config: &SamplingConfig,
) -> Result<Vec<VolumeSequence<T>>> {
    let retained: Vec<usize> = centers
        .iter()
        .zip(keep)
        .filter_map(|(&c, &k)| k.then_some(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &image.id));
    let dims = image.intensities.dim();
    let dims = [dims.0, dims.1, dims.2];
    let axis = image.axis_index();

    chunk_centers(&retained, config.stride, config.max_seq_len)
        .into_iter()
        .map(|chunk| {
            let mut cubes = Vec::with_capacity(chunk.len());
            for &z in &chunk {
                let center = jitter_center([z, axis, axis], config.jitter_max, dims, &mut rng);
                let mut cube = extract_cube(image, center, config.cube_side)?;
                if config.rotate {
                    cube = rotate_cube(&cube, random_angle(&mut rng));
                }
                cubes.push(cube);
            }
            Ok(VolumeSequence {
                cubes,
                labels: chunk.iter().map(|&z| image.labels[z]).collect(),
                center_indices: chunk,
                source_id: image.id.clone(),
            })
        })
        .collect()
}

/// Sequences for one image; trimming only sees this image's labels.
pub fn build_sequences<T: Scalar>(
    image: &MprImage<T>,
    config: &SamplingConfig,
) -> Result<Vec<VolumeSequence<T>>> {
    config.validate()?;
    let centers = select_centers(image, config.stride)?;
    let labels: Vec<bool> = centers.iter().map(|&z| image.labels[z]).collect();
    let keep = if config.balance_trim {
        balance_trim(&[labels], config.trim_margin, config.trim_target).remove(0)
    } else {
        vec![true; centers.len()]
    };
    sequences_from_kept(image, &centers, &keep, config)
}

/// Sequences for a whole dataset, trimming against the pooled positive fraction.
pub fn build_dataset_sequences<T: Scalar>(
    images: &[MprImage<T>],
    config: &SamplingConfig,
) -> Result<Vec<Vec<VolumeSequence<T>>>> {
    config.validate()?;
    let centers: Vec<Vec<usize>> = images
        .iter()
        .map(|img| select_centers(img, config.stride))
        .collect::<Result<_>>()?;
    let tracks: Vec<Vec<bool>> = images
        .iter()
        .zip(&centers)
        .map(|(img, cs)| cs.iter().map(|&z| img.labels[z]).collect())
        .collect();
    let keep = if config.balance_trim {
        balance_trim(&tracks, config.trim_margin, config.trim_target)
    } else {
        tracks.iter().map(|t| vec![true; t.len()]).collect()
    };
    images
        .iter()
        .zip(centers.iter().zip(&keep))
        .map(|(img, (cs, k))| sequences_from_kept(img, cs, k, config))
        .collect()
}

/// Central longitudinal plane `(z, x)` at the axis row; used for rendering.
pub fn longitudinal_plane<T: Scalar>(image: &MprImage<T>) -> Array2<T> {
    image
        .intensities
        .index_axis(Axis(1), image.axis_index())
        .to_owned()
}
