//! On-disk phantom datasets and sequence datasets.
//!
//! A phantom dataset is a directory of image containers plus
//! `manifest.json`. A sequence dataset holds one container per centerline
//! with two views of it: the training view (augmented and trimmed as the
//! sampling config says) and the evaluation view (every center, never
//! augmented), together with the centerline's full annotation track.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{read_json, write_json, Container, Tensor};
use crate::error::{Error, Result};
use crate::phantom::MprImage;
use crate::sampling::{build_dataset_sequences, SamplingConfig, VolumeSequence};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const SEQUENCES_KIND: &str = "sequences";

const PHANTOM_DATASET_KIND: &str = "phantom_dataset";
const SEQUENCE_DATASET_KIND: &str = "sequence_dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub file: String,
    pub centerline_length: usize,
    pub positive_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub version: u32,
    pub kind: String,
    pub root_seed: u64,
    pub images: Vec<ImageEntry>,
}

impl PhantomManifest {
    pub fn positive_fraction(&self) -> f64 {
        let total: usize = self.images.iter().map(|e| e.centerline_length).sum();
        let pos: usize = self.images.iter().map(|e| e.positive_voxels).sum();
        if total == 0 {
            0.0
        } else {
            pos as f64 / total as f64
        }
    }
}

/// Accepts either a dataset directory or the path of its manifest.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn dataset_dir(path: &Path) -> PathBuf {
    manifest_path(path)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_kind(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Container(format!(
            "{} is a {found} manifest, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_phantom_dataset<T: Scalar>(
    dir: &Path,
    images: &[MprImage<T>],
    root_seed: u64,
) -> Result<PhantomManifest> {
    ensure_dir(dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for image in images {
        let file = format!("{}.phantom", image.id);
        image.to_container()?.save(&dir.join(&file))?;
        entries.push(ImageEntry {
            id: image.id.clone(),
            file,
            centerline_length: image.centerline_length(),
            positive_voxels: image.positive_voxels(),
        });
    }
    let manifest = PhantomManifest {
        version: MANIFEST_VERSION,
        kind: PHANTOM_DATASET_KIND.to_string(),
        root_seed,
        images: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_phantom_manifest(path: &Path) -> Result<PhantomManifest> {
    let path = manifest_path(path);
    let manifest: PhantomManifest = read_json(&path)?;
    check_kind(&manifest.kind, PHANTOM_DATASET_KIND, &path)?;
    Ok(manifest)
}

pub fn read_phantom_dataset<T: Scalar>(path: &Path) -> Result<(PhantomManifest, Vec<MprImage<T>>)> {
    let manifest = read_phantom_manifest(path)?;
    let dir = dataset_dir(path);
    let images = manifest
        .images
        .iter()
        .map(|e| MprImage::from_container(&Container::load(&dir.join(&e.file))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, images))
}

/// Both sequence views of one centerline plus its annotation track.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterlineSequences<T> {
    pub id: String,
    /// Per-voxel labels along the whole centerline.
    pub truth: Vec<bool>,
    pub train: Vec<VolumeSequence<T>>,
    pub eval: Vec<VolumeSequence<T>>,
}

impl<T: Scalar> CenterlineSequences<T> {
    pub fn train_centers(&self) -> usize {
        self.train.iter().map(VolumeSequence::len).sum()
    }

    pub fn train_positives(&self) -> usize {
        self.train.iter().map(VolumeSequence::positives).sum()
    }

    pub fn to_container(&self, sampling: &SamplingConfig) -> Result<Container> {
        let mut c = Container::new(SEQUENCES_KIND);
        c.set_field("source_id", &self.id)?;
        c.set_field("sampling", sampling)?;
        c.set_field("train_sequences", &self.train.len())?;
        c.set_field("eval_sequences", &self.eval.len())?;
        c.insert(
            "truth",
            Tensor::from_u8(vec![self.truth.len()], self.truth.iter().map(|&t| t as u8).collect()),
        );
        for (view, seqs) in [("train", &self.train), ("eval", &self.eval)] {
            for (i, seq) in seqs.iter().enumerate() {
                insert_sequence(&mut c, &format!("{view}.{i}"), seq)?;
            }
        }
        Ok(c)
    }

    /// Returns the sequences and the sampling config they were built with.
    pub fn from_container(c: &Container) -> Result<(Self, SamplingConfig)> {
        c.expect_kind(SEQUENCES_KIND)?;
        let id: String = c.field("source_id")?;
        let read_view = |view: &str, count: usize| {
            (0..count)
                .map(|i| read_sequence(c, &format!("{view}.{i}"), &id))
                .collect::<Result<Vec<_>>>()
        };
        let train = read_view("train", c.field("train_sequences")?)?;
        let eval = read_view("eval", c.field("eval_sequences")?)?;
        let truth = c.tensor("truth")?.as_u8()?.iter().map(|&v| v != 0).collect();
        Ok((
            CenterlineSequences {
                id,
                truth,
                train,
                eval,
            },
            c.field("sampling")?,
        ))
    }
}

fn insert_sequence<T: Scalar>(c: &mut Container, prefix: &str, seq: &VolumeSequence<T>) -> Result<()> {
    let n = seq
        .cubes
        .first()
        .map(|cube| cube.dim().0)
        .ok_or_else(|| Error::shape(format!("sequence {prefix} is empty")))?;
    let mut cubes = Array4::zeros((seq.len(), n, n, n));
    for (mut slot, cube) in cubes.axis_iter_mut(Axis(0)).zip(&seq.cubes) {
        slot.assign(cube);
    }
    c.insert(format!("{prefix}.cubes"), Tensor::from_array(&cubes));
    c.insert(
        format!("{prefix}.centers"),
        Tensor::from_i64(vec![seq.len()], seq.center_indices.iter().map(|&z| z as i64).collect()),
    );
    c.insert(
        format!("{prefix}.labels"),
        Tensor::from_u8(vec![seq.len()], seq.labels.iter().map(|&l| l as u8).collect()),
    );
    Ok(())
}

fn read_sequence<T: Scalar>(c: &Container, prefix: &str, id: &str) -> Result<VolumeSequence<T>> {
    let cubes: Array4<T> = c
        .tensor(&format!("{prefix}.cubes"))?
        .to_array::<T>()?
        .into_dimensionality()
        .map_err(|e| Error::Container(format!("{prefix}.cubes: {e}")))?;
    let center_indices = c
        .tensor(&format!("{prefix}.centers"))?
        .as_i64()?
        .iter()
        .map(|&z| usize::try_from(z).map_err(|_| Error::Container(format!("{prefix}: negative center"))))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = c
        .tensor(&format!("{prefix}.labels"))?
        .as_u8()?
        .iter()
        .map(|&v| v != 0)
        .collect();
    let cubes: Vec<Array3<T>> = cubes.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
    if cubes.len() != labels.len() || cubes.len() != center_indices.len() {
        return Err(Error::Container(format!("{prefix}: inconsistent lengths")));
    }
    Ok(VolumeSequence {
        cubes,
        center_indices,
        labels,
        source_id: id.to_string(),
    })
}

/// Builds both views for every image; trimming of the training view pools
/// labels over the whole dataset.
pub fn build_corpus<T: Scalar>(
    images: &[MprImage<T>],
    sampling: &SamplingConfig,
) -> Result<Vec<CenterlineSequences<T>>> {
    let train = build_dataset_sequences(images, sampling)?;
    let eval = build_dataset_sequences(images, &sampling.evaluation_view())?;
    Ok(images
        .iter()
        .zip(train.into_iter().zip(eval))
        .map(|(image, (train, eval))| CenterlineSequences {
            id: image.id.clone(),
            truth: image.labels.clone(),
            train,
            eval,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub file: String,
    pub train_sequences: usize,
    pub train_centers: usize,
    pub train_positive_centers: usize,
    pub eval_sequences: usize,
    pub eval_centers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    pub kind: String,
    /// Phantom dataset the sequences were sampled from.
    pub source_dataset: String,
    pub sampling: SamplingConfig,
    pub entries: Vec<SequenceEntry>,
}

impl SequenceManifest {
    pub fn train_sequences(&self) -> usize {
        self.entries.iter().map(|e| e.train_sequences).sum()
    }

    pub fn train_positive_centers(&self) -> usize {
        self.entries.iter().map(|e| e.train_positive_centers).sum()
    }
}

pub fn write_sequence_dataset<T: Scalar>(
    dir: &Path,
    corpus: &[CenterlineSequences<T>],
    sampling: &SamplingConfig,
    source_dataset: &str,
) -> Result<SequenceManifest> {
    ensure_dir(dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for cl in corpus {
        let file = format!("{}.sequences", cl.id);
        cl.to_container(sampling)?.save(&dir.join(&file))?;
        entries.push(SequenceEntry {
            id: cl.id.clone(),
            file,
            train_sequences: cl.train.len(),
            train_centers: cl.train_centers(),
            train_positive_centers: cl.train_positives(),
            eval_sequences: cl.eval.len(),
            eval_centers: cl.eval.iter().map(VolumeSequence::len).sum(),
        });
    }
    let manifest = SequenceManifest {
        version: MANIFEST_VERSION,
        kind: SEQUENCE_DATASET_KIND.to_string(),
        source_dataset: source_dataset.to_string(),
        sampling: sampling.clone(),
        entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_sequence_manifest(path: &Path) -> Result<SequenceManifest> {
    let path = manifest_path(path);
    let manifest: SequenceManifest = read_json(&path)?;
    check_kind(&manifest.kind, SEQUENCE_DATASET_KIND, &path)?;
    Ok(manifest)
}

pub fn read_sequence_dataset<T: Scalar>(
    path: &Path,
) -> Result<(SequenceManifest, Vec<CenterlineSequences<T>>)> {
    let manifest = read_sequence_manifest(path)?;
    let dir = dataset_dir(path);
    let corpus = manifest
        .entries
        .iter()
        .map(|e| {
            let (cl, _) = CenterlineSequences::from_container(&Container::load(&dir.join(&e.file))?)?;
            Ok(cl)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, corpus))
}
