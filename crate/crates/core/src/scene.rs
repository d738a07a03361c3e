//! Synthetic ground truth: random source fields, voxel rasterization and
//! reproducible dataset generation.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{add_noise, sample_poisson, ForwardOperator, NoiseModel, Volume};
use crate::io;
use crate::optics::PsfDictionary;

/// A point source in voxel-grid units: `x` indexes rows, `y` columns and `z`
/// depth planes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub flux: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceList(pub Vec<Source>);

impl SourceList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Source> {
        self.0.iter()
    }

    pub fn total_flux(&self) -> f64 {
        self.0.iter().map(|s| s.flux).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Fixed(usize),
    /// Uniform integer count in `[lo, hi]`.
    Range { lo: usize, hi: usize },
}

pub const DEFAULT_MARGIN: f64 = 4.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_images: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    /// Number of depth planes `D`.
    pub depth: usize,
    pub density: Density,
    pub flux_mean: f64,
    /// Minimum pairwise Euclidean distance between sources, in voxels.
    pub min_separation: f64,
    /// Transverse distance kept free along the image border.
    pub margin: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Defaults of the reference training protocol on a given grid.
    pub fn new(image_size: (usize, usize), depth: usize, density: Density, seed: u64) -> Self {
        DatasetSpec {
            num_images: 1,
            image_size,
            depth,
            density,
            flux_mean: 2000.0,
            min_separation: 0.0,
            margin: DEFAULT_MARGIN,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be positive".into()));
        }
        if let Density::Range { lo, hi } = self.density {
            if lo > hi {
                return Err(Error::Config(format!("density range [{lo}, {hi}] is empty")));
            }
        }
        if !(self.flux_mean > 0.0) {
            return Err(Error::Config("flux_mean must be positive".into()));
        }
        if !(self.min_separation >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config("min_separation and margin must be nonnegative".into()));
        }
        let (h, w) = self.image_size;
        if self.depth == 0 || h == 0 || w == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if 2.0 * self.margin > (h.min(w) - 1) as f64 {
            return Err(Error::Config(format!(
                "margin {} leaves no room on a {h}x{w} grid",
                self.margin
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.image_size.0, self.image_size.1, self.depth)
    }
}

/// Independent random streams derived from one user seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Purpose {
    Scene = 1,
    Noise = 2,
}

/// Seed for stream `(purpose, index)` of `seed` (splitmix64 finalizer).
pub fn substream_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    let mut z = seed
        ^ (purpose as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw the sources of image `image_index`.
pub fn sample_scene(spec: &DatasetSpec, image_index: usize) -> Result<SourceList> {
    spec.validate()?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(substream_seed(spec.seed, Purpose::Scene, image_index as u64));
    let count = match spec.density {
        Density::Fixed(n) => n,
        Density::Range { lo, hi } => rng.random_range(lo..=hi),
    };
    let (h, w, d) = spec.grid();
    let m = spec.margin;
    let sep2 = spec.min_separation * spec.min_separation;
    let mut sources: Vec<Source> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while sources.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Capacity(format!(
                "placed {} of {count} sources with separation {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                sources.len(),
                spec.min_separation
            )));
        }
        let x = rng.random_range(m..=(h - 1) as f64 - m);
        let y = rng.random_range(m..=(w - 1) as f64 - m);
        let z = rng.random_range(0.0..=(d - 1) as f64);
        let clear = sources.iter().all(|s| {
            let (dx, dy, dz) = (s.x - x, s.y - y, s.z - z);
            dx * dx + dy * dy + dz * dz >= sep2
        });
        if !clear {
            continue;
        }
        let flux = loop {
            let f = sample_poisson(&mut rng, spec.flux_mean);
            if f > 0 {
                break f as f64;
            }
        };
        sources.push(Source { x, y, z, flux });
    }
    Ok(SourceList(sources))
}

fn snap(coord: f64, len: usize, axis: &str) -> Result<usize> {
    if !(coord >= 0.0 && coord < len as f64) {
        return Err(Error::Domain(format!(
            "{axis} coordinate {coord} outside [0, {len})"
        )));
    }
    Ok((coord.round() as usize).min(len - 1))
}

/// Deposit each source's flux in its nearest voxel. `grid` is `(H, W, D)`.
pub fn rasterize(sources: &SourceList, grid: (usize, usize, usize)) -> Result<Volume> {
    let (h, w, d) = grid;
    let mut data = Array3::zeros((d, h, w));
    for s in sources.iter() {
        if !(s.flux > 0.0) {
            return Err(Error::Domain(format!("source flux {} must be positive", s.flux)));
        }
        let i = snap(s.x, h, "x")?;
        let j = snap(s.y, w, "y")?;
        let k = snap(s.z, d, "z")?;
        data[[k, i, j]] += s.flux;
    }
    Volume::new(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub n_sources: usize,
    pub scene_seed: u64,
    pub noise_seed: u64,
    pub scene: String,
    pub clean: String,
    pub observed: String,
    pub scene_sha256: String,
    pub clean_sha256: String,
    pub observed_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    pub noise: NoiseModel,
    pub dictionary_sha256: String,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        io::read_json(dir.as_ref().join(MANIFEST_FILE))
    }

    /// Every data file, relative to the dataset directory.
    pub fn files(&self) -> Vec<&str> {
        self.images
            .iter()
            .flat_map(|r| [r.scene.as_str(), r.clean.as_str(), r.observed.as_str()])
            .collect()
    }
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SourceList> {
    io::read_json(path)
}

fn write_one(
    spec: &DatasetSpec,
    op: &ForwardOperator,
    noise: &NoiseModel,
    out_dir: &Path,
    index: usize,
) -> Result<ImageRecord> {
    let sources = sample_scene(spec, index)?;
    let volume = rasterize(&sources, spec.grid())?;
    let clean = op.forward(&volume, noise.background)?;
    let noise_seed = substream_seed(spec.seed, Purpose::Noise, index as u64);
    let observed = add_noise(&clean, noise, noise_seed)?;

    let stem = format!("img_{index:05}");
    let scene = format!("{stem}_scene.json");
    let clean_name = format!("{stem}_clean.img");
    let observed_name = format!("{stem}_observed.img");
    io::write_json(out_dir.join(&scene), &sources)?;
    let clean_bytes = io::image_bytes(&clean);
    let observed_bytes = io::image_bytes(&observed);
    write_file(&out_dir.join(&clean_name), &clean_bytes)?;
    write_file(&out_dir.join(&observed_name), &observed_bytes)?;
    Ok(ImageRecord {
        index,
        n_sources: sources.len(),
        scene_seed: substream_seed(spec.seed, Purpose::Scene, index as u64),
        noise_seed,
        scene_sha256: io::sha256_file(out_dir.join(&scene))?,
        clean_sha256: io::sha256_hex(&clean_bytes),
        observed_sha256: io::sha256_hex(&observed_bytes),
        scene,
        clean: clean_name,
        observed: observed_name,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Simulate `spec.num_images` scenes and write scene, clean and observed files
/// plus `manifest.json` into `out_dir`.
pub fn generate_dataset(
    spec: &DatasetSpec,
    dict: &PsfDictionary,
    noise: &NoiseModel,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    generate_with_note(spec, dict, noise, out_dir.as_ref(), None)
}

fn generate_with_note(
    spec: &DatasetSpec,
    dict: &PsfDictionary,
    noise: &NoiseModel,
    out_dir: &Path,
    note: Option<String>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    noise.validate()?;
    if spec.grid() != dict.grid() {
        return Err(Error::shape(dict.grid(), spec.grid()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let op = ForwardOperator::new(dict);
    let images = (0..spec.num_images)
        .into_par_iter()
        .map(|i| write_one(spec, &op, noise, out_dir, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: "rpsf-dataset".into(),
        version: io::FORMAT_VERSION,
        spec: spec.clone(),
        noise: *noise,
        dictionary_sha256: io::sha256_hex(&io::dictionary_bytes(dict)),
        images,
        note,
    };
    io::write_json(out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Re-run the generation recorded in `manifest` into `out_dir`.
pub fn regenerate(
    manifest: &DatasetManifest,
    dict: &PsfDictionary,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let hash = io::sha256_hex(&io::dictionary_bytes(dict));
    if hash != manifest.dictionary_sha256 {
        return Err(Error::Config(format!(
            "dictionary hash {hash} does not match the manifest's {}",
            manifest.dictionary_sha256
        )));
    }
    generate_with_note(&manifest.spec, dict, &manifest.noise, out_dir.as_ref(), manifest.note.clone())
}

/// Test densities of the reference evaluation protocol.
pub const PROTOCOL_DENSITIES: [usize; 9] = [5, 10, 15, 20, 25, 30, 35, 40, 45];
/// Images per density in the reference protocol.
pub const PROTOCOL_IMAGES_PER_DENSITY: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolManifest {
    pub images_per_density: usize,
    pub reference_images_per_density: usize,
    pub datasets: Vec<(usize, PathBuf)>,
}

/// One fixed-density dataset per entry of `densities`, each in its own
/// `density_NN` subdirectory, with a scale-down note in every manifest.
pub fn generate_protocol(
    base: &DatasetSpec,
    densities: &[usize],
    images_per_density: usize,
    dict: &PsfDictionary,
    noise: &NoiseModel,
    out_dir: impl AsRef<Path>,
) -> Result<ProtocolManifest> {
    let out_dir = out_dir.as_ref();
    let note = format!(
        "reduced protocol: {images_per_density} images per density instead of {PROTOCOL_IMAGES_PER_DENSITY}"
    );
    let mut datasets = Vec::new();
    for &n in densities {
        let spec = DatasetSpec {
            num_images: images_per_density,
            density: Density::Fixed(n),
            seed: substream_seed(base.seed, Purpose::Scene, 1_000_000 + n as u64),
            ..base.clone()
        };
        let rel = PathBuf::from(format!("density_{n:02}"));
        generate_with_note(&spec, dict, noise, &out_dir.join(&rel), Some(note.clone()))?;
        datasets.push((n, rel));
    }
    let manifest = ProtocolManifest {
        images_per_density,
        reference_images_per_density: PROTOCOL_IMAGES_PER_DENSITY,
        datasets,
    };
    io::write_json(out_dir.join("protocol.json"), &manifest)?;
    Ok(manifest)
}
