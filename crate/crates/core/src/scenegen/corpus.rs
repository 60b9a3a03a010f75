//! On-disk sample corpus: `<split>/sample_NNNNNN/*.dnt` + `scene.json`, and a
//! `manifest.json` at the root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render, sample_scene, Difficulty, IntrinsicSet, SceneSpec, FAR_PLANE};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_atomic_str};
use crate::tensor::{read_map, write_map, Map};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// `[height, width]`
    pub resolution: [usize; 2],
    pub counts: Counts,
    pub far_plane: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Map,
    pub intrinsics: IntrinsicSet,
    pub scene: SceneSpec,
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

fn sample_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    split_dir(root, split).join(format!("sample_{index:06}"))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample scene seed and difficulty, a pure function of the corpus seed.
pub fn sample_params(seed: u64, split: Split, index: usize) -> (u64, Difficulty) {
    let s = splitmix64(splitmix64(seed ^ split.tag()) ^ index as u64);
    let difficulty = if (s >> 17) & 1 == 0 { Difficulty::Simple } else { Difficulty::Cluttered };
    (s, difficulty)
}

const MAP_FILES: [&str; 7] = ["image", "albedo", "metallic", "roughness", "normal", "depth", "mask"];

fn write_sample(dir: &Path, image: &Map, set: &IntrinsicSet, scene: &SceneSpec) -> Result<()> {
    set.validate()
        .map_err(|e| Error::invalid(format!("sample {} violates intrinsic invariants: {e}", dir.display())))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = [image, &set.albedo, &set.metallic, &set.roughness, &set.normal, &set.depth, &set.mask];
    for (name, m) in MAP_FILES.iter().zip(maps) {
        write_map(&dir.join(format!("{name}.dnt")), m)?;
    }
    let json = serde_json::to_string_pretty(scene).expect("scene serializes");
    write_atomic_str(&dir.join("scene.json"), &json)
}

fn generate_one(root: &Path, seed: u64, split: Split, index: usize, res: [usize; 2]) -> Result<()> {
    let (scene_seed, difficulty) = sample_params(seed, split, index);
    let scene = sample_scene(scene_seed, difficulty);
    let (image, set) = render(&scene, res[0], res[1])?;
    write_sample(&sample_dir(root, split, index), &image, &set, &scene)
}

/// Generate a corpus on disk. The output is byte-identical for identical
/// arguments regardless of `jobs`.
pub fn generate_corpus(n_train: usize, n_test: usize, resolution: [usize; 2], seed: u64, out_dir: &Path, jobs: usize) -> Result<Manifest> {
    if resolution[0] < 8 || resolution[1] < 8 {
        return Err(Error::invalid(format!("resolution {resolution:?} below 8x8")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut work: Vec<(Split, usize)> = (0..n_train).map(|i| (Split::Train, i)).collect();
    work.extend((0..n_test).map(|i| (Split::Test, i)));
    for split in [Split::Train, Split::Test] {
        let d = split_dir(out_dir, split);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs = jobs.max(1);
    if jobs == 1 {
        for &(split, i) in &work {
            generate_one(out_dir, seed, split, i, resolution)?;
        }
    } else {
        let chunk = work.len().div_ceil(jobs).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .try_for_each(|&(split, i)| generate_one(out_dir, seed, split, i, resolution))
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("corpus worker panicked"))
        })?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        resolution,
        counts: Counts {
            train: n_train,
            test: n_test,
        },
        far_plane: FAR_PLANE,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// An opened corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    manifest_bytes: Vec<u8>,
}

impl Corpus {
    pub fn open(root: impl Into<PathBuf>) -> Result<Corpus> {
        let root = root.into();
        let path = root.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: Some(path.clone()),
            offset: 0,
            msg: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: Some(path),
                offset: 0,
                msg: format!("corpus format version {} unsupported (expected {FORMAT_VERSION})", manifest.format_version),
            });
        }
        Ok(Corpus {
            root,
            manifest,
            manifest_bytes: bytes,
        })
    }

    /// Hex SHA-256 of the manifest bytes.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(&self.manifest_bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.manifest.counts.train,
            Split::Test => self.manifest.counts.test,
        }
    }

    pub fn sample_path(&self, split: Split, index: usize) -> PathBuf {
        sample_dir(&self.root, split, index)
    }

    pub fn load_sample(&self, split: Split, index: usize) -> Result<Sample> {
        load_sample_dir(&self.sample_path(split, index))
    }

    /// Load the first `limit` samples of a split (all when `None`).
    pub fn load_split(&self, split: Split, limit: Option<usize>) -> Result<Vec<Sample>> {
        let n = limit.map_or(self.count(split), |l| l.min(self.count(split)));
        (0..n).map(|i| self.load_sample(split, i)).collect()
    }
}

pub fn load_intrinsics_dir(dir: &Path) -> Result<IntrinsicSet> {
    let load = |name: &str| read_map(&dir.join(format!("{name}.dnt")));
    let mask = match load("mask") {
        Ok(m) => m,
        Err(Error::Io { .. }) => {
            let a = load("albedo")?;
            Map::filled(1, a.height, a.width, 1.0)
        }
        Err(e) => return Err(e),
    };
    Ok(IntrinsicSet {
        albedo: load("albedo")?,
        metallic: load("metallic")?,
        roughness: load("roughness")?,
        normal: load("normal")?,
        depth: load("depth")?,
        mask,
    })
}

pub fn save_intrinsics_dir(dir: &Path, set: &IntrinsicSet) -> Result<()> {
    let maps = [&set.albedo, &set.metallic, &set.roughness, &set.normal, &set.depth, &set.mask];
    for (name, m) in MAP_FILES[1..].iter().zip(maps) {
        write_map(&dir.join(format!("{name}.dnt")), m)?;
    }
    Ok(())
}

pub fn load_sample_dir(dir: &Path) -> Result<Sample> {
    let image = read_map(&dir.join("image.dnt"))?;
    let intrinsics = load_intrinsics_dir(dir)?;
    let scene_path = dir.join("scene.json");
    let text = std::fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
    let scene = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: Some(scene_path),
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok(Sample {
        image,
        intrinsics,
        scene,
    })
}
