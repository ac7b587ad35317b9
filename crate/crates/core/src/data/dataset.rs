//! On-disk datasets: `manifest.txt`, `vocab.txt` and `samples/NNNNNN.bin`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{gen_sample, Sample, Scene};
use super::vocab::Vocab;
use crate::checkpoint::{write_atomic, TensorFile};
use crate::error::{Error, Result};
use crate::model::MaskTarget;
use crate::rng::Purpose;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn purpose(self) -> Purpose {
        match self {
            Split::Train => Purpose::SceneTrain,
            Split::Val => Purpose::SceneVal,
            Split::Test => Purpose::SceneTest,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub file: String,
    pub tasks: Vec<String>,
    pub split: Split,
    pub scene: Scene,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub side: usize,
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Samples generated in memory, exactly as [`gen_dataset`] would
    /// write them.
    pub fn generate(n: usize, seed: u64, split: Split, side: usize) -> Self {
        let vocab = Vocab::default();
        let samples = (0..n)
            .into_par_iter()
            .map(|i| gen_sample(seed, split.purpose(), i as u64, side, &vocab))
            .collect();
        Self {
            split,
            side,
            vocab,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        }
        let vocab_path = dir.join(VOCAB);
        let vocab = Vocab::from_text(&fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?)?;
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let records: Vec<ManifestRecord> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", manifest.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        let Some(first) = records.first() else {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        };
        let (split, side) = (first.split, first.scene.side);
        let samples = records
            .par_iter()
            .map(|r| {
                if r.split != split || r.scene.side != side {
                    return Err(Error::Format(format!("record {} disagrees on split or side", r.id)));
                }
                let file = TensorFile::read(&dir.join(&r.file))?;
                decode_sample(&file, r.scene.clone())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            split,
            side,
            vocab,
            samples,
        })
    }
}

fn ids_tensor(ids: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![ids.len()], ids.iter().map(|&i| i as f32).collect()).expect("non-empty ids")
}

fn tensor_ids(t: &Tensor<f32>) -> Vec<usize> {
    t.data().iter().map(|&x| x as usize).collect()
}

pub fn encode_sample(s: &Sample) -> TensorFile {
    let mut tensors = vec![
        ("image".to_string(), s.image.clone()),
        ("depth".to_string(), s.depth.clone()),
        ("classes".to_string(), s.classes.clone()),
        ("caption".to_string(), ids_tensor(&s.caption)),
    ];
    for (i, t) in s.instances.iter().enumerate() {
        tensors.push((format!("mask.{i}"), t.mask.clone()));
        tensors.push((format!("phrase.{i}"), ids_tensor(&t.phrase)));
    }
    TensorFile {
        tensors,
        fingerprint: String::new(),
    }
}

pub fn decode_sample(f: &TensorFile, scene: Scene) -> Result<Sample> {
    let instances = (0..scene.objects.len())
        .map(|i| {
            Ok(MaskTarget {
                phrase: tensor_ids(f.get(&format!("phrase.{i}"))?),
                mask: f.get(&format!("mask.{i}"))?.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Sample {
        image: f.get("image")?.clone(),
        depth: f.get("depth")?.clone(),
        classes: f.get("classes")?.clone(),
        caption: tensor_ids(f.get("caption")?),
        instances,
        scene,
    })
}

/// Generates `n` samples into `dir`. Returns the manifest path.
pub fn gen_dataset(dir: &Path, n: usize, seed: u64, split: Split, side: usize) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::config("data.samples", "must be >= 1"));
    }
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let data = Dataset::generate(n, seed, split, side);
    let records = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let file = format!("samples/{i:06}.bin");
            encode_sample(s).write(&dir.join(&file))?;
            Ok(ManifestRecord {
                id: i,
                file,
                tasks: vec!["cap".into(), "depth".into(), "seg".into()],
                split,
                scene: s.scene.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("serializable record"));
        text.push('\n');
    }
    write_atomic(&dir.join(VOCAB), data.vocab.to_text().as_bytes())?;
    let manifest = dir.join(MANIFEST);
    write_atomic(&manifest, text.as_bytes())?;
    Ok(manifest)
}
