use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::templates::{generate_dialogue, question_lexicon, Dialogue, TURNS_PER_DIALOGUE};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng;
use crate::scene::{build_universe, generate_scene, AttributeUniverse, SceneSpec};
use crate::state::StateVocabulary;

/// Seed offsets keeping train/val/test scene and dialogue seeds disjoint.
pub const SPLIT_SEED_STRIDE: u64 = 1_000_000;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub num_classes: usize,
    pub num_frames: u32,
    pub dialogues: BTreeMap<String, usize>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl DataGenConfig {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        let mut dialogues = BTreeMap::new();
        dialogues.insert("train".to_string(), train);
        dialogues.insert("val".to_string(), val);
        dialogues.insert("test".to_string(), test);
        DataGenConfig {
            num_classes: crate::scene::DEFAULT_CLASS_COUNT,
            num_frames: 300,
            dialogues,
            min_objects: 4,
            max_objects: 8,
            seed: 13,
        }
    }

    fn split_seed(&self, split: &str) -> u64 {
        let offset = SPLITS
            .iter()
            .position(|s| *s == split)
            .expect("known split name") as u64;
        self.seed + offset * SPLIT_SEED_STRIDE
    }
}

/// One generated split: scenes keyed by id plus the dialogues over them.
#[derive(Debug, Clone)]
pub struct Split {
    pub dialogues: Vec<Dialogue>,
    pub scenes: Vec<SceneSpec>,
}

/// Generates one split: one scene per dialogue, deterministic in `seed`.
pub fn generate_split(
    universe: &AttributeUniverse,
    num_dialogues: usize,
    num_frames: u32,
    min_objects: usize,
    max_objects: usize,
    seed: u64,
) -> Result<Split> {
    if num_dialogues < 1 {
        return Err(Error::generation("num_dialogues must be at least 1"));
    }
    let results = parallel::map_indexed(num_dialogues, |i| -> Result<(SceneSpec, Dialogue)> {
        let scene_seed = rng::derive_seed(seed, "scene-seed", &[i as u64]);
        let mut count_rng = rng::stream(seed, "object-count", &[i as u64]);
        let num_objects = count_rng.random_range(min_objects..=max_objects);
        let scene = generate_scene(universe, num_frames, num_objects, scene_seed)?;
        let dialogue_seed = rng::derive_seed(seed, "dialogue-seed", &[i as u64]);
        let dialogue = generate_dialogue(&scene, universe, dialogue_seed)?;
        Ok((scene, dialogue))
    });
    let mut scenes = Vec::with_capacity(num_dialogues);
    let mut dialogues = Vec::with_capacity(num_dialogues);
    for r in results {
        let (scene, dialogue) = r?;
        scenes.push(scene);
        dialogues.push(dialogue);
    }
    Ok(Split { dialogues, scenes })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DataGenConfig,
    pub counts: BTreeMap<String, SplitCounts>,
    pub vocab_size: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub dialogues: usize,
    pub turns: usize,
}

/// A dataset on disk: `scenes/`, one JSONL per split, `vocab.txt`, and
/// `manifest.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub universe: AttributeUniverse,
    pub vocab: StateVocabulary,
    pub manifest: DatasetManifest,
    pub scenes: HashMap<String, SceneSpec>,
    pub splits: BTreeMap<String, Vec<Dialogue>>,
}

impl Dataset {
    pub fn num_frames(&self) -> u32 {
        self.manifest.config.num_frames
    }

    pub fn split(&self, name: &str) -> Result<&[Dialogue]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::config(format!("unknown split {name:?}")))
    }

    pub fn scene(&self, scene_id: &str) -> Result<&SceneSpec> {
        self.scenes
            .get(scene_id)
            .ok_or_else(|| Error::config(format!("unknown scene {scene_id:?}")))
    }
}

/// Generates and writes a dataset directory.
pub fn write_dataset(dir: &Path, cfg: &DataGenConfig) -> Result<DatasetManifest> {
    let universe = build_universe(cfg.num_classes)?;
    std::fs::create_dir_all(dir.join("scenes"))?;

    let mut counts = BTreeMap::new();
    let mut hasher = Sha256::new();

    for split_name in SPLITS {
        let n = *cfg.dialogues.get(split_name).unwrap_or(&0);
        if n == 0 {
            continue;
        }
        let split = generate_split(
            &universe,
            n,
            cfg.num_frames,
            cfg.min_objects,
            cfg.max_objects,
            cfg.split_seed(split_name),
        )?;
        for scene in &split.scenes {
            let path = dir.join("scenes").join(format!("{}.json", scene.scene_id));
            std::fs::write(&path, serde_json::to_string_pretty(scene)?)?;
        }
        let jsonl_path = dir.join(format!("{split_name}.jsonl"));
        let mut file = std::fs::File::create(&jsonl_path)?;
        for dialogue in &split.dialogues {
            let line = serde_json::to_string(dialogue)?;
            writeln!(file, "{line}")?;
        }
        hasher.update(std::fs::read(&jsonl_path)?);
        counts.insert(
            split_name.to_string(),
            SplitCounts {
                dialogues: split.dialogues.len(),
                turns: split.dialogues.len() * TURNS_PER_DIALOGUE,
            },
        );
    }

    let vocab = StateVocabulary::build(&universe, cfg.num_frames, &question_lexicon());
    vocab.save(&dir.join("vocab.txt"))?;
    hasher.update(vocab.to_text().as_bytes());

    let checksum = {
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    };
    let manifest = DatasetManifest {
        config: cfg.clone(),
        counts,
        vocab_size: vocab.len(),
        checksum,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let universe = build_universe(manifest.config.num_classes)?;
    let vocab = StateVocabulary::load(&dir.join("vocab.txt"))?;

    let mut scenes = HashMap::new();
    for entry in std::fs::read_dir(dir.join("scenes"))? {
        let path: PathBuf = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let scene: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            scenes.insert(scene.scene_id.clone(), scene);
        }
    }

    let mut splits = BTreeMap::new();
    for split_name in SPLITS {
        let path = dir.join(format!("{split_name}.jsonl"));
        if !path.exists() {
            continue;
        }
        let reader = BufReader::new(std::fs::File::open(&path)?);
        let mut dialogues = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            dialogues.push(serde_json::from_str::<Dialogue>(&line)?);
        }
        splits.insert(split_name.to_string(), dialogues);
    }

    Ok(Dataset {
        universe,
        vocab,
        manifest,
        scenes,
        splits,
    })
}
