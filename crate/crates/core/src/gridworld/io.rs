// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON scene manifests.
//!
//! Line 1 is a header carrying the schema version and the generation
//! parameters; every following line is one scene or one control pair.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenParams, Scene, ScenePair};
use crate::error::{Error, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneRecord {
    Header {
        schema_version: u32,
        params: GenParams,
    },
    Scene {
        id: usize,
        scene: Scene,
    },
    Pair {
        id: usize,
        pair: ScenePair,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneFile {
    pub params: GenParams,
    pub scenes: Vec<Scene>,
    pub pairs: Vec<ScenePair>,
}

impl SceneFile {
    pub fn to_lines(&self) -> Result<String> {
        let mut out = String::new();
        let header = SceneRecord::Header {
            schema_version: SCENE_SCHEMA_VERSION,
            params: self.params.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for (id, scene) in self.scenes.iter().enumerate() {
            let r = SceneRecord::Scene { id, scene: scene.clone() };
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        for (id, pair) in self.pairs.iter().enumerate() {
            let r = SceneRecord::Pair { id, pair: pair.clone() };
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty scene file".into()))??;
        let params = match serde_json::from_str(&first)? {
            SceneRecord::Header {
                schema_version,
                params,
            } => {
                if schema_version != SCENE_SCHEMA_VERSION {
                    return Err(Error::Format(format!(
                        "scene schema {schema_version}, expected {SCENE_SCHEMA_VERSION}"
                    )));
                }
                params
            }
            _ => return Err(Error::Format("scene file must start with a header".into())),
        };
        let mut file = SceneFile {
            params,
            ..Default::default()
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                SceneRecord::Scene { scene, .. } => file.scenes.push(scene),
                SceneRecord::Pair { pair, .. } => file.pairs.push(pair),
                SceneRecord::Header { .. } => {
                    return Err(Error::Format(format!("second header at line {}", n + 2)))
                }
            }
        }
        Ok(file)
    }
}

pub fn write_scene_file(path: &Path, file: &SceneFile) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(file.to_lines()?.as_bytes())?;
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<SceneFile> {
    SceneFile::from_reader(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::World;

    #[test]
    fn manifest_round_trip_is_exact() {
        let w = World::new(GenParams::default()).unwrap();
        let scenes: Vec<_> = (0..20).map(|s| w.generate_scene(s).unwrap()).collect();
        let pairs = vec![w
            .make_control_pair(&scenes[0], scenes[0].objects[0].class_id, 4)
            .unwrap()];
        let file = SceneFile {
            params: w.params.clone(),
            scenes,
            pairs,
        };
        let text = file.to_lines().unwrap();
        assert_eq!(text.lines().count(), 22);
        let back = SceneFile::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_lines().unwrap(), text);
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let text = "{\"record\":\"header\",\"schema_version\":99,\"params\":{}}\n";
        assert!(matches!(SceneFile::from_reader(text.as_bytes()), Err(Error::Format(_))));
    }
}
