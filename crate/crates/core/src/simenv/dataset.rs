//! On-disk datasets: `manifest.json` plus one binary blob per episode.
//!
//! Episode blobs hold the rendered observations (`u8 [T+1, H, W, 3]`), the
//! actions (`f32 [T, 3]`, empty when the dataset is action-free) and the
//! world trajectory in `f32` so tracks can be re-derived on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::expert::expert_episode;
use super::render::Image;
use super::world::{Action, ColorId, EnvConfig, Goal, ObjectState, WorldParams, WorldState};
use super::Episode;
use crate::blob::{self, ArrayData, NamedArray};
use crate::seed::{derive_seed, stream};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const EPISODE_MAGIC: &[u8; 8] = b"TWAMEPS1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Attempts per episode slot before giving up on the expert.
const MAX_RESAMPLES: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub action_masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: EnvConfig,
    pub episode_count: usize,
    pub action_free: bool,
    pub base_seed: u64,
    pub episodes: Vec<EpisodeEntry>,
    /// Episode seeds whose expert rollout failed and was replaced.
    pub resampled_seeds: Vec<u64>,
}

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

fn episode_file(i: usize) -> String {
    format!("episode_{i:05}.bin")
}

/// Generates `n_episodes` successful expert episodes into `dir`.
pub fn generate_dataset(
    config: &EnvConfig,
    n_episodes: usize,
    action_free: bool,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_episodes);
    let mut resampled = Vec::new();
    for i in 0..n_episodes {
        let mut chosen = None;
        for attempt in 0..MAX_RESAMPLES {
            let ep_seed = derive_seed(seed, &[stream::EPISODE, i as u64, attempt]);
            let ep = expert_episode(config, ep_seed)?;
            if ep.success {
                chosen = Some(ep);
                break;
            }
            log::warn!("expert failed on episode seed {ep_seed}; resampling slot {i}");
            resampled.push(ep_seed);
        }
        let mut ep = chosen.ok_or_else(|| {
            Error::Data(format!("expert failed {MAX_RESAMPLES} times in a row for slot {i}"))
        })?;
        if action_free {
            ep.actions.clear();
            ep.action_free = true;
        }
        let file = episode_file(i);
        blob::write_atomic(&dir.join(&file), &encode_episode(&ep))?;
        entries.push(EpisodeEntry {
            file,
            seed: ep.seed,
            success: ep.success,
            steps: ep.states.len() - 1,
            action_masked: action_free,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: config.clone(),
        episode_count: n_episodes,
        action_free,
        base_seed: seed,
        episodes: entries,
        resampled_seeds: resampled,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    blob::write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported dataset format {}",
            path.display(),
            m.format_version
        )));
    }
    if m.episodes.len() != m.episode_count {
        return Err(Error::Data(format!("{}: episode count mismatch", path.display())));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut ep = decode_episode(&bytes, &manifest.config)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        ep.seed = entry.seed;
        ep.action_free = entry.action_masked;
        episodes.push(ep);
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        episodes,
    })
}

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let t1 = ep.states.len();
    let res = ep.observations[0].width;
    let n_obj = ep.states[0].objects.len();
    let mut obs = Vec::with_capacity(t1 * res * res * 3);
    for o in &ep.observations {
        obs.extend_from_slice(&o.data);
    }
    let actions: Vec<f32> = ep
        .actions
        .iter()
        .flat_map(|a| a.to_array().map(|v| v as f32))
        .collect();
    let mut gripper = Vec::with_capacity(t1 * 4);
    let mut objects = Vec::with_capacity(t1 * n_obj * 2);
    for s in &ep.states {
        gripper.extend_from_slice(&[
            s.gripper[0] as f32,
            s.gripper[1] as f32,
            s.grip_closed as u8 as f32,
            s.held_object.map_or(-1.0, |h| h as f32),
        ]);
        for o in &s.objects {
            objects.extend_from_slice(&[o.center[0] as f32, o.center[1] as f32]);
        }
    }
    let s0 = &ep.states[0];
    let attrs: Vec<f32> = s0
        .objects
        .iter()
        .flat_map(|o| [o.radius as f32, o.z_order as f32, o.color.index() as f32])
        .collect();
    let p = s0.params;
    let arrays = vec![
        NamedArray::new("observations", &[t1, res, res, 3], ArrayData::U8(obs)),
        NamedArray::new("actions", &[ep.actions.len(), 3], ArrayData::F32(actions)),
        NamedArray::new("gripper", &[t1, 4], ArrayData::F32(gripper)),
        NamedArray::new("objects", &[t1, n_obj, 2], ArrayData::F32(objects)),
        NamedArray::new("object_attrs", &[n_obj, 3], ArrayData::F32(attrs)),
        NamedArray::new(
            "goal",
            &[3],
            ArrayData::F32(vec![s0.goal.center[0] as f32, s0.goal.center[1] as f32, s0.goal.radius as f32]),
        ),
        NamedArray::new(
            "world_params",
            &[4],
            ArrayData::F32(vec![
                p.gripper_radius as f32,
                p.grasp_radius as f32,
                p.max_delta as f32,
                p.gripper_contact as u8 as f32,
            ]),
        ),
        NamedArray::new("success", &[1], ArrayData::U8(vec![ep.success as u8])),
    ];
    blob::encode(EPISODE_MAGIC, &arrays)
}

fn f32s<'a>(arrays: &'a [NamedArray], name: &str, shape_len: usize) -> Result<(&'a [usize], &'a [f32])> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Data(format!("missing array {name}")))?;
    if a.shape.len() != shape_len {
        return Err(Error::Data(format!("array {name} has rank {}", a.shape.len())));
    }
    match &a.data {
        ArrayData::F32(v) => Ok((&a.shape, v)),
        other => Err(Error::Data(format!("array {name} has dtype {}", other.dtype_name()))),
    }
}

fn u8s<'a>(arrays: &'a [NamedArray], name: &str) -> Result<(&'a [usize], &'a [u8])> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Data(format!("missing array {name}")))?;
    match &a.data {
        ArrayData::U8(v) => Ok((&a.shape, v)),
        other => Err(Error::Data(format!("array {name} has dtype {}", other.dtype_name()))),
    }
}

pub fn decode_episode(bytes: &[u8], config: &EnvConfig) -> Result<Episode> {
    let arrays = blob::decode(EPISODE_MAGIC, bytes)?;
    let (oshape, obs) = u8s(&arrays, "observations")?;
    if oshape.len() != 4 || oshape[3] != 3 || oshape[1] != oshape[2] {
        return Err(Error::Data(format!("bad observation shape {oshape:?}")));
    }
    let (t1, res) = (oshape[0], oshape[1]);
    let (ashape, actions) = f32s(&arrays, "actions", 2)?;
    let (gshape, gripper) = f32s(&arrays, "gripper", 2)?;
    let (objshape, objects) = f32s(&arrays, "objects", 3)?;
    let (attr_shape, attrs) = f32s(&arrays, "object_attrs", 2)?;
    let (_, goal) = f32s(&arrays, "goal", 1)?;
    let (_, wp) = f32s(&arrays, "world_params", 1)?;
    let (_, success) = u8s(&arrays, "success")?;
    let n_obj = attr_shape[0];
    if gshape != [t1, 4] || objshape != [t1, n_obj, 2] || goal.len() != 3 || wp.len() != 4 || success.len() != 1 {
        return Err(Error::Data("inconsistent trajectory shapes".into()));
    }
    if ashape[1] != 3 || !(ashape[0] == 0 || ashape[0] + 1 == t1) {
        return Err(Error::Data(format!("bad action shape {ashape:?} for {t1} frames")));
    }
    let params = WorldParams {
        gripper_radius: wp[0] as f64,
        grasp_radius: wp[1] as f64,
        max_delta: wp[2] as f64,
        gripper_contact: wp[3] != 0.0,
    };
    let mut states = Vec::with_capacity(t1);
    for t in 0..t1 {
        let g = &gripper[t * 4..t * 4 + 4];
        let objs = (0..n_obj)
            .map(|k| {
                let a = &attrs[k * 3..k * 3 + 3];
                let c = &objects[(t * n_obj + k) * 2..(t * n_obj + k) * 2 + 2];
                Ok(ObjectState {
                    center: [c[0] as f64, c[1] as f64],
                    radius: a[0] as f64,
                    z_order: a[1] as i32,
                    color: ColorId::from_index(a[2] as u8)
                        .ok_or_else(|| Error::Data(format!("unknown color id {}", a[2])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        states.push(WorldState {
            gripper: [g[0] as f64, g[1] as f64],
            grip_closed: g[2] != 0.0,
            held_object: (g[3] >= 0.0).then_some(g[3] as usize),
            objects: objs,
            goal: Goal {
                center: [goal[0] as f64, goal[1] as f64],
                radius: goal[2] as f64,
            },
            step_index: t,
            params,
        });
    }
    let frame = res * res * 3;
    let observations = (0..t1)
        .map(|t| Image {
            width: res,
            height: res,
            data: obs[t * frame..(t + 1) * frame].to_vec(),
        })
        .collect();
    let actions = actions
        .chunks(3)
        .map(|a| Action::new(a[0] as f64, a[1] as f64, a[2] as f64))
        .collect::<Vec<_>>();
    let action_free = actions.is_empty() && t1 > 1;
    Ok(Episode {
        observations,
        actions,
        states,
        task: config.task,
        seed: 0,
        success: success[0] != 0,
        action_free,
    })
}
