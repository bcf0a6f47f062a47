//! Door datasets: generation with a supervision fraction, and the binary file format.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{
    execute_action, render, sample_candidate_actions, sample_door, Action, DoorKinematics,
    SimError, CAMERA_DISTANCE_RANGE,
};
use crate::diffcore::{Array, RngStream};

pub const DATASET_MAGIC: &[u8; 8] = b"SSNPDS1\0";
pub const DATASET_VERSION: u32 = 1;
/// Bytes before the first record.
pub const HEADER_BYTES: usize = 8 + 6 * 4 + 8 + 8;

// Substream purposes; keys are `[purpose, index]`.
const STREAM_TRAIN_DOOR: u64 = 0;
const STREAM_TEST_DOOR: u64 = 1;
const STREAM_LABEL_SPLIT: u64 = 2;

/// One door: images, actions and (optionally) their rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    /// Hidden ground truth, only for oracle use.
    pub kinematics: DoorKinematics,
    /// `m` images of shape `[H, W]` with values in `[0, 1]`.
    pub images: Vec<Array>,
    pub actions: Vec<Action>,
    pub rewards: Option<Vec<f64>>,
}

impl ObjectRecord {
    pub fn labeled(&self) -> bool {
        self.rewards.is_some()
    }

    /// `(action, reward)` pairs; empty for unlabeled records.
    pub fn pairs(&self) -> Vec<(Action, f64)> {
        match &self.rewards {
            Some(r) => self.actions.iter().copied().zip(r.iter().copied()).collect(),
            None => Vec::new(),
        }
    }
}

/// Header values echoed into every dataset file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub images_per_door: usize,
    pub actions_per_door: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub labeled_frac: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<ObjectRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.labeled()).count()
    }

    /// Check per-record invariants against the header.
    pub fn validate(&self) -> Result<(), SimError> {
        let h = &self.header;
        for (i, r) in self.records.iter().enumerate() {
            let bad = |msg: String| SimError::InvalidDataset(format!("record {i}: {msg}"));
            if r.images.len() != h.images_per_door {
                return Err(bad(format!("{} images, expected {}", r.images.len(), h.images_per_door)));
            }
            if r.actions.len() != h.actions_per_door {
                return Err(bad(format!("{} actions", r.actions.len())));
            }
            for img in &r.images {
                if img.shape() != [h.image_h, h.image_w] {
                    return Err(bad(format!("image shape {:?}", img.shape())));
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(bad("pixel outside [0, 1]".into()));
                }
            }
            if let Some(rw) = &r.rewards {
                if rw.len() != r.actions.len() {
                    return Err(bad(format!("{} rewards for {} actions", rw.len(), r.actions.len())));
                }
                let bound = r.kinematics.handle_radius * PI + 1e-9;
                if rw.iter().any(|&x| !(0.0..=bound).contains(&x)) {
                    return Err(bad("reward outside [0, r*]".into()));
                }
            }
        }
        Ok(())
    }
}

/// Parameters for [`generate_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub train_doors: usize,
    pub test_doors: usize,
    pub images_per_door: usize,
    pub actions_per_door: usize,
    pub image_size: usize,
    pub labeled_frac: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_doors: 800,
            test_doors: 50,
            images_per_door: 10,
            actions_per_door: 10,
            image_size: 32,
            labeled_frac: 0.1,
            seed: 0,
        }
    }
}

fn generate_door(cfg: &GenConfig, rng: &mut RngStream) -> Result<ObjectRecord, SimError> {
    let kinematics = sample_door(rng);
    let images = (0..cfg.images_per_door)
        .map(|_| {
            let angle = rng.uniform_range(0.0, PI);
            let distance = rng.uniform_range(CAMERA_DISTANCE_RANGE.0, CAMERA_DISTANCE_RANGE.1);
            render(&kinematics, angle, distance, cfg.image_size, cfg.image_size)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let actions = sample_candidate_actions(rng, cfg.actions_per_door);
    let rewards = actions.iter().map(|a| execute_action(&kinematics, a)).collect();
    Ok(ObjectRecord {
        kinematics,
        images,
        actions,
        rewards: Some(rewards),
    })
}

/// Generate `(train, test)` datasets.
///
/// Every door draws from its own substream keyed by `(seed, split, index)`,
/// so the doors do not depend on the labeled fraction and generation can be
/// parallel. Exactly `round(k * train_doors)` train doors keep their
/// rewards; test doors are always labeled.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Dataset), SimError> {
    if !(0.0..=1.0).contains(&cfg.labeled_frac) {
        return Err(SimError::InvalidConfig(format!(
            "labeled fraction {} outside [0, 1]",
            cfg.labeled_frac
        )));
    }
    if cfg.images_per_door == 0 || cfg.actions_per_door == 0 || cfg.image_size == 0 {
        return Err(SimError::InvalidConfig(
            "images, actions and image size must be positive".into(),
        ));
    }
    let build = |purpose: u64, count: usize| -> Result<Vec<ObjectRecord>, SimError> {
        (0..count)
            .into_par_iter()
            .map(|i| generate_door(cfg, &mut RngStream::keyed(cfg.seed, &[purpose, i as u64])))
            .collect()
    };
    let mut train = build(STREAM_TRAIN_DOOR, cfg.train_doors)?;
    let test = build(STREAM_TEST_DOOR, cfg.test_doors)?;

    let n_labeled = (cfg.labeled_frac * cfg.train_doors as f64).round() as usize;
    let order = RngStream::keyed(cfg.seed, &[STREAM_LABEL_SPLIT]).permutation(cfg.train_doors);
    for &i in &order[n_labeled..] {
        train[i].rewards = None;
    }
    let header = DatasetHeader {
        images_per_door: cfg.images_per_door,
        actions_per_door: cfg.actions_per_door,
        image_h: cfg.image_size,
        image_w: cfg.image_size,
        labeled_frac: cfg.labeled_frac,
        seed: cfg.seed,
    };
    Ok((
        Dataset {
            header,
            records: train,
        },
        Dataset {
            header: DatasetHeader {
                labeled_frac: 1.0,
                ..header
            },
            records: test,
        },
    ))
}

/// Serialized size of one record.
pub fn record_bytes(header: &DatasetHeader, labeled: bool) -> usize {
    let images = header.images_per_door * header.image_h * header.image_w * 4;
    let actions = header.actions_per_door * 4 * 8;
    let rewards = if labeled { header.actions_per_door * 8 } else { 0 };
    4 * 8 + 1 + 1 + images + actions + rewards
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<(), SimError> {
    let h = &ds.header;
    w.write_all(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        ds.records.len() as u32,
        h.images_per_door as u32,
        h.actions_per_door as u32,
        h.image_h as u32,
        h.image_w as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&h.labeled_frac.to_le_bytes())?;
    w.write_all(&h.seed.to_le_bytes())?;
    let mut buf = Vec::new();
    for r in &ds.records {
        buf.clear();
        let k = &r.kinematics;
        for v in [k.hinge[0], k.hinge[1], k.width, k.handle_radius] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(k.open_sign as u8);
        buf.push(u8::from(r.labeled()));
        for img in &r.images {
            for &p in img.data() {
                buf.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        for a in &r.actions {
            for v in a.to_array() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(rw) = &r.rewards {
            for v in rw {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset, SimError> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(SimError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(SimError::Version(version));
    }
    let count = read_u32(r)? as usize;
    let header = DatasetHeader {
        images_per_door: read_u32(r)? as usize,
        actions_per_door: read_u32(r)? as usize,
        image_h: read_u32(r)? as usize,
        image_w: read_u32(r)? as usize,
        labeled_frac: read_f64(r)?,
        seed: read_u64(r)?,
    };
    let pixels = header.image_h * header.image_w;
    if pixels == 0 || pixels > 1 << 24 || header.images_per_door == 0 || header.actions_per_door == 0 {
        return Err(SimError::Corrupt(format!("implausible header {header:?}")));
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let hinge = [read_f64(r)?, read_f64(r)?];
        let width = read_f64(r)?;
        let handle_radius = read_f64(r)?;
        let open_sign = read_u8(r)? as i8;
        let kinematics = DoorKinematics::new(hinge, open_sign, width, handle_radius)
            .map_err(|e| SimError::Corrupt(e.to_string()))?;
        let labeled = match read_u8(r)? {
            0 => false,
            1 => true,
            x => return Err(SimError::Corrupt(format!("labeled flag {x}"))),
        };
        let mut images = Vec::with_capacity(header.images_per_door);
        let mut raw = vec![0u8; pixels * 4];
        for _ in 0..header.images_per_door {
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            images.push(Array::new(vec![header.image_h, header.image_w], data).expect("sized"));
        }
        let mut actions = Vec::with_capacity(header.actions_per_door);
        for _ in 0..header.actions_per_door {
            let v = [read_f64(r)?, read_f64(r)?, read_f64(r)?, read_f64(r)?];
            actions.push(Action {
                hinge_guess: [v[0], v[1]],
                radius_guess: v[2],
                goal_angle: v[3],
            });
        }
        let rewards = if labeled {
            Some(
                (0..header.actions_per_door)
                    .map(|_| read_f64(r))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        records.push(ObjectRecord {
            kinematics,
            images,
            actions,
            rewards,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(SimError::Corrupt("trailing bytes".into()));
    }
    Ok(Dataset { header, records })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), SimError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SimError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut r)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), SimError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SimError::Truncated
        } else {
            SimError::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, SimError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, SimError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, SimError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, SimError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
