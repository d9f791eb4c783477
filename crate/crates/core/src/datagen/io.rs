//! Dataset file format.
//!
//! Little-endian binary:
//!
//! ```text
//! magic "RMDS" | version u32 | n_robots u32 | n_steps u32 | n_u u32 | n_y u32 | dt f64
//! per robot:
//!     robot index u32
//!     per link: length, mass, com offset, inertia, damping, stiffness,
//!               rest position, torque limit, joint limit, initial q   (f64 each)
//!     gravity, floor height, self-collision clearance, main frequency (f64 each)
//!     u: f32[n_steps * n_u] row-major
//!     y: f32[n_steps * n_y] row-major
//! crc32 u32 over every byte after the magic
//! ```
//!
//! A JSON manifest sits next to the binary file (see [`manifest_path`]).

use std::fs;
use std::path::{Path, PathBuf};

use crate::arm::ArmModel;
use crate::error::{Error, Result};

use super::{Dataset, Manifest, Record, RobotParams, Trajectory};

pub const DATASET_MAGIC: &[u8; 4] = b"RMDS";
pub const DATASET_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 5 * 4 + 8;
const PER_LINK_FIELDS: usize = 10;
const GLOBAL_FIELDS: usize = 4;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn params_block_len(n_links: usize) -> usize {
    4 + 8 * (PER_LINK_FIELDS * n_links + GLOBAL_FIELDS)
}

fn record_len(n_steps: usize, n_u: usize, n_y: usize) -> usize {
    params_block_len(n_u) + 4 * n_steps * (n_u + n_y)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let n_steps = ds.n_steps();
    let (n_u, n_y) = (ds.n_u(), ds.n_y());
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * record_len(n_steps, n_u, n_y) + 4);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.len() as u32, n_steps as u32, n_u as u32, n_y as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ds.manifest.job.dt.to_le_bytes());
    for rec in &ds.records {
        let t = &rec.trajectory;
        if t.len() != n_steps || t.n_u != n_u || t.n_y != n_y {
            return Err(Error::Data(format!(
                "robot {} has a {}x({}+{}) trajectory, expected {n_steps}x({n_u}+{n_y})",
                rec.params.index,
                t.len(),
                t.n_u,
                t.n_y
            )));
        }
        let p = &rec.params;
        let m = &p.model;
        buf.extend_from_slice(&p.index.to_le_bytes());
        for i in 0..n_u {
            for v in [
                m.link_lengths[i],
                m.link_masses[i],
                m.com_offsets[i],
                m.link_inertias[i],
                m.joint_damping[i],
                m.joint_stiffness[i],
                m.rest_positions[i],
                m.torque_limits[i],
                m.joint_position_limits[i],
                p.initial_q[i],
            ] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in [m.gravity, m.floor_height, m.self_collision_clearance, p.main_frequency] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in t.u.iter().chain(&t.y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes)?;
    let manifest = serde_json::to_vec_pretty(&ds.manifest)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| f32::from_le_bytes(self.take())).collect()
    }
}

/// Decode the binary payload into records plus its `dt`.
pub fn decode_dataset(bytes: &[u8]) -> Result<(f64, usize, Vec<Record>)> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing RMDS magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n_robots = r.u32() as usize;
    let n_steps = r.u32() as usize;
    let n_u = r.u32() as usize;
    let n_y = r.u32() as usize;
    let dt = r.f64();
    if n_u == 0 || n_y != crate::arm::output_dim(n_u) {
        return Err(Error::Format(format!("inconsistent channel counts n_u={n_u}, n_y={n_y}")));
    }
    let expected = HEADER_LEN + n_robots * record_len(n_steps, n_u, n_y) + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[4..expected - 4]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut records = Vec::with_capacity(n_robots);
    for _ in 0..n_robots {
        let index = r.u32();
        let mut fields = vec![[0.0f64; PER_LINK_FIELDS]; n_u];
        for link in fields.iter_mut() {
            for v in link.iter_mut() {
                *v = r.f64();
            }
        }
        let col = |k: usize| fields.iter().map(|f| f[k]).collect::<Vec<f64>>();
        let (gravity, floor_height, clearance, main_frequency) = (r.f64(), r.f64(), r.f64(), r.f64());
        let model = ArmModel {
            link_lengths: col(0),
            link_masses: col(1),
            com_offsets: col(2),
            link_inertias: col(3),
            joint_damping: col(4),
            joint_stiffness: col(5),
            rest_positions: col(6),
            gravity,
            torque_limits: col(7),
            joint_position_limits: col(8),
            floor_height,
            self_collision_clearance: clearance,
        };
        let params = RobotParams {
            index,
            initial_q: col(9),
            model,
            main_frequency,
        };
        let u = r.f32s(n_steps * n_u);
        let y = r.f32s(n_steps * n_y);
        records.push(Record {
            params,
            trajectory: Trajectory { dt, n_u, n_y, u, y },
        });
    }
    Ok((dt, n_steps, records))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (dt, n_steps, records) = decode_dataset(&bytes)?;
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    let kept: Vec<u32> = records.iter().map(|r| r.params.index).collect();
    if manifest.kept != kept {
        return Err(Error::Data("manifest robot list does not match the dataset file".into()));
    }
    if manifest.job.timesteps != n_steps || manifest.job.dt.to_bits() != dt.to_bits() {
        return Err(Error::Data("manifest job does not match the dataset header".into()));
    }
    if manifest.job.n_u() != records.first().map(|r| r.trajectory.n_u).unwrap_or(manifest.job.n_u()) {
        return Err(Error::Data("manifest arm topology does not match the dataset file".into()));
    }
    Ok(Dataset { records, manifest })
}
