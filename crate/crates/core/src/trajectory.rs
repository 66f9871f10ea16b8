//! Stored trajectories and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{ContainerError, Error, MeshError};
use crate::graph::GraphConfig;
use crate::mesh::{FrameState, Mesh};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mesh: Mesh,
    pub kappa: f64,
    /// Time between stored frames.
    pub dt: f64,
    pub frames: Vec<FrameState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames share the mesh node count and hardening never decreases.
    pub fn validate(&self) -> Result<(), Error> {
        for f in &self.frames {
            f.validate(&self.mesh)?;
        }
        for (t, w) in self.frames.windows(2).enumerate() {
            if let Some(i) = (0..self.mesh.n_nodes()).find(|&i| w[1].hardening[i] < w[0].hardening[i]) {
                return Err(MeshError::Parameter(format!("hardening decreases at node {i} between frames {t} and {}", t + 1)).into());
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container, Error> {
        let mut c = Container::new();
        self.mesh.write_arrays(&mut c)?;
        let t = self.frames.len();
        let n = self.mesh.n_nodes();
        let d = self.mesh.dim();
        let cat = |f: fn(&FrameState) -> &Vec<f64>| -> Vec<f64> {
            self.frames.iter().flat_map(|fr| f(fr).iter().copied()).collect()
        };
        c.push_f64("x", &[t, n, d], cat(|f| &f.positions))?;
        c.push_f64("v", &[t, n, d], cat(|f| &f.velocities))?;
        c.push_f64("alpha", &[t, n], cat(|f| &f.hardening))?;
        c.push_f64("kappa", &[], vec![self.kappa])?;
        c.push_f64("dt", &[], vec![self.dt])?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, Error> {
        let mesh = Mesh::from_container(c)?;
        let (n, d) = (mesh.n_nodes(), mesh.dim());
        let (xs, x) = c.f64("x")?;
        let (_, v) = c.f64("v")?;
        let (_, a) = c.f64("alpha")?;
        let t = xs.first().copied().unwrap_or(0);
        if x.len() != t * n * d || v.len() != t * n * d || a.len() != t * n {
            return Err(ContainerError::Header("trajectory arrays disagree with the mesh".into()).into());
        }
        let frames = (0..t)
            .map(|k| FrameState {
                positions: x[k * n * d..(k + 1) * n * d].to_vec(),
                velocities: v[k * n * d..(k + 1) * n * d].to_vec(),
                hardening: a[k * n..(k + 1) * n].to_vec(),
            })
            .collect();
        Ok(Self {
            mesh,
            kappa: c.f64("kappa")?.1[0],
            dt: c.f64("dt")?.1[0],
            frames,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        self.to_container()?
            .write(path)
            .map_err(|e| wrap_io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let c = Container::read(path).map_err(|e| wrap_io(path, e))?;
        Self::from_container(&c)
    }
}

fn wrap_io(path: &Path, e: ContainerError) -> Error {
    match e {
        ContainerError::Io(source) => Error::io(path, source),
        other => other.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// `impact` or `long_range`.
    pub kind: String,
    pub graph: GraphConfig,
    /// The generating configuration.
    pub config: serde_json::Value,
    pub trajectories: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "mgnt-dataset";

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Schema(format!("{} is not a dataset manifest", path.display())));
        }
        Ok(m)
    }

    pub fn paths(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.trajectories
            .iter()
            .filter(|e| e.split == split)
            .map(|e| dir.join(&e.path))
            .collect()
    }

    pub fn load(&self, dir: &Path, split: Split) -> Result<Vec<Trajectory>, Error> {
        self.paths(dir, split).iter().map(|p| Trajectory::read(p)).collect()
    }
}
