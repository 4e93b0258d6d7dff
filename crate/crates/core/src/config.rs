//! Run configuration: one TOML file describing the template, graph, imaging,
//! trajectory, simulation and training of an experiment.
//!
//! Unknown keys are rejected with their location. Relative paths are resolved
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::data::{
    generate_trajectory, helix_hairpin, helix_hbond_edges, read_pdb_calpha, HairpinLayout, NoiseSpec, PdbChain,
    ProfileTable, SimulationSpec, TrajectorySpec,
};
use crate::error::{Error, Result};
use crate::geom::{Conformation, Vec3};
use crate::graph::{build_graph, read_edge_list, ProteinGraph};
use crate::imaging::{electron_wavelength, CtfParams, Envelope, ForwardModel, ImageGrid};
use crate::train::{DecoderSpec, PoseMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateConfig {
    /// Synthetic two-helix hairpin with `residues` Cα atoms.
    Hairpin { residues: usize },
    /// Cα trace of a PDB file.
    Pdb {
        path: PathBuf,
        #[serde(default)]
        chain: Option<char>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Add contact edges between residues closer than this (Å).
    #[serde(default)]
    pub contact_cutoff: Option<f64>,
    /// Add the i→i+4 helix edges of a hairpin template.
    #[serde(default)]
    pub helix_hbonds: bool,
    /// Extra edges from a 1-based edge-list file.
    #[serde(default)]
    pub edge_list: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtfConfig {
    pub cs_mm: f64,
    pub defocus_um: f64,
    pub amplitude_contrast: f64,
    pub voltage_kv: f64,
    #[serde(default = "no_envelope")]
    pub envelope: Envelope,
}

fn no_envelope() -> Envelope {
    Envelope::None
}

impl CtfConfig {
    pub fn params(&self) -> Result<CtfParams> {
        if !(self.voltage_kv > 0.0) {
            return Err(Error::Config(format!("voltage_kv must be positive, got {}", self.voltage_kv)));
        }
        let p = CtfParams {
            cs_mm: self.cs_mm,
            defocus_um: self.defocus_um,
            amplitude_contrast: self.amplitude_contrast,
            wavenumber: 2.0 * std::f64::consts::PI / electron_wavelength(self.voltage_kv),
            envelope: self.envelope,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingConfig {
    pub side: usize,
    pub pixel_size: f64,
    /// Omit for pure projections.
    #[serde(default)]
    pub ctf: Option<CtfConfig>,
    #[serde(default)]
    pub profile: ProfileTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryConfig {
    /// Rotation of the residues after `pivot` (default: middle of a hairpin loop).
    Hinge {
        max_angle: f64,
        count: usize,
        #[serde(default = "default_axis")]
        axis: Vec3,
        #[serde(default)]
        pivot: Option<usize>,
    },
    /// Blend from the template to the Cα trace in `end`.
    Interpolate { end: PathBuf, count: usize },
}

fn default_axis() -> Vec3 {
    [0.0, -1.0, 0.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub images_per_frame: usize,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_stack")]
    pub stack: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            stack: default_stack(),
            out_dir: default_out(),
        }
    }
}

fn default_stack() -> PathBuf {
    "stack.cgs".into()
}

fn default_out() -> PathBuf {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the simulation; training has its own seed in `[train]`.
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    pub template: TemplateConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    pub imaging: ImagingConfig,
    #[serde(default)]
    pub trajectory: Option<TrajectoryConfig>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Named alternative decoders selectable at training time, e.g. `[decoders.mlp]`.
    #[serde(default)]
    pub decoders: BTreeMap<String, DecoderSpec>,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Template coordinates with the residue names and hairpin layout when known.
#[derive(Clone, Debug)]
pub struct Template {
    pub coords: Conformation,
    pub residue_names: Option<Vec<String>>,
    pub layout: Option<HairpinLayout>,
}

impl RunConfig {
    /// Parses TOML; `origin` labels diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TemplateConfig::Pdb { path, .. } = &mut self.template {
            fix(path);
        }
        if let Some(p) = &mut self.graph.edge_list {
            fix(p);
        }
        if let Some(TrajectoryConfig::Interpolate { end, .. }) = &mut self.trajectory {
            fix(end);
        }
        fix(&mut self.paths.stack);
        fix(&mut self.paths.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let TemplateConfig::Hairpin { residues } = self.template {
            if residues < 14 {
                return bad(format!("template.residues must be at least 14, got {residues}"));
            }
        }
        ImageGrid::new(self.imaging.side, self.imaging.pixel_size).map_err(|e| Error::Config(format!("imaging: {e}")))?;
        if let Some(c) = &self.imaging.ctf {
            c.params().map_err(|e| Error::Config(format!("imaging.ctf: {e}")))?;
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.graph.helix_hbonds && !matches!(self.template, TemplateConfig::Hairpin { .. }) {
            return bad("graph.helix_hbonds needs a hairpin template".into());
        }
        if let Some(s) = &self.simulation {
            if s.images_per_frame == 0 {
                return bad("simulation.images_per_frame must be at least 1".into());
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, independent of TOML layout and comments.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("plain data serializes"))
    }

    pub fn template(&self) -> Result<Template> {
        match &self.template {
            TemplateConfig::Hairpin { residues } => {
                let (coords, layout) = helix_hairpin(*residues)?;
                Ok(Template {
                    coords,
                    residue_names: None,
                    layout: Some(layout),
                })
            }
            TemplateConfig::Pdb { path, chain } => {
                let sel = chain.map_or(PdbChain::First, PdbChain::Id);
                let (coords, names) = read_pdb_calpha(path, sel)?;
                Ok(Template {
                    coords: coords.centered(),
                    residue_names: Some(names),
                    layout: None,
                })
            }
        }
    }

    pub fn graph(&self, template: &Template) -> Result<ProteinGraph> {
        let mut extra: Vec<(usize, usize)> = Vec::new();
        if self.graph.helix_hbonds {
            let layout = template
                .layout
                .as_ref()
                .ok_or_else(|| Error::Config("graph.helix_hbonds needs a hairpin template".into()))?;
            extra.extend(helix_hbond_edges(layout));
        }
        if let Some(p) = &self.graph.edge_list {
            extra.extend(read_edge_list(p)?);
        }
        let x = &template.coords;
        let mut g = build_graph(x, Some(&extra), None)?;
        if let Some(cutoff) = self.graph.contact_cutoff {
            let contacts = build_graph(x, None, Some(cutoff))?;
            let edges: Vec<(usize, usize)> = g.edges().iter().chain(contacts.edges()).copied().collect();
            g = ProteinGraph::from_edges(x.residue_count(), edges)?;
        }
        Ok(g)
    }

    pub fn forward_model(&self, template: &Template) -> Result<ForwardModel> {
        let grid = ImageGrid::new(self.imaging.side, self.imaging.pixel_size)?;
        let n = template.coords.residue_count();
        let profile = self.imaging.profile.profile(n, template.residue_names.as_deref())?;
        let ctf = self.imaging.ctf.as_ref().map(CtfConfig::params).transpose()?;
        ForwardModel::new(grid, profile, ctf)
    }

    pub fn trajectory(&self, template: &Template) -> Result<Vec<Conformation>> {
        let spec = match &self.trajectory {
            None => return Err(Error::Config("missing [trajectory] section".into())),
            Some(TrajectoryConfig::Hinge {
                max_angle,
                count,
                axis,
                pivot,
            }) => {
                let pivot = match (pivot, &template.layout) {
                    (Some(p), _) => *p,
                    (None, Some(l)) => l.pivot(),
                    (None, None) => return Err(Error::Config("trajectory.pivot is required for PDB templates".into())),
                };
                TrajectorySpec::Hinge {
                    template: template.coords.clone(),
                    pivot,
                    axis: *axis,
                    max_angle: *max_angle,
                    count: *count,
                }
            }
            Some(TrajectoryConfig::Interpolate { end, count }) => {
                let (e, _) = read_pdb_calpha(end, PdbChain::First)?;
                TrajectorySpec::Interpolate {
                    start: template.coords.clone(),
                    end: e.centered(),
                    count: *count,
                }
            }
        };
        generate_trajectory(&spec)
    }

    pub fn simulation_spec(&self) -> Result<SimulationSpec> {
        let s = self
            .simulation
            .ok_or_else(|| Error::Config("missing [simulation] section".into()))?;
        Ok(SimulationSpec {
            images_per_frame: s.images_per_frame,
            noise: s.noise,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config("missing [train] section".into()))
    }

    /// Applies command-line overrides to `[train]`. A decoder name picks
    /// `[decoders.<name>]`, or `[train.decoder]` when its kind has that name.
    pub fn apply_overrides(&mut self, decoder: Option<&str>, poses: Option<PoseMode>, epochs: Option<usize>) -> Result<()> {
        let decoders = self.decoders.clone();
        let train = self
            .train
            .as_mut()
            .ok_or_else(|| Error::Config("missing [train] section".into()))?;
        if let Some(name) = decoder {
            train.decoder = match decoders.get(name) {
                Some(d) => *d,
                None if train.decoder.kind() == name => train.decoder,
                None => {
                    let known: Vec<&str> = decoders.keys().map(String::as_str).collect();
                    return Err(Error::Config(format!(
                        "no decoder named '{name}': [train.decoder] is '{}' and [decoders] has {known:?}",
                        train.decoder.kind()
                    )));
                }
            };
        }
        if let Some(p) = poses {
            train.pose_mode = p;
        }
        if let Some(e) = epochs {
            train.max_epochs = e;
        }
        train.validate().map_err(|e| Error::Config(format!("train: {e}")))
    }
}
