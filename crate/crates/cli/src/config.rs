//! Run configuration: TOML schema, validation, and loading of inputs and the
//! target space.
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use ew_core::ew::{EwConfig, EwInit};
use ew_core::io::{read_distance_csv, read_gmm_json, read_labels_csv, read_matrix_csv, read_off, read_weights_csv};
use ew_core::spaces::{
    circle_space, dijkstra_all_pairs, euclidean_grid, gaussian_grid, knn_graph, mesh_to_graph, sphere_grid, torus_grid,
    FeatureMetric, GaussianGridSpec,
};
use ew_core::{DistanceMatrix, Error, Geometry, MmSpace, Points, ReferenceSpace, SimplexWeights};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthetic;

/// Top-level config file.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for subsampling and synthetic inputs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    /// The two spaces for `embed` and `eval`.
    #[serde(default)]
    pub inputs: Vec<InputConfig>,
    /// The corpus for `distances`.
    #[serde(default)]
    pub corpus: Vec<InputConfig>,
    #[serde(default)]
    pub distances: Option<DistancesConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_bcd_iters")]
    pub bcd_iters: usize,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f64,
    #[serde(default = "default_sinkhorn_max_iter")]
    pub sinkhorn_max_iter: usize,
    #[serde(default)]
    pub init: EwInit,
    /// Divide all distances by the largest one among the inputs and Z.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_epsilon() -> f64 {
    ew_core::ew::DEFAULT_EPSILON
}
fn default_bcd_iters() -> usize {
    ew_core::ew::DEFAULT_BCD_ITERS
}
fn default_sinkhorn_tol() -> f64 {
    ew_core::ot::DEFAULT_SINKHORN_TOL
}
fn default_sinkhorn_max_iter() -> usize {
    ew_core::ot::DEFAULT_SINKHORN_MAX_ITER
}
fn default_true() -> bool {
    true
}
fn default_k() -> usize {
    5
}
fn default_graph_k() -> usize {
    8
}

impl SolverConfig {
    pub fn ew_config(&self) -> Result<EwConfig, Error> {
        let cfg = EwConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            bcd_iters: self.bcd_iters,
            sinkhorn_tol: self.sinkhorn_tol,
            sinkhorn_max_iter: self.sinkhorn_max_iter,
            init: self.init,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The reference space Z.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "geometry", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    EuclideanGrid {
        extent: Vec<(f64, f64)>,
        resolution: Vec<usize>,
    },
    SphereGrid {
        resolution: (usize, usize),
    },
    TorusGrid {
        resolution: (usize, usize),
    },
    Circle {
        bins: usize,
    },
    GaussianW2(GaussianGridSpec),
    Custom {
        distances: PathBuf,
        coordinates: Option<PathBuf>,
    },
}

/// One input space. Each variant is one input form.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    /// Triangle mesh; geodesic distances along edges, uniform weights.
    Mesh { path: PathBuf, labels: Option<PathBuf> },
    /// Feature rows; geodesic distances on the k-NN graph.
    Features {
        path: PathBuf,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        metric: FeatureMetric,
        labels: Option<PathBuf>,
        subsample: Option<usize>,
    },
    /// Distance matrix with optional weights (uniform otherwise).
    Distances {
        path: PathBuf,
        weights: Option<PathBuf>,
        labels: Option<PathBuf>,
    },
    /// Gaussian mixture with Bures-Wasserstein distances between components.
    Gmm { path: PathBuf },
    /// Non-negative intensities over the points of Z (e.g. an image on a
    /// pixel grid), normalized to a probability vector.
    GridWeights { path: PathBuf },
    /// Synthetic S-bent rectangle in R^3, geodesic k-NN distances.
    SCurve {
        n: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_graph_k")]
        k: usize,
    },
    /// Synthetic Swiss roll in R^3, optionally with a hole.
    SwissRoll {
        n: usize,
        #[serde(default)]
        hole: bool,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_graph_k")]
        k: usize,
    },
    /// One view of a planted pair: shared latent points on a rectangle
    /// (seeded by the run seed) mapped isometrically into R^dim (seeded per
    /// view). Row j of view 1 corresponds to row j of view 2.
    Planted {
        n: usize,
        view: u64,
        #[serde(default = "default_planted_dim")]
        dim: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_graph_k")]
        k: usize,
    },
}

fn default_planted_dim() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKindConfig {
    W2,
    Gw,
    EwLambda,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DistancesConfig {
    pub kind: DistanceKindConfig,
    /// Entropic W2 when set; exact otherwise.
    pub w2_epsilon: Option<f64>,
    /// Entropic parameter for `gw` (defaults to the solver epsilon).
    pub gw_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Average FOSCTTM over both directions instead of the printed form.
    #[serde(default)]
    pub symmetric_foscttm: bool,
}

/// An input space with optional labels and, for point clouds, coordinates.
#[derive(Debug, Clone)]
pub struct LoadedInput {
    pub space: MmSpace,
    pub labels: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn solver(&self) -> Result<&SolverConfig, Error> {
        self.solver
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [solver] table".into()))
    }

    pub fn build_target(&self) -> Result<ReferenceSpace, Error> {
        let t = self
            .target
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [target] table".into()))?;
        match t {
            TargetConfig::EuclideanGrid { extent, resolution } => euclidean_grid(extent, resolution),
            TargetConfig::SphereGrid { resolution } => sphere_grid(resolution.0, resolution.1),
            TargetConfig::TorusGrid { resolution } => torus_grid(resolution.0, resolution.1),
            TargetConfig::Circle { bins } => circle_space(*bins),
            TargetConfig::GaussianW2(spec) => gaussian_grid(spec),
            TargetConfig::Custom { distances, coordinates } => {
                let dist = read_distance_csv(self.resolve(distances))?;
                let points = match coordinates {
                    Some(c) => Points::Coordinates(read_matrix_csv(self.resolve(c))?),
                    None => Points::None,
                };
                ReferenceSpace::from_parts(dist, points, Geometry::Custom)
            }
        }
    }

    fn labels(&self, p: &Option<PathBuf>, n: usize) -> Result<Option<Vec<usize>>, Error> {
        let Some(p) = p else { return Ok(None) };
        let labels = read_labels_csv(self.resolve(p))?;
        if labels.len() != n {
            return Err(Error::CountMismatch {
                left: n,
                right: labels.len(),
                context: "input points vs labels",
            });
        }
        Ok(Some(labels))
    }

    /// Loads one input; `index` offsets the seed so the two synthetic inputs differ.
    pub fn load_input(&self, input: &InputConfig, z: &ReferenceSpace, index: u64) -> Result<LoadedInput, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index));
        match input {
            InputConfig::Mesh { path, labels } => {
                let mesh = read_off(self.resolve(path))?;
                let dist = dijkstra_all_pairs(&mesh_to_graph(mesh.vertices.view(), &mesh.faces)?)?;
                let n = dist.len();
                Ok(LoadedInput {
                    space: MmSpace::uniform(dist),
                    labels: self.labels(labels, n)?,
                })
            }
            InputConfig::Features {
                path,
                k,
                metric,
                labels,
                subsample,
            } => {
                let mut features = read_matrix_csv(self.resolve(path))?;
                let mut labels = self.labels(labels, features.nrows())?;
                if let Some(s) = *subsample {
                    if s == 0 {
                        return Err(Error::InvalidParameter("subsample must be positive".into()));
                    }
                    if s < features.nrows() {
                        let mut idx = rand::seq::index::sample(&mut rng, features.nrows(), s).into_vec();
                        idx.sort_unstable();
                        features = features.select(Axis(0), &idx);
                        labels = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
                    }
                }
                let dist = dijkstra_all_pairs(&knn_graph(features.view(), *k, *metric)?)?;
                Ok(LoadedInput {
                    space: MmSpace::uniform(dist),
                    labels,
                })
            }
            InputConfig::Distances { path, weights, labels } => {
                let dist = read_distance_csv(self.resolve(path))?;
                let n = dist.len();
                let space = match weights {
                    Some(w) => MmSpace::new(dist, read_weights_csv(self.resolve(w))?)?,
                    None => MmSpace::uniform(dist),
                };
                Ok(LoadedInput {
                    space,
                    labels: self.labels(labels, n)?,
                })
            }
            InputConfig::Gmm { path } => Ok(LoadedInput {
                space: read_gmm_json(self.resolve(path))?.to_mm_space()?,
                labels: None,
            }),
            InputConfig::GridWeights { path } => {
                // Any shape; row-major order must match the order of Z.
                let w: Vec<f64> = read_matrix_csv(self.resolve(path))?.iter().copied().collect();
                if w.len() != z.len() {
                    return Err(Error::IncompatibleCorpus(format!(
                        "{} holds {} values but the target has {} points",
                        path.display(),
                        w.len(),
                        z.len()
                    )));
                }
                Ok(LoadedInput {
                    space: MmSpace::new(z.dist.clone(), SimplexWeights::normalized(w)?)?,
                    labels: None,
                })
            }
            InputConfig::SCurve { n, noise, k } => {
                let pts = synthetic::s_curve(*n, *noise, &mut rng)?;
                point_cloud_input(&pts, *k)
            }
            InputConfig::SwissRoll { n, hole, noise, k } => {
                let pts = synthetic::swiss_roll(*n, *hole, *noise, &mut rng)?;
                point_cloud_input(&pts, *k)
            }
            InputConfig::Planted { n, view, dim, noise, k } => {
                let latent = synthetic::planted_latent(*n, &mut ChaCha8Rng::seed_from_u64(self.seed))?;
                let mut view_rng =
                    ChaCha8Rng::seed_from_u64(self.seed ^ (view.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let pts = synthetic::planted_view(&latent, *dim, *noise, &mut view_rng)?;
                point_cloud_input(&pts, *k)
            }
        }
    }

    pub fn load_inputs(&self, z: &ReferenceSpace) -> Result<Vec<LoadedInput>, Error> {
        if self.inputs.len() != 2 {
            return Err(Error::InvalidParameter(format!(
                "expected exactly two [[inputs]], found {}",
                self.inputs.len()
            )));
        }
        self.inputs
            .iter()
            .enumerate()
            .map(|(i, input)| self.load_input(input, z, i as u64))
            .collect()
    }

    pub fn load_corpus(&self, z: &ReferenceSpace) -> Result<Vec<LoadedInput>, Error> {
        if self.corpus.is_empty() {
            return Err(Error::InvalidParameter("config has no [[corpus]] entries".into()));
        }
        self.corpus
            .iter()
            .enumerate()
            .map(|(i, input)| self.load_input(input, z, i as u64))
            .collect()
    }
}

fn point_cloud_input(points: &Array2<f64>, k: usize) -> Result<LoadedInput, Error> {
    let dist: DistanceMatrix = dijkstra_all_pairs(&knn_graph(points.view(), k, FeatureMetric::Euclidean)?)?;
    Ok(LoadedInput {
        space: MmSpace::uniform(dist),
        labels: None,
    })
}
