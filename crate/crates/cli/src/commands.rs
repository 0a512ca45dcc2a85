//! Subcommand implementations. Each returns whether every solver call
//! converged; hard failures come back as [`Error`].

use std::path::{Path, PathBuf};

use ew_core::eval::{
    barycentric_projection, circle_benchmark, foscttm, foscttm_symmetric, knn_transfer_accuracy,
    pairwise_distance_matrix, DistanceKind, ProjectedPoints,
};
use ew_core::ew::{normalize_spaces, solve_ew_lambda, EmbedResult, EwConfig, EwInit, ObjectiveTerms};
use ew_core::gw::GwOptions;
use ew_core::io::{write_json, write_labels_csv, write_matrix_csv, write_vector_csv};
use ew_core::ot::W2Method;
use ew_core::{Error, Geometry, MmSpace, Points, ReferenceSpace};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{DistanceKindConfig, LoadedInput, RunConfig, SolverConfig};
use crate::svg;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

const DEFAULT_OUT_DIR: &str = "ew-output";

/// Loads the config and applies overrides; returns it with the output directory.
pub fn prepare(config: &Path, overrides: &Overrides) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    let out = match (&overrides.out, &cfg.output.dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => cfg.resolve(d),
        (None, None) => PathBuf::from(DEFAULT_OUT_DIR),
    };
    Ok((cfg, out))
}

pub fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

#[derive(Debug, Serialize)]
struct EmbedSummary<'a> {
    ew_lambda: f64,
    /// `EW_lambda^2` estimate in the units of the inputs.
    objective: f64,
    terms: ObjectiveTerms,
    /// Common factor the distances were divided by before solving.
    scale: f64,
    selected: u8,
    n1: usize,
    m: usize,
    n2: usize,
    bcd_iterations: usize,
    converged: bool,
    sinkhorn_converged: bool,
    max_sinkhorn_violation: f64,
    sinkhorn_iterations: usize,
    solver: &'a SolverConfig,
}

/// A solved embedding together with the spaces it was solved on.
pub struct Embedding {
    pub result: EmbedResult,
    pub scale: f64,
    pub z: ReferenceSpace,
    pub inputs: Vec<LoadedInput>,
}

/// Loads both inputs, solves, and writes the embed artifacts into `out`.
fn run_embed(
    cfg: &RunConfig,
    out: &Path,
    validate_first: impl FnOnce(&[LoadedInput]) -> Result<(), Error>,
) -> Result<Embedding, Error> {
    let solver = cfg.solver()?;
    let ew_cfg = solver.ew_config()?;
    let z = cfg.build_target()?;
    let inputs = cfg.load_inputs(&z)?;
    validate_first(&inputs)?;
    create_dir(out)?;
    let (x1, x2) = (&inputs[0].space, &inputs[1].space);
    let (result, scale) = if solver.normalize {
        let (n1, n2, nz, scale) = normalize_spaces(x1, x2, &z);
        (solve_ew_lambda(&n1, &n2, &nz, &ew_cfg)?, scale)
    } else {
        (solve_ew_lambda(x1, x2, &z, &ew_cfg)?, 1.0)
    };
    write_embed_artifacts(out, &result, scale, &z, solver)?;
    Ok(Embedding {
        result,
        scale,
        z,
        inputs,
    })
}

fn write_embed_artifacts(
    out: &Path,
    r: &EmbedResult,
    scale: f64,
    z: &ReferenceSpace,
    solver: &SolverConfig,
) -> Result<(), Error> {
    let s2 = scale * scale;
    let terms = ObjectiveTerms {
        transport: r.terms.transport * s2,
        gw1: r.terms.gw1 * s2,
        gw2: r.terms.gw2 * s2,
        total: r.terms.total * s2,
    };
    let summary = EmbedSummary {
        ew_lambda: r.ew_lambda() * scale,
        objective: r.objective * s2,
        terms,
        scale,
        selected: r.selected,
        n1: r.gamma1.dim().0,
        m: z.len(),
        n2: r.gamma2.dim().0,
        bcd_iterations: r.bcd_iterations,
        converged: r.converged,
        sinkhorn_converged: r.sinkhorn_converged,
        max_sinkhorn_violation: r.max_sinkhorn_violation,
        sinkhorn_iterations: r.sinkhorn_iterations,
        solver,
    };
    write_json(out.join("result.json"), &summary)?;
    write_vector_csv(out.join("mu1.csv"), r.mu1.as_slice(), "mass")?;
    write_vector_csv(out.join("mu2.csv"), r.mu2.as_slice(), "mass")?;
    write_matrix_csv(out.join("gamma1.csv"), r.gamma1.matrix(), None)?;
    write_matrix_csv(out.join("gamma2.csv"), r.gamma2.matrix(), None)?;
    write_matrix_csv(out.join("pi.csv"), r.pi.matrix(), None)?;
    let trace: Vec<f64> = r.objective_trace.iter().map(|v| v * s2).collect();
    write_vector_csv(out.join("trace.csv"), &trace, "objective")?;
    write_vector_csv(out.join("regularized_trace.csv"), &r.regularized_trace, "regularized")?;
    let steps = |v: &[f64]| {
        v.iter()
            .enumerate()
            .map(|(i, &y)| ((i + 1) as f64, y))
            .collect::<Vec<_>>()
    };
    svg::line_plot(
        &out.join("trace.svg"),
        "Objective per half-step",
        "half-step",
        "F_lambda",
        &[("objective", steps(&trace))],
    )?;
    plot_embedding(out, r, z)
}

/// 2d drawing coordinates for the points of Z, if it has any.
fn plot_coords(z: &ReferenceSpace) -> Option<Array2<f64>> {
    match &z.points {
        Points::Coordinates(c) if c.ncols() >= 2 => Some(c.slice(ndarray::s![.., 0..2]).to_owned()),
        Points::Coordinates(c) if c.ncols() == 1 => Some(match z.geometry {
            Geometry::Circle => {
                Array2::from_shape_fn(
                    (c.nrows(), 2),
                    |(i, j)| {
                        if j == 0 {
                            c[[i, 0]].cos()
                        } else {
                            c[[i, 0]].sin()
                        }
                    },
                )
            }
            _ => Array2::from_shape_fn((c.nrows(), 2), |(i, j)| if j == 0 { c[[i, 0]] } else { 0.0 }),
        }),
        Points::Gaussians(g) => Some(Array2::from_shape_fn((g.len(), 2), |(i, j)| g[i].mean()[j])),
        _ => None,
    }
}

fn as_pairs(p: &Array2<f64>) -> Vec<(f64, f64)> {
    p.rows()
        .into_iter()
        .map(|r| (r[0], r.get(1).copied().unwrap_or(0.0)))
        .collect()
}

/// Scatter of barycentric projections on Euclidean targets; mass plots of
/// `mu1` and `mu2` on the other geometries.
fn plot_embedding(out: &Path, r: &EmbedResult, z: &ReferenceSpace) -> Result<(), Error> {
    if z.geometry == Geometry::EuclideanGrid {
        let p1 = barycentric_projection(&r.gamma1, z)?;
        let p2 = barycentric_projection(&r.gamma2, z)?;
        let (a, b) = (as_pairs(&p1.points), as_pairs(&p2.points));
        return svg::scatter(
            &out.join("embedding.svg"),
            "Barycentric projections",
            &[("X1", &a, &p1.mass), ("X2", &b, &p2.mass)],
        );
    }
    if let Some(coords) = plot_coords(z) {
        svg::mass_grid(&out.join("mu1.svg"), "Embedded mass of X1", &coords, r.mu1.as_slice())?;
        svg::mass_grid(&out.join("mu2.svg"), "Embedded mass of X2", &coords, r.mu2.as_slice())?;
    }
    Ok(())
}

pub fn embed(config: &Path, overrides: &Overrides) -> Result<(bool, PathBuf), Error> {
    let (cfg, out) = prepare(config, overrides)?;
    let e = run_embed(&cfg, &out, |_| Ok(()))?;
    Ok((e.result.sinkhorn_converged, out))
}

#[derive(Debug, Serialize)]
struct Scores {
    foscttm: f64,
    symmetric_foscttm: bool,
    knn_accuracy: Option<f64>,
    k: usize,
    ew_lambda: f64,
    valid_rows: [usize; 2],
}

fn write_projection(path: &Path, p: &ProjectedPoints) -> Result<(), Error> {
    write_matrix_csv(path, &p.points, None)
}

pub fn eval(config: &Path, overrides: &Overrides) -> Result<(bool, PathBuf), Error> {
    let (cfg, out) = prepare(config, overrides)?;
    let eval_cfg = cfg
        .eval
        .clone()
        .ok_or_else(|| Error::InvalidParameter("config has no [eval] table".into()))?;
    if eval_cfg.k == 0 {
        return Err(Error::InvalidParameter("eval.k must be at least 1".into()));
    }
    let e = run_embed(&cfg, &out, |inputs| {
        let (a, b) = (inputs[0].space.len(), inputs[1].space.len());
        if a != b {
            return Err(Error::CountMismatch {
                left: a,
                right: b,
                context: "paired inputs must have one row per sample",
            });
        }
        Ok(())
    })?;
    let p1 = barycentric_projection(&e.result.gamma1, &e.z)?;
    let p2 = barycentric_projection(&e.result.gamma2, &e.z)?;
    let fos = if eval_cfg.symmetric_foscttm {
        foscttm_symmetric(&p1, &p2)?
    } else {
        foscttm(&p1, &p2)?
    };
    let knn = match (&e.inputs[0].labels, &e.inputs[1].labels) {
        (Some(l1), Some(l2)) => Some(knn_transfer_accuracy(&p1, l1, &p2, l2, eval_cfg.k)?),
        _ => None,
    };
    write_projection(&out.join("projection1.csv"), &p1)?;
    write_projection(&out.join("projection2.csv"), &p2)?;
    if let Some(l) = &e.inputs[0].labels {
        write_labels_csv(out.join("labels1.csv"), l)?;
    }
    let scores = Scores {
        foscttm: fos,
        symmetric_foscttm: eval_cfg.symmetric_foscttm,
        knn_accuracy: knn,
        k: eval_cfg.k,
        ew_lambda: e.result.ew_lambda() * e.scale,
        valid_rows: [
            p1.valid.iter().filter(|&&v| v).count(),
            p2.valid.iter().filter(|&&v| v).count(),
        ],
    };
    write_json(out.join("scores.json"), &scores)?;
    Ok((e.result.sinkhorn_converged, out))
}

pub fn distances(config: &Path, overrides: &Overrides) -> Result<(bool, PathBuf), Error> {
    let (cfg, out) = prepare(config, overrides)?;
    let dcfg = cfg
        .distances
        .clone()
        .ok_or_else(|| Error::InvalidParameter("config has no [distances] table".into()))?;
    let z = cfg.build_target()?;
    let corpus: Vec<MmSpace> = cfg.load_corpus(&z)?.into_iter().map(|l| l.space).collect();
    let normalize = cfg.solver.as_ref().is_none_or(|s| s.normalize);
    let kind = match dcfg.kind {
        DistanceKindConfig::W2 => DistanceKind::W2SharedSupport(match dcfg.w2_epsilon {
            Some(epsilon) => W2Method::Entropic { epsilon },
            None => W2Method::Exact,
        }),
        DistanceKindConfig::Gw => {
            let eps = match (dcfg.gw_epsilon, &cfg.solver) {
                (Some(e), _) => e,
                (None, Some(s)) => s.epsilon,
                (None, None) => ew_core::ew::DEFAULT_EPSILON,
            };
            DistanceKind::Gw(GwOptions::new(eps))
        }
        DistanceKindConfig::EwLambda => DistanceKind::EwLambda(cfg.solver()?.ew_config()?),
    };
    create_dir(&out)?;
    let scale = if normalize {
        corpus.iter().map(|x| x.dist.max()).fold(z.diameter(), f64::max)
    } else {
        1.0
    };
    let matrix = if scale > 0.0 && scale != 1.0 {
        let corpus: Vec<MmSpace> = corpus
            .iter()
            .map(|x| MmSpace {
                dist: x.dist.scaled(1.0 / scale),
                weights: x.weights.clone(),
                labels: x.labels.clone(),
            })
            .collect();
        pairwise_distance_matrix(&corpus, &z.rescaled(1.0 / scale), &kind)? * scale
    } else {
        pairwise_distance_matrix(&corpus, &z, &kind)?
    };
    write_matrix_csv(out.join("distances.csv"), &matrix, None)?;
    svg::heatmap(
        &out.join("distances.svg"),
        "Pairwise distances (darker = smaller)",
        &matrix,
    )?;
    Ok((true, out))
}

/// Parameters of the circle benchmark subcommand.
#[derive(Debug, Clone)]
pub struct CircleBench {
    pub bins: usize,
    pub kappas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
    pub bcd_iters: usize,
    pub init: EwInit,
}

pub fn circle_bench(params: &CircleBench, out: &Path) -> Result<(bool, PathBuf), Error> {
    if params.kappas.is_empty() || params.lambdas.is_empty() {
        return Err(Error::InvalidParameter("need at least one kappa and one lambda".into()));
    }
    let mut cfgs = Vec::with_capacity(params.lambdas.len());
    for &lambda in &params.lambdas {
        let mut c = EwConfig::new(lambda, params.epsilon)?;
        c.bcd_iters = params.bcd_iters;
        c.init = params.init;
        cfgs.push(c);
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    for c in &cfgs {
        for &kappa in &params.kappas {
            rows.push(circle_benchmark(params.bins, kappa, c)?);
        }
    }
    let table = Array2::from_shape_fn((rows.len(), 4), |(i, j)| {
        let r = &rows[i];
        [r.kappa, r.lambda, r.ew_lambda_sq, r.ew_sq][j]
    });
    write_matrix_csv(
        out.join("circle_bench.csv"),
        &table,
        Some(&["kappa", "lambda", "ew_lambda_sq", "ew_sq"]),
    )?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = params
        .lambdas
        .iter()
        .map(|&l| {
            let pts = rows
                .iter()
                .filter(|r| r.lambda == l)
                .map(|r| (r.kappa, r.ew_lambda_sq))
                .collect();
            (format!("EW_lambda^2, lambda={l}"), pts)
        })
        .collect();
    series.push((
        "EW^2".into(),
        rows.iter()
            .filter(|r| r.lambda == params.lambdas[0])
            .map(|r| (r.kappa, r.ew_sq))
            .collect(),
    ));
    let named: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    svg::line_plot(
        &out.join("circle_bench.svg"),
        "Circle benchmark",
        "kappa",
        "squared distance",
        &named,
    )?;
    Ok((rows.iter().all(|r| r.sinkhorn_converged), out.to_path_buf()))
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    valid: bool,
    target_points: Option<usize>,
    inputs: Vec<usize>,
    corpus: Vec<usize>,
}

/// Loads everything the config references without solving.
pub fn validate(config: &Path, overrides: &Overrides) -> Result<String, Error> {
    let (cfg, _) = prepare(config, overrides)?;
    if let Some(s) = &cfg.solver {
        s.ew_config()?;
    }
    if let Some(e) = &cfg.eval {
        if e.k == 0 {
            return Err(Error::InvalidParameter("eval.k must be at least 1".into()));
        }
    }
    let z = match cfg.target {
        Some(_) => Some(cfg.build_target()?),
        None => None,
    };
    let sizes = |list: &[crate::config::InputConfig]| -> Result<Vec<usize>, Error> {
        let z = z
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [target] table".into()))?;
        list.iter()
            .enumerate()
            .map(|(i, inp)| cfg.load_input(inp, z, i as u64).map(|l| l.space.len()))
            .collect()
    };
    let inputs = if cfg.inputs.is_empty() {
        vec![]
    } else {
        sizes(&cfg.inputs)?
    };
    let corpus = if cfg.corpus.is_empty() {
        vec![]
    } else {
        sizes(&cfg.corpus)?
    };
    let report = ValidationReport {
        valid: true,
        target_points: z.as_ref().map(|z| z.len()),
        inputs,
        corpus,
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}
