use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use esgvi::dataset::{
    build_pose_graph_problem, build_trajectory_problem, evaluate as score, iw_scale_from_information,
    mean_edge_covariance, pose_graph_ate, pose_graph_knots, windowed_medoid_init, InjectionFlag,
    MeasurementNoise, PoseGraph, PoseGraphNoise, ProblemDataset, TrajectoryProblemOptions,
};
use esgvi::engine::{run_estep, EStepConfig, TrajectoryPosterior};
use esgvi::factors::{KnotLayout, Problem};
use esgvi::io::{read_g2o, read_trajectory_csv, write_g2o, write_knots_csv, write_measurements_csv, write_trajectory_csv};
use esgvi::learning::{run_em, EmConfig, EmReport, LearnSet, ParameterArtifact};
use esgvi::lie::Twist;
use esgvi::noise::NoiseParameters;
use esgvi::sim::{diag6, inject_noise, inject_outliers, measure_poses, simulate_wnoa, PoseGraphFixture};

use crate::config::{Learn, RunConfig};
use crate::Failure;

/// Half-width of the window used to initialise knots from measurements.
const INIT_HALF_WINDOW: usize = 5;

/// Attaches the path to file-system errors.
fn at_path(path: &Path) -> impl Fn(esgvi::Error) -> Failure + '_ {
    move |e| match e {
        esgvi::Error::Io(io) => Failure::Config(format!("{}: {io}", path.display())),
        e => e.into(),
    }
}

fn create_out(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Config(format!("{}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref().ok_or_else(|| Failure::Config(format!("--{flag} is required")))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn float_list(v: impl IntoIterator<Item = f64>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", items.join(", "))
}

fn outlier_count(ds: &ProblemDataset) -> usize {
    ds.measurements.iter().filter(|m| m.flag == InjectionFlag::Outlier).count()
}

fn simulate_split(cfg: &RunConfig, seed: u64) -> Result<ProblemDataset, Failure> {
    let v0 = Twist::new(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let gt = simulate_wnoa(cfg.knots, cfg.dt, &diag6(cfg.qc), &v0, seed)?;
    let mut ds = measure_poses(&gt, &diag6(cfg.w), seed + 1);
    if cfg.sigma > 0.0 {
        ds = inject_noise(&ds, cfg.sigma, seed + 2)?;
    }
    if cfg.outlier_rate > 0.0 {
        ds = inject_outliers(&ds, cfg.outlier_rate, cfg.outlier_mag, seed + 3)?;
    }
    Ok(ds)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let out = create_out(cfg)?;
    if cfg.posegraph {
        return simulate_pose_graph(cfg, out);
    }
    let mut meta = format!(
        "rng = \"ChaCha8\"\nseed = {}\nknots = {}\ndt = {:.16e}\nqc = {}\nw = {}\nsigma = {:.16e}\noutlier_rate = {:.16e}\noutlier_mag = {:.16e}\n",
        cfg.seed,
        cfg.knots,
        cfg.dt,
        float_list(cfg.qc),
        float_list(cfg.w),
        cfg.sigma,
        cfg.outlier_rate,
        cfg.outlier_mag
    );
    for (split, offset) in [("train", 0u64), ("test", 16)] {
        let seed = cfg.seed.wrapping_mul(32).wrapping_add(offset);
        let ds = simulate_split(cfg, seed)?;
        write_measurements_csv(&out.join(format!("{split}_measurements.csv")), &ds.measurements)?;
        write_knots_csv(&out.join(format!("{split}_groundtruth.csv")), ds.groundtruth.as_deref().unwrap_or(&[]))?;
        let _ = writeln!(meta, "{split}_seed = {seed}\n{split}_outliers = {}", outlier_count(&ds));
    }
    write_text(&out.join("simulate.toml"), &meta)?;
    log::info!("wrote train and test datasets with {} knots to {}", cfg.knots, out.display());
    Ok(())
}

fn simulate_pose_graph(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let fixture = PoseGraphFixture::default();
    let generated = fixture.generate(cfg.seed)?;
    write_g2o(&out.join("graph.g2o"), &generated.graph)?;
    let truth = PoseGraph {
        ids: generated.graph.ids.clone(),
        vertices: generated.truth.clone(),
        ..PoseGraph::default()
    };
    write_g2o(&out.join("truth.g2o"), &truth)?;
    let meta = format!(
        "rng = \"ChaCha8\"\nseed = {}\nvertices = {}\nedges = {}\nfalse_closures = {}\n",
        cfg.seed,
        generated.graph.vertices.len(),
        generated.graph.edges.len(),
        generated.false_edges.len()
    );
    write_text(&out.join("simulate.toml"), &meta)?;
    log::info!("wrote pose graph with {} false closures to {}", generated.false_edges.len(), out.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<ProblemDataset, Failure> {
    let input = required(&cfg.input, "input")?;
    let mut ds = read_trajectory_csv(input).map_err(at_path(input))?;
    if ds.measurements.is_empty() {
        return Err(Failure::Config("input holds no measurements".into()));
    }
    if let Some(path) = &cfg.groundtruth {
        let gt = read_trajectory_csv(path).map_err(at_path(path))?;
        ds.groundtruth = Some(gt.groundtruth.ok_or_else(|| {
            Failure::Config(format!("{}: groundtruth needs velocity columns", path.display()))
        })?);
    }
    Ok(ds)
}

fn estep_config(cfg: &RunConfig) -> EStepConfig {
    EStepConfig {
        mode: cfg.mode.expectation(),
        max_iters: cfg.max_iters,
        ..EStepConfig::default()
    }
}

fn measurement_noise(use_iw: bool) -> MeasurementNoise {
    if use_iw {
        MeasurementNoise::InverseWishart
    } else {
        MeasurementNoise::Static
    }
}

fn em_report_toml(report: &EmReport) -> String {
    let mut s = format!("rounds = {}\nconverged = {}\n", report.rounds.len(), report.converged);
    if let Some(v) = report.final_v() {
        let _ = writeln!(s, "final_V = {v:.16e}");
    }
    let _ = writeln!(s, "V = {}", float_list(report.rounds.iter().map(|r| r.v)));
    let _ = writeln!(s, "V_estep = {}", float_list(report.rounds.iter().map(|r| r.v_estep)));
    let iters: Vec<String> = report.rounds.iter().map(|r| r.estep_trace.len().to_string()).collect();
    let _ = writeln!(s, "estep_iterations = [{}]", iters.join(", "));
    s
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load_dataset(cfg)?;
    let learn = cfg.training_set();
    let learns = |l: Learn| learn.contains(&l);
    if learns(Learn::Wgt) && ds.groundtruth.is_none() {
        return Err(Failure::Config("--learn wgt needs --groundtruth".into()));
    }
    let options = TrajectoryProblemOptions {
        measurement_noise: measurement_noise(cfg.use_iw()),
        groundtruth_every: if learns(Learn::Wgt) { cfg.gt_every.max(1) } else { 0 },
    };
    let problem = build_trajectory_problem(&ds, &options)?;
    let posterior = TrajectoryPosterior::new(&problem, windowed_medoid_init(&ds, INIT_HALF_WINDOW)?)?;
    let params = NoiseParameters::initial(problem.num_upsilons(), cfg.nu, cfg.beta)?;
    let em = EmConfig {
        estep: estep_config(cfg),
        rounds: cfg.rounds,
        tol: cfg.tol,
        learn: LearnSet {
            qc: learns(Learn::Qc),
            w: learns(Learn::W),
            w_gt: learns(Learn::Wgt),
            w_odo: false,
            psi: learns(Learn::Iw),
        },
        diagonal_qc: true,
        ..EmConfig::default()
    };
    let result = run_em(&problem, params, posterior, &em)?;
    let out = create_out(cfg)?;
    ParameterArtifact::from_result(&result.params, &result.report).write(&out.join("params.toml"))?;
    write_text(&out.join("em_report.toml"), &em_report_toml(&result.report))?;
    println!(
        "trained {} rounds, final V {:.6e}, converged {}",
        result.report.rounds.len(),
        result.report.final_v().unwrap_or(f64::NAN),
        result.report.converged
    );
    if !result.report.converged {
        return Err(Failure::NotConverged(format!(
            "EM did not converge within {} rounds; parameters written with converged = false",
            cfg.rounds
        )));
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig) -> Result<(), Failure> {
    let params_path = cfg.params.clone().unwrap_or_else(|| cfg.out.join("params.toml"));
    let artifact = ParameterArtifact::read(&params_path).map_err(at_path(&params_path))?;
    let ds = load_dataset(cfg)?;
    let options = TrajectoryProblemOptions {
        measurement_noise: measurement_noise(cfg.use_iw()),
        groundtruth_every: 0,
    };
    let problem = build_trajectory_problem(&ds, &options)?;
    let mut params = artifact.to_params(problem.num_upsilons())?;
    let posterior = TrajectoryPosterior::new(&problem, windowed_medoid_init(&ds, INIT_HALF_WINDOW)?)?;
    let result = run_estep(&problem, &mut params, posterior, &estep_config(cfg))?;
    let out = create_out(cfg)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &result.posterior)?;
    if let Some(gt) = &ds.groundtruth {
        let metrics = score(&result.posterior, gt, cfg.align)?;
        write_text(&out.join("metrics.toml"), &metrics.to_toml())?;
        print!("{}", metrics.to_toml());
    }
    if !result.converged {
        return Err(Failure::NotConverged(format!(
            "E-step did not converge within {} iterations; trajectory written",
            cfg.max_iters
        )));
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let input = required(&cfg.input, "input")?;
    let knots = read_trajectory_csv(input)
        .map_err(at_path(input))?
        .groundtruth
        .ok_or_else(|| Failure::Config(format!("{}: estimate needs velocity columns", input.display())))?;
    let gt_path = required(&cfg.groundtruth, "groundtruth")?;
    let gt = read_trajectory_csv(gt_path)
        .map_err(at_path(gt_path))?
        .groundtruth
        .ok_or_else(|| Failure::Config(format!("{}: groundtruth needs velocity columns", gt_path.display())))?;
    let problem = Problem {
        times: knots.iter().map(|k| k.time).collect(),
        layout: KnotLayout::PoseVelocity,
        factors: Vec::new(),
        fix_first: false,
    };
    let metrics = score(&TrajectoryPosterior::new(&problem, knots)?, &gt, cfg.align)?;
    let out = create_out(cfg)?;
    write_text(&out.join("metrics.toml"), &metrics.to_toml())?;
    print!("{}", metrics.to_toml());
    Ok(())
}

pub fn posegraph(cfg: &RunConfig) -> Result<(), Failure> {
    let input = required(&cfg.input, "input")?;
    let graph = read_g2o(input).map_err(at_path(input))?;
    if graph.unsupported > 0 {
        log::warn!("skipped {} unsupported records", graph.unsupported);
    }
    let (label, noise, learn) = if cfg.learns(Learn::Iw) {
        ("iw", PoseGraphNoise::InverseWishart, None)
    } else if cfg.learns(Learn::W) {
        let learn = LearnSet {
            w: true,
            w_odo: true,
            ..LearnSet::default()
        };
        ("static", PoseGraphNoise::Static, Some(learn))
    } else {
        ("fixed", PoseGraphNoise::Static, None)
    };
    let problem = build_pose_graph_problem(&graph, noise)?;
    let mut params = if noise == PoseGraphNoise::InverseWishart {
        let psi = iw_scale_from_information(&graph, cfg.nu);
        let mut p = NoiseParameters::initial(problem.num_upsilons(), cfg.nu, psi.determinant())?;
        p.psi = psi;
        p.reset_upsilons(problem.num_upsilons());
        p
    } else {
        let mut p = NoiseParameters::initial(0, cfg.nu, cfg.beta)?;
        p.w = Some(mean_edge_covariance(&graph, false));
        p.w_odo = Some(mean_edge_covariance(&graph, true));
        p
    };
    let posterior = TrajectoryPosterior::new(&problem, pose_graph_knots(&graph))?;
    let (posterior, converged) = match learn {
        Some(learn) => {
            let em = EmConfig {
                estep: estep_config(cfg),
                rounds: cfg.rounds,
                tol: cfg.tol,
                learn,
                ..EmConfig::default()
            };
            let r = run_em(&problem, params, posterior, &em)?;
            (r.posterior, r.report.converged)
        }
        None => {
            let r = run_estep(&problem, &mut params, posterior, &estep_config(cfg))?;
            (r.posterior, r.converged)
        }
    };
    let optimized = PoseGraph {
        vertices: posterior.knots.iter().map(|k| k.pose).collect(),
        ..graph.clone()
    };
    let out = create_out(cfg)?;
    write_g2o(&out.join("vertices.g2o"), &optimized)?;
    let mut summary = format!(
        "mode = \"{label}\"\nvertices = {}\nedges = {}\nunsupported_records = {}\nconverged = {converged}\n",
        graph.vertices.len(),
        graph.edges.len(),
        graph.unsupported
    );
    if let Some(path) = &cfg.groundtruth {
        let truth = read_g2o(path).map_err(at_path(path))?;
        let ate = pose_graph_ate(&optimized.vertices, &truth.vertices)?;
        let _ = writeln!(summary, "ate_m = {ate:.16e}");
    }
    write_text(&out.join("posegraph.toml"), &summary)?;
    print!("{summary}");
    if !converged {
        return Err(Failure::NotConverged("pose-graph optimization did not converge; vertices written".into()));
    }
    Ok(())
}
