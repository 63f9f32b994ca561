//! Command-line front end. Every subcommand is a thin wrapper that resolves
//! its parameters into an [`ExperimentConfig`], so flag invocations and
//! `run <config.json>` share one execution path and one manifest format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cantor::{exponent_sweep, write_sweep_csv, CantorSpec};
use crate::discretization::{check_tree, perturbed_discretization, standard_discretization};
use crate::dolgopyat::{compute_constants, iterate_contraction, write_gap_csv};
use crate::error::{Budget, Error, Result};
use crate::fio::{apply_fio, fup_grid_norm, l2_norm, GridNormReport, SweepPoint, SweepResult, ThickenedSet};
use crate::linalg::C64;
use crate::measures::{
    make_cantor_measure, make_carpet_measure, make_segment_pair_with, random_cloud, FractalMeasure, Phase,
};
use crate::regularity::{estimate_doubling, estimate_nonorthogonality, estimate_regularity, ScaleRange};
use crate::schottky::{
    box_dimension, box_scales, check_tree as check_disk_tree, circle_margin, direction_grid, figure_disks,
    iterate_disks, limit_set_from_tree, make_schottky, nonconcentration_constant, Disk,
};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "fup-lab", version, about = "Fractal uncertainty numerics")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// directory for artifacts and manifest.json (default: fup-lab-out)
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// seed for every random draw (default: 0)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// maximum matrix entries / grid points (default: FUP_LAB_BUDGET or 2^26)
    #[arg(long, global = true)]
    pub budget: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// DFT norms of Cantor-set submatrices for k = 1..kmax
    Cantor(CantorParams),
    /// Standard or perturbed tile tree of a measure, with invariant checks
    Discretize(DiscretizeParams),
    /// Regularity, doubling or nonorthogonality constant of a measure
    Estimate(EstimateParams),
    /// Induction-on-scales constants
    Constants(ConstantsParams),
    /// Grid norms of the restricted semiclassical Fourier transform over h
    FioSweep(FioSweepParams),
    /// Iterated contraction bound versus the directly applied operator
    Contraction(ContractionParams),
    /// Disk tree, limit set and geometric constants of a Schottky group
    Schottky(SchottkyParams),
    /// Execute a JSON config or re-run a manifest
    Run {
        /// experiment config or a previous manifest.json
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Cantor,
    Discretize,
    Estimate,
    Constants,
    FioSweep,
    Contraction,
    Schottky,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CantorParams {
    #[arg(long = "M", default_value_t = 3)]
    #[serde(rename = "M")]
    pub m: u32,
    #[arg(long = "A", value_delimiter = ',', default_values_t = [0u32, 2])]
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    #[arg(long = "B", value_delimiter = ',', default_values_t = [0u32, 2])]
    #[serde(rename = "B")]
    pub b: Vec<u32>,
    #[arg(long, default_value_t = 4)]
    pub kmax: u32,
    /// dimension; digits become the d-fold products of A and B
    #[arg(long, default_value_t = 1)]
    pub d: usize,
}

impl Default for CantorParams {
    fn default() -> Self {
        CantorParams {
            m: 3,
            a: vec![0, 2],
            b: vec![0, 2],
            kmax: 4,
            d: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    Cantor,
    Carpet,
    Cloud,
    SegmentX,
    SegmentY,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureArgs {
    #[arg(long = "measure", value_enum, default_value_t = MeasureKind::Cantor)]
    pub kind: MeasureKind,
    #[arg(long = "M", default_value_t = 3)]
    #[serde(rename = "M")]
    pub m: u32,
    #[arg(long = "A", value_delimiter = ',', default_values_t = [0u32, 2])]
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    /// Cantor or carpet level
    #[arg(long, default_value_t = 13)]
    pub k: u32,
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    /// random cloud size
    #[arg(long, default_value_t = 50)]
    pub atoms: usize,
    /// random cloud scale floor
    #[arg(long, default_value_t = 1e-3)]
    pub floor: f64,
    /// segment sample count
    #[arg(long, default_value_t = 1000)]
    pub resolution: usize,
}

impl Default for MeasureArgs {
    fn default() -> Self {
        MeasureArgs {
            kind: MeasureKind::Cantor,
            m: 3,
            a: vec![0, 2],
            k: 13,
            d: 1,
            atoms: 50,
            floor: 1e-3,
            resolution: 1000,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizeParams {
    #[command(flatten)]
    pub measure: MeasureArgs,
    #[arg(long = "L", default_value_t = 1000)]
    #[serde(rename = "L")]
    pub l: u64,
    #[arg(long, default_value_t = 1)]
    pub depth: u32,
    /// skip the perturbation step
    #[arg(long, default_value_t = false)]
    pub standard: bool,
}

impl Default for DiscretizeParams {
    fn default() -> Self {
        DiscretizeParams {
            measure: MeasureArgs::default(),
            l: 1000,
            depth: 1,
            standard: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Regularity,
    Doubling,
    Nonorthogonality,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateParams {
    #[command(flatten)]
    pub measure: MeasureArgs,
    #[arg(long, value_enum, default_value_t = Quantity::Regularity)]
    pub quantity: Quantity,
    /// regularity exponent (default: log|A|/log M for Cantor sets)
    #[arg(long)]
    pub delta: Option<f64>,
    /// finest scale (default: the measure's floor)
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

impl Default for EstimateParams {
    fn default() -> Self {
        EstimateParams {
            measure: MeasureArgs::default(),
            quantity: Quantity::Regularity,
            delta: None,
            alpha: None,
            beta: 1.0,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsParams {
    #[arg(long = "c-n", default_value_t = 1.0)]
    pub c_n: f64,
    #[arg(long = "c-d-x", default_value_t = 2.0)]
    pub c_d_x: f64,
    #[arg(long = "c-d-y", default_value_t = 2.0)]
    pub c_d_y: f64,
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    #[arg(long, default_value_t = 1.0)]
    pub hessian_c1: f64,
}

impl Default for ConstantsParams {
    fn default() -> Self {
        ConstantsParams {
            c_n: 1.0,
            c_d_x: 2.0,
            c_d_y: 2.0,
            d: 1,
            hessian_c1: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    Cantor,
    Segment,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FioSweepParams {
    #[arg(long, value_enum, default_value_t = PairKind::Cantor)]
    pub pair: PairKind,
    #[arg(long = "M", default_value_t = 3)]
    #[serde(rename = "M")]
    pub m: u32,
    #[arg(long = "A", value_delimiter = ',', default_values_t = [0u32, 2])]
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    /// Cantor level of the atoms
    #[arg(long, default_value_t = 8)]
    pub k: u32,
    /// h runs over base^-kmin .. base^-kmax (base M for Cantor, 2 for segments)
    #[arg(long, default_value_t = 4)]
    pub kmin: u32,
    #[arg(long, default_value_t = 8)]
    pub kmax: u32,
    /// grid step is h / step_ratio
    #[arg(long, default_value_t = 4.0)]
    pub step_ratio: f64,
    /// segment sample count
    #[arg(long, default_value_t = 20000)]
    pub resolution: usize,
    #[arg(long, default_value_t = false)]
    pub render: bool,
}

impl Default for FioSweepParams {
    fn default() -> Self {
        FioSweepParams {
            pair: PairKind::Cantor,
            m: 3,
            a: vec![0, 2],
            k: 8,
            kmin: 4,
            kmax: 8,
            step_ratio: 4.0,
            resolution: 20000,
            render: false,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionParams {
    #[arg(long = "M", default_value_t = 3)]
    #[serde(rename = "M")]
    pub m: u32,
    #[arg(long = "A", value_delimiter = ',', default_values_t = [0u32, 2])]
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    #[arg(long, default_value_t = 13)]
    pub k: u32,
    #[arg(long = "L", default_value_t = 1000)]
    #[serde(rename = "L")]
    pub l: u64,
    #[arg(long, default_value_t = 1)]
    pub depth: u32,
    /// h = M^-hexp
    #[arg(long, default_value_t = 8)]
    pub hexp: u32,
    #[arg(long = "c-n", default_value_t = 0.1)]
    pub c_n: f64,
    #[arg(long = "c-d", default_value_t = 2.0)]
    pub c_d: f64,
}

impl Default for ContractionParams {
    fn default() -> Self {
        ContractionParams {
            m: 3,
            a: vec![0, 2],
            k: 13,
            l: 1000,
            depth: 1,
            hexp: 8,
            c_n: 0.1,
            c_d: 2.0,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchottkyParams {
    /// JSON list of {center: [x, y], radius}; default is the genus-two figure
    #[arg(long)]
    pub disks: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    #[arg(long, default_value_t = 32)]
    pub directions: usize,
    #[arg(long, default_value_t = false)]
    pub render: bool,
}

impl Default for SchottkyParams {
    fn default() -> Self {
        SchottkyParams {
            disks: None,
            depth: 6,
            directions: 32,
            render: false,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fup-lab-out")
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: CommandName,
    #[serde(default = "empty_object")]
    pub parameters: Value,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// maximum matrix entries / grid points
    #[serde(default)]
    pub budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<String>,
}

/// Parameters of one command, after defaults are filled in.
#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    Cantor(CantorParams),
    Discretize(DiscretizeParams),
    Estimate(EstimateParams),
    Constants(ConstantsParams),
    FioSweep(FioSweepParams),
    Contraction(ContractionParams),
    Schottky(SchottkyParams),
}

fn decode<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::invalid(format!("bad parameters: {e}")))
}

impl Experiment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let p = &cfg.parameters;
        if !p.is_object() {
            return Err(Error::invalid("parameters must be a JSON object"));
        }
        Ok(match cfg.command {
            CommandName::Cantor => Experiment::Cantor(decode(p)?),
            CommandName::Discretize => Experiment::Discretize(decode(p)?),
            CommandName::Estimate => Experiment::Estimate(decode(p)?),
            CommandName::Constants => Experiment::Constants(decode(p)?),
            CommandName::FioSweep => Experiment::FioSweep(decode(p)?),
            CommandName::Contraction => Experiment::Contraction(decode(p)?),
            CommandName::Schottky => Experiment::Schottky(decode(p)?),
        })
    }

    fn name(&self) -> CommandName {
        match self {
            Experiment::Cantor(_) => CommandName::Cantor,
            Experiment::Discretize(_) => CommandName::Discretize,
            Experiment::Estimate(_) => CommandName::Estimate,
            Experiment::Constants(_) => CommandName::Constants,
            Experiment::FioSweep(_) => CommandName::FioSweep,
            Experiment::Contraction(_) => CommandName::Contraction,
            Experiment::Schottky(_) => CommandName::Schottky,
        }
    }

    fn parameters(&self) -> Result<Value> {
        Ok(match self {
            Experiment::Cantor(p) => serde_json::to_value(p)?,
            Experiment::Discretize(p) => serde_json::to_value(p)?,
            Experiment::Estimate(p) => serde_json::to_value(p)?,
            Experiment::Constants(p) => serde_json::to_value(p)?,
            Experiment::FioSweep(p) => serde_json::to_value(p)?,
            Experiment::Contraction(p) => serde_json::to_value(p)?,
            Experiment::Schottky(p) => serde_json::to_value(p)?,
        })
    }
}

/// Collects artifacts under the output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: vec![],
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }
}

fn cantor_digits(digits: &[u32], d: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                digits.iter().map(move |x| {
                    let mut q = p.clone();
                    q.push(*x);
                    q
                })
            })
            .collect();
    }
    out
}

fn cantor_spec(m: u32, a: &[u32], b: &[u32], d: usize, k: u32) -> CantorSpec {
    CantorSpec {
        m,
        d,
        a: cantor_digits(a, d),
        b: cantor_digits(b, d),
        k,
    }
}

fn build_measure(args: &MeasureArgs, seed: u64, budget: &Budget) -> Result<FractalMeasure> {
    match args.kind {
        MeasureKind::Cantor => {
            let spec = cantor_spec(args.m, &args.a, &args.a, args.d, args.k);
            spec.validate()?;
            make_cantor_measure(&spec, budget)
        }
        MeasureKind::Carpet => make_carpet_measure(args.k, budget),
        MeasureKind::Cloud => random_cloud(args.d, args.atoms, args.floor, seed),
        MeasureKind::SegmentX => Ok(make_segment_pair_with(args.resolution)?.x),
        MeasureKind::SegmentY => Ok(make_segment_pair_with(args.resolution)?.y),
    }
}

fn natural_delta(args: &MeasureArgs) -> Option<f64> {
    match args.kind {
        MeasureKind::Cantor => Some(args.d as f64 * (args.a.len() as f64).ln() / (args.m as f64).ln()),
        MeasureKind::Carpet => Some(8f64.ln() / 3f64.ln()),
        MeasureKind::SegmentX | MeasureKind::SegmentY => Some(1.0),
        MeasureKind::Cloud => None,
    }
}

fn run_cantor(p: &CantorParams, budget: &Budget, out: &mut Outputs) -> Result<()> {
    let spec = cantor_spec(p.m, &p.a, &p.b, p.d, 1);
    spec.validate()?;
    let rows = exponent_sweep(&spec, p.kmax, budget)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    out.write("cantor_sweep.csv", buf)?;
    out.json("cantor_sweep.json", &rows)
}

fn run_discretize(p: &DiscretizeParams, seed: u64, budget: &Budget, out: &mut Outputs) -> Result<()> {
    let mu = build_measure(&p.measure, seed, budget)?;
    let tree = if p.standard {
        standard_discretization(&mu, p.l, p.depth)?
    } else {
        perturbed_discretization(&mu, p.l, p.depth)?
    };
    let report = check_tree(&tree);
    out.write("tree.json", tree.to_json()?)?;
    out.json(
        "tree_check.json",
        &json!({
            "levels": tree.levels.iter().map(|l| l.len()).collect::<Vec<_>>(),
            "all_passed": report.all_passed(),
            "report": report,
        }),
    )
}

fn run_estimate(p: &EstimateParams, seed: u64, budget: &Budget, out: &mut Outputs) -> Result<()> {
    let mu = build_measure(&p.measure, seed, budget)?;
    let alpha = p.alpha.unwrap_or(mu.scale_floor);
    let range = ScaleRange::new(alpha, p.beta)?;
    let report = match p.quantity {
        Quantity::Regularity => {
            let delta = p
                .delta
                .or_else(|| natural_delta(&p.measure))
                .ok_or_else(|| Error::invalid("this measure needs an explicit --delta"))?;
            estimate_regularity(&mu, &range, delta)?
        }
        Quantity::Doubling => estimate_doubling(&mu, &range)?,
        Quantity::Nonorthogonality => {
            let phase = Phase::dot(mu.dim, 1.0);
            estimate_nonorthogonality(&mu, &mu, &phase, (&range, &range))?
        }
    };
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.write("estimate.csv", buf)?;
    out.json("estimate.json", &report)
}

fn run_constants(p: &ConstantsParams, out: &mut Outputs) -> Result<()> {
    let c = compute_constants(p.c_n, p.c_d_x, p.c_d_y, p.d, p.hessian_c1)?;
    out.json(
        "constants.json",
        &json!({
            "constants": c,
            "first_estimate": c.satisfies_first_estimate(),
            "step_estimate": c.satisfies_step_estimate(),
        }),
    )
}

fn run_fio_sweep(p: &FioSweepParams, budget: &Budget, out: &mut Outputs) -> Result<()> {
    if p.kmin > p.kmax {
        return Err(Error::invalid("kmin must not exceed kmax"));
    }
    if !(p.step_ratio >= 4.0) {
        return Err(Error::invalid("step_ratio must be at least 4"));
    }
    let (centers_x, centers_y, base, d, delta) = match p.pair {
        PairKind::Cantor => {
            let spec = CantorSpec::line(p.m, &p.a, &p.a, p.k);
            spec.validate()?;
            let mu = make_cantor_measure(&spec, budget)?;
            let delta = spec.delta_a();
            (mu.atoms.clone(), mu.atoms, p.m as f64, 1usize, delta)
        }
        PairKind::Segment => {
            let sp = make_segment_pair_with(p.resolution)?;
            let xs = sp.x.atoms.iter().map(|u| sp.to_physical(u)).collect();
            let ys = sp.y.atoms.iter().map(|u| sp.to_physical(u)).collect();
            (xs, ys, 2.0, 2usize, 1.0)
        }
    };
    let hs: Vec<f64> = (p.kmin..=p.kmax).map(|j| base.powi(-(j as i32))).collect();
    // space side is X_h, frequency side Y_h
    let reports: Vec<GridNormReport> = {
        use rayon::prelude::*;
        hs.par_iter()
            .map(|&h| {
                let space = ThickenedSet::new(centers_x.clone(), h, None)?;
                let freq = ThickenedSet::new(centers_y.clone(), h, None)?;
                fup_grid_norm(&freq, &space, h, h / p.step_ratio, budget)
            })
            .collect::<Result<_>>()?
    };
    let table: Vec<SweepPoint> = hs
        .iter()
        .zip(&reports)
        .map(|(&h, r)| SweepPoint { h, norm: r.norm })
        .collect();
    let sweep = SweepResult::from_table(table, d, delta, delta)?;
    let mut buf = Vec::new();
    sweep.write_csv(&mut buf)?;
    out.write("sweep.csv", buf)?;
    out.write("sweep.json", sweep.summary_json()? + "\n")?;
    out.json("grid_reports.json", &reports)?;
    if p.render {
        out.write("sweep.svg", sweep.to_svg())?;
    }
    Ok(())
}

fn run_contraction(p: &ContractionParams, budget: &Budget, out: &mut Outputs) -> Result<()> {
    let spec = CantorSpec::line(p.m, &p.a, &p.a, p.k);
    spec.validate()?;
    let mu = make_cantor_measure(&spec, budget)?;
    let tree = perturbed_discretization(&mu, p.l, p.depth)?;
    let phase = Phase::dot(1, 1.0);
    let h = (p.m as f64).powi(-(p.hexp as i32));
    let constants = compute_constants(p.c_n, p.c_d, p.c_d, 1, 1.0)?;
    let ones = vec![C64::new(1.0, 0.0); mu.len()];
    let it = iterate_contraction(&tree, &tree, &phase, h, &ones, &constants)?;
    let direct = l2_norm(&mu, &apply_fio(&mu, &mu, &phase, h, &ones)?);
    let mut buf = Vec::new();
    write_gap_csv(&it.per_level, &mut buf)?;
    out.write("gaps.csv", buf)?;
    out.json(
        "contraction.json",
        &json!({
            "h": h,
            "direct_norm": direct,
            "bound": it.bound,
            "dominates": direct <= it.bound * (1.0 + 1e-6),
            "report": it,
        }),
    )
}

fn run_schottky(p: &SchottkyParams, budget: &Budget, out: &mut Outputs) -> Result<()> {
    let disks: Vec<Disk> = match &p.disks {
        Some(path) => {
            let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&s).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        }
        None => figure_disks(),
    };
    if p.depth < 2 {
        return Err(Error::invalid("schottky depth must be at least 2"));
    }
    let group = make_schottky(&disks)?;
    let tree = iterate_disks(&group, p.depth, budget)?;
    let check = check_disk_tree(&group, &tree)?;
    let margin = if disks.len() == 4 { Some(circle_margin(&disks)?) } else { None };
    let limit = limit_set_from_tree(&group, &tree, p.depth)?;
    let coarser = limit_set_from_tree(&group, &tree, p.depth - 1)?;
    let scales = box_scales(&limit);
    let delta = box_dimension(&limit, &scales).ok();
    let delta_coarser = box_dimension(&coarser, &box_scales(&coarser)).ok();
    let eps: Vec<f64> = scales.iter().copied().filter(|e| *e >= 2.0 * limit.measure.scale_floor).collect();
    let c0 = nonconcentration_constant(&limit.measure, &eps, &direction_grid(p.directions))?;
    out.write("disk_tree.json", tree.to_json()? + "\n")?;
    out.json(
        "schottky.json",
        &json!({
            "genus": group.genus,
            "mapping_error": group.mapping_error,
            "inverse_error": group.inverse_error,
            "tree": check,
            "max_radius": (1..=p.depth).map(|n| tree.max_radius(n)).collect::<Vec<_>>(),
            "circle_margin": margin,
            "box_dimension": delta,
            "box_dimension_previous_depth": delta_coarser,
            "limit_scale": limit.scale,
            "limit_offset": limit.offset,
            "nonconcentration": c0,
        }),
    )?;
    if p.render {
        out.write("disks.svg", tree.to_svg(&group))?;
    }
    Ok(())
}

fn execute(exp: &Experiment, seed: u64, budget: &Budget, out: &mut Outputs) -> Result<()> {
    match exp {
        Experiment::Cantor(p) => run_cantor(p, budget, out),
        Experiment::Discretize(p) => run_discretize(p, seed, budget, out),
        Experiment::Estimate(p) => run_estimate(p, seed, budget, out),
        Experiment::Constants(p) => run_constants(p, out),
        Experiment::FioSweep(p) => run_fio_sweep(p, budget, out),
        Experiment::Contraction(p) => run_contraction(p, budget, out),
        Experiment::Schottky(p) => run_schottky(p, budget, out),
    }
}

/// Executes a config, writing its artifacts and `manifest.json`; returns the manifest.
pub fn run_config(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Manifest> {
    let exp = Experiment::from_config(cfg)?;
    let resolved = ExperimentConfig {
        command: exp.name(),
        parameters: exp.parameters()?,
        ..cfg.clone()
    };
    let budget = resolved.budget.map(|b| Budget::new(b as u128)).unwrap_or_else(Budget::from_env);
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            if n == 0 {
                return Err(Error::invalid("--threads must be positive"));
            }
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?
    };
    let mut out = Outputs::new(&resolved.output_dir)?;
    let start = Instant::now();
    pool.install(|| execute(&exp, resolved.seed, &budget, &mut out))?;
    let wall = start.elapsed().as_secs_f64();
    let mut versions = BTreeMap::new();
    versions.insert("fup-lab".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("manifest_format".to_string(), MANIFEST_FORMAT.to_string());
    let mut artifacts = out.files.clone();
    artifacts.sort();
    let manifest = Manifest {
        seed: resolved.seed,
        config: resolved,
        versions,
        wall_time_s: wall,
        threads: pool.current_num_threads(),
        artifacts,
    };
    out.json(MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Parses a config, or a previous manifest whose resolved config is reused.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
    let parsed = if value.get("config").is_some() {
        serde_json::from_value::<Manifest>(value).map(|m| m.config)
    } else {
        serde_json::from_value::<ExperimentConfig>(value)
    };
    parsed.map_err(|e| Error::invalid(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut ExperimentConfig, g: &GlobalArgs) {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(b) = g.budget {
        cfg.budget = Some(b);
    }
}

pub fn config_from_cli(cli: &Cli) -> Result<ExperimentConfig> {
    let (command, parameters) = match &cli.command {
        Command::Run { config } => {
            let mut cfg = load_config(config)?;
            apply_overrides(&mut cfg, &cli.global);
            return Ok(cfg);
        }
        Command::Cantor(p) => (CommandName::Cantor, serde_json::to_value(p)?),
        Command::Discretize(p) => (CommandName::Discretize, serde_json::to_value(p)?),
        Command::Estimate(p) => (CommandName::Estimate, serde_json::to_value(p)?),
        Command::Constants(p) => (CommandName::Constants, serde_json::to_value(p)?),
        Command::FioSweep(p) => (CommandName::FioSweep, serde_json::to_value(p)?),
        Command::Contraction(p) => (CommandName::Contraction, serde_json::to_value(p)?),
        Command::Schottky(p) => (CommandName::Schottky, serde_json::to_value(p)?),
    };
    let mut cfg = ExperimentConfig {
        command,
        parameters,
        seed: 0,
        output_dir: default_output_dir(),
        budget: None,
    };
    apply_overrides(&mut cfg, &cli.global);
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 2,
        Error::Budget { .. } => 3,
        Error::NonConvergence { .. } => 4,
        Error::Invariant { .. } => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
        Error::Budget { .. } => "budget",
        Error::NonConvergence { .. } => "non_convergence",
        Error::Invariant { .. } => "invariant",
    }
}

/// Structured error report printed to stderr.
pub fn error_report(e: &Error) -> Value {
    json!({ "error": { "kind": error_kind(e), "message": e.to_string(), "exit_code": exit_code(e) } })
}

/// Parses `args` (including the program name) and runs; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = config_from_cli(&cli).and_then(|cfg| run_config(&cfg, cli.global.threads));
    match result {
        Ok(m) => {
            println!(
                "{} wrote {} artifacts to {}",
                serde_json::to_value(m.config.command).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                m.artifacts.len() + 1,
                m.config.output_dir.display()
            );
            0
        }
        Err(e) => {
            eprintln!("{}", error_report(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_defaults_match_serde_defaults() {
        let cli = Cli::try_parse_from(["fup-lab", "cantor"]).unwrap();
        match cli.command {
            Command::Cantor(p) => assert_eq!(p, CantorParams::default()),
            _ => unreachable!(),
        }
        for (args, name) in [
            (vec!["fup-lab", "discretize"], CommandName::Discretize),
            (vec!["fup-lab", "estimate"], CommandName::Estimate),
            (vec!["fup-lab", "constants"], CommandName::Constants),
            (vec!["fup-lab", "fio-sweep"], CommandName::FioSweep),
            (vec!["fup-lab", "contraction"], CommandName::Contraction),
            (vec!["fup-lab", "schottky"], CommandName::Schottky),
        ] {
            let cli = Cli::try_parse_from(args).unwrap();
            let from_flags = config_from_cli(&cli).unwrap();
            let from_file = ExperimentConfig {
                command: name,
                parameters: empty_object(),
                seed: 0,
                output_dir: default_output_dir(),
                budget: None,
            };
            let a = Experiment::from_config(&from_flags).unwrap();
            let b = Experiment::from_config(&from_file).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad: Result<ExperimentConfig> =
            serde_json::from_str(r#"{"command": "cantor", "colour": 1}"#).map_err(Error::from);
        assert!(bad.is_err());
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"command": "cantor", "parameters": {"M": 3, "kmx": 2}}"#).unwrap();
        assert!(Experiment::from_config(&cfg).is_err());
        let nested: ExperimentConfig = serde_json::from_str(
            r#"{"command": "estimate", "parameters": {"measure": {"kind": "cantor", "q": 1}}}"#,
        )
        .unwrap();
        assert!(Experiment::from_config(&nested).is_err());
    }

    #[test]
    fn cartesian_digits() {
        assert_eq!(cantor_digits(&[0, 2], 2), vec![vec![0, 0], vec![0, 2], vec![2, 0], vec![2, 2]]);
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(
            exit_code(&Error::Budget {
                what: "x",
                needed: 2,
                limit: 1
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::NonConvergence {
                iterations: 1,
                last_change: 1.0
            }),
            4
        );
    }
}
