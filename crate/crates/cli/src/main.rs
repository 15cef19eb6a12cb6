//! `palmfield` experiment runner.
//!
//! Every subcommand writes `<subcommand>.csv` and `<subcommand>.json` (the
//! run manifest) into `--out`. Exit status: 0 success, 2 a check failed,
//! 1 error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use palmfield::config::{parse_config, parse_level_grid, Config};
use palmfield::covariance::{
    check_monotonicity_assumption, check_nondegeneracy, default_monotonicity_grids, jet2_law, IsotropicModel,
    ModelRegistry,
};
use palmfield::critdens::{density_curve, write_density_csv};
use palmfield::estimators::{self as est, EdgeRule, EstimateWithCI, McConfig};
use palmfield::sampler::{replicate_seed, ConditionalSampler, FieldSampler, GridSpec};
use palmfield::specfun::{plus_certificate_grid, scan_bessel_inequality, verify_bessel_inequality, BesselInequality};
use palmfield::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "palmfield", version, about = "Level-set topology experiments for planar Gaussian fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key-value config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    level: Option<f64>,
    /// `start:stop:step`, a comma list, or one number.
    #[arg(long, global = true, allow_hyphen_values = true)]
    levels: Option<String>,
    #[arg(long = "R", global = true, allow_hyphen_values = true)]
    radius: Option<f64>,
    #[arg(long = "h", global = true, allow_hyphen_values = true)]
    spacing: Option<f64>,
    #[arg(long, global = true)]
    reps: Option<u64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<u64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    delta: Option<f64>,
    #[arg(long = "r-inner", global = true, allow_hyphen_values = true)]
    r_inner: Option<f64>,
    /// Outer radii for `arm-decay` and `fourarm-count`, comma separated.
    #[arg(long, global = true)]
    radii: Option<String>,
    /// Points `x,y;x,y;...` for `dominance`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    points: Option<String>,
    /// `contained` or `anchored` component counting.
    #[arg(long, global = true)]
    edge: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    margin: Option<f64>,
    /// Run connectivity ratios for models failing the monotonicity check.
    #[arg(long, global = true)]
    exploratory: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Critical-point densities and h over a level grid.
    Densities,
    /// The two Bessel inequalities on [0, 20] and the certificate grid.
    VerifyBessel,
    /// Monotonicity and non-degeneracy checks for a model.
    VerifyAssumptions,
    /// Dump field samples (conditional when --level is given).
    Simulate,
    /// Component densities c_ES and c_LS.
    Components,
    /// Lower/upper/four-arm fractions of conditional saddles.
    SaddleRatio,
    /// Paired finite-difference slope of c_ES.
    Derivative,
    /// Stochastic dominance of conditional fields between two levels.
    Dominance,
    /// Level identities for c_LS and the Euler density.
    Identities,
    /// One-arm probabilities and their log-log slope.
    ArmDecay,
    /// Four-arm fraction of conditional saddles per radius.
    FourarmCount,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Densities => "densities",
            Command::VerifyBessel => "verify-bessel",
            Command::VerifyAssumptions => "verify-assumptions",
            Command::Simulate => "simulate",
            Command::Components => "components",
            Command::SaddleRatio => "saddle-ratio",
            Command::Derivative => "derivative",
            Command::Dominance => "dominance",
            Command::Identities => "identities",
            Command::ArmDecay => "arm-decay",
            Command::FourarmCount => "fourarm-count",
        }
    }
}

/// Flag, then config section, then global config key, then default; every
/// value used is recorded for the manifest.
struct Params<'a> {
    cli: &'a Cli,
    cfg: Config,
    section: &'static str,
    used: BTreeMap<String, Value>,
}

impl<'a> Params<'a> {
    fn text(&mut self, key: &str, flag: Option<String>) -> Option<String> {
        let v = flag.or_else(|| self.cfg.get(self.section, key).map(str::to_string));
        if let Some(v) = &v {
            self.used.insert(key.into(), json!(v));
        }
        v
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        let v = match flag {
            Some(v) => v,
            None => self.cfg.get_f64(self.section, key)?.unwrap_or(default),
        };
        if !v.is_finite() {
            return Err(Error::Configuration(format!("{key} must be finite")));
        }
        self.used.insert(key.into(), json!(v));
        Ok(v)
    }

    fn positive(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        let v = self.f64(key, flag, default)?;
        if !(v > 0.0) {
            return Err(Error::Configuration(format!("{key} must be positive, got {v}")));
        }
        Ok(v)
    }

    fn u64(&mut self, key: &str, flag: Option<u64>, default: u64) -> Result<u64> {
        let v = match flag {
            Some(v) => v,
            None => self.cfg.get_u64(self.section, key)?.unwrap_or(default),
        };
        self.used.insert(key.into(), json!(v));
        Ok(v)
    }

    fn model(&mut self) -> Result<IsotropicModel> {
        let name = self.text("model", self.cli.model.clone()).unwrap_or_else(|| "bf".into());
        self.used.insert("model".into(), json!(name));
        let mut reg = ModelRegistry::new();
        self.cfg.register_kernels(&mut reg)?;
        reg.get(&name)
    }

    /// `--levels`, else `--level`, else `default`.
    fn levels(&mut self, default: &str) -> Result<Vec<f64>> {
        let text = match self.text("levels", self.cli.levels.clone()) {
            Some(t) => t,
            None => match self.cli.level {
                Some(l) => l.to_string(),
                None => self.cfg.get(self.section, "level").unwrap_or(default).to_string(),
            },
        };
        let grid = parse_level_grid(&text)?;
        self.used.insert("levels".into(), json!(grid));
        Ok(grid)
    }

    fn list(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<Vec<f64>> {
        let text = self.text(key, flag).unwrap_or_else(|| default.to_string());
        let v = parse_level_grid(&text)?;
        self.used.insert(key.into(), json!(v));
        Ok(v)
    }

    fn mc(&mut self, default_reps: u64) -> Result<McConfig> {
        let reps = self.u64("reps", self.cli.reps, default_reps)?;
        if reps == 0 {
            return Err(Error::Configuration("reps must be at least 1".into()));
        }
        let seed = self.u64("seed", self.cli.seed, 1)?;
        let workers = self.u64("workers", self.cli.workers, 1)?;
        let edge = match self.text("edge", self.cli.edge.clone()).as_deref() {
            None | Some("contained") => EdgeRule::Contained,
            Some("anchored") => {
                let r = self.cli.radius.or(self.cfg.get_f64(self.section, "R")?).unwrap_or(10.0);
                EdgeRule::Anchored {
                    margin: self.f64("margin", self.cli.margin, 0.5 * r)?,
                }
            }
            Some(other) => return Err(Error::Configuration(format!("unknown edge rule {other:?}"))),
        };
        Ok(McConfig::new(reps as usize, seed)
            .with_workers(workers as usize)
            .with_edge(edge))
    }

    fn grid(&mut self) -> Result<(f64, f64)> {
        let r = self.positive("R", self.cli.radius, 10.0)?;
        let h = self.positive("h", self.cli.spacing, 0.1)?;
        Ok((r, h))
    }
}

struct Output {
    dir: PathBuf,
    name: &'static str,
}

impl Output {
    fn csv(&self) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(format!("{}.csv", self.name)))?))
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

/// Outcome of a subcommand: whether its checks passed, plus extra manifest
/// fields.
struct Outcome {
    passed: bool,
    extra: Value,
}

impl Outcome {
    fn ok() -> Self {
        Outcome {
            passed: true,
            extra: Value::Null,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: check failed", cli.command.name());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let cfg = match &cli.config {
        Some(p) => parse_config(&fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    let name = cli.command.name();
    let mut p = Params {
        cli,
        cfg,
        section: name,
        used: BTreeMap::new(),
    };
    let dir = p.text("out", cli.out.as_ref().map(|d| d.display().to_string())).unwrap_or_else(|| "palmfield-out".into());
    let out = Output {
        dir: PathBuf::from(dir),
        name,
    };
    let outcome = dispatch(cli.command, &mut p, &out)?;
    let seed = p.used.get("seed").cloned().unwrap_or(Value::Null);
    let manifest = json!({
        "subcommand": name,
        "config": p.used,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "started_at": started_at,
        "finished_at": chrono::Utc::now().to_rfc3339(),
        "passed": outcome.passed,
        "details": outcome.extra,
    });
    let mut f = File::create(out.path(&format!("{name}.json")))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest).map_err(|e| Error::Configuration(e.to_string()))?)?;
    Ok(outcome.passed)
}

fn dispatch(cmd: Command, p: &mut Params, out: &Output) -> Result<Outcome> {
    // all parameters are resolved before the output directory is touched
    // or any sampling starts
    match cmd {
        Command::Densities => {
            let model = p.model()?;
            let levels = p.levels("-3:3:0.1")?;
            let law = jet2_law(&model)?;
            let curve = density_curve(&model, &law, &levels)?;
            prepare(out)?;
            write_density_csv(out.csv()?, &curve)?;
            Ok(Outcome::ok())
        }
        Command::VerifyBessel => {
            let s_max = p.positive("s_max", None, 20.0)?;
            let step = p.positive("step", None, 1e-3)?;
            let mut rows = Vec::new();
            for which in [BesselInequality::Minus, BesselInequality::Plus] {
                rows.push((verify_bessel_inequality(which, s_max, step)?, true));
            }
            let cert = scan_bessel_inequality(BesselInequality::Plus, plus_certificate_grid());
            let cert_ok = cert.grid_min > 0.08;
            rows.push((cert, cert_ok));
            prepare(out)?;
            let mut w = out.csv()?;
            writeln!(w, "check,grid,grid_min,grid_argmin,passed")?;
            let mut passed = true;
            for (k, (r, extra_ok)) in rows.iter().enumerate() {
                let grid = if k < 2 { format!("0:{s_max}:{step}") } else { "5:9:0.04".into() };
                let ok = r.passed && *extra_ok;
                passed &= ok;
                writeln!(w, "{},{},{:e},{},{}", r.name, grid, r.grid_min, r.grid_argmin, ok)?;
            }
            Ok(Outcome {
                passed,
                extra: Value::Null,
            })
        }
        Command::VerifyAssumptions => {
            let model = p.model()?;
            let (radial, planar) = default_monotonicity_grids();
            let mono = match check_monotonicity_assumption(&model, &radial, &planar) {
                Ok(m) => Some(m),
                Err(Error::NotApplicable(_)) => None,
                Err(e) => return Err(e),
            };
            let probes = [[0.5, 0.0], [1.0, 0.0], [0.7, 0.7], [2.0, 1.0], [3.0, 0.0], [0.0, 4.5]];
            let nd = check_nondegeneracy(&model, &probes)?;
            prepare(out)?;
            let mut w = out.csv()?;
            writeln!(w, "model,check,value,passed")?;
            let mut passed = true;
            match &mono {
                Some(m) => {
                    passed &= m.passed;
                    writeln!(w, "{},monotonicity,{},{}", model.name(), m.chi, m.passed)?;
                }
                None => writeln!(w, "{},monotonicity,,not-applicable", model.name())?,
            }
            // a degenerate 2-jet (f + laplacian f = 0 for the plane wave) is
            // part of the model, not a failed check
            let exempt = model.degenerate_jet();
            let label = |ok: bool| if ok { "true" } else if exempt { "degenerate-by-model" } else { "false" };
            writeln!(w, "{},sigma0_det,{:e},{}", model.name(), nd.sigma0.normalized, label(nd.sigma0.passed))?;
            writeln!(w, "{},sigma_full_det,{:e},{}", model.name(), nd.sigma_full.normalized, label(nd.sigma_full.passed))?;
            passed &= (nd.sigma0.passed && nd.sigma_full.passed) || exempt;
            for pr in &nd.probes {
                passed &= pr.conditional.passed;
                writeln!(
                    w,
                    "{},probe({};{}),{:e},{}",
                    model.name(),
                    pr.point[0],
                    pr.point[1],
                    pr.conditional.normalized,
                    pr.conditional.passed
                )?;
            }
            Ok(Outcome {
                passed,
                extra: json!({ "monotonicity": mono, "nondegeneracy": nd }),
            })
        }
        Command::Simulate => {
            let model = p.model()?;
            let (r, h) = p.grid()?;
            let mc = p.mc(1)?;
            let level = match p.cli.level {
                Some(l) => Some(p.f64("level", Some(l), 0.0)?),
                None => p.cfg.get_f64(p.section, "level")?.map(|l| p.f64("level", Some(l), 0.0)).transpose()?,
            };
            let grid = GridSpec::new(r, h)?;
            let mut files = Vec::new();
            match level {
                None => {
                    let sampler = FieldSampler::new(&model, grid, mc.params)?;
                    prepare(out)?;
                    for i in 0..mc.n_reps {
                        let s = sampler.draw_seeded(replicate_seed(mc.seed, i as u64));
                        files.push(write_sample(out, i, &s)?);
                    }
                }
                Some(l) => {
                    let cs = ConditionalSampler::new(&model, grid, mc.params)?;
                    let saddle = cs.saddle_sampler(l)?;
                    prepare(out)?;
                    for i in 0..mc.n_reps {
                        let f = cs.draw_seeded(&saddle, replicate_seed(mc.seed, i as u64))?;
                        files.push(write_sample(out, i, &f.sample)?);
                    }
                }
            }
            let mut w = out.csv()?;
            writeln!(w, "index,seed,file")?;
            for (i, (seed, file)) in files.iter().enumerate() {
                writeln!(w, "{i},{seed},{file}")?;
            }
            Ok(Outcome::ok())
        }
        Command::Components => {
            let model = p.model()?;
            let levels = p.levels("0")?;
            let (r, h) = p.grid()?;
            let mc = p.mc(100)?;
            let rows = est::estimate_component_densities(&model, &levels, r, h, &mc)?;
            prepare(out)?;
            let flat: Vec<EstimateWithCI> = rows.into_iter().flat_map(|d| [d.c_es, d.c_ls]).collect();
            est::write_estimates_csv(out.csv()?, &flat)?;
            Ok(Outcome::ok())
        }
        Command::SaddleRatio => {
            let model = p.model()?;
            let levels = p.levels("0")?;
            let (r, h) = p.grid()?;
            let mc = p.mc(100)?;
            let exploratory = p.cli.exploratory || p.cfg.get(p.section, "exploratory") == Some("true");
            p.used.insert("exploratory".into(), json!(exploratory));
            let mut sorted = levels.clone();
            sorted.sort_by(f64::total_cmp);
            let rows = est::estimate_connectivity_ratios(&model, &sorted, r, h, &mc, exploratory)?;
            prepare(out)?;
            let flat: Vec<EstimateWithCI> =
                rows.iter().flat_map(|x| [x.p_lower.clone(), x.p_upper.clone(), x.p_fourarm.clone()]).collect();
            est::write_estimates_csv(out.csv()?, &flat)?;
            let passed = rows
                .windows(2)
                .all(|w| w[1].p_lower.value >= w[0].p_lower.value - 2.0 * w[0].p_lower.combined_se(&w[1].p_lower));
            let failures: Vec<_> = rows.iter().map(|x| json!({"level": x.level, "failures": x.failures})).collect();
            Ok(Outcome {
                passed,
                extra: json!({ "unclassified": failures }),
            })
        }
        Command::Derivative => {
            let model = p.model()?;
            let level = p.f64("level", p.cli.level, 0.0)?;
            let delta = p.f64("delta", p.cli.delta, 0.1)?;
            let (r, h) = p.grid()?;
            let mc = p.mc(100)?;
            let d = est::estimate_derivative_sign(&model, level, delta, r, h, &mc)?;
            prepare(out)?;
            let mut unpaired = d.paired.clone();
            unpaired.quantity = "dc_es_unpaired".into();
            unpaired.std_error = d.unpaired_std_error;
            est::write_estimates_csv(out.csv()?, &[d.paired, unpaired])?;
            Ok(Outcome::ok())
        }
        Command::Dominance => {
            let model = p.model()?;
            let levels = p.levels("0,1")?;
            let [l1, l2] = levels[..] else {
                return Err(Error::Configuration("dominance needs exactly two levels".into()));
            };
            let points = parse_points(&p.text("points", p.cli.points.clone()).unwrap_or_else(|| "1.2,0.4".into()))?;
            let mc = p.mc(1000)?;
            let rep = est::check_stochastic_dominance(&model, &points, l1, l2, &mc)?;
            prepare(out)?;
            let mut w = out.csv()?;
            writeln!(w, "model,level1,level2,x,y,n_reps,statistic,critical_value,passed")?;
            for row in &rep.rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    model.name(),
                    l1,
                    l2,
                    row.point[0],
                    row.point[1],
                    mc.n_reps,
                    row.statistic,
                    row.critical_value,
                    row.passed
                )?;
            }
            Ok(Outcome {
                passed: rep.passed,
                extra: Value::Null,
            })
        }
        Command::Identities => {
            let model = p.model()?;
            let levels = p.levels("-1:1:0.5")?;
            let (r, h) = p.grid()?;
            let mc = p.mc(100)?;
            let rep = est::verify_level_identities(&model, &levels, r, h, &mc)?;
            prepare(out)?;
            let mut flat = Vec::new();
            for row in &rep.rows {
                let mut hrow = row.euler.clone();
                hrow.quantity = "h".into();
                hrow.value = row.h;
                hrow.std_error = 0.0;
                flat.extend([row.c_es.clone(), row.c_es_neg.clone(), row.c_ls.clone(), row.ls_gap.clone(), row.euler.clone(), hrow]);
            }
            est::write_estimates_csv(out.csv()?, &flat)?;
            let checks: Vec<_> = rep
                .rows
                .iter()
                .map(|x| json!({"level": x.level, "ls_passed": x.ls_passed, "euler_passed": x.euler_passed}))
                .collect();
            Ok(Outcome {
                passed: rep.passed,
                extra: json!({ "checks": checks }),
            })
        }
        Command::ArmDecay => {
            let model = p.model()?;
            let level = p.f64("level", p.cli.level, 0.0)?;
            let inner = p.positive("r-inner", p.cli.r_inner, 2.0)?;
            let radii = p.list("radii", p.cli.radii.clone(), "4,8,16")?;
            let h = p.positive("h", p.cli.spacing, 0.1)?;
            let mc = p.mc(100)?;
            let d = est::estimate_arm_decay(&model, level, inner, &radii, h, &mc)?;
            prepare(out)?;
            let mut flat = d.rows.clone();
            let mut slope = d.rows[0].clone();
            slope.quantity = "slope".into();
            slope.radius = f64::NAN;
            slope.value = d.slope;
            slope.std_error = f64::NAN;
            flat.push(slope);
            est::write_estimates_csv(out.csv()?, &flat)?;
            Ok(Outcome::ok())
        }
        Command::FourarmCount => {
            let model = p.model()?;
            let level = p.f64("level", p.cli.level, 0.0)?;
            let radii = p.list("radii", p.cli.radii.clone(), "5,10,20")?;
            let h = p.positive("h", p.cli.spacing, 0.1)?;
            let mc = p.mc(100)?;
            let f = est::estimate_fourarm_fraction(&model, level, &radii, h, &mc)?;
            prepare(out)?;
            est::write_estimates_csv(out.csv()?, &f.rows)?;
            Ok(Outcome {
                passed: true,
                extra: json!({ "unclassified": f.failures }),
            })
        }
    }
}

fn prepare(out: &Output) -> Result<()> {
    fs::create_dir_all(&out.dir)?;
    Ok(())
}

fn write_sample(out: &Output, i: usize, s: &palmfield::sampler::FieldSample) -> Result<(u64, String)> {
    let file = format!("sample_{i:05}.bin");
    s.write_binary(BufWriter::new(File::create(Path::new(&out.dir).join(&file))?))?;
    Ok((s.seed, file))
}

fn parse_points(text: &str) -> Result<Vec<[f64; 2]>> {
    text.split(';')
        .map(|pt| {
            let v = parse_level_grid(pt)?;
            match v[..] {
                [x, y] => Ok([x, y]),
                _ => Err(Error::Configuration(format!("point {pt:?} is not x,y"))),
            }
        })
        .collect()
}
