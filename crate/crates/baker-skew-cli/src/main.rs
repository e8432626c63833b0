//! `baker-skew`: command-line front end.
//!
//! Exit codes: 0 when the requested certificate passes, 1 when it fails,
//! 2 on usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use baker_skew::artifact::to_json;
use baker_skew::bulging::{self, plan_bulging, verify_bulge_bounds, BulgeRequest};
use baker_skew::dynamics::{choose_x0, iterate, verify_onedim};
use baker_skew::maps::{BaseConfig, SkewConfig, SkewProduct};
use baker_skew::nonbulging::{run_construction, verify_return, ConstructionConfig, ConstructionFile};
use baker_skew::render::{render, write_image, Palette, Plane, RenderJob};
use baker_skew::runge::{fit_auto, fit_with, AutoFitOptions, BasisKind, CompactSetUnion};
use baker_skew::scalar::{Ext, PrecisionConfig};
use baker_skew::Error;
use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde_json::json;

#[derive(Parser)]
#[command(name = "baker-skew", version, about = "Skew products over the Fatou map: orbits, certificates, approximation and rendering")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterate a map from one point and print the orbit as CSV.
    Orbit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_complex)]
        z0: Complex64,
        #[arg(long, value_parser = parse_complex, default_value = "0")]
        w0: Complex64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1e6)]
        escape_re: f64,
        #[arg(long, default_value_t = 3.0)]
        return_radius: f64,
        #[arg(long, value_parser = parse_precision, default_value = "standard")]
        precision: PrecisionConfig,
    },
    /// Certify the real orbit of x0 and the disk estimates on the fiber.
    OnedimVerify {
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Starting point; chosen from delta when absent.
        #[arg(long)]
        x0: Option<f64>,
    },
    /// Choose (N, epsilon) and check both orbit bounds on sampled starts.
    BulgeTest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "L", default_value_t = 10.0)]
        l: f64,
        #[arg(long, default_value_t = 10.0)]
        r: f64,
        #[arg(long = "R", default_value_t = 20.0)]
        r_big: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Order of h in z; estimated when absent.
        #[arg(long)]
        rho1: Option<f64>,
        #[arg(long, value_parser = parse_precision, default_value = "standard")]
        precision: PrecisionConfig,
    },
    /// Estimate the order of h in z from its maximum modulus.
    OrderEstimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        r2: f64,
        #[arg(long, default_value_t = 1e2)]
        r_min: f64,
        #[arg(long, default_value_t = 1e4)]
        r_max: f64,
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
    /// Fit a polynomial to per-set targets on a union of disjoint sets.
    RungeFit {
        /// JSON union description.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        degree: Option<usize>,
        /// Double the degree until every per-set error is below this value.
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 256)]
        max_degree: usize,
        /// Boundary samples per set; defaults to 4 (degree + 1).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum, default_value_t = BasisArg::Monomial)]
        basis: BasisArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the staged perturbation and verify the return bound.
    NonbulgeConstruct {
        #[arg(long, default_value_t = 5)]
        stages: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// JSON base-map description; defaults to w/2 with delta_g = 0.9.
        #[arg(long)]
        g_config: Option<PathBuf>,
        #[arg(long, value_parser = parse_precision, default_value = "standard")]
        precision: PrecisionConfig,
        #[arg(long, default_value_t = 512)]
        max_seed_degree: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the return-bound verification from saved stage files.
    NonbulgeVerify {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Escape-time image of a slice `w = const` or `z = const`.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = PlaneArg::Z)]
        plane: PlaneArg,
        /// The fixed coordinate of the slice.
        #[arg(long, value_parser = parse_complex, default_value = "0")]
        fixed: Complex64,
        #[arg(long, value_parser = parse_complex, default_value = "0")]
        center: Complex64,
        #[arg(long, default_value_t = 8.0)]
        width: f64,
        #[arg(long, default_value_t = 8.0)]
        height: f64,
        #[arg(long, default_value_t = 256)]
        px_w: usize,
        #[arg(long, default_value_t = 256)]
        px_h: usize,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e3)]
        escape_re: f64,
        #[arg(long, default_value_t = 3.0)]
        return_radius: f64,
        #[arg(long, value_enum, default_value_t = PaletteArg::Gray)]
        palette: PaletteArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Monomial,
    Arnoldi,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlaneArg {
    Z,
    W,
}

#[derive(Clone, Copy, ValueEnum)]
enum PaletteArg {
    Gray,
    Color,
}

fn parse_complex(s: &str) -> Result<Complex64, String> {
    if let Some((re, im)) = s.split_once(',') {
        let re = re.trim().parse::<f64>().map_err(|e| e.to_string())?;
        let im = im.trim().parse::<f64>().map_err(|e| e.to_string())?;
        return Ok(Complex64::new(re, im));
    }
    s.trim().parse::<Complex64>().map_err(|_| format!("cannot read '{s}' as a complex number"))
}

fn parse_precision(s: &str) -> Result<PrecisionConfig, String> {
    PrecisionConfig::parse(s).map_err(|e| e.to_string())
}

/// Certificate outcome or error; errors map to exit code 2 except range
/// errors met while certifying, which are certificate failures.
enum Outcome {
    Pass,
    Fail,
}

fn verdict(passed: bool) -> Outcome {
    if passed {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn load_map(path: &Path) -> Result<SkewProduct, Error> {
    let text = std::fs::read_to_string(path)?;
    let config = SkewConfig::from_json(&text)?;
    config.build(path.parent().unwrap_or(Path::new(".")))
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    print!("{}", to_json(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let seed = cli.seed;
    match cli.command {
        Command::Orbit { config, z0, w0, steps, escape_re, return_radius, precision } => {
            let map = load_map(&config)?;
            let (csv, verdict) = match precision {
                PrecisionConfig::Standard => {
                    let t = iterate::<f64>(&map, (z0, w0), steps, escape_re, return_radius)?;
                    (t.to_csv(), t.verdict)
                }
                p @ PrecisionConfig::Extended { .. } => {
                    p.activate();
                    let start = (baker_skew::complex::lift::<Ext>(z0), baker_skew::complex::lift::<Ext>(w0));
                    let t = iterate::<Ext>(&map, start, steps, escape_re, return_radius)?;
                    (t.to_csv(), t.verdict)
                }
            };
            print!("{csv}");
            eprintln!("verdict: {}", verdict.label());
            Ok(Outcome::Pass)
        }
        Command::OnedimVerify { delta, steps, x0 } => {
            let x0 = match x0 {
                Some(x) => x,
                None => choose_x0(delta)?.x0,
            };
            let cert = verify_onedim(x0, delta, steps, seed);
            print_json(&cert)?;
            Ok(verdict(cert.passed))
        }
        Command::BulgeTest { config, l, r, r_big, steps, samples, rho1, precision } => {
            let map = load_map(&config)?;
            let req = BulgeRequest { l, r, r_big, k_steps: steps, sample_count: samples, rho1 };
            let attempt = plan_bulging(&map, &req).and_then(|(setup, plan)| {
                let cert = match precision {
                    PrecisionConfig::Standard => verify_bulge_bounds::<f64>(&map, &setup, &[], seed)?,
                    p @ PrecisionConfig::Extended { .. } => {
                        p.activate();
                        verify_bulge_bounds::<Ext>(&map, &setup, &[], seed)?
                    }
                };
                Ok((plan, cert))
            });
            match attempt {
                Ok((plan, cert)) => {
                    let passed = cert.passed;
                    print_json(&json!({ "plan": plan, "certificate": cert, "precision": precision.label() }))?;
                    if let Some(v) = cert.violations.first() {
                        eprintln!(
                            "violation: sample {} step {} {:?} (Re z = {:.6e}, |z| = {:.6e}, bound {:.6e})",
                            v.sample, v.step, v.kind, v.re_z, v.abs_z, v.bound
                        );
                    }
                    Ok(verdict(passed))
                }
                Err(Error::Range(detail)) => {
                    print_json(&json!({ "passed": false, "detail": detail }))?;
                    eprintln!("violation: {detail}");
                    Ok(Outcome::Fail)
                }
                Err(e) => Err(e),
            }
        }
        Command::OrderEstimate { config, r2, r_min, r_max, points } => {
            let map = load_map(&config)?;
            let grid = bulging::log_spaced_grid(r_min, r_max, points);
            let est = bulging::estimate_order(&map.h, r2, &grid)?;
            print_json(&est)?;
            Ok(Outcome::Pass)
        }
        Command::RungeFit { input, degree, target, max_degree, samples, basis, out } => {
            let text = std::fs::read_to_string(&input)?;
            let union: CompactSetUnion = serde_json::from_str(&text)?;
            union.validate()?;
            let kind = match basis {
                BasisArg::Monomial => BasisKind::ScaledMonomial,
                BasisArg::Arnoldi => BasisKind::Arnoldi,
            };
            let (approx, passed) = match (degree, target) {
                (Some(d), _) => {
                    let n = samples.unwrap_or(4 * (d + 1));
                    let p = fit_with(&union, d, &vec![n; union.pieces.len()], kind)?;
                    let ok = target.map_or(true, |t| p.per_set_error.iter().all(|e| *e < t));
                    (p, ok)
                }
                (None, Some(t)) => {
                    let opts = AutoFitOptions {
                        target: t,
                        start_degree: 8,
                        max_degree,
                        kind,
                        density: 0.0,
                        stagnation: 1.0,
                    };
                    let auto = fit_auto(&union, &opts);
                    eprintln!("auto fit: {}", auto.stop_reason);
                    match auto.best {
                        Some(p) => (p, auto.reached),
                        None => return Err(Error::IllConditioned { degree: opts.start_degree, detail: auto.stop_reason }),
                    }
                }
                (None, None) => return Err(Error::Config("give --degree or --target".into())),
            };
            match out {
                Some(path) => baker_skew::artifact::write_json(&path, &approx)?,
                None => print_json(&approx)?,
            }
            Ok(verdict(passed))
        }
        Command::NonbulgeConstruct { stages, delta, g_config, precision, max_seed_degree, out } => {
            let mut config = ConstructionConfig::new(delta, stages);
            if let Some(path) = g_config {
                let text = std::fs::read_to_string(path)?;
                let g: BaseConfig = serde_json::from_str(&text)?;
                config.g = g;
            }
            config.precision = precision;
            config.seed = seed;
            config.max_seed_degree = max_seed_degree;
            let mut file = run_construction(&config)?;
            let path = file.write(&out)?;
            if let Some(f) = &file.failure {
                eprintln!("stage {} failed: {}", f.stage, f.detail);
            }
            eprintln!("wrote {}", path.display());
            print_json(&json!({
                "passed": file.passed,
                "stages_built": file.stages.len(),
                "failure": file.failure,
                "verify_passed": file.verify.as_ref().map(|v| v.passed),
            }))?;
            Ok(verdict(file.passed))
        }
        Command::NonbulgeVerify { dir } => {
            let file = ConstructionFile::read(&dir)?;
            let report = verify_return(&file)?;
            print_json(&report)?;
            Ok(verdict(report.passed && file.failure.is_none()))
        }
        Command::Render {
            config,
            plane,
            fixed,
            center,
            width,
            height,
            px_w,
            px_h,
            max_iter,
            escape_re,
            return_radius,
            palette,
            out,
        } => {
            let map = load_map(&config)?;
            let plane = match plane {
                PlaneArg::Z => Plane::Z { w: [fixed.re, fixed.im] },
                PlaneArg::W => Plane::W { z: [fixed.re, fixed.im] },
            };
            let job = RenderJob { map, plane, center, width, height, px_w, px_h, max_iter, escape_re, return_radius };
            let grid = render(&job)?;
            let palette = match palette {
                PaletteArg::Gray => Palette::Gray,
                PaletteArg::Color => Palette::Color,
            };
            write_image(&grid, &out, palette)?;
            Ok(Outcome::Pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
