use clap::{Args, Parser, Subcommand};
use linresp::checks::{run_suite, CheckOutcome, SuiteConfig};
use linresp::func::{Expr, Fun};
use linresp::map_core::{expansion_constants, is_good, MapSpec, UnimodalMap};
use linresp::response_lab::{
    build_family, density, dyadic, linear_response_report, nonlip_report, orbit_observable, pt_derivative_experiment,
    tangent_pair_experiment, Family, FamilyConfig, ResponseOptions,
};
use linresp::susceptibility::{
    abelian_scan, default_z_list, divergence_probe, psi1, series, Psi1Options, SeriesOptions, Setup,
};
use linresp::tce::{compose_with_map, horizontal_projection, horizontality, solve_tce, Deformation};
use linresp::transfer::{invariant_decomposition, DensityOptions};
use linresp::{classify_orbit, critical_orbit, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "linresp", version, about = "Linear response experiments for piecewise expanding unimodal maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created when missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Grid size for density computations; overrides the config.
    #[arg(long)]
    grid: Option<usize>,
    /// Largest family parameter; overrides the config.
    #[arg(long)]
    tmax: Option<f64>,
    /// Seed for sampled oracles; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the map and report its critical orbit and expansion constants.
    Validate(Common),
    /// Invariant density on the grid.
    Density(Common),
    /// Regular and saltus parts of the density.
    Decompose(Common),
    /// Solve the twisted cohomological equation for v = X∘f.
    Tce(Common),
    /// Horizontality functional, weighted jump and the (a2) sum.
    Horizontality(Common),
    /// Coefficients of the susceptibility series, or the divergence table when J ≠ 0.
    Susceptibility(Common),
    /// Both routes to Ψ₁.
    Psi1(Common),
    /// Ψ(z) as z ↑ 1 against Ψ₁.
    Abelian(Common),
    /// Response curve of a family with the Richardson slope and Ψ₁.
    Respond(Common),
    /// t ln(1/t) fit of a transversal family.
    Nonlip(Common),
    /// Density distance exponent for a tangent pair of families.
    TangentPair(Common),
    /// B₀ error of the first-order expansion of the conjugated operator.
    PtDerivative(Common),
    /// The full acceptance table.
    AllChecks(Common),
}

/// Observable concentrated near the postcritical orbit.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct OrbitObservable {
    count: usize,
    width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    map: Option<MapSpec>,
    family: Option<FamilyConfig>,
    /// Second family for `tangent-pair`; defaults to `family + t² q`.
    tangent: Option<FamilyConfig>,
    /// Deformation `X`; defaults to the family's.
    x: Option<Expr>,
    /// Project `X` onto the horizontal deformations.
    horizontalize: bool,
    projection_bump: Option<Expr>,
    phi: Option<Expr>,
    /// Replaces `phi` with a mean-zero bump sum on the first postcritical points.
    orbit_observable: Option<OrbitObservable>,
    density: DensityOptions,
    psi1_grid: usize,
    h: f64,
    /// Dyadic exponents `k` for `t = 2^{-k}`.
    k_range: (i32, i32),
    t_values: Option<Vec<f64>>,
    series: SeriesOptions,
    suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: None,
            family: None,
            tangent: None,
            x: None,
            horizontalize: false,
            projection_bump: None,
            phi: None,
            orbit_observable: None,
            density: DensityOptions::default(),
            psi1_grid: 8192,
            h: 1e-2,
            k_range: (6, 13),
            t_values: None,
            series: SeriesOptions::default(),
            suite: SuiteConfig::default(),
        }
    }
}

enum Failure {
    Config(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Run(other),
        }
    }
}

type Outcome = Result<Vec<CheckOutcome>, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(Error::Io(format!("{}: {e}", path.display())))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(c: &Common) -> Result<Ctx, Failure> {
        let mut cfg: RunConfig = match &c.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(n) = c.grid {
            cfg.density.n = n;
            cfg.suite.n = n;
        }
        if let Some(s) = c.seed {
            cfg.suite.seed = s;
        }
        if let Some(t) = c.tmax {
            for fam in [cfg.family.as_mut(), cfg.tangent.as_mut()].into_iter().flatten() {
                set_tmax(fam, t);
            }
        }
        std::fs::create_dir_all(&c.out).map_err(|e| io_err(&c.out, e))?;
        Ok(Ctx { cfg, out: c.out.clone() })
    }

    fn write(&self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.out.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Run(Error::Io(e.to_string())))?;
        self.write(name, &(text + "\n"))
    }

    fn family(&self) -> Result<Option<Family>, Failure> {
        Ok(match &self.cfg.family {
            Some(f) => Some(build_family(f)?),
            None => None,
        })
    }

    fn need_family(&self) -> Result<Family, Failure> {
        self.family()?.ok_or_else(|| Failure::Config("config needs a \"family\"".into()))
    }

    fn map(&self) -> Result<UnimodalMap, Failure> {
        if let Some(spec) = &self.cfg.map {
            return Ok(UnimodalMap::from_spec(spec)?);
        }
        match self.family()? {
            Some(f) => Ok(f.base),
            None => Err(Failure::Config("config needs a \"map\" or a \"family\"".into())),
        }
    }

    fn phi(&self, map: &UnimodalMap) -> Result<Fun, Failure> {
        if let Some(o) = &self.cfg.orbit_observable {
            let (rho, _) = density(map, &self.cfg.density)?;
            return Ok(orbit_observable(map, o.count, o.width, Some(&rho))?.into_fun());
        }
        Ok(self.cfg.phi.clone().unwrap_or_else(|| Expr::poly(&[0.0, 0.0, 1.0])).into_fun())
    }

    fn x(&self, map: &UnimodalMap) -> Result<Fun, Failure> {
        let x = match (&self.cfg.x, self.family()?) {
            (Some(e), _) => e.clone().into_fun(),
            (None, Some(f)) => f.x().ok_or_else(|| Failure::Config("family has no deformation X".into()))?,
            (None, None) => return Err(Failure::Config("config needs \"x\" or a \"family\"".into())),
        };
        if self.cfg.horizontalize {
            let bump = self.cfg.projection_bump.clone().map(Expr::into_fun);
            return Ok(horizontal_projection(map, None, x, bump, None)?.x_h);
        }
        Ok(x)
    }

    fn ts(&self) -> Vec<f64> {
        self.cfg.t_values.clone().unwrap_or_else(|| dyadic(self.cfg.k_range.0, self.cfg.k_range.1))
    }

    fn setup(&self, map: &UnimodalMap, n: usize) -> Result<Setup, Failure> {
        Ok(Setup::from_options(map, &DensityOptions { n, ..self.cfg.density })?)
    }
}

fn set_tmax(f: &mut FamilyConfig, t: f64) {
    match f {
        FamilyConfig::Conjugacy { t_max, .. } | FamilyConfig::TentSlope { t_max, .. } => *t_max = t,
        FamilyConfig::Perturbed { inner, .. } => set_tmax(inner, t),
    }
}

fn check(id: u32, name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> CheckOutcome {
    CheckOutcome { id, name: name.into(), passed, measured, threshold, detail, seconds: 0.0 }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn validate(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let orbit = critical_orbit(&map, 200)?;
    let class = classify_orbit(&orbit, 1e-9 * (map.b - map.a));
    let good = is_good(&map, &orbit, &class);
    let ec = expansion_constants(&map)?;
    let (l, r) = map.turning_slopes();
    ctx.write_json(
        "validate.json",
        &json!({
            "label": map.label(), "a": map.a, "b": map.b, "c": map.c,
            "critical_value": map.critical_value(), "turning_slopes": [l, r],
            "orbit_class": class, "good": good, "expansion": ec,
            "critical_orbit": orbit.points.iter().take(32).collect::<Vec<_>>(),
        }),
    )?;
    Ok(vec![check(0, "map valid", true, ec.lambda_hat, 1.0, format!("lambda_hat={:.6}", ec.lambda_hat))])
}

fn density_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let (rho, dec) = density(&map, &ctx.cfg.density)?;
    let grid = dec.grid();
    let mut csv = String::from("x,rho\n");
    for i in 0..=grid.n {
        let x = grid.node(i);
        csv.push_str(&format!("{},{}\n", fmt17(x), fmt17(rho.materialize(x))));
    }
    ctx.write("density.csv", &csv)?;
    let mass = rho.integral();
    ctx.write_json("density.json", &json!({ "N": grid.n, "integral": mass, "density": rho.to_record() }))?;
    Ok(vec![check(0, "unit mass", (mass - 1.0).abs() < 1e-10, (mass - 1.0).abs(), 1e-10, String::new())])
}

fn decompose(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let dec = invariant_decomposition(&map, &ctx.cfg.density)?;
    ctx.write("decomposition.csv", &dec.to_csv())?;
    let gap = (dec.s1_fit - dec.s1_closure).abs();
    ctx.write_json(
        "decomposition.json",
        &json!({
            "orbit_class": dec.orbit_class, "closure": dec.anchors.closure, "jumps": dec.jump_table(),
            "s1_fit": dec.s1_fit, "s1_closure": dec.s1_closure,
            "refine_iterations": dec.refine_iterations,
        }),
    )?;
    let rel = gap / dec.s1_closure.abs();
    Ok(vec![check(0, "s1 estimates agree", rel <= 0.1, rel, 0.1, String::new())])
}

fn tce_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let x = ctx.x(&map)?;
    let sol = solve_tce(&map, compose_with_map(&map, x), 0.0, None)?;
    let mut csv = String::from("x,alpha,residual\n");
    let mut worst: f64 = 0.0;
    for i in 0..=1000 {
        let y = map.a + (map.b - map.a) * i as f64 / 1000.0;
        let r = sol.residual(y);
        if (y - map.c).abs() > map.exact_hit_tol() {
            worst = worst.max(r.abs());
        }
        csv.push_str(&format!("{},{},{}\n", fmt17(y), fmt17(sol.eval(y)), fmt17(r)));
    }
    ctx.write("tce.csv", &csv)?;
    let bound = sol.residual_bound();
    ctx.write_json(
        "tce.json",
        &json!({ "depth": sol.depth, "tail_bound": sol.tail_bound, "residual_bound": bound,
                 "max_residual": worst, "lambda_hat": sol.lambda_hat }),
    )?;
    Ok(vec![check(0, "tce residual", worst <= bound, worst, bound, String::new())])
}

fn horizontality_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let x = ctx.x(&map)?;
    let dec = invariant_decomposition(&map, &ctx.cfg.density)?;
    let r = horizontality(&map, Some(dec.orbit_class), &Deformation::X(x), Some(&dec), true, None)?;
    ctx.write_json("horizontality.json", &r)?;
    let gap = (r.j.unwrap_or(f64::NAN) - r.j_closed.unwrap_or(f64::NAN)).abs();
    Ok(vec![check(0, "weighted jump identity", gap <= 1e-6, gap, 1e-6, format!("J={:?}", r.j))])
}

fn susceptibility_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let x = ctx.x(&map)?;
    let phi = ctx.phi(&map)?;
    let setup = ctx.setup(&map, ctx.cfg.density.n)?;
    let j = setup.weighted_jump(x.as_ref());
    if j.abs() > Psi1Options::default().j_tol {
        let d = divergence_probe(&setup, &x, &phi, 400)?;
        ctx.write_json("divergence.json", &d)?;
        return Ok(vec![check(0, "series diverges with J", true, j, 0.0, "J != 0: divergence table written".into())]);
    }
    let ser = series(&setup, &x, &phi, "X", "phi", &ctx.cfg.series)?;
    ctx.write("series.csv", &ser.to_csv())?;
    ctx.write_json("series.json", &ser)?;
    let gap = ser.direct_dual_gap;
    Ok(vec![check(0, "direct and dual coefficients", gap <= 1e-3, gap, 1e-3, format!("dual={}", ser.dual))])
}

fn psi1_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let x = ctx.x(&map)?;
    let phi = ctx.phi(&map)?;
    let setup = ctx.setup(&map, ctx.cfg.psi1_grid)?;
    let r = psi1(&setup, &x, &phi, None, &Psi1Options::default())?;
    ctx.write_json("psi1.json", &r)?;
    let rel = (r.psi1 - r.psi1_alpha).abs() / r.psi1.abs().max(0.01);
    Ok(vec![check(0, "two-route psi1", rel <= 5e-3, rel, 5e-3, format!("psi1={}", fmt17(r.psi1)))])
}

fn abelian_cmd(ctx: &Ctx) -> Outcome {
    let map = ctx.map()?;
    let x = ctx.x(&map)?;
    let phi = ctx.phi(&map)?;
    let setup = ctx.setup(&map, ctx.cfg.density.n)?;
    let r = psi1(&setup, &x, &phi, None, &Psi1Options::default())?;
    let ser = series(&setup, &x, &phi, "X", "phi", &ctx.cfg.series)?;
    let ab = abelian_scan(&ser, r.psi1, &default_z_list());
    ctx.write("series.csv", &ser.to_csv())?;
    ctx.write_json("psi1.json", &r)?;
    ctx.write_json("abelian.json", &ab)?;
    let rel = (ab.extrapolated - r.psi1).abs() / r.psi1.abs().max(0.01);
    Ok(vec![check(0, "abelian limit", rel <= 0.01, rel, 0.01, format!("limit={}", fmt17(ab.extrapolated)))])
}

fn respond(ctx: &Ctx) -> Outcome {
    let fam = ctx.need_family()?;
    let phi = ctx.phi(&fam.base)?;
    let opts =
        ResponseOptions { h: ctx.cfg.h, density: ctx.cfg.density, psi1_grid: ctx.cfg.psi1_grid, ..Default::default() };
    let r = linear_response_report(&fam, &phi, &opts)?;
    ctx.write("response.csv", &r.curve.to_csv())?;
    ctx.write_json(
        "fit.json",
        &json!({ "fit": r.fit, "J": r.j, "horizontal": r.horizontal,
        "abs_diff": r.abs_diff, "rel_diff": r.rel_diff, "oracle_slope": r.oracle_slope }),
    )?;
    if let Some(p) = &r.psi1 {
        ctx.write_json("psi1.json", p)?;
    }
    let mut out = Vec::new();
    match r.rel_diff {
        Some(rel) => {
            out.push(check(0, "slope matches psi1", rel <= 0.02, rel, 0.02, format!("slope={}", fmt17(r.fit.slope))))
        }
        None => out.push(check(0, "slope", true, r.fit.slope, f64::NAN, "not horizontal: psi1 undefined".into())),
    }
    Ok(out)
}

fn nonlip(ctx: &Ctx) -> Outcome {
    let fam = ctx.need_family()?;
    let phi = ctx.phi(&fam.base)?;
    let r = nonlip_report(&fam, &phi, &ctx.ts(), &ctx.cfg.density)?;
    let mut csv = String::from("t,dR,l1dist,l1ratio\n");
    for i in 0..r.t_values.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt17(r.t_values[i]),
            fmt17(r.dr[i]),
            fmt17(r.rho_l1_dist[i]),
            fmt17(r.l1_ratio[i])
        ));
    }
    ctx.write("response.csv", &csv)?;
    ctx.write_json("fit.json", &r)?;
    let ratio = r.variance_ratio.unwrap_or(f64::NAN);
    let passed = r.sign_consistent && ratio >= 1.1;
    Ok(vec![check(
        0,
        "t ln t signature",
        passed,
        ratio,
        1.1,
        format!("K={:?} consistent={}", r.tlnt_coeff, r.sign_consistent),
    )])
}

fn tangent_pair(ctx: &Ctx) -> Outcome {
    let f_cfg = ctx.cfg.family.clone().ok_or_else(|| Failure::Config("config needs a \"family\"".into()))?;
    let g_cfg = ctx.cfg.tangent.clone().unwrap_or_else(|| FamilyConfig::Perturbed {
        inner: Box::new(f_cfg.clone()),
        bump: Expr::poly(&[0.0, 0.5, -0.5]),
        power: 2,
    });
    let (f, g) = (build_family(&f_cfg)?, build_family(&g_cfg)?);
    let r = tangent_pair_experiment(&f, &g, &ctx.ts(), &ctx.cfg.density)?;
    ctx.write_json("tangent.json", &r)?;
    Ok(vec![check(0, "xi above 1", r.passed, r.xi_hat.unwrap_or(f64::NAN), 1.0, format!("identical={}", r.identical))])
}

fn pt_derivative(ctx: &Ctx) -> Outcome {
    let fam = ctx.need_family()?;
    let dec = invariant_decomposition(&fam.base, &ctx.cfg.density)?;
    let r = pt_derivative_experiment(&fam, &dec, &ctx.ts())?;
    ctx.write_json("pt.json", &r)?;
    let e = r.exponent.unwrap_or(f64::NAN);
    Ok(vec![check(0, "second-order remainder", (1.5..=2.5).contains(&e), e, 1.5, "exponent in [1.5, 2.5]".into())])
}

fn all_checks(ctx: &Ctx) -> Outcome {
    Ok(run_suite(&ctx.cfg.suite))
}

fn run(cmd: &Command) -> Outcome {
    let (common, f): (&Common, fn(&Ctx) -> Outcome) = match cmd {
        Command::Validate(c) => (c, validate),
        Command::Density(c) => (c, density_cmd),
        Command::Decompose(c) => (c, decompose),
        Command::Tce(c) => (c, tce_cmd),
        Command::Horizontality(c) => (c, horizontality_cmd),
        Command::Susceptibility(c) => (c, susceptibility_cmd),
        Command::Psi1(c) => (c, psi1_cmd),
        Command::Abelian(c) => (c, abelian_cmd),
        Command::Respond(c) => (c, respond),
        Command::Nonlip(c) => (c, nonlip),
        Command::TangentPair(c) => (c, tangent_pair),
        Command::PtDerivative(c) => (c, pt_derivative),
        Command::AllChecks(c) => (c, all_checks),
    };
    let ctx = Ctx::load(common)?;
    let start = std::time::Instant::now();
    let mut checks = f(&ctx)?;
    let secs = start.elapsed().as_secs_f64();
    for c in checks.iter_mut().filter(|c| c.seconds == 0.0) {
        c.seconds = secs;
    }
    ctx.write_json("checks.json", &checks)?;
    Ok(checks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(checks) => {
            for c in &checks {
                println!("{}", c.line());
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Config(m)) => {
            eprintln!("{}", json!({ "error": "Config", "message": m }));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
