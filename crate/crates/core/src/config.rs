//! Run configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! [section]          # optional; prefixes following keys with `section.`
//! section.key = value
//! ```
//!
//! Blank lines and `#` comments are ignored. Keys are case sensitive and may
//! appear at most once. Relative paths resolve against the directory of the
//! config file. [`RunConfig::to_text`] writes the effective configuration in
//! the same grammar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adjoint::ProjectionMode;
use crate::error::{Error, Result};
use crate::forward::{InitialGuess, LinearMethod, SolverConfig};
use crate::inversion::{GradientRepresentation, OptimizationConfig};
use crate::mesh::BedProfile;
use crate::tensor::PhysicsParams;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    File(PathBuf),
    Slab {
        length: f64,
        height: f64,
        nx: usize,
        ny: usize,
        bed: BedProfile,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoeffSource {
    Constant(f64),
    Csv(PathBuf),
    /// Smooth synthetic profile used for twin experiments.
    Twin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsSource {
    File(PathBuf),
    /// Generated from the twin profiles with `noise` standard deviation.
    Twin { noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaylorDirection {
    /// Seeded uniform entries in `[-1, 1]`.
    Random,
    Constant { b: f64, tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    pub physics: PhysicsParams,
    pub solver: SolverConfig,
    pub optim: OptimizationConfig,
    pub coeff_b: CoeffSource,
    pub coeff_tau: CoeffSource,
    pub obs: ObsSource,
    pub obs_mode: ProjectionMode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub write_vtk: bool,
    pub matrix_market: bool,
    pub verify_samples: usize,
    pub verify_discrete_samples: usize,
    pub taylor_direction: TaylorDirection,
    pub taylor_h: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mesh: MeshSource::Slab {
                length: 2.0,
                height: 1.0,
                nx: 16,
                ny: 8,
                bed: BedProfile::Flat,
            },
            physics: PhysicsParams::default(),
            solver: SolverConfig::default(),
            optim: OptimizationConfig::default(),
            coeff_b: CoeffSource::Constant(1.0),
            coeff_tau: CoeffSource::Constant(0.5),
            obs: ObsSource::Twin { noise: 0.0 },
            obs_mode: ProjectionMode::FullVector,
            seed: 0,
            out_dir: PathBuf::from("out"),
            write_vtk: true,
            matrix_market: false,
            verify_samples: 100_000,
            verify_discrete_samples: 5,
            taylor_direction: TaylorDirection::Random,
            taylor_h: vec![1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3],
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("config line {ln}: unterminated section header")))?
                    .trim();
                section = if name.is_empty() { String::new() } else { format!("{name}.") };
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {ln}: expected `key = value`, got `{line}`")))?;
            let key = format!("{section}{}", k.trim());
            if key.is_empty() || key.ends_with('.') {
                return Err(Error::Parse(format!("config line {ln}: empty key")));
            }
            if let Some((first, _)) = map.insert(key.clone(), (ln, v.trim().to_string())) {
                return Err(Error::config(key, format!("duplicate entry (lines {first} and {ln})")));
            }
        }
        Ok(Entries { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("expected {what}, got `{v}`"))),
        }
    }

    fn f64(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(x) = self.parsed::<f64>(key, "a number")? {
            if !x.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
            *slot = x;
        }
        Ok(())
    }

    fn usize(&mut self, key: &str, slot: &mut usize) -> Result<()> {
        if let Some(x) = self.parsed(key, "a non-negative integer")? {
            *slot = x;
        }
        Ok(())
    }

    fn bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(x) = self.parsed(key, "true or false")? {
            *slot = x;
        }
        Ok(())
    }
}

fn number_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::config(key, format!("expected comma-separated numbers, got `{v}`")))
        })
        .collect()
}

fn resolve(base: &Path, key: &str, raw: &str) -> Result<PathBuf> {
    let p = Path::new(raw);
    let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !p.exists() {
        return Err(Error::config(key, format!("file `{}` does not exist", p.display())));
    }
    Ok(p)
}

fn coeff_source(base: &Path, key: &str, v: &str) -> Result<CoeffSource> {
    if v == "twin" {
        return Ok(CoeffSource::Twin);
    }
    if let Some(x) = v.strip_prefix("constant:") {
        return x
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(CoeffSource::Constant)
            .ok_or_else(|| Error::config(key, format!("bad constant `{x}`")));
    }
    if let Some(path) = v.strip_prefix("csv:") {
        return Ok(CoeffSource::Csv(resolve(base, key, path.trim())?));
    }
    Err(Error::config(key, format!("expected constant:<x>, csv:<path> or twin, got `{v}`")))
}

fn coeff_text(c: &CoeffSource) -> String {
    match c {
        CoeffSource::Constant(x) => format!("constant:{x:?}"),
        CoeffSource::Csv(p) => format!("csv:{}", p.display()),
        CoeffSource::Twin => "twin".into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        Self::parse(&text, &base)
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let mut c = RunConfig {
            out_dir: base.join("out"),
            ..RunConfig::default()
        };

        if let Some(f) = e.take("mesh.file") {
            c.mesh = MeshSource::File(resolve(base, "mesh.file", &f)?);
            for k in ["mesh.length", "mesh.height", "mesh.nx", "mesh.ny", "mesh.bed", "mesh.bed_amplitude", "mesh.bed_periods"] {
                if e.map.contains_key(k) {
                    return Err(Error::config(k, "conflicts with mesh.file"));
                }
            }
        } else if let MeshSource::Slab { length, height, nx, ny, bed } = &mut c.mesh {
            e.f64("mesh.length", length)?;
            e.f64("mesh.height", height)?;
            e.usize("mesh.nx", nx)?;
            e.usize("mesh.ny", ny)?;
            let (mut amplitude, mut periods) = (0.05, 1.0);
            e.f64("mesh.bed_amplitude", &mut amplitude)?;
            e.f64("mesh.bed_periods", &mut periods)?;
            match e.take("mesh.bed").as_deref() {
                None | Some("flat") => *bed = BedProfile::Flat,
                Some("sine") => *bed = BedProfile::Sine { amplitude, periods },
                Some(v) => return Err(Error::config("mesh.bed", format!("expected flat or sine, got `{v}`"))),
            }
            if !(*length > 0.0 && *height > 0.0) {
                return Err(Error::config("mesh.length", "slab length and height must be > 0"));
            }
            if *nx < 2 || *ny < 2 {
                return Err(Error::config("mesh.nx", "mesh.nx and mesh.ny must be >= 2"));
            }
        }

        let ph = &mut c.physics;
        e.f64("physics.p", &mut ph.p)?;
        ph.s = ph.p;
        e.f64("physics.s", &mut ph.s)?;
        e.f64("physics.delta", &mut ph.delta)?;
        e.f64("physics.mu0", &mut ph.mu0)?;
        if let Some(v) = e.take("physics.rho_g") {
            let xs = number_list("physics.rho_g", &v)?;
            if xs.len() != 2 {
                return Err(Error::config("physics.rho_g", "expected two components `x, y`"));
            }
            ph.rho_g = [xs[0], xs[1]];
        }
        e.f64("physics.eps1", &mut ph.eps1)?;
        e.f64("physics.eps2", &mut ph.eps2)?;
        e.f64("physics.c1", &mut ph.c1)?;
        e.f64("physics.C1", &mut ph.big_c1)?;
        e.f64("physics.C2", &mut ph.big_c2)?;
        ph.validate().map_err(|err| match err {
            Error::InvalidParameter(m) => Error::config("physics", m),
            other => other,
        })?;
        if !(ph.delta > 0.0) {
            return Err(Error::config(
                "physics.delta",
                "must be > 0: the Newton, adjoint and derivative checks differentiate the power law",
            ));
        }

        let so = &mut c.solver;
        e.f64("solver.rel_tol", &mut so.rel_tol)?;
        e.f64("solver.abs_tol", &mut so.abs_tol)?;
        e.usize("solver.max_iter", &mut so.max_iter)?;
        e.f64("solver.backtrack", &mut so.backtrack)?;
        e.f64("solver.sufficient_decrease", &mut so.sufficient_decrease)?;
        e.usize("solver.max_halvings", &mut so.max_halvings)?;
        e.bool("solver.continuation", &mut so.continuation)?;
        let (mut ltol, mut lmax) = (1e-12, 5000);
        e.f64("solver.linear_tol", &mut ltol)?;
        e.usize("solver.linear_max_iter", &mut lmax)?;
        match e.take("solver.linear").as_deref() {
            None | Some("direct") => so.linear = LinearMethod::Direct,
            Some("minres") => so.linear = LinearMethod::Iterative { tol: ltol, max_iter: lmax },
            Some(v) => return Err(Error::config("solver.linear", format!("expected direct or minres, got `{v}`"))),
        }
        match e.take("solver.initial_guess").as_deref() {
            None | Some("zero") => so.initial_guess = InitialGuess::Zero,
            Some("linear") => so.initial_guess = InitialGuess::P2Warmstart,
            Some(v) => {
                return Err(Error::config("solver.initial_guess", format!("expected zero or linear, got `{v}`")))
            }
        }
        so.validate().map_err(|err| Error::config("solver", err.to_string()))?;

        let op = &mut c.optim;
        e.usize("optim.max_iter", &mut op.max_iter)?;
        e.f64("optim.armijo", &mut op.armijo)?;
        e.f64("optim.grad_tol", &mut op.grad_tol)?;
        e.f64("optim.step_init", &mut op.step_init)?;
        e.f64("optim.grow", &mut op.grow)?;
        e.f64("optim.shrink", &mut op.shrink)?;
        e.usize("optim.max_backtracks", &mut op.max_backtracks)?;
        e.bool("optim.barzilai_borwein", &mut op.barzilai_borwein)?;
        let mut length = 0.25;
        e.f64("optim.smoothing_length", &mut length)?;
        match e.take("optim.gradient").as_deref() {
            None | Some("h1") => op.representation = GradientRepresentation::H1Smoothed { length },
            Some("l2") => op.representation = GradientRepresentation::L2,
            Some(v) => return Err(Error::config("optim.gradient", format!("expected l2 or h1, got `{v}`"))),
        }
        op.validate().map_err(|err| Error::config("optim", err.to_string()))?;

        if let Some(v) = e.take("coeff.B") {
            c.coeff_b = coeff_source(base, "coeff.B", &v)?;
        }
        if let Some(v) = e.take("coeff.tau") {
            c.coeff_tau = coeff_source(base, "coeff.tau", &v)?;
        }

        let mut noise = 0.0;
        e.f64("obs.noise", &mut noise)?;
        if noise < 0.0 {
            return Err(Error::config("obs.noise", "must be >= 0"));
        }
        let file = e.take("obs.file");
        match e.take("obs.source").as_deref() {
            None | Some("twin") => {
                if file.is_some() {
                    return Err(Error::config("obs.file", "requires obs.source = file"));
                }
                c.obs = ObsSource::Twin { noise };
            }
            Some("file") => {
                let f = file.ok_or_else(|| Error::config("obs.file", "missing (obs.source = file)"))?;
                c.obs = ObsSource::File(resolve(base, "obs.file", &f)?);
            }
            Some(v) => return Err(Error::config("obs.source", format!("expected twin or file, got `{v}`"))),
        }
        if let Some(v) = e.take("obs.mode") {
            c.obs_mode = ProjectionMode::parse(&v)
                .ok_or_else(|| Error::config("obs.mode", format!("expected full_vector or tangential, got `{v}`")))?;
        }

        if let Some(s) = e.parsed("seed", "a non-negative integer")? {
            c.seed = s;
        }
        if let Some(v) = e.take("output.dir") {
            let p = Path::new(&v);
            c.out_dir = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        }
        e.bool("output.vtk", &mut c.write_vtk)?;
        e.bool("output.matrix_market", &mut c.matrix_market)?;

        e.usize("verify.samples", &mut c.verify_samples)?;
        e.usize("verify.discrete_samples", &mut c.verify_discrete_samples)?;
        if c.verify_samples == 0 {
            return Err(Error::config("verify.samples", "must be > 0"));
        }

        match e.take("taylor.direction").as_deref() {
            None | Some("random") => c.taylor_direction = TaylorDirection::Random,
            Some(v) => {
                let xs = v
                    .strip_prefix("constant:")
                    .map(|r| number_list("taylor.direction", r))
                    .transpose()?
                    .filter(|xs| xs.len() == 2)
                    .ok_or_else(|| {
                        Error::config("taylor.direction", format!("expected random or constant:<dB>,<dtau>, got `{v}`"))
                    })?;
                c.taylor_direction = TaylorDirection::Constant { b: xs[0], tau: xs[1] };
            }
        }
        if let Some(v) = e.take("taylor.h") {
            c.taylor_h = number_list("taylor.h", &v)?;
            if c.taylor_h.len() < 2 || c.taylor_h.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::config("taylor.h", "needs at least two positive step sizes"));
            }
        }

        if let Some((key, (ln, _))) = e.map.into_iter().next() {
            return Err(Error::config(key, format!("unknown key (line {ln})")));
        }
        Ok(c)
    }

    /// Effective configuration in the input grammar; [`RunConfig::parse`]
    /// reproduces `self` from it.
    pub fn to_text(&self) -> String {
        let mut o = String::from("# effective configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        match &self.mesh {
            MeshSource::File(p) => kv("mesh.file", p.display().to_string()),
            MeshSource::Slab { length, height, nx, ny, bed } => {
                kv("mesh.length", format!("{length:?}"));
                kv("mesh.height", format!("{height:?}"));
                kv("mesh.nx", nx.to_string());
                kv("mesh.ny", ny.to_string());
                match bed {
                    BedProfile::Sine { amplitude, periods } => {
                        kv("mesh.bed", "sine".into());
                        kv("mesh.bed_amplitude", format!("{amplitude:?}"));
                        kv("mesh.bed_periods", format!("{periods:?}"));
                    }
                    _ => kv("mesh.bed", "flat".into()),
                }
            }
        }
        let ph = &self.physics;
        kv("physics.p", format!("{:?}", ph.p));
        kv("physics.s", format!("{:?}", ph.s));
        kv("physics.delta", format!("{:?}", ph.delta));
        kv("physics.mu0", format!("{:?}", ph.mu0));
        kv("physics.rho_g", format!("{:?}, {:?}", ph.rho_g[0], ph.rho_g[1]));
        kv("physics.eps1", format!("{:?}", ph.eps1));
        kv("physics.eps2", format!("{:?}", ph.eps2));
        kv("physics.c1", format!("{:?}", ph.c1));
        kv("physics.C1", format!("{:?}", ph.big_c1));
        kv("physics.C2", format!("{:?}", ph.big_c2));
        let so = &self.solver;
        kv("solver.rel_tol", format!("{:?}", so.rel_tol));
        kv("solver.abs_tol", format!("{:?}", so.abs_tol));
        kv("solver.max_iter", so.max_iter.to_string());
        kv("solver.backtrack", format!("{:?}", so.backtrack));
        kv("solver.sufficient_decrease", format!("{:?}", so.sufficient_decrease));
        kv("solver.max_halvings", so.max_halvings.to_string());
        kv("solver.continuation", so.continuation.to_string());
        match so.linear {
            LinearMethod::Direct => kv("solver.linear", "direct".into()),
            LinearMethod::Iterative { tol, max_iter } => {
                kv("solver.linear", "minres".into());
                kv("solver.linear_tol", format!("{tol:?}"));
                kv("solver.linear_max_iter", max_iter.to_string());
            }
        }
        kv(
            "solver.initial_guess",
            match so.initial_guess {
                InitialGuess::Zero => "zero",
                InitialGuess::P2Warmstart => "linear",
            }
            .into(),
        );
        let op = &self.optim;
        kv("optim.max_iter", op.max_iter.to_string());
        kv("optim.armijo", format!("{:?}", op.armijo));
        kv("optim.grad_tol", format!("{:?}", op.grad_tol));
        kv("optim.step_init", format!("{:?}", op.step_init));
        kv("optim.grow", format!("{:?}", op.grow));
        kv("optim.shrink", format!("{:?}", op.shrink));
        kv("optim.max_backtracks", op.max_backtracks.to_string());
        kv("optim.barzilai_borwein", op.barzilai_borwein.to_string());
        match op.representation {
            GradientRepresentation::L2 => kv("optim.gradient", "l2".into()),
            GradientRepresentation::H1Smoothed { length } => {
                kv("optim.gradient", "h1".into());
                kv("optim.smoothing_length", format!("{length:?}"));
            }
        }
        kv("coeff.B", coeff_text(&self.coeff_b));
        kv("coeff.tau", coeff_text(&self.coeff_tau));
        match &self.obs {
            ObsSource::File(p) => {
                kv("obs.source", "file".into());
                kv("obs.file", p.display().to_string());
            }
            ObsSource::Twin { noise } => {
                kv("obs.source", "twin".into());
                kv("obs.noise", format!("{noise:?}"));
            }
        }
        kv("obs.mode", self.obs_mode.as_str().into());
        kv("seed", self.seed.to_string());
        kv("output.dir", self.out_dir.display().to_string());
        kv("output.vtk", self.write_vtk.to_string());
        kv("output.matrix_market", self.matrix_market.to_string());
        kv("verify.samples", self.verify_samples.to_string());
        kv("verify.discrete_samples", self.verify_discrete_samples.to_string());
        match self.taylor_direction {
            TaylorDirection::Random => kv("taylor.direction", "random".into()),
            TaylorDirection::Constant { b, tau } => kv("taylor.direction", format!("constant:{b:?},{tau:?}")),
        }
        kv(
            "taylor.h",
            self.taylor_h.iter().map(|h| format!("{h:?}")).collect::<Vec<_>>().join(", "),
        );
        o
    }
}
