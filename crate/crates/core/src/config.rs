//! Experiment configuration files.
//!
//! A flat `key = value` format with `#` comments. Keys are `section.key` except
//! for the top-level `controller` and `noise_mode`; `graph.edge` may repeat and
//! vertices are numbered from 1:
//!
//! ```text
//! graph.n = 3
//! graph.edge = 1 2
//! graph.edge = 2 3
//! diffusion.kind = exp-sin
//! diffusion.a = 0.1
//! diffusion.b = 1
//! controller = thm1
//! ppc.default.rho0 = 5
//! ppc.default.rho_inf = 0.1
//! ppc.default.eps = 1.5
//! ppc.2.eps = 3          # override for edge 2
//! sim.xbar0 = 1 -2
//! ```
//!
//! Graph modes: `strict` (default) requires a tree; `exploratory` accepts any
//! graph but only with `controller = none`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use thiserror::Error;

use crate::control::Controller;
use crate::dynamics::{DiffusionFunction, DiffusionKind, NoiseMode, SystemModel};
use crate::graph::Graph;
use crate::ppc::{PerformanceFunction, PpcBank};
use crate::sim::{Scheme, SimConfig};

/// The six-agent reference experiment.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/paper_ref.cfg");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: `{key}`: {message}")]
pub struct ConfigError {
    /// 1-based line number; 0 when the problem is a missing key.
    pub line: usize,
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphMode {
    #[default]
    Strict,
    Exploratory,
}

impl GraphMode {
    fn name(self) -> &'static str {
        match self {
            Self::Strict => "strict",
            Self::Exploratory => "exploratory",
        }
    }
}

/// Per-edge envelope parameters; missing values fall back to `ppc.default`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpcParams {
    pub rho0: Option<f64>,
    pub rho_inf: Option<f64>,
    pub eps: Option<f64>,
}

impl PpcParams {
    fn or(self, fallback: PpcParams) -> PpcParams {
        PpcParams {
            rho0: self.rho0.or(fallback.rho0),
            rho_inf: self.rho_inf.or(fallback.rho_inf),
            eps: self.eps.or(fallback.eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// All agents at the origin.
    Origin,
    Nodes(Vec<f64>),
    /// Relative positions; agent 1 is placed at the origin.
    Relative(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisParams {
    pub gamma: f64,
    pub kappa: f64,
    pub q: u32,
    /// Consensus threshold; defaults to `10 · max_k rho_k∞`.
    pub delta: Option<f64>,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self { gamma: 4.0, kappa: 0.39, q: 2, delta: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    /// 0-based endpoint pairs.
    pub edges: Vec<(usize, usize)>,
    pub graph_mode: GraphMode,
    pub diffusion: DiffusionKind,
    pub lipschitz: Option<f64>,
    pub noise_mode: NoiseMode,
    pub controller: Controller,
    pub ppc_default: PpcParams,
    /// Overrides keyed by 0-based edge index.
    pub ppc_edges: BTreeMap<usize, PpcParams>,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub realizations: usize,
    pub sample_every: usize,
    pub initial: InitialState,
    pub scheme: Scheme,
    pub analysis: AnalysisParams,
}

impl ExperimentConfig {
    pub fn reference() -> Self {
        Self::parse(REFERENCE_CONFIG).expect("shipped config is valid")
    }

    pub fn graph(&self) -> Graph {
        Graph::new(self.n, &self.edges).expect("validated at parse time")
    }

    pub fn diffusion_function(&self) -> DiffusionFunction {
        let g = DiffusionFunction::new(self.diffusion).expect("validated at parse time");
        match self.lipschitz {
            Some(k) => g.with_lipschitz(k).expect("validated at parse time"),
            None => g,
        }
    }

    pub fn edge_params(&self, edge: usize) -> PpcParams {
        self.ppc_edges.get(&edge).copied().unwrap_or_default().or(self.ppc_default)
    }

    pub fn ppc_bank(&self) -> PpcBank {
        PpcBank::new(
            (0..self.edges.len())
                .map(|k| {
                    let p = self.edge_params(k);
                    PerformanceFunction::new(p.rho0.unwrap(), p.rho_inf.unwrap(), p.eps.unwrap())
                        .expect("validated at parse time")
                })
                .collect(),
        )
    }

    pub fn model(&self) -> SystemModel {
        SystemModel::new(self.graph(), self.diffusion_function(), self.noise_mode, self.ppc_bank())
            .expect("sizes agree")
    }

    pub fn x0(&self) -> DVector<f64> {
        match &self.initial {
            InitialState::Origin => DVector::zeros(self.n),
            InitialState::Nodes(x) => DVector::from_column_slice(x),
            InitialState::Relative(xbar) => {
                self.graph().positions_from_relative(xbar).expect("validated at parse time")
            }
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            horizon: self.horizon,
            seed: self.seed,
            sample_every: self.sample_every,
            realizations: self.realizations,
            x0: self.x0(),
            scheme: self.scheme,
        }
    }

    pub fn delta(&self) -> f64 {
        self.analysis.delta.unwrap_or_else(|| {
            10.0 * self.ppc_bank().functions().iter().map(|f| f.rho_inf()).fold(0.0, f64::max)
        })
    }

    /// Normalized text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("graph.n", self.n.to_string());
        for &(a, b) in &self.edges {
            line("graph.edge", format!("{} {}", a + 1, b + 1));
        }
        line("graph.mode", self.graph_mode.name().into());
        match self.diffusion {
            DiffusionKind::Zero => line("diffusion.kind", "zero".into()),
            DiffusionKind::Constant { sigma } => {
                line("diffusion.kind", "constant".into());
                line("diffusion.sigma", fmt_f64(sigma));
            }
            DiffusionKind::Linear { sigma } => {
                line("diffusion.kind", "linear".into());
                line("diffusion.sigma", fmt_f64(sigma));
            }
            DiffusionKind::ExpSin { a, b } => {
                line("diffusion.kind", "exp-sin".into());
                line("diffusion.a", fmt_f64(a));
                line("diffusion.b", fmt_f64(b));
            }
        }
        if let Some(k) = self.lipschitz {
            line("diffusion.lipschitz", fmt_f64(k));
        }
        line(
            "noise_mode",
            match self.noise_mode {
                NoiseMode::Shared => "shared",
                NoiseMode::Independent => "independent",
            }
            .into(),
        );
        line("controller", self.controller.name().into());
        let mut ppc_lines = |prefix: String, p: &PpcParams| {
            for (name, v) in [("rho0", p.rho0), ("rho_inf", p.rho_inf), ("eps", p.eps)] {
                if let Some(v) = v {
                    line(&format!("{prefix}.{name}"), fmt_f64(v));
                }
            }
        };
        ppc_lines("ppc.default".into(), &self.ppc_default);
        for (k, p) in &self.ppc_edges {
            ppc_lines(format!("ppc.{}", k + 1), p);
        }
        line("sim.dt", fmt_f64(self.dt));
        line("sim.horizon", fmt_f64(self.horizon));
        line("sim.seed", self.seed.to_string());
        line("sim.realizations", self.realizations.to_string());
        line("sim.sample_every", self.sample_every.to_string());
        match &self.initial {
            InitialState::Origin => {}
            InitialState::Nodes(x) => line("sim.x0", fmt_list(x)),
            InitialState::Relative(x) => line("sim.xbar0", fmt_list(x)),
        }
        line("sim.scheme", self.scheme.name().into());
        line("analysis.gamma", fmt_f64(self.analysis.gamma));
        line("analysis.kappa", fmt_f64(self.analysis.kappa));
        line("analysis.q", self.analysis.q.to_string());
        if let Some(d) = self.analysis.delta {
            line("analysis.delta", fmt_f64(d));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Parser::default().run(text)
    }

    /// Re-checks a config whose fields were edited in code. Line numbers in the
    /// error refer to [`ExperimentConfig::to_text`].
    pub fn validated(self) -> Result<Self, ConfigError> {
        Self::parse(&self.to_text())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Default)]
struct Parser {
    values: HashMap<String, (usize, String)>,
    edges: Vec<(usize, String)>,
    ppc_edges: BTreeMap<usize, (usize, PpcParams)>,
}

fn err(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { line, key: key.to_owned(), message: message.into() }
}

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str, what: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| err(line, key, format!("expected {what}, got `{raw}`")))
}

fn parse_list(line: usize, key: &str, raw: &str) -> Result<Vec<f64>, ConfigError> {
    raw.split_whitespace().map(|t| parse_value::<f64>(line, key, t, "a number")).collect()
}

const SCALAR_KEYS: [&str; 20] = [
    "graph.n",
    "graph.mode",
    "diffusion.kind",
    "diffusion.a",
    "diffusion.b",
    "diffusion.sigma",
    "diffusion.lipschitz",
    "noise_mode",
    "controller",
    "sim.dt",
    "sim.horizon",
    "sim.seed",
    "sim.realizations",
    "sim.sample_every",
    "sim.x0",
    "sim.xbar0",
    "sim.scheme",
    "analysis.gamma",
    "analysis.kappa",
    "analysis.q",
];

impl Parser {
    fn run(mut self, text: &str) -> Result<ExperimentConfig, ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, content, "expected `key = value`"))?;
            self.insert(line, key.trim(), value.trim())?;
        }
        self.build()
    }

    fn insert(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        if key == "graph.edge" {
            self.edges.push((line, value.to_owned()));
            return Ok(());
        }
        if let Some(rest) = key.strip_prefix("ppc.") {
            return self.insert_ppc(line, key, rest, value);
        }
        if !SCALAR_KEYS.contains(&key) && key != "analysis.delta" {
            return Err(err(line, key, "unknown key"));
        }
        if let Some((first, _)) = self.values.get(key) {
            return Err(err(line, key, format!("duplicate key (first set on line {first})")));
        }
        self.values.insert(key.to_owned(), (line, value.to_owned()));
        Ok(())
    }

    fn insert_ppc(&mut self, line: usize, key: &str, rest: &str, value: &str) -> Result<(), ConfigError> {
        let (target, field) = rest.split_once('.').ok_or_else(|| err(line, key, "unknown key"))?;
        let index = if target == "default" {
            usize::MAX
        } else {
            let k: usize = parse_value(line, key, target, "`default` or an edge number")?;
            if k == 0 {
                return Err(err(line, key, "edges are numbered from 1"));
            }
            k - 1
        };
        let v: f64 = parse_value(line, key, value, "a number")?;
        let entry = self.ppc_edges.entry(index).or_insert((line, PpcParams::default()));
        let slot = match field {
            "rho0" => &mut entry.1.rho0,
            "rho_inf" => &mut entry.1.rho_inf,
            "eps" => &mut entry.1.eps,
            _ => return Err(err(line, key, "unknown key")),
        };
        if slot.is_some() {
            return Err(err(line, key, "duplicate key"));
        }
        *slot = Some(v);
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<(usize, T)>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, raw)) => Ok(Some((*line, parse_value(*line, key, raw, what)?))),
        }
    }

    fn number(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        Ok(self.get::<f64>(key, "a number")?.map(|(_, v)| v))
    }

    fn line_of(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |(l, _)| *l)
    }

    fn build(self) -> Result<ExperimentConfig, ConfigError> {
        let (n_line, n) = self.get::<usize>("graph.n", "a vertex count")?.ok_or_else(|| err(0, "graph.n", "missing"))?;
        let mut edges = Vec::with_capacity(self.edges.len());
        for (line, raw) in &self.edges {
            let parts: Vec<usize> = raw
                .split_whitespace()
                .map(|t| parse_value(*line, "graph.edge", t, "two vertex numbers"))
                .collect::<Result<_, _>>()?;
            match parts[..] {
                [a, b] if a >= 1 && b >= 1 => edges.push((a - 1, b - 1)),
                [_, _] => return Err(err(*line, "graph.edge", "vertices are numbered from 1")),
                _ => return Err(err(*line, "graph.edge", format!("expected two vertex numbers, got `{raw}`"))),
            }
        }
        let graph = Graph::new(n, &edges).map_err(|e| {
            let line = match &e {
                crate::graph::GraphError::SelfLoop { index, .. }
                | crate::graph::GraphError::EndpointOutOfRange { index, .. }
                | crate::graph::GraphError::DuplicateEdge { index, .. } => self.edges[*index].0,
                _ => n_line,
            };
            err(line, if line == n_line { "graph.n" } else { "graph.edge" }, e.to_string())
        })?;

        let graph_mode = match self.get::<String>("graph.mode", "a mode")? {
            None => GraphMode::Strict,
            Some((_, m)) if m == "strict" => GraphMode::Strict,
            Some((_, m)) if m == "exploratory" => GraphMode::Exploratory,
            Some((line, m)) => return Err(err(line, "graph.mode", format!("expected strict or exploratory, got `{m}`"))),
        };

        let kind_line = self.line_of("diffusion.kind");
        let diffusion = match self.get::<String>("diffusion.kind", "a kind")?.map(|(_, k)| k).as_deref() {
            None | Some("zero") => DiffusionKind::Zero,
            Some("constant") => DiffusionKind::Constant { sigma: self.require("diffusion.sigma", kind_line)? },
            Some("linear") => DiffusionKind::Linear { sigma: self.require("diffusion.sigma", kind_line)? },
            Some("exp-sin") => DiffusionKind::ExpSin {
                a: self.require("diffusion.a", kind_line)?,
                b: self.require("diffusion.b", kind_line)?,
            },
            Some(other) => {
                return Err(err(kind_line, "diffusion.kind", format!("expected zero, constant, linear or exp-sin, got `{other}`")))
            }
        };
        let base = DiffusionFunction::new(diffusion).map_err(|e| err(kind_line, "diffusion.kind", e.to_string()))?;
        let lipschitz = self.number("diffusion.lipschitz")?;
        if let Some(k) = lipschitz {
            base.with_lipschitz(k)
                .map_err(|e| err(self.line_of("diffusion.lipschitz"), "diffusion.lipschitz", e.to_string()))?;
        }

        let noise_mode = match self.get::<String>("noise_mode", "a mode")? {
            None => NoiseMode::Shared,
            Some((_, m)) if m == "shared" => NoiseMode::Shared,
            Some((_, m)) if m == "independent" => NoiseMode::Independent,
            Some((line, m)) => return Err(err(line, "noise_mode", format!("expected shared or independent, got `{m}`"))),
        };
        let controller = match self.values.get("controller") {
            None => Controller::None,
            Some((line, raw)) => raw.parse().map_err(|e: crate::control::UnknownController| err(*line, "controller", e.to_string()))?,
        };
        let scheme = match self.values.get("sim.scheme") {
            None => Scheme::default(),
            Some((line, raw)) => raw.parse().map_err(|e: String| err(*line, "sim.scheme", e))?,
        };

        let m = graph.edge_count();
        let mut ppc_default = PpcParams::default();
        let mut ppc_edges = BTreeMap::new();
        for (&k, &(line, p)) in &self.ppc_edges {
            if k == usize::MAX {
                ppc_default = p;
            } else if k >= m {
                return Err(err(line, &format!("ppc.{}", k + 1), format!("graph has only {m} edges")));
            } else {
                ppc_edges.insert(k, p);
            }
        }
        for k in 0..m {
            let p = ppc_edges.get(&k).copied().unwrap_or_default().or(ppc_default);
            let line = self.ppc_edges.get(&k).or(self.ppc_edges.get(&usize::MAX)).map_or(0, |e| e.0);
            let key = format!("ppc.{}", k + 1);
            match (p.rho0, p.rho_inf, p.eps) {
                (Some(r0), Some(ri), Some(e)) => {
                    PerformanceFunction::new(r0, ri, e).map_err(|e| err(line, &key, e.to_string()))?;
                }
                _ => return Err(err(line, &key, "rho0, rho_inf and eps must all be set (directly or via ppc.default)")),
            }
        }

        let dt = self.number("sim.dt")?.unwrap_or(1e-3);
        let horizon = self.number("sim.horizon")?.unwrap_or(5.0);
        let seed = self.get::<u64>("sim.seed", "an unsigned integer")?.map_or(0, |v| v.1);
        let realizations = self.get::<usize>("sim.realizations", "a positive integer")?.map_or(1, |v| v.1);
        let sample_every = self.get::<usize>("sim.sample_every", "a positive integer")?.map_or(10, |v| v.1);
        for (key, ok) in [
            ("sim.dt", dt > 0.0 && dt.is_finite()),
            ("sim.horizon", horizon >= dt && horizon.is_finite()),
            ("sim.realizations", realizations >= 1),
            ("sim.sample_every", sample_every >= 1),
        ] {
            if !ok {
                return Err(err(self.line_of(key), key, "out of range"));
            }
        }

        let initial = match (self.values.get("sim.x0"), self.values.get("sim.xbar0")) {
            (Some(_), Some((line, _))) => return Err(err(*line, "sim.xbar0", "give either sim.x0 or sim.xbar0, not both")),
            (Some((line, raw)), None) => {
                let x = parse_list(*line, "sim.x0", raw)?;
                if x.len() != n {
                    return Err(err(*line, "sim.x0", format!("expected {n} values, got {}", x.len())));
                }
                InitialState::Nodes(x)
            }
            (None, Some((line, raw))) => {
                let xbar = parse_list(*line, "sim.xbar0", raw)?;
                if xbar.len() != m {
                    return Err(err(*line, "sim.xbar0", format!("expected {m} values, got {}", xbar.len())));
                }
                if graph.positions_from_relative(&xbar).is_none() {
                    return Err(err(*line, "sim.xbar0", "not realizable as node positions on this graph"));
                }
                InitialState::Relative(xbar)
            }
            (None, None) => InitialState::Origin,
        };

        let mut analysis = AnalysisParams::default();
        if let Some(g) = self.number("analysis.gamma")? {
            analysis.gamma = g;
        }
        if let Some(k) = self.number("analysis.kappa")? {
            analysis.kappa = k;
        }
        if let Some((line, q)) = self.get::<u32>("analysis.q", "1 or 2")? {
            if q != 1 && q != 2 {
                return Err(err(line, "analysis.q", format!("expected 1 or 2, got {q}")));
            }
            analysis.q = q;
        }
        analysis.delta = self.number("analysis.delta")?;
        if !(analysis.gamma > 0.0) {
            return Err(err(self.line_of("analysis.gamma"), "analysis.gamma", "must be positive"));
        }
        if !(analysis.kappa >= 0.0) {
            return Err(err(self.line_of("analysis.kappa"), "analysis.kappa", "must be non-negative"));
        }

        let config = ExperimentConfig {
            n,
            edges,
            graph_mode,
            diffusion,
            lipschitz,
            noise_mode,
            controller,
            ppc_default,
            ppc_edges,
            dt,
            horizon,
            seed,
            realizations,
            sample_every,
            initial,
            scheme,
            analysis,
        };

        // Cross-field rules.
        let controller_line = self.line_of("controller");
        match graph_mode {
            GraphMode::Strict if !graph.is_tree() => {
                return Err(err(n_line, "graph.mode", "the graph is not a tree; set graph.mode = exploratory"));
            }
            GraphMode::Exploratory if controller.uses_envelope() && !graph.is_tree() => {
                return Err(err(controller_line, "controller", format!("{controller} needs a tree graph")));
            }
            _ => {}
        }
        if controller.uses_envelope() {
            let xbar = graph.relative_positions(&config.x0());
            if let Some(b) = config.ppc_bank().first_breach(xbar.as_slice(), 0.0) {
                let key = if matches!(config.initial, InitialState::Relative(_)) { "sim.xbar0" } else { "sim.x0" };
                return Err(err(
                    self.line_of(key),
                    key,
                    format!("edge {} starts outside its envelope (|{}| >= {})", b.edge + 1, b.xbar, b.rho),
                ));
            }
        }
        Ok(config)
    }

    fn require(&self, key: &str, line: usize) -> Result<f64, ConfigError> {
        self.number(key)?.ok_or_else(|| err(line, key, "required by diffusion.kind"))
    }
}
