use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qlswitch::jsr::{word_count, PRODUCT_CAP};
use qlswitch::mdp::{load_problem, policy_count, Problem, DEFAULT_POLICY_CAP};
use qlswitch::presets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Per-policy mode matrices and their spectral norms.
    Modes,
    /// Bounded-depth joint spectral radius bracket.
    Jsr,
    /// Truncated Lyapunov certificate and sampled drift checks.
    Lyap,
    /// Boundary points of the truncated Lyapunov norm ball.
    Normball,
    /// Deterministic, i.i.d. or Markovian runs.
    Simulate,
    /// Error envelopes from the certificate constants.
    Certify,
    /// Drift constants and regularization-dependent JSR bounds.
    Regbounds,
    /// List the built-in examples.
    Presets,
}

impl Command {
    /// Works from the mode family alone, so α is not range-checked.
    pub fn family_only(self) -> bool {
        matches!(
            self,
            Command::Modes | Command::Jsr | Command::Lyap | Command::Normball | Command::Regbounds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Det,
    Iid,
    Markov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Plain,
    Regularized,
}

/// Flags shared by every subcommand. Unused flags are ignored.
#[derive(Debug, Clone, Args, Default)]
pub struct Flags {
    /// Problem file (JSON).
    #[arg(long, global = true, conflicts_with = "preset")]
    pub problem: Option<PathBuf>,
    /// Built-in example name (see `presets`).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Lyapunov contraction factor; defaults to the preset value or to
    /// the midpoint between the JSR upper bound and 1.
    #[arg(long, global = true)]
    pub beta_eps: Option<f64>,
    /// Lyapunov truncation depth T.
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Maximum product length for the JSR bracket.
    #[arg(long, global = true)]
    pub jsr_depth: Option<usize>,
    /// Skip product branches that cannot raise the lower bound.
    #[arg(long, global = true)]
    pub prune: bool,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Initial parameter, comma separated.
    #[arg(long, global = true, allow_hyphen_values = true, value_delimiter = ',')]
    pub theta0: Option<Vec<f64>>,
    /// Fixed-point solver tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
    /// Markov initial state-action as 1-based `s,a`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub x0: Option<Vec<usize>>,
    /// Mesh resolution (points per angle).
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Allow pseudo-random radial samples when m is not 2 or 3.
    #[arg(long, global = true)]
    pub radial: bool,
    /// Random points for the drift check.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rerun the configuration embedded in a previous output file.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
}

/// Fully resolved run configuration; embedded in every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub problem: Option<PathBuf>,
    pub preset: Option<String>,
    pub alpha: f64,
    pub eta: f64,
    pub beta_eps: Option<f64>,
    pub depth: usize,
    pub jsr_depth: usize,
    pub prune: bool,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub theta0: Vec<f64>,
    pub tol: f64,
    pub kind: KindArg,
    pub variant: VariantArg,
    pub x0: Option<(usize, usize)>,
    pub resolution: usize,
    pub radial: bool,
    pub samples: usize,
}

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_JSR_DEPTH: usize = 6;
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_SAMPLES: usize = 1000;

/// Loads the problem named by the flags and applies α/η overrides.
pub fn load(problem: &Option<PathBuf>, preset: &Option<String>) -> anyhow::Result<Problem> {
    match (problem, preset) {
        (Some(path), None) => {
            load_problem(path).with_context(|| format!("loading {}", path.display()))
        }
        (None, Some(name)) => Ok(presets::problem(name)?),
        (Some(_), Some(_)) => bail!(crate::Usage("--problem and --preset are exclusive".into())),
        (None, None) => bail!(crate::Usage("one of --problem or --preset is required".into())),
    }
}

impl RunConfig {
    pub fn resolve(command: Command, f: &Flags) -> anyhow::Result<(RunConfig, Problem)> {
        let problem = f.problem.as_ref().map(|p| absolute(p));
        let base = load(&problem, &f.preset)?;
        let info = f.preset.as_deref().map(presets::info).transpose()?;
        let alpha = f.alpha.unwrap_or(base.alpha());
        let eta = f.eta.unwrap_or(base.eta());
        let theta0 = match &f.theta0 {
            Some(t) => t.clone(),
            None => info
                .as_ref()
                .and_then(|i| i.theta0.clone())
                .unwrap_or_else(|| vec![1.0; base.dim()]),
        };
        let x0 = match &f.x0 {
            None => None,
            Some(v) if v.len() == 2 && v[0] >= 1 && v[1] >= 1 => Some((v[0], v[1])),
            Some(_) => bail!(crate::Usage("--x0 takes a 1-based pair s,a".into())),
        };
        let variant = f.variant.unwrap_or(if eta > 0.0 {
            VariantArg::Regularized
        } else {
            VariantArg::Plain
        });
        let cfg = RunConfig {
            command,
            problem,
            preset: f.preset.clone(),
            alpha,
            eta,
            beta_eps: f.beta_eps.or(info.as_ref().and_then(|i| i.beta_eps)),
            depth: f
                .depth
                .or(info.as_ref().and_then(|i| i.depth))
                .unwrap_or(DEFAULT_DEPTH),
            jsr_depth: f.jsr_depth.unwrap_or_else(|| default_jsr_depth(&base)),
            prune: f.prune,
            steps: f.steps.unwrap_or(DEFAULT_STEPS),
            runs: f.runs.unwrap_or(1),
            seed: f.seed.unwrap_or(0),
            theta0,
            tol: f.tol.unwrap_or(1e-12),
            kind: f.kind.unwrap_or(KindArg::Det),
            variant,
            x0,
            resolution: f.resolution.unwrap_or(DEFAULT_RESOLUTION),
            radial: f.radial,
            samples: f.samples.unwrap_or(DEFAULT_SAMPLES),
        };
        let p = cfg.problem_instance(base)?;
        Ok((cfg, p))
    }

    /// Rebuilds the problem with this configuration's α and η.
    fn problem_instance(&self, base: Problem) -> anyhow::Result<Problem> {
        let mut p = base;
        if p.alpha() != self.alpha {
            // Mode families accept any step size, including 0; runs need a
            // valid problem.
            match p.with_alpha(self.alpha) {
                Ok(q) => p = q,
                Err(_) if self.command.family_only() => {}
                Err(e) => return Err(e.into()),
            }
        }
        if p.eta() != self.eta {
            p = p.with_eta(self.eta)?;
        }
        if self.theta0.len() != p.dim() {
            bail!(crate::Usage(format!(
                "--theta0 has {} entries, the problem has m = {}",
                self.theta0.len(),
                p.dim()
            )));
        }
        Ok(p)
    }

    pub fn reload(&self) -> anyhow::Result<Problem> {
        self.problem_instance(load(&self.problem, &self.preset)?)
    }

    pub fn header(&self) -> String {
        format!(
            "# config: {}",
            serde_json::to_string(self).expect("config serializes")
        )
    }

    /// Reads the configuration embedded in an output file.
    pub fn from_output(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        if let Some(rest) = text.lines().next().and_then(|l| l.strip_prefix("# config: ")) {
            return serde_json::from_str(rest).context("parsing embedded config");
        }
        let doc: serde_json::Value =
            serde_json::from_str(&text).context("output file has no embedded config")?;
        let cfg = doc
            .get("config")
            .cloned()
            .context("output file has no embedded config")?;
        Ok(serde_json::from_value(cfg)?)
    }
}

/// Deepest bracket up to the default that fits the product cap.
fn default_jsr_depth(p: &Problem) -> usize {
    let n = policy_count(p.n_states(), p.n_actions(), DEFAULT_POLICY_CAP).unwrap_or(usize::MAX);
    (1..=DEFAULT_JSR_DEPTH)
        .rev()
        .find(|&d| word_count(n, d) <= PRODUCT_CAP)
        .unwrap_or(1)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}
