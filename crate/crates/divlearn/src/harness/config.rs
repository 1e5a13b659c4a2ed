//! Line-oriented `key = value` experiment configs.
//!
//! The format is deliberately tiny: one key per line, `#` comments, integer
//! lists as comma-separated values, no sections. Unknown keys are errors, not
//! warnings, so a typo cannot silently fall back to a default.

use crate::envs::Family;
use super::HarnessError;

/// Experiment kind selected by the `kind` key and the CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Sweep,
    Diversity,
    Complexity,
    Landscape,
    Summarize,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Diversity => "diversity",
            ExperimentKind::Complexity => "complexity",
            ExperimentKind::Landscape => "landscape",
            ExperimentKind::Summarize => "summarize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sweep" => Some(ExperimentKind::Sweep),
            "diversity" => Some(ExperimentKind::Diversity),
            "complexity" => Some(ExperimentKind::Complexity),
            "landscape" => Some(ExperimentKind::Landscape),
            "summarize" => Some(ExperimentKind::Summarize),
            _ => None,
        }
    }
}

/// Full experiment configuration with documented defaults (see `Default`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub family: Family,
    pub d: usize,
    pub r: usize,
    pub t: usize,
    /// Per-task training sample grid.
    pub n_grid: Vec<usize>,
    /// Test-phase sample grid.
    pub m_grid: Vec<usize>,
    /// Training-task-count grid; empty means "just `t`".
    pub t_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Noise scale σ.
    pub noise: f64,
    pub c1: f64,
    pub c2: f64,
    pub w_cap: f64,
    /// Head conditioning target; infinite leaves heads unconditioned.
    pub kappa: f64,
    pub n_eval: usize,
    /// Candidate representations per trial in a diversity audit.
    pub rep_samples: usize,
    pub epsilon: f64,
    /// Sphere starts for the worst-case ascent.
    pub starts: usize,
    /// Monte Carlo draws for complexity estimates.
    pub mc_draws: usize,
    /// Grid resolution per angle for the composed-class estimator.
    pub grid: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub step_decay: f64,
    pub tol_grad: f64,
    pub restarts: usize,
    pub threads: usize,
    pub trace: bool,
    pub out: String,
    pub bound_radius: Option<f64>,
    pub nn_hidden: Vec<usize>,
    pub nn_caps: Vec<f64>,
    /// Summarize inputs.
    pub csv: String,
    pub group: Vec<String>,
    pub response: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Sweep,
            family: Family::LinearRegression,
            d: 10,
            r: 2,
            t: 5,
            n_grid: vec![100],
            m_grid: vec![20],
            t_grid: vec![],
            trials: 1,
            seed: 0,
            noise: 0.1,
            c1: 2.0,
            c2: 1.0,
            w_cap: 1.0,
            kappa: 3.0,
            n_eval: 100_000,
            rep_samples: 50,
            epsilon: 0.0,
            starts: 32,
            mc_draws: 2000,
            grid: 41,
            max_iters: 5000,
            step_size: 1.0,
            step_decay: 1.0,
            tol_grad: 1e-7,
            restarts: 5,
            threads: 1,
            trace: false,
            out: "results.csv".into(),
            bound_radius: None,
            nn_hidden: vec![8],
            nn_caps: vec![2.0, 2.0],
            csv: String::new(),
            group: vec!["n".into()],
            response: "transfer_excess_risk".into(),
        }
    }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize, HarnessError> {
    v.parse().map_err(|_| HarnessError::ParseError {
        line,
        msg: format!("key '{key}': '{v}' is not a nonnegative integer"),
    })
}

fn parse_u64(line: usize, key: &str, v: &str) -> Result<u64, HarnessError> {
    v.parse().map_err(|_| HarnessError::ParseError {
        line,
        msg: format!("key '{key}': '{v}' is not a nonnegative integer"),
    })
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64, HarnessError> {
    if v == "inf" || v == "infinity" {
        return Ok(f64::INFINITY);
    }
    v.parse().map_err(|_| HarnessError::ParseError {
        line,
        msg: format!("key '{key}': '{v}' is not a number"),
    })
}

fn parse_usize_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>, HarnessError> {
    v.split(',')
        .map(|s| parse_usize(line, key, s.trim()))
        .collect()
}

fn parse_f64_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>, HarnessError> {
    v.split(',').map(|s| parse_f64(line, key, s.trim())).collect()
}

/// Parse a config from text. Every key is optional except `kind`; defaults
/// are the `Default` impl values.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    let mut saw_kind = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(HarnessError::ParseError {
            line: line_no,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "kind" => {
                cfg.kind = ExperimentKind::parse(value).ok_or(HarnessError::ParseError {
                    line: line_no,
                    msg: format!("unknown experiment kind '{value}'"),
                })?;
                saw_kind = true;
            }
            "family" => {
                cfg.family = Family::parse(value).ok_or(HarnessError::ParseError {
                    line: line_no,
                    msg: format!("unknown family '{value}'"),
                })?;
            }
            "d" => cfg.d = parse_usize(line_no, key, value)?,
            "r" => cfg.r = parse_usize(line_no, key, value)?,
            "t" => cfg.t = parse_usize(line_no, key, value)?,
            "n_grid" => cfg.n_grid = parse_usize_list(line_no, key, value)?,
            "m_grid" => cfg.m_grid = parse_usize_list(line_no, key, value)?,
            "t_grid" => cfg.t_grid = parse_usize_list(line_no, key, value)?,
            "trials" => cfg.trials = parse_usize(line_no, key, value)?,
            "seed" => cfg.seed = parse_u64(line_no, key, value)?,
            "noise" => cfg.noise = parse_f64(line_no, key, value)?,
            "c1" => cfg.c1 = parse_f64(line_no, key, value)?,
            "c2" => cfg.c2 = parse_f64(line_no, key, value)?,
            "w_cap" => cfg.w_cap = parse_f64(line_no, key, value)?,
            "kappa" => cfg.kappa = parse_f64(line_no, key, value)?,
            "n_eval" => cfg.n_eval = parse_usize(line_no, key, value)?,
            "rep_samples" => cfg.rep_samples = parse_usize(line_no, key, value)?,
            "epsilon" => cfg.epsilon = parse_f64(line_no, key, value)?,
            "starts" => cfg.starts = parse_usize(line_no, key, value)?,
            "mc_draws" => cfg.mc_draws = parse_usize(line_no, key, value)?,
            "grid" => cfg.grid = parse_usize(line_no, key, value)?,
            "max_iters" => cfg.max_iters = parse_usize(line_no, key, value)?,
            "step_size" => cfg.step_size = parse_f64(line_no, key, value)?,
            "step_decay" => cfg.step_decay = parse_f64(line_no, key, value)?,
            "tol_grad" => cfg.tol_grad = parse_f64(line_no, key, value)?,
            "restarts" => cfg.restarts = parse_usize(line_no, key, value)?,
            "threads" => cfg.threads = parse_usize(line_no, key, value)?,
            "trace" => {
                cfg.trace = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => {
                        return Err(HarnessError::ParseError {
                            line: line_no,
                            msg: format!("key 'trace': '{value}' is not a boolean"),
                        })
                    }
                }
            }
            "out" => cfg.out = value.to_string(),
            "bound_radius" => {
                cfg.bound_radius = match value {
                    "none" => None,
                    v => Some(parse_f64(line_no, key, v)?),
                }
            }
            "nn_hidden" => cfg.nn_hidden = parse_usize_list(line_no, key, value)?,
            "nn_caps" => cfg.nn_caps = parse_f64_list(line_no, key, value)?,
            "csv" => cfg.csv = value.to_string(),
            "group" => {
                cfg.group = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "response" => cfg.response = value.to_string(),
            other => {
                return Err(HarnessError::UnknownKey { line: line_no, key: other.to_string() })
            }
        }
    }
    if !saw_kind {
        return Err(HarnessError::ParseError { line: 0, msg: "missing required key 'kind'".into() });
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let bad = |msg: String| Err(HarnessError::ParseError { line: 0, msg });
    if cfg.kind == ExperimentKind::Summarize {
        if cfg.csv.is_empty() {
            return bad("summarize needs 'csv'".into());
        }
        if cfg.group.is_empty() {
            return bad("summarize needs at least one 'group' key".into());
        }
        return Ok(());
    }
    if cfg.d == 0 || cfg.r == 0 || cfg.t == 0 {
        return bad(format!("dimensions must be positive (d={}, r={}, t={})", cfg.d, cfg.r, cfg.t));
    }
    if cfg.d < cfg.r {
        return bad(format!("need d >= r, got d={} r={}", cfg.d, cfg.r));
    }
    if cfg.trials == 0 {
        return bad("trials must be >= 1".into());
    }
    if cfg.n_grid.is_empty() || cfg.m_grid.is_empty() {
        return bad("n_grid and m_grid must be nonempty".into());
    }
    if cfg.n_grid.iter().chain(cfg.m_grid.iter()).any(|&v| v == 0) {
        return bad("grid entries must be >= 1".into());
    }
    if cfg.kappa < 1.0 {
        return bad("kappa must be >= 1".into());
    }
    if cfg.step_size <= 0.0 || cfg.tol_grad <= 0.0 || cfg.max_iters == 0 {
        return bad("optimizer settings must be positive".into());
    }
    if cfg.threads == 0 {
        return bad("threads must be >= 1".into());
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.16e}")
    }
}

impl ExperimentConfig {
    /// Canonical serialization; parsing it back yields an equal config.
    pub fn serialize(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let flist = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("kind", self.kind.as_str().into());
        push("family", self.family.as_str().into());
        push("d", self.d.to_string());
        push("r", self.r.to_string());
        push("t", self.t.to_string());
        push("n_grid", list(&self.n_grid));
        push("m_grid", list(&self.m_grid));
        if !self.t_grid.is_empty() {
            push("t_grid", list(&self.t_grid));
        }
        push("trials", self.trials.to_string());
        push("seed", self.seed.to_string());
        push("noise", fmt_f64(self.noise));
        push("c1", fmt_f64(self.c1));
        push("c2", fmt_f64(self.c2));
        push("w_cap", fmt_f64(self.w_cap));
        push("kappa", fmt_f64(self.kappa));
        push("n_eval", self.n_eval.to_string());
        push("rep_samples", self.rep_samples.to_string());
        push("epsilon", fmt_f64(self.epsilon));
        push("starts", self.starts.to_string());
        push("mc_draws", self.mc_draws.to_string());
        push("grid", self.grid.to_string());
        push("max_iters", self.max_iters.to_string());
        push("step_size", fmt_f64(self.step_size));
        push("step_decay", fmt_f64(self.step_decay));
        push("tol_grad", fmt_f64(self.tol_grad));
        push("restarts", self.restarts.to_string());
        push("threads", self.threads.to_string());
        push("trace", self.trace.to_string());
        push("out", self.out.clone());
        match self.bound_radius {
            Some(v) => push("bound_radius", fmt_f64(v)),
            None => push("bound_radius", "none".into()),
        }
        push("nn_hidden", list(&self.nn_hidden));
        push("nn_caps", flist(&self.nn_caps));
        if !self.csv.is_empty() {
            push("csv", self.csv.clone());
        }
        push("group", self.group.join(","));
        push("response", self.response.clone());
        out
    }

    /// Effective t grid: `t_grid` or the scalar `t`.
    pub fn effective_t_grid(&self) -> Vec<usize> {
        if self.t_grid.is_empty() {
            vec![self.t]
        } else {
            self.t_grid.clone()
        }
    }
}

/// Read and parse a config file.
pub fn load_config(path: &str) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(format!("cannot read {path}: {e}")))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(
            "kind = sweep\nfamily = LinearLogistic\nd = 12\nr = 2\nt = 4\nn_grid = 50,100\nm_grid = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Sweep);
        assert_eq!(cfg.family, Family::LinearLogistic);
        assert_eq!(cfg.n_grid, vec![50, 100]);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.restarts, 5);
        assert_eq!(cfg.tol_grad, 1e-7);
    }

    #[test]
    fn negative_dimension_is_parse_error() {
        let err = parse_config("kind = sweep\nd = -3\n").unwrap_err();
        match err {
            HarnessError::ParseError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("kind = sweep\nnn_depth = 3\n").unwrap_err();
        assert!(matches!(err, HarnessError::UnknownKey { .. }));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# top\nkind = landscape # inline\n\nd = 8\nr = 2\nt = 3\n").unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Landscape);
        assert_eq!(cfg.d, 8);
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "kind = diversity\nfamily = IndexModel\nd = 7\nr = 1\nt = 4\nn_grid = 10\n\
                    m_grid = 6\ntrials = 3\nseed = 42\nnoise = 0.25\nkappa = inf\n\
                    bound_radius = 9.5\nout = x.csv\n";
        let cfg = parse_config(text).unwrap();
        let again = parse_config(&cfg.serialize()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn summarize_kind_needs_csv() {
        assert!(parse_config("kind = summarize\n").is_err());
        let cfg =
            parse_config("kind = summarize\ncsv = runs.csv\ngroup = n\nresponse = sin_theta\n")
                .unwrap();
        assert_eq!(cfg.response, "sin_theta");
    }
}
