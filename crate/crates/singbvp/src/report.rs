//! Structured run reports emitted by the command-line front end.

use crate::green::CheckOutcome;
use crate::kernels::Pipeline;
use crate::lattice;
use crate::problem::SolverConfig;
use crate::solver::{BvpSolution, SolveDiagnostics};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct SolvabilitySummary {
    pub residual_p5_norm: f64,
    pub residual_p6_norm: f64,
    pub solvable: bool,
    pub scale: f64,
    pub threshold: f64,
}

/// Top-level report; every command fills the fields it produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub config: SolverConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cokernel_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_inf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction_gate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solvability: Option<SolvabilitySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub green_checks: Option<Vec<CheckOutcome>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<SolveDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u128>,
}

impl RunReport {
    pub fn new(command: &str, config: &SolverConfig) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            command: command.into(),
            config: config.clone(),
            dims: None,
            kernel_dim: None,
            cokernel_dim: None,
            index: None,
            alpha: None,
            gamma: None,
            c_star: None,
            x0: None,
            x_inf: None,
            contraction_gate: None,
            contraction_factor: None,
            kappa: None,
            beta: None,
            solvability: None,
            green_checks: None,
            diagnostics: None,
            eta: None,
            zeta: None,
            w: None,
            outputs: Vec::new(),
            warnings: Vec::new(),
            wall_time_ms: None,
        }
    }

    pub fn with_pipeline(mut self, pipe: &Pipeline) -> Self {
        let (n_l, d_l, index) = lattice::noether_index(&pipe.lattice);
        self.dims = Some(pipe.lattice.dims);
        self.kernel_dim = Some(n_l);
        self.cokernel_dim = Some(d_l);
        self.index = Some(index);
        self.alpha = Some(pipe.alpha);
        self.gamma = Some(pipe.dichotomy.gamma);
        self.c_star = Some(pipe.dichotomy.c_star);
        self.x0 = Some(pipe.x0);
        self.x_inf = Some(pipe.x_inf);
        self.contraction_gate = Some(pipe.anchor.t_gate);
        self.contraction_factor = Some(pipe.fundamental.q);
        if let Some(wm) = &pipe.dichotomy.quality_warning {
            self.warnings.push(wm.clone());
        }
        self
    }

    pub fn with_solution(mut self, sol: &BvpSolution) -> Self {
        self.solvability = Some(SolvabilitySummary {
            residual_p5_norm: sol.report.residual_p5.norm(),
            residual_p6_norm: sol.report.residual_p6.norm(),
            solvable: sol.report.solvable,
            scale: sol.report.scale,
            threshold: sol.report.threshold,
        });
        self.diagnostics = Some(sol.diagnostics.clone());
        self.eta = Some(sol.eta.iter().copied().collect());
        self.zeta = Some(sol.zeta.iter().copied().collect());
        self.w = Some(sol.w.iter().copied().collect());
        self.warnings.extend(sol.diagnostics.warnings.iter().cloned());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Solution grid as CSV with 17 significant digits.
pub fn solution_to_csv(sol: &BvpSolution) -> String {
    let n = sol.values.first().map(|v| v.len()).unwrap_or(0);
    let mut out = String::from("x");
    for i in 1..=n {
        out.push_str(&format!(",y{i}"));
    }
    out.push('\n');
    for (x, y) in sol.grid.iter().zip(&sol.values) {
        out.push_str(&format!("{x:.16e}"));
        for v in y.iter() {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

/// Solution grid as JSON (values row-per-point), including the recovered
/// boundary data and diagnostics.
pub fn solution_to_json(sol: &BvpSolution, report: &RunReport) -> String {
    #[derive(Serialize)]
    struct SolutionFile<'a> {
        schema: u32,
        x: &'a [f64],
        y: Vec<Vec<f64>>,
        eta: Vec<f64>,
        zeta: Vec<f64>,
        w: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        index: Option<i64>,
        diagnostics: &'a SolveDiagnostics,
    }
    let file = SolutionFile {
        schema: SCHEMA_VERSION,
        x: &sol.grid,
        y: sol.values.iter().map(|v| v.iter().copied().collect()).collect(),
        eta: sol.eta.iter().copied().collect(),
        zeta: sol.zeta.iter().copied().collect(),
        w: sol.w.iter().copied().collect(),
        index: report.index,
        diagnostics: &sol.diagnostics,
    };
    serde_json::to_string_pretty(&file).expect("solution serialization cannot fail")
}
