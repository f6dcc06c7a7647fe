//! Gradient verification against central finite differences.

use rand::seq::SliceRandom;

use crate::corpus::DialogueTurn;
use crate::error::Result;
use crate::model::{DecoderMode, ModelConfig, PostSelModel};
use crate::objective::{total_loss, Phase};
use crate::params::{GradStore, ParamStore};
use crate::rng::derive_rng;
use crate::tensor::Graph;

/// Verification result for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(10)
            .max(9);
        writeln!(
            f,
            "{:width$}  {:>6}  {:>12}  result",
            "parameter", "coords", "max rel err"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:width$}  {:>6}  {:>12.3e}  {}",
                row.name,
                row.coords_checked,
                row.max_rel_err,
                if row.pass { "pass" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tolerance {:.1e})",
            if self.all_pass() { "pass" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Relative error with a unit floor: behaves like relative error for
/// large gradients and absolute error below 1, which keeps
/// finite-difference roundoff noise from failing near-zero coordinates.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()))
}

/// Compare analytic gradients with central finite differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` on a random subsample of at
/// least `coords_per_param` coordinates per parameter.
///
/// `eval(params, want_grads)` must be deterministic given the parameter
/// values (noise draws frozen); it returns the loss value and, when
/// asked, the analytic gradients.
pub fn gradient_check<F>(
    params: &ParamStore,
    mut eval: F,
    epsilon: f64,
    tolerance: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<GradStore>)>,
{
    let (_, grads) = eval(params, true)?;
    let grads = grads.expect("eval returns gradients when asked");

    let mut working = params.clone();
    let mut rows = Vec::new();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let len = params.get(&name).values.len();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            let mut rng = derive_rng(seed, &format!("gradcheck/{name}"));
            all.shuffle(&mut rng);
            all.truncate(coords_per_param);
            all
        };
        let analytic = grads.get(&name).expect("gradient present for parameter");
        let mut max_rel = 0.0f64;
        for &c in &coords {
            let original = working.get(&name).values[c];
            working.get_mut(&name).values[c] = original + epsilon;
            let (plus, _) = eval(&working, false)?;
            working.get_mut(&name).values[c] = original - epsilon;
            let (minus, _) = eval(&working, false)?;
            working.get_mut(&name).values[c] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            max_rel = max_rel.max(relative_error(analytic[c], numeric));
        }
        rows.push(GradCheckRow {
            pass: max_rel <= tolerance,
            name,
            coords_checked: coords.len(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { rows, tolerance })
}

/// The toy example used by the standalone gradient check: small enough
/// to probe thousands of coordinates in seconds, large enough to reach
/// every parameter group.
pub fn toy_turn() -> DialogueTurn {
    DialogueTurn {
        utterance: vec![4, 5, 6, 7],
        response: vec![8, 9, 10],
        knowledge: vec![vec![11, 12, 13], vec![14, 15], vec![16, 17, 18]],
        gold_knowledge_idx: Some(0),
    }
}

pub fn toy_config(mode: DecoderMode) -> ModelConfig {
    let mut config = ModelConfig::desk_scale(30, mode);
    config.embed_dim = 8;
    config.hidden_dim = 8;
    config
}

/// Full-objective gradient check on a toy model (hidden 8, embedding 8,
/// vocabulary 30, 3 knowledge entries) with frozen Gumbel noise.
pub fn check_toy_model(
    mode: DecoderMode,
    epsilon: f64,
    tolerance: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let config = toy_config(mode);
    let model = PostSelModel::new(config.clone(), seed)?;
    let turn = toy_turn();
    let eval = |params: &ParamStore, want_grads: bool| -> Result<(f64, Option<GradStore>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        // fixed tag: every evaluation sees identical noise
        let mut rng = derive_rng(seed, "gradcheck-noise");
        let out = total_loss(&mut g, &bound, &config, &turn, Phase::Full, &mut rng)?;
        if want_grads {
            g.backward(out.total_id)?;
            let mut grads = GradStore::new();
            bound.accumulate_grads(&g, &mut grads);
            Ok((out.bundle.total, Some(grads)))
        } else {
            Ok((out.bundle.total, None))
        }
    };
    gradient_check(
        &model.params,
        eval,
        epsilon,
        tolerance,
        coords_per_param,
        seed,
    )
}
