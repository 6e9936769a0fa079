//! Architecture search over real training runs, the ablation harness and the
//! GRU comparator.

use serde::{Deserialize, Serialize};

use super::search::{bo_search, ArchSpace, EvalContext, EvalRecord, Evaluation, SearchConfig, SearchTrace};
use crate::arch::ArchSpec;
use crate::data::{FeaturePanel, Split};
use crate::error::Result;
use crate::model::{GateMode, GruBaseline, RegimeModel};
use crate::objective::LossWeights;
use crate::train::{evaluate, fit, retrain_rows, retrain_final, train_candidate, Metrics, TrainConfig, Trained};

/// Trains one candidate and turns the outcome into a search observation.
/// The score is the negative validation total loss.
pub fn evaluate_arch(arch: &ArchSpec, panel: &FeaturePanel, cfg: &TrainConfig, seed: u64) -> (Evaluation, Option<Trained<RegimeModel>>) {
    let mut c = cfg.clone();
    c.seed = seed;
    match train_candidate(arch, panel, &c) {
        Err(e) => (
            Evaluation {
                failure: Some(e.to_string()),
                ..Evaluation::default()
            },
            None,
        ),
        Ok(t) => {
            let r = &t.report;
            let ev = match (&r.failed, &r.val) {
                (None, Some(m)) if m.loss.total.is_finite() => Evaluation {
                    score: Some(-m.loss.total),
                    failure: None,
                    uncertainty: m.mean_uncertainty,
                    metrics: Some(m.clone()),
                    param_count: Some(r.param_count),
                },
                (failed, val) => Evaluation {
                    score: None,
                    failure: Some(failed.clone().unwrap_or_else(|| "non-finite validation loss".into())),
                    uncertainty: val.as_ref().and_then(|m| m.mean_uncertainty),
                    metrics: val.clone(),
                    param_count: Some(r.param_count),
                },
            };
            (ev, Some(t))
        }
    }
}

/// Runs the search; `on_record` receives each record with the candidate's
/// trained model and report (absent for reused or rejected candidates).
pub fn search_architectures<C>(
    panel: &FeaturePanel,
    search: &SearchConfig,
    train: &TrainConfig,
    prior: &[EvalRecord<ArchSpec>],
    on_record: C,
) -> Result<SearchTrace<ArchSpec>>
where
    C: FnMut(&EvalRecord<ArchSpec>, Option<Option<Trained<RegimeModel>>>) -> Result<()>,
{
    train.validate()?;
    bo_search(
        &ArchSpace,
        search,
        prior,
        |arch: &ArchSpec, ctx: &EvalContext| evaluate_arch(arch, panel, train, ctx.seed),
        on_record,
    )
}

pub struct SearchOutcome {
    pub trace: SearchTrace<ArchSpec>,
    pub best: Option<ArchSpec>,
    pub final_model: Option<Trained<RegimeModel>>,
    pub test: Option<Metrics>,
}

/// Retrains the best architecture on train ∪ val and scores it on the test split.
pub fn finalize(trace: SearchTrace<ArchSpec>, panel: &FeaturePanel, train: &TrainConfig) -> Result<SearchOutcome> {
    let best = trace.best().map(|r| r.point.clone());
    let (final_model, test) = match &best {
        Some(arch) => {
            let t = retrain_final(arch, panel, train, GateMode::Learned)?;
            let m = evaluate(&t.model, panel, Split::Test, train)?;
            (Some(t), Some(m))
        }
        None => (None, None),
    };
    Ok(SearchOutcome {
        trace,
        best,
        final_model,
        test,
    })
}

/// Search followed by the final retrain of the incumbent.
pub fn run_search(panel: &FeaturePanel, search: &SearchConfig, train: &TrainConfig) -> Result<SearchOutcome> {
    let trace = search_architectures(panel, search, train, &[], |_, _| Ok(()))?;
    finalize(trace, panel, train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoVolatility,
    NoTrend,
    NoRange,
    StaticGate,
    NoStability,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::NoVolatility,
        AblationVariant::NoTrend,
        AblationVariant::NoRange,
        AblationVariant::StaticGate,
        AblationVariant::NoStability,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "Full model",
            AblationVariant::NoVolatility => "No volatility block",
            AblationVariant::NoTrend => "No trend block",
            AblationVariant::NoRange => "No range block",
            AblationVariant::StaticGate => "No regime detection",
            AblationVariant::NoStability => "No stability controls",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationVariant::Full => "searched architecture as retrained",
            AblationVariant::NoVolatility => "volatility block disabled",
            AblationVariant::NoTrend => "trend block disabled",
            AblationVariant::NoRange => "range block disabled",
            AblationVariant::StaticGate => "static average weighting of blocks",
            AblationVariant::NoStability => "no Lipschitz term, no spectral normalization, fixed clipping",
        }
    }

    /// Why the variant cannot be built from `arch`, if it cannot.
    pub fn not_applicable(self, arch: &ArchSpec) -> Option<&'static str> {
        let block = match self {
            AblationVariant::NoVolatility => 0,
            AblationVariant::NoTrend => 1,
            AblationVariant::NoRange => 2,
            _ => return None,
        };
        if !arch.blocks[block] {
            Some("block absent from the searched architecture")
        } else if arch.blocks.iter().filter(|&&b| b).count() == 1 {
            Some("only enabled block")
        } else {
            None
        }
    }

    /// Architecture, training settings and gate mode for this variant.
    pub fn apply(self, arch: &ArchSpec, cfg: &TrainConfig) -> Option<(ArchSpec, TrainConfig, GateMode)> {
        if self.not_applicable(arch).is_some() {
            return None;
        }
        let mut a = arch.clone();
        let mut c = cfg.clone();
        let mut gate = GateMode::Learned;
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoVolatility => a.blocks[0] = false,
            AblationVariant::NoTrend => a.blocks[1] = false,
            AblationVariant::NoRange => a.blocks[2] = false,
            AblationVariant::StaticGate => gate = GateMode::Static,
            AblationVariant::NoStability => c = cfg.without_stability(),
        }
        Some((a, c, gate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub description: String,
    /// Test metrics; `None` when the variant does not apply or training failed.
    pub metrics: Option<Metrics>,
    pub note: Option<String>,
    /// `100·(MAE − MAE_full)/MAE_full`.
    pub mae_increase_pct: Option<f64>,
}

pub fn mae_increase_pct(mae: f64, full: f64) -> f64 {
    100.0 * (mae - full) / full
}

/// Test metrics of one ablation variant after the same final retrain as the search.
pub fn ablation_metrics(variant: AblationVariant, arch: &ArchSpec, panel: &FeaturePanel, cfg: &TrainConfig) -> Result<Option<Metrics>> {
    let Some((a, c, gate)) = variant.apply(arch, cfg) else {
        return Ok(None);
    };
    let t = retrain_final(&a, panel, &c, gate)?;
    if t.report.failed.is_some() {
        return Ok(None);
    }
    Ok(Some(evaluate(&t.model, panel, Split::Test, &c)?))
}

/// Retrains every variant of `arch`. `full` reuses the search's final test
/// metrics for the first row instead of retraining it.
pub fn run_ablation(arch: &ArchSpec, panel: &FeaturePanel, cfg: &TrainConfig, full: Option<Metrics>) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in AblationVariant::ALL {
        let (metrics, note) = if v == AblationVariant::Full && full.is_some() {
            (full.clone(), None)
        } else {
            match ablation_metrics(v, arch, panel, cfg) {
                Ok(Some(m)) => (Some(m), None),
                Ok(None) => match v.not_applicable(arch) {
                    Some(why) => (None, Some(format!("not applicable: {why}"))),
                    None => (None, Some("training failed".into())),
                },
                Err(e) => (None, Some(e.to_string())),
            }
        };
        rows.push(AblationRow {
            variant: v,
            label: v.label().into(),
            description: v.description().into(),
            metrics,
            note,
            mae_increase_pct: None,
        });
    }
    let full_mae = rows[0].metrics.as_ref().map(|m| m.mae);
    for r in &mut rows {
        r.mae_increase_pct = match (full_mae, &r.metrics) {
            (Some(f), Some(m)) if f > 0.0 => Some(mae_increase_pct(m.mae, f)),
            _ => None,
        };
    }
    Ok(rows)
}

/// Hidden sizes of the comparator before width scaling.
pub const BASELINE_HIDDEN: [usize; 2] = [128, 128];

/// Plain two-layer GRU trained on the prediction loss alone, with the same
/// retrain protocol as the searched model.
pub fn train_baseline(panel: &FeaturePanel, cfg: &TrainConfig) -> Result<(Trained<GruBaseline>, Metrics)> {
    let mut c = cfg.without_stability();
    c.weights = LossWeights::prediction_only();
    c.regime_smoothness = None;
    c.aux_regime_weight = 0.0;
    let hidden: Vec<usize> = BASELINE_HIDDEN
        .iter()
        .map(|&h| ((h as f64 * c.width_scale).round() as usize).max(4))
        .collect();
    let mut model = GruBaseline::new(panel.n_features, &hidden, c.window, c.seed)?;
    let (train, holdout) = retrain_rows(panel, &c);
    let report = fit(&mut model, panel, &train, &holdout, &c)?;
    let test = evaluate(&model, panel, Split::Test, &c)?;
    Ok((Trained { model, report }, test))
}
