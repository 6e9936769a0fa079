//! Report tables rebuilt from persisted run records, with JSON, CSV and
//! Markdown renderings.

use regimenas_core::arch::{ArchSpec, CellType};
use regimenas_core::data::Regime;
use regimenas_core::nas::search::{summarize, EvalRecord};
use regimenas_core::nas::AblationRow;
use regimenas_core::train::Metrics;
use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub generation: usize,
    pub evaluations: usize,
    pub failures: usize,
    pub best_score: Option<f64>,
    pub mean_score: Option<f64>,
    pub best_so_far: Option<f64>,
    /// Validation MAE of the generation's best candidate.
    pub best_val_mae: Option<f64>,
    pub best_arch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: String,
    pub count: usize,
    pub model_mae: Option<f64>,
    pub baseline_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    /// `HISTOGRAM_BINS + 1` edges; empty when there were no values.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub name: String,
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_id: String,
    pub target_scale: f64,
    pub generations: Vec<GenerationRow>,
    pub benchmark: Vec<BenchmarkRow>,
    pub ablation: Vec<AblationRow>,
    pub regimes: Vec<RegimeRow>,
    pub histograms: Vec<Histogram>,
    pub categories: Vec<CategoryCounts>,
}

/// Equal-width bins over the observed range. A constant sample lands in the
/// first bin of a unit-wide range.
pub fn histogram(name: &str, values: &[f64], bins: usize) -> Histogram {
    let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return Histogram {
            name: name.into(),
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for v in vals {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram {
        name: name.into(),
        edges,
        counts,
    }
}

pub fn build_bundle(
    run_id: &str,
    target_scale: f64,
    records: &[EvalRecord<ArchSpec>],
    model_test: Option<&Metrics>,
    baseline_test: Option<&Metrics>,
    ablation: &[AblationRow],
) -> ReportBundle {
    let generations = summarize(records)
        .into_iter()
        .map(|s| {
            let best = s.best_index.and_then(|i| records.iter().find(|r| r.index == i));
            GenerationRow {
                generation: s.generation,
                evaluations: s.evaluations,
                failures: s.failures,
                best_score: s.best_score,
                mean_score: s.mean_score,
                best_so_far: s.best_so_far,
                best_val_mae: best.and_then(|r| r.metrics.as_ref()).map(|m| m.mae),
                best_arch: best.map(|r| r.point.summary()),
            }
        })
        .collect();

    let mut benchmark = Vec::new();
    for (name, m) in [("RegimeNAS best", model_test), ("GRU baseline", baseline_test)] {
        if let Some(m) = m {
            benchmark.push(BenchmarkRow {
                model: name.into(),
                mae: m.mae,
                rmse: m.rmse,
                r2: m.r2,
                n: m.n,
            });
        }
    }

    let regimes = Regime::ALL
        .iter()
        .map(|r| {
            let i = r.index();
            RegimeRow {
                regime: r.name().into(),
                count: model_test.or(baseline_test).map_or(0, |m| m.regime_count[i]),
                model_mae: model_test.and_then(|m| m.regime_mae[i]),
                baseline_mae: baseline_test.and_then(|m| m.regime_mae[i]),
            }
        })
        .collect();

    let metric = |f: fn(&Metrics) -> f64| -> Vec<f64> { records.iter().filter_map(|r| r.metrics.as_ref()).map(f).collect() };
    let histograms = vec![
        histogram("val_mae", &metric(|m| m.mae), HISTOGRAM_BINS),
        histogram("val_rmse", &metric(|m| m.rmse), HISTOGRAM_BINS),
        histogram("val_r2", &metric(|m| m.r2), HISTOGRAM_BINS),
        histogram("dropout", &records.iter().map(|r| r.point.dropout).collect::<Vec<_>>(), HISTOGRAM_BINS),
        histogram(
            "hidden_size_layer1",
            &records.iter().map(|r| r.point.hidden[0] as f64).collect::<Vec<_>>(),
            HISTOGRAM_BINS,
        ),
    ];
    let cells = CellType::ALL;
    let categories = vec![CategoryCounts {
        name: "cell_type_layer1".into(),
        labels: cells.iter().map(|c| c.name().to_string()).collect(),
        counts: cells
            .iter()
            .map(|c| records.iter().filter(|r| r.point.cells[0] == *c).count())
            .collect(),
    }];

    ReportBundle {
        run_id: run_id.into(),
        target_scale,
        generations,
        benchmark,
        ablation: ablation.to_vec(),
        regimes,
        histograms,
        categories,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Long format: `table,row,column,value`, numbers printed at full precision.
pub fn render_csv(b: &ReportBundle) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |t: &str, row: &str, col: &str, val: String| {
        w.write_record([t, row, col, val.as_str()]).expect("in-memory csv");
    };
    put("table", "row", "column", "value".into());
    for g in &b.generations {
        let r = g.generation.to_string();
        put("generations", &r, "evaluations", g.evaluations.to_string());
        put("generations", &r, "failures", g.failures.to_string());
        put("generations", &r, "best_score", opt(g.best_score));
        put("generations", &r, "mean_score", opt(g.mean_score));
        put("generations", &r, "best_so_far", opt(g.best_so_far));
        put("generations", &r, "best_val_mae", opt(g.best_val_mae));
        put("generations", &r, "best_arch", g.best_arch.clone().unwrap_or_default());
    }
    for m in &b.benchmark {
        put("benchmark", &m.model, "mae", m.mae.to_string());
        put("benchmark", &m.model, "rmse", m.rmse.to_string());
        put("benchmark", &m.model, "r2", m.r2.to_string());
        put("benchmark", &m.model, "n", m.n.to_string());
    }
    for a in &b.ablation {
        put("ablation", &a.label, "mae", opt(a.metrics.as_ref().map(|m| m.mae)));
        put("ablation", &a.label, "rmse", opt(a.metrics.as_ref().map(|m| m.rmse)));
        put("ablation", &a.label, "r2", opt(a.metrics.as_ref().map(|m| m.r2)));
        put("ablation", &a.label, "mae_increase_pct", opt(a.mae_increase_pct));
    }
    for r in &b.regimes {
        put("regimes", &r.regime, "count", r.count.to_string());
        put("regimes", &r.regime, "model_mae", opt(r.model_mae));
        put("regimes", &r.regime, "baseline_mae", opt(r.baseline_mae));
    }
    for h in &b.histograms {
        for (i, c) in h.counts.iter().enumerate() {
            let row = format!("{}[{i}]", h.name);
            put("histograms", &row, "lower", h.edges[i].to_string());
            put("histograms", &row, "upper", h.edges[i + 1].to_string());
            put("histograms", &row, "count", c.to_string());
        }
    }
    for c in &b.categories {
        for (l, n) in c.labels.iter().zip(&c.counts) {
            put("categories", &format!("{}[{l}]", c.name), "count", n.to_string());
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn fmt(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.digits$}"))
}

pub fn render_markdown(b: &ReportBundle) -> String {
    let mut s = format!("# Run report: {}\n\n", b.run_id);

    s.push_str("## Performance across search generations\n\n");
    s.push_str("| Generation | Evaluations | Failures | Best score | Mean score | Best so far | Best val MAE | Best architecture |\n");
    s.push_str("|---:|---:|---:|---:|---:|---:|---:|---|\n");
    for g in &b.generations {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            g.generation,
            g.evaluations,
            g.failures,
            fmt(g.best_score, 4),
            fmt(g.mean_score, 4),
            fmt(g.best_so_far, 4),
            fmt(g.best_val_mae, 4),
            g.best_arch.as_deref().unwrap_or("n/a")
        ));
    }

    s.push_str("\n## Benchmark on the test split\n\n| Model | MAE¹ | RMSE¹ | R² |\n|---|---:|---:|---:|\n");
    for m in &b.benchmark {
        s.push_str(&format!("| {} | {:.4} | {:.4} | {:.4} |\n", m.model, m.mae, m.rmse, m.r2));
    }
    s.push_str(&format!(
        "\n¹ Errors are in units of next-step log return × {}. Values from different datasets are not comparable.\n",
        b.target_scale
    ));

    s.push_str("\n## Ablation\n\n| Variant | Description | MAE | RMSE | R² | MAE increase (%) |\n|---|---|---:|---:|---:|---:|\n");
    for a in &b.ablation {
        let m = a.metrics.as_ref();
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            a.label,
            a.note.as_deref().unwrap_or(&a.description),
            fmt(m.map(|m| m.mae), 4),
            fmt(m.map(|m| m.rmse), 4),
            fmt(m.map(|m| m.r2), 4),
            fmt(a.mae_increase_pct, 1)
        ));
    }

    s.push_str("\n## Test MAE by market regime²\n\n| Regime | Windows | RegimeNAS best | GRU baseline |\n|---|---:|---:|---:|\n");
    for r in &b.regimes {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.regime,
            r.count,
            fmt(r.model_mae, 4),
            fmt(r.baseline_mae, 4)
        ));
    }
    s.push_str("\n² Regimes are assigned after the fact from ADX and ATR: Trend when ADX > 25, HighVolatility when ATR exceeds its rolling 75th percentile, Range otherwise.\n");

    s.push_str("\n## Distributions over evaluated candidates\n\n");
    for h in &b.histograms {
        if h.counts.is_empty() {
            s.push_str(&format!("- {}: no values\n", h.name));
            continue;
        }
        let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!(
            "- {} over [{:.4}, {:.4}]: {}\n",
            h.name,
            h.edges[0],
            h.edges[h.edges.len() - 1],
            counts.join(" ")
        ));
    }
    for c in &b.categories {
        let parts: Vec<String> = c.labels.iter().zip(&c.counts).map(|(l, n)| format!("{l} {n}")).collect();
        s.push_str(&format!("- {}: {}\n", c.name, parts.join(", ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 7.0).collect();
        let h = histogram("x", &v, HISTOGRAM_BINS);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 100);
        assert_eq!(*h.edges.last().unwrap(), 99.0 / 7.0);
    }

    #[test]
    fn constant_sample_lands_in_first_bin() {
        let h = histogram("x", &[0.1, 0.1, 0.1], 20);
        assert_eq!(h.counts[0], 3);
        assert!(histogram("y", &[], 20).counts.is_empty());
    }
}
