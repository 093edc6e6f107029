//! Accuracy, velocity-ablation and efficiency tables in text and JSON.

use serde::{Deserialize, Serialize};

use crate::efficiency::EfficiencyReport;
use crate::models::{ModelConfig, TemporalConfig};
use crate::train::{Metrics, TrainConfig};

/// One trained run as it appears in the accuracy tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub group: String,
    pub method: String,
    pub strategy: String,
    pub velocity: bool,
    /// Test accuracy of the best-epoch model, in [0, 1].
    pub accuracy: f64,
    /// Test accuracy after the last epoch, in [0, 1].
    pub final_accuracy: f64,
}

impl RunSummary {
    pub fn new(config: &TrainConfig, metrics: &Metrics) -> Self {
        let (group, method, strategy, velocity) = describe(&config.model);
        Self {
            group: group.into(),
            method,
            strategy,
            velocity,
            accuracy: metrics.best.test.accuracy(),
            final_accuracy: metrics.last.test.accuracy(),
        }
    }
}

/// Row label of a model, e.g. `TTR (k=9) + Velocity`.
pub fn method_name(config: &ModelConfig) -> String {
    describe(config).1
}

fn describe(config: &ModelConfig) -> (&'static str, String, String, bool) {
    match config {
        ModelConfig::Str(_) => ("Spatial Transformer", "STR".into(), "Domain-Specific".into(), false),
        ModelConfig::Ttr(c) => {
            let method = if c.use_velocity_input {
                format!("TTR (k={}) + Velocity", c.stride)
            } else {
                format!("TTR (k={})", c.stride)
            };
            ("Temporal Transformer", method, format!("Domain-Specific k={}", c.stride), c.use_velocity_input)
        }
        ModelConfig::Msttr(c) => (
            "Temporal Transformer",
            "Multi-Scale TTR".into(),
            "Multi-Scale k=3, 5".into(),
            c.branch.use_velocity_input,
        ),
        ModelConfig::Dual(c) => {
            let t = match &c.temporal {
                TemporalConfig::Ttr(t) => format!("TTR (k={})", t.stride),
                TemporalConfig::MsTtr(_) => "Multi-Scale TTR".into(),
            };
            (
                "Dual-Stream Fusion",
                format!("STR + {t} (Feature Fusion)"),
                "Feature-Level Fusion".into(),
                false,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    /// `(group heading, rows)`; an empty heading is not printed.
    pub groups: Vec<(String, Vec<Vec<String>>)>,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            groups: Vec::new(),
        }
    }

    fn push(&mut self, group: &str, row: Vec<String>) {
        match self.groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, rows)) => rows.push(row),
            None => self.groups.push((group.into(), vec![row])),
        }
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for (_, rows) in &self.groups {
            for row in rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.chars().count());
                }
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let rule = format!(
            "+{}+\n",
            widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("+")
        );
        let mut out = format!("{}\n{rule}{}{rule}", self.title, line(&self.columns));
        for (group, rows) in &self.groups {
            if !group.is_empty() {
                out.push_str(&format!("| {group}\n"));
            }
            for row in rows {
                out.push_str(&line(row));
            }
            out.push_str(&rule);
        }
        out
    }
}

/// `value / 1e6` with three decimals and trailing zeros removed.
pub fn format_millions(value: f64) -> String {
    trim(format!("{:.3}", value / 1e6))
}

/// `value / 1e9` with three decimals and trailing zeros removed.
pub fn format_billions(value: f64) -> String {
    trim(format!("{:.3}", value / 1e9))
}

fn trim(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: Table,
    pub velocity: Table,
    pub efficiency: Table,
}

impl Report {
    pub fn to_text(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.accuracy.render(),
            self.velocity.render(),
            self.efficiency.render()
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Builds the three tables. Velocity rows compare single-scale TTR runs
/// against the first such run without velocity input.
pub fn report(runs: &[RunSummary], efficiency: &[EfficiencyReport]) -> Report {
    let mut accuracy = Table::new(
        "Performance comparison of spatial, temporal, and fused transformer architectures",
        &["Method", "Accuracy (%)", "Training Strategy"],
    );
    for group in ["Spatial Transformer", "Temporal Transformer", "Dual-Stream Fusion"] {
        for r in runs.iter().filter(|r| r.group == group && !r.velocity) {
            accuracy.push(
                group,
                vec![r.method.clone(), format_percent(r.accuracy), r.strategy.clone()],
            );
        }
    }

    let mut velocity = Table::new(
        "Impact of velocity features on the temporal transformer",
        &["Method", "Accuracy (%)", "Change"],
    );
    let ttr: Vec<&RunSummary> = runs.iter().filter(|r| r.method.starts_with("TTR (")).collect();
    if let Some(base) = ttr.iter().find(|r| !r.velocity) {
        velocity.push("", vec![base.method.clone(), format_percent(base.accuracy), "Baseline".into()]);
        for r in ttr.iter().filter(|r| r.velocity) {
            let change = (r.accuracy - base.accuracy) * 100.0;
            velocity.push(
                "",
                vec![r.method.clone(), format_percent(r.accuracy), format!("{change:+.2}%")],
            );
        }
    }

    let mut eff = Table::new(
        "Computational efficiency analysis",
        &["Model", "Params (M)", "FLOPs (G)", "FPS"],
    );
    for e in efficiency {
        eff.push(
            "",
            vec![
                e.model.clone(),
                format_millions(e.params as f64),
                format_billions(e.flops as f64),
                format!("{:.2}", e.throughput.frames_per_sec),
            ],
        );
    }
    Report {
        accuracy,
        velocity,
        efficiency: eff,
    }
}
