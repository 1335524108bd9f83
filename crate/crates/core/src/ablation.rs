//! Ablation sweeps laid out like the paper's ablation tables, at desk depth.
//!
//! Layer positions map onto a `depth`-layer backbone as first = 1,
//! middle = `depth / 2`, last = `depth`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::heads::HeadKind;
use crate::provider::SkeletonFeatureProvider;
use crate::sim3d::Alignment;
use crate::skelmap::MapVariant;
use crate::trainer::{fit, prepare, ExperimentConfig, KdBaseline, PiVit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Projection module choice for each induction module.
    Head,
    /// Classic distillation against 3D induction.
    Kd,
    /// 3D alignment level by tap position.
    Placement3dsim,
    /// Token-skeleton map variants.
    MapVariant,
    /// 3D classification branch on or off.
    Classifier3dsim,
    /// 2D tap position.
    Placement2dsim,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Head,
        AblationAxis::Kd,
        AblationAxis::Placement3dsim,
        AblationAxis::MapVariant,
        AblationAxis::Classifier3dsim,
        AblationAxis::Placement2dsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Head => "head",
            AblationAxis::Kd => "kd",
            AblationAxis::Placement3dsim => "placement-3dsim",
            AblationAxis::MapVariant => "map-variant",
            AblationAxis::Classifier3dsim => "classifier-3dsim",
            AblationAxis::Placement2dsim => "placement-2dsim",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AblationAxis::Head => "Choice of parameterized module",
            AblationAxis::Kd => "3D-SIM versus traditional distillation",
            AblationAxis::Placement3dsim => "Alignment level and position of 3D-SIM",
            AblationAxis::MapVariant => "Token-skeleton map variants",
            AblationAxis::Classifier3dsim => "Classification task of 3D-SIM",
            AblationAxis::Placement2dsim => "Position of 2D-SIM",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = match s {
            "a" => "head",
            "b" => "kd",
            "c" => "placement-3dsim",
            "d" => "map-variant",
            "e" => "classifier-3dsim",
            "f" => "placement-2dsim",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s}")))
    }
}

/// `(first, middle, last)` tap layers for a backbone of `depth` layers.
pub fn desk_positions(depth: usize) -> (usize, usize, usize) {
    (1, (depth / 2).max(1), depth)
}

fn join(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn dedup(mut layers: Vec<usize>) -> Vec<usize> {
    layers.sort_unstable();
    layers.dedup();
    layers
}

fn only_2d(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.kd = KdBaseline::None;
    c.sim2d.enabled = true;
    c.sim3d.enabled = false;
    c
}

fn only_3d(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.kd = KdBaseline::None;
    c.sim2d.enabled = false;
    c.sim3d.enabled = true;
    c
}

/// One table cell's experiment.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub row: usize,
    pub col: usize,
    pub config: ExperimentConfig,
}

/// Row and column labels plus the experiment behind every cell.
#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub row_header: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<AblationCell>,
}

pub fn plan(axis: AblationAxis, base: &ExperimentConfig) -> AblationPlan {
    let depth = base.backbone.depth;
    let (first, mid, last) = desk_positions(depth);
    let mut cells = Vec::new();
    let mut push = |row: usize, col: usize, config: ExperimentConfig| cells.push(AblationCell { row, col, config });
    let (row_header, rows, columns): (&str, Vec<String>, Vec<String>) = match axis {
        AblationAxis::Head => {
            for (col, kind) in HeadKind::ALL.into_iter().enumerate() {
                let mut c2 = only_2d(base);
                c2.sim2d.head = kind;
                push(0, col, c2);
                let mut c3 = only_3d(base);
                c3.sim3d.head = kind;
                push(1, col, c3);
            }
            (
                "Module",
                vec!["2D-SIM".into(), "3D-SIM".into()],
                HeadKind::ALL.iter().map(|k| k.label().to_string()).collect(),
            )
        }
        AblationAxis::Kd => {
            let mut rows = vec!["Baseline".to_string()];
            push(0, 0, base.baseline());
            for (i, kd) in KdBaseline::ALL.into_iter().enumerate() {
                let mut c = base.baseline();
                c.train.kd = kd;
                push(i + 1, 0, c);
                rows.push(format!("+ {}", kd.label()));
            }
            push(rows.len(), 0, only_3d(base));
            rows.push("+ 3D-SIM".into());
            ("Approach", rows, vec!["Synthetic".into()])
        }
        AblationAxis::Placement3dsim => {
            let positions = [
                vec![first],
                vec![mid],
                vec![last],
                dedup(vec![first, mid, last]),
            ];
            for (row, alignment) in Alignment::ALL.into_iter().enumerate() {
                push(row, 0, base.baseline());
                for (i, layers) in positions.iter().enumerate() {
                    let mut c = only_3d(base);
                    c.sim3d.alignment = alignment;
                    c.sim3d.layers = Some(layers.clone());
                    push(row, i + 1, c);
                }
            }
            let mut columns = vec!["Baseline".to_string()];
            columns.extend(positions.iter().map(|p| join(p)));
            (
                "Alignment level",
                Alignment::ALL.iter().map(|a| a.label().to_string()).collect(),
                columns,
            )
        }
        AblationAxis::MapVariant => {
            let variants = [
                (MapVariant::Full, "Token-Skeleton Map"),
                (MapVariant::Flat, "Flat Variant"),
                (MapVariant::Depth, "Depth Variant"),
            ];
            for (row, (variant, _)) in variants.iter().enumerate() {
                let mut c = only_2d(base);
                c.sim2d.variant = *variant;
                push(row, 0, c);
            }
            (
                "Variant",
                variants.iter().map(|(_, l)| l.to_string()).collect(),
                vec!["Synthetic".into()],
            )
        }
        AblationAxis::Classifier3dsim => {
            let levels = [Alignment::Global, Alignment::Local];
            for (row, alignment) in levels.into_iter().enumerate() {
                for (col, classifier) in [true, false].into_iter().enumerate() {
                    let mut c = only_3d(base);
                    c.sim3d.alignment = alignment;
                    c.sim3d.classifier = classifier;
                    push(row, col, c);
                }
            }
            (
                "Alignment level",
                levels.iter().map(|a| a.label().to_string()).collect(),
                vec!["with classification".into(), "without classification".into()],
            )
        }
        AblationAxis::Placement2dsim => {
            let positions = [
                vec![first],
                vec![mid],
                vec![last],
                dedup(vec![first, mid]),
                dedup(vec![first, last]),
            ];
            for (col, layers) in positions.iter().enumerate() {
                let mut c = only_2d(base);
                c.sim2d.layers = layers.clone();
                push(0, col, c);
            }
            ("Dataset", vec!["Synthetic".into()], positions.iter().map(|p| join(p)).collect())
        }
    };
    AblationPlan {
        axis,
        row_header: row_header.into(),
        rows,
        columns,
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub title: String,
    pub metric: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    /// `values[row][col]`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl AblationTable {
    pub fn is_complete(&self) -> bool {
        self.values.len() == self.rows.len()
            && self
                .values
                .iter()
                .all(|r| r.len() == self.columns.len() && r.iter().all(Option::is_some))
    }

    pub fn render(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .values
            .iter()
            .map(|r| r.iter().map(|v| v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x))).collect())
            .collect();
        let first = self
            .rows
            .iter()
            .map(String::len)
            .chain([self.row_header.len()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([self.columns[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "{} ({}, {})", self.title, self.axis.name(), self.metric);
        let mut line = format!("{:<first$}", self.row_header);
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(line, " | {c:>w$}");
        }
        let _ = writeln!(out, "{line}");
        let _ = writeln!(out, "{}", "-".repeat(line.len()));
        for (name, row) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{name:<first$}");
            for (v, w) in row.iter().zip(&widths) {
                let _ = write!(out, " | {v:>w$}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Trains one experiment and returns held-out mCA.
pub fn run_cell(
    cfg: &ExperimentConfig,
    train: &[LabeledSample],
    heldout: &[LabeledSample],
    joints: usize,
    provider: Option<&dyn SkeletonFeatureProvider>,
) -> Result<f64> {
    let data = prepare(train, cfg, provider)?;
    let model = PiVit::new(cfg, joints)?;
    fit(&model, &data, None)?;
    let stripped = model.strip()?;
    let held: Vec<&LabeledSample> = heldout.iter().collect();
    let (report, _) = evaluate(stripped.backbone(), &held, model.dtype())?;
    Ok(report.mca)
}

/// Runs every cell of `axis`; identical experiments are trained once.
pub fn run_ablation(
    axis: AblationAxis,
    base: &ExperimentConfig,
    train: &[LabeledSample],
    heldout: &[LabeledSample],
    joints: usize,
    provider: Option<&dyn SkeletonFeatureProvider>,
    mut progress: impl FnMut(&str, &str, f64),
) -> Result<AblationTable> {
    let plan = plan(axis, base);
    let mut values = vec![vec![None; plan.columns.len()]; plan.rows.len()];
    let mut done: BTreeMap<String, f64> = BTreeMap::new();
    for cell in &plan.cells {
        let key = serde_json::to_string(&cell.config)?;
        let mca = match done.get(&key) {
            Some(&v) => v,
            None => {
                let v = run_cell(&cell.config, train, heldout, joints, provider)?;
                done.insert(key, v);
                v
            }
        };
        progress(&plan.rows[cell.row], &plan.columns[cell.col], mca);
        values[cell.row][cell.col] = Some(mca);
    }
    Ok(AblationTable {
        axis,
        title: axis.title().into(),
        metric: "held-out mCA %".into(),
        row_header: plan.row_header,
        columns: plan.columns,
        rows: plan.rows,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_cell_is_planned_once() {
        let base = ExperimentConfig::default();
        for axis in AblationAxis::ALL {
            let p = plan(axis, &base);
            let mut seen = vec![vec![0; p.columns.len()]; p.rows.len()];
            for c in &p.cells {
                seen[c.row][c.col] += 1;
                c.config.validate().unwrap();
            }
            assert!(seen.iter().flatten().all(|&n| n == 1), "{}", axis.name());
        }
    }

    #[test]
    fn desk_positions_for_four_layers() {
        assert_eq!(desk_positions(4), (1, 2, 4));
        let p = plan(AblationAxis::Placement3dsim, &ExperimentConfig::default());
        assert_eq!(p.columns, vec!["Baseline", "1", "2", "4", "1,2,4"]);
        let p = plan(AblationAxis::Placement2dsim, &ExperimentConfig::default());
        assert_eq!(p.columns, vec!["1", "2", "4", "1,2", "1,4"]);
    }

    #[test]
    fn axis_names_parse() {
        for axis in AblationAxis::ALL {
            assert_eq!(axis.name().parse::<AblationAxis>().unwrap(), axis);
        }
        assert_eq!("c".parse::<AblationAxis>().unwrap(), AblationAxis::Placement3dsim);
        assert!("z".parse::<AblationAxis>().is_err());
    }
}
