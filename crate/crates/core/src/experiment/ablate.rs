//! Ablation harness: every variant is trained on the same sample stream per
//! seed, scored on the validation split and compared with a paired t-test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use super::train::run_dir;
use super::{evaluate_model, train_in_memory, write_atomic, Ablation, ExperimentConfig, TrainingSet};
use crate::error::{Error, Result};
use crate::metrics::{paired_ttest, Class, ClassSummary, TTest};
use crate::volume::{Manifest, Split};

/// Named variant of an ablation.
pub type VariantSpec = Ablation;

impl Ablation {
    pub fn baseline(width_multiplier: usize) -> Self {
        Ablation {
            md: false,
            sab: false,
            dcd: false,
            width_multiplier,
        }
    }

    pub fn multi_branch(sab: bool, dcd: bool) -> Self {
        Ablation {
            md: true,
            sab,
            dcd,
            width_multiplier: 1,
        }
    }

    /// Baseline at 1x and `c_out`x width, MD, MD+SAB, MD+DCD, MD+SAB+DCD.
    pub fn standard_variants(c_out: usize) -> Vec<Ablation> {
        vec![
            Ablation::baseline(1),
            Ablation::baseline(c_out),
            Ablation::multi_branch(false, false),
            Ablation::multi_branch(true, false),
            Ablation::multi_branch(false, true),
            Ablation::multi_branch(true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub organ: ClassSummary,
    pub lesion: ClassSummary,
    /// Per validation case, in manifest order.
    pub organ_case_dice: Vec<f64>,
    pub lesion_case_dice: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub params: usize,
    pub runs: Vec<SeedResult>,
}

impl AblationRow {
    fn values(&self, f: impl Fn(&SeedResult) -> f64) -> Vec<f64> {
        self.runs.iter().map(f).collect()
    }

    /// Mean over seeds of the per-seed lesion Dice-per-case.
    pub fn lesion_dice(&self) -> f64 {
        self.values(|r| r.lesion.dice_per_case).iter().mean()
    }

    /// Per-case lesion Dice pooled over seeds (seed-major).
    pub fn pooled_lesion_dice(&self) -> Vec<f64> {
        self.runs.iter().flat_map(|r| r.lesion_case_dice.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub reference: String,
    pub baseline: String,
    /// Reference minus baseline lesion Dice-per-case, one entry per seed.
    pub per_seed_improvement: Vec<f64>,
    /// Paired test on per-case lesion Dice pooled over seeds; absent when
    /// fewer than two pairs exist.
    pub ttest: Option<TTest>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn median_improvement(&self) -> f64 {
        median(&self.per_seed_improvement)
    }

    /// Markdown table: per class Dice-per-case, Dice-global and VOE, as
    /// percentages; `mean ± sd` over seeds when there is more than one.
    pub fn to_text(&self) -> String {
        let with_sd = self.seeds.len() > 1;
        let cell = |v: Vec<f64>| {
            let m = v.iter().mean() * 100.0;
            if with_sd {
                format!("{m:.2} ± {:.2}", v.iter().std_dev() * 100.0)
            } else {
                format!("{m:.2}")
            }
        };
        let mut s = String::new();
        let _ = writeln!(s, "seeds: {:?}\n", self.seeds);
        let _ = writeln!(
            s,
            "| Method | MD | SAB | DCD | Params | Organ Dice per case | Organ Dice global | Organ VOE | Lesion Dice per case | Lesion Dice global | Lesion VOE |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
        let tick = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let mut cols = Vec::new();
            for c in Class::ALL {
                let pick = |f: fn(&ClassSummary) -> f64| {
                    r.values(|run| f(if c == Class::Organ { &run.organ } else { &run.lesion }))
                };
                cols.push(cell(pick(|x| x.dice_per_case)));
                cols.push(cell(pick(|x| x.dice_global)));
                cols.push(cell(pick(|x| x.voe)));
            }
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                r.label,
                tick(r.ablation.md),
                tick(r.ablation.sab),
                tick(r.ablation.dcd),
                r.params,
                cols.join(" | ")
            );
        }
        let _ = writeln!(s, "\n{} vs {} (lesion Dice per case)", self.reference, self.baseline);
        let diffs: Vec<String> = self.per_seed_improvement.iter().map(|d| format!("{:+.2}", d * 100.0)).collect();
        let _ = writeln!(s, "per-seed improvement (points): {}", diffs.join(", "));
        let _ = writeln!(s, "median improvement (points): {:+.2}", self.median_improvement() * 100.0);
        match &self.ttest {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "paired t-test: t = {:.4}, df = {}, p = {:.4} ({} at 0.05){}",
                    t.t,
                    t.df,
                    t.p,
                    if t.significant(0.05) { "significant" } else { "not significant" },
                    if t.degenerate { ", zero-variance differences" } else { "" }
                );
            }
            None => {
                let _ = writeln!(s, "paired t-test: not enough pairs");
            }
        }
        s
    }
}

/// Trains and scores every variant for every seed of `cfg`. `reference` and
/// `baseline` name the pair compared by the t-test and must be among the
/// variants. Per-run artifacts go below `cfg.out_dir`.
pub fn ablate(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    variants: &[Ablation],
    reference: Ablation,
    baseline: Ablation,
) -> Result<AblationTable> {
    if !variants.contains(&reference) || !variants.contains(&baseline) {
        return Err(Error::Config("the compared variants must be part of the ablation".into()));
    }
    let set = TrainingSet::load(manifest, Split::Train, cfg.model.c_in, &cfg.inference)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in variants {
        let vcfg = ExperimentConfig {
            ablation: *v,
            ..cfg.clone()
        };
        vcfg.validate()?;
        let mut runs = Vec::new();
        let mut params = 0;
        for &seed in &cfg.seeds {
            let dir = run_dir(&vcfg, seed);
            let (model, mut record) = train_in_memory(&vcfg, seed, &set, Some(&dir))?;
            params = record.params;
            let report = evaluate_model(&model, manifest, Split::Val, &cfg.inference)?;
            write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
            record.report = Some(dir.join("report.txt"));
            record.organ = Some(report.organ.clone());
            record.lesion = Some(report.lesion.clone());
            let json = serde_json::to_vec_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
            write_atomic(&dir.join("run.json"), &json)?;
            log::info!(
                "{} seed {seed}: lesion Dice per case {:.4}, organ {:.4}",
                record.label,
                report.lesion.dice_per_case,
                report.organ.dice_per_case
            );
            runs.push(SeedResult {
                seed,
                organ_case_dice: report.cases.iter().map(|c| c.organ.dice).collect(),
                lesion_case_dice: report.cases.iter().map(|c| c.lesion.dice).collect(),
                organ: report.organ,
                lesion: report.lesion,
                final_loss: record.epochs.last().map_or(f64::NAN, |e| e.total),
            });
        }
        rows.push(AblationRow {
            label: v.label(),
            ablation: *v,
            params,
            runs,
        });
    }
    let find = |a: Ablation| rows.iter().find(|r| r.ablation == a).expect("checked above");
    let (r, b) = (find(reference), find(baseline));
    let per_seed_improvement = r
        .runs
        .iter()
        .zip(&b.runs)
        .map(|(x, y)| x.lesion.dice_per_case - y.lesion.dice_per_case)
        .collect();
    let (ra, ba) = (r.pooled_lesion_dice(), b.pooled_lesion_dice());
    let ttest = if ra.len() >= 2 { Some(paired_ttest(&ra, &ba)?) } else { None };
    let table = AblationTable {
        seeds: cfg.seeds.clone(),
        reference: r.label.clone(),
        baseline: b.label.clone(),
        per_seed_improvement,
        ttest,
        rows,
    };
    write_atomic(&cfg.out_dir.join("ablation.md"), table.to_text().as_bytes())?;
    let json = serde_json::to_vec_pretty(&table).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&cfg.out_dir.join("ablation.json"), &json)?;
    Ok(table)
}
