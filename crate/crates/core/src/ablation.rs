//! Runs every supported adaptation setting from one source-trained
//! checkpoint and tabulates target-domain dice.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{AblationRow, Phase, PhaseConfig};
use crate::data::{few_shot_split, Sample};
use crate::error::Result;
use crate::layer::Domain;
use crate::metrics::{evaluate, EvalReport};
use crate::train::{PhaseData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    /// `None` for the unadapted baseline.
    pub row: Option<AblationRow>,
    /// One report per seed.
    pub reports: Vec<EvalReport>,
    /// Mean over seeds of each report's mean dice.
    pub mean_dice: f64,
    /// Parameters that changed during adaptation, per seed.
    pub changed: Vec<Vec<String>>,
    /// Changed set equals the row's designated set for every seed.
    pub ledger_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

/// Adapts with `row`'s flags on the split drawn with `cfg.seed` and
/// evaluates on the held-out target images. Returns the report, the changed
/// parameter names, and whether they match the designated set exactly.
pub fn run_row(
    poly: &Checkpoint,
    target_pool: &[Sample],
    source: &[Sample],
    row: AblationRow,
    base: &PhaseConfig,
) -> Result<(EvalReport, Vec<String>, bool)> {
    let cfg = PhaseConfig {
        phase: Phase::C,
        flags: AblationRow::flags(row),
        ..base.clone()
    };
    let (shots, held_out) = few_shot_split(target_pool, cfg.shots, cfg.seed)?;
    let mut trainer = Trainer::phase_c(poly, cfg.clone())?;
    trainer.run(
        PhaseData {
            source,
            target: &shots,
        },
        |_| {},
    )?;
    let changed = trainer.changed();
    let allowed = trainer.allowed_changes();
    let exact = changed.len() == allowed.len() && changed.iter().all(|n| allowed.contains(n));
    let report = evaluate(&trainer.model, &held_out, Domain::Target, &cfg.digest_hex())?;
    Ok((report, changed.into_iter().collect(), exact))
}

/// Unadapted baseline: the source-trained model on the held-out target
/// images of the split drawn with `seed`.
pub fn baseline(
    poly: &Checkpoint,
    target_pool: &[Sample],
    shots: usize,
    seed: u64,
    digest: &str,
) -> Result<EvalReport> {
    let (_, held_out) = few_shot_split(target_pool, shots, seed)?;
    let model = poly.build_model()?;
    evaluate(&model, &held_out, Domain::Source, digest)
}

/// The baseline plus all six adaptation rows, each run once per seed.
pub fn ablation_suite(
    poly: &Checkpoint,
    target_pool: &[Sample],
    source: &[Sample],
    base: &PhaseConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(1 + AblationRow::ALL.len());
    let reports = seeds
        .iter()
        .map(|&s| baseline(poly, target_pool, base.shots, s, &base.digest_hex()))
        .collect::<Result<Vec<_>>>()?;
    rows.push(summarise(
        "unadapted".into(),
        None,
        reports,
        Vec::new(),
        true,
    ));
    progress("unadapted");
    for row in AblationRow::ALL {
        let (mut reports, mut changed, mut ok) = (Vec::new(), Vec::new(), true);
        for &seed in seeds {
            let cfg = PhaseConfig {
                seed,
                ..base.clone()
            };
            let (r, c, exact) = run_row(poly, target_pool, source, row, &cfg)?;
            reports.push(r);
            changed.push(c);
            ok &= exact;
        }
        rows.push(summarise(
            row.label().into(),
            Some(row),
            reports,
            changed,
            ok,
        ));
        progress(row.label());
    }
    Ok(AblationTable {
        shots: base.shots,
        seeds: seeds.to_vec(),
        rows,
    })
}

fn summarise(
    name: String,
    row: Option<AblationRow>,
    reports: Vec<EvalReport>,
    changed: Vec<Vec<String>>,
    ledger_ok: bool,
) -> RowResult {
    let mean_dice = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len().max(1) as f64;
    RowResult {
        name,
        row,
        reports,
        mean_dice,
        changed,
        ledger_ok,
    }
}

fn class_mean(r: &RowResult, k: usize) -> f64 {
    r.reports.iter().map(|x| x.per_class[k]).sum::<f64>() / r.reports.len().max(1) as f64
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row == Some(row))
    }

    pub fn baseline(&self) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.is_none())
    }

    /// How the standard setting compares with supervised-only adaptation.
    pub fn ordering_note(&self) -> String {
        match (self.row(AblationRow::Standard), self.row(AblationRow::SupK)) {
            (Some(std), Some(sup)) => {
                let rel = if std.mean_dice > sup.mean_dice {
                    "above"
                } else if std.mean_dice < sup.mean_dice {
                    "below"
                } else {
                    "equal to"
                };
                format!(
                    "standard setting mean dice {:.4} is {rel} L_sup + K ({:.4})",
                    std.mean_dice, sup.mean_dice
                )
            }
            _ => "ordering unavailable".into(),
        }
    }

    pub fn to_text(&self) -> String {
        let base = self.baseline().map_or(0.0, |b| b.mean_dice);
        let mut out = String::new();
        let _ = writeln!(out, "shots = {}, seeds = {:?}", self.shots, self.seeds);
        let _ = writeln!(
            out,
            "{:<30} {:>7} {:>7} {:>7} {:>8}  ledger",
            "setting", "disc", "cup", "mean", "gain"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<30} {:>7.4} {:>7.4} {:>7.4} {:>+8.4}  {}",
                r.name,
                class_mean(r, 0),
                class_mean(r, 1),
                r.mean_dice,
                r.mean_dice - base,
                if r.row.is_none() {
                    "-"
                } else if r.ledger_ok {
                    "ok"
                } else {
                    "VIOLATED"
                }
            );
        }
        let _ = writeln!(out, "{}", self.ordering_note());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,disc,cup,mean,ledger_ok\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "\"{}\",{:.6},{:.6},{:.6},{}",
                r.name,
                class_mean(r, 0),
                class_mean(r, 1),
                r.mean_dice,
                r.ledger_ok
            );
        }
        out
    }
}

/// Ensures the checkpoint holds a source-trained polyformer before any row
/// runs, so a bad input fails once instead of six times.
pub fn check_poly_checkpoint(poly: &Checkpoint) -> Result<()> {
    let model = poly.build_model()?;
    if model.polyformer.is_none() || poly.meta.phase != Phase::B {
        return Err(crate::Error::Lifecycle(
            "ablation needs a phase B polyformer checkpoint".into(),
        ));
    }
    Ok(())
}
