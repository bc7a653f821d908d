use std::fmt::Write as _;
use std::path::Path;

use super::batch::prepare_samples;
use super::config::{DetectorConfig, FusionConfig, Variant};
use super::infer::evaluate;
use super::train::{init_model, train};
use crate::data::{read_dataset, Modalities, SceneSample};
use crate::enhance::EnhanceConfig;
use crate::error::Result;
use crate::losses::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub ap50: f64,
    pub final_loss: f64,
}

/// Everything held fixed across the three variants.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub detector: DetectorConfig,
    pub fusion: FusionConfig,
    pub enhance: EnhanceConfig,
    pub loss: LossConfig,
    pub seeds: Vec<u64>,
}

pub fn modalities(v: Variant) -> Modalities {
    Modalities {
        rgb: v.uses_rgb(),
        height: v.uses_height(),
    }
}

/// Reads train and test splits with only the files `v` consumes.
pub fn load_splits(train_dir: &Path, test_dir: &Path, v: Variant) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    Ok((read_dataset(train_dir, modalities(v))?, read_dataset(test_dir, modalities(v))?))
}

/// Trains every variant for every seed, identically apart from the input
/// streams, and scores AP0.5 on the test split. `load` is asked for the data
/// of each variant so unused modalities never need to be read.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut load: impl FnMut(Variant) -> Result<(Vec<SceneSample>, Vec<SceneSample>)>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let (train_scenes, test_scenes) = load(v)?;
        let train_set = prepare_samples(&train_scenes, &cfg.enhance, v)?;
        let test_set = prepare_samples(&test_scenes, &cfg.enhance, v)?;
        for &seed in &cfg.seeds {
            let dcfg = DetectorConfig {
                variant: v,
                seed,
                ..cfg.detector.clone()
            };
            let mut model = init_model(&dcfg, &cfg.fusion, &cfg.enhance)?;
            let report = train(&mut model, &train_set, &[], &dcfg, &cfg.loss, |_| {})?;
            let (ap50, _) = evaluate(&model, &test_set, &dcfg)?;
            let row = AblationRow {
                variant: v,
                seed,
                ap50,
                final_loss: report.epochs.last().map_or(f64::NAN, |e| e.loss_total),
            };
            log::info!("ablation {} seed {seed}: AP50 {ap50:.4}", v.name());
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn format_ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,rgb,height,seed,ap50\n");
    for r in rows {
        let mark = |b: bool| if b { "yes" } else { "no" };
        writeln!(
            s,
            "{},{},{},{},{:.6}",
            r.variant.name(),
            mark(r.variant.uses_rgb()),
            mark(r.variant.uses_height()),
            r.seed,
            r.ap50
        )
        .unwrap();
    }
    s
}

/// Mean AP per variant in [`Variant::ALL`] order.
pub fn mean_ap(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let aps: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.ap50).collect();
            (v, aps.iter().sum::<f64>() / aps.len().max(1) as f64)
        })
        .collect()
}
