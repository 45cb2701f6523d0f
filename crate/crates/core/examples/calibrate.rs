//! Trains the acceptance config on three seeds and writes
//! `calibration/criterion5.json`.

use std::path::PathBuf;
use std::time::Instant;

use fmir::dataset::{generate, DatasetSpec, Split};
use fmir::synth::Family;
use fmir::training::{evaluate, ReductionMode, Trainer, TrainConfig};
use serde_json::json;

const DATA_SEED: u64 = 7;
const SEEDS: [u64; 3] = [0, 1, 2];
const MARGIN: f64 = 0.2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let base: TrainConfig = serde_json::from_str(&std::fs::read_to_string(root.join("configs/train-acceptance.json"))?)?;
    let (m, pairs) = generate(&DatasetSpec::default_for(Family::CardiacLike), DATA_SEED)?;
    let pick = |s: Split| m.pairs.iter().zip(&pairs).filter(|(e, _)| e.split == s).map(|(_, p)| p.clone()).collect::<Vec<_>>();
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    let id_epe = test
        .iter()
        .map(|p| {
            let g = p.sample.gt_field.as_slice();
            let n = g.len() / 3;
            (0..n).map(|i| (0..3).map(|c| (g[c * n + i] as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / test.len() as f64;

    let mut runs = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig { seed, ..base.clone() };
        let t = Instant::now();
        let mut tr = Trainer::new(&cfg, &train)?;
        tr.run(|_| Ok(()))?;
        let secs = t.elapsed().as_secs_f64();
        let r = evaluate(&tr.state.model, &cfg, &test, &cfg.features, ReductionMode::Pca)?;
        let a = &r.aggregate;
        let gain = a.mean("dice_mean").unwrap() - a.mean("initial_dice_mean").unwrap();
        let red = 1.0 - a.mean("endpoint_error").unwrap() / id_epe;
        let sd = a.mean("sdlogj").unwrap();
        eprintln!("seed {seed}: dice gain {gain:.3}, epe reduction {red:.4}, sdlogj {sd:.4}, {secs:.0} s");
        runs.push(json!({
            "seed": seed,
            "dice_gain": gain,
            "epe_reduction": red,
            "sdlogj": sd,
            "train_seconds": secs,
        }));
    }
    let worst = |k: &str, f: fn(f64, f64) -> f64, init: f64| runs.iter().map(|r| r[k].as_f64().unwrap()).fold(init, f);
    let lower = |v: f64| v - MARGIN * v.abs();
    let out = json!({
        "config": "configs/train-acceptance.json",
        "dataset_seed": DATA_SEED,
        "identity_epe": id_epe,
        "margin": MARGIN,
        "runs": runs,
        "thresholds": {
            "dice_gain": lower(worst("dice_gain", f64::min, f64::INFINITY)),
            "epe_reduction": lower(worst("epe_reduction", f64::min, f64::INFINITY)),
            "sdlogj_max": worst("sdlogj", f64::max, 0.0) * (1.0 + MARGIN),
        },
    });
    let dir = root.join("calibration");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("criterion5.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(())
}
