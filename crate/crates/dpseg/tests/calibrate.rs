//! Manual calibration probes for the training-based acceptance criteria.
//! Run explicitly: `cargo test --test calibrate -- --ignored --nocapture`.

use dpseg::metrics::MetricsReport;
use dpseg::model::Model;
use dpseg::synth::{build_prompt_bank, generate_corpus, make_text_corpus, organ, tumor, GenParams, GridShape, Stage, Taxonomy};
use dpseg::train::{evaluate_model, run_training, with_flags, AugmentRanges, TrainConfig, TrainData};

fn overfit_taxonomy() -> Taxonomy {
    Taxonomy::new(vec![organ("alpha"), organ("beta"), organ("gamma"), tumor("alpha_mass", 0, Stage::T2)]).unwrap()
}

fn make_data(taxonomy: &Taxonomy, n_cases: usize, seed: u64, presence: f64) -> TrainData<f64> {
    let params = GenParams { tumor_presence: presence, ..GenParams::default() };
    let cases = generate_corpus::<f64>(taxonomy, GridShape::cube(32), n_cases, seed, &params).unwrap();
    let bank = build_prompt_bank(&cases, taxonomy, GridShape::cube(16)).unwrap();
    let corpus = make_text_corpus(taxonomy, seed).unwrap();
    TrainData { taxonomy: taxonomy.clone(), cases, bank, corpus }
}

fn train_eval(cfg: &TrainConfig, data: &TrainData<f64>, eval_cases: &[dpseg::Case], tag: &str) -> MetricsReport {
    let out = std::env::temp_dir().join(format!("dpseg_calib_{tag}_{}", std::process::id()));
    let summary = run_training(cfg, data, &out).unwrap();
    let store = dpseg_tensor::load_params::<f64>(&summary.checkpoint_final).unwrap();
    let model = Model::from_store(cfg.model.clone(), data.taxonomy.clone(), store).unwrap();
    let report = evaluate_model(&model, data, eval_cases, cfg).unwrap();
    std::fs::remove_dir_all(&out).ok();
    report
}

#[test]
#[ignore]
fn calibrate_overfit() {
    let taxonomy = overfit_taxonomy();
    let data = make_data(&taxonomy, 8, 100, 1.0);
    for steps in [500usize, 1000, 2000] {
        let cfg = TrainConfig {
            steps,
            batch_size: 1,
            patch_size: 32,
            weight_decay: 0.0,
            augment: AugmentRanges::identity(),
            checkpoint_every: 10_000,
            seed: 100,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let report = train_eval(&cfg, &data, &data.cases, &format!("overfit_{steps}"));
        println!("steps {steps}: elapsed {:?}", t0.elapsed());
        for (name, stats) in &report.per_category {
            println!("  {name}: dsc {:.4}", stats.dsc.mean);
        }
        println!("  mean dsc {:.4}", report.mean_dsc());
    }
}

#[test]
#[ignore]
fn calibrate_trend() {
    let taxonomy = Taxonomy::new(vec![
        organ("alpha"),
        organ("beta"),
        organ("gamma"),
        tumor("alpha_mass", 0, Stage::T2),
        tumor("beta_inv", 1, Stage::T4),
    ])
    .unwrap();
    let data = make_data(&taxonomy, 10, 200, 0.85);
    let eval_params = GenParams { tumor_presence: 0.85, ..GenParams::default() };
    let eval_cases: Vec<dpseg::Case> = {
        let mut cases = generate_corpus::<f64>(&taxonomy, GridShape::cube(32), 16, 777, &eval_params).unwrap();
        for c in &mut cases {
            c.case_id = format!("heldout_{}", c.case_id);
        }
        cases
    };
    let steps = std::env::var("CALIB_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(250usize);
    let named = [
        ("ap", dpseg::model::AblationFlags { use_ap: true, use_tp: false, hard_assign: false, group_mask: false }),
        ("tp", dpseg::model::AblationFlags { use_ap: false, use_tp: true, hard_assign: false, group_mask: false }),
        ("dual_nomask", dpseg::model::AblationFlags { use_ap: true, use_tp: true, hard_assign: true, group_mask: false }),
        ("full", dpseg::model::AblationFlags { use_ap: true, use_tp: true, hard_assign: true, group_mask: true }),
    ];
    for seed in [1u64, 2, 3] {
        for (name, flags) in named {
            let base = TrainConfig {
                steps,
                batch_size: 1,
                patch_size: 32,
                weight_decay: 0.0,
                augment: AugmentRanges::identity(),
                checkpoint_every: 10_000,
                seed,
                ..TrainConfig::default()
            };
            let cfg = with_flags(&base, flags);
            let t0 = std::time::Instant::now();
            let report = train_eval(&cfg, &data, &eval_cases, &format!("trend_{name}_{seed}"));
            let tumor_mean = (report.category_dsc("alpha_mass").unwrap() + report.category_dsc("beta_inv").unwrap()) / 2.0;
            println!(
                "seed {seed} {name}: tumors {:.4} (mass {:.4}, inv {:.4}) T4 {:.4} organs_mean {:.4} [{:?}]",
                tumor_mean,
                report.category_dsc("alpha_mass").unwrap(),
                report.category_dsc("beta_inv").unwrap(),
                report.per_stage.get("T4").copied().unwrap_or(f64::NAN),
                (report.category_dsc("alpha").unwrap() + report.category_dsc("beta").unwrap() + report.category_dsc("gamma").unwrap()) / 3.0,
                t0.elapsed()
            );
        }
    }
}
