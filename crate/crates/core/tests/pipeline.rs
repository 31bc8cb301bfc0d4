use std::sync::OnceLock;

use agrg::autodiff::{finite_diff_check_params, Tensor, DEFAULT_DELTA};
use agrg::checkpoint::Checkpoint;
use agrg::config::RunConfig;
use agrg::data::{split_dataset, Splits};
use agrg::heads::{ThresholdFlag, ThresholdVector};
use agrg::pipeline::*;
use agrg::textgen::{token_weights, weighted_sequence_loss};
use agrg::Error;

const TINY: &str = r#"{
  "seed": 3,
  "data": { "k": 3, "shape": [8, 16, 16], "n_train": 24, "n_val": 12, "n_test": 8 },
  "encoder": { "patch": [8, 8, 8], "d_h": 16, "layers": 1, "voxel_channels": 2 },
  "heads": { "d_i": 8, "hidden": 16 },
  "decoder": { "layers": 1, "heads": 2, "d_t": 16, "max_positions": 40 },
  "train": {
    "pretrain": { "epochs": 2, "batch": 4, "lr": 0.001 },
    "heads": { "epochs": 1, "batch": 4, "lr": 0.0001 },
    "decoder": { "epochs": 2, "batch": 16, "lr": 0.003 }
  },
  "beam": { "beam": 2, "max_len": 40 }
}"#;

fn tiny() -> RunConfig {
    RunConfig::from_json(TINY).unwrap()
}

fn splits() -> &'static Splits {
    static S: OnceLock<Splits> = OnceLock::new();
    S.get_or_init(|| {
        let d = tiny().data;
        split_dataset(d.n_train, d.n_val, d.n_test, d.base_seed, &d.registry().unwrap(), &d.synth_params()).unwrap()
    })
}

fn upstream() -> &'static ExperimentSeed {
    static U: OnceLock<ExperimentSeed> = OnceLock::new();
    U.get_or_init(|| ExperimentSeed::train(&tiny(), splits(), true).unwrap())
}

fn full_run() -> &'static AblationRun {
    static R: OnceLock<AblationRun> = OnceLock::new();
    R.get_or_init(|| run_variant_seed(&tiny(), splits(), Variant::Full, upstream()).unwrap())
}

#[test]
fn projector_and_decoder_gradients() {
    let cfg = tiny();
    let model = Model::new(&cfg, Variant::Full).unwrap();
    let x: Vec<f64> = (0..model.projector.d_in()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let ids = model.vocab.encode_sentence(&splits().train.cases.iter().find(|c| !c.report.is_empty()).unwrap().report);
    let ids = &ids[..ids.len().min(8)];
    let w = token_weights(std::iter::once(ids))[0];
    let wrt: Vec<_> = model.text_params().into_iter().collect();
    let err = finite_diff_check_params(&model.store, &wrt, DEFAULT_DELTA, |ctx| {
        let xv = ctx.g.constant(Tensor::row(x.clone()));
        let e = model.projector.forward(ctx, xv)?;
        weighted_sequence_loss(ctx, &model.decoder, e, ids, w)
    })
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn expansion_separates_labels_with_equal_embeddings() {
    let model = Model::new(&tiny(), Variant::Full).unwrap();
    let h_i = vec![0.3; 8];
    let f = CaseFeatures { h: vec![0.0; 16], h_i: vec![h_i.clone(), h_i.clone(), h_i], scores: vec![0.9; 3] };
    let e0 = project_to_text(&model.store, &model.projector, &f.conditioning(Variant::Full, 0).unwrap()).unwrap();
    let e1 = project_to_text(&model.store, &model.projector, &f.conditioning(Variant::Full, 1).unwrap()).unwrap();
    assert_ne!(e0, e1);
    let m0 = f.conditioning(Variant::MultiTask, 0).unwrap();
    assert_eq!(m0, f.conditioning(Variant::MultiTask, 1).unwrap());
    assert_eq!(f.conditioning(Variant::Baseline, 2).unwrap(), f.h);
    assert_eq!(f.conditioning(Variant::Expansion, 1).unwrap().len(), 3 * 16);
}

fn forced(tau: Vec<f64>) -> ThresholdVector {
    let flags = vec![ThresholdFlag::Calibrated; tau.len()];
    ThresholdVector { tau, flags }
}

#[test]
fn forced_thresholds_control_selection() {
    let mut model = Model::restore(&full_run().checkpoint).unwrap();
    let x = splits().test.volume(0).unwrap();
    model.head_thresholds = Some(forced(vec![2.0; 3]));
    let r = generate_report(&model, 11, &x).unwrap();
    assert!(r.empty && r.selected.is_empty() && r.report.is_empty());

    model.head_thresholds = Some(forced(vec![2.0, -1.0, 2.0]));
    let r = generate_report(&model, 11, &x).unwrap();
    assert_eq!(r.selected.len(), 1);
    assert_eq!(r.selected[0].label, 1);
    assert_eq!(r.report, r.selected[0].sentence);
    assert!(!r.empty);
}

#[test]
fn stages_need_their_prerequisites() {
    let cfg = tiny();
    let s = splits();
    assert!(matches!(run_stage(Stage::Decoder, &cfg, s, None, false), Err(Error::MissingPrerequisite(_))));
    let pre = &upstream().pretrain;
    assert!(matches!(run_stage(Stage::Decoder, &cfg, s, Some(pre), false), Err(Error::MissingPrerequisite(_))));
    assert!(matches!(run_stage(Stage::Heads, &cfg, s, None, false), Err(Error::MissingPrerequisite(_))));

    let untrained = Model::restore(pre).unwrap();
    let x = s.test.volume(0).unwrap();
    assert!(matches!(generate_report(&untrained, 0, &x), Err(Error::MissingPrerequisite(_))));
    let mut fresh = Model::new(&cfg, Variant::Full).unwrap();
    fresh.stages.push(Stage::Decoder);
    assert!(matches!(generate_report(&fresh, 0, &x), Err(Error::MissingPrerequisite(_))));
}

#[test]
fn upstream_mismatch_needs_force() {
    let mut other = tiny();
    other.train.pretrain.lr = 0.5;
    let pre = &upstream().pretrain;
    assert!(matches!(run_stage(Stage::Heads, &other, splits(), Some(pre), false), Err(Error::Config(_))));
    other.train.heads.epochs = 0;
    assert!(run_stage(Stage::Heads, &other, splits(), Some(pre), true).is_ok());
}

#[test]
fn text_stage_leaves_upstream_untouched() {
    let run = full_run();
    assert_eq!(run.frozen_before, run.frozen_after);
    let before = Model::restore(upstream().heads.as_ref().unwrap()).unwrap();
    let after = Model::restore(&run.checkpoint).unwrap();
    assert_eq!(
        param_digest(&before.store, &["enc.", "psi.", "heads."]),
        param_digest(&after.store, &["enc.", "psi.", "heads."])
    );
    assert_ne!(param_digest(&before.store, &["phi.", "dec."]), param_digest(&after.store, &["phi.", "dec."]));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let run = full_run();
    let bytes = run.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let model = Model::restore(&back).unwrap();
    let again = generate_split(&model, &splits().test).unwrap();
    assert_eq!(again, run.generations);
}

#[test]
fn generations_follow_split_order() {
    let run = full_run();
    let ids: Vec<u64> = run.generations.iter().map(|g| g.case_id).collect();
    let want: Vec<u64> = splits().test.cases.iter().map(|c| c.id).collect();
    assert_eq!(ids, want);
    for g in &run.generations {
        assert!(g.selected.windows(2).all(|w| w[0].label < w[1].label));
        let joined: Vec<&str> = g.selected.iter().map(|s| s.sentence.as_str()).collect();
        assert_eq!(g.report, joined.join(" "));
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = tiny();
    let a = run_stage(Stage::Pretrain, &cfg, splits(), None, false).unwrap();
    let b = run_stage(Stage::Pretrain, &cfg, splits(), None, false).unwrap();
    assert_eq!(a.checkpoint().unwrap().to_bytes().unwrap(), b.checkpoint().unwrap().to_bytes().unwrap());
    assert_eq!(a.checkpoint().unwrap().to_bytes().unwrap(), upstream().pretrain.to_bytes().unwrap());
    let again = run_variant_seed(&cfg, splits(), Variant::Full, upstream()).unwrap();
    assert_eq!(again.checkpoint.to_bytes().unwrap(), full_run().checkpoint.to_bytes().unwrap());
    assert_eq!(again.metrics.to_json().unwrap(), full_run().metrics.to_json().unwrap());
}

#[test]
fn resumed_stage_continues_counters() {
    let cfg = tiny();
    let pre = &upstream().pretrain;
    let more = run_stage(Stage::Pretrain, &cfg, splits(), Some(pre), false).unwrap();
    assert_eq!(more.losses.iter().map(|l| l.0).collect::<Vec<_>>(), [3, 4]);
    assert_eq!(more.model.stages, [Stage::Pretrain]);
    let step = |m: &Model| m.optimizers["pretrain"].t;
    assert_eq!(step(&more.model), 2 * step(&Model::restore(pre).unwrap()));
}

#[test]
fn variants_reject_foreign_checkpoints() {
    let cfg = RunConfig { expand: false, ..tiny() };
    let err = run_stage(Stage::Decoder, &cfg, splits(), Some(&full_run().checkpoint), false);
    assert!(matches!(err, Err(Error::Config(_))));
}
