use segcal::calib::Predictor;
use segcal::eval::evaluate_predictor;
use segcal::loss::LossKind;
use segcal::metrics::ConfidenceMode;
use segcal::net::{DropoutConfig, NetParams, LAYER_COUNT};
use segcal::synth::{render_dataset, SynthConfig};
use segcal::train::{
    evaluate_loss, finetune_last_layer, insert_dropout_and_retrain, train, train_regime, DropoutPlacement, TrainConfig,
    WeightRegime,
};
use segcal::{Error, Subject};

fn small_data(n: usize, seed: u64) -> Vec<Subject<f64>> {
    let cfg = SynthConfig {
        grid_size: 24,
        min_axis: 3.0,
        max_axis: 6.0,
        seed,
        ..Default::default()
    };
    render_dataset(&cfg, n).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let data = small_data(4, 0);
    let net = NetParams::init(2);
    let (out, log) = train(&net, &data[..2], &data[2..], &quick(0), &DropoutConfig::none()).unwrap();
    assert_eq!(out, net);
    assert!(log.epochs.is_empty());
}

#[test]
fn training_reduces_validation_loss_and_keeps_frozen_layers() {
    let data = small_data(10, 1);
    let mut net = NetParams::init(3);
    net.set_frozen([true, false, false, false]);
    let before = evaluate_loss(&net, &data[7..], LossKind::CrossEntropy).unwrap();
    let (out, log) = train(&net, &data[..7], &data[7..], &quick(8), &DropoutConfig::none()).unwrap();
    assert_eq!(out.layers[0], net.layers[0]);
    let after = evaluate_loss(&out, &data[7..], LossKind::CrossEntropy).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(log.best_val_loss.unwrap(), after);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = small_data(8, 2);
    let d = DropoutConfig::decoder(0.2).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&NetParams::init(5), &data[..6], &data[6..], &quick(3), &d).unwrap())
    };
    let (a, la) = run(1);
    let (b, lb) = run(4);
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn divergence_is_reported_with_log() {
    let mut data = small_data(4, 3);
    for s in &mut data {
        s.image = s.image.map(|_| f64::MAX);
    }
    let err = train(&NetParams::init(1), &data[..2], &data[2..], &quick(2), &DropoutConfig::none()).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err}");
}

#[test]
fn finetune_requires_ce_and_changes_only_the_head() {
    let data = small_data(8, 4);
    let net = NetParams::init(6);
    let ft = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 4,
        ..Default::default()
    };
    let (out, _) = finetune_last_layer(&net, &data[..6], &data[6..], &ft).unwrap();
    for l in 0..LAYER_COUNT - 1 {
        assert_eq!(out.layers[l].weights, net.layers[l].weights);
        assert_eq!(out.layers[l].bias, net.layers[l].bias);
    }
    assert_ne!(out.layers[3].weights, net.layers[3].weights);
    let sd = TrainConfig {
        loss: LossKind::SoftDice,
        ..ft
    };
    assert!(matches!(
        finetune_last_layer(&net, &data[..6], &data[6..], &sd),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn dropout_retraining_freezes_below_first_site_and_picks_best_rate() {
    let data = small_data(8, 5);
    let pre = quick(6);
    let (base, _) = train_regime(&NetParams::init(7), WeightRegime::Ce, &data[..6], &data[6..], &pre, &pre, None).unwrap();
    let lrs = [1e-3, 1e-4, 1e-5];
    let out = insert_dropout_and_retrain(
        &base,
        DropoutPlacement::Center,
        0.2,
        &data[..6],
        &data[6..],
        LossKind::CrossEntropy,
        &lrs,
        &quick(3),
    )
    .unwrap();
    assert_eq!(out.params.layers[0], {
        let mut l = base.layers[0].clone();
        l.frozen = true;
        l
    });
    assert!(out.params.layers[1..].iter().all(|l| !l.frozen));
    let best = out
        .candidates
        .iter()
        .map(|c| c.best_val_loss)
        .fold(f64::INFINITY, f64::min);
    let chosen = out
        .candidates
        .iter()
        .find(|c| c.learning_rate == out.chosen_learning_rate)
        .unwrap();
    assert_eq!(chosen.best_val_loss, best);
    assert_eq!(out.candidates.len(), 3);
}

#[test]
fn zero_rate_retraining_stays_near_base_loss() {
    let data = small_data(10, 6);
    let cfg = quick(15);
    let (base, _) = train_regime(&NetParams::init(8), WeightRegime::Ce, &data[..7], &data[7..], &cfg, &cfg, None).unwrap();
    let base_loss = evaluate_loss(&base, &data[7..], LossKind::CrossEntropy).unwrap();
    let out = insert_dropout_and_retrain(
        &base,
        DropoutPlacement::Decoder,
        0.0,
        &data[..7],
        &data[7..],
        LossKind::CrossEntropy,
        &[1e-4],
        &quick(3),
    )
    .unwrap();
    let loss = evaluate_loss(&out.params, &data[7..], LossKind::CrossEntropy).unwrap();
    assert!((loss - base_loss).abs() <= 0.05 * base_loss, "{loss} vs {base_loss}");
}

/// Default-sized task: both regimes learn the segmentation, SD predictions are harder.
#[test]
fn ce_and_sd_regimes_on_default_task() {
    let data = render_dataset(&SynthConfig { seed: 11, ..Default::default() }, 50).unwrap();
    let (train_s, rest) = data.split_at(30);
    let (val_s, eval_s) = rest.split_at(10);
    let init = NetParams::init(0);
    let pre = quick(10);
    let main = TrainConfig::default();
    let (ce, _) = train_regime(&init, WeightRegime::Ce, train_s, val_s, &pre, &main, None).unwrap();
    let (sd, _) = train_regime(&init, WeightRegime::Sd, train_s, val_s, &pre, &main, None).unwrap();
    let mode = ConfidenceMode::Prediction;
    let (e_ce, p_ce) = evaluate_predictor(&Predictor::base(ce), eval_s, mode, 20).unwrap();
    let (e_sd, p_sd) = evaluate_predictor(&Predictor::base(sd), eval_s, mode, 20).unwrap();
    assert!(e_ce.mean_dice() >= 0.80, "CE dice {}", e_ce.mean_dice());
    assert!(e_sd.mean_dice() >= e_ce.mean_dice() - 0.02, "SD {} vs CE {}", e_sd.mean_dice(), e_ce.mean_dice());
    let soft = |ps: &[segcal::Grid2D<f64>]| {
        let n: usize = ps.iter().map(|p| p.len()).sum();
        ps.iter().flat_map(|p| p.values()).filter(|&&v| v > 0.05 && v < 0.95).count() as f64 / n as f64
    };
    assert!(soft(&p_sd) < soft(&p_ce));
}
