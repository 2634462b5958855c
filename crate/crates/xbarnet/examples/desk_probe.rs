//! Scratch probe for desk-scale effect sizes. Not part of the test suite.

use std::time::Instant;

use xbarnet::crossbar::{map_network, monte_carlo_eval, CrossbarGeometry, FaultInjection};
use xbarnet::data::{synthetic_pair, SyntheticConfig};
use xbarnet::dropconnect::{DcPredicate, DropConnectConfig};
use xbarnet::model::EvalOverrides;
use xbarnet::net::{desk_resnet, DeskNetConfig};
use xbarnet::train::{dataset_accuracy, train, TrainConfig};
use xbarnet::transforms::{plan_placement, widen, PlacementPolicy, WidenConfig};
use xbarnet::updatevar::{update_var, RecalibrationConfig};

fn main() {
    let data_cfg = SyntheticConfig::default();
    let (train_set, test_set) = synthetic_pair(&data_cfg);
    let net_cfg = DeskNetConfig::default();
    let tc = TrainConfig::default();
    let f = 0.2;
    let crossbars = 30;

    println!(
        "task: {} classes, {} train / {} test, image {}x{}",
        data_cfg.classes, data_cfg.train, data_cfg.test, data_cfg.image, data_cfg.image
    );

    let mut models = Vec::new();
    for dc_rate in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5] {
        let t0 = Instant::now();
        let net = desk_resnet(&net_cfg);
        let dc = DropConnectConfig::new(dc_rate, tc.seed).unwrap();
        let (model, report) = train(net, &train_set, Some(&dc), &tc).unwrap();
        let clean_acc = dataset_accuracy(&model, &test_set, 64, &EvalOverrides::default()).unwrap();
        println!(
            "dc={dc_rate:.1}: trained {:.1}s, {} iters, loss {:.3}, clean acc {:.3}",
            t0.elapsed().as_secs_f64(),
            report.iterations,
            report.epoch_losses.last().unwrap(),
            clean_acc
        );
        models.push((dc_rate, model));
    }

    // updatevar at p' = f, then Monte-Carlo at fault rate f
    let geom = CrossbarGeometry::default();
    let plan_default = plan_placement(&desk_resnet(&net_cfg), &PlacementPolicy::Default).unwrap();
    println!("\nfault rate {f}, {crossbars} crossbars, default placement:");
    let t0 = Instant::now();
    for (dc_rate, model) in &models {
        let uv = RecalibrationConfig {
            p_primes: vec![f],
            ..Default::default()
        };
        let snaps = update_var(model, &train_set, &uv).unwrap();
        let calibrated = &snaps[0].1;
        let system = map_network(calibrated, &plan_default, &geom).unwrap();
        let mc = monte_carlo_eval(
            calibrated, &system, &test_set, f, crossbars, 1000, FaultInjection::Iid, Some(f), 64,
        )
        .unwrap();
        println!(
            "  dc={dc_rate:.1}: faulty acc {:.3} +/- {:.3} (min {:.3}, max {:.3})",
            mc.mean, mc.stddev, mc.min, mc.max
        );
    }
    println!("  (mc phase took {:.1}s)", t0.elapsed().as_secs_f64());

    // criticality: all-rram + dc on 1x1 vs default
    println!("\ncriticality arms at dc=0.3, f={f}:");
    let net = desk_resnet(&net_cfg);
    let dc_all = DropConnectConfig {
        predicate: DcPredicate::AllConv,
        ..DropConnectConfig::new(0.3, tc.seed).unwrap()
    };
    let (model_b, _) = train(net.clone(), &train_set, Some(&dc_all), &tc).unwrap();
    let uv_all = RecalibrationConfig {
        p_primes: vec![f],
        predicate: DcPredicate::AllConv,
        ..Default::default()
    };
    let snaps_b = update_var(&model_b, &train_set, &uv_all).unwrap();
    let plan_all = plan_placement(&net, &PlacementPolicy::AllRram).unwrap();
    let system_b = map_network(&snaps_b[0].1, &plan_all, &geom).unwrap();
    let mc_b = monte_carlo_eval(
        &snaps_b[0].1, &system_b, &test_set, f, crossbars, 1000, FaultInjection::Iid, Some(f), 64,
    )
    .unwrap();
    println!("  arm B (all-rram, dc on 1x1): {:.3} +/- {:.3}", mc_b.mean, mc_b.stddev);

    // widen 1.2x at dc=0.3
    println!("\nwidened 1.2x at dc=0.3, f={f}:");
    let t0 = Instant::now();
    let (wide_net, _) = widen(&desk_resnet(&net_cfg), &WidenConfig { increase: 0.2 }).unwrap();
    let dc = DropConnectConfig::new(0.3, tc.seed).unwrap();
    let (model_w, _) = train(wide_net.clone(), &train_set, Some(&dc), &tc).unwrap();
    let uv = RecalibrationConfig {
        p_primes: vec![f],
        ..Default::default()
    };
    let snaps_w = update_var(&model_w, &train_set, &uv).unwrap();
    let plan_w = plan_placement(&wide_net, &PlacementPolicy::Default).unwrap();
    let system_w = map_network(&snaps_w[0].1, &plan_w, &geom).unwrap();
    let mc_w = monte_carlo_eval(
        &snaps_w[0].1, &system_w, &test_set, f, crossbars, 1000, FaultInjection::Iid, Some(f), 64,
    )
    .unwrap();
    println!(
        "  widened: {:.3} +/- {:.3} ({:.1}s)",
        mc_w.mean,
        mc_w.stddev,
        t0.elapsed().as_secs_f64()
    );
}
