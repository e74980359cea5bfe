mod common;

use std::time::Instant;

use clnet::config::{ModelConfig, Variant};
use clnet::gradcheck::{finite_diff_check, GradCheckOptions};
use clnet::losses::{total_loss, CaseTargets};
use clnet::model::{forward, init_parameters};

fn check_variant(variant: Variant) {
    let cfg = ModelConfig {
        detach_sim_targets: false,
        ..ModelConfig::tiny().with_variant(variant)
    };
    let params = init_parameters(&cfg, 3).unwrap();
    let case = common::two_lesion_occluded_case();
    let (img_c, img_m) = (case.img_c.to_tensor(), case.img_m.to_tensor());
    let start = Instant::now();
    let report = finite_diff_check(
        &params,
        |g| {
            let f = forward(g, &cfg, &img_c, &img_m, false)?;
            let t = CaseTargets {
                gt_c: &case.gt_c,
                gt_m: &case.gt_m,
                pairs: &case.pairs,
            };
            Ok(total_loss(g, &f, &t, &cfg)?.total)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    println!(
        "{}: {} groups, max rel error {:.3e}, {:.1}s",
        variant.name(),
        report.params.len(),
        report.max_rel_error(),
        start.elapsed().as_secs_f64()
    );
    for p in report.params.iter().filter(|p| !p.passed) {
        println!("  {} idx {} analytic {} numeric {}", p.name, p.worst_index, p.analytic, p.numeric);
    }
    assert!(report.passed(), "failing groups: {:?}", report.failures);
}

#[test]
fn clnet_full_loss_gradients() {
    check_variant(Variant::ClNet);
}
