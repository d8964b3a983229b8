//! Profiler oracles: enumeration of real weight tensors for the parameter
//! count, an instrumented forward pass for the FLOP count, closed-form
//! arithmetic examples, and the scaling laws.

mod common;

use common::shared_input;
use segformer3d::error::Error;
use segformer3d::model::{Model, ModelConfig};
use segformer3d::profiler::{attention_score_flops, count_flops, count_params};
use segformer3d::tensor::flops;

fn module(report: &segformer3d::profiler::ProfileReport, name: &str) -> (u64, u64) {
    report
        .per_module
        .iter()
        .find(|m| m.name == name)
        .map(|m| (m.params, m.flops))
        .unwrap_or_else(|| panic!("no module row named {name}"))
}

#[test]
fn linear_160_to_256_row_matches_closed_form() {
    // decoder.proj3 of the reference config is Linear(160 -> 256):
    // 160·256 + 256 = 41,216.
    let report = count_params(&ModelConfig::reference()).unwrap();
    assert_eq!(module(&report, "decoder.proj3").0, 41_216);
}

#[test]
fn reference_param_count_is_pinned() {
    let report = count_params(&ModelConfig::reference()).unwrap();
    assert_eq!(report.total_params, 4_367_364);
    assert!(report.total_params >= 4_300_000 && report.total_params <= 4_700_000);

    // Spot-check the breakdown against hand-computed closed forms.
    assert_eq!(module(&report, "stage1.patch").0, 44_000); // 32·4·343+32 + 2·32
    assert_eq!(module(&report, "stage4.blocks").0, 1_636_864);
    assert_eq!(module(&report, "decoder.fuse").0, 262_400); // 1024·256+256
    assert_eq!(module(&report, "decoder.head").0, 1_028); // 256·4+4

    // Totals equal the sum of the breakdown exactly.
    let sum: u64 = report.per_module.iter().map(|m| m.params).sum();
    assert_eq!(report.total_params, sum);
    assert_eq!(report.total_flops, 0);
    assert!(report.input_shape.is_none());
}

#[test]
fn param_counts_match_weight_enumeration_oracle() {
    for cfg in [ModelConfig::tiny(), ModelConfig::reference()] {
        let analytic = count_params(&cfg).unwrap().total_params;
        let model = Model::new(cfg, 3).unwrap();
        let enumerated: u64 = model.named_params().iter().map(|(_, t)| t.numel() as u64).sum();
        assert_eq!(analytic, enumerated);
    }
}

#[test]
fn tiny_flops_match_instrumented_forward_exactly() {
    for shape in [vec![1usize, 2, 32, 32, 32], vec![2, 2, 32, 64, 32]] {
        let analytic = count_flops(&ModelConfig::tiny(), &shape).unwrap().total_flops;
        let model = Model::new(ModelConfig::tiny(), 5).unwrap();
        let (x, _) = shared_input(17, &shape);
        let (out, measured) = flops::measure(|| model.forward(&x).unwrap());
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert_eq!(analytic, measured, "analytic vs instrumented at {shape:?}");
    }
}

#[test]
fn flops_are_independent_of_weight_values() {
    let shape = [1usize, 2, 32, 32, 32];
    let mut counts = Vec::new();
    for seed in [1u64, 99] {
        let model = Model::new(ModelConfig::tiny(), seed).unwrap();
        let (x, _) = shared_input(18, &shape);
        let (_, measured) = flops::measure(|| model.forward(&x).unwrap());
        counts.push(measured);
    }
    assert_eq!(counts[0], counts[1]);
}

#[test]
fn params_are_independent_of_input_shape() {
    let a = count_flops(&ModelConfig::reference(), &[1, 4, 64, 64, 64]).unwrap();
    let b = count_flops(&ModelConfig::reference(), &[2, 4, 128, 128, 128]).unwrap();
    assert_eq!(a.total_params, b.total_params);
    for (ra, rb) in a.per_module.iter().zip(&b.per_module) {
        assert_eq!(ra.name, rb.name);
        assert_eq!(ra.params, rb.params);
    }
}

#[test]
fn score_flop_ratio_at_n_32768_is_exactly_four() {
    let full = attention_score_flops(32_768, 1, 32, 1).unwrap();
    let reduced = attention_score_flops(32_768, 1, 32, 4).unwrap();
    assert_eq!(full, 68_719_476_736);
    assert_eq!(reduced, 17_179_869_184);
    assert_eq!(full, 4 * reduced);
}

#[test]
fn doubling_every_extent_scales_modules_by_the_documented_powers() {
    let cfg = ModelConfig::reference();
    let small = count_flops(&cfg, &[1, 4, 64, 64, 64]).unwrap();
    let large = count_flops(&cfg, &[1, 4, 128, 128, 128]).unwrap();

    // Patch embedding is linear in voxels: exactly x8.
    let (_, p64) = module(&small, "stage1.patch");
    let (_, p128) = module(&large, "stage1.patch");
    assert_eq!(p128, 8 * p64);

    // The decoder is also per-voxel work: every row exactly x8.
    for name in ["decoder.proj1", "decoder.proj4", "decoder.upsample", "decoder.fuse", "decoder.head"]
    {
        let (_, f64v) = module(&small, name);
        let (_, f128v) = module(&large, name);
        assert_eq!(f128v, 8 * f64v, "{name}");
    }

    // Attention scores grow with N²: doubling extents multiplies N by 8 and
    // the score product by 64.
    let n64 = 16usize.pow(3);
    let n128 = 32usize.pow(3);
    let s64 = attention_score_flops(n64, 1, 32, 1).unwrap();
    let s128 = attention_score_flops(n128, 1, 32, 1).unwrap();
    assert_eq!(s128, 64 * s64);
}

#[test]
fn reference_flops_at_128_are_pinned() {
    let report = count_flops(&ModelConfig::reference(), &[1, 4, 128, 128, 128]).unwrap();
    let sum: u64 = report.per_module.iter().map(|m| m.flops).sum();
    assert_eq!(report.total_flops, sum);
    // Stage-1 attention dominates: its N=32768 score product alone is 68.7G,
    // putting the model total at 103.2G under this counting convention.
    assert_eq!(report.total_flops, 103_151_616_000);
    let (_, blocks1) = module(&report, "stage1.blocks");
    assert_eq!(blocks1, 74_142_711_808);
}

#[test]
fn profile_errors_are_structured() {
    let cfg = ModelConfig::tiny();
    match count_flops(&cfg, &[1, 2, 48, 32, 32]) {
        Err(Error::IndivisibleExtent { extent, required }) => {
            assert_eq!((extent, required), (48, 32));
        }
        other => panic!("expected IndivisibleExtent, got {other:?}"),
    }
    assert!(matches!(count_flops(&cfg, &[1, 5, 32, 32, 32]), Err(Error::ShapeMismatch(_))));
    assert!(matches!(count_flops(&cfg, &[1, 2, 32, 32]), Err(Error::ShapeMismatch(_))));
    assert!(matches!(
        attention_score_flops(10, 1, 8, 4),
        Err(Error::ReductionIndivisible { len: 10, reduction: 4 })
    ));
}

#[test]
fn report_renders_table_and_json() {
    let report = count_flops(&ModelConfig::reference(), &[1, 4, 128, 128, 128]).unwrap();
    let table = report.render_table();
    assert!(table.contains("multiply-add = 2 FLOPs"));
    assert!(table.contains("stage1.blocks"));
    assert!(table.contains("total"));

    let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(parsed["total_params"].as_u64(), Some(4_367_364));
    assert_eq!(parsed["counting_convention"].as_str(), Some("multiply-add = 2 FLOPs"));
    assert_eq!(parsed["per_module"].as_array().map(|a| a.len()), Some(report.per_module.len()));
}
