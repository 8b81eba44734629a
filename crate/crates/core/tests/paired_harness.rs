//! Seeded paired comparisons between compensated and uncompensated pipelines.

mod common;

use common::{gaussian, median};
use obr::calibration::gen_calibration;
use obr::evaluation::{compare_baselines, BASELINE_OBR_GPTQ, BASELINE_OBR_RTN};
use obr::masking::{MaskMetric, Pattern};
use obr::pipeline::{
    compress_matrix, compress_prune_only, compress_quant_only, compress_stack, compress_stack_with,
    naive_prune_quant, MaskConfig, Mode, PipelineConfig, Propagate, RotationConfig,
};
use obr::quantizer::{QuantizerKind, QuantizerSpec};
use obr::rotation::RotationKind;
use obr::Matrix;

fn joint_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        rotation: RotationConfig {
            kind: RotationKind::Hadamard,
            seed,
        },
        mask: MaskConfig {
            metric: MaskMetric::Wanda,
            pattern: Pattern::Unstructured(0.5),
        },
        quantizer: QuantizerSpec::new(4, QuantizerKind::Rtn),
        alpha: 0.5,
        ..PipelineConfig::default()
    }
}

fn layer_instance(seed: u64) -> (Matrix, Matrix) {
    (
        gaussian(64, 64, 10_000 + seed),
        gen_calibration(64, 512, 0.8, 20_000 + seed).unwrap(),
    )
}

#[test]
fn joint_obr_beats_uncompensated() {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..50 {
        let (w, x) = layer_instance(seed);
        let cfg = joint_config(seed);
        let obr = compress_matrix(&w, &x, &cfg).unwrap().report.rel_recon_error;
        let naive = naive_prune_quant(&w, &x, &cfg).unwrap().report.rel_recon_error;
        wins += (obr < naive) as usize;
        ratios.push(obr / naive);
    }
    println!("joint: wins {wins}/50, median ratio {:.4}", median(ratios.clone()));
    assert!(wins >= 45);
}

#[test]
fn prune_only_never_worse_than_wanda() {
    for ratio in [0.3, 0.5, 0.6] {
        for seed in 0..20 {
            let (w, x) = layer_instance(100 + seed);
            let mut cfg = joint_config(seed);
            cfg.mask.pattern = Pattern::Unstructured(ratio);
            cfg.mode = Mode::PruneOnly;
            let obr = compress_prune_only(&w, &x, &cfg).unwrap().report.rel_recon_error;
            let plain = naive_prune_quant(&w, &x, &cfg).unwrap().report.rel_recon_error;
            assert!(obr <= plain, "ratio {ratio} seed {seed}: {obr} > {plain}");
        }
    }
}

fn total(objectives: &[f64]) -> f64 {
    objectives.iter().sum()
}

#[test]
fn quant_only_beats_rtn() {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..50 {
        let (w, x) = layer_instance(200 + seed);
        let cfg = joint_config(seed);
        let obr = compress_quant_only(&w, &x, &cfg).unwrap();
        let rtn = compress_quant_only(&w, &x, &PipelineConfig { alpha: 0.0, ..cfg.clone() }).unwrap();
        let (a, b) = (total(&obr.report.per_row_objectives), total(&rtn.report.per_row_objectives));
        wins += (a <= b) as usize;
        ratios.push(a / b);
    }
    println!("quant-only: wins {wins}/50, median objective ratio {:.4}", median(ratios));
    assert!(wins >= 40);
}

#[test]
fn baselines_ordering() {
    let mut rtn_ok = 0;
    let mut gptq_vs_rtn = Vec::new();
    let mut r_rtn = Vec::new();
    let mut r_gptq = Vec::new();
    for seed in 0..50 {
        let (w, x) = layer_instance(300 + seed);
        let report = compare_baselines(&w, &x, &joint_config(seed)).unwrap();
        let a = report.baseline_deltas[BASELINE_OBR_RTN];
        let b = report.baseline_deltas[BASELINE_OBR_GPTQ];
        rtn_ok += (a <= 1.0) as usize;
        gptq_vs_rtn.push(b - a);
        r_rtn.push(a);
        r_gptq.push(b);
    }
    println!(
        "baselines: obr_rtn <= 1 on {rtn_ok}/50, median rtn {:.4}, median gptq {:.4}",
        median(r_rtn.clone()),
        median(r_gptq.clone())
    );
    assert!(rtn_ok >= 45);
    assert!(median(r_gptq) <= median(r_rtn));
}

#[test]
fn baselines_report_is_deterministic() {
    let (w, x) = layer_instance(999);
    let a = compare_baselines(&w, &x, &joint_config(1)).unwrap().to_json();
    let b = compare_baselines(&w, &x, &joint_config(1)).unwrap().to_json();
    assert_eq!(a, b);
}

fn stack_layers(seed: u64) -> (Vec<Matrix>, Matrix) {
    let layers = (0..3)
        .map(|k| gaussian(64, 64, 40_000 + 10 * seed + k).scale(0.125))
        .collect();
    (layers, gen_calibration(64, 256, 0.8, 50_000 + seed).unwrap())
}

fn chain_output(layers: &[Matrix], x: &Matrix) -> Matrix {
    layers.iter().fold(x.clone(), |acc, w| w.matmul(&acc).unwrap())
}

#[test]
fn propagation_changes_downstream_hessian() {
    let (layers, x0) = stack_layers(0);
    let cfg = joint_config(0);
    let comp = compress_stack(&layers, &x0, &PipelineConfig { propagate: Propagate::Compressed, ..cfg.clone() }).unwrap();
    let orig = compress_stack(&layers, &x0, &PipelineConfig { propagate: Propagate::Original, ..cfg }).unwrap();
    assert_eq!(comp[0].weights, orig[0].weights);
    // layer 2 calibration differs, so its hessian (and damping) differs
    assert_ne!(comp[1].damp_lambda, orig[1].damp_lambda);
    assert_ne!(comp[1].weights, orig[1].weights);
}

#[test]
fn stack_obr_beats_naive_end_to_end() {
    for seed in 0..20 {
        let (layers, x0) = stack_layers(seed);
        let cfg = joint_config(seed);
        let reference = chain_output(&layers, &x0);
        let run = |results: Vec<obr::CompressionResult>| {
            let ws: Vec<Matrix> = results.iter().map(|r| r.unrotated_weights().unwrap()).collect();
            let out = chain_output(&ws, &x0);
            out.sub(&reference).unwrap().frobenius_norm() / reference.frobenius_norm()
        };
        let obr = run(compress_stack(&layers, &x0, &cfg).unwrap());
        let naive = run(compress_stack_with(&layers, &x0, &cfg, naive_prune_quant).unwrap());
        assert!(obr <= naive, "seed {seed}: {obr} > {naive}");
    }
}
