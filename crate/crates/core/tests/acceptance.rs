//! Exit criteria. Each test prints one `[PASS]`/`[FAIL]` line before
//! asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use vov3d::analysis::{
    analytic_core_cost, empirical_core_cost, factorization_ratio, measure_trf_span, model_cost, single_trf, trf_profile,
    tosa_trf,
};
use vov3d::blocks::{TOSAConfig, Variant};
use vov3d::data::{gen_tempo_dataset, single_frame_probe, SyntheticTempoSpec, TEMPO_CLASSES};
use vov3d::net::{ArchGraph, Size, Stage, StemConfig, StemTemporal, VoV3D};
use vov3d::ops::Activation;
use vov3d::train::{mean_shifted_drop, run_demo, DemoConfig, RunLog};
use vov3d::{gradcheck, Rng, Shape5};

const VARIANTS: [Variant; 5] = [Variant::Bottleneck, Variant::R21d, Variant::DwBottleneck, Variant::D12d, Variant::D21d];

/// Writes straight to the stdout handle so the line survives test capture.
fn verdict(id: &str, title: &str, ok: bool, detail: &str) {
    let line = format!("\n[{}] criterion {id}: {title} :: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {id} failed: {detail}");
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn criterion_1_cost_formula_equivalence() {
    let mut rng = Rng::new(2024);
    let mut mismatches = Vec::new();
    for case in 0..200 {
        let c = 1 + rng.below(6);
        let t = [1, 3, 5][rng.below(3)];
        let k = [1, 3, 5][rng.below(3)];
        let s = 1 + rng.below(2);
        let h = k + rng.below(33 - k);
        let w = k + rng.below(33 - k);
        let len = 1 + rng.below(32);
        for v in VARIANTS {
            let analytic = analytic_core_cost(v, c as u64, t as u64, k as u64, s as u64, len as u64, h as u64, w as u64);
            let measured = empirical_core_cost(v, c, t, k, s, Shape5::new(1, c, len, h, w)).unwrap();
            if analytic != measured {
                mismatches.push(format!("case {case} {v}: C={c} t={t} k={k} s={s} {len}x{h}x{w} {analytic:?} vs {measured:?}"));
            }
        }
    }
    let detail = format!("200 specs x 5 variants, {} mismatches {:?}", mismatches.len(), mismatches.first());
    verdict("1", "cost-formula equivalence", mismatches.is_empty(), &detail);
}

#[test]
fn criterion_2_parameter_budgets() {
    let m = |size, v| model_cost(size, v, 16, 224).unwrap().mparams();
    let checks = [
        ("M d21d", m(Size::M, Variant::D21d), 3.2, 0.08),
        ("L d21d", m(Size::L, Variant::D21d), 5.8, 0.08),
        ("M dw_bottleneck", m(Size::M, Variant::DwBottleneck), 3.3, 0.15),
        ("M r21d", m(Size::M, Variant::R21d), 20.9, 0.15),
    ];
    let ok = checks.iter().all(|&(_, v, t, r)| within(v, t, r));
    let detail: Vec<String> = checks.iter().map(|(n, v, t, r)| format!("{n} {v:.3}M (target {t} +-{}%)", r * 100.0)).collect();
    verdict("2a", "parameter budgets", ok, &detail.join(", "));
}

#[test]
fn criterion_2_flops_budgets() {
    let g = |v, s| model_cost(Size::M, v, 16, s).unwrap().gflops();
    let (m224, dw224) = (g(Variant::D21d, 224), g(Variant::DwBottleneck, 224));
    let (m256, dw256) = (g(Variant::D21d, 256), g(Variant::DwBottleneck, 256));
    let ok = within(m224, 6.4, 0.15) && within(dw224, 7.0, 0.15);
    let detail = format!(
        "at 16x224^2: M d21d {m224:.3} (target 6.4 +-15%), M dw_bottleneck {dw224:.3} (target 7.0 +-15%); \
         at 16x256^2 for reference: {m256:.3} / {dw256:.3}"
    );
    verdict("2b", "GFLOPs budgets at 224^2", ok, &detail);
}

#[test]
fn criterion_3_factorization_stride_effect() {
    let input = Shape5::new(1, 12, 8, 28, 28);
    let (d2, e2) = factorization_ratio(12, 3, 3, 2, input).unwrap();
    let (d1, e1) = factorization_ratio(12, 3, 3, 1, input).unwrap();
    let ok = d2 * 12 == e2 * 21 && d1 == e1;
    let detail = format!("s=2: {d2}/{e2} = {:.4}; s=1: {d1}/{e1} = {:.4}", d2 as f64 / e2 as f64, d1 as f64 / e1 as f64);
    verdict("3", "factorization stride effect", ok, &detail);
}

fn probe_graph(variant: Variant, rng: &mut Rng) -> ArchGraph {
    let width = 8;
    let stem = StemConfig { c_in: 3, c_out: width, k: 3, stride: 2, t: [1, 3, 5][rng.below(3)], temporal: StemTemporal::Depthwise };
    let stage_count = 1 + rng.below(2);
    let mut c = width;
    let stages = (0..stage_count)
        .map(|i| {
            let c_stage = width + 4 * i;
            let mut b = TOSAConfig::new(variant, c, c_stage, 2 * c_stage, true);
            b.n = 1 + rng.below(3);
            b.t = [1, 3, 5][rng.below(3)];
            b.use_se = false;
            c = c_stage;
            Stage { name: format!("stage{}", i + 2), blocks: vec![b] }
        })
        .collect();
    ArchGraph { name: format!("probe-{variant}"), num_classes: 4, activation: Activation::Relu, stem, stages, conv5: 12, fc1: 8 }
}

#[test]
fn criterion_4_temporal_receptive_field() {
    // Two stacked t=3 temporal convs: 3 then 5.
    let mut g = ArchGraph::tiny(Variant::D21d, 4).with_temporal_kernel(3);
    g.stem.t = 3;
    let p = trf_profile(&g).unwrap();
    let first = p.row("stem.temporal").unwrap().max_trf();
    let second = p.row("stage2.b1.m1.core1").unwrap().max_trf();
    let instance = first == 3 && second == 5;

    let mut rng = Rng::new(77);
    let mut disagreements = Vec::new();
    for i in 0..20 {
        let variant = VARIANTS[i % VARIANTS.len()];
        let graph = probe_graph(variant, &mut rng);
        let frames = 5 + 2 * rng.below(9);
        let profiled = trf_profile(&graph).unwrap().features().max_trf();
        let mut model = VoV3D::build(graph.clone(), &mut rng.fork(i as u64)).unwrap();
        // Zero-initialized residual scales would silence whole branches.
        gradcheck::perturb_norms(&mut model, &mut rng);
        let measured = measure_trf_span(&model, frames, 24, &mut rng).unwrap();
        if measured != profiled.min(frames) {
            disagreements.push(format!("{variant} T={frames}: profiled {profiled}, measured {measured}"));
        }
    }

    let mut diversity = Vec::new();
    for (i, v) in VARIANTS.into_iter().enumerate() {
        let mut cfg = TOSAConfig::new(v, 16, 16, 32, false);
        cfg.n = 1 + i;
        let (concat, _) = tosa_trf(&cfg, single_trf(16, 5)).unwrap();
        let distinct: std::collections::BTreeSet<usize> = concat.iter().flat_map(|g| g.trfs.iter().copied()).collect();
        diversity.push((v, cfg.n, distinct.len()));
    }
    let diverse = diversity.iter().all(|&(_, n, d)| d == n + 1);

    let ok = instance && disagreements.is_empty() && diverse;
    let detail = format!(
        "instance {first}->{second}; oracle disagreements {}/20 {:?}; concat distinct TRFs (variant, n, count) {:?}",
        disagreements.len(),
        disagreements.first(),
        diversity
    );
    verdict("4", "TRF correctness", ok, &detail);
}

#[test]
fn criterion_5_gradient_integrity() {
    let outcomes = gradcheck::run(None, 20, 0).unwrap();
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{} {:.2e}", o.name, o.max_rel_err)).collect();
    let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let detail = format!("{} checks x 20 seeds, worst rel err {worst:.2e}, failures {failed:?}", outcomes.len());
    verdict("5", "gradient integrity", failed.is_empty(), &detail);
}

#[test]
fn criterion_6_shape_contract() {
    let expect = |stage5: usize, conv5: usize| {
        vec![
            ("conv1", (24, 16, 112)),
            ("stage2", (24, 16, 56)),
            ("stage3", (48, 16, 28)),
            ("stage4", (96, 16, 14)),
            ("stage5", (stage5, 16, 7)),
            ("conv5", (conv5, 16, 7)),
            ("pool5", (conv5, 1, 1)),
            ("fc1", (2048, 1, 1)),
            ("fc2", (174, 1, 1)),
        ]
    };
    let mut bad = Vec::new();
    for (size, stage5, conv5) in [(Size::M, 160, 320), (Size::L, 192, 384)] {
        let g = ArchGraph::vov3d(size, Variant::D21d, 174);
        let rows = g.stage_shapes(Shape5::new(1, 3, 16, 224, 224)).unwrap();
        let got: Vec<_> = rows.iter().map(|(n, s)| (n.as_str(), (s.c, s.t, s.h))).collect();
        let square = rows.iter().all(|(_, s)| s.h == s.w);
        if got != expect(stage5, conv5) || !square {
            bad.push(format!("{size:?}: {got:?}"));
        }
    }
    verdict("6", "shape contract", bad.is_empty(), &format!("M and L at 3x16x224^2, mismatches {bad:?}"));
}

/// Criteria 7 and 8 share these runs.
struct Runs {
    full: (VoV3D, RunLog),
    spatial: RunLog,
    single_path: RunLog,
}

fn demo() -> DemoConfig {
    DemoConfig::desk()
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = demo();
        let spatial_cfg = DemoConfig { spatial_only: true, ..base.clone() };
        let single_cfg = DemoConfig { inner_modules: Some(1), ..base.clone() };
        // Independent runs; each is deterministic regardless of scheduling.
        std::thread::scope(|s| {
            let spatial = s.spawn(|| run_demo(&spatial_cfg).unwrap().1);
            let single_path = s.spawn(|| run_demo(&single_cfg).unwrap().1);
            let full = run_demo(&base).unwrap();
            Runs { full, spatial: spatial.join().unwrap(), single_path: single_path.join().unwrap() }
        })
    })
}

#[test]
fn criterion_7_temporal_modeling() {
    let r = runs();
    let full = r.full.1.final_val_top1().unwrap();
    let spatial = r.spatial.final_val_top1().unwrap();
    // The probe gets its own 1024 + 1024 videos drawn from the demo's generator.
    let data = demo().data;
    let train = gen_tempo_dataset(&SyntheticTempoSpec { seed: 101, ..data }, 1024).unwrap();
    let test = gen_tempo_dataset(&SyntheticTempoSpec { seed: 102, ..data }, 1024).unwrap();
    let probe = single_frame_probe(&train, &test, |v| v.label, TEMPO_CLASSES, &mut Rng::new(5)).unwrap();
    let chance = 1.0 / TEMPO_CLASSES as f64;
    let ok = full >= 0.90 && spatial <= chance + 0.10 && probe.test_accuracy <= chance + 0.10;
    let detail = format!(
        "val top-1 {full:.3} (>= 0.900); spatial-only {spatial:.3} (<= {:.3}); single-frame probe {:.3} on {} clips (<= {:.3})",
        chance + 0.10,
        probe.test_accuracy,
        probe.samples,
        chance + 0.10
    );
    verdict("7", "temporal modeling on synthetic tempo data", ok, &detail);
}

#[test]
fn criterion_8_stride_robustness() {
    let r = runs();
    let cfg = demo();
    let tau_train = cfg.train.sampler.stride;
    let table = &r.full.1.robustness;
    let complete = table.iter().map(|row| row.tau).collect::<Vec<_>>() == cfg.taus
        && table.iter().all(|row| (0.0..=1.0).contains(&row.top1))
        && table.iter().any(|row| row.tau == tau_train && row.drop == 0.0);
    let tosa = mean_shifted_drop(table, tau_train);
    let single = mean_shifted_drop(&r.single_path.robustness, tau_train);
    let ok = complete && tosa <= single;
    let fmt = |rows: &[vov3d::train::RobustnessRow]| {
        rows.iter().map(|row| format!("tau {} {:.3}", row.tau, row.top1)).collect::<Vec<_>>().join(", ")
    };
    let detail = format!(
        "T-OSA [{}] mean drop {tosa:.3}; single path [{}] mean drop {single:.3}",
        fmt(table),
        fmt(&r.single_path.robustness)
    );
    verdict("8", "stride robustness", ok, &detail);
}

fn run_cli(dir: &Path, config: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_vov3d"))
        .args(["--seed", "11", "train-demo", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("checkpoints")] {
        let mut entries: Vec<_> = std::fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = DemoConfig::desk();
    cfg.train_videos = 16;
    cfg.val_videos = 8;
    cfg.data.height = 80;
    cfg.data.width = 80;
    cfg.train.epochs = 2;
    cfg.train.warmup_iters = 2;
    let config = tmp.path().join("demo.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&a, &config);
    run_cli(&b, &config);
    let (fa, fb) = (files(&a), files(&b));
    let names: Vec<_> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let ok = fa == fb && names.contains(&"runlog.json") && names.iter().filter(|n| n.ends_with(".weights")).count() == 3;
    verdict("9", "determinism", ok, &format!("files compared byte-for-byte: {names:?}"));
}
