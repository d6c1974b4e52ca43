use std::fs;

use dmnet::bench::{
    count_model_flops, count_params, measure_latency, measure_throughput, read_rows, run_ablation, write_rows,
    BenchRow, Grid, CSV_COLUMNS,
};
use dmnet::data::{generate_dataset, generate_video, SceneConfig};
use dmnet::{DMNetConfig, Model, RunConfig, Variant};

fn flops(v: Variant) -> u64 {
    count_model_flops(&DMNetConfig::default().with_variant(v), 4).unwrap().flops
}

#[test]
fn fashion_cost_ordering() {
    let [nl, clstm, blstm, ela] = Variant::FASHIONS.map(flops);
    assert!(blstm <= ela && ela < nl && nl < clstm, "blstm {blstm} ela {ela} nl {nl} clstm {clstm}");
    assert!(clstm as f64 >= 1.4 * ela as f64);
    assert_eq!(flops(Variant::Ela), ela);
}

#[test]
fn encoder_cost_matches_closed_form() {
    let report = count_model_flops(&DMNetConfig::default(), 4).unwrap();
    // stride-2 3×3 stages at 32×40, 16×20 and 8×10
    let want = 32 * 40 * 16 * 3 * 9 + 16 * 20 * 24 * 16 * 9 + 8 * 10 * 32 * 24 * 9;
    assert_eq!(report.blocks["encoder"], want);
    assert_eq!(report.flops, 2 * report.macs);
    assert_eq!(report.blocks.values().sum::<u64>(), report.macs);
}

#[test]
fn component_costs_add_up() {
    let cost = |v: Variant| count_model_flops(&DMNetConfig::default().with_variant(v), 4).unwrap();
    let (base, ela, aga, full) = (cost(Variant::Baseline), cost(Variant::Ela), cost(Variant::Aga), cost(Variant::DmNet));
    assert_eq!(full.macs - ela.macs, aga.macs - base.macs);
    assert!(base.macs < ela.macs && base.macs < aga.macs && ela.macs < full.macs);
    let fewer = count_model_flops(&DMNetConfig::default(), 2).unwrap();
    assert!(fewer.macs < full.macs);
}

#[test]
fn parameter_counts() {
    let small = count_params(&DMNetConfig::default().with_channels(16));
    let large = count_params(&DMNetConfig::default().with_channels(32));
    assert!(large > small);
    let cfg = DMNetConfig::default();
    assert_eq!(count_params(&cfg), Model::<f32>::new(cfg).unwrap().param_count());
}

#[test]
fn latency_identities_and_errors() {
    let cfg = DMNetConfig { height: 16, width: 24, ..DMNetConfig::default().with_channels(8) };
    let m = Model::<f32>::new(cfg).unwrap();
    let video = generate_video(&SceneConfig { height: 16, width: 24, tool_width: 3.0, tip_length: 3.0, length: 8, ..SceneConfig::default() })
        .unwrap();
    let lat = measure_latency(&m, &video, 20, 5).unwrap();
    assert_eq!(lat.repeats, 20);
    assert!((lat.fps * lat.mean_ms - 1000.0).abs() < 1e-6);
    assert!(lat.std_ms >= 0.0);
    assert!(measure_latency(&m, &video, 0, 5).is_err());
    assert!(measure_latency(&m, &video, 10, 8).is_err());
    assert!(measure_throughput(&m, &video, 5, 5, 2).unwrap() > 0.0);
}

#[test]
fn csv_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let rows = vec![
        BenchRow {
            variant: "ela".into(),
            seed: "0".into(),
            miou: Some(51.25),
            mdice: Some(60.5),
            params: 10,
            flops: 20,
            latency_ms: Some(4.0),
            fps: Some(250.0),
        },
        BenchRow { variant: "aga".into(), seed: "0".into(), miou: None, mdice: None, params: 1, flops: 2, latency_ms: None, fps: None },
    ];
    write_rows(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(read_rows(&path).unwrap(), rows);
    assert!(rows[1].failed() && !rows[0].failed());

    fs::write(&path, "variant,seed\nela,0\n").unwrap();
    assert!(read_rows(&path).is_err());
}

#[test]
fn ablation_grid_writes_and_resumes() {
    let mut cfg = RunConfig::default();
    cfg.set_height(16);
    cfg.set_width(24);
    cfg.model = cfg.model.clone().with_channels(8);
    cfg.scene = SceneConfig { tool_width: 3.0, tip_length: 3.0, length: 7, ..cfg.scene.clone() };
    cfg.train.epochs = 1;
    cfg.train.clips_per_video = 1;
    cfg.seeds = vec![0];
    cfg.latency_repeats = 2;
    let videos = generate_dataset(&cfg.scene, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");

    let mut calls = 0;
    let report = run_ablation(&videos[..2], &videos[2..], Grid::Components, &cfg, &csv, |_| calls += 1).unwrap();
    assert_eq!(calls, 4);
    let names: Vec<_> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["baseline", "ela", "aga", "dmnet"]);
    assert_eq!(report.summary.len(), 4);
    assert_eq!(read_rows(&csv).unwrap().len(), 8);
    assert!(dir.path().join("bench.json").exists());
    for r in &report.rows {
        assert!((r.fps.unwrap() * r.latency_ms.unwrap() - 1000.0).abs() < 1e-6);
    }

    let mut rows = read_rows(&csv).unwrap();
    rows.retain(|r| r.variant != "aga" && !r.is_summary());
    write_rows(&csv, &rows).unwrap();
    let mut rerun = Vec::new();
    let again = run_ablation(&videos[..2], &videos[2..], Grid::Components, &cfg, &csv, |r| rerun.push(r.variant.clone())).unwrap();
    assert_eq!(rerun, ["aga"]);
    let pick = |rows: &[BenchRow]| rows.iter().find(|r| r.variant == "aga").cloned().unwrap();
    let (before, after) = (pick(&report.rows), pick(&again.rows));
    assert_eq!((before.miou, before.mdice, before.flops), (after.miou, after.mdice, after.flops));
}
