use dfs_wasm::{flops, SpiralDemo};

#[test]
fn flops_json_matches_closed_form() {
    let v: serde_json::Value = serde_json::from_str(&flops(6, 8, 0.5).unwrap()).unwrap();
    assert!((v["reduction"].as_f64().unwrap() - 1.0 / 7.0).abs() < 1e-12);
    for row in v["rows"].as_array().unwrap() {
        assert_eq!(row["forward_closed"], row["forward_tape"]);
        assert_eq!(row["backward_closed"], row["backward_tape"]);
    }
    assert_eq!(v["curve"].as_array().unwrap().len(), 32);
}

#[test]
fn spiral_demo_trains_and_renders() {
    let mut demo = SpiralDemo::new("dfs", 0.5, 0.05, 60, 3).unwrap();
    let p: serde_json::Value = serde_json::from_str(&demo.train(25).unwrap()).unwrap();
    assert_eq!(p["step"], 25);
    assert!(!demo.done());
    let p: serde_json::Value = serde_json::from_str(&demo.train(100).unwrap()).unwrap();
    assert_eq!(p["step"], 60);
    assert!(demo.done());
    assert_eq!(p["test"].as_array().unwrap().len(), 4);

    let cls = demo.regions(3, 20).unwrap();
    assert_eq!(cls.len(), 400);
    assert!(cls.iter().all(|&k| k < 3));
    let pts = demo.test_points();
    assert_eq!(pts.len(), 3 * 300);

    let curve: Vec<serde_json::Value> = serde_json::from_str(&demo.budget_curve().unwrap()).unwrap();
    assert_eq!(curve.len(), 10);
    for r in &curve {
        assert!(r["avg_cost"].as_f64().unwrap() <= r["budget"].as_f64().unwrap());
    }
}

#[test]
fn spiral_demo_matches_core_run() {
    let mut cfg = dfs_core::experiment::RunConfig::spiral_benchmark(dfs_core::Mode::Dfs, 0.5, 2);
    cfg.train.total_steps = 150;
    cfg.train.eval_every = 150;
    let native = dfs_core::experiment::run(&cfg).unwrap();
    let mut demo = SpiralDemo::new("dfs", 0.5, 0.15, 150, 2).unwrap();
    let p: serde_json::Value = serde_json::from_str(&demo.train(150).unwrap()).unwrap();
    let test: Vec<f64> = p["test"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let want: Vec<f64> = native.test.exits.iter().map(|s| s.top1).collect();
    assert_eq!(test, want);
}
