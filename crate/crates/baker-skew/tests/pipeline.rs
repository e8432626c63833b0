use std::path::Path;

use baker_skew::artifact::to_json;
use baker_skew::dynamics::{iterate, Verdict};
use baker_skew::maps::SkewConfig;
use baker_skew::nonbulging::{run_construction, verify_return, ConstructionConfig, ConstructionFile};
use baker_skew::render::{decode, encode, render, Palette, Plane, RenderJob};
use num_complex::Complex64;

const CUBE: &str = r#"{"fatou":{"a":[1,0]},"g":{"variant":"linear","lambda":[0.5,0],"delta_g":0.9},"h":{"variant":"poly_z","coeffs":[[0,0],[0,0],[0,0],[1,0]]}}"#;

#[test]
fn fiber_orbit_from_config_matches_fatou_map() {
    let map = SkewConfig::from_json(CUBE).unwrap().build(Path::new(".")).unwrap();
    let t = iterate::<f64>(&map, (Complex64::new(3.0, 0.0), Complex64::new(0.0, 0.0)), 20, 1e6, 0.5).unwrap();
    let mut x = 3.0f64;
    for (z, w) in &t.points {
        assert_eq!(z.re, x);
        assert_eq!(*w, Complex64::new(0.0, 0.0));
        x = x + 1.0 + (-x).exp();
    }
    assert!(matches!(t.verdict, Verdict::BudgetExhausted));
}

#[test]
fn construction_round_trip_and_replay() {
    let file = run_construction(&ConstructionConfig::new(1.0 / 80.0, 1)).unwrap();
    assert!(file.passed, "{:?}", file.failure);
    assert_eq!(file.stages.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let mut copy = file.clone();
    copy.write(dir.path()).unwrap();
    assert!(dir.path().join("stage_0.json").exists());
    assert!(dir.path().join("stage_1.json").exists());
    let back = ConstructionFile::read(dir.path()).unwrap();
    assert_eq!(back.stages.len(), 2);
    let replay = verify_return(&back).unwrap();
    assert!(replay.passed);
    assert_eq!(to_json(&replay).unwrap(), to_json(file.verify.as_ref().unwrap()).unwrap());

    std::fs::write(
        dir.path().join("map.json"),
        r#"{"fatou":{"a":[1,0]},"g":{"variant":"linear","lambda":[0.5,0],"delta_g":0.9},"h":{"variant":"staged","file":"construction.json"}}"#,
    )
    .unwrap();
    let text = std::fs::read_to_string(dir.path().join("map.json")).unwrap();
    let map = SkewConfig::from_json(&text).unwrap().build(dir.path()).unwrap();
    let w0 = back.w_values()[0];
    let next = baker_skew::maps::eval_skew::<f64>(&map, &(Complex64::new(back.x0, 0.0), w0)).unwrap();
    assert!(next.0.norm() <= 3.0);
}

#[test]
fn rendered_image_decodes_to_same_buckets() {
    let map = SkewConfig::from_json(CUBE).unwrap().build(Path::new(".")).unwrap();
    let job = RenderJob {
        map,
        plane: Plane::W { z: [4.0, 0.0] },
        center: Complex64::new(0.0, 0.0),
        width: 2.0,
        height: 2.0,
        px_w: 24,
        px_h: 16,
        max_iter: 60,
        escape_re: 40.0,
        return_radius: 0.5,
    };
    let grid = render(&job).unwrap();
    for palette in [Palette::Gray, Palette::Color] {
        let decoded = decode(&encode(&grid, palette)).unwrap();
        let want: Vec<_> = grid.pixels.iter().map(|p| p.bucket()).collect();
        let got = decoded.buckets();
        assert_eq!(got.len(), want.len());
        if palette == Palette::Color {
            assert_eq!(got, want);
        }
    }
}
