//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line with
//! the measured figures, and exits nonzero if any criterion fails.

mod common;

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mitodet::annotation::{rasterize_shape, synthesize_shape, CentroidLabel, MaskShape};
use mitodet::evaluation::{compute_prf, match_detections, mitotic_activity_score, Detection};
use mitodet::geometry::{generate_anchors, iou, nms, roi_align, BoundingBox, FeatureMap, ScoredBox};
use mitodet::imaging::{estimate_stain_profile, normalize_stains, RasterImage, StainParams};
use mitodet::losses::{mask_bce_loss, run_gradient_suite, smooth_l1, MaskPair, DEFAULT_EPS};
use mitodet::pipeline::{read_png, tile_file_name, write_png};
use mitodet::tiling::{extract_tile, plan_tiles};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn within(elapsed: Duration, limit_ms: u128) -> bool {
    elapsed.as_millis() < limit_ms
}

fn metric_arithmetic() -> Outcome {
    let start = Instant::now();
    let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
    // reference (P, R, F) rows with their tolerances
    let rows = [(0.86, 0.86, 0.86, 1e-12), (0.76, 0.66, 0.708, 0.005), (0.77, 0.66, 0.713, 0.005)];
    let mut ok = true;
    let mut got = Vec::new();
    for (p, r, want, tol) in rows {
        let v = f(p, r);
        ok &= (v - want).abs() <= tol;
        got.push(format!("{v:.4}"));
    }
    // the counting route must agree with the closed form
    let m = compute_prf(86, 14, 14);
    ok &= (m.f_score - 0.86).abs() < 1e-12;
    let m = compute_prf(76, 24, 39);
    ok &= (m.f_score - f(0.76, 76.0 / 115.0)).abs() < 1e-12;
    let elapsed = start.elapsed();
    let ok = ok && within(elapsed, 1);
    Outcome::new(ok, format!("F = [{}], {:?}", got.join(", "), elapsed))
}

fn matching_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_160_901);
    let mut agree = 0;
    for _ in 0..1000 {
        let dets = common::random_points(&mut rng, 6, 100.0);
        let gts = common::random_points(&mut rng, 6, 100.0);
        let detections: Vec<Detection> = dets.iter().map(|p| Detection::new(p.x, p.y, 0.5).unwrap()).collect();
        let m = match_detections(&detections, &gts, 30.0).unwrap();
        if m.tp() == common::brute_force_matching(&dets, &gts, 30.0).0 {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(agree == 1000 && within(elapsed, 5000), format!("{agree}/1000 agree, {elapsed:?}"))
}

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let reports = run_gradient_suite(1000, 42, 1e-6).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| format!("{} {:.1e}", r.op, r.max_rel_err)).collect::<Vec<_>>();
    let ok = reports.len() == 4 && reports.iter().all(|r| r.pass && r.max_rel_err <= 1e-5);
    Outcome::new(ok && within(elapsed, 10_000), format!("{}, {elapsed:?}", worst.join(", ")))
}

fn loss_landmarks() -> Outcome {
    let mut ok = smooth_l1(1.0).0 == 0.5 && smooth_l1(-1.0).0 == 0.5;
    ok &= (smooth_l1(1.0 - 1e-9).0 - 0.5).abs() < 1e-8 && (smooth_l1(1.0 + 1e-9).0 - 0.5).abs() < 1e-8;
    let mut errs = Vec::new();
    for n in [1usize, 28, 512] {
        let pair = MaskPair::uniform(n, n, 0.5, true).unwrap();
        let err = (mask_bce_loss(&pair, DEFAULT_EPS).0 - LN_2).abs();
        ok &= err <= 1e-9;
        errs.push(format!("{n}x{n} {err:.1e}"));
    }
    Outcome::new(ok, format!("smooth_l1(±1) = 0.5, BCE - ln2: {}", errs.join(", ")))
}

fn stain_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1_337);
    let mut recovered = 0;
    for _ in 0..100 {
        let stains = common::random_stains(&mut rng);
        let img = common::beer_lambert_image(&mut rng, 64, &stains);
        if let Ok(p) = estimate_stain_profile(&img, &StainParams::default()) {
            let v = p.stain_vectors();
            if common::angle_deg(&v[0], &stains[0]) < 1.0 && common::angle_deg(&v[1], &stains[1]) < 1.0 {
                recovered += 1;
            }
        }
    }
    let mut worst = Vec::new();
    for _ in 0..10 {
        let img = common::random_textured(&mut rng, 128);
        let diff = estimate_stain_profile(&img, &StainParams::default())
            .ok()
            .and_then(|p| img.max_abs_diff(&normalize_stains(&img, &p, &p)))
            .unwrap_or(u8::MAX);
        worst.push(diff);
    }
    let elapsed = start.elapsed();
    let identity_ok = worst.iter().all(|&d| d <= 1);
    let ok = recovered >= 95 && identity_ok && within(elapsed, 30_000);
    Outcome::new(
        ok,
        format!("{recovered}/100 within 1°, identity max diffs {worst:?}, {elapsed:?}"),
    )
}

fn tiling(dir: &Path) -> Outcome {
    let input = dir.join("slide.png");
    let slide = RasterImage::from_fn(2000, 2000, |x, y| [(x % 251) as u8, (y % 241) as u8, ((x + y) % 239) as u8]);
    write_png(&input, &slide).unwrap();
    let out_dir = dir.join("tiles");
    fs::create_dir_all(&out_dir).unwrap();

    let start = Instant::now();
    let image = read_png(&input).unwrap();
    let plan = plan_tiles(image.width(), image.height(), 512, 0.6).unwrap();
    for tile in plan.tiles(false) {
        write_png(&out_dir.join(tile_file_name(tile.index, tile.origin, false)), &extract_tile(&image, &tile, 512))
            .unwrap();
    }
    let elapsed = start.elapsed();

    let mut covered = vec![false; 2000 * 2000];
    for &(ox, oy) in &plan.origins {
        for y in oy..oy + 512 {
            let row = y as usize * 2000;
            covered[row + ox as usize..row + ox as usize + 512].fill(true);
        }
    }
    let full = covered.iter().all(|&c| c);
    let written = fs::read_dir(&out_dir).unwrap().count();
    let ok = plan.len() == 81 && plan.stride == 204 && full && written == 81 && within(elapsed, 2000);
    Outcome::new(
        ok,
        format!("{} tiles, stride {}, full coverage {full}, {elapsed:?}", plan.len(), plan.stride),
    )
}

fn mask_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let (mut circles, mut ellipses, mut violations) = (0, 0, 0);
    for i in 0..10_000u32 {
        let label = CentroidLabel { slide_id: "s".into(), x: 40 + i % 7, y: 40 + i % 5 };
        match synthesize_shape(&label, &mut rng) {
            shape @ MaskShape::Circle { radius, .. } => {
                circles += 1;
                let r = f64::from(radius);
                let count = rasterize_shape(&shape, 96, 96).count() as f64;
                if !(10..=16).contains(&radius) || (count - PI * r * r).abs() > 4.0 * PI * r {
                    violations += 1;
                }
            }
            MaskShape::Ellipse { a, b, orientation_deg, .. } => {
                ellipses += 1;
                if !(5..=13).contains(&a) || !(5..=13).contains(&b) || ![60, 90].contains(&orientation_deg) {
                    violations += 1;
                }
            }
        }
    }
    Outcome::new(violations == 0, format!("{circles} circles, {ellipses} ellipses, {violations} violations"))
}

fn geometry() -> Outcome {
    let anchors = generate_anchors(3, 2, 16.0).unwrap();
    let per_cell = anchors.iter().filter(|a| a.location == (1, 1)).count();
    let areas_ok = anchors
        .iter()
        .all(|a| (a.bbox.area() / f64::from(a.scale * a.scale) - 1.0).abs() <= 0.01);
    let seventh = iou(&BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), &BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap());
    let iou_ok = (seventh - 1.0 / 7.0).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut nms_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(0..30);
        let thr = rng.random_range(0.1..0.9);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                let (w, h) = (rng.random_range(1.0..40.0), rng.random_range(1.0..40.0));
                ScoredBox { bbox: BoundingBox::new(x, y, x + w, y + h).unwrap(), confidence: rng.random() }
            })
            .collect();
        let kept = nms(&boxes, thr);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                nms_ok &= iou(&boxes[a].bbox, &boxes[b].bbox) <= thr;
            }
        }
    }

    let constant = FeatureMap::from_fn(12, 12, |_, _| 3.25);
    let linear = FeatureMap::from_fn(12, 12, |x, y| 2.0 * x as f64 - 0.5 * y as f64 + 1.0);
    let bbox = BoundingBox::new(1.3, 2.1, 8.7, 9.4).unwrap();
    let mut roi_err = 0.0f64;
    for (map, f) in [(&constant, Box::new(|_: f64, _: f64| 3.25) as Box<dyn Fn(f64, f64) -> f64>),
        (&linear, Box::new(|x: f64, y: f64| 2.0 * x - 0.5 * y + 1.0))]
    {
        let grid = roi_align(map, &bbox, 7, 2).unwrap();
        let (bw, bh) = (bbox.width() / 7.0, bbox.height() / 7.0);
        for row in 0..7 {
            for col in 0..7 {
                let cx = bbox.x1 + (col as f64 + 0.5) * bw;
                let cy = bbox.y1 + (row as f64 + 0.5) * bh;
                roi_err = roi_err.max((grid.get(col, row) - f(cx, cy)).abs());
            }
        }
    }
    let ok = per_cell == 12 && areas_ok && iou_ok && nms_ok && roi_err <= 1e-9;
    Outcome::new(
        ok,
        format!(
            "{per_cell} anchors/cell, areas ok {areas_ok}, IoU {seventh:.15}, NMS ok {nms_ok}, roi_align err {roi_err:.1e}"
        ),
    )
}

fn grading() -> Outcome {
    let bands = [mitotic_activity_score(5), mitotic_activity_score(15), mitotic_activity_score(30)];
    let monotone = (0..50).all(|c| mitotic_activity_score(c) <= mitotic_activity_score(c + 1));
    Outcome::new(bands == [1, 2, 3] && monotone, format!("5/15/30 -> {bands:?}, monotone {monotone}"))
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn reproducibility(dir: &Path) -> Outcome {
    let inputs = dir.join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    write_png(&inputs.join("src.png"), &common::random_textured(&mut rng, 160)).unwrap();
    write_png(&inputs.join("ref.png"), &common::random_textured(&mut rng, 160)).unwrap();
    fs::write(inputs.join("c.csv"), "20,30\n70,40\n120,140\n").unwrap();
    fs::write(
        inputs.join("pred.json"),
        r#"{"slide_id":"s","detections":[{"x":22,"y":31,"confidence":0.9},{"x":90,"y":90,"confidence":0.4}]}"#,
    )
    .unwrap();
    fs::write(inputs.join("boxes.json"), "[[8, 8, 40, 40], [30, 10, 60, 50]]").unwrap();

    let i = |name: &str| inputs.join(name).to_string_lossy().into_owned();
    let run = |out: &Path| -> Vec<(String, Vec<u8>)> {
        fs::create_dir_all(out).unwrap();
        let o = |name: &str| out.join(name).to_string_lossy().into_owned();
        let commands: Vec<Vec<String>> = vec![
            vec!["normalize".into(), "--input".into(), i("src.png"), "--reference".into(), i("ref.png"),
                "--out".into(), o("norm.png"), "--profile-out".into(), o("profiles.json")],
            vec!["tile".into(), "--input".into(), i("src.png"), "--size".into(), "64".into(),
                "--out-dir".into(), o("tiles"), "--manifest".into(), o("plan.json"), "--flip".into()],
            vec!["masks".into(), "--centroids".into(), i("c.csv"), "--width".into(), "160".into(),
                "--height".into(), "160".into(), "--seed".into(), "5".into(), "--out-dir".into(), o("masks")],
            vec!["score".into(), "--pred".into(), i("pred.json"), "--gt".into(), i("c.csv"), "--out".into(), o("score.json")],
            vec!["grade".into(), "--pred".into(), i("pred.json"), "--out".into(), o("grade.json")],
            vec!["losscheck".into(), "--trials".into(), "100".into(), "--seed".into(), "3".into(), "--out".into(), o("grad.json")],
            vec!["anchors".into(), "--grid-width".into(), "4".into(), "--grid-height".into(), "3".into(),
                "--stride".into(), "16".into(), "--boxes".into(), i("boxes.json"), "--out".into(), o("anchors.json")],
        ];
        let mut stdout = Vec::new();
        for args in commands {
            let res = Command::new(env!("CARGO_BIN_EXE_mitodet")).args(&args).output().unwrap();
            assert!(res.status.success(), "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
            stdout.push((args[0].clone(), res.stdout));
        }
        stdout
    };
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    let (out_a, out_b) = (run(&a), run(&b));
    let (snap_a, snap_b) = (snapshot(&a), snapshot(&b));
    let identical = out_a == out_b && snap_a == snap_b;
    Outcome::new(identical && snap_a.len() > 10, format!("7 commands, {} output files, identical {identical}", snap_a.len()))
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("metric arithmetic vs reference rows", Box::new(metric_arithmetic)),
        ("matching vs exhaustive oracle", Box::new(matching_oracle)),
        ("gradient verification", Box::new(gradient_verification)),
        ("loss landmarks", Box::new(loss_landmarks)),
        ("stain recovery and identity normalization", Box::new(stain_recovery)),
        ("tiling 2000x2000 / 512 / 0.6", Box::new(|| tiling(dir.path()))),
        ("mask synthesis bounds", Box::new(mask_bounds)),
        ("geometry", Box::new(geometry)),
        ("grading bands", Box::new(grading)),
        ("CLI reproducibility", Box::new(|| reproducibility(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", i + 1, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
