use super::*;
use crate::render::{composite, RayBundle};
use std::collections::HashSet;

fn obj(seed: u64) -> SceneObject {
    sample_object(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn sphere(radius: f64, center: [f64; 3], color: [f64; 3]) -> SceneObject {
    SceneObject {
        kind: ShapeKind::Sphere,
        primitives: vec![Primitive::Sphere { center, radius }],
        base_color: color,
        colors: vec![color],
    }
}

#[test]
fn factors_stay_in_range() {
    for s in 0..500 {
        let o = obj(s);
        assert!(o.sizes().iter().all(|&v| (SIZE_RANGE.0..=SIZE_RANGE.1).contains(&v)));
        assert!(o.extent() <= 1.0);
        assert!(o.colors.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
        assert_eq!(o.colors.len(), o.primitives.len());
    }
}

#[test]
fn same_seed_same_object() {
    assert_eq!(obj(17), obj(17));
}

#[test]
fn distinct_seeds_distinct_factors() {
    let mut seen = HashSet::new();
    for s in 0..100 {
        let o = obj(s);
        let key: Vec<u64> = o
            .shape_factors()
            .iter()
            .chain(o.colors.iter().flatten())
            .map(|v| v.to_bits())
            .collect();
        assert!(seen.insert(key), "duplicate factors at seed {s}");
    }
}

#[test]
fn sphere_depth_on_axis() {
    for (r, rho) in [(3.0, 0.5), (4.0, 0.25), (2.5, 0.6)] {
        let ray = Ray {
            origin: [r, 0.0, 0.0],
            direction: [-1.0, 0.0, 0.0],
        };
        let t = trace_reference(&sphere(rho, [0.0; 3], [0.5; 3]), &ray, [1.0; 3]);
        assert!(t.hit);
        assert!((t.depth - (r - rho)).abs() < 1e-12);
    }
}

#[test]
fn miss_returns_background() {
    let ray = Ray {
        origin: [3.0, 0.0, 0.0],
        direction: [0.0, 0.0, 1.0],
    };
    let t = trace_reference(&obj(3), &ray, [0.2, 0.3, 0.4]);
    assert!(!t.hit);
    assert_eq!(t.color, [0.2, 0.3, 0.4]);
}

#[test]
fn box_faces_and_normals() {
    let b = SceneObject {
        kind: ShapeKind::Box,
        primitives: vec![Primitive::Box {
            center: [0.0; 3],
            half: [0.3, 0.4, 0.5],
        }],
        base_color: [1.0; 3],
        colors: vec![[1.0; 3]],
    };
    let ray = Ray {
        origin: [0.1, 0.2, 3.0],
        direction: [0.0, 0.0, -1.0],
    };
    let t = trace_reference(&b, &ray, [0.0; 3]);
    assert!(t.hit && (t.depth - 2.5).abs() < 1e-12);
    let (_, n) = b.primitives[0].intersect(&ray).unwrap();
    assert_eq!(n, [0.0, 0.0, 1.0]);
}

#[test]
fn silhouette_matches_projected_disc() {
    let cfg = DatasetConfig {
        resolution: 128,
        ..DatasetConfig::default()
    };
    let rc = cfg.render_config();
    let rho = 0.6;
    let pose = CameraPose::from_angles(0.3, 1.2, cfg.radius);
    let (_, hits) = render_reference(&sphere(rho, [0.0; 3], [0.5; 3]), &pose, &rc);
    let frac = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let r = cfg.radius;
    let disc = rho / (r * r - rho * rho).sqrt();
    let half = (cfg.fov_y.to_radians() / 2.0).tan();
    let want = std::f64::consts::PI * disc * disc / (4.0 * half * half);
    assert!((frac / want - 1.0).abs() < 0.02, "{frac} vs {want}");
}

#[test]
fn appearance_does_not_change_silhouettes() {
    let rc = DatasetConfig::default().render_config();
    for s in 0..10 {
        let a = obj(s);
        let mut b = a.clone();
        b.colors = b.colors.iter().map(|c| c.map(|v| 1.0 - v)).collect();
        for k in 0..3 {
            let pose = CameraPose::from_angles(0.2 + 0.1 * k as f64, 0.9 * k as f64, 3.0);
            assert_eq!(render_reference(&a, &pose, &rc).1, render_reference(&b, &pose, &rc).1);
        }
    }
}

#[test]
fn radiance_oracle_silhouette_agrees_with_tracer() {
    // constant density inside an off-centre sphere, rendered by the volume renderer
    let mut rc = DatasetConfig::default().render_config();
    rc.samples = 128;
    rc.deterministic = true;
    let center = [0.3, -0.2, 0.25];
    let rho = 0.35;
    for (alt, az) in [(0.3, 0.4), (0.6, 2.5), (-0.2, 4.0)] {
        let pose = CameraPose::from_angles(alt, az, 3.0);
        let (_, hits) = render_reference(&sphere(rho, center, [0.5; 3]), &pose, &rc);
        let pixels: Vec<usize> = (0..rc.pixels()).collect();
        let bundle = RayBundle::<f64>::new(&rc, &pixels, 0);
        let p4 = pose.as_row::<f64>().data;
        let p4 = [p4[0], p4[1], p4[2], p4[3]];
        let m = rc.samples;
        let mut alpha = Vec::new();
        for r in 0..pixels.len() {
            let sig: Vec<f64> = (0..m)
                .map(|s| {
                    let (x, _) = bundle.sample_point(p4, 3.0, r, s);
                    if norm(sub(x, center)) < rho {
                        50.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let out = composite(
                &vec![[0.5; 3]; m],
                &sig,
                &bundle.depths[r * m..(r + 1) * m],
                &bundle.gaps[r * m..(r + 1) * m],
                [1.0; 3],
            )
            .unwrap();
            alpha.push(out.alpha);
        }
        let centroid = |w: &dyn Fn(usize) -> f64| {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for p in 0..rc.pixels() {
                let v = w(p);
                sx += v * (p % rc.width) as f64;
                sy += v * (p / rc.width) as f64;
                sw += v;
            }
            (sx / sw, sy / sw)
        };
        let a = centroid(&|p| alpha[p]);
        let b = centroid(&|p| if hits[p] { 1.0 } else { 0.0 });
        assert!((a.0 - b.0).hypot(a.1 - b.1) < 1.0, "{a:?} vs {b:?}");
    }
}

#[test]
fn mask_rectangles() {
    let img = Image::new(8, 6, 3, (0..144).map(|i| i as f64 / 144.0).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (same, m) = mask_rect(&img, [3, 2, 0, 0], &mut rng);
    assert_eq!(same, img);
    assert!(m.iter().all(|&v| !v));
    let (_, m) = mask_rect(&img, [0, 0, 8, 6], &mut rng);
    assert!(m.iter().all(|&v| v));
    for _ in 0..200 {
        let img = Image::filled(32, 32, 3, 0.5);
        let (out, mask, rect) = apply_mask(&img, (0.15, 0.35), &mut rng).unwrap();
        let f = mask.iter().filter(|&&v| v).count() as f64 / 1024.0;
        assert!((0.15..=0.35).contains(&f), "{f}");
        assert_eq!(f, (rect[2] * rect[3]) as f64 / 1024.0);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for p in 0..1024 {
            if !mask[p] {
                assert_eq!(out.pixel(p), img.pixel(p));
            }
        }
    }
}

#[test]
fn dataset_roundtrip_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        objects: 3,
        views: 2,
        holdout_views: 1,
        resolution: 16,
        seed: 5,
        mask: Some((0.15, 0.35)),
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&cfg, dir.path()).unwrap();
    let n_png = fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(n_png, 3 * 3);
    assert_eq!(ds.training().count(), 6);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, ds.manifest);
    for (a, b) in loaded.records.iter().zip(&ds.records) {
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.image, b.image);
    }
    let scratch = tempfile::tempdir().unwrap();
    for (mr, rec) in ds.manifest.records.iter().zip(&ds.records) {
        let (img, mask) = render_record(&ds.manifest, mr).unwrap();
        let p = scratch.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join(&mr.file)).unwrap());
        assert_eq!(mask, rec.mask);
        // noise confined to the rectangle
        let gt = ds.ground_truth(rec);
        for q in 0..gt.pixels() {
            if !rec.mask.as_ref().is_some_and(|m| m[q]) {
                assert_eq!(gt.pixel(q), rec.image.pixel(q));
            }
        }
        assert_eq!(rec.holdout, rec.mask.is_none());
    }
}

#[test]
fn newer_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        objects: 1,
        views: 1,
        holdout_views: 0,
        resolution: 4,
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&cfg, dir.path()).unwrap();
    let mut m = ds.manifest.clone();
    m.version = MANIFEST_VERSION + 1;
    fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Version { .. })));
}
