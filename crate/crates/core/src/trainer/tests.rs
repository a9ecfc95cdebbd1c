use super::*;
use crate::ad::Tensor;
use crate::inference::{vmf_kl_tape, vmf_sample_tape, RaySubset};
use crate::model::tiny_config;
use crate::synthdata::{generate, DatasetConfig};

fn data(objects: usize, views: usize) -> Dataset {
    generate(&DatasetConfig {
        objects,
        views,
        holdout_views: 0,
        resolution: 8,
        seed: 11,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn config(alg: Algorithm, data: &Dataset) -> TrainConfig {
    let preset = match alg {
        Algorithm::Mcmc => "desk-mcmc",
        Algorithm::Amortized => "desk-amortized",
        Algorithm::AmortizedNopose => "desk-nopose",
    };
    let mut c = TrainConfig::preset(preset).unwrap();
    let variant = c.model.nerf.variant;
    c.model = tiny_config(8, 8);
    c.model.nerf.variant = variant;
    for p in [&mut c.model.prior_a, &mut c.model.prior_s] {
        p.steps = 5;
        p.noise_weight = if alg == Algorithm::Mcmc { 0.0 } else { 1.0 };
    }
    c.encoder.widths = vec![4, 8];
    c.encoder.head_hidden = 8;
    c.encoder.dim_a = 3;
    c.encoder.dim_s = 2;
    c.rays = RaySubset::All;
    c.posterior.rays = RaySubset::All;
    c.batch_size = 2;
    c.views_per_object = 1;
    c.probe_every = 0;
    c.adapt_to(data);
    c.model.render.deterministic = true;
    c
}

fn trainer(alg: Algorithm, data: &Dataset) -> Trainer<f64> {
    Trainer::new(config(alg, data)).unwrap()
}

fn flat(t: &Trainer<f64>) -> [Vec<f64>; 3] {
    [
        t.model.gen.params.flat_values(),
        t.model.ebm_a.params.flat_values(),
        t.model.ebm_s.params.flat_values(),
    ]
}

/// Replaces every image by the model's own rendering at `z = 0`.
fn self_rendered(t: &Trainer<f64>, mut d: Dataset) -> Dataset {
    for r in &mut d.records {
        r.image = t.render(&[0.0; 3], &[0.0; 2], &r.pose).unwrap();
    }
    d
}

#[test]
fn mle_updates_vanish_at_perfect_fit_with_matched_latents() {
    let d = data(3, 2);
    let mut t = trainer(Algorithm::Mcmc, &d);
    let d = self_rendered(&t, d);
    let before = flat(&t);
    let batch = t.draw_batch(&d).unwrap();
    let n = batch.len();
    // fresh persistent chains sit at zero, so z+ = 0 = z-
    let s = t
        .mle_step(&d, &batch, Some((Tensor::zeros(n, 3), Tensor::zeros(n, 2))))
        .unwrap();
    assert!(!s.rejected);
    assert_eq!(s.mse, 0.0);
    assert_eq!(flat(&t), before);
}

fn batch_sse(t: &Trainer<f64>, d: &Dataset, batch: &[BatchItem]) -> f64 {
    batch
        .iter()
        .map(|it| {
            let views = t.views(d, it);
            let s: Vec<Sampling> = views
                .iter()
                .map(|_| Sampling {
                    pixels: (0..64).collect(),
                    seed: 0,
                })
                .collect();
            let c = &t.store.chains[&it.object];
            joint_eval(&t.model, &views, &s, &c.z_a, &c.z_s, None, false)
                .unwrap()
                .sse
        })
        .sum()
}

#[test]
fn theta_update_reduces_batch_loss_with_frozen_latents() {
    let d = data(3, 2);
    let mut cfg = config(Algorithm::Mcmc, &d);
    cfg.latent_lr = 1e-300;
    cfg.lr_theta = 1e-4;
    let mut t = Trainer::new(cfg).unwrap();
    let batch = t.draw_batch(&d).unwrap();
    t.mle_step(&d, &batch, None).unwrap();
    let before = batch_sse(&t, &d, &batch);
    t.mle_step(&d, &batch, None).unwrap();
    let after = batch_sse(&t, &d, &batch);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn diagnostics_are_finite() {
    let d = data(3, 2);
    for alg in [Algorithm::Mcmc, Algorithm::Amortized, Algorithm::AmortizedNopose] {
        let mut t = trainer(alg, &d);
        let s = t.step(&d).unwrap();
        for v in [s.objective, s.mse, s.u_neg_a, s.u_pos_a, s.u_neg_s, s.u_pos_s] {
            assert!(v.is_finite(), "{alg:?}: {s}");
        }
        assert_eq!(s.kappa.is_some(), alg == Algorithm::AmortizedNopose);
        assert_eq!(s.iteration, 1);
        let line = s.to_string();
        assert!(line.starts_with("iter=1 ") && line.contains("u_pos_s="));
    }
}

fn zero_energies(m: &mut Model<f64>) {
    for net in [&mut m.ebm_a, &mut m.ebm_s] {
        let n = net.params.count();
        net.params.set_flat_values(&vec![0.0; n]);
    }
}

fn const_heads(tape: &mut Tape<f64>, mu: f64, scale: f64) -> GaussianHeads {
    GaussianHeads {
        mu_a: tape.constant(Tensor::filled(1, 3, mu)),
        scale_a: tape.constant(Tensor::filled(1, 3, scale)),
        mu_s: tape.constant(Tensor::filled(1, 2, mu)),
        scale_s: tape.constant(Tensor::filled(1, 2, scale)),
    }
}

fn all_pixels() -> Sampling {
    Sampling {
        pixels: (0..64).collect(),
        seed: 3,
    }
}

#[test]
fn elbo_at_reference_posterior_is_reconstruction_only() {
    let d = data(1, 1);
    let mut t = trainer(Algorithm::Amortized, &d);
    zero_energies(&mut t.model);
    let rec = &d.records[0];
    let mut tape = Tape::new();
    let b = t.model.bind(&mut tape, false, false);
    let heads = const_heads(&mut tape, 0.0, 1.0);
    let view = View {
        image: &rec.image,
        mask: None,
        pose: PoseInput::Fixed(rec.pose),
    };
    let eps = (draw_eps(3, &mut t.rng), draw_eps(2, &mut t.rng));
    let e = elbo_terms(&t.model, &mut tape, &b, &view, &all_pixels(), &heads, eps, None).unwrap();
    assert_eq!(tape.value(e.total).item(), tape.value(e.recon).item());
    assert!(tape.value(e.recon).item() < 0.0);
}

#[test]
fn masked_elbo_sums_visible_pixels() {
    let d = data(1, 1);
    let t = trainer(Algorithm::Amortized, &d);
    let rec = &d.records[0];
    let mask: Vec<bool> = (0..64).map(|p| p % 3 == 0 || p > 50).collect();
    let mut tape = Tape::new();
    let b = t.model.bind(&mut tape, false, false);
    let heads = const_heads(&mut tape, 0.2, 0.7);
    let view = View {
        image: &rec.image,
        mask: Some(&mask),
        pose: PoseInput::Fixed(rec.pose),
    };
    let eps = (Tensor::row(vec![0.1, -0.3, 0.5]), Tensor::row(vec![0.9, -0.2]));
    let e = elbo_terms(&t.model, &mut tape, &b, &view, &all_pixels(), &heads, eps, None).unwrap();
    let out = tape.value(e.rendered);
    let s2 = t.model.config.sigma_eps.powi(2);
    let mut manual = 0.0;
    for p in (0..64).filter(|&p| !mask[p]) {
        for c in 0..3 {
            manual -= (out.at(p, c) - rec.image.pixel(p)[c]).powi(2) / (2.0 * s2);
        }
    }
    let got = tape.value(e.recon).item();
    assert!((got - manual).abs() <= 1e-12 * manual.abs(), "{got} vs {manual}");
}

#[test]
fn linear_gaussian_elbo_bounds_marginal() {
    // x = w z + c + noise, z ~ N(0, 1), noise ~ N(0, s^2)
    let (w, c, s, x) = (1.5f64, 0.2, 0.4, 1.1);
    let log_marginal = {
        let v = w * w + s * s;
        -0.5 * ((x - c) * (x - c) / v + (std::f64::consts::TAU * v).ln())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut total = 0.0;
    for _ in 0..n {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::scalar(0.4));
        let scale = tape.constant(Tensor::scalar(0.45));
        let z = reparam_gaussian(&mut tape, mu, scale, draw_eps(1, &mut rng)).unwrap();
        let pred = tape.scale(z, w);
        let target = tape.constant(Tensor::scalar(x - c));
        let sq = tape.sq_error(pred, target, None).unwrap();
        let kl = gaussian_kl_tape(&mut tape, mu, scale, 1.0).unwrap();
        let ll = -tape.value(sq).item() / (2.0 * s * s) - 0.5 * (std::f64::consts::TAU * s * s).ln();
        total += ll - tape.value(kl).item();
    }
    let mean = total / n as f64;
    assert!(mean <= log_marginal, "{mean} > {log_marginal}");
    assert!(mean > log_marginal - 1.0);
}

fn moving_average(v: &[f64], k: usize) -> Vec<f64> {
    v.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}

#[test]
fn vae_steps_improve_smoothed_elbo() {
    let d = data(4, 2);
    let mut t = trainer(Algorithm::Amortized, &d);
    let obj: Vec<f64> = (0..100).map(|_| t.step(&d).unwrap().objective).collect();
    let ma = moving_average(&obj, 20);
    assert!(ma[ma.len() - 1] > ma[0], "{} <= {}", ma[ma.len() - 1], ma[0]);
}

#[test]
fn ebm_update_vanishes_when_prior_matches_encoder_samples() {
    let d = data(3, 2);
    let mut t = trainer(Algorithm::Amortized, &d);
    let batch = t.draw_batch(&d).unwrap();
    let seeds: Vec<u64> = batch.iter().map(|_| t.rng.random()).collect();
    let outs: Vec<ItemOut<f64>> = batch
        .iter()
        .zip(&seeds)
        .flat_map(|(it, &s)| t.vae_item(&d, it, s).unwrap())
        .collect();
    let za: Vec<Tensor<f64>> = outs.iter().map(|o| o.z_a.clone()).collect();
    let zs: Vec<Tensor<f64>> = outs.iter().map(|o| o.z_s.clone()).collect();
    let before = flat(&t);
    let s = t
        .apply(&batch, outs, (rows_to_tensor(&za), rows_to_tensor(&zs)))
        .unwrap();
    assert!(!s.rejected);
    let after = flat(&t);
    assert_eq!(after[1], before[1]);
    assert_eq!(after[2], before[2]);
    assert_ne!(after[0], before[0]);
}

#[test]
fn runs_are_deterministic() {
    let d = data(3, 2);
    for alg in [Algorithm::Mcmc, Algorithm::Amortized, Algorithm::AmortizedNopose] {
        let run = || {
            let mut t = trainer(alg, &d);
            let mut log = Vec::new();
            t.train(&d, 3, &mut log).unwrap();
            (t, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b, "{alg:?}");
    }
}

#[test]
fn pose_kl_is_zero_at_zero_concentration() {
    let mut tape = Tape::<f64>::new();
    let k = tape.constant(Tensor::zeros(1, 1));
    let kl = vmf_kl_tape(&mut tape, k, 2).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);
}

#[test]
fn sampled_poses_are_unit_vectors() {
    let mut tape = Tape::<f64>::new();
    let mu = tape.constant(Tensor::new(3, 2, vec![1.0, 0.0, 0.6, 0.8, 0.0, -1.0]));
    let k = tape.constant(Tensor::new(3, 1, vec![0.0, 5.0, 80.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = vmf_sample_tape(&mut tape, mu, k, &mut rng).unwrap();
    let v = tape.value(x);
    for r in 0..3 {
        let n = v.row_slice(r).iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let pose = CameraPose {
            altitude: [v.at(r, 0), v.at(r, 1)],
            azimuth: [v.at(r, 0), v.at(r, 1)],
            radius: 3.0,
        };
        pose.validate().unwrap();
    }
}

#[test]
fn nopose_steps_improve_smoothed_elbo() {
    let d = generate(&DatasetConfig {
        objects: 4,
        views: 4,
        holdout_views: 0,
        resolution: 8,
        seed: 4,
        ..DatasetConfig::default()
    })
    .unwrap();
    let mut t = trainer(Algorithm::AmortizedNopose, &d);
    let obj: Vec<f64> = (0..200)
        .map(|_| {
            let b = t.draw_batch(&d).unwrap();
            t.nopose_step(&d, &b).unwrap().objective
        })
        .collect();
    let ma = moving_average(&obj, 20);
    assert!(ma[ma.len() - 1] > ma[0], "{} <= {}", ma[ma.len() - 1], ma[0]);
    let mut m = trainer(Algorithm::Mcmc, &d);
    let b = m.draw_batch(&d).unwrap();
    assert!(m.nopose_step(&d, &b).is_err());
}

#[test]
fn pose_histogram_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let angles: Vec<(f64, f64)> = (0..10_000)
        .map(|_| {
            (
                rng.random_range(-0.5..0.5),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        })
        .collect();
    let h = PoseHistogram::from_angles(&angles, 16).unwrap();
    assert!((h.azimuth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((h.altitude.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let uniform = (16f64).ln();
    assert!((h.azimuth_entropy() - uniform).abs() < 0.1 * uniform);
    let p = h.sample(3.0, &mut rng);
    p.validate().unwrap();
    assert!(PoseHistogram::from_angles(&[], 4).is_err());
}

#[test]
fn fixed_pose_dataset_gives_single_bin() {
    let d = generate(&DatasetConfig {
        objects: 1,
        views: 6,
        holdout_views: 0,
        resolution: 8,
        altitude: (20.0, 20.0),
        azimuth: (70.0, 70.0),
        ..DatasetConfig::default()
    })
    .unwrap();
    let t = trainer(Algorithm::AmortizedNopose, &d);
    let h = t.estimate_pose_distribution(&d, 6, 12).unwrap();
    assert_eq!(h.azimuth.iter().filter(|&&m| m > 0.0).count(), 1);
    assert!((h.azimuth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(trainer(Algorithm::Amortized, &d)
        .estimate_pose_distribution(&d, 6, 12)
        .is_err());
}

#[test]
fn checkpoint_roundtrip_is_lossless() {
    let d = data(3, 2);
    let dir = tempfile::tempdir().unwrap();
    for alg in [Algorithm::Mcmc, Algorithm::Amortized, Algorithm::AmortizedNopose] {
        let mut t = trainer(alg, &d);
        t.train(&d, 2, &mut std::io::sink()).unwrap();
        if alg == Algorithm::AmortizedNopose {
            t.pose_hist = Some(t.estimate_pose_distribution(&d, 4, 8).unwrap());
        }
        let p = dir.path().join("a.ckpt");
        checkpoint_save(&t, &p).unwrap();
        let back: Trainer<f64> = checkpoint_load(&p).unwrap();
        assert_eq!(back, t);
        let q = dir.path().join("b.ckpt");
        checkpoint_save(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert!(checkpoint_load::<f32>(&p).is_err());
    }
}

#[test]
fn checkpoint_rejects_newer_versions_and_corruption() {
    let d = data(2, 1);
    let t = trainer(Algorithm::Mcmc, &d);
    let bytes = t.to_bytes().unwrap();
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let n = newer.len();
    let crc = crc32fast::hash(&newer[..n - 4]);
    newer[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(Trainer::<f64>::from_bytes(&newer), Err(Error::Version { .. })));
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    assert!(matches!(Trainer::<f64>::from_bytes(&bad), Err(Error::Checksum { .. })));
    assert!(Trainer::<f64>::from_bytes(&bytes[..20]).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = data(3, 2);
    let dir = tempfile::tempdir().unwrap();
    for alg in [Algorithm::Mcmc, Algorithm::Amortized, Algorithm::AmortizedNopose] {
        let mut full = trainer(alg, &d);
        let mut log_full = Vec::new();
        full.train(&d, 4, &mut log_full).unwrap();

        let mut part = trainer(alg, &d);
        let mut log_part = Vec::new();
        part.train(&d, 2, &mut log_part).unwrap();
        let p = dir.path().join("c.ckpt");
        checkpoint_save(&part, &p).unwrap();
        let mut resumed: Trainer<f64> = checkpoint_load(&p).unwrap();
        resumed.train(&d, 4, &mut log_part).unwrap();
        assert_eq!(log_full, log_part, "{alg:?}");
        assert_eq!(resumed, full, "{alg:?}");
    }
}

#[test]
fn full_visibility_mask_trains_identically() {
    let d = data(3, 2);
    let mut masked = d.clone();
    for r in &mut masked.records {
        r.mask = Some(vec![false; 64]);
    }
    for alg in [Algorithm::Mcmc, Algorithm::Amortized] {
        let mut cfg = config(alg, &d);
        cfg.mask_aware = true;
        let mut a = Trainer::<f64>::new(cfg.clone()).unwrap();
        let mut b = Trainer::<f64>::new(cfg).unwrap();
        a.train(&d, 2, &mut std::io::sink()).unwrap();
        b.train(&masked, 2, &mut std::io::sink()).unwrap();
        assert_eq!(a, b, "{alg:?}");
    }
}

#[test]
fn energy_updates_ignore_pixels() {
    let d = data(3, 2);
    let mut noisy = d.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in &mut noisy.records {
        r.image.data.iter_mut().for_each(|v| *v = rng.random());
    }
    let mut a = trainer(Algorithm::Mcmc, &d);
    let mut b = a.clone();
    let batch = a.draw_batch(&d).unwrap();
    let _ = b.draw_batch(&noisy).unwrap();
    let neg = (Tensor::filled(2, 3, 0.3), Tensor::filled(2, 2, -0.2));
    a.mle_step(&d, &batch, Some(neg.clone())).unwrap();
    b.mle_step(&noisy, &batch, Some(neg)).unwrap();
    let (fa, fb) = (flat(&a), flat(&b));
    assert_eq!(fa[1], fb[1]);
    assert_eq!(fa[2], fb[2]);
    assert_ne!(fa[0], fb[0]);
    // chains moved differently
    assert_ne!(a.store, b.store);
}

#[test]
fn probe_psnr_is_mean_of_image_psnrs() {
    let d = data(2, 3);
    for alg in [Algorithm::Mcmc, Algorithm::Amortized] {
        let mut t = trainer(alg, &d);
        t.train(&d, 2, &mut std::io::sink()).unwrap();
        let recs: Vec<&Record> = d.training().collect();
        let mut sum = 0.0;
        for r in &recs {
            sum += psnr(&t.predict(&d, r).unwrap(), &r.image, 1.0).unwrap();
        }
        let got = t.probe_psnr(&d, recs.len()).unwrap();
        assert!((got - sum / recs.len() as f64).abs() < 1e-12, "{alg:?}");
    }
}

#[test]
fn cross_view_needs_known_poses_and_two_views() {
    let d = data(2, 2);
    let mut c = config(Algorithm::Amortized, &d);
    c.cross_view = true;
    assert!(c.validate().is_err());
    c.views_per_object = 2;
    assert!(c.validate().is_ok());
    for alg in [Algorithm::Mcmc, Algorithm::AmortizedNopose] {
        let mut c = config(alg, &d);
        c.views_per_object = 2;
        c.cross_view = true;
        assert!(c.validate().is_err(), "{alg:?}");
    }
}

#[test]
fn cross_view_sample_explains_the_partner_view() {
    let d = data(1, 2);
    let mut other = d.clone();
    other.records[1].image.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    let item = BatchItem {
        object: 0,
        records: vec![0, 1],
    };
    for cross in [false, true] {
        let mut c = config(Algorithm::Amortized, &d);
        c.views_per_object = 2;
        c.cross_view = cross;
        let t = Trainer::<f64>::new(c).unwrap();
        let a = t.vae_item(&d, &item, 5).unwrap();
        let b = t.vae_item(&other, &item, 5).unwrap();
        // the first view's update sees the second image only through the cross term
        assert_eq!(a[0].grad_gen != b[0].grad_gen, cross);
        assert_eq!(a[0].objective != b[0].objective, cross);
    }
}
